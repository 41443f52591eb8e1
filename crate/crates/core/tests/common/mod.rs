#![allow(dead_code)]

use jitdp::corpus::{CommitRecord, Label, Patch};
use jitdp::head::{
    bce_logit_grad, bce_with_logit, head_backward, head_forward, ClassifierForm, HeadConfig, HeadParams,
    InputMask,
};
use jitdp::EncodedCommit;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// AUC by counting every (positive, negative) pair; ties count one half.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Welch's statistic, Welch–Satterthwaite degrees of freedom, and a
/// two-sided p from the Student t CDF.
pub fn welch_textbook(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let var = |x: &[f64], m: f64| x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (var(a, ma), var(b, mb));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se = (va / na + vb / nb).sqrt();
    let t = (ma - mb) / se;
    let df = (va / na + vb / nb).powi(2) / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).unwrap();
    (t, 2.0 * (1.0 - dist.cdf(t.abs())))
}

/// Scores drawn from a coarse grid so ties are common.
pub fn tied_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(2..=50);
    let levels = rng.gen_range(2..8);
    let scores = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
    let positive = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    (scores, positive)
}

pub fn record(id: usize, n_patches: usize, label: Label) -> CommitRecord {
    let patches = (0..n_patches)
        .map(|p| Patch::from_changes([format!("x{p} = {id}")], [format!("y{p}")]))
        .collect();
    CommitRecord::new(format!("c{id}"), label, vec!["fix".into(), format!("m{id}")], patches)
}

fn params_as_vec(p: &HeadParams<f64>) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    p.for_each_tensor(|_, t| out.push(t.to_vec()));
    out
}

fn nudge(p: &HeadParams<f64>, tensor: usize, index: usize, delta: f64) -> HeadParams<f64> {
    let mut q = p.clone();
    let mut i = 0;
    q.for_each_tensor_mut(|_, t| {
        if i == tensor {
            t[index] += delta;
        }
        i += 1;
    });
    q
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

pub struct GradCase {
    pub config: HeadConfig,
    pub parameters: usize,
    pub max_rel_error: f64,
    pub attempts: usize,
}

/// Analytic vs central-difference gradients for one random head
/// (d=8, K=4, h=8). Instances within 1e-3 of a ReLU or max-pool kink are
/// redrawn, since finite differences are meaningless there.
pub fn check_head_gradients(case: u64, eps: f64) -> GradCase {
    let window_size = 1 + (case % 2) as usize;
    let classifier = if case % 5 == 4 { ClassifierForm::Literal } else { ClassifierForm::TwoLayer };
    let branches = match case % 4 {
        1 => InputMask::CodeOnly,
        3 => InputMask::MessageOnly,
        _ => InputMask::Full,
    };
    let config = HeadConfig {
        window: 4,
        window_size,
        num_filters: 4,
        hidden_dim: 8,
        fusion_dim: 8,
        embedding_dim: 8,
        dropout: 0.0,
        classifier,
        branches,
    };
    for attempt in 0..10_000 {
        let mut rng = ChaCha8Rng::seed_from_u64(case * 100_003 + attempt);
        let mut params = HeadParams::<f64>::init(&config, rng.gen());
        params.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5)));
        let mut code = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));
        if case % 3 == 0 {
            code.row_mut(0).fill(0.0); // a padding slot
        }
        let encoded = EncodedCommit {
            code,
            message: Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0)),
        };
        let target = (case % 2) as f64;
        let loss = |p: &HeadParams<f64>, e: &EncodedCommit<f64>| {
            let tr = head_forward(p, e, branches, None).unwrap();
            bce_with_logit(tr.logit, target, 1.0)
        };
        let trace = head_forward(&params, &encoded, branches, None).unwrap();
        if trace.kink_margin() < 1e-3 {
            continue;
        }
        let mut grads = params.zeros_like();
        let (g_code, g_msg) =
            head_backward(&params, &encoded, &trace, bce_logit_grad(trace.logit, target, 1.0), &mut grads);

        let analytic = params_as_vec(&grads);
        let mut worst: f64 = 0.0;
        let mut count = 0;
        for (ti, tensor) in analytic.iter().enumerate() {
            for (i, &a) in tensor.iter().enumerate() {
                let up = loss(&nudge(&params, ti, i, eps), &encoded);
                let down = loss(&nudge(&params, ti, i, -eps), &encoded);
                worst = worst.max(rel_err(a, (up - down) / (2.0 * eps)));
                count += 1;
            }
        }
        // input gradients feed the trainable embedding table
        if branches.uses_code() {
            for idx in 0..encoded.code.len() {
                let (r, c) = (idx / 8, idx % 8);
                let mut up = encoded.clone();
                up.code[[r, c]] += eps;
                let mut down = encoded.clone();
                down.code[[r, c]] -= eps;
                let n = (loss(&params, &up) - loss(&params, &down)) / (2.0 * eps);
                worst = worst.max(rel_err(g_code[[r, c]], n));
            }
        }
        if branches.uses_message() {
            for c in 0..8 {
                let mut up = encoded.clone();
                up.message[c] += eps;
                let mut down = encoded.clone();
                down.message[c] -= eps;
                let n = (loss(&params, &up) - loss(&params, &down)) / (2.0 * eps);
                worst = worst.max(rel_err(g_msg[c], n));
            }
        }
        return GradCase {
            config,
            parameters: count,
            max_rel_error: worst,
            attempts: attempt as usize + 1,
        };
    }
    panic!("no kink-free instance for case {case}");
}
