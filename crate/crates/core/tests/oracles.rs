mod common;

use approx::assert_abs_diff_eq;
use jitdp::corpus::{split, Corpus, Label, SplitSpec};
use jitdp::encode::{toy_token_vector, Backbone};
use jitdp::head::{head_forward, ClassifierForm, Classifier, HeadConfig, HeadParams, InputMask};
use jitdp::metrics::{auc, confusion, evaluate, f1_from, t_test, PredictionResult};
use jitdp::{EncodedCommit, JitModelF64};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// computed by a separate Python implementation of FNV-1a + splitmix64
const FIX: [f64; 4] = [-0.6914151483762898, 0.030343612712655066, 0.19269748539009934, 0.9734963908894283];
const BUG: [f64; 4] = [-0.6087518066876658, -0.8159142302928679, -0.25723750458243155, -0.10330348981559623];
const A: [f64; 4] = [-0.25653807312918175, 0.9962446380938241, 0.9842130280619599, 0.3718817262284182];
const B: [f64; 4] = [-0.32059806669609126, -0.2882312861281078, 0.2547685837929925, -0.6288300934447089];
const FIX_BUG_MEAN: [f64; 4] = [-0.6500834775319778, -0.3927853087901064, -0.032270009596166105, 0.43509645053691604];

#[test]
fn toy_vectors_match_frozen_values() {
    assert_eq!(toy_token_vector("fix", 4), FIX);
    assert_eq!(toy_token_vector("bug", 4), BUG);
    assert_eq!(toy_token_vector("a", 4), A);
    assert_eq!(toy_token_vector("b", 4), B);
    let m = Backbone::<f64>::toy(4).encode_message(&["fix".to_string(), "bug".to_string()]);
    for (got, want) in m.iter().zip(FIX_BUG_MEAN) {
        assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
    }
}

// direct loop transcription of the head, no ndarray algebra
fn reference_score(p: &HeadParams<f64>, e: &EncodedCommit<f64>, cfg: &HeadConfig) -> f64 {
    let relu = |x: f64| x.max(0.0);
    let mut z = Vec::new();
    if let Some(c) = &p.code {
        for f in 0..cfg.num_filters {
            let mut best = f64::NEG_INFINITY;
            for start in 0..=(cfg.window - cfg.window_size) {
                let mut acc = c.bias[f];
                for r in 0..cfg.window_size {
                    for j in 0..cfg.embedding_dim {
                        acc += c.filters[[f, r, j]] * e.code[[start + r, j]];
                    }
                }
                best = best.max(relu(acc));
            }
            z.push(best);
        }
    }
    if let Some(m) = &p.message {
        for i in 0..cfg.hidden_dim {
            let mut acc = m.bias[i];
            for j in 0..cfg.embedding_dim {
                acc += m.weight[[i, j]] * e.message[j];
            }
            z.push(acc);
        }
    }
    let logit = match &p.classifier {
        Classifier::TwoLayer { hidden_weight, hidden_bias, out_weight, out_bias } => {
            let mut out = out_bias[0];
            for r in 0..hidden_bias.len() {
                let mut acc = hidden_bias[r];
                for (j, zj) in z.iter().enumerate() {
                    acc += hidden_weight[[r, j]] * zj;
                }
                out += out_weight[r] * relu(acc);
            }
            out
        }
        Classifier::Literal { weight, bias } => relu(z.iter().zip(weight).map(|(a, b)| a * b).sum::<f64>() + bias[0]),
    };
    1.0 / (1.0 + (-logit).exp())
}

#[test]
fn head_agrees_with_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..60 {
        let cfg = HeadConfig {
            window_size: 1 + case % 4,
            num_filters: 3 + case % 5,
            hidden_dim: 2 + case % 3,
            fusion_dim: 4,
            embedding_dim: 5,
            classifier: if case % 3 == 0 { ClassifierForm::Literal } else { ClassifierForm::TwoLayer },
            branches: [InputMask::Full, InputMask::CodeOnly, InputMask::MessageOnly][case % 3],
            ..HeadConfig::default()
        };
        let mut p = HeadParams::<f64>::init(&cfg, case as u64);
        p.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1)));
        let e = EncodedCommit {
            code: Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0)),
            message: Array1::from_shape_fn(5, |_| rng.gen_range(-1.0..1.0)),
        };
        let got = head_forward(&p, &e, cfg.branches, None).unwrap().score;
        assert_abs_diff_eq!(got, reference_score(&p, &e, &cfg), epsilon = 1e-12);
    }
}

#[test]
fn toy_model_scores_are_reproducible() {
    let records = (0..6).map(|i| common::record(i, i, Label::Clean)).collect();
    let corpus = Corpus::new("c", records);
    let cfg = HeadConfig::default().with_embedding_dim(16);
    let a = JitModelF64::new(Backbone::toy(16), cfg, 4).unwrap().predict(&corpus).unwrap();
    let b = JitModelF64::new(Backbone::toy(16), cfg, 4).unwrap().predict(&corpus).unwrap();
    assert_eq!(a, b);
    for (p, r) in a.iter().zip(&corpus.records) {
        let m = JitModelF64::new(Backbone::toy(16), cfg, 4).unwrap();
        let e = m.encode(r);
        assert_abs_diff_eq!(p.score, reference_score(&m.head, &e, &cfg), epsilon = 1e-12);
    }
}

#[test]
fn welch_matches_statrs_on_fixed_samples() {
    let a: Vec<f64> = (0..30).map(|i| ((i * 7919) % 101) as f64 / 101.0).collect();
    let b: Vec<f64> = (0..30).map(|i| 0.1 + ((i * 104_729) % 97) as f64 / 120.0).collect();
    let got = t_test(&a, &b).unwrap();
    let (t, p) = common::welch_textbook(&a, &b);
    assert_abs_diff_eq!(got.t, t, epsilon = 1e-10);
    assert_abs_diff_eq!(got.p, p, epsilon = 1e-10);
}

#[test]
fn separated_samples_have_tiny_p() {
    let a: Vec<f64> = (0..20).map(|i| i as f64 * 1e-6).collect();
    let b: Vec<f64> = (0..20).map(|i| 1.0 + i as f64 * 1e-6).collect();
    let r = t_test(&a, &b).unwrap();
    assert!(r.t < -1e5);
    assert!(r.p < 1e-12);
}

fn preds(scores: &[f64], labels: &[u8]) -> Vec<PredictionResult> {
    scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (s, l))| PredictionResult::new(format!("c{i}"), *s, if *l == 1 { Label::Defective } else { Label::Clean }))
        .collect()
}

#[test]
fn worked_metric_examples() {
    let c = confusion(&preds(&[0.9, 0.2], &[1, 0]), 0.5).unwrap();
    assert_eq!((c.tp, c.tn, c.fp, c.fn_), (1, 1, 0, 0));
    let c = confusion(&preds(&[0.9, 0.2], &[0, 1]), 0.5).unwrap();
    assert_eq!((c.fp, c.fn_), (1, 1));

    // one concordant and one discordant pair
    assert_eq!(auc(&preds(&[0.9, 0.8, 0.3], &[1, 0, 1])).value, 0.5);
    assert_eq!(auc(&preds(&[0.2, 0.2, 0.2], &[1, 0, 1])).value, 0.5);
    assert_eq!(auc(&preds(&[0.9, 0.7, 0.3, 0.1], &[1, 1, 0, 0])).value, 1.0);
    assert!(auc(&preds(&[0.9, 0.7], &[1, 1])).undefined);

    assert_abs_diff_eq!(f1_from(0.17, 0.70).value, 0.2736, epsilon = 1e-4);
    assert_abs_diff_eq!(f1_from(0.11, 0.98).value, 0.1978, epsilon = 1e-4);

    let r = evaluate(&preds(&[0.9, 0.1, 0.8, 0.2], &[1, 1, 0, 0]), 0.5).unwrap();
    assert_eq!((r.accuracy.value, r.precision.value, r.recall.value, r.f1.value), (0.5, 0.5, 0.5, 0.5));
}

#[test]
fn qt_scale_split_sizes() {
    // QT has 25704 commits
    let records = (0..25_704).map(|i| common::record(i, 1, Label::Clean)).collect();
    let (train, test) = split(&Corpus::new("qt", records), &SplitSpec::default()).unwrap();
    assert_eq!((train.len(), test.len()), (20_563, 5_141));
}
