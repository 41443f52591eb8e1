mod common;

use jitdp::corpus::{few_shot_sample, split, write_records, CommitRecord, Corpus, Label, Patch, SplitMode, SplitSpec};
use jitdp::encode::{assemble_patches, Backbone};
use jitdp::head::{head_forward, ClassifierForm, HeadConfig, HeadParams, InputMask};
use jitdp::metrics::{auc_from_scores, confusion, f1_from, t_test, PredictionResult};
use jitdp::EncodedCommit;
use ndarray::{Array1, Array2};
use num_rational::Ratio;
use proptest::prelude::*;

fn label_strategy() -> impl Strategy<Value = Label> {
    prop_oneof![Just(Label::Clean), Just(Label::Defective)]
}

fn line_strategy() -> impl Strategy<Value = String> {
    (prop::bool::ANY, "[a-z_=+(){};0-9 ]{0,20}").prop_map(|(added, body)| {
        let body = body.split_whitespace().collect::<Vec<_>>().join(" ");
        let marker = if added { "added:" } else { "removed:" };
        if body.is_empty() { marker.to_string() } else { format!("{marker} {body}") }
    })
}

fn record_strategy() -> impl Strategy<Value = CommitRecord> {
    (
        "[a-f0-9]{6,12}",
        label_strategy(),
        prop::collection::vec("[a-z]{1,8}", 0..6),
        prop::collection::vec(prop::collection::vec(line_strategy(), 1..4), 0..10),
    )
        .prop_map(|(id, label, msg, patches)| {
            CommitRecord::new(id, label, msg, patches.into_iter().map(Patch::new).collect())
        })
}

fn corpus_of(n: usize, defective_every: usize) -> Corpus {
    let records = (0..n)
        .map(|i| {
            let label = if i % defective_every == 0 { Label::Defective } else { Label::Clean };
            common::record(i, 1 + i % 5, label)
        })
        .collect();
    Corpus::new("p", records)
}

proptest! {
    #[test]
    fn window_keeps_most_recent_patches(r in record_strategy()) {
        let w = assemble_patches(&r, 4);
        let n = r.patches.len();
        prop_assert_eq!(w.len(), 4);
        prop_assert_eq!(w.padding(), 4usize.saturating_sub(n));
        prop_assert_eq!(&w.patches[w.padding()..], &r.patches[n.saturating_sub(4)..]);
        let code = Backbone::<f64>::toy(6).encode_commit_code(&w);
        for row in code.rows().into_iter().take(w.padding()) {
            prop_assert!(row.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn canonical_lines_round_trip(records in prop::collection::vec(record_strategy(), 1..8)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut bytes = Vec::new();
        write_records(&mut bytes, &records).unwrap();
        std::fs::write(&path, &bytes).unwrap();
        let back = jitdp::corpus::load_corpus(&path).unwrap();
        prop_assert_eq!(&back.records, &records);
        let mut again = Vec::new();
        write_records(&mut again, &back.records).unwrap();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn split_partitions_the_corpus(n in 2usize..400, fraction in 0.05f64..0.95, seed in 0u64..50, shuffled in prop::bool::ANY) {
        let c = corpus_of(n, 3);
        let mode = if shuffled { SplitMode::Shuffled } else { SplitMode::Chronological };
        let spec = SplitSpec { train_fraction: fraction, seed, mode };
        let Ok((train, test)) = split(&c, &spec) else {
            // only tiny corpora may fail, when one side would be empty
            prop_assert!(((n as f64) * fraction).floor() == 0.0 || ((n as f64) * fraction).floor() as usize == n);
            return Ok(());
        };
        prop_assert_eq!(train.len() + test.len(), n);
        prop_assert_eq!(train.len(), (n as f64 * fraction + 1e-9).floor() as usize);
        let mut ids: Vec<&str> = train.records.iter().chain(&test.records).map(|r| r.commit_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        if !shuffled {
            prop_assert_eq!(&train.records[..], &c.records[..train.len()]);
        }
    }

    #[test]
    fn few_shot_is_balanced(n in 0usize..120, seed in 0u64..1000) {
        let c = corpus_of(300, 2);
        let s = few_shot_sample(&c, n, seed).unwrap();
        prop_assert_eq!(s.len(), n);
        prop_assert_eq!(s.defect_count(), n.div_ceil(2));
        prop_assert_eq!(s, few_shot_sample(&c, n, seed).unwrap());
    }

    #[test]
    fn auc_matches_pairwise_count(scores in prop::collection::vec(0u8..6, 2..40), labels in prop::collection::vec(prop::bool::ANY, 40)) {
        let s: Vec<f64> = scores.iter().map(|v| f64::from(*v) / 5.0).collect();
        let pos = &labels[..s.len()];
        let got = auc_from_scores(&s, pos);
        let want = common::pairwise_auc(&s, pos);
        prop_assert_eq!(got.is_some(), want.is_some());
        if let (Some(g), Some(w)) = (got, want) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_ignores_monotone_transforms(scores in prop::collection::vec(0.001f64..0.999, 2..40), labels in prop::collection::vec(prop::bool::ANY, 40)) {
        let pos = &labels[..scores.len()];
        let squared: Vec<f64> = scores.iter().map(|s| s * s).collect();
        prop_assert_eq!(auc_from_scores(&scores, pos), auc_from_scores(&squared, pos));
    }

    #[test]
    fn flipping_labels_complements_auc(scores in prop::collection::hash_set(0u32..100_000, 2..40), labels in prop::collection::vec(prop::bool::ANY, 40)) {
        let s: Vec<f64> = scores.into_iter().map(|v| f64::from(v) / 100_000.0).collect();
        let pos = &labels[..s.len()];
        let flipped: Vec<bool> = pos.iter().map(|p| !p).collect();
        if let (Some(a), Some(b)) = (auc_from_scores(&s, pos), auc_from_scores(&s, &flipped)) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_identities_hold_exactly(cases in prop::collection::vec((0.0f64..1.0, prop::bool::ANY), 1..60), threshold in 0.05f64..0.95) {
        let preds: Vec<PredictionResult> = cases
            .iter()
            .enumerate()
            .map(|(i, (s, d))| PredictionResult::new(format!("c{i}"), *s, if *d { Label::Defective } else { Label::Clean }))
            .collect();
        let c = confusion(&preds, threshold).unwrap();
        prop_assert_eq!(c.total() as usize, preds.len());
        let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for p in &preds {
            match (p.score > threshold, p.label.is_defective()) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        prop_assert_eq!((c.tp, c.fp, c.tn, c.fn_), (tp, fp, tn, fn_));
        prop_assert_eq!(c.accuracy().value, (tp + tn) as f64 / preds.len() as f64);
        if tp + fp > 0 {
            let (num, den) = c.precision_ratio();
            prop_assert_eq!(Ratio::new(num, den) * Ratio::from_integer(tp + fp), Ratio::from_integer(tp));
        } else {
            prop_assert!(c.precision().undefined);
        }
    }

    #[test]
    fn f1_stays_within_bounds(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
        let f = f1_from(p, r);
        prop_assert!(f.value <= 2.0 * p.min(r) + 1e-12);
        prop_assert!(f.value >= p.min(r) - 1e-12 || f.value == 0.0);
        prop_assert!(f.value <= p.max(r) + 1e-12);
        prop_assert_eq!(f.value == 0.0, p == 0.0 || r == 0.0);
    }

    #[test]
    fn t_test_is_antisymmetric(a in prop::collection::vec(-5.0f64..5.0, 2..30), b in prop::collection::vec(-5.0f64..5.0, 2..30)) {
        let ab = t_test(&a, &b).unwrap();
        let ba = t_test(&b, &a).unwrap();
        prop_assert_eq!(ab.t, -ba.t);
        prop_assert!((ab.p - ba.p).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.p));
    }

    #[test]
    fn scores_stay_in_unit_interval(seed in 0u64..500, literal in prop::bool::ANY, k in 1usize..=4) {
        let cfg = HeadConfig {
            window_size: k,
            num_filters: 6,
            hidden_dim: 5,
            fusion_dim: 7,
            embedding_dim: 8,
            classifier: if literal { ClassifierForm::Literal } else { ClassifierForm::TwoLayer },
            ..HeadConfig::default()
        };
        let params = HeadParams::<f64>::init(&cfg, seed);
        let e = EncodedCommit {
            code: Array2::from_shape_fn((4, 8), |(i, j)| ((seed as usize * 31 + i * 8 + j) as f64).sin()),
            message: Array1::from_shape_fn(8, |j| ((seed as usize + j) as f64).cos()),
        };
        let tr = head_forward(&params, &e, InputMask::Full, None).unwrap();
        prop_assert!(tr.score > 0.0 && tr.score < 1.0);
        if literal {
            prop_assert!(tr.score >= 0.5);
        }
    }
}
