//! Seeded synthetic corpora for smoke tests and demos.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CommitRecord, Corpus, Label, Patch};

/// Token planted in a patch or message of every defective commit.
pub const BUG_TOKEN: &str = "BUGTOKEN";

/// Where the label signal lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    /// `BUG_TOKEN` appears in one patch of each defective commit.
    Code,
    /// `BUG_TOKEN` appears in the message of each defective commit.
    Message,
    /// Labels are independent of content.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub records: usize,
    pub defect_rate: f64,
    pub signal: Signal,
    pub max_patches: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            records: 100,
            defect_rate: 0.3,
            signal: Signal::Code,
            max_patches: 4,
            seed: 0,
        }
    }
}

const WORDS: &[&str] = &[
    "int", "return", "if", "else", "for", "while", "self", "value", "count", "index", "buffer",
    "node", "list", "map", "get", "set", "update", "config", "error", "result", "=", "+", "(",
    ")", "{", "}", ";", "null", "true", "false", "size", "len", "key", "item", "data", "path",
];
const MESSAGE_WORDS: &[&str] = &[
    "fix", "add", "update", "remove", "refactor", "cleanup", "support", "handle", "test", "docs",
    "typo", "merge", "bump", "version", "improve", "move", "rename", "use", "the", "for",
];

fn line(rng: &mut ChaCha8Rng, extra: Option<&str>) -> String {
    let n = rng.gen_range(1..5);
    let mut toks: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).expect("non-empty")).collect();
    if let Some(t) = extra {
        let at = rng.gen_range(0..=toks.len());
        toks.insert(at, t);
    }
    let marker = if rng.gen_bool(0.7) { "added:" } else { "removed:" };
    format!("{marker} {}", toks.join(" "))
}

/// Generates `spec.records` commits named `synthetic-<i>`.
pub fn synthetic_corpus(name: &str, spec: &SyntheticSpec) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let records = (0..spec.records)
        .map(|i| {
            let defective = rng.gen_bool(spec.defect_rate.clamp(0.0, 1.0));
            let n_patches = rng.gen_range(1..=spec.max_patches.max(1));
            let bug_patch = (defective && spec.signal == Signal::Code).then(|| rng.gen_range(0..n_patches));
            let patches = (0..n_patches)
                .map(|p| {
                    let n_lines = rng.gen_range(1..3);
                    let bug_line = (bug_patch == Some(p)).then(|| rng.gen_range(0..n_lines));
                    Patch::new(
                        (0..n_lines)
                            .map(|l| line(&mut rng, (bug_line == Some(l)).then_some(BUG_TOKEN)))
                            .collect(),
                    )
                })
                .collect();
            let mut message: Vec<String> = (0..rng.gen_range(2..8))
                .map(|_| MESSAGE_WORDS.choose(&mut rng).expect("non-empty").to_string())
                .collect();
            if defective && spec.signal == Signal::Message {
                let at = rng.gen_range(0..=message.len());
                message.insert(at, BUG_TOKEN.to_string());
            }
            let label = if defective { Label::Defective } else { Label::Clean };
            CommitRecord::new(format!("synthetic-{i}"), label, message, patches)
        })
        .collect();
    Corpus::new(name, records)
}
