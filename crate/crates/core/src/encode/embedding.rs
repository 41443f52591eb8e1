use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::patch_tokens;
use crate::corpus::Corpus;
use crate::Scalar;

pub const UNKNOWN_TOKEN: &str = "<unk>";
const DEFAULT_MAX_VOCAB: usize = 50_000;
const INIT_SCALE: f64 = 0.5;

/// Token-to-row mapping for the scratch backbone. Row 0 is [`UNKNOWN_TOKEN`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(vocab: Vocabulary) -> Self {
        vocab.tokens
    }
}

impl Vocabulary {
    /// Counts message and patch tokens, keeping those seen at least
    /// `min_count` times, most frequent first (ties broken lexically).
    pub fn from_corpus(corpus: &Corpus, min_count: usize, max_size: Option<usize>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for record in &corpus.records {
            for token in &record.message {
                *counts.entry(token.clone()).or_default() += 1;
            }
            for patch in &record.patches {
                for token in patch_tokens(patch) {
                    *counts.entry(token).or_default() += 1;
                }
            }
        }
        counts.remove(UNKNOWN_TOKEN);
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let cap = max_size.unwrap_or(DEFAULT_MAX_VOCAB).saturating_sub(1);
        let tokens = std::iter::once(UNKNOWN_TOKEN.to_string())
            .chain(ranked.into_iter().take(cap).map(|(t, _)| t))
            .collect::<Vec<_>>();
        Vocabulary::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// Trainable embedding table, mean-pooled over a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable<F> {
    pub vocab: Vocabulary,
    /// `|vocab| x d`
    pub weights: Array2<F>,
}

impl<F: Scalar> EmbeddingTable<F> {
    pub fn new(vocab: Vocabulary, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Array2::from_shape_simple_fn((vocab.len(), dim), || {
            F::from_f64_lossy(rng.gen_range(-INIT_SCALE..INIT_SCALE))
        });
        EmbeddingTable { vocab, weights }
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn encode(&self, tokens: &[String]) -> Array1<F> {
        let mut out = Array1::zeros(self.dim());
        if tokens.is_empty() {
            return out;
        }
        for token in tokens {
            out += &self.weights.row(self.vocab.id(token));
        }
        out / F::from_usize(tokens.len()).unwrap()
    }

    /// Adds `d loss / d row` for every token of `tokens` into `grad`, given
    /// the gradient of the pooled output.
    pub fn accumulate_grad(&self, tokens: &[String], grad_out: ArrayView1<F>, grad: &mut Array2<F>) {
        if tokens.is_empty() {
            return;
        }
        let share = grad_out.mapv(|g| g / F::from_usize(tokens.len()).unwrap());
        for token in tokens {
            let mut row = grad.row_mut(self.vocab.id(token));
            row += &share;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CommitRecord, Label, Patch};

    fn corpus() -> Corpus {
        Corpus::new(
            "v",
            vec![
                CommitRecord::new(
                    "a",
                    Label::Clean,
                    vec!["fix".into(), "fix".into()],
                    vec![Patch::new(vec!["added: x".into()])],
                ),
                CommitRecord::new("b", Label::Defective, vec!["zz".into()], vec![]),
            ],
        )
    }

    #[test]
    fn vocabulary_orders_by_frequency() {
        let v = Vocabulary::from_corpus(&corpus(), 1, None);
        assert_eq!(v.token(0), Some(UNKNOWN_TOKEN));
        assert_eq!(v.token(1), Some("fix"));
        assert_eq!(v.id("never-seen"), 0);
        let capped = Vocabulary::from_corpus(&corpus(), 1, Some(2));
        assert_eq!(capped.len(), 2);
        let frequent = Vocabulary::from_corpus(&corpus(), 2, None);
        assert_eq!(frequent.len(), 2);
    }

    #[test]
    fn mean_pooling_and_gradient_agree() {
        let table = EmbeddingTable::<f64>::new(Vocabulary::from_corpus(&corpus(), 1, None), 3, 1);
        let tokens: Vec<String> = vec!["fix".into(), "x".into(), "fix".into()];
        let out = table.encode(&tokens);
        let expect = (&table.weights.row(table.vocab.id("fix")) * 2.0
            + &table.weights.row(table.vocab.id("x")))
            / 3.0;
        assert!((&out - &expect).iter().all(|d| d.abs() < 1e-15));

        let mut grad = Array2::zeros(table.weights.dim());
        table.accumulate_grad(&tokens, ndarray::arr1(&[3.0, 0.0, -3.0]).view(), &mut grad);
        assert_eq!(grad.row(table.vocab.id("fix")).to_vec(), vec![2.0, 0.0, -2.0]);
        assert_eq!(grad.row(table.vocab.id("x")).to_vec(), vec![1.0, 0.0, -1.0]);
    }

    #[test]
    fn vocabulary_serializes_as_token_list() {
        let v = Vocabulary::from_corpus(&corpus(), 1, None);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("zz"), v.id("zz"));
    }
}
