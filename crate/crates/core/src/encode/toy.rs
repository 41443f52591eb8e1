use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::Scalar;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The frozen vector assigned to one token: a splitmix64 stream seeded with
/// the FNV-1a hash of the token's UTF-8 bytes, each draw mapped to `[-1, 1)`
/// through its top 53 bits.
pub fn toy_token_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut state = fnv1a(token.as_bytes());
    (0..dim)
        .map(|_| {
            let unit = (splitmix64(&mut state) >> 11) as f64 / (1u64 << 53) as f64;
            2.0 * unit - 1.0
        })
        .collect()
}

/// Frozen hash-seeded encoder: a sequence maps to the mean of its token vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEncoder {
    dim: usize,
}

impl ToyEncoder {
    pub fn new(dim: usize) -> Self {
        ToyEncoder { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encode<F: Scalar>(&self, tokens: &[String]) -> Array1<F> {
        let mut acc = vec![0.0f64; self.dim];
        for token in tokens {
            for (a, v) in acc.iter_mut().zip(toy_token_vector(token, self.dim)) {
                *a += v;
            }
        }
        let n = tokens.len().max(1) as f64;
        acc.into_iter().map(|a| F::from_f64_lossy(a / n)).collect()
    }
}
