//! Seeded Markov byte sources for desk-scale domains with controlled entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// An order-`order` Markov chain over `alphabet`. Each context allows
/// `branching` successors with random weights; with probability `noise` the
/// next byte is drawn uniformly from the alphabet instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovSource {
    pub alphabet: Vec<u8>,
    pub order: usize,
    pub branching: usize,
    pub noise: f64,
}

impl MarkovSource {
    pub fn new(alphabet: impl Into<Vec<u8>>, order: usize, branching: usize, noise: f64) -> Self {
        Self {
            alphabet: alphabet.into(),
            order,
            branching,
            noise,
        }
    }

    fn table_size(&self) -> usize {
        self.alphabet.len().pow(self.order as u32)
    }

    /// Successor indices and cumulative weights for every context.
    fn transitions(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, f64)>> {
        let k = self.alphabet.len();
        let branching = self.branching.clamp(1, k);
        (0..self.table_size())
            .map(|_| {
                let mut picks: Vec<usize> = Vec::with_capacity(branching);
                while picks.len() < branching {
                    let s = rng.random_range(0..k);
                    if !picks.contains(&s) {
                        picks.push(s);
                    }
                }
                let weights: Vec<f64> = picks.iter().map(|_| rng.random_range(0.2..1.0)).collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                picks
                    .into_iter()
                    .zip(weights)
                    .map(|(s, w)| {
                        acc += w / total;
                        (s, acc)
                    })
                    .collect()
            })
            .collect()
    }

    /// `len` bytes; the chain's transition table and the sample path both
    /// derive from `seed`.
    pub fn generate(&self, len: usize, seed: u64) -> Vec<u8> {
        assert!(!self.alphabet.is_empty(), "empty alphabet");
        assert!(self.table_size() <= 1 << 20, "transition table too large");
        let k = self.alphabet.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = self.transitions(&mut rng);
        let modulus = self.table_size();
        let mut ctx = 0usize;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let next = if rng.random_bool(self.noise.clamp(0.0, 1.0)) {
                rng.random_range(0..k)
            } else {
                let u: f64 = rng.random();
                let row = &table[ctx];
                row.iter().find(|(_, c)| u < *c).unwrap_or(row.last().expect("non-empty row")).0
            };
            out.push(self.alphabet[next]);
            if modulus > 1 {
                ctx = (ctx * k + next) % modulus;
            }
        }
        out
    }
}
