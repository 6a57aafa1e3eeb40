//! Seeded second-order Markov sources for desk-scale experiments.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{TokenId, TrigramCounts};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub vocab: u32,
    /// Distinct successors per two-token context.
    pub branching: usize,
    /// Successor `i` (by rank) has weight `1 / (i + 1)^exponent`.
    pub exponent: f64,
    pub docs: usize,
    pub doc_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { vocab: 200, branching: 4, exponent: 1.5, docs: 200, doc_len: 100, seed: 7 }
    }
}

/// The chain behind a [`SyntheticSpec`]. Successor sets are a pure function
/// of the seed and context, so no table is stored.
#[derive(Clone, Debug)]
pub struct MarkovSource {
    spec: SyntheticSpec,
    reversed: bool,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl MarkovSource {
    /// Panics if `vocab < 1` or `branching` is outside `1..=vocab`.
    pub fn new(spec: SyntheticSpec) -> Self {
        assert!(spec.vocab >= 1, "synthetic vocabulary must be non-empty");
        assert!(
            spec.branching >= 1 && spec.branching <= spec.vocab as usize,
            "branching must be in 1..=vocab"
        );
        MarkovSource { spec, reversed: false }
    }

    /// Same support with the weight ranking reversed, so the most likely
    /// successor of every context becomes the least likely.
    pub fn skewed(&self) -> Self {
        MarkovSource { spec: self.spec.clone(), reversed: !self.reversed }
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// Successors of `(a, b)` with unnormalized weights, in rank order.
    pub fn successors(&self, a: TokenId, b: TokenId) -> Vec<(TokenId, f64)> {
        let key = mix(self.spec.seed ^ mix(((a.0 as u64) << 32) | b.0 as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let picked = sample(&mut rng, self.spec.vocab as usize, self.spec.branching);
        let k = self.spec.branching;
        picked
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let rank = if self.reversed { k - 1 - i } else { i };
                (TokenId(t as u32), 1.0 / ((rank + 1) as f64).powf(self.spec.exponent))
            })
            .collect()
    }

    fn step<R: Rng + ?Sized>(&self, a: TokenId, b: TokenId, rng: &mut R) -> TokenId {
        let succ = self.successors(a, b);
        let total: f64 = succ.iter().map(|s| s.1).sum();
        let mut u = rng.gen::<f64>() * total;
        for &(t, w) in &succ {
            if u < w {
                return t;
            }
            u -= w;
        }
        succ[succ.len() - 1].0
    }

    /// A sequence of `len` tokens starting from two uniform tokens.
    pub fn sample_sequence<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len.min(2) {
            out.push(TokenId(rng.gen_range(0..self.spec.vocab)));
        }
        while out.len() < len {
            let n = out.len();
            out.push(self.step(out[n - 2], out[n - 1], rng));
        }
        out
    }

    /// `spec.docs` documents drawn with a generator seeded from `seed`.
    pub fn documents(&self, seed: u64) -> Vec<Vec<TokenId>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.spec.docs).map(|_| self.sample_sequence(self.spec.doc_len, &mut rng)).collect()
    }
}

/// A `len`-token pattern over `0..vocab` none of whose trigrams, including
/// those across the wrap-around when repeated, occur in `counts`. Returns
/// `None` if no such pattern was found within a bounded number of draws.
pub fn novel_pattern<R: Rng + ?Sized>(
    counts: &TrigramCounts,
    vocab: u32,
    len: usize,
    rng: &mut R,
) -> Option<Vec<TokenId>> {
    if len < 3 || vocab < 2 {
        return None;
    }
    'draw: for _ in 0..1000 {
        let pat: Vec<TokenId> = (0..len).map(|_| TokenId(rng.gen_range(0..vocab))).collect();
        for i in 0..len {
            let (a, b, c) = (pat[i], pat[(i + 1) % len], pat[(i + 2) % len]);
            if counts.trigram(a, b, c) > 0 {
                continue 'draw;
            }
            // each two-token context occurs once per cycle
            for j in 0..i {
                if pat[j] == a && pat[(j + 1) % len] == b {
                    continue 'draw;
                }
            }
        }
        return Some(pat);
    }
    None
}
