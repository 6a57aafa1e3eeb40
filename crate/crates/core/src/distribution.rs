//! Sparse next-token distributions.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;

/// Below this temperature sampling collapses to argmax.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

/// Descending-probability order with ties going to the lower token id.
pub(crate) fn rank_order(a: &(TokenId, f64), b: &(TokenId, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Next-token probabilities, kept sorted by descending probability with
/// ties broken by ascending token id. Zero-probability entries are dropped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Distribution {
    entries: Vec<(TokenId, f64)>,
}

impl Distribution {
    /// Sorts and drops non-positive entries. Does not renormalize.
    pub fn new(mut entries: Vec<(TokenId, f64)>) -> Self {
        entries.retain(|e| e.1 > 0.0 && e.1.is_finite());
        entries.sort_by(rank_order);
        Distribution { entries }
    }

    /// Sorts, drops non-positive entries and rescales to sum to one.
    pub fn normalized(entries: Vec<(TokenId, f64)>) -> Self {
        let mut d = Self::new(entries);
        d.renormalize();
        d
    }

    pub fn one_hot(token: TokenId) -> Self {
        Distribution { entries: vec![(token, 1.0)] }
    }

    pub fn uniform(vocab_size: u32) -> Self {
        let p = 1.0 / vocab_size as f64;
        Distribution { entries: (0..vocab_size).map(|i| (TokenId(i), p)).collect() }
    }

    fn renormalize(&mut self) {
        let total = self.sum();
        if total > 0.0 {
            for e in &mut self.entries {
                e.1 /= total;
            }
        }
    }

    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    /// Most probable token; ties go to the lowest id.
    pub fn argmax(&self) -> Option<TokenId> {
        self.entries.first().map(|e| e.0)
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.entries.iter().find(|e| e.0 == token).map_or(0.0, |e| e.1)
    }

    /// Keeps the `m` most probable entries and renormalizes.
    pub fn top(&self, m: usize) -> Self {
        let mut d = Distribution { entries: self.entries.iter().take(m.max(1)).copied().collect() };
        d.renormalize();
        d
    }

    /// Applies temperature then nucleus truncation, renormalizing after each.
    /// The nucleus is the shortest prefix whose mass reaches `top_p`.
    pub fn shaped(&self, temperature: f64, top_p: f64) -> Self {
        if self.entries.is_empty() {
            return self.clone();
        }
        if temperature < GREEDY_TEMPERATURE {
            return Distribution::one_hot(self.entries[0].0);
        }
        let mut entries = self.entries.clone();
        if (temperature - 1.0).abs() > f64::EPSILON {
            // log-space keeps tiny temperatures from underflowing to all zeros
            let max_logit = entries[0].1.ln() / temperature;
            for e in &mut entries {
                e.1 = (e.1.ln() / temperature - max_logit).exp();
            }
        }
        let mut d = Distribution::normalized(entries);
        if top_p < 1.0 {
            let mut mass = 0.0;
            let mut keep = 0;
            for e in &d.entries {
                keep += 1;
                mass += e.1;
                if mass >= top_p {
                    break;
                }
            }
            d.entries.truncate(keep);
            d.renormalize();
        }
        d
    }

    /// Draws a token proportionally to the stored weights.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<TokenId> {
        let total = self.sum();
        if self.entries.is_empty() || total <= 0.0 {
            return None;
        }
        let mut u = rng.gen::<f64>() * total;
        for e in &self.entries {
            if u < e.1 {
                return Some(e.0);
            }
            u -= e.1;
        }
        self.entries.last().map(|e| e.0)
    }
}
