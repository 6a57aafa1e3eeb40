//! Exact-match acceptance over a draft tree.
//!
//! Starting at the context head, the verifier picks a token from the target
//! distribution at the current position. If a child of the current tree
//! position carries that token it is accepted and the walk continues from
//! that child's distribution; otherwise the picked token becomes the bonus
//! token and the step ends.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenId;
use crate::distribution::{Distribution, GREEDY_TEMPERATURE};
use crate::draft_tree::DraftTree;
use crate::target::NodeDistributions;

#[derive(Debug, Error, PartialEq)]
pub enum VerifyError {
    #[error("tree has {tree} nodes but {dists} node distributions were supplied")]
    Misaligned { tree: usize, dists: usize },
    #[error("empty target distribution at {0}")]
    EmptyDistribution(String),
    #[error("invalid sampling parameters: temperature {temperature}, top_p {top_p}")]
    BadSampling { temperature: f64, top_p: f64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    /// Draft tokens confirmed by the target, in order.
    pub accepted: Vec<TokenId>,
    /// The target's own token at the stopping position.
    pub bonus: TokenId,
    /// Tree node where the accepted path ends.
    pub matched_node: Option<usize>,
}

impl VerifyOutcome {
    /// Tokens emitted by this step: accepted drafts plus the bonus.
    pub fn accept_length(&self) -> usize {
        self.accepted.len() + 1
    }

    pub fn matched_depth(&self) -> usize {
        self.accepted.len()
    }

    pub fn emitted(&self) -> Vec<TokenId> {
        let mut v = self.accepted.clone();
        v.push(self.bonus);
        v
    }
}

fn walk<F>(tree: &DraftTree, dists: &NodeDistributions, mut pick: F) -> Result<VerifyOutcome, VerifyError>
where
    F: FnMut(&Distribution) -> Option<TokenId>,
{
    if dists.nodes.len() != tree.len() {
        return Err(VerifyError::Misaligned { tree: tree.len(), dists: dists.nodes.len() });
    }
    let mut at: Option<usize> = None;
    let mut accepted = Vec::new();
    loop {
        let dist = match at {
            None => &dists.head,
            Some(j) => &dists.nodes[j],
        };
        let g = pick(dist).ok_or_else(|| {
            VerifyError::EmptyDistribution(at.map_or("head".to_owned(), |j| format!("node {j}")))
        })?;
        match tree.child_with_token(at, g) {
            Some(child) => {
                accepted.push(g);
                at = Some(child);
            }
            None => return Ok(VerifyOutcome { accepted, bonus: g, matched_node: at }),
        }
    }
}

/// Accepts while the target argmax (lowest id on ties) matches a child.
pub fn verify_greedy(tree: &DraftTree, dists: &NodeDistributions) -> Result<VerifyOutcome, VerifyError> {
    walk(tree, dists, Distribution::argmax)
}

/// Same walk with the comparator token sampled from the shaped target
/// distribution. Shaping is skipped when the model already applied it.
pub fn verify_sampled<R: Rng + ?Sized>(
    tree: &DraftTree,
    dists: &NodeDistributions,
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> Result<VerifyOutcome, VerifyError> {
    if !(temperature >= 0.0 && temperature.is_finite() && top_p > 0.0 && top_p <= 1.0) {
        return Err(VerifyError::BadSampling { temperature, top_p });
    }
    if temperature < GREEDY_TEMPERATURE {
        return verify_greedy(tree, dists);
    }
    let shaped = dists.shaped;
    walk(tree, dists, |d| {
        if shaped {
            d.sample(rng)
        } else {
            d.shaped(temperature, top_p).sample(rng)
        }
    })
}
