//! Prefix-shared flattening of draft candidates.
//!
//! Candidates are merged into a trie and laid out breadth-first, ordered by
//! depth and then by the rank of the first candidate that reached the node.
//! Every node's parent precedes it, shared prefixes appear once, and each
//! node attends exactly to its ancestors and itself.

use std::collections::HashMap;

use thiserror::Error;

use crate::corpus::TokenId;
use crate::mcts::DraftCandidate;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DraftTreeError {
    #[error("candidate {0} is empty")]
    EmptyCandidate(usize),
    #[error("tokens and parents differ in length ({tokens} vs {parents})")]
    LengthMismatch { tokens: usize, parents: usize },
    #[error("node {node} has parent {parent}, which does not precede it")]
    BadParent { node: usize, parent: i64 },
    #[error("node {node} repeats sibling token {token}")]
    DuplicateSibling { node: usize, token: TokenId },
}

/// Square ancestor matrix: `get(j, k)` is true iff `k` is `j` or one of its
/// ancestors.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct AttentionMask {
    size: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.size + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.bits[row * self.size..(row + 1) * self.size]
    }
}

/// Pseudo-sequence of draft tokens with parent links.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DraftTree {
    tokens: Vec<TokenId>,
    parents: Vec<Option<usize>>,
    depths: Vec<usize>,
    leaves: Vec<usize>,
    mask: AttentionMask,
}

impl DraftTree {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Merges candidate token paths; candidate `i`'s leaf is `leaves()[i]`.
    pub fn build<P: AsRef<[TokenId]>>(candidates: &[P]) -> Result<Self, DraftTreeError> {
        struct TrieNode {
            token: TokenId,
            parent: Option<usize>,
            depth: usize,
            first_seen: usize,
        }
        let mut trie: Vec<TrieNode> = Vec::new();
        let mut edges: HashMap<(Option<usize>, TokenId), usize> = HashMap::new();
        let mut trie_leaves = Vec::with_capacity(candidates.len());
        for (rank, cand) in candidates.iter().enumerate() {
            let cand = cand.as_ref();
            if cand.is_empty() {
                return Err(DraftTreeError::EmptyCandidate(rank));
            }
            let mut at: Option<usize> = None;
            for (depth, &tok) in cand.iter().enumerate() {
                let next = *edges.entry((at, tok)).or_insert_with(|| {
                    trie.push(TrieNode { token: tok, parent: at, depth, first_seen: rank });
                    trie.len() - 1
                });
                at = Some(next);
            }
            trie_leaves.push(at.expect("non-empty candidate"));
        }

        let mut order: Vec<usize> = (0..trie.len()).collect();
        order.sort_by_key(|&i| (trie[i].depth, trie[i].first_seen));
        let mut position = vec![0usize; trie.len()];
        for (pos, &i) in order.iter().enumerate() {
            position[i] = pos;
        }
        let tokens = order.iter().map(|&i| trie[i].token).collect();
        let parents = order.iter().map(|&i| trie[i].parent.map(|p| position[p])).collect();
        let depths = order.iter().map(|&i| trie[i].depth).collect();
        let leaves = trie_leaves.iter().map(|&i| position[i]).collect();
        Ok(Self::assemble(tokens, parents, depths, leaves))
    }

    pub fn from_candidates(candidates: &[DraftCandidate]) -> Result<Self, DraftTreeError> {
        let paths: Vec<&[TokenId]> = candidates.iter().map(|c| c.tokens.as_slice()).collect();
        Self::build(&paths)
    }

    /// Rebuilds a tree from its wire form; `-1` marks a root child. Leaves
    /// are the childless nodes in index order.
    pub fn from_parts(tokens: Vec<TokenId>, parents: &[i64]) -> Result<Self, DraftTreeError> {
        if tokens.len() != parents.len() {
            return Err(DraftTreeError::LengthMismatch { tokens: tokens.len(), parents: parents.len() });
        }
        let mut links = Vec::with_capacity(parents.len());
        let mut depths: Vec<usize> = Vec::with_capacity(parents.len());
        let mut seen: HashMap<(Option<usize>, TokenId), usize> = HashMap::new();
        for (j, &p) in parents.iter().enumerate() {
            let link = match p {
                -1 => None,
                p if p >= 0 && (p as usize) < j => Some(p as usize),
                p => return Err(DraftTreeError::BadParent { node: j, parent: p }),
            };
            if seen.insert((link, tokens[j]), j).is_some() {
                return Err(DraftTreeError::DuplicateSibling { node: j, token: tokens[j] });
            }
            depths.push(link.map_or(0, |p| depths[p] + 1));
            links.push(link);
        }
        let mut has_child = vec![false; tokens.len()];
        for p in links.iter().flatten() {
            has_child[*p] = true;
        }
        let leaves = (0..tokens.len()).filter(|&j| !has_child[j]).collect();
        Ok(Self::assemble(tokens, links, depths, leaves))
    }

    fn assemble(
        tokens: Vec<TokenId>,
        parents: Vec<Option<usize>>,
        depths: Vec<usize>,
        leaves: Vec<usize>,
    ) -> Self {
        let mask = ancestor_mask(&parents);
        DraftTree { tokens, parents, depths, leaves, mask }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn token(&self, j: usize) -> TokenId {
        self.tokens[j]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    /// Parents in wire form, with `-1` for root children.
    pub fn wire_parents(&self) -> Vec<i64> {
        self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect()
    }

    /// Zero for root children.
    pub fn depth(&self, j: usize) -> usize {
        self.depths[j]
    }

    pub fn max_depth(&self) -> usize {
        self.depths.iter().map(|d| d + 1).max().unwrap_or(0)
    }

    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    /// Children of `node`, or of the context root when `None`, in index order.
    pub fn children(&self, node: Option<usize>) -> impl Iterator<Item = usize> + '_ {
        let start = node.map_or(0, |n| n + 1);
        (start..self.len()).filter(move |&j| self.parents[j] == node)
    }

    pub fn child_with_token(&self, node: Option<usize>, token: TokenId) -> Option<usize> {
        self.children(node).find(|&j| self.tokens[j] == token)
    }

    /// Tokens from the root to `j` inclusive.
    pub fn path(&self, j: usize) -> Vec<TokenId> {
        let mut out = vec![self.tokens[j]];
        let mut at = self.parents[j];
        while let Some(p) = at {
            out.push(self.tokens[p]);
            at = self.parents[p];
        }
        out.reverse();
        out
    }

    /// Path for every recorded leaf, in leaf order.
    pub fn leaf_paths(&self) -> Vec<Vec<TokenId>> {
        self.leaves.iter().map(|&l| self.path(l)).collect()
    }
}

/// Row `j` is row `parent(j)` plus `j` itself.
pub fn mask_of(tree: &DraftTree) -> AttentionMask {
    ancestor_mask(&tree.parents)
}

fn ancestor_mask(parents: &[Option<usize>]) -> AttentionMask {
    let n = parents.len();
    let mut bits = vec![false; n * n];
    for j in 0..n {
        if let Some(p) = parents[j] {
            let (head, tail) = bits.split_at_mut(j * n);
            tail[..n].copy_from_slice(&head[p * n..(p + 1) * n]);
        }
        bits[j * n + j] = true;
    }
    AttentionMask { size: n, bits }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn shared_prefix_once() {
        let t = DraftTree::build(&[ids(&[0, 1, 2]), ids(&[0, 1, 3])]).unwrap();
        assert_eq!(t.tokens(), ids(&[0, 1, 2, 3]).as_slice());
        assert_eq!(t.wire_parents(), vec![-1, 0, 1, 1]);
        assert_eq!(t.leaves(), &[2, 3]);
        assert!(!t.mask().get(3, 2));
        assert!(t.mask().get(3, 1) && t.mask().get(3, 0) && t.mask().get(3, 3));
    }

    #[test]
    fn single_candidate() {
        let t = DraftTree::build(&[ids(&[10, 11])]).unwrap();
        assert_eq!(t.wire_parents(), vec![-1, 0]);
        assert_eq!(t.mask().row(0), &[true, false]);
        assert_eq!(t.mask().row(1), &[true, true]);
    }

    #[test]
    fn duplicates_share_leaf() {
        let t = DraftTree::build(&[ids(&[0]), ids(&[0]), ids(&[1])]).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.leaves(), &[0, 0, 1]);
    }

    #[test]
    fn chain_mask_is_lower_triangular() {
        let t = DraftTree::build(&[ids(&[4, 5, 6])]).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                assert_eq!(t.mask().get(j, k), k <= j);
            }
        }
    }

    #[test]
    fn breadth_first_by_first_seen_rank() {
        let t = DraftTree::build(&[ids(&[1, 2, 3]), ids(&[4, 5]), ids(&[1, 6])]).unwrap();
        // depth 0: 1 (rank 0), 4 (rank 1); depth 1: 2, 5, 6; depth 2: 3
        assert_eq!(t.tokens(), ids(&[1, 4, 2, 5, 6, 3]).as_slice());
        assert_eq!(t.wire_parents(), vec![-1, -1, 0, 1, 0, 2]);
    }

    #[test]
    fn empty_inputs() {
        let none: [Vec<TokenId>; 0] = [];
        assert!(DraftTree::build(&none).unwrap().is_empty());
        assert_eq!(
            DraftTree::build(&[ids(&[1]), vec![]]),
            Err(DraftTreeError::EmptyCandidate(1))
        );
    }

    #[test]
    fn wire_roundtrip_and_validation() {
        let t = DraftTree::build(&[ids(&[0, 1, 2]), ids(&[0, 1, 3]), ids(&[5])]).unwrap();
        let back = DraftTree::from_parts(t.tokens().to_vec(), &t.wire_parents()).unwrap();
        assert_eq!(back.tokens(), t.tokens());
        assert_eq!(back.mask(), t.mask());
        assert!(matches!(
            DraftTree::from_parts(ids(&[0, 1]), &[-1, 1]),
            Err(DraftTreeError::BadParent { node: 1, parent: 1 })
        ));
        assert!(matches!(
            DraftTree::from_parts(ids(&[0, 0]), &[-1, -1]),
            Err(DraftTreeError::DuplicateSibling { .. })
        ));
    }
}
