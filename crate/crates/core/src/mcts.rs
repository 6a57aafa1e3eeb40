//! PUCT-guided Monte Carlo Tree Search over tri-gram continuations.
//!
//! Each search builds a fresh tree rooted at the last two emitted tokens.
//! One iteration is selection, expansion, simulation and backpropagation:
//!
//! * selection descends by maximum PUCT while the node is expanded and the
//!   draft is shorter than the target depth;
//! * expansion adds a child for every continuation of the node's context
//!   (with backoff), in ascending prior order, then steps into the last one,
//!   which carries the highest prior;
//! * simulation samples continuations until the depth is reached or no
//!   continuation exists;
//! * the path score is added to every node from the stop point to the root.
//!
//! Candidates are the root paths of visited leaves, ranked by visit count.

use std::cmp::Ordering;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Bigram, TokenId};
use crate::trigram::{ContinuationTable, TrigramMatrix};

/// How a simulated path is scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// `1 + sum of transition probabilities`.
    #[default]
    ProbabilitySum,
    /// Sum of log transition probabilities.
    LogLikelihood,
}

impl ScoreMode {
    fn initial(self) -> f64 {
        match self {
            ScoreMode::ProbabilitySum => 1.0,
            ScoreMode::LogLikelihood => 0.0,
        }
    }

    fn step(self, p: f64) -> f64 {
        match self {
            ScoreMode::ProbabilitySum => p,
            ScoreMode::LogLikelihood => p.ln(),
        }
    }

    /// Score of a path given its transition probabilities.
    pub fn path_score(self, probs: impl IntoIterator<Item = f64>) -> f64 {
        probs.into_iter().fold(self.initial(), |s, p| s + self.step(p))
    }
}

impl FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "probability-sum" | "prob-sum" | "sum" => Ok(ScoreMode::ProbabilitySum),
            "log-likelihood" | "log" | "loglik" => Ok(ScoreMode::LogLikelihood),
            other => Err(format!("unknown score mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub iterations: usize,
    pub c1: f64,
    pub c2: f64,
    /// Maximum draft length in tokens.
    pub depth: usize,
    /// Number of candidates returned.
    pub candidates: usize,
    pub score_mode: ScoreMode,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            iterations: 150,
            c1: 32.0,
            c2: 8.0,
            depth: 4,
            candidates: 24,
            score_mode: ScoreMode::ProbabilitySum,
            seed: 0,
        }
    }
}

/// `E = c1 + ln((N + c2 + 1) / c2)` where `N` is the visit total over a
/// node's children.
pub fn exploration_constant(total_visits: u64, c1: f64, c2: f64) -> f64 {
    c1 + ((total_visits as f64 + c2 + 1.0) / c2).ln()
}

/// `Q + E * P * sqrt(sum_n) / (1 + n)`.
pub fn puct_score(q: f64, prior: f64, visits: u64, sibling_visits: u64, exploration: f64) -> f64 {
    q + exploration * prior * (sibling_visits as f64).sqrt() / (1.0 + visits as f64)
}

/// Visit-count distribution `(1 + n_a) / (|A| + sum_b n_b)` over actions.
pub fn visit_distribution(visits: &[u64]) -> Vec<f64> {
    let denom = visits.len() as f64 + visits.iter().sum::<u64>() as f64;
    visits.iter().map(|&n| (1.0 + n as f64) / denom).collect()
}

#[derive(Clone, Debug)]
pub struct SearchNode {
    /// `(previous, current)` token pair; the root holds the context tail.
    pub pair: Bigram,
    pub prior: f64,
    pub visits: u64,
    pub score_total: f64,
    pub depth: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    expanded: bool,
}

impl SearchNode {
    fn new(pair: Bigram, prior: f64, depth: usize, parent: Option<usize>) -> Self {
        SearchNode {
            pair,
            prior,
            visits: 0,
            score_total: 0.0,
            depth,
            parent,
            children: Vec::new(),
            expanded: false,
        }
    }

    pub fn token(&self) -> TokenId {
        self.pair.1
    }

    /// Mean backed-up score; zero before the first visit.
    pub fn q(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.score_total / self.visits as f64
        }
    }

    pub fn is_expanded(&self) -> bool {
        self.expanded
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftCandidate {
    pub tokens: Vec<TokenId>,
    /// Mean score at the leaf.
    pub score: f64,
    pub visits: u64,
}

/// Arena-backed search tree; index 0 is the root.
#[derive(Clone, Debug)]
pub struct SearchTree {
    nodes: Vec<SearchNode>,
}

impl SearchTree {
    pub fn root(&self) -> &SearchNode {
        &self.nodes[0]
    }

    pub fn node(&self, idx: usize) -> &SearchNode {
        &self.nodes[idx]
    }

    pub fn nodes(&self) -> &[SearchNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// PUCT of child `idx` under its parent's current totals.
    pub fn puct(&self, idx: usize, c1: f64, c2: f64) -> f64 {
        let child = &self.nodes[idx];
        let sum = child.parent.map_or(0, |p| self.child_visit_sum(p));
        let e = exploration_constant(sum, c1, c2);
        puct_score(child.q(), child.prior, child.visits, sum, e)
    }

    fn child_visit_sum(&self, idx: usize) -> u64 {
        self.nodes[idx].children.iter().map(|&c| self.nodes[c].visits).sum()
    }

    /// Visit distribution over the children of `idx`, in child order.
    pub fn visit_distribution(&self, idx: usize) -> Vec<(TokenId, f64)> {
        let kids = &self.nodes[idx].children;
        let visits: Vec<u64> = kids.iter().map(|&c| self.nodes[c].visits).collect();
        kids.iter().zip(visit_distribution(&visits)).map(|(&c, p)| (self.nodes[c].token(), p)).collect()
    }

    /// Drafted tokens from the root (exclusive) to `idx` (inclusive).
    pub fn path(&self, mut idx: usize) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.nodes[idx].depth);
        while let Some(p) = self.nodes[idx].parent {
            out.push(self.nodes[idx].token());
            idx = p;
        }
        out.reverse();
        out
    }

    /// Visited leaves ranked by visits, then mean score, then token order.
    pub fn candidates(&self, n: usize) -> Vec<DraftCandidate> {
        let mut out: Vec<DraftCandidate> = (1..self.nodes.len())
            .filter(|&i| {
                let node = &self.nodes[i];
                node.visits > 0 && node.children.iter().all(|&c| self.nodes[c].visits == 0)
            })
            .map(|i| DraftCandidate {
                tokens: self.path(i),
                score: self.nodes[i].q(),
                visits: self.nodes[i].visits,
            })
            .collect();
        out.sort_by(|a, b| {
            b.visits
                .cmp(&a.visits)
                .then(b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal))
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        out.truncate(n);
        out
    }
}

fn continuations(matrix: &TrigramMatrix, ctx: Bigram) -> Option<&ContinuationTable> {
    matrix.lookup(ctx).map(|l| l.table)
}

/// Builds the search tree for one decode step.
pub fn search_tree(matrix: &TrigramMatrix, tail: Bigram, cfg: &SearchConfig) -> SearchTree {
    let mut tree = SearchTree { nodes: vec![SearchNode::new(tail, 1.0, 0, None)] };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let depth = cfg.depth;

    for _ in 0..cfg.iterations {
        // selection
        let mut node = 0usize;
        while tree.nodes[node].expanded
            && !tree.nodes[node].children.is_empty()
            && tree.nodes[node].depth < depth
        {
            node = select_child(&tree, node, cfg);
        }

        // expansion
        if !tree.nodes[node].expanded && tree.nodes[node].depth < depth {
            tree.nodes[node].expanded = true;
            if let Some(table) = continuations(matrix, tree.nodes[node].pair) {
                let prev = tree.nodes[node].pair.1;
                let d = tree.nodes[node].depth + 1;
                // table order is descending prior with ascending ids on ties;
                // reversing it puts the highest prior, lowest id last
                for (tok, p) in table.probabilities().collect::<Vec<_>>().into_iter().rev() {
                    let idx = tree.nodes.len();
                    tree.nodes.push(SearchNode::new((prev, tok), p, d, Some(node)));
                    tree.nodes[node].children.push(idx);
                }
                if let Some(&last) = tree.nodes[node].children.last() {
                    node = last;
                }
            }
        }

        // simulation
        let mut score = cfg.score_mode.initial();
        let mut walk = node;
        while let Some(parent) = tree.nodes[walk].parent {
            score += cfg.score_mode.step(tree.nodes[walk].prior);
            walk = parent;
        }
        let mut ctx = tree.nodes[node].pair;
        let mut len = tree.nodes[node].depth;
        while len < depth {
            let Some(table) = continuations(matrix, ctx) else { break };
            let (tok, p) = sample(table, &mut rng);
            score += cfg.score_mode.step(p);
            ctx = (ctx.1, tok);
            len += 1;
        }

        // backpropagation
        let mut cur = Some(node);
        while let Some(i) = cur {
            tree.nodes[i].visits += 1;
            tree.nodes[i].score_total += score;
            cur = tree.nodes[i].parent;
        }
    }
    tree
}

/// Highest-PUCT child; ties go to the later child (higher prior).
fn select_child(tree: &SearchTree, node: usize, cfg: &SearchConfig) -> usize {
    let kids = &tree.nodes[node].children;
    let sum = tree.child_visit_sum(node);
    let e = exploration_constant(sum, cfg.c1, cfg.c2);
    let mut best = kids[0];
    let mut best_score = f64::NEG_INFINITY;
    for &c in kids {
        let n = &tree.nodes[c];
        let s = puct_score(n.q(), n.prior, n.visits, sum, e);
        if s >= best_score {
            best = c;
            best_score = s;
        }
    }
    best
}

fn sample<R: Rng>(table: &ContinuationTable, rng: &mut R) -> (TokenId, f64) {
    let total = table.total();
    let mut u = rng.gen::<f64>() * total;
    for &(t, w) in table.entries() {
        if u < w {
            return (t, w / total);
        }
        u -= w;
    }
    let &(t, w) = table.entries().last().expect("tables are never empty");
    (t, w / total)
}

/// Runs the search and returns the top `cfg.candidates` drafts.
pub fn run_search(matrix: &TrigramMatrix, tail: Bigram, cfg: &SearchConfig) -> Vec<DraftCandidate> {
    search_tree(matrix, tail, cfg).candidates(cfg.candidates)
}

/// Follows the matrix argmax for up to `depth` tokens.
pub fn greedy_chain(matrix: &TrigramMatrix, tail: Bigram, depth: usize) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(depth);
    let mut ctx = tail;
    while out.len() < depth {
        let Some(table) = continuations(matrix, ctx) else { break };
        let t = table.top();
        out.push(t);
        ctx = (ctx.1, t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TrigramCounts;

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn exploration_constant_values() {
        assert!((exploration_constant(0, 32.0, 8.0) - (32.0 + (9.0f64 / 8.0).ln())).abs() < 1e-12);
        assert!((exploration_constant(0, 32.0, 8.0) - 32.1178).abs() < 1e-4);
        assert!((exploration_constant(792, 32.0, 8.0) - (32.0 + (801.0f64 / 8.0).ln())).abs() < 1e-12);
        assert!((exploration_constant(792, 32.0, 8.0) - 36.6064).abs() < 1e-4);
        assert!((exploration_constant(0, 5.0, 1e15) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn puct_values() {
        assert_eq!(puct_score(0.7, 0.9, 0, 0, 33.0), 0.7);
        assert_eq!(puct_score(0.5, 0.25, 1, 4, 33.0), 8.75);
        assert!(puct_score(0.0, 0.3, 2, 9, 33.0) > puct_score(0.0, 0.2, 2, 9, 33.0));
        assert!(puct_score(0.0, 0.3, 2, 9, 33.0) > puct_score(0.0, 0.3, 3, 9, 33.0));
    }

    #[test]
    fn visit_distribution_values() {
        assert_eq!(visit_distribution(&[0, 0, 0, 0]), vec![0.25; 4]);
        assert_eq!(visit_distribution(&[3, 1, 0, 0]), vec![0.5, 0.25, 0.125, 0.125]);
        assert_eq!(visit_distribution(&[17]), vec![1.0]);
    }

    fn chain_matrix() -> TrigramMatrix {
        let mut c = TrigramCounts::new();
        c.count_trigrams(&ids(&[0, 1, 2, 3, 4, 5]));
        TrigramMatrix::finalize(&c, 1).unwrap()
    }

    #[test]
    fn deterministic_chain_is_rank_one() {
        let cands = run_search(&chain_matrix(), (TokenId(0), TokenId(1)), &SearchConfig::default());
        assert_eq!(cands[0].tokens, ids(&[2, 3, 4, 5]));
    }

    #[test]
    fn zero_iterations_no_candidates() {
        let cfg = SearchConfig { iterations: 0, ..SearchConfig::default() };
        assert!(run_search(&chain_matrix(), (TokenId(0), TokenId(1)), &cfg).is_empty());
    }

    #[test]
    fn empty_matrix_no_candidates() {
        let m = TrigramMatrix::empty(0);
        assert!(run_search(&m, (TokenId(0), TokenId(1)), &SearchConfig::default()).is_empty());
    }

    #[test]
    fn root_visits_equal_iterations() {
        let cfg = SearchConfig { iterations: 37, ..SearchConfig::default() };
        let t = search_tree(&chain_matrix(), (TokenId(0), TokenId(1)), &cfg);
        assert_eq!(t.root().visits, 37);
    }

    #[test]
    fn expansion_orders_children_by_ascending_prior() {
        let mut c = TrigramCounts::new();
        c.insert((TokenId(0), TokenId(1)), TokenId(5), 1);
        c.insert((TokenId(0), TokenId(1)), TokenId(6), 3);
        c.insert((TokenId(0), TokenId(1)), TokenId(7), 3);
        let m = TrigramMatrix::finalize(&c, 1).unwrap();
        let cfg = SearchConfig { iterations: 1, ..SearchConfig::default() };
        let t = search_tree(&m, (TokenId(0), TokenId(1)), &cfg);
        let toks: Vec<u32> = t.root().children.iter().map(|&i| t.node(i).token().0).collect();
        assert_eq!(toks, vec![5, 7, 6]);
        // the last child was descended into
        assert_eq!(t.node(*t.root().children.last().unwrap()).visits, 1);
    }

    #[test]
    fn greedy_chain_follows_argmax() {
        assert_eq!(greedy_chain(&chain_matrix(), (TokenId(0), TokenId(1)), 3), ids(&[2, 3, 4]));
    }
}
