//! The tri-gram matrix: a pruned map from a two-token context to a weighted
//! table of continuations.
//!
//! Probabilities are `weight / total` over a context's retained entries, so
//! freshly finalized weights are raw counts and the probability is the plain
//! count ratio. Online reinforcement ([`TrigramMatrix::adjust_from_recent`])
//! edits weights so that the reinforced continuation lands on the requested
//! probability share while the context stays normalized.
//!
//! Contexts with no tri-gram entry back off to a bi-gram table keyed by the
//! last token and then to a unigram table. Both are derived from the
//! retained tri-gram weights and kept in step with every mutation.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::corpus::{Bigram, TokenId, TrigramCounts};
use crate::distribution::{rank_order, Distribution};

/// Default per-context cap on retained continuations.
pub const DEFAULT_RETENTION: usize = 64;

/// Entries whose weight falls to this value during bookkeeping are dropped.
const WEIGHT_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MatrixError {
    #[error("prune threshold must be at least 1")]
    ZeroThreshold,
    #[error("retention bound must be in 1..=65535, got {0}")]
    BadRetention(usize),
    #[error("invalid adjust policy: {0}")]
    InvalidPolicy(String),
}

/// Continuations of one context, sorted by descending weight with ties
/// broken by ascending token id. Never empty, all weights positive.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuationTable {
    entries: Vec<(TokenId, f64)>,
    total: f64,
}

impl ContinuationTable {
    /// Keeps positive weights, sorts, and trims to `retention` entries.
    /// Returns `None` when nothing survives.
    pub fn from_weights<I>(weights: I, retention: usize) -> Option<Self>
    where
        I: IntoIterator<Item = (TokenId, f64)>,
    {
        let mut entries: Vec<_> = weights.into_iter().filter(|e| e.1 > 0.0).collect();
        if entries.is_empty() {
            return None;
        }
        entries.sort_by(rank_order);
        entries.truncate(retention.max(1));
        let mut t = ContinuationTable { entries, total: 0.0 };
        t.retotal();
        Some(t)
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

    /// Sum of retained weights.
    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn weight(&self, token: TokenId) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == token).map(|e| e.1)
    }

    pub fn probability(&self, token: TokenId) -> f64 {
        self.weight(token).map_or(0.0, |w| w / self.total)
    }

    /// `(token, probability)` pairs in table order.
    pub fn probabilities(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        self.entries.iter().map(move |&(t, w)| (t, w / self.total))
    }

    pub fn distribution(&self) -> Distribution {
        Distribution::new(self.probabilities().collect())
    }

    /// Highest-weight token (lowest id on ties).
    pub fn top(&self) -> TokenId {
        self.entries[0].0
    }

    fn retotal(&mut self) {
        self.total = self.entries.iter().map(|e| e.1).sum();
    }

    fn resort(&mut self) {
        self.entries.sort_by(rank_order);
    }

    /// Raises `token` to `min(share + increment, max_prob)`, or inserts it at
    /// share `increment` when absent, then re-applies the retention bound and
    /// the probability cap.
    fn reinforce(&mut self, token: TokenId, policy: &AdjustPolicy, retention: usize) {
        let idx = match self.entries.iter().position(|e| e.0 == token) {
            Some(i) => i,
            None => {
                self.entries.push((token, 0.0));
                self.entries.len() - 1
            }
        };
        let current = self.entries[idx].1 / self.total;
        let target = if self.entries[idx].1 > 0.0 {
            (current + policy.increment).min(policy.max_prob)
        } else {
            policy.increment
        };
        self.set_share(idx, target);
        self.resort();
        if self.entries.len() > retention {
            self.entries.truncate(retention);
        }
        self.retotal();
        self.enforce_cap(policy.max_prob);
    }

    /// Gives entry `idx` the probability `share`, holding the other weights
    /// fixed: w = share * others / (1 - share).
    fn set_share(&mut self, idx: usize, share: f64) {
        let others: f64 = self
            .entries
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != idx)
            .map(|(_, e)| e.1)
            .sum();
        if others <= 0.0 {
            if self.entries[idx].1 <= 0.0 {
                self.entries[idx].1 = 1.0;
            }
        } else if share >= 1.0 {
            let keep = self.entries[idx];
            let w = if keep.1 > 0.0 { keep.1 } else { others };
            self.entries = vec![(keep.0, w)];
        } else {
            self.entries[idx].1 = share * others / (1.0 - share);
        }
        self.retotal();
    }

    /// Water-fills any share above `cap` back down to `cap`, spreading the
    /// excess over the uncapped entries in proportion to their weights.
    /// A no-op for single-entry tables, or when the cap cannot be met.
    fn enforce_cap(&mut self, cap: f64) {
        let n = self.entries.len();
        if n <= 1 || cap >= 1.0 || (n as f64) * cap < 1.0 {
            return;
        }
        let mut capped = vec![false; n];
        loop {
            let total = self.total;
            let mut grew = false;
            for (i, e) in self.entries.iter().enumerate() {
                if !capped[i] && e.1 / total > cap {
                    capped[i] = true;
                    grew = true;
                }
            }
            if !grew {
                break;
            }
            let k = capped.iter().filter(|&&c| c).count() as f64;
            let free_share = 1.0 - k * cap;
            let free_weight: f64 = self
                .entries
                .iter()
                .zip(&capped)
                .filter(|(_, &c)| !c)
                .map(|(e, _)| e.1)
                .sum();
            if free_share <= f64::EPSILON || free_weight <= 0.0 {
                let w = self.total / n as f64;
                self.entries.iter_mut().for_each(|e| e.1 = w);
                self.retotal();
                break;
            }
            let new_total = free_weight / free_share;
            for (e, &c) in self.entries.iter_mut().zip(&capped) {
                if c {
                    e.1 = cap * new_total;
                }
            }
            self.retotal();
        }
        self.resort();
    }
}

/// Parameters of online reinforcement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjustPolicy {
    /// Probability share added per observed tri-gram.
    pub increment: f64,
    /// Ceiling on any single continuation's share.
    pub max_prob: f64,
    /// Only the last `window` tokens are scanned.
    pub window: usize,
}

impl Default for AdjustPolicy {
    fn default() -> Self {
        AdjustPolicy { increment: 0.05, max_prob: 0.95, window: 64 }
    }
}

impl AdjustPolicy {
    pub fn validate(&self) -> Result<(), MatrixError> {
        if !(self.increment > 0.0) {
            return Err(MatrixError::InvalidPolicy("increment must be positive".into()));
        }
        if !(self.max_prob > 0.0 && self.max_prob <= 1.0) {
            return Err(MatrixError::InvalidPolicy("max_prob must lie in (0, 1]".into()));
        }
        if self.increment > self.max_prob {
            return Err(MatrixError::InvalidPolicy("increment exceeds max_prob".into()));
        }
        if self.window == 0 {
            return Err(MatrixError::InvalidPolicy("window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which table answered a lookup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackoffLevel {
    Trigram,
    Bigram,
    Unigram,
}

#[derive(Clone, Copy, Debug)]
pub struct Lookup<'a> {
    pub level: BackoffLevel,
    pub table: &'a ContinuationTable,
}

/// Lower-order tables derived from the tri-gram weights.
#[derive(Clone, Debug, Default)]
struct Backoff {
    bigram_weights: BTreeMap<TokenId, BTreeMap<TokenId, f64>>,
    unigram_weights: BTreeMap<TokenId, f64>,
    bigram: BTreeMap<TokenId, ContinuationTable>,
    unigram: Option<ContinuationTable>,
}

impl Backoff {
    fn build(contexts: &BTreeMap<Bigram, ContinuationTable>, retention: usize) -> Self {
        let mut b = Backoff::default();
        for (ctx, table) in contexts {
            b.accumulate(*ctx, table, 1.0);
        }
        let rows: Vec<TokenId> = b.bigram_weights.keys().copied().collect();
        for r in rows {
            b.refresh_row(r, retention);
        }
        b.refresh_unigram(retention);
        b
    }

    fn accumulate(&mut self, ctx: Bigram, table: &ContinuationTable, sign: f64) {
        let row = self.bigram_weights.entry(ctx.1).or_default();
        for &(t, w) in &table.entries {
            let v = row.entry(t).or_insert(0.0);
            *v += sign * w;
            if *v <= WEIGHT_EPSILON {
                row.remove(&t);
            }
            let u = self.unigram_weights.entry(t).or_insert(0.0);
            *u += sign * w;
            if *u <= WEIGHT_EPSILON {
                self.unigram_weights.remove(&t);
            }
        }
        if row.is_empty() {
            self.bigram_weights.remove(&ctx.1);
        }
    }

    fn refresh_row(&mut self, prev: TokenId, retention: usize) {
        let table = self.bigram_weights.get(&prev).and_then(|row| {
            ContinuationTable::from_weights(row.iter().map(|(&t, &w)| (t, w)), retention)
        });
        match table {
            Some(t) => {
                self.bigram.insert(prev, t);
            }
            None => {
                self.bigram.remove(&prev);
            }
        }
    }

    fn refresh_unigram(&mut self, retention: usize) {
        self.unigram = ContinuationTable::from_weights(
            self.unigram_weights.iter().map(|(&t, &w)| (t, w)),
            retention,
        );
    }
}

/// Pruned tri-gram conditional-probability matrix.
#[derive(Clone, Debug)]
pub struct TrigramMatrix {
    contexts: BTreeMap<Bigram, ContinuationTable>,
    vocab_size: u32,
    threshold: Option<u32>,
    retention: usize,
    backoff: Backoff,
}

impl PartialEq for TrigramMatrix {
    /// Compares canonical content: vocabulary size and every table.
    fn eq(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size && self.contexts == other.contexts
    }
}

impl Default for TrigramMatrix {
    fn default() -> Self {
        TrigramMatrix::empty(0)
    }
}

impl TrigramMatrix {
    pub fn empty(vocab_size: u32) -> Self {
        TrigramMatrix {
            contexts: BTreeMap::new(),
            vocab_size,
            threshold: None,
            retention: DEFAULT_RETENTION,
            backoff: Backoff::default(),
        }
    }

    /// Keeps continuations whose raw count is at least `threshold`, with the
    /// default retention bound. Weights are the raw counts.
    pub fn finalize(counts: &TrigramCounts, threshold: u32) -> Result<Self, MatrixError> {
        Self::finalize_with(counts, threshold, DEFAULT_RETENTION)
    }

    pub fn finalize_with(
        counts: &TrigramCounts,
        threshold: u32,
        retention: usize,
    ) -> Result<Self, MatrixError> {
        if threshold == 0 {
            return Err(MatrixError::ZeroThreshold);
        }
        check_retention(retention)?;
        let mut contexts = BTreeMap::new();
        for (&ctx, conts) in counts.iter() {
            let kept = conts
                .iter()
                .filter(|(_, &c)| c >= threshold as u64)
                .map(|(&t, &c)| (t, c as f64));
            if let Some(table) = ContinuationTable::from_weights(kept, retention) {
                contexts.insert(ctx, table);
            }
        }
        Ok(Self::from_parts(contexts, counts.vocab_bound(), Some(threshold), retention))
    }

    pub(crate) fn from_parts(
        contexts: BTreeMap<Bigram, ContinuationTable>,
        vocab_size: u32,
        threshold: Option<u32>,
        retention: usize,
    ) -> Self {
        let backoff = Backoff::build(&contexts, retention);
        TrigramMatrix { contexts, vocab_size, threshold, retention, backoff }
    }

    pub(crate) fn table_from_raw(entries: Vec<(TokenId, f64)>) -> Option<ContinuationTable> {
        ContinuationTable::from_weights(entries, usize::MAX)
    }

    /// Widens the recorded vocabulary size; never shrinks it.
    pub fn with_vocab_size(mut self, vocab_size: u32) -> Self {
        self.vocab_size = self.vocab_size.max(vocab_size);
        self
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    /// Finalization threshold, unknown for matrices read from disk.
    pub fn threshold(&self) -> Option<u32> {
        self.threshold
    }

    pub fn retention(&self) -> usize {
        self.retention
    }

    pub fn set_retention(&mut self, retention: usize) -> Result<(), MatrixError> {
        check_retention(retention)?;
        self.retention = retention;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    pub fn entry_count(&self) -> usize {
        self.contexts.values().map(ContinuationTable::len).sum()
    }

    pub fn contexts(&self) -> impl Iterator<Item = (&Bigram, &ContinuationTable)> {
        self.contexts.iter()
    }

    pub fn table(&self, ctx: Bigram) -> Option<&ContinuationTable> {
        self.contexts.get(&ctx)
    }

    /// Tri-gram conditional distribution; empty for unknown contexts.
    pub fn conditional(&self, ctx: Bigram) -> Distribution {
        self.contexts.get(&ctx).map(ContinuationTable::distribution).unwrap_or_default()
    }

    /// Tri-gram table for `ctx`, else the bi-gram table of its last token,
    /// else the unigram table. `None` only for an empty matrix.
    pub fn lookup(&self, ctx: Bigram) -> Option<Lookup<'_>> {
        if let Some(t) = self.contexts.get(&ctx) {
            return Some(Lookup { level: BackoffLevel::Trigram, table: t });
        }
        if let Some(t) = self.backoff.bigram.get(&ctx.1) {
            return Some(Lookup { level: BackoffLevel::Bigram, table: t });
        }
        self.backoff.unigram.as_ref().map(|t| Lookup { level: BackoffLevel::Unigram, table: t })
    }

    /// Conditional distribution with backoff applied.
    pub fn conditional_with_backoff(&self, ctx: Bigram) -> Distribution {
        self.lookup(ctx).map(|l| l.table.distribution()).unwrap_or_default()
    }

    /// Reinforces every tri-gram window in the last `policy.window` tokens.
    pub fn adjust_from_recent(
        &mut self,
        tokens: &[TokenId],
        policy: &AdjustPolicy,
    ) -> Result<(), MatrixError> {
        policy.validate()?;
        let start = tokens.len().saturating_sub(policy.window);
        let recent = &tokens[start..];
        if recent.len() < 3 {
            return Ok(());
        }
        for w in recent.windows(3) {
            self.reinforce((w[0], w[1]), w[2], policy);
        }
        self.backoff.refresh_unigram(self.retention);
        Ok(())
    }

    fn reinforce(&mut self, ctx: Bigram, token: TokenId, policy: &AdjustPolicy) {
        let retention = self.retention;
        self.vocab_size = self.vocab_size.max(ctx.0.0.max(ctx.1.0).max(token.0) + 1);
        match self.contexts.get_mut(&ctx) {
            Some(table) => {
                self.backoff.accumulate(ctx, table, -1.0);
                table.reinforce(token, policy, retention);
                self.backoff.accumulate(ctx, table, 1.0);
            }
            None => {
                let table = ContinuationTable { entries: vec![(token, 1.0)], total: 1.0 };
                self.backoff.accumulate(ctx, &table, 1.0);
                self.contexts.insert(ctx, table);
            }
        }
        self.backoff.refresh_row(ctx.1, retention);
    }
}

fn check_retention(retention: usize) -> Result<(), MatrixError> {
    if retention == 0 || retention > u16::MAX as usize {
        Err(MatrixError::BadRetention(retention))
    } else {
        Ok(())
    }
}
