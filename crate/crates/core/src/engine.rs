//! The draft → verify → emit → adapt loop, plus the two baselines.
//!
//! Every step issues exactly one target forward pass. With adaptivity on,
//! the session works on a private copy of the matrix, made on the first
//! update, so the caller's matrix is never touched.

use std::borrow::Cow;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenId;
use crate::draft_tree::{DraftTree, DraftTreeError};
use crate::mcts::{greedy_chain, run_search, SearchConfig};
use crate::target::{TargetError, TargetModel};
use crate::trigram::{AdjustPolicy, MatrixError, TrigramMatrix};
use crate::verifier::{verify_greedy, verify_sampled, VerifyError, VerifyOutcome};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Tree(#[from] DraftTreeError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("invalid session config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Tree-search drafts.
    #[default]
    Aded,
    /// No drafts; one token per pass.
    Autoregressive,
    /// A single draft following the matrix argmax.
    GreedyDraft,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Aded => "aded",
            Strategy::Autoregressive => "autoregressive",
            Strategy::GreedyDraft => "greedy-draft",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "aded" | "mcts" => Ok(Strategy::Aded),
            "autoregressive" | "ar" => Ok(Strategy::Autoregressive),
            "greedy-draft" | "greedy" => Ok(Strategy::GreedyDraft),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifyMode {
    #[default]
    Greedy,
    Sampled { temperature: f64, top_p: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    pub search: SearchConfig,
    pub adjust: AdjustPolicy,
    pub adaptive: bool,
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    pub stop_tokens: HashSet<TokenId>,
    pub verify: VerifyMode,
    /// Search seeds are `seed + step`; sampled verification draws from a
    /// generator seeded with `seed`.
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            search: SearchConfig::default(),
            adjust: AdjustPolicy::default(),
            adaptive: true,
            strategy: Strategy::Aded,
            max_new_tokens: 64,
            stop_tokens: HashSet::new(),
            verify: VerifyMode::Greedy,
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.max_new_tokens == 0 {
            return Err(DecodeError::Config("max_new_tokens must be at least 1".into()));
        }
        if self.search.depth == 0 || self.search.candidates == 0 {
            return Err(DecodeError::Config("depth and candidates must be positive".into()));
        }
        if !(self.search.c2 > 0.0) {
            return Err(DecodeError::Config("c2 must be positive".into()));
        }
        if let VerifyMode::Sampled { temperature, top_p } = self.verify {
            if !(temperature > 0.0 && top_p > 0.0 && top_p <= 1.0) {
                return Err(DecodeError::Config(format!(
                    "sampled verification needs temperature > 0 and 0 < top_p <= 1, got {temperature} / {top_p}"
                )));
            }
        }
        if self.adaptive {
            self.adjust.validate()?;
        }
        Ok(())
    }
}

/// Wall-clock time per phase.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimings {
    pub search: Duration,
    pub build: Duration,
    pub verify: Duration,
    pub adjust: Duration,
}

impl PhaseTimings {
    pub fn total(&self) -> Duration {
        self.search + self.build + self.verify + self.adjust
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeMetrics {
    pub emitted: usize,
    pub forward_passes: usize,
    /// Tokens emitted by each step, after budget and stop truncation.
    pub accept_lengths: Vec<usize>,
    pub timings: PhaseTimings,
}

impl DecodeMetrics {
    pub fn average_accept_length(&self) -> f64 {
        if self.accept_lengths.is_empty() {
            0.0
        } else {
            self.accept_lengths.iter().sum::<usize>() as f64 / self.accept_lengths.len() as f64
        }
    }

    /// Emitted tokens per forward pass.
    pub fn pass_reduction(&self) -> f64 {
        if self.forward_passes == 0 {
            0.0
        } else {
            self.emitted as f64 / self.forward_passes as f64
        }
    }

    /// Folds another session's counters into this one.
    pub fn absorb(&mut self, other: &DecodeMetrics) {
        self.emitted += other.emitted;
        self.forward_passes += other.forward_passes;
        self.accept_lengths.extend_from_slice(&other.accept_lengths);
        self.timings.search += other.timings.search;
        self.timings.build += other.timings.build;
        self.timings.verify += other.timings.verify;
        self.timings.adjust += other.timings.adjust;
    }

    pub fn wall_clock(&self) -> Duration {
        self.timings.total()
    }
}

/// Reportable view of a session's metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub emitted_tokens: usize,
    pub forward_passes: usize,
    pub accept_length_avg: f64,
    pub accept_lengths: Vec<usize>,
    pub pass_reduction: f64,
    pub speedup: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<WallClock>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub search: f64,
    pub build: f64,
    pub verify: f64,
    pub adjust: f64,
    pub total: f64,
}

impl WallClock {
    fn from(t: &PhaseTimings) -> Self {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        WallClock {
            search: ms(t.search),
            build: ms(t.build),
            verify: ms(t.verify),
            adjust: ms(t.adjust),
            total: ms(t.total()),
        }
    }
}

/// Totals and ratios for a finished session. With a baseline and
/// `wall_clock` set, speedup is baseline time over session time; otherwise
/// it is the pass-reduction factor. Timings are only reported when
/// `wall_clock` is set, which keeps the default output reproducible.
pub fn collect_metrics(metrics: &DecodeMetrics, baseline: Option<&DecodeMetrics>, wall_clock: bool) -> MetricsSummary {
    let speedup = match baseline {
        Some(b) if wall_clock && metrics.wall_clock() > Duration::ZERO => {
            b.wall_clock().as_secs_f64() / metrics.wall_clock().as_secs_f64()
        }
        _ => metrics.pass_reduction(),
    };
    MetricsSummary {
        emitted_tokens: metrics.emitted,
        forward_passes: metrics.forward_passes,
        accept_length_avg: metrics.average_accept_length(),
        accept_lengths: metrics.accept_lengths.clone(),
        pass_reduction: metrics.pass_reduction(),
        speedup,
        wall_clock_ms: wall_clock.then(|| WallClock::from(&metrics.timings)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    /// Newly generated tokens, prompt excluded.
    pub tokens: Vec<TokenId>,
    pub metrics: DecodeMetrics,
    /// The session's matrix after adaptation, when adaptivity changed it.
    pub adapted: Option<TrigramMatrix>,
}

/// Generates up to `cfg.max_new_tokens` tokens after `prompt`.
pub fn decode(
    prompt: &[TokenId],
    matrix: &TrigramMatrix,
    target: &dyn TargetModel,
    cfg: &SessionConfig,
) -> Result<DecodeOutput, DecodeError> {
    decode_with(prompt, matrix, target, cfg, |_| {})
}

/// [`decode`] with a callback receiving each step's emitted tokens.
pub fn decode_with<F>(
    prompt: &[TokenId],
    matrix: &TrigramMatrix,
    target: &dyn TargetModel,
    cfg: &SessionConfig,
    mut on_step: F,
) -> Result<DecodeOutput, DecodeError>
where
    F: FnMut(&[TokenId]),
{
    cfg.validate()?;
    let mut session: Cow<'_, TrigramMatrix> = Cow::Borrowed(matrix);
    let mut sequence = prompt.to_vec();
    let mut metrics = DecodeMetrics::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step: u64 = 0;

    while metrics.emitted < cfg.max_new_tokens {
        let t0 = Instant::now();
        let drafts = draft(&session, &sequence, cfg, step);
        let t1 = Instant::now();
        let tree = DraftTree::build(&drafts)?;
        let t2 = Instant::now();
        let dists = target.score_tree(&sequence, &tree)?;
        metrics.forward_passes += 1;
        let outcome: VerifyOutcome = match cfg.verify {
            VerifyMode::Greedy => verify_greedy(&tree, &dists)?,
            VerifyMode::Sampled { temperature, top_p } => verify_sampled(&tree, &dists, temperature, top_p, &mut rng)?,
        };
        let t3 = Instant::now();

        let budget = cfg.max_new_tokens - metrics.emitted;
        let mut emitted = outcome.emitted();
        emitted.truncate(budget);
        let stop_at = emitted.iter().position(|t| cfg.stop_tokens.contains(t));
        if let Some(i) = stop_at {
            emitted.truncate(i + 1);
        }
        sequence.extend_from_slice(&emitted);
        metrics.emitted += emitted.len();
        metrics.accept_lengths.push(emitted.len());
        on_step(&emitted);

        if cfg.adaptive {
            session.to_mut().adjust_from_recent(&sequence, &cfg.adjust)?;
        }
        let t4 = Instant::now();
        metrics.timings.search += t1 - t0;
        metrics.timings.build += t2 - t1;
        metrics.timings.verify += t3 - t2;
        metrics.timings.adjust += t4 - t3;
        step += 1;
        if stop_at.is_some() {
            break;
        }
    }

    let adapted = match session {
        Cow::Owned(m) => Some(m),
        Cow::Borrowed(_) => None,
    };
    Ok(DecodeOutput { tokens: sequence.split_off(prompt.len()), metrics, adapted })
}

fn draft(matrix: &TrigramMatrix, sequence: &[TokenId], cfg: &SessionConfig, step: u64) -> Vec<Vec<TokenId>> {
    let n = sequence.len();
    if n < 2 || cfg.strategy == Strategy::Autoregressive {
        return Vec::new();
    }
    let tail = (sequence[n - 2], sequence[n - 1]);
    match cfg.strategy {
        Strategy::Autoregressive => Vec::new(),
        Strategy::GreedyDraft => {
            let chain = greedy_chain(matrix, tail, cfg.search.depth);
            if chain.is_empty() {
                Vec::new()
            } else {
                vec![chain]
            }
        }
        Strategy::Aded => {
            let search = SearchConfig { seed: cfg.seed.wrapping_add(step), ..cfg.search.clone() };
            run_search(matrix, tail, &search).into_iter().map(|c| c.tokens).collect()
        }
    }
}
