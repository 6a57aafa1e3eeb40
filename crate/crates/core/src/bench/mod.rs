//! Parameter sweeps over decode strategies.
//!
//! A scenario fixes a corpus, a target and a base session; each sweep value
//! forms a group of cells, one per strategy plus the autoregressive
//! baseline. Groups run on a bounded worker pool. Prompts and search seeds
//! are shared across the cells of a group, so strategies are compared on
//! identical inputs.

mod scenario;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{tokenize, CorpusError, TokenId, TrigramCounts, Vocabulary};
use crate::engine::{decode, DecodeError, DecodeMetrics, Strategy, VerifyMode};
use crate::target::{TargetError, TargetOptions};
use crate::trigram::{MatrixError, TrigramMatrix};

pub use scenario::{Axis, CorpusSource, Scenario, ScenarioError, Sweep};
pub use synthetic::{novel_pattern, MarkovSource, SyntheticSpec};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("cannot read corpus {path}: {err}")]
    Io { path: String, err: std::io::Error },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error("{axis} = {value}, {strategy}: {err}")]
    Decode { axis: String, value: String, strategy: Strategy, err: DecodeError },
    #[error("{0}")]
    Setup(String),
}

/// One cell of a report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub axis: String,
    pub value: String,
    pub strategy: Strategy,
    pub prompts: usize,
    pub emitted_tokens: usize,
    pub forward_passes: usize,
    pub accept_length_avg: f64,
    /// Average accept length over steps starting in the first half of each
    /// prompt's output, and over the remaining steps.
    pub first_half_avg: f64,
    pub second_half_avg: f64,
    /// Relative to the group's autoregressive row: pass reduction, or the
    /// wall-clock ratio when timings are enabled.
    pub speedup: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub value: String,
    pub accept_length_avg: f64,
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub scenario: String,
    pub rows: Vec<BenchRow>,
    /// axis, then strategy, then points in sweep order.
    pub series: BTreeMap<String, BTreeMap<String, Vec<SeriesPoint>>>,
}

impl BenchReport {
    pub fn rows_for(&self, axis: &str, strategy: Strategy) -> Vec<&BenchRow> {
        self.rows.iter().filter(|r| r.axis == axis && r.strategy == strategy).collect()
    }

    pub fn row(&self, axis: &str, value: &str, strategy: Strategy) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.axis == axis && r.value == value && r.strategy == strategy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let timed = self.rows.iter().any(|r| r.wall_clock_ms.is_some());
        let _ = write!(
            out,
            "{:<16} {:>8} {:<15} {:>10} {:>9} {:>8} {:>8}",
            "axis", "value", "strategy", "accept_avg", "passes", "emitted", "speedup"
        );
        if timed {
            let _ = write!(out, " {:>10}", "wall_ms");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{:<16} {:>8} {:<15} {:>10.4} {:>9} {:>8} {:>8.3}",
                r.axis, r.value, r.strategy.as_str(), r.accept_length_avg, r.forward_passes, r.emitted_tokens, r.speedup
            );
            if let Some(ms) = r.wall_clock_ms {
                let _ = write!(out, " {ms:>10.2}");
            }
            out.push('\n');
        }
        out
    }
}

/// Documents for the matrix and for the target, plus the vocabulary size.
#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    pub matrix_docs: Vec<Vec<TokenId>>,
    pub target_docs: Vec<Vec<TokenId>>,
    pub vocab_size: u32,
    pub source: Option<MarkovSource>,
}

pub fn prepare_corpus(sc: &Scenario) -> Result<PreparedCorpus, BenchError> {
    match &sc.corpus {
        CorpusSource::Synthetic(spec) => {
            let src = MarkovSource::new(spec.clone());
            let target_docs = src.documents(spec.seed);
            let matrix_docs = if sc.skew { src.skewed().documents(spec.seed) } else { target_docs.clone() };
            Ok(PreparedCorpus { matrix_docs, target_docs, vocab_size: spec.vocab, source: Some(src) })
        }
        CorpusSource::Files { paths, tokenizer } => {
            let mut vocab = Vocabulary::new();
            let mut docs = Vec::new();
            for p in paths {
                let text = std::fs::read_to_string(p)
                    .map_err(|err| BenchError::Io { path: p.display().to_string(), err })?;
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    let doc = tokenize(line, &mut vocab, *tokenizer)?;
                    if !doc.is_empty() {
                        docs.push(doc);
                    }
                }
            }
            let vocab_size = docs.iter().flatten().map(|t| t.0 + 1).max().unwrap_or(0).max(vocab.len() as u32);
            Ok(PreparedCorpus { matrix_docs: docs.clone(), target_docs: docs, vocab_size, source: None })
        }
    }
}

/// Prompts shared by every cell, with the pattern (if any) appended to each
/// prompt and to the target's training data.
pub fn prepare_prompts(sc: &Scenario, corpus: &mut PreparedCorpus) -> Result<Vec<Vec<TokenId>>, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(sc.session.seed ^ 0x5052_4F4D_5054);
    let mut prompts = Vec::with_capacity(sc.prompts);
    for _ in 0..sc.prompts {
        let p = match &corpus.source {
            Some(src) if !sc.prompts_from_corpus => src.sample_sequence(sc.prompt_len, &mut rng),
            _ => {
                let long: Vec<&Vec<TokenId>> =
                    corpus.target_docs.iter().filter(|d| d.len() >= sc.prompt_len).collect();
                if long.is_empty() {
                    return Err(BenchError::Setup(format!("no document has {} tokens for a prompt", sc.prompt_len)));
                }
                let doc = long[rng.gen_range(0..long.len())];
                let start = rng.gen_range(0..=doc.len() - sc.prompt_len);
                doc[start..start + sc.prompt_len].to_vec()
            }
        };
        prompts.push(p);
    }
    if sc.pattern > 0 {
        let counts = TrigramCounts::from_documents(&corpus.matrix_docs);
        let pattern = novel_pattern(&counts, corpus.vocab_size, sc.pattern, &mut rng)
            .ok_or_else(|| BenchError::Setup("could not draw a pattern absent from the corpus".into()))?;
        let cycled: Vec<TokenId> = pattern.iter().cycle().take(pattern.len() * 4).copied().collect();
        corpus.target_docs.extend(std::iter::repeat_n(cycled, 64));
        for p in &mut prompts {
            for _ in 0..sc.pattern_repeats {
                p.extend_from_slice(&pattern);
            }
        }
    }
    Ok(prompts)
}

#[derive(Default)]
struct CellTotals {
    metrics: DecodeMetrics,
    first: (usize, usize),
    second: (usize, usize),
}

impl CellTotals {
    fn add(&mut self, m: &DecodeMetrics) {
        let half = m.emitted as f64 / 2.0;
        let mut pos = 0usize;
        for &a in &m.accept_lengths {
            let slot = if (pos as f64) < half { &mut self.first } else { &mut self.second };
            slot.0 += a;
            slot.1 += 1;
            pos += a;
        }
        self.metrics.absorb(m);
    }
}

fn ratio(sum: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

fn group_strategies(sc: &Scenario) -> Vec<Strategy> {
    let mut out = vec![Strategy::Autoregressive];
    for &s in &sc.strategies {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

fn run_group(
    sc: &Scenario,
    axis: &str,
    value: &str,
    corpus: &PreparedCorpus,
    prompts: &[Vec<TokenId>],
) -> Result<Vec<BenchRow>, BenchError> {
    let n_docs = ((corpus.matrix_docs.len() as f64 * sc.corpus_fraction).ceil() as usize).clamp(1, corpus.matrix_docs.len().max(1));
    let counts = TrigramCounts::from_documents(&corpus.matrix_docs[..n_docs.min(corpus.matrix_docs.len())]);
    let matrix = TrigramMatrix::finalize(&counts, sc.threshold)?.with_vocab_size(corpus.vocab_size);
    let (temperature, top_p) = match sc.session.verify {
        VerifyMode::Sampled { temperature, top_p } => (temperature, top_p),
        VerifyMode::Greedy => (0.0, 1.0),
    };
    let opts = TargetOptions {
        backoff: sc.oracle_backoff,
        vocab_size: Some(corpus.vocab_size),
        temperature,
        top_p,
        ..TargetOptions::default()
    };
    let target = sc.target.instantiate(&corpus.target_docs, &opts)?;

    let mut cells = Vec::new();
    for strategy in group_strategies(sc) {
        let mut totals = CellTotals::default();
        for (i, prompt) in prompts.iter().enumerate() {
            let mut cfg = sc.session.clone();
            cfg.strategy = strategy;
            cfg.seed = sc.session.seed.wrapping_add((i as u64) << 20);
            cfg.search.seed = cfg.seed;
            let out = decode(prompt, &matrix, target.as_ref(), &cfg).map_err(|err| BenchError::Decode {
                axis: axis.to_owned(),
                value: value.to_owned(),
                strategy,
                err,
            })?;
            totals.add(&out.metrics);
        }
        cells.push((strategy, totals));
    }

    let base = cells[0].1.metrics.clone();
    Ok(cells
        .into_iter()
        .map(|(strategy, t)| {
            let m = &t.metrics;
            let wall = m.wall_clock();
            let speedup = if sc.wall_clock && wall > Duration::ZERO {
                base.wall_clock().as_secs_f64() / wall.as_secs_f64()
            } else if base.pass_reduction() > 0.0 {
                m.pass_reduction() / base.pass_reduction()
            } else {
                0.0
            };
            BenchRow {
                axis: axis.to_owned(),
                value: value.to_owned(),
                strategy,
                prompts: prompts.len(),
                emitted_tokens: m.emitted,
                forward_passes: m.forward_passes,
                accept_length_avg: m.average_accept_length(),
                first_half_avg: ratio(t.first.0, t.first.1),
                second_half_avg: ratio(t.second.0, t.second.1),
                speedup,
                wall_clock_ms: sc.wall_clock.then(|| wall.as_secs_f64() * 1e3),
            }
        })
        .collect())
}

/// Runs every cell of the scenario. Without sweeps, a single group with
/// axis `base` is reported.
pub fn run(sc: &Scenario) -> Result<BenchReport, BenchError> {
    sc.validate()?;
    let mut corpus = prepare_corpus(sc)?;
    let prompts = prepare_prompts(sc, &mut corpus)?;

    let mut groups: Vec<(String, String, Scenario)> = Vec::new();
    if sc.sweeps.is_empty() {
        groups.push(("base".into(), "-".into(), sc.clone()));
    }
    for sw in &sc.sweeps {
        for v in &sw.values {
            let mut variant = sc.clone();
            variant.apply(sw.axis, v).map_err(|e| BenchError::Scenario(ScenarioError::Invalid(e)))?;
            groups.push((sw.axis.to_string(), v.clone(), variant));
        }
    }
    log::info!("bench `{}`: {} groups, {} prompts", sc.name, groups.len(), prompts.len());

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sc.workers)
        .build()
        .map_err(|e| BenchError::Setup(e.to_string()))?;
    let results: Vec<Result<Vec<BenchRow>, BenchError>> = pool.install(|| {
        groups
            .par_iter()
            .map(|(axis, value, variant)| run_group(variant, axis, value, &corpus, &prompts))
            .collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }

    let mut series: BTreeMap<String, BTreeMap<String, Vec<SeriesPoint>>> = BTreeMap::new();
    for r in &rows {
        series.entry(r.axis.clone()).or_default().entry(r.strategy.to_string()).or_default().push(SeriesPoint {
            value: r.value.clone(),
            accept_length_avg: r.accept_length_avg,
            speedup: r.speedup,
        });
    }
    Ok(BenchReport { scenario: sc.name.clone(), rows, series })
}
