//! Line-oriented scenario files.
//!
//! ```text
//! # comment
//! name = search-count
//! corpus = synthetic            # or a comma-separated list of text files
//! synthetic.vocab = 200
//! target = oracle:3
//! iterations = 150
//! strategies = aded, greedy-draft
//!
//! [sweep]
//! axis = iterations
//! values = 10, 50, 150, 400
//! ```
//!
//! Keys before the first `[sweep]` set the base configuration. Each sweep
//! varies one axis over its values with everything else at the base.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::corpus::{TokenId, TokenizerMode};
use crate::engine::{SessionConfig, Strategy, VerifyMode};
use crate::target::TargetSpec;

use super::synthetic::SyntheticSpec;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("sweep starting at line {line} is missing `{what}`")]
    IncompleteSweep { line: usize, what: &'static str },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum CorpusSource {
    Synthetic(SyntheticSpec),
    Files { paths: Vec<PathBuf>, tokenizer: TokenizerMode },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    Iterations,
    C1,
    C2,
    Depth,
    Candidates,
    CorpusFraction,
    OracleOrder,
    Adaptive,
    Threshold,
}

impl Axis {
    pub const ALL: [Axis; 9] = [
        Axis::Iterations,
        Axis::C1,
        Axis::C2,
        Axis::Depth,
        Axis::Candidates,
        Axis::CorpusFraction,
        Axis::OracleOrder,
        Axis::Adaptive,
        Axis::Threshold,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Iterations => "iterations",
            Axis::C1 => "c1",
            Axis::C2 => "c2",
            Axis::Depth => "depth",
            Axis::Candidates => "candidates",
            Axis::CorpusFraction => "corpus_fraction",
            Axis::OracleOrder => "oracle_order",
            Axis::Adaptive => "adaptive",
            Axis::Threshold => "threshold",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Axis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown axis `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub axis: Axis,
    /// Values as written, used verbatim in reports.
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub corpus: CorpusSource,
    /// Train the matrix on this leading share of the documents.
    pub corpus_fraction: f64,
    /// Draw the matrix corpus from the skewed source (synthetic only).
    pub skew: bool,
    pub threshold: u32,
    pub target: TargetSpec,
    pub oracle_backoff: bool,
    pub prompts: usize,
    pub prompt_len: usize,
    /// Cut prompts from the target documents instead of sampling fresh
    /// sequences from the synthetic source.
    pub prompts_from_corpus: bool,
    /// Length of a novel pattern appended to every prompt; 0 for none.
    pub pattern: usize,
    pub pattern_repeats: usize,
    pub session: SessionConfig,
    pub strategies: Vec<Strategy>,
    pub workers: usize,
    pub wall_clock: bool,
    pub sweeps: Vec<Sweep>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "scenario".into(),
            corpus: CorpusSource::Synthetic(SyntheticSpec::default()),
            corpus_fraction: 1.0,
            skew: false,
            threshold: 1,
            target: TargetSpec::Oracle { order: 3 },
            oracle_backoff: true,
            prompts: 20,
            prompt_len: 8,
            prompts_from_corpus: false,
            pattern: 0,
            pattern_repeats: 2,
            session: SessionConfig { max_new_tokens: 32, adaptive: false, ..SessionConfig::default() },
            strategies: vec![Strategy::Aded],
            workers: 4,
            wall_clock: false,
            sweeps: Vec::new(),
        }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected on/off, got `{v}`")),
    }
}

fn parse_num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned).collect()
}

impl Scenario {
    /// Parses scenario text. Relative corpus paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, ScenarioError> {
        let mut sc = Scenario::default();
        let mut synth = SyntheticSpec::default();
        let mut tokenizer = TokenizerMode::WhitespaceWord;
        let mut files: Option<Vec<PathBuf>> = None;
        // (start line, axis, values)
        let mut sweeps: Vec<(usize, Option<Axis>, Option<Vec<String>>)> = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if line == "[sweep]" {
                    sweeps.push((line_no, None, None));
                    continue;
                }
                return Err(ScenarioError::Syntax { line: line_no, msg: format!("unknown section `{line}`") });
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ScenarioError::Syntax {
                line: line_no,
                msg: "expected `key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |msg: String| ScenarioError::BadValue { line: line_no, key: key.to_owned(), msg };

            if let Some(sweep) = sweeps.last_mut() {
                match key {
                    "axis" => sweep.1 = Some(value.parse().map_err(bad)?),
                    "values" => {
                        let vals = list(value);
                        if vals.is_empty() {
                            return Err(bad("empty value list".into()));
                        }
                        sweep.2 = Some(vals);
                    }
                    _ => return Err(ScenarioError::UnknownKey { line: line_no, key: key.to_owned() }),
                }
                continue;
            }

            let s = &mut sc.session;
            match key {
                "name" => sc.name = value.to_owned(),
                "corpus" => {
                    files = if value == "synthetic" {
                        None
                    } else {
                        Some(
                            list(value)
                                .into_iter()
                                .map(|p| match base {
                                    Some(b) if Path::new(&p).is_relative() => b.join(p),
                                    _ => PathBuf::from(p),
                                })
                                .collect(),
                        )
                    }
                }
                "tokenizer" => tokenizer = value.parse().map_err(bad)?,
                "synthetic.vocab" => synth.vocab = parse_num(value).map_err(bad)?,
                "synthetic.branching" => synth.branching = parse_num(value).map_err(bad)?,
                "synthetic.exponent" => synth.exponent = parse_num(value).map_err(bad)?,
                "synthetic.docs" => synth.docs = parse_num(value).map_err(bad)?,
                "synthetic.doc_len" => synth.doc_len = parse_num(value).map_err(bad)?,
                "synthetic.seed" => synth.seed = parse_num(value).map_err(bad)?,
                "skew" => sc.skew = parse_bool(value).map_err(bad)?,
                "corpus_fraction" => sc.corpus_fraction = parse_num(value).map_err(bad)?,
                "threshold" => sc.threshold = parse_num(value).map_err(bad)?,
                "target" => sc.target = value.parse().map_err(|e: crate::target::TargetError| bad(e.to_string()))?,
                "oracle_order" => sc.target = TargetSpec::Oracle { order: parse_num(value).map_err(bad)? },
                "oracle_backoff" => sc.oracle_backoff = parse_bool(value).map_err(bad)?,
                "prompts" => sc.prompts = parse_num(value).map_err(bad)?,
                "prompt_len" => sc.prompt_len = parse_num(value).map_err(bad)?,
                "prompt_source" => {
                    sc.prompts_from_corpus = match value {
                        "corpus" => true,
                        "fresh" => false,
                        other => return Err(bad(format!("expected corpus or fresh, got `{other}`"))),
                    }
                }
                "pattern" => sc.pattern = parse_num(value).map_err(bad)?,
                "pattern_repeats" => sc.pattern_repeats = parse_num(value).map_err(bad)?,
                "max_new_tokens" => s.max_new_tokens = parse_num(value).map_err(bad)?,
                "stop_tokens" => {
                    s.stop_tokens = list(value)
                        .iter()
                        .map(|v| parse_num::<u32>(v).map(TokenId))
                        .collect::<Result<_, _>>()
                        .map_err(bad)?
                }
                "iterations" => s.search.iterations = parse_num(value).map_err(bad)?,
                "c1" => s.search.c1 = parse_num(value).map_err(bad)?,
                "c2" => s.search.c2 = parse_num(value).map_err(bad)?,
                "depth" => s.search.depth = parse_num(value).map_err(bad)?,
                "candidates" => s.search.candidates = parse_num(value).map_err(bad)?,
                "score" => s.search.score_mode = value.parse().map_err(bad)?,
                "increment" => s.adjust.increment = parse_num(value).map_err(bad)?,
                "max_prob" => s.adjust.max_prob = parse_num(value).map_err(bad)?,
                "window" => s.adjust.window = parse_num(value).map_err(bad)?,
                "adaptive" => s.adaptive = parse_bool(value).map_err(bad)?,
                "temperature" | "top_p" => {
                    let x: f64 = parse_num(value).map_err(bad)?;
                    let (mut t, mut p) = match s.verify {
                        VerifyMode::Sampled { temperature, top_p } => (temperature, top_p),
                        VerifyMode::Greedy => (1.0, 1.0),
                    };
                    if key == "temperature" {
                        t = x
                    } else {
                        p = x
                    }
                    s.verify = if t == 0.0 { VerifyMode::Greedy } else { VerifyMode::Sampled { temperature: t, top_p: p } };
                }
                "seed" => s.seed = parse_num(value).map_err(bad)?,
                "strategies" => {
                    sc.strategies = list(value).iter().map(|v| v.parse()).collect::<Result<_, _>>().map_err(bad)?
                }
                "workers" => sc.workers = parse_num(value).map_err(bad)?,
                "wall_clock" => sc.wall_clock = parse_bool(value).map_err(bad)?,
                _ => return Err(ScenarioError::UnknownKey { line: line_no, key: key.to_owned() }),
            }
        }

        sc.corpus = match files {
            Some(paths) => CorpusSource::Files { paths, tokenizer },
            None => CorpusSource::Synthetic(synth),
        };
        for (line, axis, values) in sweeps {
            sc.sweeps.push(Sweep {
                axis: axis.ok_or(ScenarioError::IncompleteSweep { line, what: "axis" })?,
                values: values.ok_or(ScenarioError::IncompleteSweep { line, what: "values" })?,
            });
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        Scenario::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: &str| Err(ScenarioError::Invalid(m.to_owned()));
        if !(self.corpus_fraction > 0.0 && self.corpus_fraction <= 1.0) {
            return invalid("corpus_fraction must lie in (0, 1]");
        }
        if self.prompts == 0 || self.prompt_len < 2 {
            return invalid("need at least one prompt of at least two tokens");
        }
        if self.workers == 0 {
            return invalid("workers must be positive");
        }
        if self.pattern > 0 && (self.pattern < 3 || self.pattern_repeats == 0) {
            return invalid("a pattern needs at least 3 tokens and one repeat");
        }
        if let CorpusSource::Synthetic(s) = &self.corpus {
            if s.vocab == 0 || s.branching == 0 || s.branching > s.vocab as usize || s.docs == 0 || s.doc_len < 3 {
                return invalid("synthetic corpus needs vocab >= branching >= 1, docs >= 1, doc_len >= 3");
            }
        } else if self.skew {
            return invalid("skew applies to synthetic corpora only");
        }
        for sw in &self.sweeps {
            for v in &sw.values {
                let mut probe = self.clone();
                probe.apply(sw.axis, v).map_err(ScenarioError::Invalid)?;
                probe.session.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            }
        }
        self.session.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    /// Sets one axis from its textual value.
    pub fn apply(&mut self, axis: Axis, value: &str) -> Result<(), String> {
        let ctx = |e: String| format!("{axis} = {value}: {e}");
        let s = &mut self.session;
        match axis {
            Axis::Iterations => s.search.iterations = parse_num(value).map_err(ctx)?,
            Axis::C1 => s.search.c1 = parse_num(value).map_err(ctx)?,
            Axis::C2 => s.search.c2 = parse_num(value).map_err(ctx)?,
            Axis::Depth => s.search.depth = parse_num(value).map_err(ctx)?,
            Axis::Candidates => s.search.candidates = parse_num(value).map_err(ctx)?,
            Axis::CorpusFraction => {
                let f: f64 = parse_num(value).map_err(ctx)?;
                if !(f > 0.0 && f <= 1.0) {
                    return Err(ctx("fraction must lie in (0, 1]".into()));
                }
                self.corpus_fraction = f;
            }
            Axis::OracleOrder => {
                let order: usize = parse_num(value).map_err(ctx)?;
                if order < 2 {
                    return Err(ctx("oracle order must be at least 2".into()));
                }
                if !matches!(self.target, TargetSpec::Oracle { .. }) {
                    return Err(ctx("oracle_order needs an oracle target".into()));
                }
                self.target = TargetSpec::Oracle { order };
            }
            Axis::Adaptive => s.adaptive = parse_bool(value).map_err(ctx)?,
            Axis::Threshold => self.threshold = parse_num(value).map_err(ctx)?,
        }
        Ok(())
    }
}
