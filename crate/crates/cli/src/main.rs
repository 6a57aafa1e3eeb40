use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use aded_core::bench::{self, Scenario};
use aded_core::corpus::{
    detokenize, read_pretokenized, tokenize, CorpusStats, TokenId, TokenizerMode, TrigramCounts, Vocabulary,
};
use aded_core::engine::{collect_metrics, decode, decode_with, SessionConfig, Strategy, VerifyMode};
use aded_core::mcts::{ScoreMode, SearchConfig};
use aded_core::target::{TargetOptions, TargetSpec};
use aded_core::{AdjustPolicy, TrigramMatrix};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

/// Speculative decoding with tri-gram drafts and tree search.
#[derive(Parser)]
#[command(name = "aded", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count tri-grams in a corpus and write a matrix file.
    Build(BuildArgs),
    /// Decode a continuation of a prompt.
    Decode(DecodeArgs),
    /// Run a benchmark scenario file.
    Bench(BenchArgs),
    /// Summarize a matrix file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct BuildArgs {
    /// Corpus files; text files hold one document per non-empty line.
    #[arg(required = true)]
    corpus: Vec<PathBuf>,
    #[arg(long, default_value = "whitespace")]
    tokenizer: TokenizerMode,
    /// Minimum tri-gram count kept.
    #[arg(long, short = 't', default_value_t = 1)]
    threshold: u32,
    #[arg(long, short = 'o')]
    output: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, default_value_t = 150)]
    iterations: usize,
    #[arg(long, default_value_t = 32.0)]
    c1: f64,
    #[arg(long, default_value_t = 8.0)]
    c2: f64,
    /// Maximum draft length.
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 24)]
    candidates: usize,
    /// Rollout score: sum or log.
    #[arg(long, default_value = "sum")]
    score: ScoreMode,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, short = 'm')]
    matrix: PathBuf,
    /// oracle:K, scripted:PATH or remote:HOST:PORT.
    #[arg(long, default_value = "oracle:3")]
    target: TargetSpec,
    /// Training text for an oracle target.
    #[arg(long = "target-corpus")]
    target_corpus: Vec<PathBuf>,
    #[arg(long, short = 'p')]
    prompt: String,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long, default_value_t = 0.05)]
    increment: f64,
    #[arg(long = "max-prob", default_value_t = 0.95)]
    max_prob: f64,
    #[arg(long, default_value_t = 64)]
    window: usize,
    #[arg(long, default_value = "on", value_parser = parse_switch, action = clap::ArgAction::Set)]
    adaptive: bool,
    #[arg(long, default_value = "aded")]
    strategy: Strategy,
    /// 0 verifies greedily.
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long = "top-p", default_value_t = 1.0)]
    top_p: f64,
    #[arg(long = "max-new-tokens", default_value_t = 64)]
    max_new_tokens: usize,
    /// Surfaces that end generation.
    #[arg(long = "stop")]
    stop: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report phase timings and a wall-clock speedup over autoregressive decoding.
    #[arg(long = "wall-clock", alias = "timings")]
    wall_clock: bool,
    /// Write the adapted matrix here after decoding.
    #[arg(long = "save-adapted")]
    save_adapted: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    scenario: PathBuf,
    /// Also write the JSON report to this file.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Print JSON instead of the table.
    #[arg(long)]
    json_stdout: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long = "wall-clock", alias = "timings")]
    wall_clock: bool,
}

#[derive(Args)]
struct InspectArgs {
    matrix: PathBuf,
    /// Show the distribution after this two-token context.
    #[arg(long)]
    context: Option<String>,
    /// Entries shown per distribution.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected on or off, got `{s}`")),
    }
}

fn vocab_path(matrix: &Path) -> PathBuf {
    let mut name = matrix.as_os_str().to_owned();
    name.push(".vocab.json");
    PathBuf::from(name)
}

fn load_vocab(matrix: &Path) -> Result<Vocabulary> {
    let path = vocab_path(matrix);
    let text = fs::read_to_string(&path).with_context(|| format!("reading vocabulary {}", path.display()))?;
    let mut vocab: Vocabulary = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    vocab.reindex();
    Ok(vocab)
}

fn read_documents(paths: &[PathBuf], vocab: &mut Vocabulary, mode: TokenizerMode) -> Result<Vec<Vec<TokenId>>> {
    let mut docs = Vec::new();
    for p in paths {
        if mode == TokenizerMode::ExternalPretokenized {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let limit = (!vocab.is_mutable()).then(|| vocab.len());
            docs.extend(read_pretokenized(&bytes, limit).with_context(|| format!("parsing {}", p.display()))?);
            continue;
        }
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            docs.push(tokenize(line, vocab, mode)?);
        }
    }
    Ok(docs)
}

fn tokenizer_for(vocab: &Vocabulary) -> TokenizerMode {
    match vocab.kind() {
        aded_core::corpus::VocabKind::Words => TokenizerMode::WhitespaceWord,
        aded_core::corpus::VocabKind::Bytes => TokenizerMode::ByteLevel,
        aded_core::corpus::VocabKind::Opaque => TokenizerMode::ExternalPretokenized,
    }
}

fn print_stats(stats: &CorpusStats, matrix: &TrigramMatrix) {
    println!("documents          {}", stats.documents);
    println!("tokens             {}", stats.tokens);
    println!("distinct trigrams  {}", stats.distinct_trigrams);
    println!("distinct contexts  {}", stats.distinct_contexts);
    println!("kept contexts      {}", matrix.len());
    println!("kept entries       {}", matrix.entry_count());
}

fn cmd_build(args: BuildArgs) -> Result<()> {
    let mut vocab = match args.tokenizer {
        TokenizerMode::ByteLevel => Vocabulary::byte_level(),
        _ => Vocabulary::new(),
    };
    let docs = read_documents(&args.corpus, &mut vocab, args.tokenizer)?;
    if args.tokenizer == TokenizerMode::ExternalPretokenized {
        let size = docs.iter().flatten().map(|t| t.0 + 1).max().unwrap_or(0);
        vocab = Vocabulary::opaque(size);
    }
    vocab.freeze();
    let counts = TrigramCounts::from_documents(&docs);
    let matrix = TrigramMatrix::finalize(&counts, args.threshold)?.with_vocab_size(vocab.len() as u32);
    print_stats(&counts.stats(), &matrix);
    if matrix.is_empty() {
        log::warn!("matrix is empty: no tri-gram reaches the threshold of {}", args.threshold);
    }
    matrix.save_path(&args.output).with_context(|| format!("writing {}", args.output.display()))?;
    let vpath = vocab_path(&args.output);
    fs::write(&vpath, serde_json::to_string(&vocab)?).with_context(|| format!("writing {}", vpath.display()))?;
    println!("wrote {} and {}", args.output.display(), vpath.display());
    Ok(())
}

fn cmd_decode(args: DecodeArgs) -> Result<()> {
    let matrix = TrigramMatrix::load_path(&args.matrix).with_context(|| format!("loading {}", args.matrix.display()))?;
    let vocab = load_vocab(&args.matrix)?;
    let mode = tokenizer_for(&vocab);
    let mut frozen = vocab.clone();
    let prompt = tokenize(&args.prompt, &mut frozen, mode)?;
    if prompt.is_empty() {
        bail!("prompt is empty after tokenization");
    }

    let target_docs = match &args.target {
        TargetSpec::Oracle { .. } => {
            if args.target_corpus.is_empty() {
                bail!("an oracle target needs --target-corpus");
            }
            read_documents(&args.target_corpus, &mut frozen, mode)?
        }
        _ => Vec::new(),
    };
    let verify = if args.temperature > 0.0 {
        VerifyMode::Sampled { temperature: args.temperature, top_p: args.top_p }
    } else {
        VerifyMode::Greedy
    };
    let opts = TargetOptions {
        vocab_size: Some(vocab.len() as u32),
        temperature: if args.temperature > 0.0 { args.temperature } else { 1.0 },
        top_p: args.top_p,
        ..TargetOptions::default()
    };
    let target = args.target.instantiate(&target_docs, &opts)?;

    let mut stop_tokens = HashSet::new();
    for s in &args.stop {
        let ids = tokenize(s, &mut frozen, mode)?;
        stop_tokens.extend(ids);
    }
    let cfg = SessionConfig {
        search: SearchConfig {
            iterations: args.search.iterations,
            c1: args.search.c1,
            c2: args.search.c2,
            depth: args.search.depth,
            candidates: args.search.candidates,
            score_mode: args.search.score,
            seed: args.seed,
        },
        adjust: AdjustPolicy { increment: args.increment, max_prob: args.max_prob, window: args.window },
        adaptive: args.adaptive,
        strategy: args.strategy,
        max_new_tokens: args.max_new_tokens,
        stop_tokens,
        verify,
        seed: args.seed,
    };

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut first = true;
    let mut write_err = None;
    let result = decode_with(&prompt, &matrix, target.as_ref(), &cfg, |step| {
        let mut text = detokenize(step, &vocab);
        if !first && mode != TokenizerMode::ByteLevel {
            text.insert(0, ' ');
        }
        first = false;
        if let Err(e) = out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    writeln!(out)?;

    let baseline = if args.wall_clock && cfg.strategy != Strategy::Autoregressive {
        let ar = SessionConfig { strategy: Strategy::Autoregressive, adaptive: false, ..cfg.clone() };
        Some(decode(&prompt, &matrix, target.as_ref(), &ar)?.metrics)
    } else {
        None
    };
    let summary = collect_metrics(&result.metrics, baseline.as_ref(), args.wall_clock);
    let report = serde_json::json!({ "strategy": cfg.strategy, "metrics": summary });
    writeln!(out, "{report}")?;

    if let (Some(path), Some(adapted)) = (&args.save_adapted, &result.adapted) {
        adapted.save_path(path).with_context(|| format!("writing {}", path.display()))?;
        fs::copy(vocab_path(&args.matrix), vocab_path(path))?;
        log::info!("adapted matrix written to {}", path.display());
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut scenario = Scenario::load(&args.scenario)?;
    if let Some(w) = args.workers {
        scenario.workers = w;
    }
    scenario.wall_clock |= args.wall_clock;
    let report = bench::run(&scenario)?;
    let json = report.to_json();
    if args.json_stdout {
        println!("{json}");
    } else {
        print!("{}", report.to_table());
    }
    if let Some(path) = &args.json {
        fs::write(path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let matrix = TrigramMatrix::load_path(&args.matrix).with_context(|| format!("loading {}", args.matrix.display()))?;
    let vocab = load_vocab(&args.matrix).ok();
    let show = |t: TokenId| match &vocab {
        Some(v) => v.surface(t).map(str::to_owned).unwrap_or_else(|| format!("<{t}>")),
        None => t.to_string(),
    };
    println!("vocabulary size    {}", matrix.vocab_size());
    println!("contexts           {}", matrix.len());
    println!("entries            {}", matrix.entry_count());
    println!("retention          {}", matrix.retention());

    match &args.context {
        Some(ctx) => {
            let Some(v) = &vocab else { bail!("--context needs the vocabulary sidecar") };
            let mut frozen = v.clone();
            let ids = tokenize(ctx, &mut frozen, tokenizer_for(v))?;
            if ids.len() != 2 {
                bail!("context must be exactly two tokens, got {}", ids.len());
            }
            let ctx = (ids[0], ids[1]);
            match matrix.lookup(ctx) {
                Some(l) => {
                    println!("level              {:?}", l.level);
                    for (t, p) in l.table.distribution().entries().iter().take(args.top) {
                        println!("  {:<20} {p:.6}", show(*t));
                    }
                }
                None => println!("no continuation at any level"),
            }
        }
        None => {
            let mut busiest: Vec<_> = matrix.contexts().collect();
            busiest.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));
            for (ctx, table) in busiest.into_iter().take(args.top) {
                let (t, p) = table.probabilities().max_by(|a, b| a.1.total_cmp(&b.1)).expect("tables are non-empty");
                println!(
                    "  {} {} -> {} entries, top {} ({p:.4})",
                    show(ctx.0),
                    show(ctx.1),
                    table.len(),
                    show(t)
                );
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADED_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Build(a) => cmd_build(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
