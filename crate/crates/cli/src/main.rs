//! `mre`: data generation, training, evaluation, benchmarking and inspection.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.

mod manifest;
mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};

use mre_core::attention::{BiasSelection, EntityMask};
use mre_core::bench::{bench_throughput, train_epoch_seconds, BenchMode};
use mre_core::checkpoint;
use mre_core::corpus::{gen_synthetic, read_records, window_truncate, write_records, AnnotatedParagraph, Span, SyntheticSpec};
use mre_core::eval::{evaluate, render_predictions};
use mre_core::gradcheck::{grad_check_model, toy_corpus};
use mre_core::train::train;
use mre_core::{HeadType, Model, PassMode, Variant};

use manifest::Manifest;
use settings::Settings;

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn variant_parser() -> impl TypedValueParser<Value = Variant> {
    PossibleValuesParser::new(Variant::ALL.iter().map(|v| v.as_str())).map(|s| s.parse::<Variant>().unwrap())
}

fn mode_parser() -> impl TypedValueParser<Value = PassMode> {
    PossibleValuesParser::new(PassMode::ALL.iter().map(|v| v.as_str())).map(|s| s.parse::<PassMode>().unwrap())
}

fn head_parser() -> impl TypedValueParser<Value = HeadType> {
    PossibleValuesParser::new(HeadType::ALL.iter().map(|v| v.as_str())).map(|s| s.parse::<HeadType>().unwrap())
}

#[derive(Parser)]
#[command(name = "mre", version, about = "One-pass multiple-relation extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic annotated corpus.
    GenData(GenDataArgs),
    /// Keep only tokens near each relation's mentions.
    Truncate(TruncateArgs),
    /// Train a model and write checkpoint, manifest and loss curve.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Measure inference throughput per pass mode.
    Bench(BenchArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
    /// Print the relative-bias table selection grid.
    InspectAttention(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 800)]
    paragraphs: usize,
    #[arg(long, default_value_t = 4)]
    mentions: usize,
    /// Number of non-NA relation labels.
    #[arg(long, default_value_t = 4)]
    labels: usize,
    /// Defaults to $MRE_SEED, then 7.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 10)]
    min_words: usize,
    #[arg(long, default_value_t = 18)]
    max_words: usize,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
    /// Pad every paragraph to exactly this many subwords.
    #[arg(long)]
    pad_to: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "bc,cts,wl")]
    domains: Vec<String>,
}

#[derive(Args)]
struct TruncateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Tokens kept on each side of a relation's mentions.
    #[arg(long, default_value_t = 5)]
    radius: usize,
}

/// Model and training settings shared by several commands.
#[derive(Args, Default)]
pub struct ModelArgs {
    /// key=value file; flags override it. A train manifest works too.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = variant_parser())]
    pub variant: Option<Variant>,
    #[arg(long, value_parser = mode_parser())]
    pub mode: Option<PassMode>,
    #[arg(long, value_parser = head_parser())]
    pub head: Option<HeadType>,
    /// Model and shuffling seed. Falls back to the config file, then $MRE_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for metrics, predictions and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Pass mode; defaults to the checkpoint's.
    #[arg(long, value_parser = mode_parser())]
    mode: Option<PassMode>,
    /// Expected configuration (config file or train manifest). Evaluation is
    /// refused if it disagrees with the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Without a checkpoint a fresh model is built from the settings below.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "one-pass,per-pair,posemb-final")]
    modes: Vec<BenchMode>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Also time one training epoch in each pass mode.
    #[arg(long)]
    train_epoch: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct GradCheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Perturb the analytic gradient of this tensor (harness self-test).
    #[arg(long)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct InspectArgs {
    /// Take paragraph `--index` of this corpus.
    #[arg(long, conflicts_with_all = ["length", "mentions"])]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Restrict the mask to mentions HEAD,TAIL.
    #[arg(long, value_parser = parse_pair)]
    pair: Option<(usize, usize)>,
    /// Fixture length in tokens.
    #[arg(long)]
    length: Option<usize>,
    /// Fixture mention as START:END (end exclusive); repeatable.
    #[arg(long = "mention", value_parser = parse_span)]
    mentions: Vec<Span>,
    /// Take k, layers and heads from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected HEAD,TAIL")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad mention index `{v}`"));
    Ok((parse(a)?, parse(b)?))
}

fn parse_span(s: &str) -> Result<Span, String> {
    let (a, b) = s.split_once(':').ok_or("expected START:END")?;
    let a: usize = a.parse().map_err(|_| format!("bad start `{a}`"))?;
    let b: usize = b.parse().map_err(|_| format!("bad end `{b}`"))?;
    if a >= b {
        return Err(format!("empty span {a}:{b}"));
    }
    Ok(Span::new(a, b))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Truncate(a) => truncate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::InspectAttention(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var("MRE_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("MRE_SEED is not an unsigned integer: `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn load_corpus(path: &Path) -> CliResult<(Vec<AnnotatedParagraph>, String)> {
    require_file(path, "corpus")?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let records = read_records(path)?;
    Ok((records, checkpoint::sha256_hex(&bytes)))
}

fn load_checkpoint(path: &Path) -> CliResult<(Model, String)> {
    require_file(path, "checkpoint")?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let model = checkpoint::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
    Ok((model, checkpoint::sha256_hex(&bytes)))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        paragraphs: a.paragraphs,
        mentions: a.mentions,
        labels: a.labels,
        seed: a.seed.or(env_seed()?).unwrap_or(SyntheticSpec::default().seed),
        min_words: a.min_words,
        max_words: a.max_words,
        max_tokens: a.max_tokens,
        pad_to: a.pad_to,
        domains: a.domains,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let records = gen_synthetic(&spec)?;
    write_records(&records, &a.out)?;
    println!("wrote {} paragraphs to {}", records.len(), a.out.display());
    Ok(())
}

fn truncate(a: TruncateArgs) -> CliResult<()> {
    let (records, _) = load_corpus(&a.corpus)?;
    let mut out = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for p in &records {
        if p.relations.is_empty() {
            skipped += 1;
            continue;
        }
        out.push(window_truncate(p, a.radius)?);
    }
    write_records(&out, &a.out)?;
    let before: usize = records.iter().map(|p| p.len()).sum();
    let after: usize = out.iter().map(|p| p.len()).sum();
    println!(
        "kept {} of {} paragraphs ({skipped} without relations dropped), {after} of {before} tokens",
        out.len(),
        records.len()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let (corpus, corpus_hash) = load_corpus(&a.corpus)?;
    if corpus.is_empty() {
        return Err(usage(format!("corpus `{}` has no paragraphs", a.corpus.display())));
    }
    let s = Settings::resolve(&a.model)?;
    let mut manifest = Manifest::start("train", s.train.threads);
    manifest.meta("corpus", a.corpus.display());
    manifest.meta("corpus_sha256", &corpus_hash);

    let model = Model::for_corpus(s.model.clone(), &corpus)?;
    let start = Instant::now();
    let outcome = train(model, &corpus, &s.train)?;
    let seconds = start.elapsed().as_secs_f64();

    out_dir(&a.out)?;
    let ckpt = checkpoint::to_bytes(&outcome.model);
    let ckpt_path = a.out.join("model.ckpt");
    fs::write(&ckpt_path, &ckpt).with_context(|| format!("writing {}", ckpt_path.display()))?;
    write(&a.out.join("loss.csv"), &outcome.render_curve())?;

    manifest.meta("checkpoint_sha256", checkpoint::sha256_hex(&ckpt));
    manifest.meta("config_sha256", checkpoint::config_hash(&outcome.model));
    manifest.meta("train_seconds", format!("{seconds:.3}"));
    manifest.body(&outcome.model.config.render());
    manifest.body(&s.train.render());
    manifest.write(&a.out.join("manifest.txt"))?;

    let last = outcome.curve.last().map_or(f64::NAN, |s| s.loss);
    println!(
        "trained {} ({} mode, {} head) for {} epochs in {seconds:.1}s, final step loss {last:.5}",
        outcome.model.config.variant, outcome.model.config.mode, outcome.model.config.head, s.train.epochs
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let (corpus, corpus_hash) = load_corpus(&a.corpus)?;
    let (model, ckpt_hash) = load_checkpoint(&a.checkpoint)?;
    if let Some(path) = &a.config {
        settings::check_against(&model, path)?;
    }
    let mode = a.mode.unwrap_or(model.config.mode);
    if !model.config.variant.supports(mode) {
        return Err(usage(format!("variant {} cannot run in {mode} mode", model.config.variant)));
    }
    let mut manifest = Manifest::start("eval", 1);
    manifest.meta("corpus", a.corpus.display());
    manifest.meta("corpus_sha256", &corpus_hash);
    manifest.meta("checkpoint", a.checkpoint.display());
    manifest.meta("checkpoint_sha256", &ckpt_hash);
    manifest.meta("config_sha256", checkpoint::config_hash(&model));

    let (report, records) = evaluate(&model, &corpus, mode)?;
    out_dir(&a.out)?;
    write(&a.out.join("metrics.csv"), &report.render_metrics())?;
    write(&a.out.join("predictions.tsv"), &render_predictions(&records, &model.labels))?;
    manifest.meta("eval_mode", mode);
    manifest.meta("relations_per_second", format!("{:.1}", report.relations_per_second));
    manifest.body(&model.config.render());
    manifest.write(&a.out.join("manifest.txt"))?;
    print!("{}", report.render_table());
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> CliResult<()> {
    let (corpus, corpus_hash) = load_corpus(&a.corpus)?;
    if corpus.is_empty() || a.reps == 0 {
        return Err(usage("bench needs a nonempty corpus and --reps >= 1"));
    }
    let mut manifest = Manifest::start("bench", 1);
    manifest.meta("corpus", a.corpus.display());
    manifest.meta("corpus_sha256", &corpus_hash);
    let model = match &a.checkpoint {
        Some(path) => {
            let (m, hash) = load_checkpoint(path)?;
            manifest.meta("checkpoint", path.display());
            manifest.meta("checkpoint_sha256", hash);
            m
        }
        None => {
            let s = Settings::resolve(&a.model)?;
            Model::for_corpus(s.model, &corpus)?
        }
    };
    let mut report = bench_throughput(&corpus, &model, &a.modes, a.reps)?;
    if a.train_epoch {
        report.train_epoch_seconds = train_epoch_seconds(&corpus, &model, PassMode::ALL)?;
    }
    out_dir(&a.out)?;
    write(&a.out.join("bench.csv"), &report.render_lines())?;
    manifest.meta("modes", a.modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","));
    manifest.meta("reps", a.reps);
    manifest.body(&model.config.render());
    manifest.write(&a.out.join("manifest.txt"))?;
    print!("{}", report.render());
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs) -> CliResult<()> {
    let s = Settings::resolve(&a.model)?;
    let corpus = toy_corpus(s.model.seed)?;
    let cfg = mre_core::ModelConfig {
        max_len: s.model.max_len.min(16),
        ..s.model
    };
    let model = Model::for_corpus(cfg, &corpus)?;
    if let Some(name) = &a.corrupt {
        if !model.params.tensors().iter().any(|(n, _)| n == name) {
            return Err(usage(format!("no tensor named `{name}`")));
        }
    }
    let report = grad_check_model(&model, &corpus, |name, g| {
        if a.corrupt.as_deref() == Some(name) {
            g.data_mut()[0] += 1e-2;
        }
    })?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|t| t.name.as_str()).collect();
        Err(anyhow!("gradient check failed for {}", names.join(", ")).into())
    }
}

fn inspect(a: InspectArgs) -> CliResult<()> {
    let mut cfg = mre_core::ModelConfig::default();
    let mut entity_aware = true;
    if let Some(path) = &a.checkpoint {
        let (m, _) = load_checkpoint(path)?;
        entity_aware = m.config.variant.uses_entity_attention();
        cfg = m.config;
    }
    let k = a.k.unwrap_or(cfg.k);
    let layers = a.layers.unwrap_or(cfg.layers);
    let heads = a.heads.unwrap_or(cfg.heads);
    if k == 0 {
        return Err(usage("--k must be at least 1"));
    }

    let mask = if let Some(path) = &a.corpus {
        let (records, _) = load_corpus(path)?;
        let p = records
            .get(a.index)
            .ok_or_else(|| usage(format!("corpus has {} paragraphs, no index {}", records.len(), a.index)))?;
        match a.pair {
            Some((h, t)) => {
                if h.max(t) >= p.mentions.len() {
                    return Err(usage(format!("paragraph has {} mentions", p.mentions.len())));
                }
                EntityMask::restricted(p, &[h, t])
            }
            None => EntityMask::from_paragraph(p),
        }
    } else {
        let n = a
            .length
            .ok_or_else(|| usage("give either --corpus or a fixture via --length and --mention"))?;
        if let Some(s) = a.mentions.iter().find(|s| s.end > n) {
            return Err(usage(format!("mention {}:{} exceeds length {n}", s.start, s.end)));
        }
        EntityMask::from_spans(n, a.mentions.iter().copied().enumerate())
    };
    let mask = if entity_aware { mask } else { EntityMask::empty(mask.len()) };
    print!("{}", BiasSelection::new(&mask, k).render(layers, heads));
    Ok(())
}
