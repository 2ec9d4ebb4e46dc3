//! Inference throughput per pass mode, training epoch timing and an
//! analytic FLOP tally checked against the counting kernels.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use crate::config::{HeadType, ModelConfig, PassMode, Variant};
use crate::corpus::{enumerate_pairs, AnnotatedParagraph, PairMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::flops;
use crate::train::{train, TrainSpec};
use crate::variants::predict;

/// A repetition shorter than this is enlarged by repeating the corpus.
pub const MIN_REP_SECONDS: f64 = 0.05;
pub const WARMUP_PASSES: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BenchMode {
    OnePass,
    PerPair,
    PosembFinal,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::OnePass, BenchMode::PerPair, BenchMode::PosembFinal];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::OnePass => "one-pass",
            BenchMode::PerPair => "per-pair",
            BenchMode::PosembFinal => "posemb-final",
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        BenchMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown bench mode `{s}` (expected one-pass, per-pair or posemb-final)"))
    }
}

/// The model a bench mode runs. Checkpoint weights are reused when the
/// checkpoint's variant can run the mode; otherwise a freshly initialized
/// model of the same shape stands in (throughput does not depend on the
/// weight values). The second value tells which happened.
pub fn model_for_mode(base: &Model, mode: BenchMode) -> Result<(Model, bool)> {
    let (variant, pass) = match mode {
        BenchMode::OnePass => (None, PassMode::OnePass),
        BenchMode::PerPair => (None, PassMode::PerPair),
        BenchMode::PosembFinal => (Some(Variant::PosembFinal), PassMode::PerPair),
    };
    let reuse = match variant {
        Some(v) => base.config.variant == v,
        None => base.config.variant.supports(pass),
    };
    if reuse {
        let mut m = base.clone();
        m.config.mode = pass;
        return Ok((m, true));
    }
    let cfg = ModelConfig {
        variant: variant.unwrap_or(Variant::EntityAware),
        mode: pass,
        ..base.config.clone()
    };
    Ok((Model::new(cfg, base.vocab.clone(), base.labels.clone())?, false))
}

/// Multiply-add count (2 per multiply-accumulate) of one inference over a
/// paragraph of `n` tokens and `pairs` scored pairs.
pub fn analytic_flops(cfg: &ModelConfig, labels: usize, n: usize, pairs: usize, with_bias: bool) -> u64 {
    let (n, d, ff, l) = (n as u64, cfg.d_model as u64, cfg.ff as u64, labels as u64);
    let t = 2 * cfg.k as u64 + 1;
    let layer = |bias: bool| 8 * n * d * d + 4 * n * n * d + 4 * n * d * ff + if bias { 4 * n * t * d } else { 0 };
    let head = match cfg.head {
        HeadType::Linear => 4 * d * l,
        HeadType::Mlp => 4 * d * d + 2 * d * l,
        HeadType::Biaffine => 4 * d * l + 2 * l * d * d,
    };
    let layers = cfg.layers as u64;
    let pairs = pairs as u64;
    let bias = with_bias && cfg.variant == Variant::EntityAware;
    match (cfg.variant, cfg.mode) {
        (Variant::PosembFinal, _) => (layers - 1) * layer(false) + pairs * (layer(false) + head),
        (_, PassMode::OnePass) => layers * layer(bias) + pairs * head,
        (_, PassMode::PerPair) => pairs * (layers * layer(bias) + head),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub checkpoint_weights: bool,
    pub repetitions: usize,
    /// Corpus passes per timed repetition.
    pub passes: usize,
    pub relations_per_pass: usize,
    pub median_relations_per_second: f64,
    pub median_seconds_per_pass: f64,
    pub counted_flops_per_pass: u64,
    pub analytic_flops_per_pass: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hardware {
    pub cpu: String,
    pub logical_cpus: usize,
    pub os: &'static str,
    pub arch: &'static str,
}

impl Hardware {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Hardware {
            cpu,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub hardware: Hardware,
    pub threads: usize,
    /// Seconds for one training epoch per pass mode, when measured.
    pub train_epoch_seconds: Vec<(PassMode, f64)>,
}

impl BenchReport {
    pub fn row(&self, mode: BenchMode) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "hardware: cpu=\"{}\" logical_cpus={} os={} arch={} threads={}",
            self.hardware.cpu, self.hardware.logical_cpus, self.hardware.os, self.hardware.arch, self.threads
        )
        .unwrap();
        writeln!(
            out,
            "{:<13} {:>12} {:>12} {:>6} {:>7} {:>14} {:>14} {:>10}",
            "mode", "rel/s", "s/pass", "reps", "passes", "flops/pass", "analytic", "weights"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{:<13} {:>12.1} {:>12.6} {:>6} {:>7} {:>14} {:>14} {:>10}",
                r.mode.as_str(),
                r.median_relations_per_second,
                r.median_seconds_per_pass,
                r.repetitions,
                r.passes,
                r.counted_flops_per_pass,
                r.analytic_flops_per_pass,
                if r.checkpoint_weights { "checkpoint" } else { "fresh" }
            )
            .unwrap();
        }
        for (mode, s) in &self.train_epoch_seconds {
            writeln!(out, "train epoch {mode}: {s:.3}s").unwrap();
        }
        out
    }

    /// `bench,<mode>,<metric>,<value>` lines.
    pub fn render_lines(&self) -> String {
        let mut out = String::new();
        writeln!(out, "hardware,cpu,{}", self.hardware.cpu).unwrap();
        writeln!(out, "hardware,logical_cpus,{}", self.hardware.logical_cpus).unwrap();
        writeln!(out, "hardware,threads,{}", self.threads).unwrap();
        for r in &self.rows {
            let m = r.mode.as_str();
            writeln!(out, "bench,{m},relations_per_second,{}", r.median_relations_per_second).unwrap();
            writeln!(out, "bench,{m},seconds_per_pass,{}", r.median_seconds_per_pass).unwrap();
            writeln!(out, "bench,{m},flops_per_pass,{}", r.counted_flops_per_pass).unwrap();
        }
        for (mode, s) in &self.train_epoch_seconds {
            writeln!(out, "train_epoch,{mode},seconds,{s}").unwrap();
        }
        out
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn inference_pass(model: &Model, corpus: &[AnnotatedParagraph], pairs: &[Vec<(usize, usize)>]) -> Result<usize> {
    let mut n = 0;
    for (p, ps) in corpus.iter().zip(pairs) {
        n += predict(model, p, ps)?.len();
    }
    Ok(n)
}

/// Median relations/second over `repetitions` timed runs per mode, on the
/// gold pairs of `corpus`, single-threaded.
pub fn bench_throughput(
    corpus: &[AnnotatedParagraph],
    model: &Model,
    modes: &[BenchMode],
    repetitions: usize,
) -> Result<BenchReport> {
    if corpus.is_empty() || repetitions == 0 {
        return Err(Error::invalid("benchmark needs a nonempty corpus and at least one repetition"));
    }
    let pairs: Vec<Vec<(usize, usize)>> = corpus.iter().map(|p| enumerate_pairs(p, PairMode::GoldOnly)).collect();
    let mut rows = Vec::new();
    for &mode in modes {
        let (m, reused) = model_for_mode(model, mode)?;
        for _ in 0..WARMUP_PASSES {
            inference_pass(&m, corpus, &pairs)?;
        }
        let (relations, counted) = flops::measure(|| inference_pass(&m, corpus, &pairs));
        let relations = relations?;
        let analytic: u64 = corpus
            .iter()
            .zip(&pairs)
            .map(|(p, ps)| analytic_flops(&m.config, m.labels.len(), p.len(), ps.len(), !p.mentions.is_empty()))
            .sum();

        let probe = Instant::now();
        inference_pass(&m, corpus, &pairs)?;
        let once = probe.elapsed().as_secs_f64();
        let passes = if once >= MIN_REP_SECONDS {
            1
        } else {
            (MIN_REP_SECONDS / once.max(1e-9)).ceil() as usize
        };

        let mut rates = Vec::with_capacity(repetitions);
        let mut per_pass = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            for _ in 0..passes {
                inference_pass(&m, corpus, &pairs)?;
            }
            let s = start.elapsed().as_secs_f64();
            rates.push((relations * passes) as f64 / s);
            per_pass.push(s / passes as f64);
        }
        rows.push(BenchRow {
            mode,
            checkpoint_weights: reused,
            repetitions,
            passes,
            relations_per_pass: relations,
            median_relations_per_second: median(&mut rates),
            median_seconds_per_pass: median(&mut per_pass),
            counted_flops_per_pass: counted,
            analytic_flops_per_pass: analytic,
        });
    }
    Ok(BenchReport {
        rows,
        hardware: Hardware::detect(),
        threads: 1,
        train_epoch_seconds: Vec::new(),
    })
}

/// Wall time of one single-threaded training epoch in each pass mode.
pub fn train_epoch_seconds(corpus: &[AnnotatedParagraph], model: &Model, modes: &[PassMode]) -> Result<Vec<(PassMode, f64)>> {
    let spec = TrainSpec {
        epochs: 1,
        threads: 1,
        ..Default::default()
    };
    modes
        .iter()
        .map(|&mode| {
            let (m, _) = model_for_mode(
                model,
                if mode == PassMode::OnePass { BenchMode::OnePass } else { BenchMode::PerPair },
            )?;
            let start = Instant::now();
            train(m, corpus, &spec)?;
            Ok((mode, start.elapsed().as_secs_f64()))
        })
        .collect()
}
