//! Analytic gradients against central differences, for every tensor.

use std::fmt::Write as _;
use std::time::Instant;

use crate::config::ModelConfig;
use crate::corpus::{enumerate_pairs, gen_synthetic, AnnotatedParagraph, PairMode, SyntheticSpec};
use crate::error::Result;
use crate::model::Model;
use crate::params::ModelParams;
use crate::tensor::{finite_diff_grad, DenseMatrix};
use crate::variants::{paragraph_loss, paragraph_loss_and_grad};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
/// Denominator floor so that two near-zero gradients compare as equal.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub values: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn failures(&self) -> Vec<&TensorCheck> {
        self.tensors
            .iter()
            .filter(|t| !(t.max_rel_error <= self.tolerance))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.tensors {
            let status = if t.max_rel_error <= self.tolerance { "ok" } else { "FAIL" };
            writeln!(out, "{:<24} {:>7} {:>12.3e} {status}", t.name, t.values, t.max_rel_error).unwrap();
        }
        writeln!(
            out,
            "{} tensors, {} failed, tolerance {:e}, {:.1}s",
            self.tensors.len(),
            self.failures().len(),
            self.tolerance,
            self.seconds
        )
        .unwrap();
        out
    }
}

/// Small paragraphs (at most 16 subwords) for gradient checks.
pub fn toy_corpus(seed: u64) -> Result<Vec<AnnotatedParagraph>> {
    gen_synthetic(&SyntheticSpec {
        paragraphs: 2,
        mentions: 3,
        labels: 4,
        seed,
        min_words: 5,
        max_words: 7,
        max_tokens: 16,
        pad_to: None,
        domains: vec!["bc".into()],
    })
}

/// Mean pair loss over `corpus`, and optionally its gradient.
pub fn corpus_loss(model: &Model, corpus: &[AnnotatedParagraph], grads: Option<&mut ModelParams>) -> Result<f64> {
    let mut grads = grads;
    let mut total = 0.0;
    let mut pairs = 0;
    for p in corpus {
        let ps = enumerate_pairs(p, PairMode::GoldOnly);
        let gold = model.gold_ids(p, &ps)?;
        total += match grads.as_deref_mut() {
            Some(g) => paragraph_loss_and_grad(model, p, &ps, &gold, g)?,
            None => paragraph_loss(model, p, &ps, &gold)?,
        };
        pairs += ps.len();
    }
    if let Some(g) = grads {
        g.scale(1.0 / pairs as f64);
    }
    Ok(total / pairs as f64)
}

/// Checks `model` on `corpus`. `tamper` may alter the analytic gradient of a
/// named tensor before comparison.
pub fn grad_check_model<F>(model: &Model, corpus: &[AnnotatedParagraph], mut tamper: F) -> Result<GradCheckReport>
where
    F: FnMut(&str, &mut DenseMatrix),
{
    let start = Instant::now();
    let mut grads = model.params.zeros_like();
    corpus_loss(model, corpus, Some(&mut grads))?;
    for (name, g) in grads.tensors_mut() {
        tamper(&name, g);
    }
    let analytic = grads.tensors();
    let mut out = Vec::new();
    for (idx, (name, t)) in model.params.tensors().into_iter().enumerate() {
        let mut probe = model.clone();
        let numeric = finite_diff_grad(
            |x| {
                probe.params.tensors_mut()[idx].1.data_mut().copy_from_slice(x);
                corpus_loss(&probe, corpus, None).unwrap_or(f64::NAN)
            },
            t.data(),
            GRAD_STEP,
        )?;
        let max_rel_error = analytic[idx]
            .1
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| relative_error(*a, *n))
            .fold(0.0, f64::max);
        out.push(TensorCheck {
            name,
            values: t.len(),
            max_rel_error,
        });
    }
    Ok(GradCheckReport {
        tensors: out,
        tolerance: GRAD_TOLERANCE,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Gradient check of a fresh model built from `cfg` (with `seed`) on the toy
/// corpus.
pub fn grad_check(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let corpus = toy_corpus(seed)?;
    let cfg = ModelConfig {
        seed,
        max_len: cfg.max_len.min(16),
        ..cfg.clone()
    };
    let model = Model::for_corpus(cfg, &corpus)?;
    grad_check_model(&model, &corpus, |_, _| {})
}
