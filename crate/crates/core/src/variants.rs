//! Model variants and pass modes.
//!
//! | variant           | encoder conditioning                          | pair input       |
//! |-------------------|-----------------------------------------------|------------------|
//! | `entity-aware`    | relative bias on all mentions (one-pass) or on the two targets (per-pair) | `[o_i : o_j]` |
//! | `plain-sp`        | none                                          | `[o_i : o_j]`    |
//! | `indicator-input` | in-mention row (one-pass) or subject/object rows (per-pair) added to the input | `[o_i : o_j]` |
//! | `posemb-final`    | subject/object offset embeddings added before the last layer, per pair | `[o_i : o_j]` |
//! | `sentence-vector` | none                                          | `[v : v]`, `v` = mean state |
//!
//! One-pass mode encodes a paragraph once and scores every pair from the
//! shared states; per-pair mode re-encodes for each pair.

use crate::attention::EntityMask;
use crate::config::{PassMode, Variant};
use crate::corpus::{AnnotatedParagraph, Span};
use crate::encoder::{
    embed_backward, embed_forward, layer_backward, layer_forward, layers_backward, layers_forward,
    pool_backward, pool_rows, selection_for, Conditioning, EmbedCache, LayerCache,
};
use crate::error::{Error, Result};
use crate::head::{head_backward, head_forward, nll_and_grad, RelationPrediction};
use crate::model::Model;
use crate::params::{ModelParams, INDICATOR_IN_MENTION, INDICATOR_OBJECT, INDICATOR_SUBJECT};
use crate::tensor::DenseMatrix;
use crate::attention::BiasSelection;

/// Owned counterpart of [`Conditioning`].
#[derive(Clone, Debug, Default)]
pub struct PassConditioning {
    pub mask: Option<EntityMask>,
    pub indicator: Option<DenseMatrix>,
}

impl PassConditioning {
    pub fn as_ref(&self) -> Conditioning<'_> {
        Conditioning {
            mask: self.mask.as_ref(),
            indicator: self.indicator.as_ref(),
        }
    }
}

fn indicator_weights(n: usize, rows: &[(usize, Span)]) -> DenseMatrix {
    let mut w = DenseMatrix::zeros(n, 3);
    for &(row, span) in rows {
        for t in span.start..span.end {
            w.set(t, row, 1.0);
        }
    }
    w
}

/// Conditioning for encoding `p` once for all pairs.
pub fn one_pass_conditioning(model: &Model, p: &AnnotatedParagraph) -> PassConditioning {
    match model.config.variant {
        Variant::EntityAware => PassConditioning {
            mask: Some(EntityMask::from_paragraph(p)),
            indicator: None,
        },
        Variant::IndicatorInput => {
            let rows: Vec<_> = p.mentions.iter().map(|&s| (INDICATOR_IN_MENTION, s)).collect();
            PassConditioning {
                mask: None,
                indicator: Some(indicator_weights(p.len(), &rows)),
            }
        }
        _ => PassConditioning::default(),
    }
}

/// Conditioning for encoding `p` for the single target `pair`.
pub fn pair_conditioning(model: &Model, p: &AnnotatedParagraph, pair: (usize, usize)) -> PassConditioning {
    let (i, j) = pair;
    match model.config.variant {
        Variant::EntityAware => PassConditioning {
            mask: Some(EntityMask::restricted(p, &[i, j])),
            indicator: None,
        },
        Variant::IndicatorInput => PassConditioning {
            mask: None,
            indicator: Some(indicator_weights(
                p.len(),
                &[(INDICATOR_SUBJECT, p.mentions[i]), (INDICATOR_OBJECT, p.mentions[j])],
            )),
        },
        _ => PassConditioning::default(),
    }
}

/// Offset of token `t` from `span`: negative before it, positive after it,
/// zero inside, clipped to `[−k, k]`.
pub fn relative_offset(t: usize, span: Span, k: usize) -> i64 {
    let raw = if t < span.start {
        t as i64 - span.start as i64
    } else if t >= span.end {
        t as i64 - (span.end as i64 - 1)
    } else {
        0
    };
    raw.clamp(-(k as i64), k as i64)
}

/// The `N x d` term the posemb-final variant adds before its last layer.
pub fn posemb_injection(model: &Model, p: &AnnotatedParagraph, pair: (usize, usize)) -> Result<DenseMatrix> {
    let (subj, obj) = match (&model.params.posemb_subject, &model.params.posemb_object) {
        (Some(s), Some(o)) => (s, o),
        _ => return Err(Error::invalid("model has no relative position embeddings")),
    };
    let k = model.config.k;
    let mut out = DenseMatrix::zeros(p.len(), model.config.d_model);
    for t in 0..p.len() {
        let rs = (relative_offset(t, p.mentions[pair.0], k) + k as i64) as usize;
        let ro = (relative_offset(t, p.mentions[pair.1], k) + k as i64) as usize;
        for (c, slot) in out.row_mut(t).iter_mut().enumerate() {
            *slot = subj.get(rs, c) + obj.get(ro, c);
        }
    }
    Ok(out)
}

fn posemb_backward(model: &Model, p: &AnnotatedParagraph, pair: (usize, usize), d: &DenseMatrix, grads: &mut ModelParams) {
    let k = model.config.k;
    let (Some(gs), Some(go)) = (grads.posemb_subject.as_mut(), grads.posemb_object.as_mut()) else {
        return;
    };
    for t in 0..p.len() {
        let rs = (relative_offset(t, p.mentions[pair.0], k) + k as i64) as usize;
        let ro = (relative_offset(t, p.mentions[pair.1], k) + k as i64) as usize;
        for (slot, v) in gs.row_mut(rs).iter_mut().zip(d.row(t)) {
            *slot += v;
        }
        for (slot, v) in go.row_mut(ro).iter_mut().zip(d.row(t)) {
            *slot += v;
        }
    }
}

fn pair_input(model: &Model, hidden: &DenseMatrix, p: &AnnotatedParagraph, pair: (usize, usize)) -> Result<Vec<f64>> {
    if model.config.variant == Variant::SentenceVector {
        let v = pool_rows(hidden, Span::new(0, hidden.rows()))?;
        Ok([v.as_slice(), v.as_slice()].concat())
    } else {
        let a = pool_rows(hidden, p.mentions[pair.0])?;
        let b = pool_rows(hidden, p.mentions[pair.1])?;
        Ok([a, b].concat())
    }
}

fn pair_input_backward(model: &Model, p: &AnnotatedParagraph, pair: (usize, usize), dx: &[f64], d_hidden: &mut DenseMatrix) {
    let (da, db) = dx.split_at(dx.len() / 2);
    if model.config.variant == Variant::SentenceVector {
        let dv: Vec<f64> = da.iter().zip(db).map(|(a, b)| a + b).collect();
        pool_backward(Span::new(0, d_hidden.rows()), &dv, d_hidden);
    } else {
        pool_backward(p.mentions[pair.0], da, d_hidden);
        pool_backward(p.mentions[pair.1], db, d_hidden);
    }
}

/// Training targets and the gradient buffer for a forward/backward run.
struct Trainer<'a> {
    gold: &'a [usize],
    grads: &'a mut ModelParams,
}

struct FullPass {
    hidden: DenseMatrix,
    embed: EmbedCache,
    layers: Vec<LayerCache>,
    selection: Option<BiasSelection>,
}

fn full_forward(model: &Model, ids: &[usize], cond: Conditioning<'_>) -> Result<FullPass> {
    let eps = model.config.norm_eps;
    let selection = selection_for(model, cond.mask, ids.len())?;
    let (h, embed) = embed_forward(&model.params, eps, ids, cond.indicator)?;
    let (hidden, layers) = layers_forward(&model.params, 0..model.params.layers.len(), h, selection.as_ref(), eps)?;
    Ok(FullPass {
        hidden,
        embed,
        layers,
        selection,
    })
}

fn full_backward(model: &Model, pass: &FullPass, d_hidden: DenseMatrix, grads: &mut ModelParams) -> Result<()> {
    let d = layers_backward(&model.params, 0, &pass.layers, pass.selection.as_ref(), d_hidden, grads)?;
    embed_backward(&pass.embed, &model.params, &d, grads);
    Ok(())
}

/// Scores `pairs` from `hidden`, accumulating head gradients and the hidden
/// gradient when training. Returns the summed NLL.
fn score_pairs(
    model: &Model,
    p: &AnnotatedParagraph,
    hidden: &DenseMatrix,
    pairs: &[(usize, usize)],
    gold_offset: usize,
    train: &mut Option<Trainer<'_>>,
    d_hidden: &mut DenseMatrix,
    out: &mut Vec<RelationPrediction>,
) -> Result<f64> {
    let mut loss = 0.0;
    for (n, &pair) in pairs.iter().enumerate() {
        let x = pair_input(model, hidden, p, pair)?;
        let (logits, cache) = head_forward(&model.params.head, &x)?;
        if let Some(t) = train.as_mut() {
            let (nll, dz) = nll_and_grad(&logits, t.gold[gold_offset + n])?;
            loss += nll;
            let dx = head_backward(&model.params.head, &cache, &dz, &mut t.grads.head)?;
            pair_input_backward(model, p, pair, &dx, d_hidden);
        }
        out.push(RelationPrediction::from_logits(pair, logits));
    }
    Ok(loss)
}

fn check_pairs(p: &AnnotatedParagraph, pairs: &[(usize, usize)]) -> Result<()> {
    let m = p.mentions.len();
    for &(i, j) in pairs {
        if i >= m || j >= m {
            return Err(Error::invalid(format!("pair ({i}, {j}) outside {m} mentions")));
        }
    }
    Ok(())
}

fn run(
    model: &Model,
    p: &AnnotatedParagraph,
    pairs: &[(usize, usize)],
    mode: PassMode,
    mut train: Option<Trainer<'_>>,
) -> Result<(Vec<RelationPrediction>, f64)> {
    let variant = model.config.variant;
    if !variant.supports(mode) {
        return Err(Error::Config(format!("variant {variant} cannot run in {mode} mode")));
    }
    check_pairs(p, pairs)?;
    if let Some(t) = &train {
        if t.gold.len() != pairs.len() {
            return Err(Error::Length {
                op: "gold labels",
                expected: pairs.len(),
                got: t.gold.len(),
            });
        }
    }
    let ids = model.token_ids(p)?;
    let n = ids.len();
    let d = model.config.d_model;
    let mut preds = Vec::with_capacity(pairs.len());
    let mut loss = 0.0;

    if variant == Variant::PosembFinal {
        let eps = model.config.norm_eps;
        let last = model.params.layers.len() - 1;
        let (h, embed) = embed_forward(&model.params, eps, &ids, None)?;
        let (prefix, caches) = layers_forward(&model.params, 0..last, h, None, eps)?;
        let mut d_prefix = DenseMatrix::zeros(n, d);
        for (idx, &pair) in pairs.iter().enumerate() {
            let mut x = prefix.clone();
            x.add_assign(&posemb_injection(model, p, pair)?);
            let (hidden, cache) = layer_forward(&model.params, last, &x, None, eps)?;
            let mut d_hidden = DenseMatrix::zeros(n, d);
            loss += score_pairs(model, p, &hidden, &[pair], idx, &mut train, &mut d_hidden, &mut preds)?;
            if let Some(t) = train.as_mut() {
                let dx = layer_backward(&model.params, last, &cache, None, &d_hidden, t.grads)?;
                posemb_backward(model, p, pair, &dx, t.grads);
                d_prefix.add_assign(&dx);
            }
        }
        if let Some(t) = train.as_mut() {
            if !pairs.is_empty() {
                let dh = layers_backward(&model.params, 0, &caches, None, d_prefix, t.grads)?;
                embed_backward(&embed, &model.params, &dh, t.grads);
            }
        }
        return Ok((preds, loss));
    }

    match mode {
        PassMode::OnePass => {
            let cond = one_pass_conditioning(model, p);
            let pass = full_forward(model, &ids, cond.as_ref())?;
            let mut d_hidden = DenseMatrix::zeros(n, d);
            loss += score_pairs(model, p, &pass.hidden, pairs, 0, &mut train, &mut d_hidden, &mut preds)?;
            if let Some(t) = train.as_mut() {
                if !pairs.is_empty() {
                    full_backward(model, &pass, d_hidden, t.grads)?;
                }
            }
        }
        PassMode::PerPair => {
            for (idx, &pair) in pairs.iter().enumerate() {
                let cond = pair_conditioning(model, p, pair);
                let pass = full_forward(model, &ids, cond.as_ref())?;
                let mut d_hidden = DenseMatrix::zeros(n, d);
                loss += score_pairs(model, p, &pass.hidden, &[pair], idx, &mut train, &mut d_hidden, &mut preds)?;
                if let Some(t) = train.as_mut() {
                    full_backward(model, &pass, d_hidden, t.grads)?;
                }
            }
        }
    }
    Ok((preds, loss))
}

/// Predictions for `pairs` in the model's configured pass mode.
pub fn predict(model: &Model, p: &AnnotatedParagraph, pairs: &[(usize, usize)]) -> Result<Vec<RelationPrediction>> {
    predict_in_mode(model, p, pairs, model.config.mode)
}

pub fn predict_in_mode(
    model: &Model,
    p: &AnnotatedParagraph,
    pairs: &[(usize, usize)],
    mode: PassMode,
) -> Result<Vec<RelationPrediction>> {
    Ok(run(model, p, pairs, mode, None)?.0)
}

/// Summed NLL over `pairs` against `gold`, adding the gradient of that sum
/// into `grads`.
pub fn paragraph_loss_and_grad(
    model: &Model,
    p: &AnnotatedParagraph,
    pairs: &[(usize, usize)],
    gold: &[usize],
    grads: &mut ModelParams,
) -> Result<f64> {
    Ok(run(model, p, pairs, model.config.mode, Some(Trainer { gold, grads }))?.1)
}

/// Summed NLL over `pairs` against `gold`, forward only.
pub fn paragraph_loss(model: &Model, p: &AnnotatedParagraph, pairs: &[(usize, usize)], gold: &[usize]) -> Result<f64> {
    if gold.len() != pairs.len() {
        return Err(Error::Length {
            op: "gold labels",
            expected: pairs.len(),
            got: gold.len(),
        });
    }
    predict(model, p, pairs)?
        .iter()
        .zip(gold)
        .map(|(pred, &g)| Ok(nll_and_grad(&pred.logits, g)?.0))
        .sum()
}

fn expect_variant(model: &Model, v: Variant) -> Result<()> {
    if model.config.variant != v {
        return Err(Error::invalid(format!(
            "expected a {v} model, got {}",
            model.config.variant
        )));
    }
    Ok(())
}

pub fn run_entity_aware(
    model: &Model,
    p: &AnnotatedParagraph,
    pairs: &[(usize, usize)],
    mode: PassMode,
) -> Result<Vec<RelationPrediction>> {
    expect_variant(model, Variant::EntityAware)?;
    predict_in_mode(model, p, pairs, mode)
}

pub fn run_plain_sp(
    model: &Model,
    p: &AnnotatedParagraph,
    pairs: &[(usize, usize)],
    mode: PassMode,
) -> Result<Vec<RelationPrediction>> {
    expect_variant(model, Variant::PlainSp)?;
    predict_in_mode(model, p, pairs, mode)
}

pub fn run_indicator_input(
    model: &Model,
    p: &AnnotatedParagraph,
    pairs: &[(usize, usize)],
    mode: PassMode,
) -> Result<Vec<RelationPrediction>> {
    expect_variant(model, Variant::IndicatorInput)?;
    predict_in_mode(model, p, pairs, mode)
}

pub fn run_posemb_final(model: &Model, p: &AnnotatedParagraph, pairs: &[(usize, usize)]) -> Result<Vec<RelationPrediction>> {
    expect_variant(model, Variant::PosembFinal)?;
    predict_in_mode(model, p, pairs, PassMode::PerPair)
}

pub fn run_sentence_vector(model: &Model, p: &AnnotatedParagraph, pairs: &[(usize, usize)]) -> Result<Vec<RelationPrediction>> {
    expect_variant(model, Variant::SentenceVector)?;
    predict_in_mode(model, p, pairs, PassMode::OnePass)
}
