//! Post-norm transformer encoder with entity-aware attention, plus mention
//! pooling.
//!
//! Each layer computes
//!
//! ```text
//! x1  = LN(h + MHA(h))
//! out = LN(x1 + gelu(x1 W1 + b1) W2 + b2)
//! ```
//!
//! The embedding is `LN(token + position [+ indicator rows])`.

use crate::attention::{
    mha_backward, mha_forward, vanilla_multi_head_attention, AttentionCache, BiasSelection,
    EdgeBias, EntityMask,
};
use crate::corpus::{AnnotatedParagraph, Span};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{LayerParams, ModelParams};
use crate::tensor::{
    gelu_grad_scalar, gelu_scalar, layer_norm, matmul, matmul_nt, matmul_tn, DenseMatrix, NormStats,
};

/// Final hidden states plus inspection artifacts.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `N x d_model` states from the last layer.
    pub hidden: DenseMatrix,
    /// States after the embedding and after every layer (`layers + 1` entries).
    pub trace: Vec<DenseMatrix>,
    /// Attention weights, `[layer][head]`, each `N x N`.
    pub attention: Vec<Vec<DenseMatrix>>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.rows() == 0
    }
}

/// What conditions an encoding beyond the tokens themselves.
#[derive(Clone, Copy, Debug, Default)]
pub struct Conditioning<'a> {
    /// Entity mask for the relative bias terms. Ignored by models without
    /// relative tables.
    pub mask: Option<&'a EntityMask>,
    /// `N x 3` weights on the indicator table rows.
    pub indicator: Option<&'a DenseMatrix>,
}

/// Mean of the hidden states inside `span`: the mention vector `o_i`.
pub fn pool_mention(out: &EncoderOutput, span: Span) -> Result<Vec<f64>> {
    pool_rows(&out.hidden, span)
}

pub(crate) fn pool_rows(hidden: &DenseMatrix, span: Span) -> Result<Vec<f64>> {
    if span.is_empty() {
        return Err(Error::invalid(format!("cannot pool empty span {}..{}", span.start, span.end)));
    }
    if span.end > hidden.rows() {
        return Err(Error::invalid(format!(
            "span {}..{} outside {} tokens",
            span.start,
            span.end,
            hidden.rows()
        )));
    }
    let mut acc = vec![0.0; hidden.cols()];
    for t in span.start..span.end {
        for (a, v) in acc.iter_mut().zip(hidden.row(t)) {
            *a += v;
        }
    }
    let n = span.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Spreads the gradient of a pooled mention vector back over its rows.
pub(crate) fn pool_backward(span: Span, d_pooled: &[f64], d_hidden: &mut DenseMatrix) {
    let n = span.len() as f64;
    for t in span.start..span.end {
        for (d, g) in d_hidden.row_mut(t).iter_mut().zip(d_pooled) {
            *d += g / n;
        }
    }
}

/// Token + position (+ indicator) embedding followed by layer norm.
pub fn embed_input(model: &Model, p: &AnnotatedParagraph) -> Result<DenseMatrix> {
    let ids = model.token_ids(p)?;
    Ok(embed_forward(&model.params, model.config.norm_eps, &ids, None)?.0)
}

/// Encodes `p` the way the model's variant does in one-pass mode.
pub fn encode(model: &Model, p: &AnnotatedParagraph) -> Result<EncoderOutput> {
    let cond = crate::variants::one_pass_conditioning(model, p);
    encode_with(model, p, cond.as_ref())
}

/// Encodes `p` under explicit conditioning.
pub fn encode_with(model: &Model, p: &AnnotatedParagraph, cond: Conditioning<'_>) -> Result<EncoderOutput> {
    let ids = model.token_ids(p)?;
    let selection = selection_for(model, cond.mask, ids.len())?;
    let (h, _) = embed_forward(&model.params, model.config.norm_eps, &ids, cond.indicator)?;
    let mut trace = vec![h.clone()];
    let mut attention = Vec::new();
    let mut h = h;
    for l in 0..model.params.layers.len() {
        let (out, cache) = layer_forward(&model.params, l, &h, selection.as_ref(), model.config.norm_eps)?;
        attention.push(cache.attn.probs.clone());
        trace.push(out.clone());
        h = out;
    }
    Ok(EncoderOutput {
        hidden: h,
        trace,
        attention,
    })
}

/// Full re-encode that adds `injection` to the input of layer `at_layer`.
/// With `at_layer == layers` the injection lands on the final states.
pub fn encode_with_injection(
    model: &Model,
    p: &AnnotatedParagraph,
    at_layer: usize,
    injection: &DenseMatrix,
) -> Result<EncoderOutput> {
    let ids = model.token_ids(p)?;
    if injection.shape() != (ids.len(), model.config.d_model) {
        return Err(Error::Shape {
            op: "encode_with_injection",
            left: (ids.len(), model.config.d_model),
            right: injection.shape(),
        });
    }
    let (mut h, _) = embed_forward(&model.params, model.config.norm_eps, &ids, None)?;
    let mut trace = vec![h.clone()];
    let mut attention = Vec::new();
    for l in 0..model.params.layers.len() {
        if l == at_layer {
            h.add_assign(injection);
        }
        let (out, cache) = layer_forward(&model.params, l, &h, None, model.config.norm_eps)?;
        attention.push(cache.attn.probs.clone());
        trace.push(out.clone());
        h = out;
    }
    if at_layer >= model.params.layers.len() {
        h.add_assign(injection);
    }
    Ok(EncoderOutput {
        hidden: h,
        trace,
        attention,
    })
}

/// Reference encoder with no entity mechanism, written against the public
/// kernels only. Returns the same trace layout as [`encode_with`].
pub fn encode_vanilla(model: &Model, p: &AnnotatedParagraph) -> Result<Vec<DenseMatrix>> {
    let ids = model.token_ids(p)?;
    let prm = &model.params;
    let eps = model.config.norm_eps;
    let d = model.config.d_model;
    let norm_rows = |x: &DenseMatrix, g: &DenseMatrix, b: &DenseMatrix| -> Result<DenseMatrix> {
        let mut out = DenseMatrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&layer_norm(x.row(r), g.data(), b.data(), eps)?);
        }
        Ok(out)
    };
    let mut x = DenseMatrix::zeros(ids.len(), d);
    for (t, &id) in ids.iter().enumerate() {
        for c in 0..d {
            x.set(t, c, prm.token_embedding.get(id, c) + prm.position_embedding.get(t, c));
        }
    }
    let mut h = norm_rows(&x, &prm.embed_norm_gain, &prm.embed_norm_bias)?;
    let mut trace = vec![h.clone()];
    for lp in &prm.layers {
        let mut r1 = vanilla_multi_head_attention(&h, &lp.attention)?;
        r1.add_assign(&h);
        let x1 = norm_rows(&r1, &lp.norm1_gain, &lp.norm1_bias)?;
        let mut f = matmul(&x1, &lp.ff_in)?;
        f.add_row_broadcast(&lp.ff_in_bias);
        f.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
        let mut r2 = matmul(&f, &lp.ff_out)?;
        r2.add_row_broadcast(&lp.ff_out_bias);
        r2.add_assign(&x1);
        h = norm_rows(&r2, &lp.norm2_gain, &lp.norm2_bias)?;
        trace.push(h.clone());
    }
    Ok(trace)
}

pub(crate) fn selection_for(
    model: &Model,
    mask: Option<&EntityMask>,
    n: usize,
) -> Result<Option<BiasSelection>> {
    let uses_tables = model.params.relative.is_some()
        || model.params.layers.iter().any(|l| l.relative.is_some());
    match mask {
        Some(m) if uses_tables => {
            if m.len() != n {
                return Err(Error::Length {
                    op: "entity mask",
                    expected: n,
                    got: m.len(),
                });
            }
            Ok(Some(BiasSelection::new(m, model.config.k)))
        }
        _ => Ok(None),
    }
}

/// Row-wise layer norm state kept for the backward pass.
pub(crate) struct NormCache {
    xhat: DenseMatrix,
    inv_std: Vec<f64>,
}

pub(crate) fn norm_forward(
    x: &DenseMatrix,
    gain: &DenseMatrix,
    bias: &DenseMatrix,
    eps: f64,
) -> (DenseMatrix, NormCache) {
    let (n, d) = x.shape();
    let mut xhat = DenseMatrix::zeros(n, d);
    let mut out = DenseMatrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for r in 0..n {
        let stats = NormStats::of(x.row(r), eps);
        inv_std.push(stats.inv_std);
        for c in 0..d {
            let v = (x.get(r, c) - stats.mean) * stats.inv_std;
            xhat.set(r, c, v);
            out.set(r, c, v * gain.get(0, c) + bias.get(0, c));
        }
    }
    (out, NormCache { xhat, inv_std })
}

pub(crate) fn norm_backward(
    cache: &NormCache,
    gain: &DenseMatrix,
    dy: &DenseMatrix,
    d_gain: &mut DenseMatrix,
    d_bias: &mut DenseMatrix,
) -> DenseMatrix {
    let (n, d) = dy.shape();
    let mut dx = DenseMatrix::zeros(n, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let xh = cache.xhat.row(r);
        let g = dy.row(r);
        for c in 0..d {
            d_gain.data_mut()[c] += g[c] * xh[c];
            d_bias.data_mut()[c] += g[c];
            dxhat[c] = g[c] * gain.get(0, c);
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let inv = cache.inv_std[r];
        for (c, slot) in dx.row_mut(r).iter_mut().enumerate() {
            *slot = inv * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

pub(crate) struct EmbedCache {
    ids: Vec<usize>,
    indicator: Option<DenseMatrix>,
    norm: NormCache,
}

pub(crate) fn embed_forward(
    params: &ModelParams,
    eps: f64,
    ids: &[usize],
    indicator: Option<&DenseMatrix>,
) -> Result<(DenseMatrix, EmbedCache)> {
    let d = params.token_embedding.cols();
    let n = ids.len();
    if n > params.position_embedding.rows() {
        return Err(Error::TooLong {
            len: n,
            max: params.position_embedding.rows(),
        });
    }
    let mut x = DenseMatrix::zeros(n, d);
    for (t, &id) in ids.iter().enumerate() {
        let tok = params.token_embedding.row(id);
        let pos = params.position_embedding.row(t);
        for (c, slot) in x.row_mut(t).iter_mut().enumerate() {
            *slot = tok[c] + pos[c];
        }
    }
    if let Some(w) = indicator {
        let table = params
            .indicator
            .as_ref()
            .ok_or_else(|| Error::invalid("indicator weights given to a model without an indicator table"))?;
        if w.shape() != (n, table.rows()) {
            return Err(Error::Shape {
                op: "indicator weights",
                left: (n, table.rows()),
                right: w.shape(),
            });
        }
        for t in 0..n {
            for r in 0..table.rows() {
                let a = w.get(t, r);
                if a != 0.0 {
                    for (slot, v) in x.row_mut(t).iter_mut().zip(table.row(r)) {
                        *slot += a * v;
                    }
                }
            }
        }
    }
    let (out, norm) = norm_forward(&x, &params.embed_norm_gain, &params.embed_norm_bias, eps);
    Ok((
        out,
        EmbedCache {
            ids: ids.to_vec(),
            indicator: indicator.cloned(),
            norm,
        },
    ))
}

pub(crate) fn embed_backward(cache: &EmbedCache, params: &ModelParams, dy: &DenseMatrix, grads: &mut ModelParams) {
    let dx = norm_backward(
        &cache.norm,
        &params.embed_norm_gain,
        dy,
        &mut grads.embed_norm_gain,
        &mut grads.embed_norm_bias,
    );
    for (t, &id) in cache.ids.iter().enumerate() {
        let g = dx.row(t);
        for (slot, v) in grads.token_embedding.row_mut(id).iter_mut().zip(g) {
            *slot += v;
        }
        for (slot, v) in grads.position_embedding.row_mut(t).iter_mut().zip(g) {
            *slot += v;
        }
    }
    if let (Some(w), Some(table)) = (&cache.indicator, grads.indicator.as_mut()) {
        for t in 0..w.rows() {
            for r in 0..w.cols() {
                let a = w.get(t, r);
                if a != 0.0 {
                    for (slot, v) in table.row_mut(r).iter_mut().zip(dx.row(t)) {
                        *slot += a * v;
                    }
                }
            }
        }
    }
}

pub(crate) struct LayerCache {
    pub attn: AttentionCache,
    norm1: NormCache,
    x1: DenseMatrix,
    ff_pre: DenseMatrix,
    ff_act: DenseMatrix,
    norm2: NormCache,
}

fn edge<'a>(params: &'a ModelParams, layer: usize, sel: Option<&'a BiasSelection>) -> Option<EdgeBias<'a>> {
    match (sel, params.table_for(layer)) {
        (Some(selection), Some(table)) => Some(EdgeBias { selection, table }),
        _ => None,
    }
}

pub(crate) fn layer_forward(
    params: &ModelParams,
    layer: usize,
    h: &DenseMatrix,
    sel: Option<&BiasSelection>,
    eps: f64,
) -> Result<(DenseMatrix, LayerCache)> {
    let lp = &params.layers[layer];
    let (mut r1, attn) = mha_forward(h, &lp.attention, edge(params, layer, sel), layer)?;
    r1.add_assign(h);
    let (x1, norm1) = norm_forward(&r1, &lp.norm1_gain, &lp.norm1_bias, eps);
    let mut ff_pre = matmul(&x1, &lp.ff_in)?;
    ff_pre.add_row_broadcast(&lp.ff_in_bias);
    let mut ff_act = ff_pre.clone();
    ff_act.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
    let mut r2 = matmul(&ff_act, &lp.ff_out)?;
    r2.add_row_broadcast(&lp.ff_out_bias);
    r2.add_assign(&x1);
    let (out, norm2) = norm_forward(&r2, &lp.norm2_gain, &lp.norm2_bias, eps);
    if !out.is_finite() {
        return Err(Error::NonFinite {
            what: format!("hidden states after layer {layer}"),
        });
    }
    Ok((
        out,
        LayerCache {
            attn,
            norm1,
            x1,
            ff_pre,
            ff_act,
            norm2,
        },
    ))
}

pub(crate) fn layer_backward(
    params: &ModelParams,
    layer: usize,
    cache: &LayerCache,
    sel: Option<&BiasSelection>,
    d_out: &DenseMatrix,
    grads: &mut ModelParams,
) -> Result<DenseMatrix> {
    let lp = &params.layers[layer];
    let ModelParams {
        layers, relative, ..
    } = grads;
    let LayerParams {
        attention,
        norm1_gain,
        norm1_bias,
        ff_in,
        ff_in_bias,
        ff_out,
        ff_out_bias,
        norm2_gain,
        norm2_bias,
        relative: layer_table,
    } = &mut layers[layer];

    let d_r2 = norm_backward(&cache.norm2, &lp.norm2_gain, d_out, norm2_gain, norm2_bias);
    ff_out.add_assign(&matmul_tn(&cache.ff_act, &d_r2)?);
    ff_out_bias.add_assign(&d_r2.column_sums());
    let mut d_pre = matmul_nt(&d_r2, &lp.ff_out)?;
    for (g, &x) in d_pre.data_mut().iter_mut().zip(cache.ff_pre.data()) {
        *g *= gelu_grad_scalar(x);
    }
    ff_in.add_assign(&matmul_tn(&cache.x1, &d_pre)?);
    ff_in_bias.add_assign(&d_pre.column_sums());
    let mut d_x1 = matmul_nt(&d_pre, &lp.ff_in)?;
    d_x1.add_assign(&d_r2);

    let d_r1 = norm_backward(&cache.norm1, &lp.norm1_gain, &d_x1, norm1_gain, norm1_bias);
    let bias = edge(params, layer, sel);
    let table_grad = match layer_table.as_mut() {
        Some(t) => Some(t),
        None => relative.as_mut(),
    };
    let table_grad = if bias.is_some() { table_grad } else { None };
    let mut d_h = mha_backward(&cache.attn, &lp.attention, bias, &d_r1, attention, table_grad)?;
    d_h.add_assign(&d_r1);
    Ok(d_h)
}

/// Forward through layers `range`, keeping caches.
pub(crate) fn layers_forward(
    params: &ModelParams,
    range: std::ops::Range<usize>,
    h: DenseMatrix,
    sel: Option<&BiasSelection>,
    eps: f64,
) -> Result<(DenseMatrix, Vec<LayerCache>)> {
    let mut h = h;
    let mut caches = Vec::with_capacity(range.len());
    for l in range {
        let (out, cache) = layer_forward(params, l, &h, sel, eps)?;
        caches.push(cache);
        h = out;
    }
    Ok((h, caches))
}

/// Backward through the layers cached by [`layers_forward`] starting at
/// layer `first`.
pub(crate) fn layers_backward(
    params: &ModelParams,
    first: usize,
    caches: &[LayerCache],
    sel: Option<&BiasSelection>,
    d_out: DenseMatrix,
    grads: &mut ModelParams,
) -> Result<DenseMatrix> {
    let mut d = d_out;
    for (offset, cache) in caches.iter().enumerate().rev() {
        d = layer_backward(params, first + offset, cache, sel, &d, grads)?;
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, PassMode, Variant};
    use crate::corpus::tests::para;
    use crate::model::{Model, TokenVocab};
    use crate::corpus::LabelSet;
    use crate::tensor::{derived_rng, finite_diff_grad};

    fn model(variant: Variant, layers: usize) -> (Model, AnnotatedParagraph) {
        let p = para(9, &[(1, 3), (5, 6), (7, 9)], &[(0, 1, "R"), (2, 0, "S")]);
        let cfg = ModelConfig {
            layers,
            d_model: 8,
            ff: 12,
            heads: 2,
            k: 2,
            variant,
            mode: PassMode::PerPair,
            ..Default::default()
        };
        let vocab = TokenVocab::from_corpus(std::slice::from_ref(&p));
        let m = Model::new(cfg, vocab, LabelSet::from_corpus(std::slice::from_ref(&p))).unwrap();
        (m, p)
    }

    #[test]
    fn pooling() {
        let h = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![9.0, 9.0]]).unwrap();
        assert_eq!(pool_rows(&h, Span::new(0, 2)).unwrap(), vec![2.0, 3.0]);
        assert_eq!(pool_rows(&h, Span::new(2, 3)).unwrap(), vec![9.0, 9.0]);
        assert!(pool_rows(&h, Span::new(1, 1)).is_err());
        assert!(pool_rows(&h, Span::new(2, 4)).is_err());
    }

    #[test]
    fn pooling_matches_summation_oracle() {
        let mut rng = derived_rng(3, "pool");
        let h = DenseMatrix::random_normal(10, 5, 1.0, &mut rng);
        let span = Span::new(3, 8);
        let got = pool_rows(&h, span).unwrap();
        for c in 0..5 {
            let mut s = 0.0;
            for r in 3..8 {
                s += h.data()[r * 5 + c];
            }
            assert!((got[c] - s / 5.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn embedding_matches_table_lookup() {
        let (m, p) = model(Variant::PlainSp, 1);
        let got = embed_input(&m, &p).unwrap();
        let ids = m.token_ids(&p).unwrap();
        for (t, &id) in ids.iter().enumerate() {
            let raw: Vec<f64> = (0..8)
                .map(|c| m.params.token_embedding.get(id, c) + m.params.position_embedding.get(t, c))
                .collect();
            let want = layer_norm(&raw, m.params.embed_norm_gain.data(), m.params.embed_norm_bias.data(), 1e-5).unwrap();
            for c in 0..8 {
                assert_eq!(got.get(t, c), want[c]);
            }
        }
    }

    #[test]
    fn zero_layers_is_embedding() {
        let (m, p) = model(Variant::EntityAware, 0);
        let out = encode(&m, &p).unwrap();
        assert_eq!(out.hidden, embed_input(&m, &p).unwrap());
    }

    #[test]
    fn empty_mask_matches_vanilla_stack() {
        let (m, p) = model(Variant::EntityAware, 2);
        let empty = EntityMask::empty(p.len());
        let out = encode_with(&m, &p, Conditioning { mask: Some(&empty), indicator: None }).unwrap();
        let reference = encode_vanilla(&m, &p).unwrap();
        assert_eq!(out.trace.len(), reference.len());
        for (a, b) in out.trace.iter().zip(&reference) {
            assert!(a.max_abs_diff(b) <= 1e-12);
        }
    }

    #[test]
    fn too_long_is_rejected() {
        let (mut m, p) = model(Variant::PlainSp, 1);
        m.params.position_embedding = DenseMatrix::zeros(4, 8);
        assert!(matches!(encode(&m, &p), Err(Error::TooLong { len: 9, max: 4 })));
    }

    #[test]
    fn layer_stack_backward_matches_finite_differences() {
        let (m, p) = model(Variant::IndicatorInput, 2);
        let ids = m.token_ids(&p).unwrap();
        let mut rng = derived_rng(5, "probe");
        let probe = DenseMatrix::random_normal(ids.len(), 8, 1.0, &mut rng);
        let ind = DenseMatrix::random_normal(ids.len(), 3, 1.0, &mut rng);
        let loss = |prm: &ModelParams| {
            let (h, _) = embed_forward(prm, 1e-5, &ids, Some(&ind)).unwrap();
            let (out, _) = layers_forward(prm, 0..2, h, None, 1e-5).unwrap();
            out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (h, ecache) = embed_forward(&m.params, 1e-5, &ids, Some(&ind)).unwrap();
        let (_, caches) = layers_forward(&m.params, 0..2, h, None, 1e-5).unwrap();
        let mut grads = m.params.zeros_like();
        let d = layers_backward(&m.params, 0, &caches, None, probe.clone(), &mut grads).unwrap();
        embed_backward(&ecache, &m.params, &d, &mut grads);

        let names = ["indicator", "layer0.ff.in", "layer1.norm1.gain", "layer0.attn.value", "embed.position"];
        for name in names {
            let base: Vec<f64> = m.params.tensors().into_iter().find(|(n, _)| n == name).unwrap().1.data().to_vec();
            let fd = finite_diff_grad(
                |x| {
                    let mut prm = m.params.clone();
                    for (n, t) in prm.tensors_mut() {
                        if n == name {
                            t.data_mut().copy_from_slice(x);
                        }
                    }
                    loss(&prm)
                },
                &base,
                1e-5,
            )
            .unwrap();
            let analytic = grads.tensors().into_iter().find(|(n, _)| n == name).unwrap().1.data().to_vec();
            for (a, b) in analytic.iter().zip(&fd) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
                assert!(rel < 1e-5, "{name}: {a} vs {b}");
            }
        }
    }
}
