//! Entity-aware self-attention over clipped relative distances.
//!
//! Token pairs where at least one side lies inside an entity mention get a
//! learned edge vector added to both the key and the value of that pair:
//!
//! ```text
//! a_ij = w[d(i, j)]   if token i is in a mention (wins when both are)
//!        w[d(j, i)]   else if token j is in a mention
//!        0            otherwise
//! d(i, j) = min(max(−k, i − j), k)
//!
//! e_ij = (h_i Wq) · (h_j Wk + aK_ij) / sqrt(d_head)
//! z_i  = Σ_j softmax_j(e_i·) (h_j Wv + aV_ij)
//! ```
//!
//! Two code paths compute this. [`attention_head`] materializes the `aK`/`aV`
//! grids and sums over `j` directly; the multi-head path used by the encoder
//! keeps only the per-cell table index ([`BiasSelection`]) and folds the
//! edge terms into two small dense products. Tests hold them to each other.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;

use crate::corpus::{AnnotatedParagraph, Span};
use crate::error::{Error, Result};
use crate::tensor::{dot, matmul, matmul_nt, matmul_tn, softmax_in_place, DenseMatrix};

/// `min(max(−k, i − j), k)`.
pub fn clip_distance(i: usize, j: usize, k: usize) -> i64 {
    let k = k as i64;
    (i as i64 - j as i64).clamp(-k, k)
}

/// Learned edge vectors `w_{−k} .. w_k` for keys and for values. Row `t` of
/// each table stores `w_{t − k}`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeBiasTable {
    k: usize,
    pub key: DenseMatrix,
    pub value: DenseMatrix,
}

impl RelativeBiasTable {
    pub fn new(k: usize, key: DenseMatrix, value: DenseMatrix) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("clip radius k must be >= 1"));
        }
        if key.rows() != 2 * k + 1 || key.shape() != value.shape() {
            return Err(Error::Shape {
                op: "RelativeBiasTable::new",
                left: key.shape(),
                right: value.shape(),
            });
        }
        Ok(RelativeBiasTable { k, key, value })
    }

    pub fn zeros(k: usize, dim: usize) -> Self {
        RelativeBiasTable {
            k,
            key: DenseMatrix::zeros(2 * k + 1, dim),
            value: DenseMatrix::zeros(2 * k + 1, dim),
        }
    }

    pub fn random(k: usize, dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let key = DenseMatrix::random_normal(2 * k + 1, dim, std, rng);
        let value = DenseMatrix::random_normal(2 * k + 1, dim, std, rng);
        RelativeBiasTable { k, key, value }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.key.cols()
    }

    /// Table row holding `w_offset`.
    pub fn index_of(&self, offset: i64) -> usize {
        (offset + self.k as i64) as usize
    }
}

/// Which tokens sit inside a mention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityMask {
    in_mention: Vec<bool>,
    mention_id: Vec<Option<usize>>,
}

impl EntityMask {
    pub fn empty(n: usize) -> Self {
        EntityMask {
            in_mention: vec![false; n],
            mention_id: vec![None; n],
        }
    }

    /// Mask over `n` tokens from `(mention id, span)` pairs. A token covered
    /// by several spans carries the id of the earliest-starting one (lowest
    /// id on ties).
    pub fn from_spans<I>(n: usize, spans: I) -> Self
    where
        I: IntoIterator<Item = (usize, Span)>,
    {
        let mut mask = Self::empty(n);
        let mut owner_start = vec![usize::MAX; n];
        for (id, span) in spans {
            for t in span.start..span.end.min(n) {
                mask.in_mention[t] = true;
                let better = span.start < owner_start[t]
                    || (span.start == owner_start[t] && mask.mention_id[t].is_none_or(|o| id < o));
                if better {
                    owner_start[t] = span.start;
                    mask.mention_id[t] = Some(id);
                }
            }
        }
        mask
    }

    pub fn from_paragraph(p: &AnnotatedParagraph) -> Self {
        Self::from_spans(p.len(), p.mentions.iter().copied().enumerate())
    }

    /// Mask covering only the listed mentions of `p`.
    pub fn restricted(p: &AnnotatedParagraph, mentions: &[usize]) -> Self {
        Self::from_spans(p.len(), mentions.iter().map(|&m| (m, p.mentions[m])))
    }

    pub fn len(&self) -> usize {
        self.in_mention.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_mention.is_empty()
    }

    pub fn has_entities(&self) -> bool {
        self.in_mention.iter().any(|&b| b)
    }

    pub fn is_entity(&self, t: usize) -> bool {
        self.in_mention[t]
    }

    pub fn mention_id(&self, t: usize) -> Option<usize> {
        self.mention_id[t]
    }
}

/// How one cell of the `a_ij` grid is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasCell {
    Zero,
    /// Token `i` is in a mention: table row for `d(i, j)`.
    Row(usize),
    /// Only token `j` is in a mention: table row for `d(j, i)`.
    Col(usize),
}

impl BiasCell {
    pub fn table_index(self) -> Option<usize> {
        match self {
            BiasCell::Zero => None,
            BiasCell::Row(t) | BiasCell::Col(t) => Some(t),
        }
    }
}

/// Per-cell table selection for an `N x N` attention grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BiasSelection {
    n: usize,
    k: usize,
    cells: Vec<BiasCell>,
}

impl BiasSelection {
    pub fn new(mask: &EntityMask, k: usize) -> Self {
        let n = mask.len();
        let mut cells = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let cell = if mask.is_entity(i) {
                    BiasCell::Row((clip_distance(i, j, k) + k as i64) as usize)
                } else if mask.is_entity(j) {
                    BiasCell::Col((clip_distance(j, i, k) + k as i64) as usize)
                } else {
                    BiasCell::Zero
                };
                cells.push(cell);
            }
        }
        BiasSelection { n, k, cells }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> BiasCell {
        self.cells[i * self.n + j]
    }

    fn index(&self, i: usize, j: usize) -> Option<usize> {
        self.cell(i, j).table_index()
    }

    /// One row rendered as space-separated `Z`, `R:t` or `B:t` cells.
    pub fn render_row(&self, i: usize) -> String {
        let mut out = String::new();
        for j in 0..self.n {
            if j > 0 {
                out.push(' ');
            }
            match self.cell(i, j) {
                BiasCell::Zero => out.push('Z'),
                BiasCell::Row(t) => write!(out, "R:{t}").unwrap(),
                BiasCell::Col(t) => write!(out, "B:{t}").unwrap(),
            }
        }
        out
    }

    /// Text dump with one line per `(layer, head, row)`:
    /// `layer=<l> head=<h> row=<i> | <cells>`.
    pub fn render(&self, layers: usize, heads: usize) -> String {
        let mut out = String::new();
        for l in 0..layers {
            for h in 0..heads {
                for i in 0..self.n {
                    writeln!(out, "layer={l} head={h} row={i} | {}", self.render_row(i)).unwrap();
                }
            }
        }
        out
    }
}

/// An `N x N` grid of `dim`-vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasGrid {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl BiasGrid {
    pub fn zeros(n: usize, dim: usize) -> Self {
        BiasGrid {
            n,
            dim,
            data: vec![0.0; n * n * dim],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let at = (i * self.n + j) * self.dim;
        &self.data[at..at + self.dim]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let at = (i * self.n + j) * self.dim;
        &mut self.data[at..at + self.dim]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Materializes `(aK, aV)` for a sequence of length `n`.
pub fn build_bias_tensors(
    mask: &EntityMask,
    n: usize,
    table: &RelativeBiasTable,
) -> Result<(BiasGrid, BiasGrid)> {
    if mask.len() != n {
        return Err(Error::Length {
            op: "build_bias_tensors",
            expected: n,
            got: mask.len(),
        });
    }
    let sel = BiasSelection::new(mask, table.k());
    let mut ak = BiasGrid::zeros(n, table.dim());
    let mut av = BiasGrid::zeros(n, table.dim());
    for i in 0..n {
        for j in 0..n {
            if let Some(t) = sel.index(i, j) {
                ak.cell_mut(i, j).copy_from_slice(table.key.row(t));
                av.cell_mut(i, j).copy_from_slice(table.value.row(t));
            }
        }
    }
    Ok((ak, av))
}

/// One head's projections, each `d_model x d_head`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadProjection {
    pub query: DenseMatrix,
    pub key: DenseMatrix,
    pub value: DenseMatrix,
}

/// Single-head entity-aware attention computed cell by cell from
/// materialized bias grids.
pub fn attention_head(
    h: &DenseMatrix,
    proj: &HeadProjection,
    ak: &BiasGrid,
    av: &BiasGrid,
) -> Result<DenseMatrix> {
    let n = h.rows();
    let q = matmul(h, &proj.query)?;
    let k = matmul(h, &proj.key)?;
    let v = matmul(h, &proj.value)?;
    let dh = q.cols();
    if ak.n() != n || av.n() != n || ak.dim() != dh || av.dim() != dh {
        return Err(Error::Shape {
            op: "attention_head",
            left: (n, dh),
            right: (ak.n(), ak.dim()),
        });
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = DenseMatrix::zeros(n, dh);
    let mut logits = vec![0.0; n];
    let mut keyed = vec![0.0; dh];
    for i in 0..n {
        for (j, logit) in logits.iter_mut().enumerate() {
            for (c, slot) in keyed.iter_mut().enumerate() {
                *slot = k.get(j, c) + ak.cell(i, j)[c];
            }
            *logit = dot(q.row(i), &keyed) * scale;
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("attention logits, row {i}"),
            });
        }
        softmax_in_place(&mut logits);
        let row = out.row_mut(i);
        for (j, &p) in logits.iter().enumerate() {
            for c in 0..dh {
                row[c] += p * (v.get(j, c) + av.cell(i, j)[c]);
            }
        }
    }
    Ok(out)
}

/// Query/key/value/output weights for one multi-head attention sublayer.
/// Head `h` owns columns `h * d_head .. (h + 1) * d_head` of the three input
/// projections.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerParams {
    pub heads: usize,
    pub query: DenseMatrix,
    pub key: DenseMatrix,
    pub value: DenseMatrix,
    pub output: DenseMatrix,
    pub output_bias: DenseMatrix,
}

impl AttentionLayerParams {
    pub fn zeros_like(&self) -> Self {
        let z = |m: &DenseMatrix| DenseMatrix::zeros(m.rows(), m.cols());
        AttentionLayerParams {
            heads: self.heads,
            query: z(&self.query),
            key: z(&self.key),
            value: z(&self.value),
            output: z(&self.output),
            output_bias: z(&self.output_bias),
        }
    }

    pub fn d_model(&self) -> usize {
        self.query.rows()
    }

    pub fn d_head(&self) -> usize {
        self.query.cols() / self.heads
    }

    pub fn head_projection(&self, head: usize) -> HeadProjection {
        let dh = self.d_head();
        HeadProjection {
            query: self.query.col_block(head * dh, dh),
            key: self.key.col_block(head * dh, dh),
            value: self.value.col_block(head * dh, dh),
        }
    }
}

/// Edge terms for the attention sublayer: which table row each cell uses,
/// and the table itself.
#[derive(Clone, Copy)]
pub(crate) struct EdgeBias<'a> {
    pub selection: &'a BiasSelection,
    pub table: &'a RelativeBiasTable,
}

pub(crate) struct AttentionCache {
    input: DenseMatrix,
    q: DenseMatrix,
    k: DenseMatrix,
    v: DenseMatrix,
    /// Attention weights per head.
    pub probs: Vec<DenseMatrix>,
    /// Per head, `mass[i][t] = Σ_j P_ij [cell (i, j) uses row t]`.
    mass: Vec<Option<DenseMatrix>>,
    concat: DenseMatrix,
}

/// Multi-head entity-aware attention. Every head sees the same bias grid.
pub fn multi_head_attention(
    h: &DenseMatrix,
    params: &AttentionLayerParams,
    mask: &EntityMask,
    table: &RelativeBiasTable,
) -> Result<DenseMatrix> {
    if mask.len() != h.rows() {
        return Err(Error::Length {
            op: "multi_head_attention",
            expected: h.rows(),
            got: mask.len(),
        });
    }
    let selection = BiasSelection::new(mask, table.k());
    let bias = EdgeBias {
        selection: &selection,
        table,
    };
    Ok(mha_forward(h, params, Some(bias), 0)?.0)
}

/// Standard multi-head scaled dot-product attention with no edge terms.
pub fn vanilla_multi_head_attention(
    h: &DenseMatrix,
    params: &AttentionLayerParams,
) -> Result<DenseMatrix> {
    let dh = params.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = DenseMatrix::zeros(h.rows(), params.d_model());
    for head in 0..params.heads {
        let proj = params.head_projection(head);
        let q = matmul(h, &proj.query)?;
        let k = matmul(h, &proj.key)?;
        let v = matmul(h, &proj.value)?;
        let mut s = matmul_nt(&q, &k)?;
        s.scale(scale);
        for r in 0..s.rows() {
            softmax_in_place(s.row_mut(r));
        }
        concat.set_col_block(head * dh, &matmul(&s, &v)?);
    }
    let mut out = matmul(&concat, &params.output)?;
    out.add_row_broadcast(&params.output_bias);
    Ok(out)
}

pub(crate) fn mha_forward(
    h: &DenseMatrix,
    params: &AttentionLayerParams,
    bias: Option<EdgeBias<'_>>,
    layer: usize,
) -> Result<(DenseMatrix, AttentionCache)> {
    let n = h.rows();
    let dh = params.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = matmul(h, &params.query)?;
    let k = matmul(h, &params.key)?;
    let v = matmul(h, &params.value)?;
    let mut concat = DenseMatrix::zeros(n, params.d_model());
    let mut probs = Vec::with_capacity(params.heads);
    let mut masses = Vec::with_capacity(params.heads);

    for head in 0..params.heads {
        let qh = q.col_block(head * dh, dh);
        let kh = k.col_block(head * dh, dh);
        let vh = v.col_block(head * dh, dh);
        let mut s = matmul_nt(&qh, &kh)?;
        s.scale(scale);
        if let Some(b) = bias {
            let qw = matmul_nt(&qh, &b.table.key)?;
            for i in 0..n {
                for j in 0..n {
                    if let Some(t) = b.selection.index(i, j) {
                        let add = qw.get(i, t) * scale;
                        s.set(i, j, s.get(i, j) + add);
                    }
                }
            }
        }
        if !s.is_finite() {
            return Err(Error::NonFinite {
                what: format!("attention logits at layer {layer}, head {head}"),
            });
        }
        for r in 0..n {
            softmax_in_place(s.row_mut(r));
        }
        let mut z = matmul(&s, &vh)?;
        let mass = match bias {
            Some(b) => {
                let mut mass = DenseMatrix::zeros(n, b.table.key.rows());
                for i in 0..n {
                    for j in 0..n {
                        if let Some(t) = b.selection.index(i, j) {
                            let m = mass.get(i, t) + s.get(i, j);
                            mass.set(i, t, m);
                        }
                    }
                }
                z.add_assign(&matmul(&mass, &b.table.value)?);
                Some(mass)
            }
            None => None,
        };
        concat.set_col_block(head * dh, &z);
        probs.push(s);
        masses.push(mass);
    }

    let mut out = matmul(&concat, &params.output)?;
    out.add_row_broadcast(&params.output_bias);
    let cache = AttentionCache {
        input: h.clone(),
        q,
        k,
        v,
        probs,
        mass: masses,
        concat,
    };
    Ok((out, cache))
}

/// Accumulates parameter gradients into `grads` (and `table_grad` when edge
/// terms were used) and returns the gradient with respect to the input.
pub(crate) fn mha_backward(
    cache: &AttentionCache,
    params: &AttentionLayerParams,
    bias: Option<EdgeBias<'_>>,
    d_out: &DenseMatrix,
    grads: &mut AttentionLayerParams,
    mut table_grad: Option<&mut RelativeBiasTable>,
) -> Result<DenseMatrix> {
    let n = d_out.rows();
    let dh = params.d_head();
    let scale = 1.0 / (dh as f64).sqrt();

    grads.output.add_assign(&matmul_tn(&cache.concat, d_out)?);
    grads.output_bias.add_assign(&d_out.column_sums());
    let d_concat = matmul_nt(d_out, &params.output)?;

    let mut dq = DenseMatrix::zeros(n, params.d_model());
    let mut dk = DenseMatrix::zeros(n, params.d_model());
    let mut dv = DenseMatrix::zeros(n, params.d_model());

    for head in 0..params.heads {
        let p = &cache.probs[head];
        let qh = cache.q.col_block(head * dh, dh);
        let kh = cache.k.col_block(head * dh, dh);
        let vh = cache.v.col_block(head * dh, dh);
        let dz = d_concat.col_block(head * dh, dh);

        let mut dp = matmul_nt(&dz, &vh)?;
        if let (Some(b), Some(mass)) = (bias, &cache.mass[head]) {
            let dzw = matmul_nt(&dz, &b.table.value)?;
            for i in 0..n {
                for j in 0..n {
                    if let Some(t) = b.selection.index(i, j) {
                        dp.set(i, j, dp.get(i, j) + dzw.get(i, t));
                    }
                }
            }
            if let Some(g) = table_grad.as_deref_mut() {
                g.value.add_assign(&matmul_tn(mass, &dz)?);
            }
        }
        dv.add_col_block(head * dh, &matmul_tn(p, &dz)?);

        // softmax backward, with the logit scale folded in
        let mut ds = DenseMatrix::zeros(n, n);
        for i in 0..n {
            let row_dot = dot(p.row(i), dp.row(i));
            for j in 0..n {
                ds.set(i, j, p.get(i, j) * (dp.get(i, j) - row_dot) * scale);
            }
        }

        let mut dqh = matmul(&ds, &kh)?;
        if let Some(b) = bias {
            let mut routed = DenseMatrix::zeros(n, b.table.key.rows());
            for i in 0..n {
                for j in 0..n {
                    if let Some(t) = b.selection.index(i, j) {
                        routed.set(i, t, routed.get(i, t) + ds.get(i, j));
                    }
                }
            }
            dqh.add_assign(&matmul(&routed, &b.table.key)?);
            if let Some(g) = table_grad.as_deref_mut() {
                g.key.add_assign(&matmul_tn(&routed, &qh)?);
            }
        }
        dq.add_col_block(head * dh, &dqh);
        dk.add_col_block(head * dh, &matmul_tn(&ds, &qh)?);
    }

    grads.query.add_assign(&matmul_tn(&cache.input, &dq)?);
    grads.key.add_assign(&matmul_tn(&cache.input, &dk)?);
    grads.value.add_assign(&matmul_tn(&cache.input, &dv)?);
    let mut dh_in = matmul_nt(&dq, &params.query)?;
    dh_in.add_assign(&matmul_nt(&dk, &params.key)?);
    dh_in.add_assign(&matmul_nt(&dv, &params.value)?);
    Ok(dh_in)
}
