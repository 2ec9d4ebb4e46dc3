//! Pair classifiers over pooled mention vectors and the training loss.

use crate::config::HeadType;
use crate::encoder::{pool_mention, EncoderOutput};
use crate::corpus::AnnotatedParagraph;
use crate::error::{Error, Result};
use crate::params::HeadParams;
use crate::tensor::{gelu_grad_scalar, gelu_scalar, log_sum_exp, matmul, matmul_nt, matmul_tn, softmax_in_place, DenseMatrix};

/// `[o_i : o_j]` for one ordered mention pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRepresentation {
    pub pair: (usize, usize),
    pub subject: Vec<f64>,
    pub object: Vec<f64>,
}

impl PairRepresentation {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.subject.len() + self.object.len());
        v.extend_from_slice(&self.subject);
        v.extend_from_slice(&self.object);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationPrediction {
    pub pair: (usize, usize),
    pub logits: Vec<f64>,
    pub distribution: Vec<f64>,
    /// Argmax of `distribution`, lowest id on ties.
    pub label: usize,
}

impl RelationPrediction {
    pub(crate) fn from_logits(pair: (usize, usize), logits: Vec<f64>) -> Self {
        let mut distribution = logits.clone();
        softmax_in_place(&mut distribution);
        let label = argmax(&distribution);
        RelationPrediction {
            pair,
            logits,
            distribution,
            label,
        }
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) struct HeadCache {
    input: DenseMatrix,
    hidden_pre: Option<DenseMatrix>,
    hidden: Option<DenseMatrix>,
    outer: Option<DenseMatrix>,
}

/// Logits for one concatenated pair vector.
pub(crate) fn head_forward(params: &HeadParams, x: &[f64]) -> Result<(Vec<f64>, HeadCache)> {
    let input = DenseMatrix::row_vector(x);
    let mut cache = HeadCache {
        input,
        hidden_pre: None,
        hidden: None,
        outer: None,
    };
    let logits = match params {
        HeadParams::Linear { weight, bias } => {
            let mut z = matmul(&cache.input, weight)?;
            z.add_row_broadcast(bias);
            z
        }
        HeadParams::Mlp {
            hidden,
            hidden_bias,
            weight,
            bias,
        } => {
            let mut pre = matmul(&cache.input, hidden)?;
            pre.add_row_broadcast(hidden_bias);
            let mut act = pre.clone();
            act.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
            let mut z = matmul(&act, weight)?;
            z.add_row_broadcast(bias);
            cache.hidden_pre = Some(pre);
            cache.hidden = Some(act);
            z
        }
        HeadParams::Biaffine {
            bilinear,
            weight,
            bias,
        } => {
            let mut z = matmul(&cache.input, weight)?;
            z.add_row_broadcast(bias);
            let d = x.len() / 2;
            if bilinear.cols() != d * d {
                return Err(Error::Shape {
                    op: "biaffine head",
                    left: (bilinear.rows(), d * d),
                    right: bilinear.shape(),
                });
            }
            let (oi, oj) = x.split_at(d);
            let mut outer = DenseMatrix::zeros(1, d * d);
            for a in 0..d {
                for b in 0..d {
                    outer.data_mut()[a * d + b] = oi[a] * oj[b];
                }
            }
            z.add_assign(&matmul_nt(&outer, bilinear)?);
            cache.outer = Some(outer);
            z
        }
    };
    Ok((logits.into_vec(), cache))
}

/// Accumulates head gradients and returns the gradient for the pair vector.
pub(crate) fn head_backward(
    params: &HeadParams,
    cache: &HeadCache,
    d_logits: &[f64],
    grads: &mut HeadParams,
) -> Result<Vec<f64>> {
    let dz = DenseMatrix::row_vector(d_logits);
    match (params, grads) {
        (HeadParams::Linear { weight, .. }, HeadParams::Linear { weight: gw, bias: gb }) => {
            gw.add_assign(&matmul_tn(&cache.input, &dz)?);
            gb.add_assign(&dz);
            Ok(matmul_nt(&dz, weight)?.into_vec())
        }
        (
            HeadParams::Mlp { hidden, weight, .. },
            HeadParams::Mlp {
                hidden: gh,
                hidden_bias: ghb,
                weight: gw,
                bias: gb,
            },
        ) => {
            let act = cache.hidden.as_ref().expect("mlp cache");
            let pre = cache.hidden_pre.as_ref().expect("mlp cache");
            gw.add_assign(&matmul_tn(act, &dz)?);
            gb.add_assign(&dz);
            let mut d_pre = matmul_nt(&dz, weight)?;
            for (g, &x) in d_pre.data_mut().iter_mut().zip(pre.data()) {
                *g *= gelu_grad_scalar(x);
            }
            gh.add_assign(&matmul_tn(&cache.input, &d_pre)?);
            ghb.add_assign(&d_pre);
            Ok(matmul_nt(&d_pre, hidden)?.into_vec())
        }
        (
            HeadParams::Biaffine { bilinear, weight, .. },
            HeadParams::Biaffine {
                bilinear: gu,
                weight: gw,
                bias: gb,
            },
        ) => {
            let outer = cache.outer.as_ref().expect("biaffine cache");
            gw.add_assign(&matmul_tn(&cache.input, &dz)?);
            gb.add_assign(&dz);
            gu.add_assign(&matmul_tn(&dz, outer)?);
            let mut dx = matmul_nt(&dz, weight)?.into_vec();
            let d_outer = matmul(&dz, bilinear)?;
            let d = dx.len() / 2;
            let x = cache.input.data();
            let g = d_outer.data();
            for a in 0..d {
                for b in 0..d {
                    let v = g[a * d + b];
                    dx[a] += v * x[d + b];
                    dx[d + b] += v * x[a];
                }
            }
            Ok(dx)
        }
        _ => Err(Error::invalid("head gradient buffer does not match head type")),
    }
}

/// Relation distribution for one pair.
pub fn predict_pair(rep: &PairRepresentation, params: &HeadParams, head: HeadType) -> Result<RelationPrediction> {
    if params.head_type() != head {
        return Err(Error::invalid(format!(
            "head type {head} does not match {} parameters",
            params.head_type()
        )));
    }
    let (logits, _) = head_forward(params, &rep.concat())?;
    Ok(RelationPrediction::from_logits(rep.pair, logits))
}

/// Predictions for every pair from one shared encoding, in input order.
pub fn predict_all(
    out: &EncoderOutput,
    p: &AnnotatedParagraph,
    pairs: &[(usize, usize)],
    params: &HeadParams,
    head: HeadType,
) -> Result<Vec<RelationPrediction>> {
    pairs
        .iter()
        .map(|&(i, j)| {
            let rep = PairRepresentation {
                pair: (i, j),
                subject: pool_mention(out, p.mentions[i])?,
                object: pool_mention(out, p.mentions[j])?,
            };
            predict_pair(&rep, params, head)
        })
        .collect()
}

/// Mean negative log-likelihood and its gradient with respect to each
/// prediction's logits.
pub fn cross_entropy_loss(preds: &[RelationPrediction], gold: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if preds.len() != gold.len() {
        return Err(Error::Length {
            op: "cross_entropy_loss",
            expected: preds.len(),
            got: gold.len(),
        });
    }
    if preds.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let scale = 1.0 / preds.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (pred, &g) in preds.iter().zip(gold) {
        let (nll, mut d) = nll_and_grad(&pred.logits, g)?;
        total += nll;
        d.iter_mut().for_each(|v| *v *= scale);
        grads.push(d);
    }
    Ok((total * scale, grads))
}

/// `−log softmax(logits)[gold]` and its gradient `p − onehot(gold)`.
pub(crate) fn nll_and_grad(logits: &[f64], gold: usize) -> Result<(f64, Vec<f64>)> {
    if gold >= logits.len() {
        return Err(Error::invalid(format!(
            "gold label {gold} out of range for {} labels",
            logits.len()
        )));
    }
    let lse = log_sum_exp(logits);
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p[gold] -= 1.0;
    Ok((lse - logits[gold], p))
}
