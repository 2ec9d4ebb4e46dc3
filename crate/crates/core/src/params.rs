//! Trainable tensors, their canonical names and seeded initialization.
//!
//! Gradients and optimizer moments reuse [`ModelParams`] with the same shapes.
//! Each tensor is initialized from its own ChaCha8 stream derived from the
//! model seed and the tensor's name, so adding or removing one tensor never
//! shifts the draws of another.

use crate::attention::{AttentionLayerParams, RelativeBiasTable};
use crate::config::{HeadType, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::tensor::{derived_rng, DenseMatrix};

/// Rows of the indicator embedding table.
pub const INDICATOR_IN_MENTION: usize = 0;
pub const INDICATOR_SUBJECT: usize = 1;
pub const INDICATOR_OBJECT: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attention: AttentionLayerParams,
    pub norm1_gain: DenseMatrix,
    pub norm1_bias: DenseMatrix,
    pub ff_in: DenseMatrix,
    pub ff_in_bias: DenseMatrix,
    pub ff_out: DenseMatrix,
    pub ff_out_bias: DenseMatrix,
    pub norm2_gain: DenseMatrix,
    pub norm2_bias: DenseMatrix,
    /// Present only with per-layer relative tables.
    pub relative: Option<RelativeBiasTable>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadParams {
    /// `softmax(W [o_i : o_j] + b)`.
    Linear { weight: DenseMatrix, bias: DenseMatrix },
    /// `softmax(V gelu(W [o_i : o_j] + c) + b)`, hidden width `d_model`.
    Mlp {
        hidden: DenseMatrix,
        hidden_bias: DenseMatrix,
        weight: DenseMatrix,
        bias: DenseMatrix,
    },
    /// `softmax(o_iᵀ U_r o_j + W [o_i : o_j] + b)`; row `r` of `bilinear`
    /// holds `U_r` flattened row-major.
    Biaffine {
        bilinear: DenseMatrix,
        weight: DenseMatrix,
        bias: DenseMatrix,
    },
}

impl HeadParams {
    pub fn head_type(&self) -> HeadType {
        match self {
            HeadParams::Linear { .. } => HeadType::Linear,
            HeadParams::Mlp { .. } => HeadType::Mlp,
            HeadParams::Biaffine { .. } => HeadType::Biaffine,
        }
    }

    pub fn labels(&self) -> usize {
        match self {
            HeadParams::Linear { bias, .. }
            | HeadParams::Mlp { bias, .. }
            | HeadParams::Biaffine { bias, .. } => bias.cols(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub token_embedding: DenseMatrix,
    pub position_embedding: DenseMatrix,
    pub embed_norm_gain: DenseMatrix,
    pub embed_norm_bias: DenseMatrix,
    /// Rows: in-mention, subject, object. Indicator-input variant only.
    pub indicator: Option<DenseMatrix>,
    /// Shared relative table (entity-aware variant without per-layer tables).
    pub relative: Option<RelativeBiasTable>,
    pub layers: Vec<LayerParams>,
    /// Relative position embeddings for the posemb-final variant, indexed by
    /// clipped offset to the subject / object mention.
    pub posemb_subject: Option<DenseMatrix>,
    pub posemb_object: Option<DenseMatrix>,
    pub head: HeadParams,
}

macro_rules! collect_tensors {
    ($p:expr, $($m:ident)?) => {{
        let p = $p;
        let mut out = Vec::new();
        out.push(("embed.token".to_string(), & $($m)? p.token_embedding));
        out.push(("embed.position".to_string(), & $($m)? p.position_embedding));
        out.push(("embed.norm.gain".to_string(), & $($m)? p.embed_norm_gain));
        out.push(("embed.norm.bias".to_string(), & $($m)? p.embed_norm_bias));
        if let Some(t) = & $($m)? p.indicator {
            out.push(("indicator".to_string(), t));
        }
        if let Some(t) = & $($m)? p.relative {
            out.push(("rel.key".to_string(), & $($m)? t.key));
            out.push(("rel.value".to_string(), & $($m)? t.value));
        }
        for (l, layer) in (& $($m)? p.layers).into_iter().enumerate() {
            let a = & $($m)? layer.attention;
            out.push((format!("layer{l}.attn.query"), & $($m)? a.query));
            out.push((format!("layer{l}.attn.key"), & $($m)? a.key));
            out.push((format!("layer{l}.attn.value"), & $($m)? a.value));
            out.push((format!("layer{l}.attn.output"), & $($m)? a.output));
            out.push((format!("layer{l}.attn.output_bias"), & $($m)? a.output_bias));
            if let Some(t) = & $($m)? layer.relative {
                out.push((format!("layer{l}.rel.key"), & $($m)? t.key));
                out.push((format!("layer{l}.rel.value"), & $($m)? t.value));
            }
            out.push((format!("layer{l}.norm1.gain"), & $($m)? layer.norm1_gain));
            out.push((format!("layer{l}.norm1.bias"), & $($m)? layer.norm1_bias));
            out.push((format!("layer{l}.ff.in"), & $($m)? layer.ff_in));
            out.push((format!("layer{l}.ff.in_bias"), & $($m)? layer.ff_in_bias));
            out.push((format!("layer{l}.ff.out"), & $($m)? layer.ff_out));
            out.push((format!("layer{l}.ff.out_bias"), & $($m)? layer.ff_out_bias));
            out.push((format!("layer{l}.norm2.gain"), & $($m)? layer.norm2_gain));
            out.push((format!("layer{l}.norm2.bias"), & $($m)? layer.norm2_bias));
        }
        if let Some(t) = & $($m)? p.posemb_subject {
            out.push(("posemb.subject".to_string(), t));
        }
        if let Some(t) = & $($m)? p.posemb_object {
            out.push(("posemb.object".to_string(), t));
        }
        match & $($m)? p.head {
            HeadParams::Linear { weight, bias } => {
                out.push(("head.weight".to_string(), weight));
                out.push(("head.bias".to_string(), bias));
            }
            HeadParams::Mlp { hidden, hidden_bias, weight, bias } => {
                out.push(("head.hidden".to_string(), hidden));
                out.push(("head.hidden_bias".to_string(), hidden_bias));
                out.push(("head.weight".to_string(), weight));
                out.push(("head.bias".to_string(), bias));
            }
            HeadParams::Biaffine { bilinear, weight, bias } => {
                out.push(("head.bilinear".to_string(), bilinear));
                out.push(("head.weight".to_string(), weight));
                out.push(("head.bias".to_string(), bias));
            }
        }
        out
    }};
}

const EMBED_STD: f64 = 0.5;
const EDGE_STD: f64 = 0.5;

impl ModelParams {
    /// Fresh parameters for `cfg` with `labels` output classes.
    pub fn init(cfg: &ModelConfig, labels: usize) -> Result<Self> {
        cfg.validate()?;
        if cfg.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be set before initialization".into()));
        }
        if labels < 2 {
            return Err(Error::Config(format!("need at least 2 labels, got {labels}")));
        }
        let seed = cfg.seed;
        let d = cfg.d_model;
        let normal = |name: &str, rows: usize, cols: usize, std: f64| {
            DenseMatrix::random_normal(rows, cols, std, &mut derived_rng(seed, name))
        };
        let glorot = |name: &str, rows: usize, cols: usize| {
            normal(name, rows, cols, 1.0 / (rows as f64).sqrt())
        };
        let ones = |n: usize| DenseMatrix::from_vec(1, n, vec![1.0; n]).expect("finite");
        let zeros = |n: usize| DenseMatrix::zeros(1, n);
        let table = |prefix: &str| {
            let t = 2 * cfg.k + 1;
            RelativeBiasTable::new(
                cfg.k,
                normal(&format!("{prefix}.key"), t, cfg.d_head(), EDGE_STD),
                normal(&format!("{prefix}.value"), t, cfg.d_head(), EDGE_STD),
            )
            .expect("table shape follows config")
        };

        let entity = cfg.variant.uses_entity_attention();
        let layers = (0..cfg.layers)
            .map(|l| LayerParams {
                attention: AttentionLayerParams {
                    heads: cfg.heads,
                    query: glorot(&format!("layer{l}.attn.query"), d, d),
                    key: glorot(&format!("layer{l}.attn.key"), d, d),
                    value: glorot(&format!("layer{l}.attn.value"), d, d),
                    output: glorot(&format!("layer{l}.attn.output"), d, d),
                    output_bias: zeros(d),
                },
                norm1_gain: ones(d),
                norm1_bias: zeros(d),
                ff_in: glorot(&format!("layer{l}.ff.in"), d, cfg.ff),
                ff_in_bias: zeros(cfg.ff),
                ff_out: glorot(&format!("layer{l}.ff.out"), cfg.ff, d),
                ff_out_bias: zeros(d),
                norm2_gain: ones(d),
                norm2_bias: zeros(d),
                relative: (entity && cfg.per_layer_tables).then(|| table(&format!("layer{l}.rel"))),
            })
            .collect();

        let pos_rows = 2 * cfg.k + 1;
        let head = match cfg.head {
            HeadType::Linear => HeadParams::Linear {
                weight: glorot("head.weight", 2 * d, labels),
                bias: zeros(labels),
            },
            HeadType::Mlp => HeadParams::Mlp {
                hidden: glorot("head.hidden", 2 * d, d),
                hidden_bias: zeros(d),
                weight: glorot("head.weight", d, labels),
                bias: zeros(labels),
            },
            HeadType::Biaffine => HeadParams::Biaffine {
                bilinear: normal("head.bilinear", labels, d * d, 1.0 / d as f64),
                weight: glorot("head.weight", 2 * d, labels),
                bias: zeros(labels),
            },
        };

        Ok(ModelParams {
            token_embedding: normal("embed.token", cfg.vocab_size, d, EMBED_STD),
            position_embedding: normal("embed.position", cfg.max_len, d, EMBED_STD),
            embed_norm_gain: ones(d),
            embed_norm_bias: zeros(d),
            indicator: (cfg.variant == Variant::IndicatorInput)
                .then(|| normal("indicator", 3, d, EMBED_STD)),
            relative: (entity && !cfg.per_layer_tables).then(|| table("rel")),
            layers,
            posemb_subject: (cfg.variant == Variant::PosembFinal)
                .then(|| normal("posemb.subject", pos_rows, d, EMBED_STD)),
            posemb_object: (cfg.variant == Variant::PosembFinal)
                .then(|| normal("posemb.object", pos_rows, d, EMBED_STD)),
            head,
        })
    }

    /// Every tensor with its canonical name, in canonical order.
    pub fn tensors(&self) -> Vec<(String, &DenseMatrix)> {
        collect_tensors!(self,)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut DenseMatrix)> {
        collect_tensors!(self, mut)
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.sum_squares()).sum()
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Relative table used by `layer`, if any.
    pub fn table_for(&self, layer: usize) -> Option<&RelativeBiasTable> {
        self.layers[layer].relative.as_ref().or(self.relative.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: Variant, head: HeadType) -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            variant,
            head,
            mode: crate::config::PassMode::PerPair,
            ..Default::default()
        }
    }

    #[test]
    fn names_are_unique_and_complete() {
        for v in Variant::ALL {
            for h in HeadType::ALL {
                let p = ModelParams::init(&cfg(*v, *h), 3).unwrap();
                let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
                let mut dedup = names.clone();
                dedup.sort();
                dedup.dedup();
                assert_eq!(dedup.len(), names.len());
                assert_eq!(names.contains(&"rel.key".to_string()), *v == Variant::EntityAware);
                assert_eq!(names.contains(&"indicator".to_string()), *v == Variant::IndicatorInput);
                assert_eq!(names.contains(&"posemb.subject".to_string()), *v == Variant::PosembFinal);
            }
        }
    }

    #[test]
    fn per_layer_tables() {
        let mut c = cfg(Variant::EntityAware, HeadType::Linear);
        c.per_layer_tables = true;
        let p = ModelParams::init(&c, 3).unwrap();
        assert!(p.relative.is_none());
        assert!(p.table_for(1).is_some());
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"layer1.rel.value".to_string()));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let c = cfg(Variant::EntityAware, HeadType::Biaffine);
        assert_eq!(ModelParams::init(&c, 4).unwrap(), ModelParams::init(&c, 4).unwrap());
        let mut other = c.clone();
        other.seed += 1;
        assert_ne!(ModelParams::init(&c, 4).unwrap(), ModelParams::init(&other, 4).unwrap());
    }

    #[test]
    fn zeros_like_and_arithmetic() {
        let p = ModelParams::init(&cfg(Variant::PlainSp, HeadType::Mlp), 3).unwrap();
        let mut z = p.zeros_like();
        assert_eq!(z.sum_squares(), 0.0);
        z.add_assign(&p);
        z.scale(2.0);
        assert!((z.sum_squares() - 4.0 * p.sum_squares()).abs() < 1e-9);
    }
}
