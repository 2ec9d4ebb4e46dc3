//! Model configuration and the plain-text `key=value` format shared by config
//! files, checkpoints and run manifests.
//!
//! Lines are `key=value`; blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key=value` lines, rejecting duplicate keys.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", no + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out.insert(k.clone(), v).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", no + 1)));
        }
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!(
                        "unknown {} `{s}` (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

named_enum!(
    /// Model family being trained or evaluated.
    Variant {
        EntityAware => "entity-aware",
        PlainSp => "plain-sp",
        IndicatorInput => "indicator-input",
        PosembFinal => "posemb-final",
        SentenceVector => "sentence-vector",
    }
);

named_enum!(
    /// Whether a paragraph is encoded once for all pairs or once per pair.
    PassMode {
        OnePass => "one-pass",
        PerPair => "per-pair",
    }
);

named_enum!(
    /// Relation classifier on top of the pooled mention pair.
    HeadType {
        Linear => "linear",
        Mlp => "mlp",
        Biaffine => "biaffine",
    }
);

impl Variant {
    pub fn supports(self, mode: PassMode) -> bool {
        !(self == Variant::PosembFinal && mode == PassMode::OnePass)
    }

    pub fn uses_entity_attention(self) -> bool {
        self == Variant::EntityAware
    }
}

/// Everything that fixes parameter shapes and forward semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ff: usize,
    /// Token vocabulary size, including the unknown token. Set from data.
    pub vocab_size: usize,
    pub max_len: usize,
    /// Relative distance clip radius.
    pub k: usize,
    pub head: HeadType,
    pub variant: Variant,
    pub mode: PassMode,
    pub seed: u64,
    /// One relative bias table per layer instead of one shared by all.
    pub per_layer_tables: bool,
    pub norm_eps: f64,
}

/// Attention logits are divided by `sqrt(d_model / heads)`.
pub const ATTENTION_SCALE: &str = "per-head";
/// Residual then layer norm after each sublayer.
pub const NORM_ORDER: &str = "post";

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 32,
            ff: 64,
            vocab_size: 0,
            max_len: 64,
            k: 4,
            head: HeadType::Linear,
            variant: Variant::EntityAware,
            mode: PassMode::OnePass,
            seed: 42,
            per_layer_tables: false,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("heads ({}) must divide d_model ({})", self.heads, self.d_model));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.ff == 0 || self.max_len == 0 {
            return bad("ff and max_len must be positive".into());
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive".into());
        }
        if self.variant == Variant::PosembFinal && self.layers == 0 {
            return bad("posemb-final needs at least one layer".into());
        }
        if !self.variant.supports(self.mode) {
            return bad(format!(
                "variant {} cannot run in {} mode",
                self.variant, self.mode
            ));
        }
        Ok(())
    }

    /// Applies one `key=value` setting. Returns `false` for keys that belong
    /// to something else.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "layers" => self.layers = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "d_model" => self.d_model = parse_value(key, value)?,
            "ff" => self.ff = parse_value(key, value)?,
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "head" => self.head = parse_value(key, value)?,
            "variant" => self.variant = parse_value(key, value)?,
            "mode" => self.mode = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "per_layer_tables" => self.per_layer_tables = parse_value(key, value)?,
            "norm_eps" => self.norm_eps = parse_value(key, value)?,
            "attention_scale" if value == ATTENTION_SCALE => {}
            "norm_order" if value == NORM_ORDER => {}
            "attention_scale" | "norm_order" => {
                return Err(Error::Config(format!("unsupported {key} `{value}`")))
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Canonical `key=value` rendering, one setting per line.
    pub fn render(&self) -> String {
        format!(
            "layers={}\nheads={}\nd_model={}\nff={}\nvocab_size={}\nmax_len={}\nk={}\nhead={}\n\
             variant={}\nmode={}\nseed={}\nper_layer_tables={}\nnorm_eps={:e}\n\
             attention_scale={ATTENTION_SCALE}\nnorm_order={NORM_ORDER}\n",
            self.layers,
            self.heads,
            self.d_model,
            self.ff,
            self.vocab_size,
            self.max_len,
            self.k,
            self.head,
            self.variant,
            self.mode,
            self.seed,
            self.per_layer_tables,
            self.norm_eps,
        )
    }

    /// Parses a full rendering, rejecting unknown keys.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in parse_key_values(text)? {
            if !cfg.apply(&k, &v)? {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        Ok(cfg)
    }
}
