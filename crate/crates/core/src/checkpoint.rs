//! Versioned checkpoint file.
//!
//! ```text
//! #mre-ckpt v1
//! <ModelConfig as key=value lines>
//! vocab=<JSON array of tokens>
//! labels=<JSON array of label names>
//! config_sha256=<hex digest of the lines above, after the header>
//! payload_sha256=<hex digest of all tensor blocks>
//! tensors=<count>
//! tensor <name> <rows> <cols>\n<rows*cols little-endian f64>
//! ...
//! ```
//!
//! Tensors appear in the canonical order of [`ModelParams::tensors`].

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::corpus::LabelSet;
use crate::error::{Error, Result};
use crate::model::{Model, TokenVocab};
use crate::params::ModelParams;

pub const CHECKPOINT_HEADER: &str = "#mre-ckpt v1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn json_list(items: &[String]) -> String {
    serde_json::to_string(items).expect("strings serialize")
}

fn config_block(model: &Model) -> String {
    format!(
        "{}vocab={}\nlabels={}\n",
        model.config.render(),
        json_list(model.vocab.tokens()),
        json_list(&model.labels.names())
    )
}

/// Digest identifying the configuration, vocabulary and label set.
pub fn config_hash(model: &Model) -> String {
    sha256_hex(config_block(model).as_bytes())
}

fn payload(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in params.tensors() {
        out.extend_from_slice(format!("tensor {name} {} {}\n", t.rows(), t.cols()).as_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let block = config_block(model);
    let body = payload(&model.params);
    let mut out = format!(
        "{CHECKPOINT_HEADER}\n{block}config_sha256={}\npayload_sha256={}\ntensors={}\n",
        sha256_hex(block.as_bytes()),
        sha256_hex(&body),
        model.params.tensors().len()
    )
    .into_bytes();
    out.extend_from_slice(&body);
    out
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::file(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    from_bytes(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.at..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        self.at += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Checkpoint("truncated tensor data".into()));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut cur = Cursor { bytes, at: 0 };
    if cur.line()? != CHECKPOINT_HEADER {
        return Err(bad(format!("missing `{CHECKPOINT_HEADER}` header")));
    }
    let block_start = cur.at;
    let mut config = ModelConfig::default();
    let mut vocab = None;
    let mut labels = None;
    let block_end;
    loop {
        let at = cur.at;
        let line = cur.line()?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got `{line}`")))?;
        match k {
            "vocab" => {
                let list: Vec<String> = serde_json::from_str(v).map_err(|e| bad(format!("vocab: {e}")))?;
                vocab = Some(TokenVocab::from_tokens(list)?);
            }
            "labels" => {
                let list: Vec<String> = serde_json::from_str(v).map_err(|e| bad(format!("labels: {e}")))?;
                labels = Some(LabelSet::from_ordered(&list)?);
            }
            "config_sha256" => {
                block_end = at;
                let got = sha256_hex(&bytes[block_start..block_end]);
                if got != v {
                    return Err(bad(format!("config hash mismatch: stored {v}, computed {got}")));
                }
                break;
            }
            _ => {
                if !config.apply(k, v)? {
                    return Err(bad(format!("unknown key `{k}`")));
                }
            }
        }
    }
    let payload_hash = cur
        .line()?
        .strip_prefix("payload_sha256=")
        .ok_or_else(|| bad("missing payload_sha256".into()))?
        .to_string();
    let count: usize = cur
        .line()?
        .strip_prefix("tensors=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing tensor count".into()))?;
    let payload_start = cur.at;
    if sha256_hex(&bytes[payload_start..]) != payload_hash {
        return Err(bad("payload hash mismatch".into()));
    }

    let vocab = vocab.ok_or_else(|| bad("missing vocab".into()))?;
    let labels = labels.ok_or_else(|| bad("missing labels".into()))?;
    if config.vocab_size != vocab.len() {
        return Err(bad(format!(
            "vocab_size {} does not match {} stored tokens",
            config.vocab_size,
            vocab.len()
        )));
    }
    let mut model = Model::new(config, vocab, labels)?;
    let expected = model.params.tensors().len();
    if count != expected {
        return Err(bad(format!("expected {expected} tensors, file has {count}")));
    }
    for (name, t) in model.params.tensors_mut() {
        let line = cur.line()?;
        let want = format!("tensor {name} {} {}", t.rows(), t.cols());
        if line != want {
            return Err(bad(format!("expected `{want}`, got `{line}`")));
        }
        let raw = cur.take(t.len() * 8)?;
        for (slot, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *slot = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            if !slot.is_finite() {
                return Err(bad(format!("non-finite value in {name}")));
            }
        }
    }
    if cur.at != bytes.len() {
        return Err(bad("trailing bytes after the last tensor".into()));
    }
    Ok(model)
}
