use std::collections::{BTreeSet, HashMap};

use crate::config::ModelConfig;
use crate::corpus::{AnnotatedParagraph, LabelSet};
use crate::error::{Error, Result};
use crate::params::ModelParams;

pub const UNK_TOKEN: &str = "[UNK]";

/// Token inventory: `[UNK]` at id 0, then every training token in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    pub fn from_corpus(corpus: &[AnnotatedParagraph]) -> Self {
        let set: BTreeSet<&str> = corpus
            .iter()
            .flat_map(|p| p.tokens.iter().map(String::as_str))
            .filter(|t| *t != UNK_TOKEN)
            .collect();
        let tokens: Vec<String> = std::iter::once(UNK_TOKEN)
            .chain(set)
            .map(str::to_string)
            .collect();
        Self::build(tokens)
    }

    /// Rebuilds a vocabulary from its stored token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::invalid("token list must start with [UNK]"));
        }
        let vocab = Self::build(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::invalid("token list has duplicates"));
        }
        Ok(vocab)
    }

    fn build(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        TokenVocab { tokens, index }
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Configuration, vocabularies and parameters: everything a checkpoint holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: TokenVocab,
    pub labels: LabelSet,
    pub params: ModelParams,
}

impl Model {
    /// Freshly initialized model. `vocab_size` is taken from `vocab`.
    pub fn new(mut config: ModelConfig, vocab: TokenVocab, labels: LabelSet) -> Result<Self> {
        config.vocab_size = vocab.len();
        let params = ModelParams::init(&config, labels.len())?;
        Ok(Model {
            config,
            vocab,
            labels,
            params,
        })
    }

    /// Model sized for `corpus`, with `max_len` raised to its longest paragraph.
    pub fn for_corpus(mut config: ModelConfig, corpus: &[AnnotatedParagraph]) -> Result<Self> {
        let longest = corpus.iter().map(AnnotatedParagraph::len).max().unwrap_or(0);
        config.max_len = config.max_len.max(longest);
        Model::new(
            config,
            TokenVocab::from_corpus(corpus),
            LabelSet::from_corpus(corpus),
        )
    }

    pub fn token_ids(&self, p: &AnnotatedParagraph) -> Result<Vec<usize>> {
        if p.len() > self.config.max_len {
            return Err(Error::TooLong {
                len: p.len(),
                max: self.config.max_len,
            });
        }
        Ok(p.tokens.iter().map(|t| self.vocab.id(t)).collect())
    }

    /// Gold label ids for `pairs`; unannotated pairs are NA.
    pub fn gold_ids(&self, p: &AnnotatedParagraph, pairs: &[(usize, usize)]) -> Result<Vec<usize>> {
        pairs
            .iter()
            .map(|&(i, j)| {
                let name = p.gold_label(i, j).unwrap_or(crate::corpus::NA_LABEL);
                self.labels
                    .id(name)
                    .ok_or_else(|| Error::invalid(format!("label `{name}` is not known to the model")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::para;

    #[test]
    fn vocab_orders_and_falls_back() {
        let mut p = para(3, &[(0, 1)], &[]);
        p.tokens = vec!["b".into(), "a".into(), "b".into()];
        let v = TokenVocab::from_corpus(&[p]);
        assert_eq!(v.tokens(), &["[UNK]", "a", "b"]);
        assert_eq!(v.id("b"), 2);
        assert_eq!(v.id("zzz"), 0);
        assert_eq!(TokenVocab::from_tokens(v.tokens().to_vec()).unwrap(), v);
        assert!(TokenVocab::from_tokens(vec!["a".into()]).is_err());
    }

    #[test]
    fn gold_ids_default_to_na() {
        let p = para(6, &[(0, 1), (2, 3), (4, 5)], &[(0, 1, "R")]);
        let m = Model::for_corpus(Default::default(), std::slice::from_ref(&p)).unwrap();
        assert_eq!(m.gold_ids(&p, &[(0, 1), (1, 0)]).unwrap(), vec![1, 0]);
        assert_eq!(m.config.vocab_size, 7);
    }
}
