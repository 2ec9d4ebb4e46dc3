//! Annotated paragraphs, relation labels and the operations over them.

mod io;
mod synth;
mod tokenize;
mod window;

use std::collections::{BTreeSet, HashSet};

pub use io::{parse_records, read_records, render_records, write_records, CORPUS_HEADER};
pub use synth::{
    entity_type_of, gen_synthetic, label_for_pair, synthetic_subword_vocab, SyntheticSpec,
    ENTITY_TYPES,
};
pub use tokenize::{detokenize, tokenize, SubwordVocab};
pub use window::window_truncate;

use crate::error::{Error, Result};

/// Name of the no-relation class.
pub const NA_LABEL: &str = "NA";

/// Half-open token span `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t < self.end
    }
}

/// A gold relation between mention `head` and mention `tail` (indices into
/// the paragraph's mention list). Direction matters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationInstance {
    pub head: usize,
    pub tail: usize,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedParagraph {
    pub tokens: Vec<String>,
    pub mentions: Vec<Span>,
    pub relations: Vec<RelationInstance>,
    pub domain: String,
}

impl AnnotatedParagraph {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks every structural invariant; the error names the offending field.
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        let n = self.tokens.len();
        for (m, span) in self.mentions.iter().enumerate() {
            if span.start >= span.end {
                return Err((
                    format!("mentions[{m}]"),
                    format!("start {} must be < end {}", span.start, span.end),
                ));
            }
            if span.end > n {
                return Err((
                    format!("mentions[{m}]"),
                    format!("end {} exceeds token count {n}", span.end),
                ));
            }
        }
        let mut seen = HashSet::new();
        for (r, rel) in self.relations.iter().enumerate() {
            let field = format!("relations[{r}]");
            let count = self.mentions.len();
            if rel.head >= count || rel.tail >= count {
                return Err((
                    field,
                    format!(
                        "mention index ({}, {}) out of range for {count} mentions",
                        rel.head, rel.tail
                    ),
                ));
            }
            if rel.head == rel.tail {
                return Err((field, format!("self-relation on mention {}", rel.head)));
            }
            if rel.label.is_empty() {
                return Err((field, "empty label".into()));
            }
            if !seen.insert((rel.head, rel.tail)) {
                return Err((
                    field,
                    format!("duplicate label for pair ({}, {})", rel.head, rel.tail),
                ));
            }
        }
        Ok(())
    }

    /// Gold label name for the ordered pair, if annotated.
    pub fn gold_label(&self, head: usize, tail: usize) -> Option<&str> {
        self.relations
            .iter()
            .find(|r| r.head == head && r.tail == tail)
            .map(|r| r.label.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairMode {
    /// Every ordered pair of distinct mentions.
    AllOrdered,
    /// Only the pairs carrying a gold annotation.
    GoldOnly,
}

/// Mention pairs to score, sorted head-major then tail.
pub fn enumerate_pairs(p: &AnnotatedParagraph, mode: PairMode) -> Vec<(usize, usize)> {
    match mode {
        PairMode::AllOrdered => {
            let m = p.mentions.len();
            let mut out = Vec::with_capacity(m * m.saturating_sub(1));
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        out.push((i, j));
                    }
                }
            }
            out
        }
        PairMode::GoldOnly => {
            let mut out: Vec<_> = p.relations.iter().map(|r| (r.head, r.tail)).collect();
            out.sort_unstable();
            out
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationLabel {
    pub id: usize,
    pub name: String,
    pub is_na: bool,
}

/// Dense label inventory. `NA` always has id 0; the rest follow in name order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<RelationLabel>,
}

impl LabelSet {
    /// Builds the inventory from relation names. `NA` is added if absent.
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let rest: BTreeSet<String> = names
            .into_iter()
            .map(Into::into)
            .filter(|n| n != NA_LABEL)
            .collect();
        let labels = std::iter::once(NA_LABEL.to_string())
            .chain(rest)
            .enumerate()
            .map(|(id, name)| RelationLabel {
                id,
                is_na: id == 0,
                name,
            })
            .collect();
        LabelSet { labels }
    }

    /// Every label mentioned in `corpus`, plus `NA`.
    pub fn from_corpus(corpus: &[AnnotatedParagraph]) -> Self {
        Self::new(
            corpus
                .iter()
                .flat_map(|p| p.relations.iter().map(|r| r.label.clone())),
        )
    }

    /// Rebuilds a set from an ordered name list as stored in checkpoints.
    pub fn from_ordered(names: &[String]) -> Result<Self> {
        if names.first().map(String::as_str) != Some(NA_LABEL) {
            return Err(Error::invalid("label list must start with NA"));
        }
        let set = Self::new(names.iter().cloned());
        if set.names() != names {
            return Err(Error::invalid(format!(
                "label list is not in canonical order: {names:?}"
            )));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn na_id(&self) -> usize {
        0
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.name == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.labels[id].name
    }

    pub fn names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.name.clone()).collect()
    }

    pub fn labels(&self) -> &[RelationLabel] {
        &self.labels
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn para(n: usize, spans: &[(usize, usize)], rels: &[(usize, usize, &str)]) -> AnnotatedParagraph {
        AnnotatedParagraph {
            tokens: (0..n).map(|i| format!("t{i}")).collect(),
            mentions: spans.iter().map(|&(s, e)| Span::new(s, e)).collect(),
            relations: rels
                .iter()
                .map(|&(h, t, l)| RelationInstance {
                    head: h,
                    tail: t,
                    label: l.into(),
                })
                .collect(),
            domain: "bc".into(),
        }
    }

    #[test]
    fn all_ordered_pairs() {
        let p = para(6, &[(0, 1), (2, 3), (4, 5)], &[]);
        assert_eq!(
            enumerate_pairs(&p, PairMode::AllOrdered),
            vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]
        );
        let p5 = para(10, &[(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)], &[]);
        assert_eq!(enumerate_pairs(&p5, PairMode::AllOrdered).len(), 20);
        let p1 = para(2, &[(0, 1)], &[]);
        assert!(enumerate_pairs(&p1, PairMode::AllOrdered).is_empty());
    }

    #[test]
    fn gold_only_pairs() {
        let p = para(4, &[(0, 1), (2, 3)], &[(0, 1, "R")]);
        assert_eq!(enumerate_pairs(&p, PairMode::GoldOnly), vec![(0, 1)]);
    }

    #[test]
    fn validation_names_fields() {
        let bad = para(3, &[(1, 1)], &[]);
        assert_eq!(bad.validate().unwrap_err().0, "mentions[0]");
        let bad = para(3, &[(0, 4)], &[]);
        assert_eq!(bad.validate().unwrap_err().0, "mentions[0]");
        let bad = para(3, &[(0, 1), (1, 2)], &[(0, 0, "R")]);
        assert_eq!(bad.validate().unwrap_err().0, "relations[0]");
        let bad = para(3, &[(0, 1), (1, 2)], &[(0, 1, "R"), (0, 1, "S")]);
        assert_eq!(bad.validate().unwrap_err().0, "relations[1]");
        let bad = para(3, &[(0, 1), (1, 2)], &[(0, 2, "R")]);
        assert_eq!(bad.validate().unwrap_err().0, "relations[0]");
        let ok = para(3, &[(0, 1), (1, 2)], &[(0, 1, "R"), (1, 0, "NA")]);
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn label_set_is_dense_with_na_first() {
        let set = LabelSet::new(["b", "NA", "a", "b"]);
        assert_eq!(set.names(), vec!["NA", "a", "b"]);
        assert_eq!(set.labels().iter().filter(|l| l.is_na).count(), 1);
        assert_eq!(set.id("b"), Some(2));
        assert!(LabelSet::from_ordered(&set.names()).is_ok());
        assert!(LabelSet::from_ordered(&["a".to_string()]).is_err());
    }
}
