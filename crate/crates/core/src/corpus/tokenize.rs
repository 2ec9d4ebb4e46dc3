use std::collections::BTreeMap;

/// Subword inventory for greedy longest-match segmentation. Positions with no
/// matching entry fall back to a single character.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SubwordVocab {
    entries: BTreeMap<String, usize>,
    longest: usize,
}

impl SubwordVocab {
    pub fn new<I, S>(pieces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = SubwordVocab::default();
        for p in pieces {
            vocab.insert(p.into());
        }
        vocab
    }

    pub fn insert(&mut self, piece: String) {
        if piece.is_empty() || self.entries.contains_key(&piece) {
            return;
        }
        self.longest = self.longest.max(piece.chars().count());
        let id = self.entries.len();
        self.entries.insert(piece, id);
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.entries.contains_key(piece)
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.entries.get(piece).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn segment_word(&self, word: &str, word_index: usize, out: &mut Vec<(String, usize)>) {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(b, _)| b)
            .chain(std::iter::once(word.len()))
            .collect();
        let chars = bounds.len() - 1;
        let mut at = 0;
        while at < chars {
            let max_len = self.longest.min(chars - at);
            let matched = (1..=max_len)
                .rev()
                .find(|&len| self.contains(&word[bounds[at]..bounds[at + len]]))
                .unwrap_or(1);
            out.push((word[bounds[at]..bounds[at + matched]].to_string(), word_index));
            at += matched;
        }
    }
}

/// Splits `text` on whitespace and segments each word greedily against
/// `vocab`. Each subword carries the index of the word it came from.
pub fn tokenize(text: &str, vocab: &SubwordVocab) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (w, word) in text.split_whitespace().enumerate() {
        vocab.segment_word(word, w, &mut out);
    }
    out
}

/// Glues subwords back into words and joins the words with single spaces.
pub fn detokenize(pieces: &[(String, usize)]) -> String {
    let mut out = String::new();
    let mut current = None;
    for (piece, w) in pieces {
        if current.is_some() && current != Some(*w) {
            out.push(' ');
        }
        current = Some(*w);
        out.push_str(piece);
    }
    out
}
