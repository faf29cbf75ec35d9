use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use super::{CorpusError, Result};

pub const BOS: &str = "<bos>";
pub const UNK: &str = "<unk>";

/// Whitespace word tokenizer over a closed vocabulary. Ids 0 and 1 are
/// the BOS and UNK specials; remaining words are sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> =
            words.into_iter().flat_map(str::split_whitespace).filter(|w| *w != BOS && *w != UNK).collect();
        let mut all = vec![BOS.to_string(), UNK.to_string()];
        all.extend(set.into_iter().map(str::to_string));
        Self::from_vocab(all)
    }

    fn from_vocab(words: Vec<String>) -> Self {
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, ids }
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn unk(&self) -> usize {
        1
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Unknown words map to UNK.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(self.unk())).collect()
    }

    /// Fails on the first out-of-vocabulary word.
    pub fn tokenize_strict(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| CorpusError::UnknownWord(w.to_string())))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i).unwrap_or(UNK)).collect::<Vec<_>>().join(" ")
    }

    /// One word per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        crate::checkpoint::write_atomic(path, text.as_bytes()).map_err(|e| CorpusError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CorpusError::Io(format!("{}: {e}", path.display())))?;
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        if words.len() < 2 || words[0] != BOS || words[1] != UNK {
            return Err(CorpusError::Io(format!("{}: vocabulary must start with {BOS} and {UNK}", path.display())));
        }
        let tok = Self::from_vocab(words);
        if tok.ids.len() != tok.words.len() {
            return Err(CorpusError::Io(format!("{}: duplicate vocabulary entries", path.display())));
        }
        Ok(tok)
    }
}
