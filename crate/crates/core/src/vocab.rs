//! Caption vocabulary and tokenization.
//!
//! Index 0 is `<start>`, index 1 is `<end>`. Vocabularies built from a corpus
//! put `<unk>` at 2 and number kept words from 3 in first-appearance order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const START_WORD: &str = "<start>";
pub const END_WORD: &str = "<end>";
pub const UNK_WORD: &str = "<unk>";
pub const START: usize = 0;
pub const END: usize = 1;
pub const DEFAULT_UNK: usize = 2;

const PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '\'', '"', '(', ')'];

/// Integer caption: `[START, ..., END]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    word_to_index: HashMap<String, usize>,
    index_to_word: Vec<Option<String>>,
    threshold: usize,
    unk_index: usize,
}

/// Lowercases and splits on whitespace, peeling leading and trailing
/// punctuation off each chunk as standalone tokens.
pub fn split_words(caption: &str) -> Vec<String> {
    let lower = caption.to_lowercase();
    let mut out = Vec::new();
    for chunk in lower.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let lead = chars.iter().take_while(|c| PUNCTUATION.contains(c)).count();
        if lead == chars.len() {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars.iter().rev().take_while(|c| PUNCTUATION.contains(c)).count();
        out.extend(chars[..lead].iter().map(|c| c.to_string()));
        out.push(chars[lead..chars.len() - trail].iter().collect());
        out.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    out
}

impl Vocabulary {
    /// Keeps every word whose raw token count across `captions` reaches
    /// `threshold`.
    pub fn build<S: AsRef<str>>(captions: &[S], threshold: usize) -> Result<Self> {
        if threshold < 1 {
            return Err(Error::InvalidArgument("vocabulary threshold must be >= 1".into()));
        }
        if captions.is_empty() {
            return Err(Error::InvalidArgument("cannot build a vocabulary from no captions".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut order: Vec<String> = Vec::new();
        for caption in captions {
            for word in split_words(caption.as_ref()) {
                let n = counts.entry(word.clone()).or_insert(0);
                if *n == 0 {
                    order.push(word);
                }
                *n += 1;
            }
        }
        let mut vocab = Self::empty(threshold, DEFAULT_UNK);
        for word in order {
            if counts[&word] >= threshold && !vocab.word_to_index.contains_key(&word) {
                let idx = vocab.index_to_word.len();
                vocab.insert(word, idx);
            }
        }
        Ok(vocab)
    }

    /// Builds a vocabulary from an explicit word→index table. `<start>`,
    /// `<end>` and `<unk>` are added at 0, 1 and `unk_index`. Indices may
    /// leave gaps; gap indices are invalid tokens.
    pub fn from_entries<S: AsRef<str>>(entries: &[(S, usize)], unk_index: usize) -> Result<Self> {
        if unk_index <= END {
            return Err(Error::InvalidArgument(format!("unk index {unk_index} collides with a marker")));
        }
        let mut vocab = Self::empty(1, unk_index);
        for (word, idx) in entries {
            let word = word.as_ref();
            if *idx < vocab.index_to_word.len() && vocab.index_to_word[*idx].is_some() {
                return Err(Error::InvalidArgument(format!("index {idx} assigned twice")));
            }
            if vocab.word_to_index.contains_key(word) {
                return Err(Error::InvalidArgument(format!("word {word:?} assigned twice")));
            }
            vocab.insert(word.to_string(), *idx);
        }
        Ok(vocab)
    }

    fn empty(threshold: usize, unk_index: usize) -> Self {
        let mut vocab = Self {
            word_to_index: HashMap::new(),
            index_to_word: Vec::new(),
            threshold,
            unk_index,
        };
        vocab.insert(START_WORD.into(), START);
        vocab.insert(END_WORD.into(), END);
        vocab.insert(UNK_WORD.into(), unk_index);
        vocab
    }

    fn insert(&mut self, word: String, idx: usize) {
        if self.index_to_word.len() <= idx {
            self.index_to_word.resize(idx + 1, None);
        }
        self.index_to_word[idx] = Some(word.clone());
        self.word_to_index.insert(word, idx);
    }

    /// One past the largest index; the width of decoder outputs.
    pub fn len(&self) -> usize {
        self.index_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_word.is_empty()
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    pub fn unk_index(&self) -> usize {
        self.unk_index
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.word_to_index.get(word).copied()
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.index_to_word.get(index).and_then(|w| w.as_deref())
    }

    pub fn tokenize(&self, caption: &str) -> TokenSequence {
        let mut tokens = vec![START];
        tokens.extend(
            split_words(caption)
                .iter()
                .map(|w| self.index_of(w).unwrap_or(self.unk_index)),
        );
        tokens.push(END);
        TokenSequence(tokens)
    }

    /// Renders interior tokens joined by single spaces. A leading `<start>`
    /// and trailing `<end>` are dropped.
    pub fn detokenize(&self, seq: &[usize]) -> Result<String> {
        let mut body = seq;
        if body.first() == Some(&START) {
            body = &body[1..];
        }
        if body.last() == Some(&END) {
            body = &body[..body.len() - 1];
        }
        let words = body
            .iter()
            .map(|&t| {
                self.word(t)
                    .ok_or_else(|| Error::InvalidArgument(format!("token {t} is not in the vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// Order-independent 64-bit FNV-1a digest of the (index, word) table;
    /// checkpoints record it to catch vocabulary mix-ups.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (i, w) in self.index_to_word.iter().enumerate() {
            let Some(w) = w else { continue };
            for b in (i as u64).to_le_bytes().iter().chain(w.as_bytes()).chain(b"\n") {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("threshold\t{}\n", self.threshold);
        for (i, w) in self.index_to_word.iter().enumerate() {
            if let Some(w) = w {
                let _ = writeln!(out, "{i}\t{w}");
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let threshold = match lines.next() {
            Some((_, header)) => header
                .strip_prefix("threshold\t")
                .and_then(|v| v.trim().parse::<usize>().ok())
                .ok_or_else(|| err(1, format!("expected `threshold\\t<n>` header, got {header:?}")))?,
            None => return Err(err(1, "empty vocabulary file".into())),
        };
        let mut entries = Vec::new();
        let mut unk = None;
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (idx, word) = line
                .split_once('\t')
                .ok_or_else(|| err(n + 1, "expected `index\\tword`".into()))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| err(n + 1, format!("bad index {idx:?}")))?;
            match word {
                START_WORD if idx == START => {}
                END_WORD if idx == END => {}
                START_WORD | END_WORD => {
                    return Err(err(n + 1, format!("{word} must have index {}", if word == START_WORD { START } else { END })))
                }
                UNK_WORD => unk = Some(idx),
                _ => entries.push((word.to_string(), idx)),
            }
        }
        let unk = unk.ok_or_else(|| err(0, "missing <unk> entry".into()))?;
        let mut vocab = Self::from_entries(&entries, unk).map_err(|e| err(0, e.to_string()))?;
        vocab.threshold = threshold;
        Ok(vocab)
    }
}
