//! Frequency vocabulary, WordPiece tokenization, sentence segmentation and
//! assembly of the fixed-length `[CLS] ... [SEP]` input sequence.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";

pub const CLS_ID: u32 = 0;
pub const SEP_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

const SPECIALS: [&str; 4] = [CLS, SEP, PAD, UNK];

/// Marks a piece that continues a word rather than starting one.
pub const CONTINUATION_PREFIX: &str = "##";

pub const DEFAULT_MAX_WORDS: usize = 4000;

const VOCAB_HEADER: &str = "# aes-vocab v1";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("max content length must be at least 1, got {0}")]
    InvalidLength(usize),
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Piece inventory with dense ids; the four specials occupy ids 0..=3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pieces: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    max_words: usize,
    word_count: usize,
    corpus_hash: String,
}

impl Vocabulary {
    fn from_parts(
        pieces: Vec<String>,
        max_words: usize,
        word_count: usize,
        corpus_hash: String,
    ) -> Result<Self, TokenizerError> {
        if pieces.len() < SPECIALS.len() || pieces[..SPECIALS.len()] != SPECIALS {
            return Err(TokenizerError::Format(
                "specials must occupy the first four ids in order [CLS] [SEP] [PAD] [UNK]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(TokenizerError::Format(format!("duplicate piece {p:?}")));
            }
        }
        Ok(Self {
            pieces,
            index,
            max_words,
            word_count,
            corpus_hash,
        })
    }

    /// Rebuilds the lookup index after deserialization.
    pub(crate) fn reindex(&mut self) {
        self.index = self
            .pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn max_words(&self) -> usize {
        self.max_words
    }

    /// Number of whole-word (non-special, non-continuation) pieces.
    pub fn word_count(&self) -> usize {
        self.word_count
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.index.contains_key(piece)
    }

    /// Writes the vocabulary file: one header comment line, then one piece per
    /// line in id order.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "{VOCAB_HEADER} max_words={} words={} corpus_sha256={}",
            self.max_words, self.word_count, self.corpus_hash
        )?;
        for p in &self.pieces {
            writeln!(w, "{p}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, TokenizerError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| TokenizerError::Format("empty file".into()))??;
        let rest = header
            .strip_prefix(VOCAB_HEADER)
            .ok_or_else(|| TokenizerError::Format(format!("bad header line {header:?}")))?;
        let mut max_words = None;
        let mut words = None;
        let mut hash = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("max_words", v)) => max_words = v.parse().ok(),
                Some(("words", v)) => words = v.parse().ok(),
                Some(("corpus_sha256", v)) => hash = Some(v.to_string()),
                _ => {}
            }
        }
        let (Some(max_words), Some(words), Some(hash)) = (max_words, words, hash) else {
            return Err(TokenizerError::Format(format!(
                "header missing max_words/words/corpus_sha256: {header:?}"
            )));
        };
        let pieces = lines.collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(pieces, max_words, words, hash)
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// Lowercases, applies NFC, splits on whitespace and isolates punctuation.
pub fn basic_words(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect::<String>().to_lowercase();
    let mut words = Vec::new();
    let mut current = String::new();
    for c in normalized.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if is_punctuation(c) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Keeps the `max_words` most frequent words (count desc, then lexicographic)
/// and derives `##suffix` pieces from corpus words that extend a kept word.
/// Whole words plus suffix pieces never exceed 1.5 x `max_words`.
pub fn build_vocabulary<S: AsRef<str>>(
    texts: &[S],
    max_words: usize,
    min_frequency: usize,
) -> Result<Vocabulary, TokenizerError> {
    if texts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut hasher = Sha256::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in texts {
        let t = t.as_ref();
        hasher.update((t.len() as u64).to_le_bytes());
        hasher.update(t.as_bytes());
        for w in basic_words(t) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let corpus_hash = hex::encode(hasher.finalize());

    let min_frequency = min_frequency.max(1);
    let mut ranked: Vec<(&String, usize)> = counts
        .iter()
        .filter(|(w, c)| **c >= min_frequency && !w.starts_with(CONTINUATION_PREFIX))
        .map(|(w, c)| (w, *c))
        .filter(|(w, _)| !SPECIALS.contains(&w.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_words);
    let words: Vec<String> = ranked.iter().map(|(w, _)| (*w).clone()).collect();
    let word_set: HashSet<&str> = words.iter().map(String::as_str).collect();

    let mut suffix_counts: HashMap<String, usize> = HashMap::new();
    for (w, &c) in &counts {
        if word_set.contains(w.as_str()) {
            continue;
        }
        let boundaries: Vec<usize> = w.char_indices().map(|(i, _)| i).skip(1).collect();
        if let Some(&cut) = boundaries
            .iter()
            .rev()
            .find(|&&cut| word_set.contains(&w[..cut]))
        {
            let piece = format!("{CONTINUATION_PREFIX}{}", &w[cut..]);
            *suffix_counts.entry(piece).or_default() += c;
        }
    }
    let cap = (max_words * 3 / 2).saturating_sub(words.len());
    let mut suffixes: Vec<(String, usize)> = suffix_counts
        .into_iter()
        .filter(|(_, c)| *c >= min_frequency)
        .collect();
    suffixes.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    suffixes.truncate(cap);

    let word_count = words.len();
    let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    pieces.extend(words);
    pieces.extend(suffixes.into_iter().map(|(p, _)| p));
    Vocabulary::from_parts(pieces, max_words, word_count, corpus_hash)
}

/// Greedy longest-match-first WordPiece split of one basic word. Returns
/// `[UNK]` for the whole word when any remainder has no matching piece.
pub fn wordpiece(word: &str, vocab: &Vocabulary) -> Vec<String> {
    let chars: Vec<(usize, char)> = word.char_indices().collect();
    let mut bounds: Vec<usize> = chars.iter().map(|(i, _)| *i).collect();
    bounds.push(word.len());
    let mut out = Vec::new();
    let mut start = 0usize;
    while start < chars.len() {
        let mut found = None;
        for end in (start + 1..=chars.len()).rev() {
            let sub = &word[bounds[start]..bounds[end]];
            let candidate = if start == 0 {
                sub.to_string()
            } else {
                format!("{CONTINUATION_PREFIX}{sub}")
            };
            if vocab.contains(&candidate) {
                found = Some((candidate, end));
                break;
            }
        }
        match found {
            Some((piece, end)) => {
                out.push(piece);
                start = end;
            }
            None => return vec![UNK.to_string()],
        }
    }
    out
}

/// Tokenizes free text into vocabulary pieces.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<String> {
    basic_words(text)
        .iter()
        .flat_map(|w| wordpiece(w, vocab))
        .collect()
}

pub fn tokenize_ids(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    tokenize(text, vocab)
        .iter()
        .map(|p| vocab.id_of(p).unwrap_or(UNK_ID))
        .collect()
}

/// Splits after `.`, `!` or `?` when followed by whitespace or end of text.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = match iter.peek() {
                None => true,
                Some((_, next)) => next.is_whitespace(),
            };
            if at_boundary {
                let end = i + c.len_utf8();
                out.push(&text[start..end]);
                start = end;
            }
        }
    }
    out.push(&text[start..]);
    out.into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// The assembled model input for one essay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    /// True for real tokens, false exactly at `[PAD]`.
    pub pad_mask: Vec<bool>,
    /// Content length n before truncation, inter-sentence `[SEP]`s included.
    pub source_length: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Builds `[CLS] content [PAD]* [SEP]` of total length `max_len + 2`.
///
/// Content is the sentences joined by `[SEP]`. Longer content keeps its first
/// `max_len` tokens; shorter content is padded before the final `[SEP]`.
/// Segment ids alternate per sentence (index mod 2); a `[SEP]` carries the
/// segment of the sentence it closes, while `[CLS]` and `[PAD]` use 0.
pub fn assemble_sequence(
    sentences: &[Vec<u32>],
    max_len: usize,
) -> Result<TokenSequence, TokenizerError> {
    if max_len < 1 {
        return Err(TokenizerError::InvalidLength(max_len));
    }
    let mut content: Vec<(u32, u32)> = Vec::new();
    for (sentence_idx, sentence) in sentences.iter().filter(|s| !s.is_empty()).enumerate() {
        let sentence_idx = sentence_idx as u32;
        if sentence_idx > 0 {
            content.push((SEP_ID, (sentence_idx - 1) % 2));
        }
        content.extend(sentence.iter().map(|&t| (t, sentence_idx % 2)));
    }
    let n = content.len();
    content.truncate(max_len);
    let final_segment = content.last().map(|&(_, s)| s).unwrap_or(0);

    let total = max_len + 2;
    let mut token_ids = Vec::with_capacity(total);
    let mut segment_ids = Vec::with_capacity(total);
    token_ids.push(CLS_ID);
    segment_ids.push(0);
    for &(t, s) in &content {
        token_ids.push(t);
        segment_ids.push(s);
    }
    for _ in content.len()..max_len {
        token_ids.push(PAD_ID);
        segment_ids.push(0);
    }
    token_ids.push(SEP_ID);
    segment_ids.push(final_segment);

    let pad_mask = (0..total)
        .map(|i| i <= content.len() || i == total - 1)
        .collect();
    Ok(TokenSequence {
        token_ids,
        segment_ids,
        position_ids: (0..total as u32).collect(),
        pad_mask,
        source_length: n,
    })
}

/// Sentence split, tokenize and assemble in one step.
pub fn encode_essay(
    text: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence, TokenizerError> {
    let sentences: Vec<Vec<u32>> = split_sentences(text)
        .iter()
        .map(|s| tokenize_ids(s, vocab))
        .collect();
    assemble_sequence(&sentences, max_len)
}
