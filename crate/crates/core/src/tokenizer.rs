//! Frequency-induced subword vocabulary and greedy longest-match tokenization.
//!
//! Word-initial pieces are stored as-is; pieces that continue a word carry
//! the `##` prefix.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const CONTINUATION: &str = "##";
pub const DEFAULT_MAX_LEN: usize = 32;

/// Longest multi-character piece considered during induction.
const MAX_PIECE_CHARS: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Lowercase + NFC.
pub fn normalize(text: &str) -> String {
    text.nfc().collect::<String>().to_lowercase()
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let specials = [PAD, UNK, CLS, SEP];
        if tokens.len() < 4 || tokens.iter().zip(specials).any(|(t, s)| t != s) {
            return Err(Error::InvalidData(
                "vocabulary must start with [PAD], [UNK], [CLS], [SEP]".into(),
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidData(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    /// One token per line, line number = id.
    pub fn write_lines<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_lines<R: BufRead>(r: R) -> Result<Self> {
        let tokens = r
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io("<vocab>", e))?;
        Vocab::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_lines(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Vocab::read_lines(std::io::BufReader::new(f))
    }
}

/// Induces a vocabulary of at most `max_vocab` entries: the four specials,
/// every character seen (word-initial and `##`-continuation forms), then the
/// most frequent multi-character pieces. Ties break lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_vocab: usize) -> Result<Vocab> {
    if max_vocab < 8 {
        return Err(Error::InvalidConfig(format!("max_vocab must be >= 8, got {max_vocab}")));
    }
    let mut words: BTreeMap<String, u64> = BTreeMap::new();
    for text in corpus {
        for w in normalize(text.as_ref()).split_whitespace() {
            *words.entry(w.to_string()).or_default() += 1;
        }
    }
    if words.is_empty() {
        return Err(Error::InvalidData(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }

    let mut chars: HashMap<String, u64> = HashMap::new();
    let mut pieces: HashMap<String, u64> = HashMap::new();
    for (word, &count) in &words {
        let cs: Vec<char> = word.chars().collect();
        for start in 0..cs.len() {
            let prefix = if start == 0 { "" } else { CONTINUATION };
            for end in start + 1..=cs.len().min(start + MAX_PIECE_CHARS) {
                let piece: String = prefix.chars().chain(cs[start..end].iter().copied()).collect();
                let bucket = if end - start == 1 { &mut chars } else { &mut pieces };
                *bucket.entry(piece).or_default() += count;
            }
        }
    }

    let by_freq = |m: HashMap<String, u64>| {
        let mut v: Vec<(String, u64)> = m.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v.into_iter().map(|(p, _)| p)
    };

    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
    tokens.extend(by_freq(chars).chain(by_freq(pieces)).take(max_vocab - 4));
    Vocab::from_tokens(tokens)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    /// Exactly `max_len` ids, padded with [PAD].
    pub ids: Vec<u32>,
    /// Number of non-pad positions.
    pub len: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn active(&self) -> &[u32] {
        &self.ids[..self.len]
    }
}

/// Greedy longest-match pieces for one normalized word.
fn segment_word(word: &str, vocab: &Vocab, out: &mut Vec<u32>) {
    let cs: Vec<char> = word.chars().collect();
    let mut start = 0;
    while start < cs.len() {
        let prefix = if start == 0 { "" } else { CONTINUATION };
        let mut matched = None;
        for end in (start + 1..=cs.len()).rev() {
            let piece: String = prefix.chars().chain(cs[start..end].iter().copied()).collect();
            if let Some(id) = vocab.id(&piece) {
                matched = Some((id, end));
                break;
            }
        }
        match matched {
            Some((id, end)) => {
                out.push(id);
                start = end;
            }
            None => {
                out.push(UNK_ID);
                start += 1;
            }
        }
    }
}

/// `[CLS] pieces… [SEP]` padded to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    assert!(max_len >= 3, "max_len must be at least 3");
    let mut ids = vec![CLS_ID];
    for w in normalize(text).split_whitespace() {
        segment_word(w, vocab, &mut ids);
        if ids.len() >= max_len - 1 {
            break;
        }
    }
    ids.truncate(max_len - 1);
    ids.push(SEP_ID);
    let len = ids.len();
    ids.resize(max_len, PAD_ID);
    TokenSequence { ids, len }
}

pub fn tokenize_batch<S: AsRef<str>>(texts: &[S], vocab: &Vocab, max_len: usize) -> Vec<TokenSequence> {
    texts.iter().map(|t| tokenize(t.as_ref(), vocab, max_len)).collect()
}

/// Inverse of [`tokenize`] for fully covered text, up to whitespace.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocab) -> String {
    let mut out = String::new();
    for &id in seq.active() {
        if matches!(id, PAD_ID | CLS_ID | SEP_ID) {
            continue;
        }
        let tok = vocab.token(id).unwrap_or(UNK);
        match tok.strip_prefix(CONTINUATION) {
            Some(rest) if id != UNK_ID => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
    }
    out
}
