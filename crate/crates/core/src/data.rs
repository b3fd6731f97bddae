//! Labeled and parallel JSONL datasets.
//!
//! Labeled lines: `{"text": str, "label": str, "lang": str?}`.
//! Parallel lines: `{"src": str, "tgt": str}`, optionally preceded by a
//! header line `{"src_lang": str, "tgt_lang": str}`.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::normalize;

pub const UNKNOWN_LANG: &str = "und";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default = "unknown_lang")]
    pub lang: String,
}

fn unknown_lang() -> String {
    UNKNOWN_LANG.to_string()
}

/// Utterances with dense integer labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledDataset {
    pub utterances: Vec<Utterance>,
    pub labels: Vec<usize>,
    /// `label_names[id]` is the original label string.
    pub label_names: Vec<String>,
}

impl LabeledDataset {
    /// Builds a dataset; labels are remapped densely in sorted string order.
    pub fn from_utterances(utterances: Vec<Utterance>) -> Result<Self> {
        let mut names = BTreeSet::new();
        for (i, u) in utterances.iter().enumerate() {
            match &u.label {
                Some(l) => {
                    names.insert(l.clone());
                }
                None => return Err(Error::InvalidData(format!("utterance {i} has no label"))),
            }
        }
        let label_names: Vec<String> = names.into_iter().collect();
        let labels = utterances
            .iter()
            .map(|u| {
                let l = u.label.as_deref().expect("checked above");
                label_names.binary_search_by(|n| n.as_str().cmp(l)).expect("present")
            })
            .collect();
        Ok(LabeledDataset {
            utterances,
            labels,
            label_names,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.utterances.iter().map(|u| u.text.as_str()).collect()
    }

    /// Examples per dense class id.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes()];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        LabeledDataset::from_utterances(idx.iter().map(|&i| self.utterances[i].clone()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub src: String,
    pub tgt: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<ParallelPair>,
    pub source_lang: String,
    pub target_lang: String,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<ParallelPair>, source_lang: &str, target_lang: &str) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidData("parallel corpus is empty".into()));
        }
        if let Some(i) = pairs
            .iter()
            .position(|p| normalize(&p.src).trim().is_empty() || normalize(&p.tgt).trim().is_empty())
        {
            return Err(Error::InvalidData(format!("parallel pair {i} has an empty side")));
        }
        Ok(ParallelCorpus {
            pairs,
            source_lang: source_lang.into(),
            target_lang: target_lang.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Deterministic split: the last `ceil(10%)` pairs are held out (none
    /// when the corpus has a single pair).
    pub fn split_heldout(&self) -> (&[ParallelPair], &[ParallelPair]) {
        let n = self.pairs.len();
        let hold = if n < 2 { 0 } else { n.div_ceil(10) };
        self.pairs.split_at(n - hold)
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct LabeledLine {
    text: String,
    label: String,
    lang: Option<String>,
}

pub fn load_labeled_jsonl(path: &Path) -> Result<LabeledDataset> {
    let lines = read_lines(path)?;
    if lines.is_empty() {
        return Err(parse_err(path, 0, "file contains no records"));
    }
    let mut utterances = Vec::with_capacity(lines.len());
    for (no, line) in lines {
        let rec: LabeledLine = serde_json::from_str(&line).map_err(|e| parse_err(path, no, e.to_string()))?;
        if normalize(&rec.text).trim().is_empty() {
            return Err(parse_err(path, no, "text is empty"));
        }
        utterances.push(Utterance {
            text: rec.text,
            label: Some(rec.label),
            lang: rec.lang.unwrap_or_else(unknown_lang),
        });
    }
    LabeledDataset::from_utterances(utterances)
}

#[derive(Deserialize)]
struct UtteranceLine {
    text: String,
    label: Option<String>,
    lang: Option<String>,
}

/// Like [`load_labeled_jsonl`] but labels are optional.
pub fn load_utterances_jsonl(path: &Path) -> Result<Vec<Utterance>> {
    let lines = read_lines(path)?;
    if lines.is_empty() {
        return Err(parse_err(path, 0, "file contains no records"));
    }
    lines
        .into_iter()
        .map(|(no, line)| {
            let rec: UtteranceLine = serde_json::from_str(&line).map_err(|e| parse_err(path, no, e.to_string()))?;
            if normalize(&rec.text).trim().is_empty() {
                return Err(parse_err(path, no, "text is empty"));
            }
            Ok(Utterance {
                text: rec.text,
                label: rec.label,
                lang: rec.lang.unwrap_or_else(unknown_lang),
            })
        })
        .collect()
}

pub fn write_labeled_jsonl<W: Write>(mut w: W, data: &[Utterance]) -> std::io::Result<()> {
    for u in data {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct ParallelHeader {
    src_lang: String,
    tgt_lang: String,
}

/// Loads pairs in file order. Language tags come from the optional header
/// line, else from the supplied defaults.
pub fn load_parallel_jsonl(path: &Path, default_langs: (&str, &str)) -> Result<ParallelCorpus> {
    let lines = read_lines(path)?;
    let mut langs = (default_langs.0.to_string(), default_langs.1.to_string());
    let mut pairs = Vec::with_capacity(lines.len());
    for (k, (no, line)) in lines.iter().enumerate() {
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| parse_err(path, *no, e.to_string()))?;
        if k == 0 && value.get("src").is_none() && value.get("src_lang").is_some() {
            let h: ParallelHeader = serde_json::from_value(value).map_err(|e| parse_err(path, *no, e.to_string()))?;
            langs = (h.src_lang, h.tgt_lang);
            continue;
        }
        let pair: ParallelPair = serde_json::from_value(value).map_err(|e| parse_err(path, *no, e.to_string()))?;
        if normalize(&pair.src).trim().is_empty() || normalize(&pair.tgt).trim().is_empty() {
            return Err(parse_err(path, *no, "empty side in parallel pair"));
        }
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(parse_err(path, 0, "parallel corpus is empty"));
    }
    ParallelCorpus::new(pairs, &langs.0, &langs.1)
}

pub fn write_parallel_jsonl<W: Write>(mut w: W, corpus: &ParallelCorpus) -> std::io::Result<()> {
    serde_json::to_writer(
        &mut w,
        &serde_json::json!({"src_lang": corpus.source_lang, "tgt_lang": corpus.target_lang}),
    )?;
    w.write_all(b"\n")?;
    for p in &corpus.pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
