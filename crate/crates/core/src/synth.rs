//! Synthetic bilingual intent corpora.
//!
//! Language A sentences come from per-intent template grammars over an
//! invented vocabulary. Language B is the word-by-word image of A under a
//! seeded bijective lexicon, optionally with a fixed word-order permutation
//! per template, so every A sentence has an exact B translation with the
//! same intent.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, ParallelCorpus, ParallelPair, Utterance};
use crate::error::{Error, Result};
use crate::seed;

pub const LANG_A: &str = "a";
pub const LANG_B: &str = "b";

const A_ONSETS: &[&str] = &["b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v"];
const A_VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const B_ONSETS: &[&str] = &["c", "f", "h", "j", "q", "w", "x", "y", "z", "ch", "ll", "ñ"];
const B_VOWELS: &[&str] = &["a", "e", "i", "o", "u", "á", "é", "ó"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_intents: usize,
    pub templates_per_intent: usize,
    pub vocab_size_per_language: usize,
    pub samples_per_intent: usize,
    pub permute_word_order: bool,
    pub seed: u64,
    /// Content words owned by each intent.
    pub keywords_per_intent: usize,
    /// Probability that a content slot draws from another intent's words.
    pub keyword_confusion: f64,
    pub min_template_len: usize,
    pub max_template_len: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_intents: 6,
            templates_per_intent: 4,
            vocab_size_per_language: 120,
            samples_per_intent: 40,
            permute_word_order: true,
            seed: 0,
            keywords_per_intent: 6,
            keyword_confusion: 0.3,
            min_template_len: 4,
            max_template_len: 7,
        }
    }
}

impl SyntheticConfig {
    fn filler_count(&self) -> usize {
        self.vocab_size_per_language
            .saturating_sub(self.n_intents * self.keywords_per_intent)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("templates_per_intent", self.templates_per_intent),
            ("vocab_size_per_language", self.vocab_size_per_language),
            ("samples_per_intent", self.samples_per_intent),
            ("keywords_per_intent", self.keywords_per_intent),
            ("min_template_len", self.min_template_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.n_intents < 2 {
            return Err(Error::InvalidConfig("n_intents must be >= 2".into()));
        }
        if self.min_template_len < 2 || self.max_template_len < self.min_template_len {
            return Err(Error::InvalidConfig(
                "template lengths need 2 <= min_template_len <= max_template_len".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.keyword_confusion) {
            return Err(Error::InvalidConfig("keyword_confusion must lie in [0, 1]".into()));
        }
        if self.filler_count() < 4 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size_per_language {} leaves fewer than 4 filler words after {} intent keywords",
                self.vocab_size_per_language,
                self.n_intents * self.keywords_per_intent
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    /// A fixed language-A word index.
    Word(usize),
    /// A content word drawn from the intent's keywords at sample time.
    Keyword,
    /// A filler word drawn at sample time.
    Filler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub intent: usize,
    pub slots: Vec<Slot>,
    /// Position `j` of the B sentence holds word `order[j]` of the A sentence.
    pub order: Vec<usize>,
}

/// Index-aligned word lists: `b_words[i]` translates `a_words[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub a_words: Vec<String>,
    pub b_words: Vec<String>,
}

impl Lexicon {
    pub fn to_b(&self, a_word: &str) -> Option<&str> {
        self.a_words
            .iter()
            .position(|w| w == a_word)
            .map(|i| self.b_words[i].as_str())
    }

    pub fn to_a(&self, b_word: &str) -> Option<&str> {
        self.b_words
            .iter()
            .position(|w| w == b_word)
            .map(|i| self.a_words[i].as_str())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub lang_a: LabeledDataset,
    pub lang_b: LabeledDataset,
    pub parallel: ParallelCorpus,
    pub lexicon: Lexicon,
    pub templates: Vec<Template>,
    /// Template index of each sample, aligned with all three datasets.
    pub template_of: Vec<usize>,
}

impl SyntheticCorpus {
    /// Recovers the A sentence from its B image.
    pub fn back_translate(&self, b_sentence: &str, template: usize) -> Option<String> {
        let words: Vec<&str> = b_sentence.split_whitespace().collect();
        let order = &self.templates.get(template)?.order;
        if order.len() != words.len() {
            return None;
        }
        let mut a = vec![""; words.len()];
        for (j, &src) in order.iter().enumerate() {
            a[src] = self.lexicon.to_a(words[j])?;
        }
        Some(a.join(" "))
    }
}

fn invent_words<R: Rng>(n: usize, onsets: &[&str], vowels: &[&str], rng: &mut R) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 100 * n + 1000 {
            return Err(Error::InvalidConfig(format!("cannot invent {n} distinct words")));
        }
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    onsets[rng.random_range(0..onsets.len())],
                    vowels[rng.random_range(0..vowels.len())]
                )
            })
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    Ok(out)
}

fn random_order<R: Rng>(len: usize, permute: bool, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if permute && len > 1 {
        while order.iter().enumerate().all(|(i, &v)| i == v) {
            order.shuffle(rng);
        }
    }
    order
}

pub fn generate_synthetic_corpus(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let v = config.vocab_size_per_language;
    let mut rng = seed::stream(config.seed, "synthetic-lexicon");
    let a_words = invent_words(v, A_ONSETS, A_VOWELS, &mut rng)?;
    let mut b_words = invent_words(v, B_ONSETS, B_VOWELS, &mut rng)?;
    b_words.shuffle(&mut rng);
    let lexicon = Lexicon { a_words, b_words };

    let kw = config.keywords_per_intent;
    let keyword_pool = |intent: usize| intent * kw..(intent + 1) * kw;
    let fillers: Vec<usize> = (config.n_intents * kw..v).collect();

    let mut rng = seed::stream(config.seed, "synthetic-templates");
    let mut templates = Vec::new();
    let mut seen: HashSet<Vec<Slot>> = HashSet::new();
    for intent in 0..config.n_intents {
        let mut made = 0;
        let mut attempts = 0;
        while made < config.templates_per_intent {
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::InvalidConfig(format!(
                    "vocabulary too small for {} distinct templates per intent",
                    config.templates_per_intent
                )));
            }
            let len = rng.random_range(config.min_template_len..=config.max_template_len);
            let n_kw = if len >= 4 { 2 } else { 1 };
            let mut slots: Vec<Slot> = (0..len)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        Slot::Word(fillers[rng.random_range(0..fillers.len())])
                    } else {
                        Slot::Filler
                    }
                })
                .collect();
            let mut pos: Vec<usize> = (0..len).collect();
            pos.shuffle(&mut rng);
            for &p in &pos[..n_kw] {
                slots[p] = Slot::Keyword;
            }
            // Templates are distinct across all intents.
            if !seen.insert(slots.clone()) {
                continue;
            }
            let order = random_order(len, config.permute_word_order, &mut rng);
            templates.push(Template { intent, slots, order });
            made += 1;
        }
    }

    let mut rng = seed::stream(config.seed, "synthetic-samples");
    let mut samples: Vec<(usize, Vec<usize>)> = Vec::new();
    for intent in 0..config.n_intents {
        let own: Vec<usize> = (0..templates.len())
            .filter(|&t| templates[t].intent == intent)
            .collect();
        for _ in 0..config.samples_per_intent {
            let t = own[rng.random_range(0..own.len())];
            let words: Vec<usize> = templates[t]
                .slots
                .iter()
                .map(|s| match s {
                    Slot::Word(w) => *w,
                    Slot::Filler => fillers[rng.random_range(0..fillers.len())],
                    Slot::Keyword => {
                        let src = if rng.random_bool(config.keyword_confusion) {
                            rng.random_range(0..config.n_intents)
                        } else {
                            intent
                        };
                        rng.random_range(keyword_pool(src))
                    }
                })
                .collect();
            samples.push((t, words));
        }
    }
    samples.shuffle(&mut rng);

    let mut a_utts = Vec::with_capacity(samples.len());
    let mut b_utts = Vec::with_capacity(samples.len());
    let mut pairs = Vec::with_capacity(samples.len());
    let mut template_of = Vec::with_capacity(samples.len());
    let label_name = |i: usize| format!("intent_{i:02}");
    for (t, words) in &samples {
        let tpl = &templates[*t];
        let a_text = words
            .iter()
            .map(|&w| lexicon.a_words[w].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let b_text = tpl
            .order
            .iter()
            .map(|&k| lexicon.b_words[words[k]].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        a_utts.push(Utterance {
            text: a_text.clone(),
            label: Some(label_name(tpl.intent)),
            lang: LANG_A.into(),
        });
        b_utts.push(Utterance {
            text: b_text.clone(),
            label: Some(label_name(tpl.intent)),
            lang: LANG_B.into(),
        });
        pairs.push(ParallelPair {
            src: a_text,
            tgt: b_text,
        });
        template_of.push(*t);
    }

    Ok(SyntheticCorpus {
        lang_a: LabeledDataset::from_utterances(a_utts)?,
        lang_b: LabeledDataset::from_utterances(b_utts)?,
        parallel: ParallelCorpus::new(pairs, LANG_A, LANG_B)?,
        lexicon,
        templates,
        template_of,
    })
}
