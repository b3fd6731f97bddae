//! Flat TOML config files. Every key is optional; flags override file values,
//! which override built-in defaults.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::{CliError, CliResult};

/// Reads `path` if given, else returns the all-`None` file.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
}

pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataFile {
    pub n_intents: Option<usize>,
    pub templates_per_intent: Option<usize>,
    pub vocab_size_per_language: Option<usize>,
    pub samples_per_intent: Option<usize>,
    pub permute_word_order: Option<bool>,
    pub seed: Option<u64>,
    pub keywords_per_intent: Option<usize>,
    pub keyword_confusion: Option<f64>,
    pub min_template_len: Option<usize>,
    pub max_template_len: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainFile {
    pub lambda: Option<f64>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub vocab_size: Option<usize>,
    pub max_len: Option<usize>,
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillFile {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub student_layers: Option<usize>,
    pub student_d_model: Option<usize>,
    pub student_heads: Option<usize>,
    pub student_d_ff: Option<usize>,
    pub source_lang: Option<String>,
    pub target_lang: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    pub n_shot: Option<usize>,
    pub episodes: Option<usize>,
    pub seed: Option<u64>,
    pub classifier: Option<String>,
    pub classifier_epochs: Option<usize>,
    pub classifier_learning_rate: Option<f64>,
    pub l2: Option<f64>,
}
