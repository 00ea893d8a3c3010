//! Flat JSON config file. Every key mirrors a command-line flag of the same
//! name (with `-` for `_`); flags win.

use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub corpus_dir: Option<PathBuf>,
    pub render_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub degree_step: Option<u32>,
    pub degree_steps: Option<Vec<u32>>,
    pub resolution: Option<usize>,
    pub preset: Option<String>,
    pub classes: Option<usize>,
    pub class_counts: Option<Vec<usize>>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub val_frac: Option<f64>,
    pub lrn: Option<bool>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub addr: Option<String>,
    pub body_limit: Option<usize>,
    pub k: Option<usize>,
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
