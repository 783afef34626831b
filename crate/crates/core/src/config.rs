//! Experiment configuration, read from a single TOML file.
//!
//! Defaults:
//!
//! | field                        | default | source                                   |
//! |------------------------------|---------|------------------------------------------|
//! | `candidates` (k)             | 4       | four responses scored per prompt         |
//! | `batch_size`                 | 16      | fixed training batch size                |
//! | `ema.rank`                   | 64      | fixed compression rank                   |
//! | `ema.power_iters`            | 3       | power-iteration count                    |
//! | `filter.retain_fraction` (ρ) | 0.5     | top 50% per language                     |
//! | `dpo.alpha`                  | 0.01    | middle of the {0.02, 0.01, 0.005} grid   |
//! | `ema.gamma`                  | 0.9     | artifact choice                          |
//! | `dpo.beta`                   | 1.0     | artifact choice                          |
//! | `learning_rate`              | 0.01    | artifact choice                          |
//! | `scenario.*`                 | below   | artifact choice                          |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CongradError, Result};
use crate::filtering::FilterConfig;
use crate::grad_store::EmaConfig;
use crate::preference::DpoConfig;

/// Shape of the synthetic multilingual task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Fraction of the vocabulary each language shares with the others.
    /// 0 gives disjoint token regions; 1 puts every language on the whole
    /// vocabulary with different preferred transitions.
    pub overlap: f64,
    /// Std-dev of the judge's rounding noise before clamping to {-1, 0, 1}.
    pub judge_noise_std: f64,
    /// Strength of the seed policy's prior toward target transitions.
    pub init_warmth: f64,
    /// Std-dev of random logit noise in the seed policy.
    pub init_std: f64,
    /// Held-out evaluation pairs per prompt.
    pub heldout_per_prompt: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            overlap: 0.5,
            judge_noise_std: 0.6,
            init_warmth: 1.0,
            init_std: 0.1,
            heldout_per_prompt: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub languages: Vec<String>,
    pub prompts_per_language: usize,
    pub rounds: u32,
    pub candidates: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub min_len: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scenario: ScenarioConfig,
    pub ema: EmaConfig,
    pub dpo: DpoConfig,
    pub filter: FilterConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            languages: ["ar", "de", "en", "es", "fr", "ja", "ko", "ru", "sw", "zh"]
                .map(String::from)
                .to_vec(),
            prompts_per_language: 100,
            rounds: 3,
            candidates: 4,
            vocab_size: 16,
            max_len: 8,
            min_len: 4,
            learning_rate: 0.01,
            batch_size: 16,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            scenario: ScenarioConfig::default(),
            ema: EmaConfig::default(),
            dpo: DpoConfig::default(),
            filter: FilterConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let v = |f: &str, m: String| CongradError::validation(f, m);
        if self.languages.is_empty() {
            return Err(v("languages", "at least one language is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.languages {
            if l.is_empty() || !l.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(v("languages", format!("`{l}` is not a valid identifier")));
            }
            if !seen.insert(l) {
                return Err(v("languages", format!("`{l}` is listed twice")));
            }
        }
        if self.prompts_per_language == 0 {
            return Err(v("prompts_per_language", "must be at least 1".into()));
        }
        if self.rounds == 0 {
            return Err(v("rounds", "must be at least 1".into()));
        }
        if self.candidates < 2 {
            return Err(v("candidates", "must be at least 2".into()));
        }
        if self.vocab_size < 2 {
            return Err(v("vocab_size", "must be at least 2".into()));
        }
        if self.max_len == 0 {
            return Err(v("max_len", "must be at least 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(v("min_len", "must lie in [1, max_len]".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(v("learning_rate", "must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(v("batch_size", "must be at least 1".into()));
        }
        let s = &self.scenario;
        if !(0.0..=1.0).contains(&s.overlap) {
            return Err(v("scenario.overlap", "must lie in [0, 1]".into()));
        }
        if !(s.judge_noise_std >= 0.0 && s.judge_noise_std.is_finite()) {
            return Err(v("scenario.judge_noise_std", "must be non-negative".into()));
        }
        if !(s.init_warmth.is_finite() && s.init_std >= 0.0 && s.init_std.is_finite()) {
            return Err(v(
                "scenario",
                "init_warmth must be finite and init_std non-negative".into(),
            ));
        }
        if s.heldout_per_prompt == 0 {
            return Err(v("scenario.heldout_per_prompt", "must be at least 1".into()));
        }
        // TOML integers are signed 64-bit
        for (field, seed) in [
            ("seed", self.seed),
            ("ema.seed", self.ema.seed),
            ("filter.seed", self.filter.seed),
        ] {
            if i64::try_from(seed).is_err() {
                return Err(v(field, format!("must not exceed {}", i64::MAX)));
            }
        }
        self.ema.validate()?;
        self.dpo.validate()?;
        self.filter.validate()?;
        Ok(())
    }

    pub fn num_prompts(&self) -> usize {
        self.languages.len() * self.prompts_per_language
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| CongradError::validation("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CongradError::io(path, e))?;
        Self::from_toml_str(&text)
    }
}
