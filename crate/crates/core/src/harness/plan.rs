use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::serde_util;

/// One row group of the results table: a bottleneck setting run at several
/// seeds. Unset fields fall back to the plan's `[model]` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub name: String,
    #[serde(with = "serde_util")]
    pub codebook_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub seeds: Vec<u64>,
}

impl Condition {
    /// The model configuration for one seed of this condition.
    pub fn model_config(&self, base: &ModelConfig, seed: u64) -> ModelConfig {
        ModelConfig {
            codebook_size: self.codebook_size,
            encoder_depth: self.encoder_depth.unwrap_or(base.encoder_depth),
            beta: self.beta.unwrap_or(base.beta),
            seed,
            ..base.clone()
        }
    }
}

/// F0 conditions evaluated on every corpus of a sweep.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct F0Plan {
    pub shift_to_common_target: bool,
    pub awgn_snr_db: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Corpus settings; the seed is replaced by each run's seed, so
    /// conditions sharing a seed share a corpus.
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub f0: F0Plan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Recorded verbatim in the provenance file; never read from the clock.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    #[serde(default)]
    pub conditions: Vec<Condition>,
}

pub const DEFAULT_SWEEP: &str = include_str!("../../configs/sweep.toml");
pub const CAPACITY_SWEEP: &str = include_str!("../../configs/capacity.toml");

impl ExperimentPlan {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// The four-condition privacy sweep shipped with the crate.
    pub fn default_sweep() -> Self {
        Self::parse(DEFAULT_SWEEP, Path::new("configs/sweep.toml")).expect("bundled plan is valid")
    }

    /// Encoder depth 2 against depth 6 at `V = 64`.
    pub fn capacity_sweep() -> Self {
        Self::parse(CAPACITY_SWEEP, Path::new("configs/capacity.toml")).expect("bundled plan is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(Error::Config("plan has no conditions".into()));
        }
        self.corpus.validate()?;
        let mut names = BTreeSet::new();
        for c in &self.conditions {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Config(format!("duplicate condition `{}`", c.name)));
            }
            if c.name.is_empty() || c.name.contains([',', '\n', '/', '\\']) || c.name.starts_with('.') {
                return Err(Error::Config(format!(
                    "condition name `{}` must be nonempty, must not start with a dot, and must \
                     not contain commas, slashes or newlines",
                    c.name
                )));
            }
            if c.seeds.is_empty() {
                return Err(Error::Config(format!("condition `{}` has no seeds", c.name)));
            }
            let distinct: BTreeSet<u64> = c.seeds.iter().copied().collect();
            if distinct.len() != c.seeds.len() {
                return Err(Error::Config(format!("condition `{}` repeats a seed", c.name)));
            }
            for &seed in &c.seeds {
                c.model_config(&self.model, seed).validate()?;
            }
        }
        if let Some(snr) = self.f0.awgn_snr_db {
            if snr.is_nan() {
                return Err(Error::Config("awgn_snr_db is NaN".into()));
            }
        }
        Ok(())
    }

    /// Replaces every condition's seed list with `[seed]`.
    pub fn override_seed(&mut self, seed: u64) {
        for c in &mut self.conditions {
            c.seeds = vec![seed];
        }
    }

    /// Seeds in first-use order.
    pub fn seeds(&self) -> Vec<u64> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for c in &self.conditions {
            for &s in &c.seeds {
                if seen.insert(s) {
                    out.push(s);
                }
            }
        }
        out
    }

    pub fn corpus_config(&self, seed: u64) -> CorpusConfig {
        CorpusConfig {
            seed,
            ..self.corpus.clone()
        }
    }
}
