//! The structured lab configuration file.
//!
//! One TOML document with sections `[model]`, `[data]`, `[train]`
//! (with `[train.balancing]`), `[diagnostics]`, `[kl]` and `[sweep]`. Every
//! key is optional; missing keys take the built-in defaults and unknown keys
//! are rejected. Command-line flags are applied on top with
//! [`LabConfig::apply_overrides`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::balancing::Strategy;
use crate::data::{DataConfig, GenerationMode};
use crate::diagnostics::SyntheticSpec;
use crate::dpo::Task;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub understanding: DataConfig,
    pub generation: DataConfig,
    pub generation_mode: GenerationMode,
    /// Held-out pairs per task for evaluation and KL estimates.
    pub eval_pairs: usize,
    /// Added to each task's data seed to derive the held-out set seed.
    pub eval_seed_offset: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            understanding: DataConfig::understanding_default(),
            generation: DataConfig::generation_default(),
            generation_mode: GenerationMode::SameDistribution,
            eval_pairs: 200,
            eval_seed_offset: 1000,
        }
    }
}

impl DataSection {
    /// Config for the held-out set of `task`.
    pub fn eval_config(&self, task: Task) -> DataConfig {
        let base = match task {
            Task::Understanding => &self.understanding,
            Task::Generation => &self.generation,
        };
        DataConfig {
            pair_count: self.eval_pairs,
            rng_seed: base.rng_seed.wrapping_add(self.eval_seed_offset),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub n_batches: usize,
    pub include_heads: bool,
    pub seed: u64,
    pub synthetic: SyntheticSpec,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            n_batches: 200,
            include_heads: false,
            seed: 0,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlSection {
    pub samples_per_context: usize,
    pub seed: u64,
}

impl Default for KlSection {
    fn default() -> Self {
        Self {
            samples_per_context: 1,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub betas: Vec<f64>,
    /// Strategy used for the β sweep.
    pub beta_strategy: Strategy,
    pub soup_lambdas: Vec<f64>,
    pub jobs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            strategies: Strategy::ALL.to_vec(),
            betas: vec![0.05, 0.1, 0.2, 0.5],
            beta_strategy: Strategy::GradWeighted,
            soup_lambdas: vec![0.3, 0.5, 0.7],
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub model: ModelConfig,
    pub data: DataSection,
    pub train: TrainConfig,
    pub diagnostics: DiagnosticsSection,
    pub kl: KlSection,
    pub sweep: SweepSection,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
    pub beta: Option<f64>,
    pub n_batches: Option<usize>,
    pub jobs: Option<usize>,
    pub steps: Option<usize>,
}

/// Overlays `user` onto `base`, recursing into tables.
fn merge(base: &mut toml::Value, user: toml::Value) {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl LabConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::parse(text, Path::new("<config>"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let user: toml::Value = toml::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        // Start from the serialized defaults so that partially specified
        // sections (such as one data-task table) keep their task defaults.
        let mut merged = toml::Value::try_from(LabConfig::default()).map_err(|e| Error::format(path, e.to_string()))?;
        merge(&mut merged, user);
        let cfg: LabConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::format("<config>", e.to_string()))
    }

    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            self.sweep.seeds = vec![seed];
            self.diagnostics.seed = seed;
        }
        if let Some(s) = o.strategy {
            self.train.balancing.strategy = s;
            self.sweep.strategies = vec![s];
        }
        if let Some(b) = o.beta {
            self.train.beta = b;
        }
        if let Some(n) = o.n_batches {
            self.diagnostics.n_batches = n;
        }
        if let Some(j) = o.jobs {
            self.sweep.jobs = j;
        }
        if let Some(s) = o.steps {
            self.train.steps = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.understanding.validate()?;
        self.data.generation.validate()?;
        if self.data.understanding.task != Task::Understanding {
            return Err(Error::config("data.understanding.task", "must be `understanding`"));
        }
        if self.data.generation.task != Task::Generation {
            return Err(Error::config("data.generation.task", "must be `generation`"));
        }
        if self.data.eval_pairs == 0 {
            return Err(Error::config("data.eval_pairs", "must be at least 1"));
        }
        self.train.validate()?;
        self.diagnostics.synthetic.validate()?;
        if self.kl.samples_per_context == 0 {
            return Err(Error::config("kl.samples_per_context", "must be at least 1"));
        }
        if self.sweep.seeds.is_empty() {
            return Err(Error::config("sweep.seeds", "must not be empty"));
        }
        if self.sweep.jobs == 0 {
            return Err(Error::config("sweep.jobs", "must be at least 1"));
        }
        if let Some(b) = self.sweep.betas.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::config("sweep.betas", format!("β = {b} must be positive")));
        }
        if let Some(l) = self.sweep.soup_lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::config(
                "sweep.soup_lambdas",
                format!("λ = {l} must lie in [0, 1]"),
            ));
        }
        Ok(())
    }

    /// Mean text response length implied by the understanding length band.
    pub fn mean_text_len(&self) -> f64 {
        let u = &self.data.understanding;
        (u.response_len_min + u.response_len_max) as f64 / 2.0
    }

    /// Training config for one run, with the length-normalized inputs filled from the data.
    pub fn run_train_config(&self, strategy: Strategy, beta: f64, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.balancing.strategy = strategy;
        t.balancing.gen_tokens = self.model.gen_tokens;
        t.balancing.mean_text_len = self.mean_text_len();
        t.beta = beta;
        t.seed = seed;
        t
    }

    /// Model config for one run: the base stays fixed, the adapter init follows the seed.
    pub fn run_model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            adapter_seed: Some(seed),
            ..self.model.clone()
        }
    }
}
