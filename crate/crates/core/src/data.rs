//! Seeded synthetic preference data.
//!
//! Understanding pairs: a random text context keys a deterministic rule
//! `y_t = (hash(context) + t) mod V`; the chosen response follows it with
//! per-token corruption probability `1 − κ`, the rejected response is uniform.
//! Generation pairs come in two regimes: `same_distribution` (chosen and
//! rejected are both uniform code sequences, indistinguishable per token) and
//! `rule_separated` (the text construction, in the code vocabulary).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dpo::{PreferencePair, Task};
use crate::error::{Error, Result};
use crate::model::{Modality, ModelConfig, TokenSequence};
use crate::util::fnv1a_u32;

pub const DATASET_MAGIC: &str = "bdlab-data-v1";

/// Consecutive filter rejections tolerated for one pair before giving up.
pub const MAX_ATTEMPTS_PER_PAIR: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub task: Task,
    pub pair_count: usize,
    pub context_length: usize,
    /// Inclusive text response length band.
    pub response_len_min: usize,
    pub response_len_max: usize,
    /// Per-token informativeness κ in `[0, 1]`.
    pub informativeness: f64,
    /// Pairs with construction margin below this are regenerated; `None` disables the filter.
    pub margin_filter_threshold: Option<f64>,
    pub rng_seed: u64,
}

impl DataConfig {
    pub fn understanding_default() -> Self {
        Self {
            task: Task::Understanding,
            pair_count: 1300,
            context_length: 16,
            response_len_min: 30,
            response_len_max: 100,
            informativeness: 1.0,
            margin_filter_threshold: Some(0.5),
            rng_seed: 1,
        }
    }

    pub fn generation_default() -> Self {
        Self {
            task: Task::Generation,
            pair_count: 288,
            informativeness: 0.0,
            rng_seed: 2,
            ..Self::understanding_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.informativeness) {
            return Err(Error::config(
                "informativeness",
                format!("κ = {} must lie in [0, 1]", self.informativeness),
            ));
        }
        if self.pair_count == 0 {
            return Err(Error::config("pair_count", "must be at least 1"));
        }
        if self.response_len_min == 0 || self.response_len_min > self.response_len_max {
            return Err(Error::config("response_len_min", "band must satisfy 1 <= min <= max"));
        }
        if let Some(t) = self.margin_filter_threshold {
            if !t.is_finite() {
                return Err(Error::config("margin_filter_threshold", "must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    #[default]
    SameDistribution,
    RuleSeparated,
}

/// The rule token at (1-based) position `t`.
pub fn rule_token(context: &TokenSequence, t: usize, vocab: usize) -> u32 {
    let key = fnv1a_u32(&context.tokens);
    ((key % vocab as u64 + t as u64) % vocab as u64) as u32
}

fn rule_match_fraction(context: &TokenSequence, seq: &TokenSequence, vocab: usize) -> f64 {
    let hits = seq
        .tokens
        .iter()
        .enumerate()
        .filter(|&(i, &tok)| tok == rule_token(context, i + 1, vocab))
        .count();
    hits as f64 / seq.len() as f64
}

fn uniform_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

fn rule_tokens(rng: &mut ChaCha8Rng, context: &TokenSequence, len: usize, vocab: usize, kappa: f64) -> Vec<u32> {
    (1..=len)
        .map(|t| {
            let corrupt = rng.random::<f64>() < 1.0 - kappa;
            if corrupt {
                rng.random_range(0..vocab as u32)
            } else {
                rule_token(context, t, vocab)
            }
        })
        .collect()
}

fn generate_rule_pairs(
    cfg: &DataConfig,
    modality: Modality,
    vocab: usize,
    fixed_len: Option<usize>,
    text_vocab: usize,
) -> Result<Vec<PreferencePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut pairs = Vec::with_capacity(cfg.pair_count);
    let mut attempts = 0usize;
    while pairs.len() < cfg.pair_count {
        let mut failures = 0usize;
        loop {
            attempts += 1;
            let context = TokenSequence::text(uniform_tokens(&mut rng, cfg.context_length, text_vocab));
            let len = fixed_len.unwrap_or_else(|| rng.random_range(cfg.response_len_min..=cfg.response_len_max));
            let chosen = TokenSequence::new(
                modality,
                rule_tokens(&mut rng, &context, len, vocab, cfg.informativeness),
            );
            let rejected = TokenSequence::new(modality, uniform_tokens(&mut rng, len, vocab));
            let margin =
                rule_match_fraction(&context, &chosen, vocab) - rule_match_fraction(&context, &rejected, vocab);
            if cfg.margin_filter_threshold.is_some_and(|t| margin < t) {
                failures += 1;
                if failures >= MAX_ATTEMPTS_PER_PAIR {
                    return Err(Error::GenerationExhausted {
                        attempts,
                        accepted: pairs.len(),
                        requested: cfg.pair_count,
                    });
                }
                continue;
            }
            pairs.push(PreferencePair {
                task: cfg.task,
                context,
                chosen,
                rejected,
                construction_margin: margin,
                filter_bypassed: false,
            });
            break;
        }
    }
    Ok(pairs)
}

pub fn generate_understanding_pairs(cfg: &DataConfig, model_cfg: &ModelConfig) -> Result<Vec<PreferencePair>> {
    cfg.validate()?;
    model_cfg.validate()?;
    if cfg.task != Task::Understanding {
        return Err(Error::config(
            "task",
            "understanding generator needs task = understanding",
        ));
    }
    generate_rule_pairs(cfg, Modality::Text, model_cfg.text_vocab, None, model_cfg.text_vocab)
}

pub fn generate_generation_pairs(
    cfg: &DataConfig,
    model_cfg: &ModelConfig,
    mode: GenerationMode,
) -> Result<Vec<PreferencePair>> {
    cfg.validate()?;
    model_cfg.validate()?;
    if cfg.task != Task::Generation {
        return Err(Error::config("task", "generation generator needs task = generation"));
    }
    let n = model_cfg.gen_tokens;
    let vocab = model_cfg.code_vocab;
    match mode {
        GenerationMode::RuleSeparated => generate_rule_pairs(cfg, Modality::Code, vocab, Some(n), model_cfg.text_vocab),
        GenerationMode::SameDistribution => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            let pairs = (0..cfg.pair_count)
                .map(|_| {
                    let context =
                        TokenSequence::text(uniform_tokens(&mut rng, cfg.context_length, model_cfg.text_vocab));
                    let chosen = TokenSequence::code(uniform_tokens(&mut rng, n, vocab));
                    let rejected = TokenSequence::code(uniform_tokens(&mut rng, n, vocab));
                    let margin =
                        rule_match_fraction(&context, &chosen, vocab) - rule_match_fraction(&context, &rejected, vocab);
                    PreferencePair {
                        task: Task::Generation,
                        context,
                        chosen,
                        rejected,
                        construction_margin: margin,
                        filter_bypassed: true,
                    }
                })
                .collect();
            Ok(pairs)
        }
    }
}

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub model: ModelConfig,
    pub understanding: Option<DataConfig>,
    pub generation: Option<DataConfig>,
    pub generation_mode: GenerationMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub pairs: Vec<PreferencePair>,
}

impl Dataset {
    /// Generates whichever tasks the header configures.
    pub fn generate(header: DatasetHeader) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(cfg) = &header.understanding {
            pairs.extend(generate_understanding_pairs(cfg, &header.model)?);
        }
        if let Some(cfg) = &header.generation {
            pairs.extend(generate_generation_pairs(cfg, &header.model, header.generation_mode)?);
        }
        Ok(Self { header, pairs })
    }

    pub fn task(&self, task: Task) -> Vec<PreferencePair> {
        self.pairs.iter().filter(|p| p.task == task).cloned().collect()
    }

    pub fn count(&self, task: Task) -> usize {
        self.pairs.iter().filter(|p| p.task == task).count()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for pair in &self.pairs {
            out.push_str(&serde_json::to_string(pair)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty dataset file"))?
            .map_err(|e| Error::io(path, e))?;
        let header: DatasetHeader =
            serde_json::from_str(&first).map_err(|e| Error::format(path, format!("header: {e}")))?;
        if header.format != DATASET_MAGIC {
            return Err(Error::format(
                path,
                format!("expected format `{DATASET_MAGIC}`, found `{}`", header.format),
            ));
        }
        let mut pairs = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let pair: PreferencePair =
                serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))?;
            pair.validate(&header.model)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))?;
            pairs.push(pair);
        }
        Ok(Self { header, pairs })
    }
}
