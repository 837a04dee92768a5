//! DPO loss, implicit reward margin, joint objective and KL to the reference.
//!
//! ```text
//! Δθ  = [log πθ(y_w) − log π_ref(y_w)] − [log πθ(y_l) − log π_ref(y_l)]
//! L   = −log σ(β Δθ)
//! L_joint = α L_U + (1 − α) L_G
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient::GradientVector;
use crate::model::{Modality, ModelConfig, ModelState, ParamSource, TokenSequence};
use crate::util::{sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Understanding,
    Generation,
}

impl Task {
    pub fn modality(self) -> Modality {
        match self {
            Task::Understanding => Modality::Text,
            Task::Generation => Modality::Code,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Understanding => "understanding",
            Task::Generation => "generation",
        }
    }
}

/// One preference triple for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub task: Task,
    pub context: TokenSequence,
    pub chosen: TokenSequence,
    pub rejected: TokenSequence,
    /// Generator-side score gap; unrelated to the model's implicit margin.
    pub construction_margin: f64,
    /// Set when the pair skipped the margin filter (indistinguishable regime).
    #[serde(default)]
    pub filter_bypassed: bool,
}

impl PreferencePair {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.context.modality != Modality::Text {
            return Err(Error::Domain("pair context must be text".into()));
        }
        let m = self.task.modality();
        if self.chosen.modality != m || self.rejected.modality != m {
            return Err(Error::Domain(format!(
                "{} pair must carry {m} responses",
                self.task.as_str()
            )));
        }
        if self.task == Task::Generation {
            let n = config.gen_tokens;
            if self.chosen.len() != n || self.rejected.len() != n {
                return Err(Error::Domain(format!(
                    "generation responses must have exactly {n} tokens (got {} / {})",
                    self.chosen.len(),
                    self.rejected.len()
                )));
            }
        }
        self.context.validate(config)?;
        self.chosen.validate(config)?;
        self.rejected.validate(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub joint_alpha: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            joint_alpha: 0.5,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.joint_alpha) {
            return Err(Error::config("joint_alpha", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `−log σ(β Δ)`, stable for large `|β Δ|`.
pub fn dpo_loss_from_margin(margin: f64, beta: f64) -> f64 {
    softplus(-beta * margin)
}

/// `dL/dΔ = −β σ(−β Δ)`.
pub fn dpo_loss_slope(margin: f64, beta: f64) -> f64 {
    -beta * sigmoid(-beta * margin)
}

/// Reference log-probabilities of a pair's chosen and rejected responses.
/// They never change during training, so callers may cache them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLogprobs {
    pub chosen: f64,
    pub rejected: f64,
}

pub fn reference_logprobs(state: &ModelState, pair: &PreferencePair) -> Result<ReferenceLogprobs> {
    pair.validate(state.config())?;
    let trace = state.trace(
        &pair.context,
        &[pair.chosen.clone(), pair.rejected.clone()],
        ParamSource::Reference,
    )?;
    Ok(ReferenceLogprobs {
        chosen: trace.logprobs()[0],
        rejected: trace.logprobs()[1],
    })
}

pub fn implicit_margin(state: &ModelState, pair: &PreferencePair) -> Result<f64> {
    let reference = reference_logprobs(state, pair)?;
    let live = state.trace(
        &pair.context,
        &[pair.chosen.clone(), pair.rejected.clone()],
        ParamSource::Live,
    )?;
    Ok((live.logprobs()[0] - reference.chosen) - (live.logprobs()[1] - reference.rejected))
}

pub fn dpo_loss(state: &ModelState, pair: &PreferencePair, cfg: &DpoConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(dpo_loss_from_margin(implicit_margin(state, pair)?, cfg.beta))
}

/// `α L_U + (1 − α) L_G` on one understanding and one generation pair.
pub fn joint_loss(
    state: &ModelState,
    pair_u: &PreferencePair,
    pair_g: &PreferencePair,
    cfg: &DpoConfig,
) -> Result<f64> {
    if pair_u.task != Task::Understanding || pair_g.task != Task::Generation {
        return Err(Error::Domain(
            "joint loss takes an understanding pair then a generation pair".into(),
        ));
    }
    let l_u = dpo_loss(state, pair_u, cfg)?;
    let l_g = dpo_loss(state, pair_g, cfg)?;
    Ok(combine_joint(l_u, l_g, cfg.joint_alpha))
}

pub fn combine_joint(loss_u: f64, loss_g: f64, alpha: f64) -> f64 {
    alpha * loss_u + (1.0 - alpha) * loss_g
}

/// Loss, margin and trainable-set gradient of one pair.
#[derive(Debug, Clone)]
pub struct PairLoss {
    pub loss: f64,
    pub margin: f64,
    pub grad: GradientVector,
}

pub fn dpo_loss_and_grad(
    state: &ModelState,
    pair: &PreferencePair,
    beta: f64,
    reference: Option<ReferenceLogprobs>,
) -> Result<PairLoss> {
    let reference = match reference {
        Some(r) => r,
        None => reference_logprobs(state, pair)?,
    };
    let trace = state.trace(
        &pair.context,
        &[pair.chosen.clone(), pair.rejected.clone()],
        ParamSource::Live,
    )?;
    let lp = trace.logprobs();
    let margin = (lp[0] - reference.chosen) - (lp[1] - reference.rejected);
    let loss = dpo_loss_from_margin(margin, beta);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{} DPO loss", pair.task.as_str())));
    }
    let slope = dpo_loss_slope(margin, beta);
    let grad = state.backward(&trace, &[slope, -slope])?;
    Ok(PairLoss { loss, margin, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlOptions {
    pub samples_per_context: usize,
    pub seed: u64,
}

impl Default for KlOptions {
    fn default() -> Self {
        Self {
            samples_per_context: 1,
            seed: 0,
        }
    }
}

/// Monte-Carlo estimate of `KL(πθ ‖ π_ref)` over a dataset's contexts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub per_sequence: f64,
    pub per_token: f64,
    /// Standard error of the per-sequence mean.
    pub std_error: f64,
    pub samples: usize,
    pub mean_length: f64,
}

/// Samples responses from the live policy at temperature 1 and averages
/// `log πθ(y|x) − log π_ref(y|x)`. Text samples take the length of the pair's
/// chosen response; code samples always have the configured token count.
/// The raw estimate may be slightly negative.
pub fn kl_to_reference(
    state: &ModelState,
    dataset: &[PreferencePair],
    task: Task,
    opts: &KlOptions,
) -> Result<KlEstimate> {
    let pairs: Vec<&PreferencePair> = dataset.iter().filter(|p| p.task == task).collect();
    if pairs.is_empty() || opts.samples_per_context == 0 {
        return Err(Error::Domain(format!(
            "KL estimate needs at least one {} pair and one sample",
            task.as_str()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values = Vec::with_capacity(pairs.len() * opts.samples_per_context);
    let mut total_len = 0usize;
    for pair in pairs {
        let len = match task {
            Task::Understanding => pair.chosen.len(),
            Task::Generation => state.config().gen_tokens,
        };
        for _ in 0..opts.samples_per_context {
            let sample = state.sample_response(&pair.context, task.modality(), len, ParamSource::Live, &mut rng)?;
            let live = state.sequence_logprob(&pair.context, &sample, ParamSource::Live)?;
            let reference = state.sequence_logprob(&pair.context, &sample, ParamSource::Reference)?;
            values.push(live - reference);
            total_len += len;
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mean_length = total_len as f64 / n;
    Ok(KlEstimate {
        per_sequence: mean,
        per_token: mean / mean_length,
        std_error: (var / n).sqrt(),
        samples: values.len(),
        mean_length,
    })
}
