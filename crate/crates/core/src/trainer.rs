//! The optimization loop plus post-hoc soups and the separate-adapter composite.
//!
//! Each step draws one pair per required task from shuffled cyclic streams,
//! computes per-task DPO losses and gradients, combines them with the
//! balancing strategy, clips, and applies AdamW to the trainable set.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balancing::{combine, BalancingConfig, WeightState};
use crate::diagnostics::cosine;
use crate::dpo::{dpo_loss_and_grad, reference_logprobs, PairLoss, PreferencePair, ReferenceLogprobs, Task};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMetrics, EvalSets};
use crate::model::ModelState;
use crate::optim::{clip_gradient, cosine_lr, AdamW, AdamWConfig};

/// Learning rate of the large-scale setting the toy model stands in for; echoed into run summaries, never used by the loop.
pub const ORIGINAL_LR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub lr_min: f64,
    /// Not used by the loop; echoed into run summaries.
    pub original_lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub balancing: BalancingConfig,
    /// Seeds pair order (and, via the run layer, the adapter init).
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-3,
            lr_min: 0.0,
            original_lr: ORIGINAL_LR,
            weight_decay: 0.01,
            clip_norm: 1.0,
            beta: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            balancing: BalancingConfig::default(),
            seed: 0,
        }
    }
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::config("lr_min", "must lie in [0, lr]"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be positive"));
        }
        self.adam().validate()?;
        self.balancing.validate()
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One logged training step. Task fields are `None` when the strategy does
/// not train that task; norms and cosine are measured on the shared view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub loss_u: Option<f64>,
    pub loss_g: Option<f64>,
    pub loss_combined: f64,
    pub cos_ug: Option<f64>,
    pub norm_u: Option<f64>,
    pub norm_g: Option<f64>,
    pub w_u: f64,
    pub w_g: f64,
    pub lr: f64,
}

pub const TRAJECTORY_HEADER: &str = "step,loss_u,loss_g,loss_combined,cos_ug,norm_u,norm_g,w_u,w_g,lr";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl TrajectoryPoint {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:e},{},{},{},{:e},{:e},{:e}",
            self.step,
            cell(self.loss_u),
            cell(self.loss_g),
            self.loss_combined,
            cell(self.cos_ug),
            cell(self.norm_u),
            cell(self.norm_g),
            self.w_u,
            self.w_g,
            self.lr
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 10 {
            return Err(Error::Domain(format!(
                "trajectory row has {} fields, expected 10",
                f.len()
            )));
        }
        let num = |s: &str, name: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Domain(format!("trajectory column `{name}`: cannot parse `{s}`")))
        };
        let opt = |s: &str, name: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s, name).map(Some)
            }
        };
        Ok(Self {
            step: f[0]
                .parse()
                .map_err(|_| Error::Domain(format!("trajectory column `step`: cannot parse `{}`", f[0])))?,
            loss_u: opt(f[1], "loss_u")?,
            loss_g: opt(f[2], "loss_g")?,
            loss_combined: num(f[3], "loss_combined")?,
            cos_ug: opt(f[4], "cos_ug")?,
            norm_u: opt(f[5], "norm_u")?,
            norm_g: opt(f[6], "norm_g")?,
            w_u: num(f[7], "w_u")?,
            w_g: num(f[8], "w_g")?,
            lr: num(f[9], "lr")?,
        })
    }
}

pub fn trajectory_to_csv(points: &[TrajectoryPoint]) -> String {
    let mut out = String::with_capacity(points.len() * 120);
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(out, "{}", p.csv_row());
    }
    out
}

pub fn trajectory_from_csv(text: &str) -> Result<Vec<TrajectoryPoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == TRAJECTORY_HEADER => {}
        _ => return Err(Error::Domain("trajectory CSV header mismatch".into())),
    }
    lines
        .filter(|l| !l.is_empty())
        .map(TrajectoryPoint::parse_csv_row)
        .collect()
}

/// Shuffled cyclic iteration over one task's pairs, re-shuffled every epoch.
#[derive(Debug, Clone)]
struct PairStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl PairStream {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

/// Per-task data with a lazily filled reference log-prob cache.
struct TaskFeed<'a> {
    pairs: &'a [PreferencePair],
    stream: PairStream,
    cache: Vec<Option<ReferenceLogprobs>>,
}

impl<'a> TaskFeed<'a> {
    fn new(pairs: &'a [PreferencePair], task: Task, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Domain(format!(
                "strategy needs {} pairs but none were given",
                task.as_str()
            )));
        }
        if let Some(p) = pairs.iter().find(|p| p.task != task) {
            return Err(Error::Domain(format!(
                "{} dataset contains a {} pair",
                task.as_str(),
                p.task.as_str()
            )));
        }
        Ok(Self {
            pairs,
            stream: PairStream::new(pairs.len(), seed),
            cache: vec![None; pairs.len()],
        })
    }

    /// Next pair and its cached reference log-probs (computed on first visit).
    fn next(&mut self, state: &ModelState) -> Result<(&'a PreferencePair, ReferenceLogprobs)> {
        let i = self.stream.next_index();
        let pair = &self.pairs[i];
        let r = match self.cache[i] {
            Some(r) => r,
            None => {
                let r = reference_logprobs(state, pair)?;
                self.cache[i] = Some(r);
                r
            }
        };
        Ok((pair, r))
    }
}

const STREAM_SALT_U: u64 = 0x5555_0000_0000_0001;
const STREAM_SALT_G: u64 = 0x6666_0000_0000_0002;

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub trajectory: Vec<TrajectoryPoint>,
    pub final_weights: WeightState,
}

pub fn train(
    state: ModelState,
    data_u: &[PreferencePair],
    data_g: &[PreferencePair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(state, data_u, data_g, cfg, |_| Ok(()))
}

/// [`train`] with a callback invoked after every logged step (used to stream
/// the trajectory to disk so interrupted runs keep a partial file).
pub fn train_with(
    mut state: ModelState,
    data_u: &[PreferencePair],
    data_g: &[PreferencePair],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrajectoryPoint) -> Result<()>,
) -> Result<TrainOutcome> {
    if cfg.steps == 0 {
        return Ok(TrainOutcome {
            state,
            trajectory: Vec::new(),
            final_weights: WeightState::for_config(&cfg.balancing),
        });
    }
    cfg.validate()?;
    let strategy = cfg.balancing.strategy;
    let mut feed_u = strategy
        .needs_understanding()
        .then(|| TaskFeed::new(data_u, Task::Understanding, cfg.seed ^ STREAM_SALT_U))
        .transpose()?;
    let mut feed_g = strategy
        .needs_generation()
        .then(|| TaskFeed::new(data_g, Task::Generation, cfg.seed ^ STREAM_SALT_G))
        .transpose()?;

    let mut weights = WeightState::for_config(&cfg.balancing);
    let mut opt = AdamW::new(cfg.adam(), state.layout().trainable_len());
    let mut params = state.trainable_values();
    let mut trajectory = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min);
        let drawn_u = feed_u.as_mut().map(|f| f.next(&state)).transpose()?;
        let drawn_g = feed_g.as_mut().map(|f| f.next(&state)).transpose()?;

        let task_loss = |drawn: Option<(&PreferencePair, ReferenceLogprobs)>| -> Option<Result<PairLoss>> {
            drawn.map(|(pair, r)| dpo_loss_and_grad(&state, pair, cfg.beta, Some(r)))
        };
        let (res_u, res_g) = rayon::join(|| task_loss(drawn_u), || task_loss(drawn_g));
        let pl_u = res_u.transpose()?;
        let pl_g = res_g.transpose()?;

        let combined = combine(
            &cfg.balancing,
            &weights,
            step,
            pl_u.as_ref().map(|p| &p.grad),
            pl_g.as_ref().map(|p| &p.grad),
            pl_u.as_ref().map(|p| p.loss),
            pl_g.as_ref().map(|p| p.loss),
        )?;
        weights = combined.weights;

        let shared_u = pl_u.as_ref().map(|p| p.grad.shared());
        let shared_g = pl_g.as_ref().map(|p| p.grad.shared());
        let cos_ug = match (&shared_u, &shared_g) {
            (Some(a), Some(b)) => Some(cosine(a, b)?.value),
            _ => None,
        };
        let point = TrajectoryPoint {
            step,
            loss_u: pl_u.as_ref().map(|p| p.loss),
            loss_g: pl_g.as_ref().map(|p| p.loss),
            loss_combined: combined.loss,
            cos_ug,
            norm_u: shared_u.as_ref().map(|g| g.norm()),
            norm_g: shared_g.as_ref().map(|g| g.norm()),
            w_u: weights.w_u,
            w_g: weights.w_g,
            lr,
        };
        if !point.loss_combined.is_finite() {
            return Err(Error::NonFinite(format!("combined loss at step {step}")));
        }

        let clipped = clip_gradient(&combined.gradient, cfg.clip_norm);
        opt.step(&mut params, clipped.values(), lr)?;
        state.set_trainable_values(&params)?;

        on_step(&point)?;
        trajectory.push(point);
    }

    Ok(TrainOutcome {
        state,
        trajectory,
        final_weights: weights,
    })
}

/// `(1 − λ) θ_U + λ θ_G` on the trainable set; frozen parameters are shared.
///
/// Both states must come from the same configuration and reference snapshot.
pub fn soup_interpolate(state_u: &ModelState, state_g: &ModelState, lambda: f64) -> Result<ModelState> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("lambda", "must lie in [0, 1]"));
    }
    if state_u.config() != state_g.config() {
        return Err(Error::Domain(
            "soup endpoints have different model configurations".into(),
        ));
    }
    if state_u.reference_fingerprint() != state_g.reference_fingerprint() || state_u.reference() != state_g.reference()
    {
        return Err(Error::Domain("soup endpoints do not share base weights".into()));
    }
    let a = state_u.trainable_values();
    let b = state_g.trainable_values();
    let mixed: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect();
    let mut out = state_u.clone();
    out.set_trainable_values(&mixed)?;
    Ok(out)
}

/// Understanding metrics from one state, generation metrics from another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeMetrics {
    /// Always `"separate_adapter_composite"`.
    pub label: String,
    pub non_deployable: bool,
    pub metrics: EvalMetrics,
}

pub const COMPOSITE_LABEL: &str = "separate_adapter_composite";

pub fn separate_adapter_eval(state_u: &ModelState, state_g: &ModelState, sets: &EvalSets) -> Result<CompositeMetrics> {
    let u = evaluate(
        state_u,
        &EvalSets {
            understanding: sets.understanding.clone(),
            generation: Vec::new(),
        },
    )?;
    let g = evaluate(
        state_g,
        &EvalSets {
            understanding: Vec::new(),
            generation: sets.generation.clone(),
        },
    )?;
    Ok(CompositeMetrics {
        label: COMPOSITE_LABEL.into(),
        non_deployable: true,
        metrics: EvalMetrics {
            understanding: u.understanding,
            generation: g.generation,
        },
    })
}
