//! Task-combination strategies for joint DPO training.
//!
//! Every strategy reduces to one signature: given the per-task gradients and
//! losses of a step, return the combined gradient, the combined loss and the
//! (possibly updated) weight state. Weights act on losses and, by linearity,
//! on gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diagnostics::ZERO_NORM_EPS;
use crate::error::{Error, Result};
use crate::gradient::GradientVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    UnderstandingOnly,
    GenerationOnly,
    NaiveJoint,
    GradWeighted,
    Pcgrad,
    LengthNormalized,
    FixedWeight,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::UnderstandingOnly,
        Strategy::GenerationOnly,
        Strategy::NaiveJoint,
        Strategy::GradWeighted,
        Strategy::Pcgrad,
        Strategy::LengthNormalized,
        Strategy::FixedWeight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::UnderstandingOnly => "understanding_only",
            Strategy::GenerationOnly => "generation_only",
            Strategy::NaiveJoint => "naive_joint",
            Strategy::GradWeighted => "grad_weighted",
            Strategy::Pcgrad => "pcgrad",
            Strategy::LengthNormalized => "length_normalized",
            Strategy::FixedWeight => "fixed_weight",
        }
    }

    pub fn needs_understanding(self) -> bool {
        self != Strategy::GenerationOnly
    }

    pub fn needs_generation(self) -> bool {
        self != Strategy::UnderstandingOnly
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = Strategy::ALL.iter().map(|k| k.as_str()).collect();
            Error::config(
                "strategy",
                format!("unknown strategy `{s}` (expected one of {})", names.join(", ")),
            )
        })
    }
}

/// Which gradient norms feed the dynamic weights at a recompute step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSource {
    /// The norms of the recompute step's own per-task gradients.
    Current,
    /// The mean per-task norms over the steps since the previous recompute.
    #[default]
    WindowMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalancingConfig {
    pub strategy: Strategy,
    /// Weight on the understanding loss for `naive_joint` and `pcgrad`.
    pub joint_alpha: f64,
    pub fixed_w_u: f64,
    pub fixed_w_g: f64,
    /// Recompute interval `K` for `grad_weighted`.
    pub recompute_interval: usize,
    pub norm_source: NormSource,
    /// Code response length `N` for `length_normalized`.
    pub gen_tokens: usize,
    /// Mean text response length `T̄` for `length_normalized`.
    pub mean_text_len: f64,
}

impl Default for BalancingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::NaiveJoint,
            joint_alpha: 0.5,
            fixed_w_u: 0.93,
            fixed_w_g: 0.07,
            recompute_interval: 50,
            norm_source: NormSource::default(),
            gen_tokens: 576,
            mean_text_len: 65.0,
        }
    }
}

impl BalancingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.joint_alpha) {
            return Err(Error::config("joint_alpha", "must lie in [0, 1]"));
        }
        if self.fixed_w_u < 0.0 || self.fixed_w_g < 0.0 || ((self.fixed_w_u + self.fixed_w_g) - 1.0).abs() > 1e-12 {
            return Err(Error::config(
                "fixed_w_u",
                "fixed weights must be nonnegative and sum to 1",
            ));
        }
        if self.recompute_interval == 0 {
            return Err(Error::config("recompute_interval", "must be at least 1"));
        }
        if self.gen_tokens == 0 {
            return Err(Error::config("gen_tokens", "must be at least 1"));
        }
        if !(self.mean_text_len >= 1.0 && self.mean_text_len.is_finite()) {
            return Err(Error::config("mean_text_len", "must be at least 1"));
        }
        Ok(())
    }
}

/// Current task weights plus what the dynamic strategy needs to update them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    pub w_u: f64,
    pub w_g: f64,
    pub last_recompute_step: usize,
    /// Norms used at the last recompute.
    pub snapshot_norm_u: Option<f64>,
    pub snapshot_norm_g: Option<f64>,
    window_sum_u: f64,
    window_sum_g: f64,
    window_len: usize,
}

impl Default for WeightState {
    fn default() -> Self {
        Self {
            w_u: 0.5,
            w_g: 0.5,
            last_recompute_step: 0,
            snapshot_norm_u: None,
            snapshot_norm_g: None,
            window_sum_u: 0.0,
            window_sum_g: 0.0,
            window_len: 0,
        }
    }
}

impl WeightState {
    /// Initial weights for a strategy.
    pub fn for_config(cfg: &BalancingConfig) -> Self {
        let (w_u, w_g) = match cfg.strategy {
            Strategy::UnderstandingOnly => (1.0, 0.0),
            Strategy::GenerationOnly => (0.0, 1.0),
            Strategy::NaiveJoint | Strategy::Pcgrad => (cfg.joint_alpha, 1.0 - cfg.joint_alpha),
            Strategy::GradWeighted => (0.5, 0.5),
            Strategy::FixedWeight => (cfg.fixed_w_u, cfg.fixed_w_g),
            Strategy::LengthNormalized => length_normalized_weights_real(cfg.gen_tokens as f64, cfg.mean_text_len),
        };
        Self {
            w_u,
            w_g,
            ..Self::default()
        }
    }
}

/// Weights that equalize the weighted gradient norms: `w_U ‖g_U‖ = w_G ‖g_G‖`.
pub fn dynamic_weights(norm_u: f64, norm_g: f64) -> Result<(f64, f64)> {
    if !(norm_u > 0.0 && norm_g > 0.0) || !(norm_u.is_finite() && norm_g.is_finite()) {
        return Err(Error::Degenerate(format!(
            "dynamic weights need two positive finite norms, got ({norm_u}, {norm_g})"
        )));
    }
    let total = norm_u + norm_g;
    let w_u = norm_g / total;
    Ok((w_u, 1.0 - w_u))
}

/// `w_U = N / (N + T)`, `w_G = T / (N + T)`.
pub fn length_normalized_weights(gen_tokens: usize, text_tokens: usize) -> (f64, f64) {
    length_normalized_weights_real(gen_tokens as f64, text_tokens as f64)
}

fn length_normalized_weights_real(n: f64, t: f64) -> (f64, f64) {
    let w_u = n / (n + t);
    (w_u, 1.0 - w_u)
}

fn is_zero(g: &GradientVector) -> bool {
    g.norm() < ZERO_NORM_EPS
}

/// PCGrad on two gradients: when they conflict (negative dot product), each is
/// projected onto the normal plane of the other before summing.
pub fn pcgrad_combine(g_u: &GradientVector, g_g: &GradientVector) -> Result<GradientVector> {
    let (proj_u, proj_g) = pcgrad_project(g_u, g_g)?;
    let mut sum = proj_u;
    sum.add_scaled(&proj_g, 1.0)?;
    Ok(sum)
}

/// The two (possibly projected) gradients, before summation.
pub fn pcgrad_project(g_u: &GradientVector, g_g: &GradientVector) -> Result<(GradientVector, GradientVector)> {
    let dot = g_u.dot(g_g)?;
    if is_zero(g_u) || is_zero(g_g) || dot >= 0.0 {
        return Ok((g_u.clone(), g_g.clone()));
    }
    let mut pu = g_u.clone();
    pu.add_scaled(g_g, -dot / g_g.dot(g_g)?)?;
    let mut pg = g_g.clone();
    pg.add_scaled(g_u, -dot / g_u.dot(g_u)?)?;
    Ok((pu, pg))
}

/// PCGrad restricted to the shared (adapter) segments; task-private segments
/// are summed unchanged.
/// Vectors without adapter segments (synthetic ones) are projected whole.
fn pcgrad_shared(g_u: &GradientVector, g_g: &GradientVector) -> Result<GradientVector> {
    if !g_u.segments().iter().any(|s| s.kind.is_adapter()) {
        return pcgrad_combine(g_u, g_g);
    }
    let (su, sg) = (g_u.shared(), g_g.shared());
    let (pu, pg) = pcgrad_project(&su, &sg)?;
    let mut out = g_u.clone();
    out.add_scaled(g_g, 1.0)?;
    // Overwrite shared segments with the projected sum.
    let mut projected = pu;
    projected.add_scaled(&pg, 1.0)?;
    let mut cursor = 0;
    let mut values = out.into_values();
    let segments = g_u.segments().to_vec();
    for seg in &segments {
        if seg.kind.is_adapter() {
            let n = seg.range.len();
            values[seg.range.clone()].copy_from_slice(&projected.values()[cursor..cursor + n]);
            cursor += n;
        }
    }
    GradientVector::new(values, segments)
}

/// One step's output of [`combine`].
#[derive(Debug, Clone)]
pub struct Combined {
    pub gradient: GradientVector,
    pub loss: f64,
    pub weights: WeightState,
}

fn require<'a, T>(side: Option<&'a T>, what: &str, strategy: Strategy) -> Result<&'a T> {
    side.ok_or_else(|| Error::Domain(format!("strategy {strategy} needs the {what}")))
}

/// Combines one step's per-task gradients and losses.
///
/// `g_u` / `g_g` are full trainable-set gradients with identical segmentation.
/// The dynamic weights use norms of the shared view. A side whose gradient is
/// zero passes the other side through unweighted and leaves the weights alone.
pub fn combine(
    cfg: &BalancingConfig,
    state: &WeightState,
    step: usize,
    g_u: Option<&GradientVector>,
    g_g: Option<&GradientVector>,
    loss_u: Option<f64>,
    loss_g: Option<f64>,
) -> Result<Combined> {
    let strategy = cfg.strategy;
    let mut weights = state.clone();
    match strategy {
        Strategy::UnderstandingOnly => {
            let g = require(g_u, "understanding gradient", strategy)?;
            let l = *require(loss_u.as_ref(), "understanding loss", strategy)?;
            return Ok(Combined {
                gradient: g.clone(),
                loss: l,
                weights,
            });
        }
        Strategy::GenerationOnly => {
            let g = require(g_g, "generation gradient", strategy)?;
            let l = *require(loss_g.as_ref(), "generation loss", strategy)?;
            return Ok(Combined {
                gradient: g.clone(),
                loss: l,
                weights,
            });
        }
        _ => {}
    }

    let gu = require(g_u, "understanding gradient", strategy)?;
    let gg = require(g_g, "generation gradient", strategy)?;
    let lu = *require(loss_u.as_ref(), "understanding loss", strategy)?;
    let lg = *require(loss_g.as_ref(), "generation loss", strategy)?;
    gu.check_compatible(gg)?;

    let (su, sg) = (gu.shared(), gg.shared());
    let (nu, ng) = (su.norm(), sg.norm());

    if strategy == Strategy::GradWeighted {
        if nu >= ZERO_NORM_EPS && ng >= ZERO_NORM_EPS {
            weights.window_sum_u += nu;
            weights.window_sum_g += ng;
            weights.window_len += 1;
        }
        if step >= weights.last_recompute_step + cfg.recompute_interval {
            let (ru, rg) = match cfg.norm_source {
                NormSource::Current => (nu, ng),
                NormSource::WindowMean if weights.window_len > 0 => (
                    weights.window_sum_u / weights.window_len as f64,
                    weights.window_sum_g / weights.window_len as f64,
                ),
                NormSource::WindowMean => (0.0, 0.0),
            };
            // Degenerate norms keep the previous weights.
            if let Ok((w_u, w_g)) = dynamic_weights(ru, rg) {
                weights.w_u = w_u;
                weights.w_g = w_g;
                weights.snapshot_norm_u = Some(ru);
                weights.snapshot_norm_g = Some(rg);
                weights.last_recompute_step = step;
                weights.window_sum_u = 0.0;
                weights.window_sum_g = 0.0;
                weights.window_len = 0;
            }
        }
    }

    // Zero-norm pass-through: the nonzero side goes through unweighted.
    let zero_u = is_zero(gu);
    let zero_g = is_zero(gg);
    if zero_u || zero_g {
        let (gradient, loss) = match (zero_u, zero_g) {
            (true, false) => (gg.clone(), lg),
            (false, true) => (gu.clone(), lu),
            _ => (gu.zeros_like(), combine_losses(&weights, lu, lg)),
        };
        return Ok(Combined {
            gradient,
            loss,
            weights,
        });
    }

    let loss = combine_losses(&weights, lu, lg);
    let gradient = if strategy == Strategy::Pcgrad {
        pcgrad_shared(&gu.scaled(weights.w_u), &gg.scaled(weights.w_g))?
    } else {
        let mut g = gu.scaled(weights.w_u);
        g.add_scaled(gg, weights.w_g)?;
        g
    };
    Ok(Combined {
        gradient,
        loss,
        weights,
    })
}

fn combine_losses(w: &WeightState, lu: f64, lg: f64) -> f64 {
    w.w_u * lu + w.w_g * lg
}
