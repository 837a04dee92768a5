//! Gradient-interference measurements between the two tasks.
//!
//! For a gradient pair `(g_U, g_G)` on the shared (adapter) parameters we
//! record the cosine, both norms, the magnitude ratio `ρ = ‖g_U‖ / ‖g_G‖`,
//! the relative growth of `‖g_U + g_G‖` over `‖g_G‖` and per-segment cosines.
//! Intra-task cosines between consecutive batches serve as the null baseline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dpo::{dpo_loss_and_grad, PreferencePair, Task};
use crate::error::{Error, Result};
use crate::gradient::{GradSegment, GradientVector};
use crate::model::{ModelState, SegmentKind};
use crate::stats::{cohens_d, one_sample_t, welch_t, SampleSummary, TTest};
use crate::util::norm;

/// Norms below this count as zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cosine {
    pub value: f64,
    /// Either input had norm below [`ZERO_NORM_EPS`]; `value` is then 0.
    pub zero_norm: bool,
}

pub fn cosine(a: &GradientVector, b: &GradientVector) -> Result<Cosine> {
    let dot = a.dot(b)?;
    Ok(cosine_from_parts(dot, a.norm(), b.norm()))
}

fn cosine_from_parts(dot: f64, na: f64, nb: f64) -> Cosine {
    if na < ZERO_NORM_EPS || nb < ZERO_NORM_EPS {
        return Cosine {
            value: 0.0,
            zero_norm: true,
        };
    }
    Cosine {
        value: (dot / (na * nb)).clamp(-1.0, 1.0),
        zero_norm: false,
    }
}

/// How much adding `g_U` changes `g_G`, given `ρ` and the cosine between them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormCheck {
    /// `√(1 + 2ρ cos + ρ²) − 1`
    pub exact_relative_increase: f64,
    /// `ρ² / 2`, the orthogonal small-ρ approximation.
    pub quadratic_approx: f64,
    /// Angle between `g_U + g_G` and `g_G`, radians.
    pub angle_rad: f64,
}

pub fn combined_norm_check(rho: f64, cos: f64) -> NormCheck {
    let cos = cos.clamp(-1.0, 1.0);
    let sin = (1.0 - cos * cos).sqrt();
    NormCheck {
        exact_relative_increase: (1.0 + 2.0 * rho * cos + rho * rho).sqrt() - 1.0,
        quadratic_approx: 0.5 * rho * rho,
        angle_rad: (rho * sin).atan2(1.0 + rho * cos),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCosine {
    pub name: String,
    pub cos: f64,
    pub zero_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub batch: usize,
    pub cos: f64,
    pub zero_norm: bool,
    pub norm_u: f64,
    pub norm_g: f64,
    /// `None` when `‖g_G‖` is below the zero-norm threshold.
    pub rho: Option<f64>,
    /// `(‖g_U + g_G‖ − ‖g_G‖) / ‖g_G‖` measured on the vectors themselves.
    pub measured_relative_increase: Option<f64>,
    pub per_layer: Vec<LayerCosine>,
}

impl DiagnosticsRecord {
    pub fn from_gradients(batch: usize, g_u: &GradientVector, g_g: &GradientVector) -> Result<Self> {
        let c = cosine(g_u, g_g)?;
        let (nu, ng) = (g_u.norm(), g_g.norm());
        let has_g = ng >= ZERO_NORM_EPS;
        let sum_norm = norm(
            &g_u.values()
                .iter()
                .zip(g_g.values())
                .map(|(a, b)| a + b)
                .collect::<Vec<_>>(),
        );
        let per_layer = g_u
            .segments()
            .iter()
            .map(|seg| {
                let a = &g_u.values()[seg.range.clone()];
                let b = &g_g.values()[seg.range.clone()];
                let c = cosine_from_parts(crate::util::dot(a, b), norm(a), norm(b));
                LayerCosine {
                    name: seg.name.clone(),
                    cos: c.value,
                    zero_norm: c.zero_norm,
                }
            })
            .collect();
        Ok(Self {
            batch,
            cos: c.value,
            zero_norm: c.zero_norm,
            norm_u: nu,
            norm_g: ng,
            rho: has_g.then(|| nu / ng),
            measured_relative_increase: has_g.then(|| (sum_norm - ng) / ng),
            per_layer,
        })
    }

    pub fn norm_check(&self) -> Option<NormCheck> {
        self.rho.map(|rho| combined_norm_check(rho, self.cos))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsOptions {
    pub beta: f64,
    /// Also measure head segments (they are excluded from the shared view by default).
    pub include_heads: bool,
    /// Seeds the pairing order.
    pub seed: u64,
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        Self {
            beta: 0.1,
            include_heads: false,
            seed: 0,
        }
    }
}

/// Restricts a trainable-set gradient to the view used for interference analysis.
pub fn analysis_view(g: &GradientVector, include_heads: bool) -> GradientVector {
    if include_heads {
        g.clone()
    } else {
        g.shared()
    }
}

/// Aligns two gradients on the union of their segments so that task-private
/// heads (present in only one task's gradient as zeros) line up.
fn task_gradients(
    state: &ModelState,
    pair_u: &PreferencePair,
    pair_g: &PreferencePair,
    opts: &DiagnosticsOptions,
) -> Result<(GradientVector, GradientVector)> {
    let g_u = dpo_loss_and_grad(state, pair_u, opts.beta, None)?.grad;
    let g_g = dpo_loss_and_grad(state, pair_g, opts.beta, None)?.grad;
    Ok((
        analysis_view(&g_u, opts.include_heads),
        analysis_view(&g_g, opts.include_heads),
    ))
}

/// Per-batch gradient pairs plus consecutive-batch intra-task cosines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSamples {
    pub records: Vec<DiagnosticsRecord>,
    pub intra_u: Vec<f64>,
    pub intra_g: Vec<f64>,
}

fn pairing_order(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx
}

fn check_tasks(dataset: &[PreferencePair], task: Task) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Domain(format!("empty {} dataset", task.as_str())));
    }
    if dataset.iter().any(|p| p.task != task) {
        return Err(Error::Domain(format!(
            "{} dataset contains pairs of another task",
            task.as_str()
        )));
    }
    Ok(())
}

/// Computes `n_batches` single-pair gradient pairs and their intra-task baselines.
pub fn collect_calibration_samples(
    state: &ModelState,
    dataset_u: &[PreferencePair],
    dataset_g: &[PreferencePair],
    n_batches: usize,
    opts: &DiagnosticsOptions,
) -> Result<CalibrationSamples> {
    if n_batches == 0 {
        return Ok(CalibrationSamples {
            records: Vec::new(),
            intra_u: Vec::new(),
            intra_g: Vec::new(),
        });
    }
    check_tasks(dataset_u, Task::Understanding)?;
    check_tasks(dataset_g, Task::Generation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let order_u = pairing_order(dataset_u.len(), &mut rng);
    let order_g = pairing_order(dataset_g.len(), &mut rng);

    let grads: Vec<(GradientVector, GradientVector)> = (0..n_batches)
        .into_par_iter()
        .map(|i| {
            let pu = &dataset_u[order_u[i % order_u.len()]];
            let pg = &dataset_g[order_g[i % order_g.len()]];
            task_gradients(state, pu, pg, opts)
        })
        .collect::<Result<_>>()?;

    let records = grads
        .iter()
        .enumerate()
        .map(|(i, (gu, gg))| DiagnosticsRecord::from_gradients(i, gu, gg))
        .collect::<Result<Vec<_>>>()?;
    let intra_u = consecutive_cosines(grads.iter().map(|(u, _)| u))?;
    let intra_g = consecutive_cosines(grads.iter().map(|(_, g)| g))?;
    Ok(CalibrationSamples {
        records,
        intra_u,
        intra_g,
    })
}

pub fn collect_batch_diagnostics(
    state: &ModelState,
    dataset_u: &[PreferencePair],
    dataset_g: &[PreferencePair],
    n_batches: usize,
    opts: &DiagnosticsOptions,
) -> Result<Vec<DiagnosticsRecord>> {
    Ok(collect_calibration_samples(state, dataset_u, dataset_g, n_batches, opts)?.records)
}

/// Cosines between each gradient and the next one in sequence.
pub fn consecutive_cosines<'a>(grads: impl Iterator<Item = &'a GradientVector>) -> Result<Vec<f64>> {
    let grads: Vec<&GradientVector> = grads.collect();
    grads.windows(2).map(|w| cosine(w[0], w[1]).map(|c| c.value)).collect()
}

/// Parameters of the synthetic-vector mode.
///
/// The vector is split into a U block and a G block. `g_G` lives in the G block;
/// `g_U = ρ‖g_G‖ (cos ĝ_G + sin v̂)` with `v̂` in the U block, so the cosine and
/// ratio hold by construction (at `cos = 0` the supports are disjoint and the
/// dot product is exactly zero). Each task's random part mixes a per-run shared
/// direction with weight `coherence`, which sets the intra-task cosine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub cos: f64,
    pub rho: f64,
    pub coherence: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 4096,
            cos: 0.0,
            rho: 0.1,
            coherence: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::config("synthetic_dim", "must be at least 2"));
        }
        if !(-1.0..=1.0).contains(&self.cos) {
            return Err(Error::config("synthetic_cos", "must lie in [-1, 1]"));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::config("synthetic_rho", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.coherence) {
            return Err(Error::config("synthetic_coherence", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn block_vector(
    rng: &mut ChaCha8Rng,
    dim: usize,
    block: std::ops::Range<usize>,
    shared: &[f64],
    coherence: f64,
) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    let noise_w = (1.0 - coherence * coherence).sqrt();
    for (k, i) in block.enumerate() {
        let z: f64 = StandardNormal.sample(rng);
        v[i] = coherence * shared[k] + noise_w * z;
    }
    v
}

fn unit(v: &mut [f64]) {
    let n = norm(v);
    v.iter_mut().for_each(|x| *x /= n);
}

/// `n` synthetic gradient pairs with exact cosine and ratio.
pub fn synthetic_gradients(spec: &SyntheticSpec, n: usize) -> Result<Vec<(GradientVector, GradientVector)>> {
    spec.validate()?;
    let dim = spec.dim;
    let half = dim / 2;
    let block_u = 0..half;
    let block_g = half..dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shared_u: Vec<f64> = (0..block_u.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let shared_g: Vec<f64> = (0..block_g.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let sin = (1.0 - spec.cos * spec.cos).sqrt();
    let segs = |len| {
        vec![GradSegment {
            name: "synthetic".into(),
            kind: SegmentKind::AdapterB,
            range: 0..len,
        }]
    };

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let g_g = block_vector(&mut rng, dim, block_g.clone(), &shared_g, spec.coherence);
        let mut dir_g = g_g.clone();
        unit(&mut dir_g);
        let mut dir_u = block_vector(&mut rng, dim, block_u.clone(), &shared_u, spec.coherence);
        unit(&mut dir_u);
        let scale = spec.rho * norm(&g_g);
        let g_u: Vec<f64> = dir_g
            .iter()
            .zip(&dir_u)
            .map(|(g, u)| scale * (spec.cos * g + sin * u))
            .collect();
        out.push((
            GradientVector::new(g_u, segs(dim))?,
            GradientVector::new(g_g, segs(dim))?,
        ));
    }
    Ok(out)
}

pub fn synthetic_calibration_samples(spec: &SyntheticSpec, n_batches: usize) -> Result<CalibrationSamples> {
    let grads = synthetic_gradients(spec, n_batches)?;
    let records = grads
        .iter()
        .enumerate()
        .map(|(i, (u, g))| DiagnosticsRecord::from_gradients(i, u, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationSamples {
        records,
        intra_u: consecutive_cosines(grads.iter().map(|(u, _)| u))?,
        intra_g: consecutive_cosines(grads.iter().map(|(_, g)| g))?,
    })
}

/// Inter- versus intra-task cosine statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub inter: SampleSummary,
    pub intra_understanding: SampleSummary,
    pub intra_generation: SampleSummary,
    /// Inter-task cosines against zero.
    pub inter_vs_zero: TTest,
    pub intra_understanding_vs_inter: TTest,
    pub intra_generation_vs_inter: TTest,
    pub cohens_d_understanding: f64,
    pub cohens_d_generation: f64,
}

pub fn null_calibration(records: &[DiagnosticsRecord], intra_u: &[f64], intra_g: &[f64]) -> Result<CalibrationReport> {
    let inter: Vec<f64> = records.iter().map(|r| r.cos).collect();
    for (name, group) in [
        ("inter-task", &inter[..]),
        ("intra-understanding", intra_u),
        ("intra-generation", intra_g),
    ] {
        if group.len() < 2 {
            return Err(Error::Domain(format!(
                "null calibration needs at least 2 {name} cosines, got {}",
                group.len()
            )));
        }
    }
    Ok(CalibrationReport {
        inter: SampleSummary::from_samples(&inter)?,
        intra_understanding: SampleSummary::from_samples(intra_u)?,
        intra_generation: SampleSummary::from_samples(intra_g)?,
        inter_vs_zero: one_sample_t(&inter, 0.0)?,
        intra_understanding_vs_inter: welch_t(intra_u, &inter)?,
        intra_generation_vs_inter: welch_t(intra_g, &inter)?,
        cohens_d_understanding: cohens_d(intra_u, &inter)?,
        cohens_d_generation: cohens_d(intra_g, &inter)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub name: String,
    /// Mean over batches where the layer was not zero-norm flagged; `None` if always flagged.
    pub mean_cos: Option<f64>,
    pub flagged_batches: usize,
}

/// Aggregate view written next to the per-batch CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub batches: usize,
    pub cos: Option<SampleSummary>,
    pub fraction_negative: Option<f64>,
    pub norm_u: Option<SampleSummary>,
    pub norm_g: Option<SampleSummary>,
    pub rho: Option<SampleSummary>,
    /// `mean(‖g_G‖) / mean(‖g_U‖)`
    pub inverse_rho_of_means: Option<f64>,
    pub zero_norm_batches: usize,
    pub per_layer: Vec<LayerSummary>,
    pub calibration: Option<CalibrationReport>,
}

pub fn summarize(samples: &CalibrationSamples) -> DiagnosticsSummary {
    let recs = &samples.records;
    let cos: Vec<f64> = recs.iter().map(|r| r.cos).collect();
    let nu: Vec<f64> = recs.iter().map(|r| r.norm_u).collect();
    let ng: Vec<f64> = recs.iter().map(|r| r.norm_g).collect();
    let rho: Vec<f64> = recs.iter().filter_map(|r| r.rho).collect();
    let mean_nu = crate::util::mean(&nu);
    let mean_ng = crate::util::mean(&ng);
    let mut per_layer = Vec::new();
    if let Some(first) = recs.first() {
        for (k, layer) in first.per_layer.iter().enumerate() {
            let live: Vec<f64> = recs
                .iter()
                .filter(|r| !r.per_layer[k].zero_norm)
                .map(|r| r.per_layer[k].cos)
                .collect();
            per_layer.push(LayerSummary {
                name: layer.name.clone(),
                mean_cos: (!live.is_empty()).then(|| crate::util::mean(&live)),
                flagged_batches: recs.len() - live.len(),
            });
        }
    }
    DiagnosticsSummary {
        batches: recs.len(),
        cos: SampleSummary::from_samples(&cos).ok(),
        fraction_negative: (!cos.is_empty())
            .then(|| cos.iter().filter(|c| **c < 0.0).count() as f64 / cos.len() as f64),
        norm_u: SampleSummary::from_samples(&nu).ok(),
        norm_g: SampleSummary::from_samples(&ng).ok(),
        rho: SampleSummary::from_samples(&rho).ok(),
        inverse_rho_of_means: (mean_nu > 0.0).then(|| mean_ng / mean_nu),
        zero_norm_batches: recs.iter().filter(|r| r.zero_norm).count(),
        per_layer,
        calibration: null_calibration(recs, &samples.intra_u, &samples.intra_g).ok(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per batch; the analytic norm columns are computed from the row's `ρ` and cosine.
pub fn records_to_csv(records: &[DiagnosticsRecord]) -> String {
    let mut out = String::from(
        "batch,cos,norm_u,norm_g,rho,measured_rel_increase,exact_rel_increase,quad_approx,angle_rad,zero_norm",
    );
    if let Some(first) = records.first() {
        for layer in &first.per_layer {
            out.push_str(&format!(",cos:{0},zero:{0}", layer.name));
        }
    }
    out.push('\n');
    for r in records {
        let check = r.norm_check();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}",
            r.batch,
            r.cos,
            r.norm_u,
            r.norm_g,
            fmt_opt(r.rho),
            fmt_opt(r.measured_relative_increase),
            fmt_opt(check.map(|c| c.exact_relative_increase)),
            fmt_opt(check.map(|c| c.quadratic_approx)),
            fmt_opt(check.map(|c| c.angle_rad)),
            r.zero_norm as u8,
        ));
        for layer in &r.per_layer {
            out.push_str(&format!(",{},{}", layer.cos, layer.zero_norm as u8));
        }
        out.push('\n');
    }
    out
}
