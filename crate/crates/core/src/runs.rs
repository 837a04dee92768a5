//! Run orchestration: datasets, single runs, sweeps, post-hoc methods,
//! diagnostics files and reports on disk.
//!
//! Layout under the output root:
//!
//! ```text
//! data/train.jsonl
//! runs/<run id>/{manifest.json, trajectory.csv, summary.json, checkpoint.json, plots/*.svg}
//! post_hoc/<name>/summary.json
//! base/summary.json
//! report/{report.json, report.txt}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balancing::Strategy;
use crate::config::LabConfig;
use crate::data::{generate_generation_pairs, generate_understanding_pairs, Dataset, DatasetHeader, DATASET_MAGIC};
use crate::diagnostics::{
    collect_calibration_samples, null_calibration, records_to_csv, summarize, synthetic_calibration_samples,
    CalibrationReport, CalibrationSamples, DiagnosticsOptions, DiagnosticsSummary,
};
use crate::dpo::{kl_to_reference, KlEstimate, KlOptions, Task};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMetrics, EvalSets};
use crate::model::{init_model, load_checkpoint, save_checkpoint, ModelState};
use crate::plot::run_charts;
use crate::report::{build_report, MethodSamples, ReportDocument};
use crate::trainer::{separate_adapter_eval, soup_interpolate, train_with, TrajectoryPoint, TRAJECTORY_HEADER};

/// Environment variable overriding the default output root.
pub const OUT_ENV: &str = "BDLAB_OUT";
pub const DEFAULT_OUT: &str = "bdlab-out";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Steps averaged for the "final" losses in a run summary.
pub const FINAL_WINDOW: usize = 100;

/// `--out` wins over `BDLAB_OUT`, which wins over the default.
pub fn resolve_out(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_OUT),
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, &s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Seconds since the epoch; `SOURCE_DATE_EPOCH` pins it for reproducible manifests.
fn timestamp() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()) {
        return v;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Builds the training dataset described by the config.
pub fn training_dataset(cfg: &LabConfig) -> Result<Dataset> {
    Dataset::generate(DatasetHeader {
        format: DATASET_MAGIC.into(),
        model: cfg.model.clone(),
        understanding: Some(cfg.data.understanding.clone()),
        generation: Some(cfg.data.generation.clone()),
        generation_mode: cfg.data.generation_mode,
        seed: cfg.data.understanding.rng_seed,
    })
}

/// Held-out evaluation pairs, drawn with offset seeds.
pub fn eval_sets(cfg: &LabConfig) -> Result<EvalSets> {
    Ok(EvalSets {
        understanding: generate_understanding_pairs(&cfg.data.eval_config(Task::Understanding), &cfg.model)?,
        generation: generate_generation_pairs(
            &cfg.data.eval_config(Task::Generation),
            &cfg.model,
            cfg.data.generation_mode,
        )?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Incomplete,
    Complete,
}

/// Paths relative to the output root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPaths {
    pub dataset: String,
    pub checkpoint: String,
    pub trajectory: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub status: RunStatus,
    pub strategy: Strategy,
    pub beta: f64,
    pub seed: u64,
    pub config: LabConfig,
    pub paths: ArtifactPaths,
    pub tool_version: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalLosses {
    pub loss_u: Option<f64>,
    pub loss_g: Option<f64>,
    pub loss_combined: f64,
    pub window: usize,
}

pub fn final_losses(traj: &[TrajectoryPoint], window: usize) -> Option<FinalLosses> {
    if traj.is_empty() {
        return None;
    }
    let tail = &traj[traj.len().saturating_sub(window)..];
    let mean_of = |f: &dyn Fn(&TrajectoryPoint) -> Option<f64>| {
        let v: Vec<f64> = tail.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Some(FinalLosses {
        loss_u: mean_of(&|p| p.loss_u),
        loss_g: mean_of(&|p| p.loss_g),
        loss_combined: mean_of(&|p| Some(p.loss_combined)).unwrap_or(f64::NAN),
        window: tail.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlPair {
    pub understanding: KlEstimate,
    pub generation: KlEstimate,
}

pub fn kl_both(state: &ModelState, sets: &EvalSets, cfg: &LabConfig) -> Result<KlPair> {
    let opts = KlOptions {
        samples_per_context: cfg.kl.samples_per_context,
        seed: cfg.kl.seed,
    };
    Ok(KlPair {
        understanding: kl_to_reference(state, &sets.understanding, Task::Understanding, &opts)?,
        generation: kl_to_reference(state, &sets.generation, Task::Generation, &opts)?,
    })
}

/// Everything a report needs from one trained (or derived) model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    /// Method label used to group seeds in reports.
    pub method: String,
    pub seed: u64,
    pub beta: f64,
    pub non_deployable: bool,
    pub original_lr: f64,
    pub final_losses: Option<FinalLosses>,
    pub final_weights: Option<(f64, f64)>,
    pub kl: Option<KlPair>,
    pub eval: EvalMetrics,
    pub reference_fingerprint: String,
    pub params_fingerprint: String,
}

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

/// One (strategy, β, seed) training job.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub strategy: Strategy,
    pub beta: f64,
    pub seed: u64,
}

impl RunSpec {
    pub fn run_id(&self) -> String {
        format!("{}-b{}-s{}", self.strategy, self.beta, self.seed)
    }

    /// Method label: the strategy, plus β when it differs from the config default.
    pub fn method(&self, default_beta: f64) -> String {
        if self.beta == default_beta {
            self.strategy.to_string()
        } else {
            format!("{}@beta={}", self.strategy, self.beta)
        }
    }
}

pub const DATASET_PATH: &str = "data/train.jsonl";

/// A configured laboratory rooted at an output directory.
pub struct Lab {
    pub cfg: LabConfig,
    pub out: PathBuf,
    dataset: Dataset,
    eval: EvalSets,
}

impl Lab {
    /// Generates the training data (written to `data/train.jsonl`) and the held-out sets.
    pub fn new(cfg: LabConfig, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        let dataset = training_dataset(&cfg)?;
        dataset.write_atomic(&out.join(DATASET_PATH))?;
        let eval = eval_sets(&cfg)?;
        Ok(Self {
            cfg,
            out,
            dataset,
            eval,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn eval(&self) -> &EvalSets {
        &self.eval
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.out.join("runs").join(id)
    }

    /// Trains one run and writes its manifest, trajectory, checkpoint, summary and plots.
    pub fn run(&self, spec: RunSpec) -> Result<RunSummary> {
        let id = spec.run_id();
        let dir = self.run_dir(&id);
        mkdir(&dir)?;
        let rel = |f: &str| format!("runs/{id}/{f}");
        let mut manifest = RunManifest {
            run_id: id.clone(),
            status: RunStatus::Incomplete,
            strategy: spec.strategy,
            beta: spec.beta,
            seed: spec.seed,
            config: self.cfg.clone(),
            paths: ArtifactPaths {
                dataset: DATASET_PATH.into(),
                checkpoint: rel("checkpoint.json"),
                trajectory: rel("trajectory.csv"),
                summary: rel("summary.json"),
            },
            tool_version: TOOL_VERSION.into(),
            timestamp: timestamp(),
        };
        write_json(&dir.join("manifest.json"), &manifest)?;

        let train_cfg = self.cfg.run_train_config(spec.strategy, spec.beta, spec.seed);
        let state = init_model(&self.cfg.run_model_config(spec.seed))?;
        let data_u = self.dataset.task(Task::Understanding);
        let data_g = self.dataset.task(Task::Generation);

        let traj_path = dir.join("trajectory.csv");
        let mut traj_file = fs::File::create(&traj_path).map_err(|e| Error::io(&traj_path, e))?;
        writeln!(traj_file, "{TRAJECTORY_HEADER}").map_err(|e| Error::io(&traj_path, e))?;
        let outcome = train_with(state, &data_u, &data_g, &train_cfg, |p| {
            writeln!(traj_file, "{}", p.csv_row()).map_err(|e| Error::io(&traj_path, e))
        })?;
        drop(traj_file);

        save_checkpoint(&outcome.state, &dir.join("checkpoint.json"))?;
        for (name, svg) in run_charts(&id, &outcome.trajectory) {
            write_file(&dir.join("plots").join(name), &svg)?;
        }
        let summary = RunSummary {
            name: id.clone(),
            method: spec.method(self.cfg.train.beta),
            seed: spec.seed,
            beta: spec.beta,
            non_deployable: false,
            original_lr: train_cfg.original_lr,
            final_losses: final_losses(&outcome.trajectory, FINAL_WINDOW),
            final_weights: Some((outcome.final_weights.w_u, outcome.final_weights.w_g)),
            kl: Some(kl_both(&outcome.state, &self.eval, &self.cfg)?),
            eval: evaluate(&outcome.state, &self.eval)?,
            reference_fingerprint: hex(outcome.state.reference_fingerprint()),
            params_fingerprint: hex(outcome.state.params_fingerprint()),
        };
        write_json(&dir.join("summary.json"), &summary)?;
        manifest.status = RunStatus::Complete;
        write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(summary)
    }

    /// Metrics of the untrained model, written to `base/summary.json`.
    pub fn base(&self) -> Result<RunSummary> {
        let summary = base_summary(&self.cfg, &self.eval)?;
        write_json(&self.out.join("base/summary.json"), &summary)?;
        Ok(summary)
    }

    fn load_state(&self, spec: RunSpec) -> Result<ModelState> {
        load_checkpoint(&self.run_dir(&spec.run_id()).join("checkpoint.json"))
    }

    /// Soups and the composite for one seed, from its single-task checkpoints.
    pub fn post_hoc(&self, seed: u64) -> Result<Vec<RunSummary>> {
        let beta = self.cfg.train.beta;
        let state_u = self.load_state(RunSpec {
            strategy: Strategy::UnderstandingOnly,
            beta,
            seed,
        })?;
        let state_g = self.load_state(RunSpec {
            strategy: Strategy::GenerationOnly,
            beta,
            seed,
        })?;
        let mut out = Vec::new();
        for &lambda in &self.cfg.sweep.soup_lambdas {
            let soup = soup_interpolate(&state_u, &state_g, lambda)?;
            let name = format!("soup_lambda={lambda}");
            let summary = RunSummary {
                name: format!("{name}-s{seed}"),
                method: name,
                seed,
                beta,
                non_deployable: false,
                original_lr: self.cfg.train.original_lr,
                final_losses: None,
                final_weights: None,
                kl: Some(kl_both(&soup, &self.eval, &self.cfg)?),
                eval: evaluate(&soup, &self.eval)?,
                reference_fingerprint: hex(soup.reference_fingerprint()),
                params_fingerprint: hex(soup.params_fingerprint()),
            };
            write_json(
                &self.out.join("post_hoc").join(&summary.name).join("summary.json"),
                &summary,
            )?;
            out.push(summary);
        }
        let composite = separate_adapter_eval(&state_u, &state_g, &self.eval)?;
        let summary = RunSummary {
            name: format!("{}-s{seed}", composite.label),
            method: composite.label.clone(),
            seed,
            beta,
            non_deployable: true,
            original_lr: self.cfg.train.original_lr,
            final_losses: None,
            final_weights: None,
            kl: None,
            eval: composite.metrics,
            reference_fingerprint: hex(state_u.reference_fingerprint()),
            params_fingerprint: format!(
                "{}+{}",
                hex(state_u.params_fingerprint()),
                hex(state_g.params_fingerprint())
            ),
        };
        write_json(
            &self.out.join("post_hoc").join(&summary.name).join("summary.json"),
            &summary,
        )?;
        out.push(summary);
        Ok(out)
    }

    /// All training jobs of a sweep: strategies × seeds, then the β sweep (duplicates removed).
    pub fn sweep_specs(&self) -> Vec<RunSpec> {
        let sw = &self.cfg.sweep;
        let mut specs = Vec::new();
        for &seed in &sw.seeds {
            for &strategy in &sw.strategies {
                specs.push(RunSpec {
                    strategy,
                    beta: self.cfg.train.beta,
                    seed,
                });
            }
        }
        for &beta in &sw.betas {
            for &seed in &sw.seeds {
                let spec = RunSpec {
                    strategy: sw.beta_strategy,
                    beta,
                    seed,
                };
                if !specs.contains(&spec) {
                    specs.push(spec);
                }
            }
        }
        specs
    }

    /// Runs `specs` on up to `jobs` threads; results come back in `specs` order.
    pub fn run_many(&self, specs: &[RunSpec], jobs: usize) -> Result<Vec<RunSummary>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::config("jobs", e.to_string()))?;
        pool.install(|| specs.par_iter().map(|s| self.run(*s)).collect())
    }

    /// Full sweep: training runs, base, post-hoc methods, report and plots.
    pub fn sweep(&self) -> Result<ReportDocument> {
        let specs = self.sweep_specs();
        self.run_many(&specs, self.cfg.sweep.jobs)?;
        self.base()?;
        let has_single = |s: Strategy| self.cfg.sweep.strategies.contains(&s);
        if has_single(Strategy::UnderstandingOnly) && has_single(Strategy::GenerationOnly) {
            for &seed in &self.cfg.sweep.seeds {
                self.post_hoc(seed)?;
            }
        }
        write_report(&self.out)
    }
}

impl Dataset {
    /// Writes through a temporary file so readers never see a half-written dataset.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            mkdir(parent)?;
        }
        let tmp = path.with_extension("jsonl.tmp");
        self.write(&tmp)?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

/// Metrics of the untrained model (independent of the adapter seed).
pub fn base_summary(cfg: &LabConfig, sets: &EvalSets) -> Result<RunSummary> {
    let state = init_model(&cfg.model)?;
    Ok(RunSummary {
        name: "base".into(),
        method: "base".into(),
        seed: cfg.model.rng_seed,
        beta: cfg.train.beta,
        non_deployable: false,
        original_lr: cfg.train.original_lr,
        final_losses: None,
        final_weights: None,
        kl: Some(kl_both(&state, sets, cfg)?),
        eval: evaluate(&state, sets)?,
        reference_fingerprint: hex(state.reference_fingerprint()),
        params_fingerprint: hex(state.params_fingerprint()),
    })
}

/// Summaries of completed runs, post-hoc methods and the base model found under `out`.
pub fn collect_summaries(out: &Path) -> Result<(Option<RunSummary>, Vec<RunSummary>)> {
    let mut found = Vec::new();
    for sub in ["runs", "post_hoc"] {
        let dir = out.join(sub);
        if !dir.is_dir() {
            continue;
        }
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("summary.json").is_file())
            .collect();
        entries.sort();
        for e in entries {
            if sub == "runs" {
                let manifest: RunManifest = read_json(&e.join("manifest.json"))?;
                if manifest.status != RunStatus::Complete {
                    continue;
                }
            }
            found.push(read_json::<RunSummary>(&e.join("summary.json"))?);
        }
    }
    let base_path = out.join("base/summary.json");
    let base = if base_path.is_file() {
        Some(read_json(&base_path)?)
    } else {
        None
    };
    Ok((base, found))
}

/// Groups summaries by method (first-seen order follows the canonical strategy order).
fn method_samples(summaries: &[RunSummary]) -> Vec<MethodSamples> {
    let rank = |m: &str| -> (usize, String) {
        let pos = Strategy::ALL
            .iter()
            .position(|s| s.as_str() == m)
            .unwrap_or(Strategy::ALL.len());
        (pos, m.to_string())
    };
    let mut groups: BTreeMap<(usize, String), MethodSamples> = BTreeMap::new();
    let mut sorted: Vec<&RunSummary> = summaries.iter().collect();
    sorted.sort_by_key(|s| s.seed);
    for s in sorted {
        let entry = groups.entry(rank(&s.method)).or_insert_with(|| MethodSamples {
            name: s.method.clone(),
            non_deployable: s.non_deployable,
            seeds: Vec::new(),
        });
        entry.seeds.push(s.eval.named());
    }
    groups.into_values().collect()
}

/// Config echoed by the first completed training run under `out`.
fn first_run_config(out: &Path) -> Result<Option<LabConfig>> {
    let dir = out.join("runs");
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut manifests: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path().join("manifest.json")))
        .filter(|p| p.is_file())
        .collect();
    manifests.sort();
    for path in manifests {
        let m: RunManifest = read_json(&path)?;
        if m.status == RunStatus::Complete {
            return Ok(Some(m.config));
        }
    }
    Ok(None)
}

/// Builds `report/report.json` and `report/report.txt` from the files under `out`.
/// A missing base summary is recomputed from the runs' config echo.
pub fn write_report(out: &Path) -> Result<ReportDocument> {
    let (base, summaries) = collect_summaries(out)?;
    if summaries.is_empty() {
        return Err(Error::Domain(format!("no runs found under {}", out.display())));
    }
    let cfg = first_run_config(out)?;
    let base = match (base, &cfg) {
        (Some(b), _) => b,
        (None, Some(cfg)) => {
            let b = base_summary(cfg, &eval_sets(cfg)?)?;
            write_json(&out.join("base/summary.json"), &b)?;
            b
        }
        (None, None) => {
            return Err(Error::Domain(format!(
                "no base summary at {} and no completed run to rebuild it from",
                out.join("base/summary.json").display()
            )))
        }
    };
    let config_echo = match &cfg {
        Some(c) => serde_json::to_value(c)?,
        None => serde_json::Value::Null,
    };
    let doc = build_report(&method_samples(&summaries), &base.eval.named(), config_echo)?;
    write_file(&out.join("report/report.json"), &doc.to_json()?)?;
    write_file(&out.join("report/report.txt"), &doc.to_text())?;
    Ok(doc)
}

/// Re-renders the SVG charts of every run with a trajectory under `out`.
pub fn write_plots(out: &Path) -> Result<usize> {
    let dir = out.join("runs");
    if !dir.is_dir() {
        return Err(Error::Domain(format!("no runs found under {}", out.display())));
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("trajectory.csv").is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Error::Domain(format!("no runs found under {}", out.display())));
    }
    for run in &runs {
        let path = run.join("trajectory.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let traj = crate::trainer::trajectory_from_csv(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let id = run
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        for (name, svg) in run_charts(&id, &traj) {
            write_file(&run.join("plots").join(name), &svg)?;
        }
    }
    Ok(runs.len())
}

/// Gradient diagnostics on a model (or on synthetic vectors), with files written to `dir`.
pub fn run_diagnostics(
    cfg: &LabConfig,
    state: Option<&ModelState>,
    synthetic: bool,
    dir: &Path,
) -> Result<(CalibrationSamples, DiagnosticsSummary)> {
    let samples = if synthetic {
        synthetic_calibration_samples(&cfg.diagnostics.synthetic, cfg.diagnostics.n_batches)?
    } else {
        let fresh;
        let state = match state {
            Some(s) => s,
            None => {
                fresh = init_model(&cfg.model)?;
                &fresh
            }
        };
        let data = training_dataset(cfg)?;
        let opts = DiagnosticsOptions {
            beta: cfg.train.beta,
            include_heads: cfg.diagnostics.include_heads,
            seed: cfg.diagnostics.seed,
        };
        collect_calibration_samples(
            state,
            &data.task(Task::Understanding),
            &data.task(Task::Generation),
            cfg.diagnostics.n_batches,
            &opts,
        )?
    };
    let summary = summarize(&samples);
    write_file(&dir.join("diagnostics.csv"), &records_to_csv(&samples.records))?;
    write_json(&dir.join("diagnostics_summary.json"), &summary)?;
    Ok((samples, summary))
}

/// Diagnostics plus the inter- versus intra-task null calibration, written as
/// `calibration.json` next to the diagnostics files.
pub fn run_calibration(
    cfg: &LabConfig,
    state: Option<&ModelState>,
    synthetic: bool,
    dir: &Path,
) -> Result<CalibrationReport> {
    let (samples, _) = run_diagnostics(cfg, state, synthetic, dir)?;
    let report = null_calibration(&samples.records, &samples.intra_u, &samples.intra_g)?;
    write_json(&dir.join("calibration.json"), &report)?;
    Ok(report)
}
