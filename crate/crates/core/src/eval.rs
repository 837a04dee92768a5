//! Held-out evaluation metrics.
//!
//! Every metric is a per-pair sample so that methods can be compared with
//! Welch's t-test against the base model:
//!
//! * `*_logprob` — mean per-token log-probability of the chosen response;
//! * `*_margin` — implicit reward margin divided by the chosen length.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dpo::{PreferencePair, Task};
use crate::error::{Error, Result};
use crate::model::{ModelState, ParamSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub chosen_logprob: Vec<f64>,
    pub margin: Vec<f64>,
}

/// Metrics for whichever tasks were evaluated.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub understanding: Option<TaskMetrics>,
    pub generation: Option<TaskMetrics>,
}

impl EvalMetrics {
    /// Flattened `metric name → per-pair samples`, in name order.
    pub fn named(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (task, m) in [
            (Task::Understanding, &self.understanding),
            (Task::Generation, &self.generation),
        ] {
            if let Some(m) = m {
                out.insert(format!("{}_logprob", task.as_str()), m.chosen_logprob.clone());
                out.insert(format!("{}_margin", task.as_str()), m.margin.clone());
            }
        }
        out
    }
}

pub fn evaluate_task(state: &ModelState, pairs: &[PreferencePair]) -> Result<TaskMetrics> {
    if pairs.is_empty() {
        return Err(Error::Domain("evaluation set is empty".into()));
    }
    let rows: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|pair| -> Result<(f64, f64)> {
            let responses = [pair.chosen.clone(), pair.rejected.clone()];
            let live = state.trace(&pair.context, &responses, ParamSource::Live)?;
            let reference = state.trace(&pair.context, &responses, ParamSource::Reference)?;
            let (lp, rp) = (live.logprobs(), reference.logprobs());
            let len = pair.chosen.len() as f64;
            let margin = (lp[0] - rp[0]) - (lp[1] - rp[1]);
            Ok((lp[0] / len, margin / len))
        })
        .collect::<Result<_>>()?;
    Ok(TaskMetrics {
        chosen_logprob: rows.iter().map(|r| r.0).collect(),
        margin: rows.iter().map(|r| r.1).collect(),
    })
}

/// Held-out pairs for both tasks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalSets {
    pub understanding: Vec<PreferencePair>,
    pub generation: Vec<PreferencePair>,
}

pub fn evaluate(state: &ModelState, sets: &EvalSets) -> Result<EvalMetrics> {
    Ok(EvalMetrics {
        understanding: (!sets.understanding.is_empty())
            .then(|| evaluate_task(state, &sets.understanding))
            .transpose()?,
        generation: (!sets.generation.is_empty())
            .then(|| evaluate_task(state, &sets.generation))
            .transpose()?,
    })
}
