//! Click prediction, perplexity and parameter recovery.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::PROB_FLOOR;
use crate::compiler::Evaluator;
use crate::data::{Session, SessionLog};
use crate::em::{FittedModel, NeumaierSum, CHUNK};
use crate::error::{GcmError, Result};
use crate::models::{ATTRACTION, SATISFACTION};
use crate::simulator::GroundTruth;

/// One filtering step: returns `P(y_t = 1 | y_{<t})` and the filtered state
/// distribution after observing `y_t`, or `None` when `y_t` is impossible.
fn filter_step(ev: &Evaluator<'_>, click_states: &[usize], session: &Session, t: usize, state: &[f64]) -> Result<(f64, Option<Vec<f64>>)> {
    let m = ev.transitions(session, t)?;
    let mut next = vec![0.0; state.len()];
    for &(from, to, v) in &m.entries {
        next[to] += state[from] * v;
    }
    let total: f64 = next.iter().sum();
    let c = click_states[t];
    let q = if total > 0.0 { (next[c] / total).clamp(0.0, 1.0) } else { 0.0 };
    let clicked = session.clicked(t);
    for (k, v) in next.iter_mut().enumerate() {
        if (k == c) != clicked {
            *v = 0.0;
        }
    }
    let mass: f64 = next.iter().sum();
    if mass <= 0.0 {
        return Ok((q, None));
    }
    next.iter_mut().for_each(|v| *v /= mass);
    Ok((q, Some(next)))
}

fn initial_state(k: usize, click_states: &[usize]) -> Vec<f64> {
    let mut s = vec![0.0; k];
    s[click_states[0]] = 1.0;
    s
}

/// `P(y_t = 1 | y_{1:t-1})` for every position, from the forward filter.
pub fn predict_click_probs(model: &FittedModel, session: &Session) -> Result<Vec<f64>> {
    let ev = model.evaluator()?;
    predict_with(&ev, model.definition.space.click_states(), session, 0)
}

fn predict_with(ev: &Evaluator<'_>, click_states: &[usize], session: &Session, index: usize) -> Result<Vec<f64>> {
    let mut state = initial_state(ev.compiled().states, click_states);
    let mut out = Vec::with_capacity(session.len());
    for t in 1..=session.len() {
        let (q, next) = filter_step(ev, click_states, session, t, &state)?;
        out.push(q);
        if t < session.len() {
            state = next.ok_or(GcmError::Degenerate { session: index, position: t })?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub per_rank: Vec<f64>,
    /// Mean of the per-rank values.
    pub overall: f64,
    /// Per-rank perplexity of always predicting 0.5.
    pub baseline: f64,
    pub sessions: usize,
    /// Predictions of exactly 0 or 1 contradicted by the outcome; each was
    /// clamped away from the boundary before scoring.
    pub clamped: usize,
}

struct RankSums {
    sums: Vec<NeumaierSum>,
    clamped: usize,
}

/// Per-rank click perplexity `2^(−mean log₂ P(y_t))`.
pub fn perplexity(model: &FittedModel, log: &SessionLog) -> Result<PerplexityReport> {
    if log.is_empty() {
        return Err(GcmError::InvalidArgument("cannot score an empty log".into()));
    }
    check_schema(model, log)?;
    let ev = model.evaluator()?;
    let click_states = model.definition.space.click_states();
    let t_len = log.list_size;
    let parts: Vec<Result<RankSums>> = log
        .sessions
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = RankSums {
                sums: vec![NeumaierSum::default(); t_len],
                clamped: 0,
            };
            for s in chunk {
                let mut state = initial_state(ev.compiled().states, click_states);
                for t in 1..=t_len {
                    let (q, next) = filter_step(&ev, click_states, s, t, &state)?;
                    let y = s.clicked(t);
                    let mut p = if y { q } else { 1.0 - q };
                    if p <= 0.0 {
                        p = PROB_FLOOR;
                        acc.clamped += 1;
                    }
                    acc.sums[t - 1].add(p.log2());
                    // After an impossible outcome keep the unconditioned
                    // prediction so the rest of the session can be scored.
                    state = match next {
                        Some(n) => n,
                        None => advance(&ev, s, t, &state)?,
                    };
                }
            }
            Ok(acc)
        })
        .collect();
    let mut sums = vec![NeumaierSum::default(); t_len];
    let mut clamped = 0;
    for p in parts {
        let p = p?;
        for (a, b) in sums.iter_mut().zip(&p.sums) {
            a.add(b.value());
        }
        clamped += p.clamped;
    }
    let n = log.len() as f64;
    let per_rank: Vec<f64> = sums.iter().map(|s| (-s.value() / n).exp2()).collect();
    let overall = per_rank.iter().sum::<f64>() / t_len as f64;
    Ok(PerplexityReport {
        per_rank,
        overall,
        baseline: 2.0,
        sessions: log.len(),
        clamped,
    })
}

fn advance(ev: &Evaluator<'_>, s: &Session, t: usize, state: &[f64]) -> Result<Vec<f64>> {
    let m = ev.transitions(s, t)?;
    let mut next = vec![0.0; state.len()];
    for &(from, to, v) in &m.entries {
        next[to] += state[from] * v;
    }
    let total: f64 = next.iter().sum();
    if total > 0.0 {
        next.iter_mut().for_each(|v| *v /= total);
    }
    Ok(next)
}

/// Data must match the model's list size and covariate columns.
pub fn check_schema(model: &FittedModel, log: &SessionLog) -> Result<()> {
    if log.list_size != model.definition.list_size {
        return Err(GcmError::schema(format!(
            "data has list size {}, model `{}` expects {}",
            log.list_size, model.definition.name, model.definition.list_size
        )));
    }
    for spec in &model.definition.params {
        for c in spec.activation.columns() {
            if log.covariate_index(c).is_none() {
                return Err(GcmError::schema(format!(
                    "parameter `{}` needs covariate column `{c}`, which the data lacks",
                    spec.name
                )));
            }
        }
    }
    log.validate()
}

/// Aligns a log's item indices with a fitted model's item table.
pub fn align_items(model: &FittedModel, log: &SessionLog) -> SessionLog {
    log.reindexed(&model.item_names)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterError {
    pub parameter: String,
    pub slot: String,
    /// Item name for per-item parameters.
    pub item: Option<String>,
    pub fitted: f64,
    pub truth: f64,
    pub abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub errors: Vec<ParameterError>,
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
}

impl RecoveryReport {
    /// Mean absolute error over one parameter, optionally restricted to items.
    pub fn mean_for(&self, parameter: &str, keep: impl Fn(&ParameterError) -> bool) -> Option<f64> {
        let sel: Vec<f64> = self
            .errors
            .iter()
            .filter(|e| e.parameter == parameter && keep(e))
            .map(|e| e.abs_error)
            .collect();
        (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
    }
}

/// Absolute errors of every constant parameter against the simulator truth.
pub fn recovery_error(fitted: &FittedModel, truth: &GroundTruth) -> Result<RecoveryReport> {
    let truth_def = truth.definition()?;
    let truth_w = truth.weights(&truth_def)?;
    let truth_items: HashMap<&str, usize> = truth
        .item_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut errors = Vec::new();
    for (b, spec) in fitted.definition.params.iter().enumerate() {
        let tb = truth_def.param_index(&spec.name).ok_or_else(|| {
            GcmError::schema(format!("ground truth has no parameter `{}`", spec.name))
        })?;
        if !spec.activation.is_constant() {
            return Err(GcmError::schema(format!(
                "parameter `{}` is not a constant table and cannot be compared",
                spec.name
            )));
        }
        let per_item = spec.name == ATTRACTION || spec.name == SATISFACTION;
        for slot in 0..spec.slots {
            let (item, ts) = if per_item {
                let name = fitted.item_names.get(slot).ok_or_else(|| {
                    GcmError::schema(format!("`{}` slot {slot} has no item name", spec.name))
                })?;
                let &ti = truth_items
                    .get(name.as_str())
                    .ok_or_else(|| GcmError::schema(format!("item `{name}` is unknown to the ground truth")))?;
                (Some(name.clone()), ti)
            } else {
                if spec.slots != truth_def.params[tb].slots {
                    return Err(GcmError::schema(format!(
                        "`{}` has {} slots, ground truth has {}",
                        spec.name, spec.slots, truth_def.params[tb].slots
                    )));
                }
                (None, slot)
            };
            let f = fitted.weights.blocks[b][slot][0];
            let t = truth_w.blocks[tb][ts][0];
            errors.push(ParameterError {
                parameter: spec.name.clone(),
                slot: spec.slot_label(slot),
                item,
                fitted: f,
                truth: t,
                abs_error: (f - t).abs(),
            });
        }
    }
    let n = errors.len().max(1) as f64;
    Ok(RecoveryReport {
        mean_abs_error: errors.iter().map(|e| e.abs_error).sum::<f64>() / n,
        max_abs_error: errors.iter().map(|e| e.abs_error).fold(0.0, f64::max),
        errors,
    })
}
