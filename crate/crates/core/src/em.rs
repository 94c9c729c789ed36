//! Forward-backward E-step, weight aggregation, M-step dispatch and the EM
//! loop.
//!
//! Columns of the forward table are rescaled to sum to one and the scale
//! factors `c_t` are kept, so the session log-likelihood is `Σ_t ln c_t` and
//! the backward table uses the same factors. With that scaling
//! `α̂_t(k) β̂_t(k)` is the state posterior and
//!
//! ```text
//! H_t(k', k) = α̂_{t-1}(k') M_t(k', k) [y_t = (k = C_t)] β̂_t(k) / c_t
//! ```
//!
//! is the posterior probability of the transition `k' → k` at `t`.

use ndarray::{Array2, ShapeBuilder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{solve_closed_form, solve_numeric, ActivationKind, MStepProblem, SolverSettings};
use crate::compiler::{CompiledTransitions, Evaluator, ParameterSpec, SessionSteps, Slot, SparseStep, TransitionMatrix, Weights};
use crate::data::{Session, SessionLog};
use crate::error::{GcmError, Result};
use crate::models::ModelDefinition;

/// Sessions per E-step work unit. Partial results are always reduced in
/// chunk order, so the outcome does not depend on the thread count.
pub const CHUNK: usize = 512;

/// Whether `k` is consistent with the click outcome at `t ≥ 1`.
#[inline]
fn consistent(k: usize, click_state: usize, clicked: bool) -> bool {
    (k == click_state) == clicked
}

/// `D`: `D[k, t] = 1` iff `k` is the click state at position `t`.
pub fn click_table(states: usize, click_states: &[usize]) -> Array2<f64> {
    let mut d = Array2::zeros((states, click_states.len()));
    for (t, &c) in click_states.iter().enumerate() {
        d[[c, t]] = 1.0;
    }
    d
}

/// Scaled forward table and its scale factors.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    /// `K × (T+1)`; every column sums to one.
    pub alpha: Array2<f64>,
    /// `c_1 … c_T`.
    pub scales: Vec<f64>,
}

impl Forward {
    pub fn loglik(&self) -> f64 {
        self.scales.iter().map(|c| c.ln()).sum()
    }
}

fn check_inputs<S: SparseStep>(transitions: &[S], click_states: &[usize], clicks: &[bool]) -> Result<usize> {
    let t_len = clicks.len();
    if transitions.len() != t_len {
        return Err(GcmError::Dimension {
            expected: t_len,
            found: transitions.len(),
        });
    }
    if click_states.len() != t_len + 1 {
        return Err(GcmError::Dimension {
            expected: t_len + 1,
            found: click_states.len(),
        });
    }
    Ok(transitions.first().map_or(click_states[0] + 1, |m| m.states()))
}

/// Column-major `K × (T+1)` table so each position is a contiguous slice.
fn table(k: usize, cols: usize, data: Vec<f64>) -> Array2<f64> {
    Array2::from_shape_vec((k, cols).f(), data).expect("length matches shape")
}

/// Forward recursion. `session` only labels a degeneracy error.
pub fn forward<S: SparseStep>(transitions: &[S], click_states: &[usize], clicks: &[bool], session: usize) -> Result<Forward> {
    let k = check_inputs(transitions, click_states, clicks)?;
    let t_len = clicks.len();
    let mut alpha = vec![0.0; k * (t_len + 1)];
    alpha[click_states[0]] = 1.0;
    let mut scales = Vec::with_capacity(t_len);
    for t in 1..=t_len {
        let (done, rest) = alpha.split_at_mut(t * k);
        let prev = &done[(t - 1) * k..];
        let next = &mut rest[..k];
        transitions[t - 1].for_each_entry(|from, to, v| {
            let a = prev[from];
            if a != 0.0 {
                next[to] += a * v;
            }
        });
        let c_t = click_states[t];
        let mut sum = 0.0;
        for (j, v) in next.iter_mut().enumerate() {
            if !consistent(j, c_t, clicks[t - 1]) {
                *v = 0.0;
            }
            sum += *v;
        }
        if sum <= 0.0 {
            return Err(GcmError::Degenerate { session, position: t });
        }
        if !sum.is_finite() {
            return Err(GcmError::NumericGuard(format!(
                "non-finite forward mass in session {session} at position {t}"
            )));
        }
        next.iter_mut().for_each(|v| *v /= sum);
        scales.push(sum);
    }
    Ok(Forward {
        alpha: table(k, t_len + 1, alpha),
        scales,
    })
}

/// Backward recursion using the forward scale factors.
pub fn backward<S: SparseStep>(transitions: &[S], click_states: &[usize], clicks: &[bool], scales: &[f64]) -> Result<Array2<f64>> {
    let k = check_inputs(transitions, click_states, clicks)?;
    let t_len = clicks.len();
    if scales.len() != t_len {
        return Err(GcmError::Dimension {
            expected: t_len,
            found: scales.len(),
        });
    }
    let mut beta = vec![0.0; k * (t_len + 1)];
    beta[t_len * k..].fill(1.0);
    for t in (1..=t_len).rev() {
        let c_t = click_states[t];
        let clicked = clicks[t - 1];
        let scale = scales[t - 1];
        let (head, tail) = beta.split_at_mut(t * k);
        let out = &mut head[(t - 1) * k..];
        let next = &tail[..k];
        transitions[t - 1].for_each_entry(|from, to, v| {
            if consistent(to, c_t, clicked) {
                out[from] += v * next[to] / scale;
            }
        });
    }
    Ok(table(k, t_len + 1, beta))
}

/// `H_t` for `t = 1..=T`, one value per transition entry, in entry order.
pub fn expected_transitions<S: SparseStep>(
    transitions: &[S],
    fwd: &Forward,
    beta: &Array2<f64>,
    click_states: &[usize],
    clicks: &[bool],
) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    expected_transitions_into(transitions, fwd, beta, click_states, clicks, &mut out);
    out
}

fn expected_transitions_into<S: SparseStep>(
    transitions: &[S],
    fwd: &Forward,
    beta: &Array2<f64>,
    click_states: &[usize],
    clicks: &[bool],
    out: &mut Vec<Vec<f64>>,
) {
    out.resize_with(transitions.len(), Vec::new);
    for (i, (m, ht)) in transitions.iter().zip(out.iter_mut()).enumerate() {
        let t = i + 1;
        let c_t = click_states[t];
        let clicked = clicks[t - 1];
        let scale = fwd.scales[t - 1];
        let prev = fwd.alpha.column(t - 1);
        let next = beta.column(t);
        ht.clear();
        m.for_each_entry(|from, to, v| {
            let a = prev[from];
            ht.push(if a != 0.0 && consistent(to, c_t, clicked) {
                a * v * next[to] / scale
            } else {
                0.0
            });
        });
    }
}

/// `ζ[k, t] = P(z_t = k | y)`.
pub fn state_posteriors(fwd: &Forward, beta: &Array2<f64>) -> Array2<f64> {
    &fwd.alpha * beta
}

pub fn session_loglik(fwd: &Forward) -> f64 {
    fwd.loglik()
}

/// All E-step tables for one session.
#[derive(Clone, Debug, PartialEq)]
pub struct EmWorkspace {
    pub forward: Forward,
    pub beta: Array2<f64>,
    pub h: Vec<Vec<f64>>,
}

impl EmWorkspace {
    pub fn compute<S: SparseStep>(
        transitions: &[S],
        click_states: &[usize],
        clicks: &[bool],
        session: usize,
    ) -> Result<Self> {
        let forward = forward(transitions, click_states, clicks, session)?;
        let beta = backward(transitions, click_states, clicks, &forward.scales)?;
        let h = expected_transitions(transitions, &forward, &beta, click_states, clicks);
        Ok(EmWorkspace { forward, beta, h })
    }

    pub fn loglik(&self) -> f64 {
        self.forward.loglik()
    }

    /// `H_t` as a dense `K × K` matrix.
    pub fn h_dense(&self, transitions: &[TransitionMatrix], t: usize) -> Array2<f64> {
        let m = &transitions[t - 1];
        let mut out = Array2::zeros((m.k, m.k));
        for (&(from, to, _), &h) in m.entries.iter().zip(&self.h[t - 1]) {
            out[[from, to]] += h;
        }
        out
    }
}

/// Signed weight of one parameter occurrence `(session, t, p)`: the posterior
/// mass of transitions where it enters as `ϑ` (`plus`) and as `1 − ϑ`
/// (`minus`, stored as a magnitude). Both can be nonzero when a parameter
/// enters a row with either sign.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub session: usize,
    pub t: usize,
    pub block: usize,
    pub slot: usize,
    pub x: Vec<f64>,
    pub plus: f64,
    pub minus: f64,
}

impl WeightEntry {
    /// `w⁺ − w⁻`.
    pub fn signed(&self) -> f64 {
        self.plus - self.minus
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightTensor {
    pub entries: Vec<WeightEntry>,
}

/// Weight entries of one session from its `H` tables.
pub fn session_weights(ev: &Evaluator<'_>, session: &Session, index: usize, h: &[Vec<f64>]) -> Vec<WeightEntry> {
    let compiled = ev.compiled();
    let mut out = Vec::new();
    for t in 1..=compiled.list_size() {
        let step = compiled.step(t);
        let ht = &h[t - 1];
        for (p, r) in step.params.iter().enumerate() {
            let (mut plus, mut minus) = (0.0, 0.0);
            for &(e, s) in &step.activation[p] {
                if s > 0 {
                    plus += ht[e];
                } else {
                    minus += ht[e];
                }
            }
            out.push(WeightEntry {
                session: index,
                t,
                block: r.block,
                slot: ev.slot(session, t, r),
                x: ev.covariates(session, t, r),
                plus,
                minus,
            });
        }
    }
    out
}

/// Adds one session's weights straight into `out`, skipping the
/// intermediate entries.
fn accumulate_session(ev: &Evaluator<'_>, session: &Session, h: &[Vec<f64>], out: &mut ParameterWeights) {
    let compiled = ev.compiled();
    for t in 1..=compiled.list_size() {
        let step = compiled.step(t);
        let ht = &h[t - 1];
        for (p, r) in step.params.iter().enumerate() {
            let (mut plus, mut minus) = (0.0, 0.0);
            for &(e, s) in &step.activation[p] {
                if s > 0 {
                    plus += ht[e];
                } else {
                    minus += ht[e];
                }
            }
            let slot = ev.slot(session, t, r);
            match &mut out.blocks[r.block] {
                BlockWeights::Constant { plus: hp, minus: hm } => {
                    if slot < hp.len() {
                        hp[slot] += plus;
                        hm[slot] += minus;
                    }
                }
                BlockWeights::Rows(problems) => {
                    if let Some(prob) = problems.get_mut(slot) {
                        let x = ev.covariates(session, t, r);
                        prob.push(x.clone(), plus);
                        prob.push(x, -minus);
                    }
                }
            }
        }
    }
}

/// Per-slot M-step inputs of one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockWeights {
    /// Aggregated `(h⁺, h⁻)` per slot.
    Constant { plus: Vec<f64>, minus: Vec<f64> },
    /// Weighted log-loss rows per slot.
    Rows(Vec<MStepProblem>),
}

/// Sufficient statistics for every M-step.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterWeights {
    pub blocks: Vec<BlockWeights>,
}

impl ParameterWeights {
    pub fn zeros(specs: &[ParameterSpec]) -> Self {
        ParameterWeights {
            blocks: specs
                .iter()
                .map(|s| match s.activation {
                    ActivationKind::Constant => BlockWeights::Constant {
                        plus: vec![0.0; s.slots],
                        minus: vec![0.0; s.slots],
                    },
                    _ => BlockWeights::Rows(vec![MStepProblem::new(); s.slots]),
                })
                .collect(),
        }
    }

    /// Adds one entry; slots outside the block (unseen items) are ignored.
    pub fn add(&mut self, e: WeightEntry) {
        match &mut self.blocks[e.block] {
            BlockWeights::Constant { plus, minus } => {
                if e.slot < plus.len() {
                    plus[e.slot] += e.plus;
                    minus[e.slot] += e.minus;
                }
            }
            BlockWeights::Rows(problems) => {
                if let Some(p) = problems.get_mut(e.slot) {
                    p.push(e.x.clone(), e.plus);
                    p.push(e.x, -e.minus);
                }
            }
        }
    }

    /// Appends `other`, which must come later in session order.
    pub fn merge(&mut self, other: ParameterWeights) {
        for (a, b) in self.blocks.iter_mut().zip(other.blocks) {
            match (a, b) {
                (BlockWeights::Constant { plus, minus }, BlockWeights::Constant { plus: p2, minus: m2 }) => {
                    plus.iter_mut().zip(p2).for_each(|(x, y)| *x += y);
                    minus.iter_mut().zip(m2).for_each(|(x, y)| *x += y);
                }
                (BlockWeights::Rows(a), BlockWeights::Rows(b)) => {
                    for (pa, pb) in a.iter_mut().zip(b) {
                        pa.rows.extend(pb.rows);
                    }
                }
                _ => unreachable!("blocks built from the same specs"),
            }
        }
    }

    /// `(h⁺, h⁻)` of one slot, summed over rows for non-constant blocks.
    pub fn totals(&self, block: usize, slot: usize) -> (f64, f64) {
        match &self.blocks[block] {
            BlockWeights::Constant { plus, minus } => (plus[slot], minus[slot]),
            BlockWeights::Rows(p) => p[slot].rows.iter().fold((0.0, 0.0), |(a, b), r| {
                if r.w > 0.0 {
                    (a + r.w, b)
                } else {
                    (a, b - r.w)
                }
            }),
        }
    }
}

/// Reduces a weight tensor to per-slot M-step inputs.
pub fn aggregate_weights(tensor: &WeightTensor, specs: &[ParameterSpec]) -> ParameterWeights {
    let mut out = ParameterWeights::zeros(specs);
    for e in &tensor.entries {
        out.add(e.clone());
    }
    out
}

/// Compensated summation, so batch log-likelihoods are stable enough for
/// tight monotonicity checks.
#[derive(Clone, Copy, Debug, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

struct Partial {
    loglik: NeumaierSum,
    weights: Option<ParameterWeights>,
}

/// One E-step over a log: batch log-likelihood and, when `collect` is set,
/// the aggregated weights.
pub fn e_step(ev: &Evaluator<'_>, log: &SessionLog, click_states: &[usize], collect: bool) -> Result<(f64, Option<ParameterWeights>)> {
    let partials: Vec<Result<Partial>> = log
        .sessions
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut part = Partial {
                loglik: NeumaierSum::default(),
                weights: collect.then(|| ParameterWeights::zeros(ev.specs())),
            };
            let mut steps = SessionSteps::default();
            let mut h = Vec::new();
            for (j, s) in chunk.iter().enumerate() {
                let index = ci * CHUNK + j;
                ev.session_steps(s, Some(click_states), &mut steps)?;
                let m = steps.views();
                let fwd = forward(&m, click_states, &s.clicks, index)?;
                part.loglik.add(fwd.loglik());
                if let Some(w) = &mut part.weights {
                    let beta = backward(&m, click_states, &s.clicks, &fwd.scales)?;
                    expected_transitions_into(&m, &fwd, &beta, click_states, &s.clicks, &mut h);
                    accumulate_session(ev, s, &h, w);
                }
            }
            Ok(part)
        })
        .collect();
    let mut loglik = NeumaierSum::default();
    let mut weights: Option<ParameterWeights> = None;
    for p in partials {
        let p = p?;
        loglik.add(p.loglik.value());
        match (&mut weights, p.weights) {
            (None, w) => weights = w,
            (Some(acc), Some(w)) => acc.merge(w),
            (Some(_), None) => {}
        }
    }
    if collect && weights.is_none() {
        weights = Some(ParameterWeights::zeros(ev.specs()));
    }
    Ok((loglik.value(), weights))
}

/// How covariate-free constant parameters are updated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantSolver {
    #[default]
    ClosedForm,
    Numeric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub epsilon: f64,
    pub max_iter: usize,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    pub constant_solver: ConstantSolver,
    pub solver: SolverSettings,
    /// Starting weights; the activation defaults when absent.
    pub initial: Option<Weights>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            epsilon: 1e-4,
            max_iter: 200,
            threads: None,
            constant_solver: ConstantSolver::ClosedForm,
            solver: SolverSettings::default(),
            initial: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loglik: f64,
    /// `None` for the starting point.
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    /// Log-likelihood at the starting weights; absent for models that were
    /// never fitted.
    pub initial_loglik: Option<f64>,
    /// `loglik_trace[i]` is the log-likelihood after M-step `i + 1`.
    pub loglik_trace: Vec<f64>,
    pub delta_trace: Vec<f64>,
    pub converged: bool,
}

impl FitReport {
    pub fn final_loglik(&self) -> f64 {
        self.loglik_trace.last().copied().or(self.initial_loglik).unwrap_or(f64::NAN)
    }

    pub fn records(&self) -> Vec<IterationRecord> {
        let mut out: Vec<IterationRecord> = self
            .initial_loglik
            .map(|loglik| IterationRecord {
                iteration: 0,
                loglik,
                delta: None,
            })
            .into_iter()
            .collect();
        out.extend(
            self.loglik_trace
                .iter()
                .zip(&self.delta_trace)
                .enumerate()
                .map(|(i, (&loglik, &delta))| IterationRecord {
                    iteration: i + 1,
                    loglik,
                    delta: Some(delta),
                }),
        );
        out
    }

    /// Largest drop between consecutive log-likelihoods (0 when monotone).
    pub fn worst_decrease(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let mut lls = self.initial_loglik.iter().chain(&self.loglik_trace);
        let Some(&first) = lls.next() else { return 0.0 };
        let mut prev = first;
        for &l in lls {
            worst = worst.max(prev - l);
            prev = l;
        }
        worst
    }
}

/// What an observer sees after each M-step.
#[derive(Debug)]
pub struct IterationInfo<'a> {
    pub iteration: usize,
    /// Log-likelihood at `before`.
    pub loglik: f64,
    pub delta: f64,
    pub before: &'a Weights,
    pub after: &'a Weights,
    pub statistics: &'a ParameterWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FittedModel {
    pub definition: ModelDefinition,
    pub compiled: CompiledTransitions,
    pub weights: Weights,
    pub item_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub report: FitReport,
}

impl FittedModel {
    /// Wraps fixed weights, e.g. ground truth, without fitting.
    pub fn from_weights(
        definition: ModelDefinition,
        weights: Weights,
        item_names: Vec<String>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        weights.check_shape(&definition.params)?;
        let compiled = definition.compile()?;
        Ok(FittedModel {
            definition,
            compiled,
            weights,
            item_names,
            covariate_names,
            report: FitReport {
                iterations: 0,
                initial_loglik: None,
                loglik_trace: Vec::new(),
                delta_trace: Vec::new(),
                converged: false,
            },
        })
    }

    pub fn evaluator(&self) -> Result<Evaluator<'_>> {
        Evaluator::new(&self.compiled, &self.definition.params, &self.weights, &self.covariate_names)
    }

    /// Scalar value of a constant parameter slot.
    pub fn constant(&self, name: &str, slot: usize) -> Option<f64> {
        let b = self.definition.param_index(name)?;
        match self.definition.params[b].activation {
            ActivationKind::Constant => self.weights.blocks[b].get(slot).map(|w| w[0]),
            _ => None,
        }
    }
}

fn slot_name(spec: &ParameterSpec, slot: usize) -> String {
    format!("{}[{}]", spec.name, spec.slot_label(slot))
}

fn ensure_finite(spec: &ParameterSpec, slot: usize, iteration: usize, theta: &[f64]) -> Result<()> {
    if theta.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GcmError::NonFinite {
            parameter: slot_name(spec, slot),
            iteration,
            detail: format!("M-step produced {theta:?}"),
        })
    }
}

/// Maximises each parameter's weighted log-loss given the E-step statistics.
pub fn m_step(
    specs: &[ParameterSpec],
    current: &Weights,
    stats: &ParameterWeights,
    options: &FitOptions,
    iteration: usize,
) -> Result<Weights> {
    let blocks = specs
        .iter()
        .zip(&current.blocks)
        .zip(&stats.blocks)
        .map(|((spec, old), st)| {
            (0..spec.slots)
                .into_par_iter()
                .map(|slot| {
                    let old_theta = &old[slot];
                    let problem = match st {
                        BlockWeights::Constant { plus, minus } => {
                            if options.constant_solver == ConstantSolver::ClosedForm {
                                let theta = solve_closed_form(plus[slot], minus[slot])
                                    .map(|v| vec![v])
                                    .unwrap_or_else(|| old_theta.clone());
                                ensure_finite(spec, slot, iteration, &theta)?;
                                return Ok(theta);
                            }
                            MStepProblem::from_totals(plus[slot], minus[slot])
                        }
                        BlockWeights::Rows(p) => p[slot].clone(),
                    };
                    if problem.is_empty() {
                        return Ok(old_theta.clone());
                    }
                    let sol = solve_numeric(&spec.activation, &problem, old_theta, &options.solver).map_err(|e| {
                        GcmError::NonFinite {
                            parameter: slot_name(spec, slot),
                            iteration,
                            detail: e.to_string(),
                        }
                    })?;
                    ensure_finite(spec, slot, iteration, &sol.theta)?;
                    Ok(sol.theta)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Weights { blocks })
}

fn check_fit_inputs(def: &ModelDefinition, compiled: &CompiledTransitions, log: &SessionLog, options: &FitOptions) -> Result<()> {
    if !(options.epsilon > 0.0) {
        return Err(GcmError::InvalidArgument(format!(
            "epsilon must be positive, got {}",
            options.epsilon
        )));
    }
    if log.list_size != def.list_size {
        return Err(GcmError::schema(format!(
            "data has list size {}, model `{}` expects {}",
            log.list_size, def.name, def.list_size
        )));
    }
    log.validate()?;
    for step in &compiled.steps {
        for r in step.params.iter().filter(|r| r.slot == Slot::Item) {
            let spec = &def.params[r.block];
            if spec.slots < log.item_count() {
                return Err(GcmError::schema(format!(
                    "parameter `{}` has {} item slots but the data has {} items",
                    spec.name,
                    spec.slots,
                    log.item_count()
                )));
            }
        }
    }
    Ok(())
}

pub fn fit(def: &ModelDefinition, log: &SessionLog, options: &FitOptions) -> Result<FittedModel> {
    fit_observed(def, log, options, &mut |_| {})
}

/// [`fit`] with a callback after every M-step.
pub fn fit_observed(
    def: &ModelDefinition,
    log: &SessionLog,
    options: &FitOptions,
    observer: &mut (dyn FnMut(&IterationInfo<'_>) + Send),
) -> Result<FittedModel> {
    match options.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| GcmError::InvalidArgument(format!("cannot build thread pool: {e}")))?;
            pool.install(|| run_em(def, log, options, observer))
        }
        None => run_em(def, log, options, observer),
    }
}

fn run_em(
    def: &ModelDefinition,
    log: &SessionLog,
    options: &FitOptions,
    observer: &mut (dyn FnMut(&IterationInfo<'_>) + Send),
) -> Result<FittedModel> {
    let compiled = def.compile()?;
    check_fit_inputs(def, &compiled, log, options)?;
    let click_states = def.space.click_states();
    let mut weights = options.initial.clone().unwrap_or_else(|| def.default_weights());
    weights.check_shape(&def.params)?;

    let mut report = FitReport {
        iterations: 0,
        initial_loglik: None,
        loglik_trace: Vec::new(),
        delta_trace: Vec::new(),
        converged: false,
    };
    let mut pending: Option<(f64, ParameterWeights)> = None;
    for iteration in 1..=options.max_iter {
        let (loglik, stats) = match pending.take() {
            Some(p) => p,
            None => {
                let ev = Evaluator::new(&compiled, &def.params, &weights, &log.covariate_names)?;
                let (l, s) = e_step(&ev, log, click_states, true)?;
                (l, s.expect("collected"))
            }
        };
        if iteration == 1 {
            report.initial_loglik = Some(loglik);
        }
        let next = m_step(&def.params, &weights, &stats, options, iteration)?;
        let delta = next.l1_distance(&weights);
        observer(&IterationInfo {
            iteration,
            loglik,
            delta,
            before: &weights,
            after: &next,
            statistics: &stats,
        });
        weights = next;
        report.iterations = iteration;
        report.delta_trace.push(delta);

        let converged = delta <= options.epsilon;
        let last = converged || iteration == options.max_iter;
        let ev = Evaluator::new(&compiled, &def.params, &weights, &log.covariate_names)?;
        let (l, s) = e_step(&ev, log, click_states, !last)?;
        report.loglik_trace.push(l);
        log::debug!("iteration {iteration}: loglik {l:.6} delta {delta:.3e}");
        if converged {
            report.converged = true;
            break;
        }
        if let Some(s) = s {
            pending = Some((l, s));
        }
    }
    if options.max_iter == 0 {
        let ev = Evaluator::new(&compiled, &def.params, &weights, &log.covariate_names)?;
        report.initial_loglik = Some(e_step(&ev, log, click_states, false)?.0);
    }
    Ok(FittedModel {
        definition: def.clone(),
        compiled,
        weights,
        item_names: log.item_names.clone(),
        covariate_names: log.covariate_names.clone(),
        report,
    })
}

/// Batch log-likelihood of `log` under fixed weights.
pub fn log_likelihood(model: &FittedModel, log: &SessionLog) -> Result<f64> {
    crate::evaluation::check_schema(model, log)?;
    let ev = model.evaluator()?;
    Ok(e_step(&ev, log, model.definition.space.click_states(), false)?.0)
}
