//! Parameter activation functions and the two M-step solvers.
//!
//! Every latent Bernoulli factor `ϑ = f(x; θ)` is produced by an activation.
//! The M-step for one parameter maximises the weighted log-loss
//!
//! ```text
//! Q(θ) = Σ_rows |w| · [ 1{w>0} · ln f(x; θ) + 1{w<0} · ln(1 − f(x; θ)) ]
//! ```
//!
//! which for a constant activation has the closed form `h⁺ / (h⁺ + h⁻)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{GcmError, Result};

/// Activations are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(z)` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// A user-supplied activation. Values must lie in `(0, 1)`.
pub trait Activation: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn weight_arity(&self) -> usize;
    fn value(&self, theta: &[f64], x: &[f64]) -> f64;
    /// Writes `∂f/∂θ` into `out`.
    fn gradient(&self, theta: &[f64], x: &[f64], out: &mut [f64]);
}

#[derive(Clone, Debug)]
pub enum ActivationKind {
    /// `f = θ` with `θ ∈ (0, 1)`; one weight, no covariates.
    Constant,
    /// `f = σ(θᵀx + b)`; `bias` appends a trailing intercept weight.
    LogisticLinear { columns: Vec<String>, bias: bool },
    Custom {
        columns: Vec<String>,
        function: Arc<dyn Activation>,
    },
}

impl PartialEq for ActivationKind {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ActivationKind::Constant, ActivationKind::Constant) => true,
            (
                ActivationKind::LogisticLinear { columns: a, bias: x },
                ActivationKind::LogisticLinear { columns: b, bias: y },
            ) => a == b && x == y,
            (
                ActivationKind::Custom { columns: a, function: f },
                ActivationKind::Custom { columns: b, function: g },
            ) => a == b && Arc::ptr_eq(f, g),
            _ => false,
        }
    }
}

impl ActivationKind {
    /// The vanilla one-weight network `σ(θ)`.
    pub fn sigmoid_scalar() -> Self {
        ActivationKind::LogisticLinear {
            columns: Vec::new(),
            bias: true,
        }
    }

    pub fn columns(&self) -> &[String] {
        match self {
            ActivationKind::Constant => &[],
            ActivationKind::LogisticLinear { columns, .. } => columns,
            ActivationKind::Custom { columns, .. } => columns,
        }
    }

    pub fn covariate_arity(&self) -> usize {
        self.columns().len()
    }

    pub fn weight_arity(&self) -> usize {
        match self {
            ActivationKind::Constant => 1,
            ActivationKind::LogisticLinear { columns, bias } => columns.len() + *bias as usize,
            ActivationKind::Custom { function, .. } => function.weight_arity(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, ActivationKind::Constant)
    }

    pub fn label(&self) -> &str {
        match self {
            ActivationKind::Constant => "constant",
            ActivationKind::LogisticLinear { .. } => "logistic_linear",
            ActivationKind::Custom { function, .. } => function.name(),
        }
    }

    /// Weights giving activation 0.5.
    pub fn default_weights(&self) -> Vec<f64> {
        match self {
            ActivationKind::Constant => vec![0.5],
            _ => vec![0.0; self.weight_arity()],
        }
    }

    /// Weights whose activation equals `p` for every input (intercept-only for
    /// logistic kinds; falls back to the defaults when there is no intercept).
    pub fn weights_for_probability(&self, p: f64) -> Vec<f64> {
        let p = clamp_prob(p);
        match self {
            ActivationKind::Constant => vec![p],
            ActivationKind::LogisticLinear { columns, bias: true } => {
                let mut w = vec![0.0; columns.len() + 1];
                w[columns.len()] = (p / (1.0 - p)).ln();
                w
            }
            _ => self.default_weights(),
        }
    }

    fn check_arity(&self, theta: &[f64], x: &[f64]) -> Result<()> {
        if theta.len() != self.weight_arity() {
            return Err(GcmError::Dimension {
                expected: self.weight_arity(),
                found: theta.len(),
            });
        }
        if x.len() != self.covariate_arity() {
            return Err(GcmError::Dimension {
                expected: self.covariate_arity(),
                found: x.len(),
            });
        }
        Ok(())
    }

    fn linear(columns: usize, bias: bool, theta: &[f64], x: &[f64]) -> f64 {
        let z: f64 = theta[..columns].iter().zip(x).map(|(t, v)| t * v).sum();
        if bias {
            z + theta[columns]
        } else {
            z
        }
    }

    fn raw_value(&self, theta: &[f64], x: &[f64]) -> f64 {
        match self {
            ActivationKind::Constant => theta[0],
            ActivationKind::LogisticLinear { columns, bias } => {
                sigmoid(Self::linear(columns.len(), *bias, theta, x))
            }
            ActivationKind::Custom { function, .. } => function.value(theta, x),
        }
    }

    /// Activation value, guarded into `[PROB_FLOOR, 1 - PROB_FLOOR]`.
    pub fn evaluate(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        self.check_arity(theta, x)?;
        let v = self.raw_value(theta, x);
        if !(0.0..=1.0).contains(&v) {
            return Err(GcmError::NumericGuard(format!(
                "{} activation produced {v}, outside [0, 1]",
                self.label()
            )));
        }
        Ok(clamp_prob(v))
    }

    /// `(ln f, ln(1 − f))`.
    pub fn log_pair(&self, theta: &[f64], x: &[f64]) -> (f64, f64) {
        match self {
            ActivationKind::LogisticLinear { columns, bias } => {
                let z = Self::linear(columns.len(), *bias, theta, x);
                (log_sigmoid(z), log_sigmoid(-z))
            }
            _ => {
                let f = clamp_prob(self.raw_value(theta, x));
                (f.ln(), (1.0 - f).ln())
            }
        }
    }

    /// Gradients of `ln f` and `ln(1 − f)` with respect to `θ`.
    pub fn log_pair_gradient(&self, theta: &[f64], x: &[f64], d_pos: &mut [f64], d_neg: &mut [f64]) {
        match self {
            ActivationKind::Constant => {
                let f = clamp_prob(theta[0]);
                d_pos[0] = 1.0 / f;
                d_neg[0] = -1.0 / (1.0 - f);
            }
            ActivationKind::LogisticLinear { columns, bias } => {
                let n = columns.len();
                let f = sigmoid(Self::linear(n, *bias, theta, x));
                for j in 0..n {
                    d_pos[j] = (1.0 - f) * x[j];
                    d_neg[j] = -f * x[j];
                }
                if *bias {
                    d_pos[n] = 1.0 - f;
                    d_neg[n] = -f;
                }
            }
            ActivationKind::Custom { function, .. } => {
                let f = clamp_prob(function.value(theta, x));
                function.gradient(theta, x, d_pos);
                for (p, n) in d_pos.iter_mut().zip(d_neg.iter_mut()) {
                    let df = *p;
                    *p = df / f;
                    *n = -df / (1.0 - f);
                }
            }
        }
    }

    fn project(&self, theta: &mut [f64]) {
        if self.is_constant() {
            theta[0] = clamp_prob(theta[0]);
        }
    }
}

/// Central finite-difference check of a custom activation's gradient; returns
/// the largest relative error over all weights.
pub fn check_gradient(kind: &ActivationKind, theta: &[f64], x: &[f64], step: f64) -> f64 {
    let n = theta.len();
    let mut analytic = vec![0.0; n];
    match kind {
        ActivationKind::Custom { function, .. } => function.gradient(theta, x, &mut analytic),
        _ => {
            let mut neg = vec![0.0; n];
            kind.log_pair_gradient(theta, x, &mut analytic, &mut neg);
            let f = kind.raw_value(theta, x);
            analytic.iter_mut().for_each(|g| *g *= f);
        }
    }
    let mut worst: f64 = 0.0;
    let mut probe = theta.to_vec();
    for j in 0..n {
        probe[j] = theta[j] + step;
        let up = kind.raw_value(&probe, x);
        probe[j] = theta[j] - step;
        let down = kind.raw_value(&probe, x);
        probe[j] = theta[j];
        let numeric = (up - down) / (2.0 * step);
        let denom = analytic[j].abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic[j] - numeric).abs() / denom);
    }
    worst
}

/// One row of the weighted log-loss: covariates and a signed weight.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedRow {
    pub x: Vec<f64>,
    pub w: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MStepProblem {
    pub rows: Vec<WeightedRow>,
}

impl MStepProblem {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zero weights are dropped.
    pub fn push(&mut self, x: Vec<f64>, w: f64) {
        if w != 0.0 {
            self.rows.push(WeightedRow { x, w });
        }
    }

    /// Problem for a covariate-free parameter from its aggregated weights.
    pub fn from_totals(h_plus: f64, h_minus: f64) -> Self {
        let mut p = MStepProblem::new();
        p.push(Vec::new(), h_plus);
        p.push(Vec::new(), -h_minus);
        p
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.rows.iter().map(|r| r.w.abs()).sum()
    }
}

/// The weighted log-loss objective (to be maximised).
pub fn objective(kind: &ActivationKind, theta: &[f64], problem: &MStepProblem) -> f64 {
    problem
        .rows
        .iter()
        .map(|r| {
            let (lp, ln) = kind.log_pair(theta, &r.x);
            let s = (r.w.signum() + 1.0) / 2.0;
            r.w.abs() * (s * lp + (1.0 - s) * ln)
        })
        .sum()
}

/// Analytic gradient of [`objective`].
pub fn objective_gradient(kind: &ActivationKind, theta: &[f64], problem: &MStepProblem) -> Vec<f64> {
    let n = theta.len();
    let mut grad = vec![0.0; n];
    let mut dp = vec![0.0; n];
    let mut dn = vec![0.0; n];
    for r in &problem.rows {
        kind.log_pair_gradient(theta, &r.x, &mut dp, &mut dn);
        let d = if r.w > 0.0 { &dp } else { &dn };
        let a = r.w.abs();
        grad.iter_mut().zip(d).for_each(|(g, v)| *g += a * v);
    }
    grad
}

/// `h⁺ / (h⁺ + h⁻)`, clamped. `None` when the parameter received no weight.
pub fn solve_closed_form(h_plus: f64, h_minus: f64) -> Option<f64> {
    let total = h_plus + h_minus;
    if total <= 0.0 {
        return None;
    }
    Some(clamp_prob(h_plus / total))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverSettings {
    pub max_iter: usize,
    /// Stop once the gradient norm of the weight-normalised objective drops
    /// below this.
    pub grad_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iter: 100,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NumericSolution {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient ascent with Barzilai–Borwein step proposals and an Armijo
/// backtracking safeguard. Never returns a point worse than `theta0`.
pub fn solve_numeric(
    kind: &ActivationKind,
    problem: &MStepProblem,
    theta0: &[f64],
    settings: &SolverSettings,
) -> Result<NumericSolution> {
    if problem.is_empty() {
        return Err(GcmError::InvalidArgument("empty M-step problem".into()));
    }
    if theta0.len() != kind.weight_arity() {
        return Err(GcmError::Dimension {
            expected: kind.weight_arity(),
            found: theta0.len(),
        });
    }
    let scale = 1.0 / problem.total_weight();
    let eval = |th: &[f64]| objective(kind, th, problem) * scale;
    let grad = |th: &[f64]| -> Result<Vec<f64>> {
        let mut g = objective_gradient(kind, th, problem);
        g.iter_mut().for_each(|v| *v *= scale);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(GcmError::NumericGuard(format!(
                "non-finite gradient at θ = {th:?}"
            )));
        }
        Ok(g)
    };

    let mut theta = theta0.to_vec();
    kind.project(&mut theta);
    let mut f = eval(&theta);
    let start = objective(kind, theta0, problem) * scale;
    if !f.is_finite() {
        return Err(GcmError::NumericGuard(format!(
            "non-finite objective at θ = {theta:?}"
        )));
    }
    let mut g = grad(&theta)?;
    let mut step = 1.0;
    let mut iterations = 0;
    let mut cand = vec![0.0; theta.len()];

    while iterations < settings.max_iter {
        if dot(&g, &g).sqrt() <= settings.grad_tol {
            break;
        }
        iterations += 1;
        let mut accepted = None;
        for _ in 0..60 {
            for ((c, t), d) in cand.iter_mut().zip(&theta).zip(&g) {
                *c = t + step * d;
            }
            kind.project(&mut cand);
            let delta: Vec<f64> = cand.iter().zip(&theta).map(|(c, t)| c - t).collect();
            if delta.iter().all(|d| *d == 0.0) {
                break;
            }
            let fc = eval(&cand);
            if fc.is_finite() && fc >= f + 1e-4 * dot(&g, &delta) {
                accepted = Some((fc, delta));
                break;
            }
            step *= 0.5;
        }
        let Some((fc, s)) = accepted else { break };
        let gc = grad(&cand)?;
        let y: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        step = if sy < 0.0 {
            (dot(&s, &s) / -sy).clamp(1e-12, 1e12)
        } else {
            (step * 2.0).min(1e12)
        };
        theta.copy_from_slice(&cand);
        f = fc;
        g = gc;
    }

    if f < start {
        theta = theta0.to_vec();
        f = start;
    }
    Ok(NumericSolution {
        theta,
        objective: f / scale,
        iterations,
    })
}
