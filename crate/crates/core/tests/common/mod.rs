//! Brute-force oracles shared by the integration tests. None of these reuse
//! the library's recursions.

#![allow(dead_code)]

use gcm::activations::ActivationKind;
use gcm::compiler::{compile, CompiledTransitions, Evaluator, ParamRef, ParameterSpec, Positions, TransitionFactorization, Weights};
use gcm::data::Session;
use gcm::models::ubm_examination_slot;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

/// Joint probabilities of all latent paths consistent with `y`.
pub struct Enumeration {
    pub likelihood: f64,
    /// `zeta[t][k]` for `t = 0..=T`.
    pub zeta: Vec<Vec<f64>>,
    /// `h[t-1][(k', k)]` for `t = 1..=T`.
    pub h: Vec<Array2<f64>>,
}

pub fn enumerate_paths(m: &[Array2<f64>], click_states: &[usize], y: &[bool]) -> Enumeration {
    let t_len = y.len();
    let k = m[0].nrows();
    let mut zeta = vec![vec![0.0; k]; t_len + 1];
    let mut h = vec![Array2::zeros((k, k)); t_len];
    let mut likelihood = 0.0;
    let mut path = vec![0usize; t_len + 1];
    path[0] = click_states[0];
    for code in 0..k.pow(t_len as u32) {
        let mut c = code;
        let mut p = 1.0;
        for t in 1..=t_len {
            path[t] = c % k;
            c /= k;
            if (path[t] == click_states[t]) != y[t - 1] {
                p = 0.0;
                break;
            }
            p *= m[t - 1][[path[t - 1], path[t]]];
        }
        if p == 0.0 {
            continue;
        }
        likelihood += p;
        for t in 0..=t_len {
            zeta[t][path[t]] += p;
        }
        for t in 1..=t_len {
            h[t - 1][[path[t - 1], path[t]]] += p;
        }
    }
    for z in &mut zeta {
        z.iter_mut().for_each(|v| *v /= likelihood);
    }
    for ht in &mut h {
        ht.mapv_inplace(|v| v / likelihood);
    }
    Enumeration { likelihood, zeta, h }
}

/// A random stochastic model built by recursively splitting each row's
/// support with one Bernoulli literal per level.
pub struct RandomGcm {
    pub states: usize,
    pub list_size: usize,
    pub specs: Vec<ParameterSpec>,
    pub factorization: TransitionFactorization,
    pub compiled: CompiledTransitions,
    pub click_states: Vec<usize>,
    pub weights: Weights,
    pub session: Session,
}

const SLOTS: usize = 3;

fn split(
    targets: &mut Vec<usize>,
    depth: usize,
    lits: Vec<gcm::compiler::Literal>,
    t: usize,
    from: usize,
    f: &mut TransitionFactorization,
    rng: &mut impl Rng,
) {
    if targets.len() == 1 {
        f.add_product(Positions::Exactly(t), from, targets[0], lits);
        return;
    }
    targets.shuffle(rng);
    let cut = rng.random_range(1..targets.len());
    let mut right = targets.split_off(cut);
    let name = format!("p{depth}");
    let r = if rng.random_bool(0.3) {
        ParamRef::item(&name)
    } else {
        ParamRef::fixed(&name, rng.random_range(0..SLOTS))
    };
    let mut l = lits.clone();
    l.push(r.clone().pos());
    split(targets, depth + 1, l, t, from, f, rng);
    let mut l = lits;
    l.push(r.neg());
    split(&mut right, depth + 1, l, t, from, f, rng);
}

pub fn random_gcm(rng: &mut impl Rng, max_states: usize, max_len: usize) -> RandomGcm {
    let k = rng.random_range(2..=max_states);
    let t_len = rng.random_range(1..=max_len);
    let specs: Vec<ParameterSpec> = (0..k)
        .map(|d| ParameterSpec::new(&format!("p{d}"), ActivationKind::Constant, SLOTS))
        .collect();
    let mut f = TransitionFactorization::new();
    for t in 1..=t_len {
        for from in 0..k {
            let mut support: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.6)).collect();
            if support.is_empty() {
                support.push(rng.random_range(0..k));
            }
            split(&mut support, 0, Vec::new(), t, from, &mut f, rng);
        }
    }
    let compiled = compile(&f, k, t_len, &specs).expect("random factorization compiles");
    let weights = Weights {
        blocks: specs
            .iter()
            .map(|s| (0..s.slots).map(|_| vec![rng.random_range(0.05..0.95)]).collect())
            .collect(),
    };
    let click_states = (0..=t_len).map(|_| rng.random_range(0..k)).collect();
    let session = Session {
        id: "random".into(),
        items: (0..t_len).map(|_| rng.random_range(0..SLOTS)).collect(),
        clicks: vec![false; t_len],
        covariates: vec![],
    };
    RandomGcm {
        states: k,
        list_size: t_len,
        specs,
        factorization: f,
        compiled,
        click_states,
        weights,
        session,
    }
}

impl RandomGcm {
    pub fn evaluator(&self) -> Evaluator<'_> {
        Evaluator::new(&self.compiled, &self.specs, &self.weights, &[]).expect("shapes match")
    }

    pub fn dense(&self) -> Vec<Array2<f64>> {
        let ev = self.evaluator();
        (1..=self.list_size)
            .map(|t| ev.transitions(&self.session, t).unwrap().to_dense())
            .collect()
    }
}

/// UBM click-pattern probability computed straight from the model's
/// definition: the click probability at `t` is `φ_{r(t)} γ_{t't}` with `t'`
/// the last click before `t` (0 if none).
pub fn ubm_direct_likelihood(attraction: &[f64], gamma: &[f64], items: &[usize], y: &[bool]) -> f64 {
    let mut last = 0;
    let mut p = 1.0;
    for (i, &clicked) in y.iter().enumerate() {
        let t = i + 1;
        let q = attraction[items[i]] * gamma[ubm_examination_slot(last, t)];
        if clicked {
            p *= q;
            last = t;
        } else {
            p *= 1.0 - q;
        }
    }
    p
}

/// The CZM transition matrix written out by hand for `t ≥ 2` with scalar
/// parameters.
pub fn czm_reference_matrix(a: f64, s: f64, g: f64) -> Array2<f64> {
    let (na, ns, ng) = (1.0 - a, 1.0 - s, 1.0 - g);
    let mut m = Array2::zeros((7, 7));
    for r in [0, 1, 4, 5, 6] {
        m[[r, 6]] = 1.0;
    }
    let row2 = [ng * na, ng * a, g * na, g * a, 0.0, 0.0, 0.0];
    let row3 = [ng * na * ns, ng * a * ns, g * na * ns, g * a * ns, na * s, a * s, 0.0];
    for j in 0..7 {
        m[[2, j]] = row2[j];
        m[[3, j]] = row3[j];
    }
    m
}
