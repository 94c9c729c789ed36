//! Synthetic click logs with known ground truth.
//!
//! Items and users live in the unit square. A user is attracted to nearby
//! items: `attraction(u, v) = σ(salience · (offset − sensitivity · d(u, v)))`
//! with `offset` equal to `sensitivity` times the mean user–item distance, so
//! the population mean attraction is near one half. Satisfaction uses the same
//! form with its own salience. The per-item ground truth reported for
//! recovery scoring is the mean over all users.
//!
//! Result lists are drawn without replacement with probabilities proportional
//! to item popularity, which is estimated from warm-up sessions shown in
//! uniformly random order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::sigmoid;
use crate::compiler::{Evaluator, Weights};
use crate::data::{Session, SessionLog};
use crate::error::{GcmError, Result};
use crate::models::{build_czm, build_ubm, ubm_examination_slot, ModelDefinition, ATTRACTION, CONTINUATION, EXAMINATION, SATISFACTION};

/// Sessions per user are capped at this count.
pub const MAX_SESSIONS_PER_USER: u64 = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Czm,
    Ubm,
}

impl std::str::FromStr for ModelKind {
    type Err = GcmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "czm" => Ok(ModelKind::Czm),
            "ubm" => Ok(ModelKind::Ubm),
            other => Err(GcmError::InvalidArgument(format!("unknown model kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Czm => "czm",
            ModelKind::Ubm => "ubm",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub items: usize,
    pub users: usize,
    pub warmup_sessions: usize,
    pub list_size: usize,
    pub distance_sensitivity: f64,
    pub attraction_salience: f64,
    pub satisfaction_salience: f64,
    pub lifetime_geometric_p: f64,
    pub continuation_probability: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            items: 100,
            users: 20_000,
            warmup_sessions: 100,
            list_size: 10,
            distance_sensitivity: 1.0,
            attraction_salience: 5.0,
            satisfaction_salience: 5.0,
            lifetime_geometric_p: 0.5,
            continuation_probability: 0.9,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GcmError::InvalidArgument(m));
        if self.items == 0 || self.users == 0 || self.warmup_sessions == 0 || self.list_size == 0 {
            return bad("items, users, warm-up sessions and list size must all be at least 1".into());
        }
        if self.list_size > self.items {
            return bad(format!(
                "list size {} exceeds the number of items {}",
                self.list_size, self.items
            ));
        }
        for (name, v) in [
            ("distance sensitivity", self.distance_sensitivity),
            ("attraction salience", self.attraction_salience),
            ("satisfaction salience", self.satisfaction_salience),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.lifetime_geometric_p > 0.0 && self.lifetime_geometric_p <= 1.0) {
            return bad(format!(
                "lifetime geometric parameter must lie in (0, 1], got {}",
                self.lifetime_geometric_p
            ));
        }
        if !(0.0..=1.0).contains(&self.continuation_probability) {
            return bad(format!(
                "continuation probability must lie in [0, 1], got {}",
                self.continuation_probability
            ));
        }
        Ok(())
    }
}

fn item_name(v: usize) -> String {
    format!("item{v}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub model: ModelKind,
    pub config: SimulationConfig,
    pub item_names: Vec<String>,
    pub item_locations: Vec<[f64; 2]>,
    pub user_points: Vec<[f64; 2]>,
    /// Distance offset shared by both link functions.
    pub offset: f64,
    /// Mean attraction over users, per item.
    pub attraction: Vec<f64>,
    /// Mean satisfaction over users, per item.
    pub satisfaction: Vec<f64>,
    pub continuation: f64,
    /// UBM examination `γ_{t't}` by slot; empty for CZM.
    pub examination: Vec<f64>,
    /// Normalised ordering weights from the warm-up.
    pub popularity: Vec<f64>,
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl GroundTruth {
    fn link(&self, salience: f64, u: usize, v: usize) -> f64 {
        let d = distance(self.user_points[u], self.item_locations[v]);
        sigmoid(salience * (self.offset - self.config.distance_sensitivity * d))
    }

    pub fn user_attraction(&self, u: usize, v: usize) -> f64 {
        self.link(self.config.attraction_salience, u, v)
    }

    pub fn user_satisfaction(&self, u: usize, v: usize) -> f64 {
        self.link(self.config.satisfaction_salience, u, v)
    }

    /// `γ_{t't}`; for CZM the continuation probability.
    pub fn examination_prob(&self, last_click: usize, t: usize) -> f64 {
        match self.model {
            ModelKind::Czm => self.continuation,
            ModelKind::Ubm => self.examination[ubm_examination_slot(last_click, t)],
        }
    }

    /// The built-in definition with item slots in `item_names` order.
    pub fn definition(&self) -> Result<ModelDefinition> {
        let (t, v) = (self.config.list_size, self.item_names.len());
        match self.model {
            ModelKind::Czm => build_czm(t, v),
            ModelKind::Ubm => build_ubm(t, v),
        }
    }

    /// Population-level parameters as weights of [`GroundTruth::definition`].
    pub fn weights(&self, def: &ModelDefinition) -> Result<Weights> {
        let mut w = def.default_weights();
        for (b, spec) in def.params.iter().enumerate() {
            let values: Vec<f64> = match spec.name.as_str() {
                ATTRACTION => self.attraction.clone(),
                SATISFACTION => self.satisfaction.clone(),
                CONTINUATION => vec![self.continuation],
                EXAMINATION => self.examination.clone(),
                other => return Err(GcmError::schema(format!("no ground truth for parameter `{other}`"))),
            };
            if values.len() != spec.slots {
                return Err(GcmError::schema(format!(
                    "ground truth has {} values for `{}`, the model has {} slots",
                    values.len(),
                    spec.name,
                    spec.slots
                )));
            }
            w.blocks[b] = values.into_iter().map(|v| vec![v]).collect();
        }
        Ok(w)
    }
}

fn draw_truth(config: &SimulationConfig, model: ModelKind) -> GroundTruth {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let point = |rng: &mut ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>()];
    let item_locations: Vec<[f64; 2]> = (0..config.items).map(|_| point(&mut rng)).collect();
    let user_points: Vec<[f64; 2]> = (0..config.users).map(|_| point(&mut rng)).collect();
    let mut mean = 0.0;
    for u in &user_points {
        for v in &item_locations {
            mean += distance(*u, *v);
        }
    }
    mean /= (config.items * config.users) as f64;
    let mut truth = GroundTruth {
        model,
        config: config.clone(),
        item_names: (0..config.items).map(item_name).collect(),
        item_locations,
        user_points,
        offset: config.distance_sensitivity * mean,
        attraction: Vec::new(),
        satisfaction: Vec::new(),
        continuation: config.continuation_probability,
        examination: Vec::new(),
        popularity: Vec::new(),
    };
    let users = config.users as f64;
    truth.attraction = (0..config.items)
        .map(|v| (0..config.users).map(|u| truth.user_attraction(u, v)).sum::<f64>() / users)
        .collect();
    truth.satisfaction = (0..config.items)
        .map(|v| (0..config.users).map(|u| truth.user_satisfaction(u, v)).sum::<f64>() / users)
        .collect();
    if model == ModelKind::Ubm {
        let t_len = config.list_size;
        let mut ex = vec![0.0; t_len * (t_len + 1) / 2];
        for t in 1..=t_len {
            for b in 0..t {
                ex[ubm_examination_slot(b, t)] = config.continuation_probability.powi((t - b) as i32);
            }
        }
        truth.examination = ex;
    }
    truth
}

/// Ancestral sample of one session's clicks for user `u` and list `items`.
pub fn sample_clicks(truth: &GroundTruth, u: usize, items: &[usize], rng: &mut impl Rng) -> Vec<bool> {
    let mut clicks = vec![false; items.len()];
    match truth.model {
        ModelKind::Czm => {
            // The first item is always examined.
            let mut examined = true;
            for (i, &v) in items.iter().enumerate() {
                if !examined {
                    break;
                }
                if rng.random_bool(truth.user_attraction(u, v)) {
                    clicks[i] = true;
                    if rng.random_bool(truth.user_satisfaction(u, v)) {
                        break;
                    }
                }
                examined = rng.random_bool(truth.continuation);
            }
        }
        ModelKind::Ubm => {
            let mut last = 0;
            for (i, &v) in items.iter().enumerate() {
                let t = i + 1;
                let e = rng.random_bool(truth.examination_prob(last, t));
                let r = rng.random_bool(truth.user_attraction(u, v));
                if e && r {
                    clicks[i] = true;
                    last = t;
                }
            }
        }
    }
    clicks
}

/// Draws `t` distinct items, each step proportional to the remaining weights.
pub fn weighted_order(weights: &[f64], t: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(t);
    for _ in 0..t {
        let total: f64 = w.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = None;
        for (v, &wv) in w.iter().enumerate() {
            if wv <= 0.0 {
                continue;
            }
            pick = Some(v);
            if r < wv {
                break;
            }
            r -= wv;
        }
        let v = pick.expect("fewer positive weights than list positions");
        out.push(v);
        w[v] = 0.0;
    }
    out
}

fn warmup_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn user_rng(seed: u64, u: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + u as u64);
    rng
}

fn popularity_from(truth: &GroundTruth) -> Vec<f64> {
    let c = &truth.config;
    let mut rng = warmup_rng(c.seed);
    let mut clicks = vec![0.0; c.items];
    let mut catalogue: Vec<usize> = (0..c.items).collect();
    for _ in 0..c.warmup_sessions {
        let u = rng.random_range(0..c.users);
        catalogue.shuffle(&mut rng);
        let list = &catalogue[..c.list_size];
        for (&v, clicked) in list.iter().zip(sample_clicks(truth, u, list, &mut rng)) {
            if clicked {
                clicks[v] += 1.0;
            }
        }
    }
    // Add-one smoothing keeps never-clicked items in rotation; with no warm-up
    // clicks at all it reduces to uniform weights.
    let total: f64 = clicks.iter().map(|c| c + 1.0).sum();
    clicks.iter().map(|c| (c + 1.0) / total).collect()
}

/// Normalised per-item ordering weights from the warm-up sessions.
pub fn popularity_warmup(config: &SimulationConfig, model: ModelKind) -> Result<Vec<f64>> {
    config.validate()?;
    Ok(popularity_from(&draw_truth(config, model)))
}

/// Simulates a log from `model` with the given configuration.
pub fn simulate(config: &SimulationConfig, model: ModelKind) -> Result<(SessionLog, GroundTruth)> {
    config.validate()?;
    let mut truth = draw_truth(config, model);
    truth.popularity = popularity_from(&truth);
    let lifetime = Geometric::new(config.lifetime_geometric_p)
        .map_err(|e| GcmError::InvalidArgument(format!("lifetime distribution: {e}")))?;

    let per_user: Vec<Vec<Session>> = (0..config.users)
        .into_par_iter()
        .map(|u| {
            let mut rng = user_rng(config.seed, u);
            // Failures before the first success, shifted to count sessions.
            let n = (lifetime.sample(&mut rng) + 1).min(MAX_SESSIONS_PER_USER);
            (0..n)
                .map(|j| {
                    let items = weighted_order(&truth.popularity, config.list_size, &mut rng);
                    let clicks = sample_clicks(&truth, u, &items, &mut rng);
                    let covariates = items
                        .iter()
                        .map(|&v| truth.item_locations[v].to_vec())
                        .collect();
                    Session {
                        id: format!("u{u}-s{j}"),
                        items,
                        clicks,
                        covariates,
                    }
                })
                .collect()
        })
        .collect();

    let mut log = SessionLog::new(config.list_size, vec!["loc_x".into(), "loc_y".into()]);
    log.item_names = truth.item_names.clone();
    log.sessions = per_user.into_iter().flatten().collect();
    Ok((log, truth))
}

/// Samples click vectors for fixed item lists from any compiled model by
/// walking its latent chain.
pub fn sample_from_model(ev: &Evaluator<'_>, click_states: &[usize], template: &Session, rng: &mut impl Rng) -> Result<Vec<bool>> {
    let compiled = ev.compiled();
    let mut z = click_states[0];
    let mut clicks = Vec::with_capacity(compiled.list_size());
    for t in 1..=compiled.list_size() {
        let m = ev.transitions(template, t)?;
        let row: Vec<(usize, f64)> = m.entries.iter().filter(|e| e.0 == z).map(|e| (e.1, e.2)).collect();
        let total: f64 = row.iter().map(|e| e.1).sum();
        if row.is_empty() || total <= 0.0 {
            return Err(GcmError::definition(format!("state {z} has no outgoing mass at position {t}")));
        }
        let mut r = rng.random::<f64>() * total;
        z = row.last().expect("nonempty").0;
        for &(to, p) in &row {
            if r < p {
                z = to;
                break;
            }
            r -= p;
        }
        clicks.push(z == click_states[t]);
    }
    Ok(clicks)
}
