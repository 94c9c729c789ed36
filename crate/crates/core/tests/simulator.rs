use std::collections::HashSet;

use gcm::compiler::Weights;
use gcm::data::{Session, SessionLog};
use gcm::em::{log_likelihood, FittedModel};
use gcm::models::{build_czm, build_ubm, ATTRACTION, CONTINUATION, EXAMINATION, SATISFACTION};
use gcm::simulator::{sample_clicks, sample_from_model, simulate, GroundTruth, ModelKind, SimulationConfig};
use gcm::{GcmError, ModelDefinition};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const DRAWS: usize = 100_000;

fn config(seed: u64) -> SimulationConfig {
    SimulationConfig {
        items: 12,
        users: 300,
        list_size: 3,
        seed,
        ..Default::default()
    }
}

fn pattern_index(clicks: &[bool]) -> usize {
    clicks.iter().enumerate().map(|(i, &c)| (c as usize) << i).sum()
}

/// Exact probability of every click pattern for one list, with items
/// renumbered `0..T` so per-user values can be plugged in as weights.
fn exact_patterns(def: &ModelDefinition, w: &Weights, t_len: usize) -> Vec<f64> {
    let names: Vec<String> = (0..t_len).map(|v| format!("slot{v}")).collect();
    let model = FittedModel::from_weights(def.clone(), w.clone(), names.clone(), Vec::new()).unwrap();
    (0..1usize << t_len)
        .map(|code| {
            let mut log = SessionLog::new(t_len, Vec::new());
            log.item_names = names.clone();
            log.sessions.push(Session {
                id: "p".into(),
                items: (0..t_len).collect(),
                clicks: (0..t_len).map(|i| (code >> i) & 1 == 1).collect(),
                covariates: Vec::new(),
            });
            log_likelihood(&model, &log).unwrap().exp()
        })
        .collect()
}

/// Pearson goodness-of-fit p-value of observed counts against `probs`.
fn chi_square_p(counts: &[usize], probs: &[f64]) -> f64 {
    let n = counts.iter().sum::<usize>() as f64;
    let mut stat = 0.0;
    let mut cells = 0;
    for (&c, &p) in counts.iter().zip(probs) {
        if p == 0.0 {
            assert_eq!(c, 0, "impossible pattern was sampled");
            continue;
        }
        let e = n * p;
        stat += (c as f64 - e).powi(2) / e;
        cells += 1;
    }
    1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
}

fn user_weights(truth: &GroundTruth, def: &ModelDefinition, u: usize, items: &[usize]) -> Weights {
    let mut w = def.default_weights();
    for (b, spec) in def.params.iter().enumerate() {
        w.blocks[b] = match spec.name.as_str() {
            ATTRACTION => items.iter().map(|&v| vec![truth.user_attraction(u, v)]).collect(),
            SATISFACTION => items.iter().map(|&v| vec![truth.user_satisfaction(u, v)]).collect(),
            CONTINUATION => vec![vec![truth.continuation]],
            EXAMINATION => truth.examination.iter().map(|&g| vec![g]).collect(),
            other => panic!("unexpected parameter {other}"),
        };
    }
    w
}

fn check_faithful(model: ModelKind, seed: u64) {
    let (_, truth) = simulate(&config(seed), model).unwrap();
    let t_len = truth.config.list_size;
    let def = match model {
        ModelKind::Czm => build_czm(t_len, t_len).unwrap(),
        ModelKind::Ubm => build_ubm(t_len, t_len).unwrap(),
    };
    let items = [3, 7, 0];
    let u = 17;
    let probs = exact_patterns(&def, &user_weights(&truth, &def, u, &items), t_len);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut counts = vec![0usize; probs.len()];
    for _ in 0..DRAWS {
        counts[pattern_index(&sample_clicks(&truth, u, &items, &mut rng))] += 1;
    }
    let p = chi_square_p(&counts, &probs);
    assert!(p > 1e-3, "{model} sampler rejected, p = {p:.2e}");
}

#[test]
fn czm_sampler_matches_exact_pattern_probabilities() {
    check_faithful(ModelKind::Czm, 21);
}

#[test]
fn ubm_sampler_matches_exact_pattern_probabilities() {
    check_faithful(ModelKind::Ubm, 22);
}

#[test]
fn generic_latent_walk_matches_exact_pattern_probabilities() {
    let t_len = 3;
    let def = build_czm(t_len, t_len).unwrap();
    let w = def.random_weights(8);
    let probs = exact_patterns(&def, &w, t_len);
    let names: Vec<String> = (0..t_len).map(|v| format!("slot{v}")).collect();
    let model = FittedModel::from_weights(def.clone(), w, names, Vec::new()).unwrap();
    let ev = model.evaluator().unwrap();
    let template = Session {
        id: "t".into(),
        items: (0..t_len).collect(),
        clicks: vec![false; t_len],
        covariates: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = vec![0usize; probs.len()];
    for _ in 0..DRAWS {
        let y = sample_from_model(&ev, def.space.click_states(), &template, &mut rng).unwrap();
        counts[pattern_index(&y)] += 1;
    }
    let p = chi_square_p(&counts, &probs);
    assert!(p > 1e-3, "latent walk rejected, p = {p:.2e}");
}

fn user_of(s: &Session) -> usize {
    s.id[1..s.id.find('-').unwrap()].parse().unwrap()
}

#[test]
fn first_rank_click_rate_matches_user_attraction() {
    let (log, truth) = simulate(&config(23), ModelKind::Czm).unwrap();
    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    for s in &log.sessions {
        let v: usize = log.item_names[s.items[0]][4..].parse().unwrap();
        let a = truth.user_attraction(user_of(s), v);
        observed += s.clicks[0] as u8 as f64;
        expected += a;
        variance += a * (1.0 - a);
    }
    assert!((observed - expected).abs() <= 3.0 * variance.sqrt(), "{observed} vs {expected}");
}

#[test]
fn simulation_is_deterministic_per_seed() {
    let a = simulate(&config(31), ModelKind::Ubm).unwrap();
    let b = simulate(&config(31), ModelKind::Ubm).unwrap();
    assert_eq!(a, b);
    let c = simulate(&config(32), ModelKind::Ubm).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn lists_hold_distinct_items() {
    let (log, _) = simulate(&config(33), ModelKind::Czm).unwrap();
    assert!(log.validate().is_ok());
    for s in &log.sessions {
        let distinct: HashSet<_> = s.items.iter().collect();
        assert_eq!(distinct.len(), s.items.len());
    }
}

#[test]
fn truth_is_the_population_mean() {
    let (_, truth) = simulate(&config(34), ModelKind::Czm).unwrap();
    let users = truth.config.users;
    for v in 0..truth.config.items {
        let mean = (0..users).map(|u| truth.user_attraction(u, v)).sum::<f64>() / users as f64;
        assert!((mean - truth.attraction[v]).abs() < 1e-12);
        assert!(truth.attraction[v] > 0.0 && truth.attraction[v] < 1.0);
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let mut c = config(0);
    c.list_size = 20;
    assert!(simulate(&c, ModelKind::Czm).is_err());
    let mut c = config(0);
    c.lifetime_geometric_p = 0.0;
    assert!(c.validate().is_err());
}

fn czm_with(items: usize, a: f64, s: f64, g: f64) -> FittedModel {
    let t_len = 4;
    let def = build_czm(t_len, items).unwrap();
    let mut w = def.default_weights();
    w.blocks[def.param_index(ATTRACTION).unwrap()].iter_mut().for_each(|x| x[0] = a);
    w.blocks[def.param_index(SATISFACTION).unwrap()].iter_mut().for_each(|x| x[0] = s);
    w.blocks[def.param_index(CONTINUATION).unwrap()][0][0] = g;
    FittedModel::from_weights(def, w, (0..items).map(|v| format!("i{v}")).collect(), Vec::new()).unwrap()
}

fn walk(m: &FittedModel, draws: usize, seed: u64) -> Vec<Vec<bool>> {
    let ev = m.evaluator().unwrap();
    let t_len = m.definition.list_size;
    let template = Session {
        id: "t".into(),
        items: (0..t_len).map(|t| t % m.item_names.len()).collect(),
        clicks: vec![false; t_len],
        covariates: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..draws)
        .map(|_| sample_from_model(&ev, m.definition.space.click_states(), &template, &mut rng).unwrap())
        .collect()
}

#[test]
fn no_continuation_means_clicks_only_at_the_top() {
    let m = czm_with(2, 0.6, 0.3, 0.0);
    let samples = walk(&m, 2000, 1);
    assert!(samples.iter().all(|y| y[1..].iter().all(|&c| !c)));
    assert!(samples.iter().any(|y| y[0]));
}

#[test]
fn certain_satisfaction_gives_at_most_one_click() {
    let m = czm_with(2, 0.6, 1.0, 1.0);
    let samples = walk(&m, 2000, 2);
    assert!(samples.iter().all(|y| y.iter().filter(|&&c| c).count() <= 1));
}

#[test]
fn simulated_click_rates_match_the_analytic_marginal() {
    // Exact per-position marginals of one fixed list from the pattern table,
    // compared with 1e5 latent walks within three standard errors.
    let m = czm_with(3, 0.4, 0.5, 0.8);
    let t_len = m.definition.list_size;
    let probs = exact_patterns_for(&m);
    let samples = walk(&m, 100_000, 3);
    let n = samples.len() as f64;
    for t in 0..t_len {
        let p: f64 = (0..probs.len()).filter(|c| (c >> t) & 1 == 1).map(|c| probs[c]).sum();
        let rate = samples.iter().filter(|y| y[t]).count() as f64 / n;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((rate - p).abs() <= 3.0 * se, "position {}: {rate} vs {p}", t + 1);
    }
}

fn exact_patterns_for(m: &FittedModel) -> Vec<f64> {
    let t_len = m.definition.list_size;
    (0..1usize << t_len)
        .map(|code| {
            let mut log = SessionLog::new(t_len, Vec::new());
            log.item_names = m.item_names.clone();
            log.sessions.push(Session {
                id: "p".into(),
                items: (0..t_len).map(|t| t % m.item_names.len()).collect(),
                clicks: (0..t_len).map(|i| (code >> i) & 1 == 1).collect(),
                covariates: Vec::new(),
            });
            match log_likelihood(m, &log) {
                Ok(ll) => ll.exp(),
                Err(GcmError::Degenerate { .. }) => 0.0,
                Err(e) => panic!("{e}"),
            }
        })
        .collect()
}
