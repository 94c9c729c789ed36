//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::time::Instant;

use gcm::activations::{objective, objective_gradient, solve_numeric, ActivationKind, MStepProblem, SolverSettings};
use gcm::compiler::Evaluator;
use gcm::data::{Session, SessionLog};
use gcm::em::{backward, fit, fit_observed, forward, expected_transitions, state_posteriors, BlockWeights, FitOptions, FittedModel};
use gcm::evaluation::{perplexity, recovery_error};
use gcm::models::{build_czm, build_ubm, ATTRACTION, CONTINUATION, SATISFACTION};
use gcm::simulator::{sample_from_model, simulate, ModelKind, SimulationConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{czm_reference_matrix, enumerate_paths, random_gcm, ubm_direct_likelihood};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn forward_backward_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let g = random_gcm(&mut rng, 8, 4);
        let ev = g.evaluator();
        let mut session = g.session.clone();
        session.clicks = sample_from_model(&ev, &g.click_states, &session, &mut rng).unwrap();
        let m: Vec<_> = (1..=g.list_size).map(|t| ev.transitions(&session, t).unwrap()).collect();
        let dense: Vec<_> = m.iter().map(|x| x.to_dense()).collect();
        let oracle = enumerate_paths(&dense, &g.click_states, &session.clicks);

        let fwd = forward(&m, &g.click_states, &session.clicks, 0).unwrap();
        let beta = backward(&m, &g.click_states, &session.clicks, &fwd.scales).unwrap();
        let h = expected_transitions(&m, &fwd, &beta, &g.click_states, &session.clicks);
        let zeta = state_posteriors(&fwd, &beta);

        worst = worst.max((fwd.loglik().exp() - oracle.likelihood).abs());
        for t in 0..=g.list_size {
            for k in 0..g.states {
                worst = worst.max((zeta[[k, t]] - oracle.zeta[t][k]).abs());
            }
        }
        for t in 1..=g.list_size {
            let mut hd = ndarray::Array2::<f64>::zeros((g.states, g.states));
            for (&(a, b, _), &v) in m[t - 1].entries.iter().zip(&h[t - 1]) {
                hd[[a, b]] += v;
            }
            worst = worst.max((&hd - &oracle.h[t - 1]).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
        }
    }
    outcome(worst <= 1e-10, format!("50 random models, max abs error {worst:.2e} (tol 1e-10)"))
}

fn ubm_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for t_len in 1..=3 {
        let items = 4;
        let def = build_ubm(t_len, items).unwrap();
        let compiled = def.compile().unwrap();
        for _ in 0..20 {
            let w = def.random_weights(rng.random());
            let attraction: Vec<f64> = w.blocks[0].iter().map(|v| v[0]).collect();
            let gamma: Vec<f64> = w.blocks[1].iter().map(|v| v[0]).collect();
            let ev = Evaluator::new(&compiled, &def.params, &w, &[]).unwrap();
            let list: Vec<usize> = (0..t_len).map(|_| rng.random_range(0..items)).collect();
            for code in 0..1u32 << t_len {
                let y: Vec<bool> = (0..t_len).map(|t| code >> t & 1 == 1).collect();
                let s = Session {
                    id: String::new(),
                    items: list.clone(),
                    clicks: y.clone(),
                    covariates: vec![],
                };
                let m = ev.session_transitions(&s).unwrap();
                let l = forward(&m, def.space.click_states(), &y, 0).unwrap().loglik().exp();
                worst = worst.max((l - ubm_direct_likelihood(&attraction, &gamma, &list, &y)).abs());
                checked += 1;
            }
        }
    }
    outcome(worst <= 1e-10, format!("{checked} click patterns, max abs error {worst:.2e} (tol 1e-10)"))
}

fn czm_matrix_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let def = build_czm(5, 3).unwrap();
    let compiled = def.compile().unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (a, s, g): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let mut w = def.default_weights();
        w.blocks[def.param_index(ATTRACTION).unwrap()].iter_mut().for_each(|v| v[0] = a);
        w.blocks[def.param_index(SATISFACTION).unwrap()].iter_mut().for_each(|v| v[0] = s);
        w.blocks[def.param_index(CONTINUATION).unwrap()][0][0] = g;
        let ev = Evaluator::new(&compiled, &def.params, &w, &[]).unwrap();
        let session = Session {
            id: String::new(),
            items: vec![0, 1, 2, 1, 0],
            clicks: vec![false; 5],
            covariates: vec![],
        };
        let reference = czm_reference_matrix(a, s, g);
        for t in 2..=5 {
            let m = ev.transitions(&session, t).unwrap().to_dense();
            worst = worst.max((&m - &reference).mapv(f64::abs).fold(0.0, |x: f64, &y| x.max(y)));
        }
    }
    outcome(worst <= 1e-14, format!("20 parameter points, positions 2..5, max abs error {worst:.2e} (tol 1e-14)"))
}

fn czm_log(users: usize, seed: u64, sessions: usize) -> SessionLog {
    let cfg = SimulationConfig {
        users,
        seed,
        ..Default::default()
    };
    let (mut log, _) = simulate(&cfg, ModelKind::Czm).unwrap();
    log.sessions.truncate(sessions);
    log
}

/// Criteria 4 and 5 share the same EM runs.
fn monotonicity_and_mstep_agreement() -> (Outcome, Outcome) {
    let log = czm_log(6000, 404, 10_000);
    let def = build_czm(log.list_size, log.item_count()).unwrap();
    let mut worst_drop: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    let mut iterations = Vec::new();
    let mut compared = 0usize;
    let settings = SolverSettings::default();
    for init in 0..5 {
        let opts = FitOptions {
            initial: Some(def.random_weights(1000 + init)),
            ..Default::default()
        };
        let fitted = fit_observed(&def, &log, &opts, &mut |info| {
            for (b, st) in info.statistics.blocks.iter().enumerate() {
                let BlockWeights::Constant { plus, minus } = st else { continue };
                for slot in 0..plus.len() {
                    if plus[slot] + minus[slot] <= 0.0 {
                        continue;
                    }
                    let problem = MStepProblem::from_totals(plus[slot], minus[slot]);
                    let num = solve_numeric(&ActivationKind::Constant, &problem, &info.before.blocks[b][slot], &settings)
                        .expect("numeric M-step");
                    worst_gap = worst_gap.max((num.theta[0] - info.after.blocks[b][slot][0]).abs());
                    compared += 1;
                }
            }
        })
        .unwrap();
        worst_drop = worst_drop.max(fitted.report.worst_decrease());
        iterations.push(fitted.report.iterations);
    }
    (
        outcome(
            worst_drop <= 1e-9,
            format!(
                "{} sessions, 5 initialisations, iterations {iterations:?}, largest decrease {worst_drop:.2e} (slack 1e-9)",
                log.len()
            ),
        ),
        outcome(
            worst_gap <= 1e-6,
            format!("{compared} slot updates, max |closed form - numeric| {worst_gap:.2e} (tol 1e-6)"),
        ),
    )
}

fn parameter_recovery() -> Outcome {
    let cfg = SimulationConfig {
        users: 10_500,
        seed: 505,
        ..Default::default()
    };
    let (mut log, truth) = simulate(&cfg, ModelKind::Czm).unwrap();
    log.sessions.truncate(20_000);
    let def = build_czm(log.list_size, log.item_count()).unwrap();
    let fitted = fit(&def, &log, &FitOptions { threads: Some(1), ..Default::default() }).unwrap();
    let report = recovery_error(&fitted, &truth).unwrap();
    let impressions = log.impressions();
    let gamma_err = report.mean_for(CONTINUATION, |_| true).unwrap();
    let attr_mae = report
        .mean_for(ATTRACTION, |e| {
            let name = e.item.as_deref().unwrap();
            let idx = log.item_names.iter().position(|n| n == name).unwrap();
            impressions[idx] >= 100
        })
        .unwrap_or(f64::INFINITY);
    let covered = impressions.iter().filter(|&&n| n >= 100).count();
    outcome(
        log.len() == 20_000 && gamma_err <= 0.05 && attr_mae <= 0.05,
        format!(
            "{} sessions, |gamma error| {gamma_err:.4} (tol 0.05), attraction MAE {attr_mae:.4} over {covered} items (tol 0.05), {} iterations",
            log.len(),
            fitted.report.iterations
        ),
    )
}

fn split_log(log: &SessionLog, train_fraction: f64) -> (SessionLog, SessionLog) {
    let cut = (log.len() as f64 * train_fraction) as usize;
    let mut train = log.clone();
    let mut test = log.clone();
    train.sessions.truncate(cut);
    test.sessions.drain(..cut);
    (train, test)
}

fn perplexity_ordering() -> Outcome {
    let (mut czm_sum, mut ubm_sum) = (0.0, 0.0);
    for seed in [601, 602, 603] {
        let log = czm_log(10_000, seed, usize::MAX);
        let (train, test) = split_log(&log, 0.8);
        let opts = FitOptions::default();
        let czm = fit(&build_czm(train.list_size, train.item_count()).unwrap(), &train, &opts).unwrap();
        let ubm = fit(&build_ubm(train.list_size, train.item_count()).unwrap(), &train, &opts).unwrap();
        czm_sum += perplexity(&czm, &test).unwrap().overall;
        ubm_sum += perplexity(&ubm, &test).unwrap().overall;
    }
    let (c, u) = (czm_sum / 3.0, ubm_sum / 3.0);
    outcome(c < u && u < 2.0, format!("mean overall perplexity CZM {c:.4} < UBM {u:.4} < 2"))
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for arity in 1..=5 {
        for bias in [false, true] {
            let n_cols = if bias { arity - 1 } else { arity };
            let kind = ActivationKind::LogisticLinear {
                columns: (0..n_cols).map(|c| format!("x{c}")).collect(),
                bias,
            };
            for _ in 0..20 {
                let mut problem = MStepProblem::new();
                for _ in 0..25 {
                    let x: Vec<f64> = (0..n_cols).map(|_| rng.random_range(-2.0..2.0)).collect();
                    problem.push(x, rng.random_range(-1.0..1.0));
                }
                let theta: Vec<f64> = (0..arity).map(|_| rng.random_range(-1.5..1.5)).collect();
                let g = objective_gradient(&kind, &theta, &problem);
                let h = 1e-5;
                for j in 0..arity {
                    let mut up = theta.clone();
                    up[j] += h;
                    let mut down = theta.clone();
                    down[j] -= h;
                    let fd = (objective(&kind, &up, &problem) - objective(&kind, &down, &problem)) / (2.0 * h);
                    let rel = (g[j] - fd).abs() / g[j].abs().max(fd.abs()).max(1e-8);
                    worst = worst.max(rel);
                }
                cases += 1;
            }
        }
    }
    outcome(worst <= 1e-5, format!("{cases} problems, arity 1..5, max relative error {worst:.2e} (tol 1e-5)"))
}

fn determinism() -> Outcome {
    let run = |threads: usize| -> (FittedModel, Vec<u64>) {
        let log = czm_log(1500, 909, usize::MAX);
        let (train, test) = split_log(&log, 0.8);
        let def = build_czm(train.list_size, train.item_count()).unwrap();
        let m = fit(&def, &train, &FitOptions { threads: Some(threads), ..Default::default() }).unwrap();
        let p = perplexity(&m, &test).unwrap();
        let bits = p.per_rank.iter().chain([&p.overall]).map(|v| v.to_bits()).collect();
        (m, bits)
    };
    let (a, pa) = run(1);
    let (b, pb) = run(1);
    let (c, pc) = run(4);
    let same = |x: &FittedModel, y: &FittedModel| {
        x.weights == y.weights
            && x.report.loglik_trace.iter().map(|v| v.to_bits()).eq(y.report.loglik_trace.iter().map(|v| v.to_bits()))
    };
    outcome(
        same(&a, &b) && pa == pb && same(&a, &c) && pa == pc,
        format!(
            "two single-thread runs and one 4-thread run agree bit for bit ({} iterations)",
            a.report.iterations
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters pass arguments; this suite always
    // runs in full.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        results.push((id, name, o, start.elapsed().as_secs_f64()));
    };
    run(1, "forward-backward oracle equivalence", &forward_backward_oracle);
    run(2, "UBM reduction correctness", &ubm_reduction);
    run(3, "CZM matrix identity", &czm_matrix_identity);
    let start = Instant::now();
    let (mono, agree) = monotonicity_and_mstep_agreement();
    let shared = start.elapsed().as_secs_f64();
    results.push((4, "EM monotonicity", mono, shared));
    results.push((5, "closed-form / numeric M-step agreement", agree, 0.0));
    let mut run = |id: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        results.push((id, name, o, start.elapsed().as_secs_f64()));
    };
    run(6, "parameter recovery", &parameter_recovery);
    run(7, "perplexity ordering", &perplexity_ordering);
    run(8, "gradient checks", &gradient_checks);
    run(9, "determinism", &determinism);

    let mut failed = 0;
    for (id, name, o, secs) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!("[{tag}] criterion {id}: {name}: {} [{secs:.1}s]", o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
