//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any criterion fails. Random corpora use seed
//! `1000 + criterion number`.

use std::path::Path;
use std::time::{Duration, Instant};

use dcomp_cli::commands;
use dcomp_core::controller::BackstepController;
use dcomp_core::gain::{self, MuChoice};
use dcomp_core::sim::{self, CompensatorProbe, TRACKING_TOL};
use dcomp_core::{random, AgentModel, AugmentedSpec, ClosedLoop, ControllerState, Direction, Integration, Scenario};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng_for(criterion: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(1000 + criterion)
}

fn scenario_path(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn gain_reproduction() -> Outcome {
    let start = Instant::now();
    let mut out = Vec::new();
    let d = commands::verify_gain(&scenario_path("paper.scenario"), &mut out).unwrap();
    let elapsed = start.elapsed();
    let expected = [17.3081, 5.3019];
    let err = (d.k[0] - expected[0]).abs().max((d.k[1] - expected[1]).abs());
    outcome(
        err <= 5e-4 && d.riccati_residual <= 1e-8 && within(elapsed, 1.0),
        format!(
            "K = [{:.6}, {:.6}], max |K - printed| = {err:.2e}, residual {:.2e}, {:.3} s",
            d.k[0],
            d.k[1],
            d.riccati_residual,
            elapsed.as_secs_f64()
        ),
    )
}

fn care_oracle() -> Outcome {
    let start = Instant::now();
    let leader = commands::paper_scenario().leader;
    let p = gain::solve_care(&leader).unwrap();
    let elapsed = start.elapsed();
    // Closed form for A = [[0, 1], [-1, 0]], C = [1, 0].
    let b = 2f64.sqrt() - 1.0;
    let a = (2.0 * 2f64.sqrt() - 1.0).sqrt();
    let c = a * 2f64.sqrt();
    let exact = DMatrix::from_row_slice(2, 2, &[a, b, b, c]);
    let err = (&p - &exact).amax();
    outcome(
        err <= 1e-9 && within(elapsed, 1.0),
        format!("max |P0 - closed form| = {err:.2e}, {:.3} s", elapsed.as_secs_f64()),
    )
}

fn stacked_hurwitz() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_for(3);
    let mut failures = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    for i in 0..100 {
        let nu = [1, 2, 4][i % 3];
        let n = rng.gen_range(1..=6);
        let leader = random::leader(&mut rng, nu);
        let graph = random::graph(&mut rng, n, 0.3);
        let orders = random::orders(&mut rng, n, 3);
        let h_aug = graph.build_augmented_h(&AugmentedSpec::new(orders).unwrap()).unwrap();
        let bound = gain::mu_lower_bound(&h_aug).unwrap();
        let extra = rng.gen_range(1.0..5.0);
        for mu in [bound, gain::AUTO_MU_MARGIN * bound, extra * bound] {
            let d = gain::design(&leader, &h_aug, MuChoice::Fixed(mu)).unwrap();
            worst = worst.max(d.check.spectral_abscissa);
            if !(d.check.is_hurwitz() && d.check.routes_agree()) {
                failures.push((i, mu, d.check.clone()));
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && within(elapsed, 30.0),
        format!(
            "300 designs (100 scenarios x mu in {{bound, 1.05 bound, random in [bound, 5 bound)}}), \
             {} failures, largest abscissa {worst:.3e}, {:.2} s",
            failures.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn decay_probe() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_for(4);
    let mut ratios = Vec::new();
    for i in 0..10 {
        let nu = [1, 2, 4][i % 3];
        let n = rng.gen_range(1..=5);
        let leader = random::leader(&mut rng, nu);
        let graph = random::graph(&mut rng, n, 0.3);
        let orders = random::orders(&mut rng, n, 3);
        let h_aug = graph.build_augmented_h(&AugmentedSpec::new(orders.clone()).unwrap()).unwrap();
        let d = gain::design(&leader, &h_aug, MuChoice::Auto).unwrap();
        let probe = CompensatorProbe::new(&leader, &graph, &orders, &d.k).unwrap();
        let eta0 = random::chains(&mut rng, &orders, nu, 1.0);
        let horizon = 20.0 / d.spectral_abscissa().abs();
        let log = probe.run(
            &eta0,
            &|_, _| 0.0,
            Integration {
                h: (horizon / 20_000.0).min(1e-3),
                t_end: horizon,
                stride: 10,
            },
        );
        let smallest = log.norms.iter().copied().fold(f64::INFINITY, f64::min);
        ratios.push(smallest / log.norms[0]);
    }
    let elapsed = start.elapsed();
    let misses = ratios.iter().filter(|r| !(**r < 1e-6)).count();
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    outcome(
        misses == 0 && within(elapsed, 30.0),
        format!(
            "{misses}/10 scenarios above 1e-6 at t = 20/|abscissa|, worst ratio {worst:.2e}, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Peak of `max_i |e_i|` over consecutive windows of `width` seconds
/// starting at `from`.
fn window_peaks(log: &dcomp_core::TrajectoryLog, from: f64, width: f64) -> Vec<f64> {
    let t_end = log.samples.last().unwrap().t;
    let count = ((t_end - from) / width).round() as usize;
    let mut peaks = vec![0.0f64; count];
    for s in log.samples.iter().filter(|s| s.t >= from) {
        let w = (((s.t - from) / width) as usize).min(count - 1);
        for a in &s.agents {
            peaks[w] = peaks[w].max(a.e.abs());
        }
    }
    peaks
}

fn paper_experiment() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let log = commands::paper_example(dir.path(), &mut Vec::new()).unwrap();
    let elapsed = start.elapsed();
    let m = log.metrics();
    let late_peak = log
        .samples
        .iter()
        .filter(|s| s.t >= 30.0)
        .flat_map(|s| s.agents.iter().map(|a| a.e.abs()))
        .fold(0.0, f64::max);
    // Transient: first tenth of the horizon. Windows of 2 s after it.
    let t_end = log.samples.last().unwrap().t;
    let peaks = window_peaks(&log, 0.1 * t_end, 2.0);
    let monotone = peaks.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        late_peak < TRACKING_TOL && m.all_bounded() && monotone && within(elapsed, 120.0),
        format!(
            "max |e| for t >= 30 s = {late_peak:.2e}, all bounded = {}, 2 s window peaks after {:.0} s \
             non-increasing = {monotone} ({:.2e} -> {:.2e}), {:.1} s",
            m.all_bounded(),
            0.1 * t_end,
            peaks[0],
            peaks[peaks.len() - 1],
            elapsed.as_secs_f64()
        ),
    )
}

fn lyapunov_identity() -> Outcome {
    let start = Instant::now();
    let residual = |h: f64| {
        let mut s = commands::paper_scenario();
        s.integration.h = h;
        let log = ClosedLoop::new(&s).unwrap().run();
        (log.escape.is_none(), log.metrics().max_lyapunov_residual())
    };
    let (ok_coarse, coarse) = residual(2e-3);
    let (ok_fine, fine) = residual(1e-3);
    let shrink = coarse / fine;
    outcome(
        ok_coarse && ok_fine && shrink >= 3.5,
        format!(
            "max residual {coarse:.3e} at h = 2e-3, {fine:.3e} at h = 1e-3, shrink {shrink:.2}x, {:.1} s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn jacobian_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_for(7);
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for r in 1..=3 {
        let nu = 2;
        let leader = random::leader(&mut rng, nu);
        let k = DVector::from_fn(nu, |_, _| rng.gen_range(-3.0..3.0));
        let model = random::agent_model(&mut rng, r, 2, true);
        let bc = BackstepController::new(model, &leader, k).unwrap();
        let len = bc.layout().len();
        let split = |z: &[f64]| {
            let (x, rest) = z.split_at(r);
            let (eta, th) = rest.split_at((r + 1) * nu);
            (x.to_vec(), eta.to_vec(), th.to_vec())
        };
        let alphas = |z: &[f64]| {
            let (x, eta, th) = split(z);
            let ctrl = ControllerState {
                theta_hat: DVector::from_vec(th),
                nussbaum_k: None,
            };
            bc.backstep_flat(&x, &eta, &ctrl).unwrap().alphas
        };
        for _ in 0..100 {
            let z: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (x, eta, th) = split(&z);
            let exact = bc.alpha_gradients(&x, &eta, &th).unwrap();
            for v in 0..len {
                let mut p = z.clone();
                let mut q = z.clone();
                p[v] += step;
                q[v] -= step;
                let (ap, aq) = (alphas(&p), alphas(&q));
                for kk in 0..r {
                    let fd = (ap[kk] - aq[kk]) / (2.0 * step);
                    let e = exact[kk][v];
                    worst = worst.max((fd - e).abs() / e.abs().max(1.0));
                    checked += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-5 && within(elapsed, 10.0),
        format!(
            "{checked} partials at 100 points per order 1..3, worst |fd - exact| / max(|exact|, 1) = {worst:.2e}, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn nussbaum_mode() -> Outcome {
    let start = Instant::now();
    let s = commands::load(&scenario_path("nussbaum.scenario")).unwrap();
    let gains: Vec<f64> = s.agents.iter().map(|a| a.model.direction().input_gain()).collect();
    let log = sim::run(&s).unwrap();
    let m = log.metrics();
    let finals: Vec<f64> = m.agents.iter().map(|a| a.final_abs_e).collect();
    let reached = m.agents.iter().all(|a| a.time_to_tolerance.is_some());
    let finite = m.agents.iter().all(|a| a.sup_u.is_finite() && a.sup_x.is_finite() && a.sup_theta_hat.is_finite());
    outcome(
        gains == vec![1.0, -2.0] && reached && finite && m.all_bounded(),
        format!(
            "b = {gains:?}, final |e| = [{:.2e}, {:.2e}], in band from t = {:?}, bounded = {}, {:.1} s",
            finals[0],
            finals[1],
            m.agents.iter().map(|a| a.time_to_tolerance).collect::<Vec<_>>(),
            m.all_bounded(),
            start.elapsed().as_secs_f64()
        ),
    )
}

/// Copy of `scenario` with agent `j`'s plant and controller parameters
/// changed.
fn perturb_agent(scenario: &Scenario, j: usize) -> Scenario {
    let mut s = scenario.clone();
    let a = &mut s.agents[j];
    let m = &a.model;
    let direction = match m.direction() {
        Direction::Known => Direction::Known,
        Direction::Nussbaum { b } => Direction::Nussbaum { b: -3.0 * b },
    };
    a.model = AgentModel::new(
        m.regressors().to_vec(),
        m.theta().map(|v| 2.0 * v + 0.7),
        m.gains().iter().map(|c| c + 1.5).collect(),
        direction,
    )
    .unwrap();
    s
}

fn distributedness() -> Outcome {
    let mut checks = 0usize;
    let mut violations = Vec::new();
    let mut own_changes = 0usize;
    let mut rng = rng_for(9);
    let scenarios = [
        commands::paper_scenario(),
        commands::load(&scenario_path("nussbaum.scenario")).unwrap(),
    ];
    for base in &scenarios {
        let cl = ClosedLoop::new(base).unwrap();
        // Snapshot after one second of closed-loop evolution.
        let mut z = cl.initial_state();
        for _ in 0..1000 {
            z = cl.step(&z, 1e-3).unwrap();
        }
        let n = base.agents.len();
        let u: Vec<f64> = (0..n).map(|i| cl.agent_control(i, &z).unwrap()).collect();
        for j in 0..n {
            // Perturb every internal of agent j: states, compensator chain,
            // estimates, Nussbaum gain, and plant/controller parameters.
            let perturbed = perturb_agent(base, j);
            let cl_j = ClosedLoop::new(&perturbed).unwrap();
            let mut zj = z.clone();
            let (xr, er, tr, k) = cl.agent_ranges(j);
            for idx in xr.chain(er).chain(tr).chain(k) {
                zj[idx] += rng.gen_range(0.1..1.0);
            }
            for i in 0..n {
                let ui = cl_j.agent_control(i, &zj).unwrap();
                if i == j {
                    if ui != u[i] {
                        own_changes += 1;
                    }
                    continue;
                }
                checks += 1;
                if ui.to_bits() != u[i].to_bits() {
                    violations.push((i, j, u[i], ui));
                }
            }
        }
    }
    outcome(
        violations.is_empty() && own_changes > 0,
        format!(
            "{checks} (i, j) pairs over 2 scenarios, {} changed u_i, perturbation changed its own agent's input in {own_changes} cases",
            violations.len()
        ),
    )
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        commands::paper_example(dir.path(), &mut Vec::new()).unwrap();
        let read = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
        (read(commands::PAPER_CSV), read(commands::PAPER_ERRORS_CSV))
    };
    let (a, a_err) = run();
    let (b, b_err) = run();
    outcome(
        a == b && a_err == b_err,
        format!(
            "trajectory CSV {} bytes identical = {}, errors CSV identical = {}, {:.1} s",
            a.len(),
            a == b,
            a_err == b_err,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gain reproduction", gain_reproduction),
        ("CARE closed form", care_oracle),
        ("stacked matrix Hurwitz above the mu bound", stacked_hurwitz),
        ("compensator decay probe", decay_probe),
        ("five-agent experiment", paper_experiment),
        ("Lyapunov identity", lyapunov_identity),
        ("backstepping Jacobian oracle", jacobian_oracle),
        ("Nussbaum mode", nussbaum_mode),
        ("distributedness", distributedness),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {:>2} {name}: {}", i + 1, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
