use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dcomp_cli::commands::{self, CliError};
use dcomp_cli::{load_str, save_string, LoadError};
use dcomp_core::random::{self, ScenarioSpec};
use dcomp_core::{Integration, MuChoice, SimError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn dcomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcomp")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn built_in_scenario_carries_the_experiment_values() {
    let s = commands::paper_scenario();
    assert_eq!(s.agents.len(), 5);
    assert_eq!(s.orders(), vec![2, 2, 2, 1, 1]);
    let theta: Vec<f64> = s.agents.iter().map(|a| a.model.theta()[0]).collect();
    assert_eq!(theta, vec![2.5, 1.2, -2.0, -1.0, 0.5]);
    assert_eq!(s.mu, MuChoice::Fixed(12.8));
    assert_eq!(s.integration, Integration { h: 1e-3, t_end: 40.0, stride: 10 });
    let from_disk = commands::load(&scenario_path("paper.scenario")).unwrap();
    assert_eq!(from_disk, s);
}

#[test]
fn every_shipped_scenario_round_trips() {
    for name in ["paper.scenario", "manifold.scenario", "nussbaum.scenario", "toy.scenario"] {
        let s = commands::load(&scenario_path(name)).unwrap();
        assert_eq!(load_str(&save_string(&s)).unwrap(), s, "{name}");
    }
}

#[test]
fn random_scenarios_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..50 {
        let spec = ScenarioSpec {
            nu: [1, 2, 4][i % 3],
            agents: 1 + i % 4,
            max_order: 3,
            max_params: 3,
            extra_edge_prob: 0.4,
            min_weight: 0.1,
            spread: 0.5,
            eta_spread: 0.5,
            quadratic: true,
            integration: Integration::default(),
        };
        let s = random::scenario(&mut rng, &spec);
        let text = save_string(&s);
        assert_eq!(load_str(&text).unwrap(), s, "scenario {i}:\n{text}");
    }
}

#[test]
fn missing_file_exits_with_io_code() {
    let o = dcomp(&["simulate", "/definitely/not/here.scenario"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cannot read"), "{}", stderr(&o));
}

#[test]
fn invalid_file_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("jordan.scenario");
    let text = std::fs::read_to_string(scenario_path("toy.scenario"))
        .unwrap()
        .replace("a = [[0.0]]", "a = [[0.0, 1.0], [0.0, 0.0]]")
        .replace("c = [1.0]", "c = [1.0, 0.0]")
        .replace("x0 = [1.0]\n\n[graph]", "x0 = [1.0, 0.0]\n\n[graph]");
    std::fs::write(&path, text).unwrap();
    let o = dcomp(&["verify-gain", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not semi-simple"), "{}", stderr(&o));
    match commands::load(&path) {
        Err(CliError::Load {
            source: LoadError::Invalid(SimError::Leader(_)),
            ..
        }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn manifold_scenario_is_in_tolerance_from_the_start() {
    let mut out = Vec::new();
    let m = commands::simulate(&scenario_path("manifold.scenario"), &Default::default(), &mut out).unwrap();
    for a in &m.agents {
        assert_eq!(a.time_to_tolerance, Some(0.0));
    }
    assert!(String::from_utf8(out).unwrap().contains("time to |e| < 0.05 = 0,"));
}

#[test]
fn simulate_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("run.csv");
    let o = dcomp(&[
        "simulate",
        scenario_path("paper.scenario").to_str().unwrap(),
        "--T",
        "2",
        "--h",
        "2e-3",
        "--stride",
        "5",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("t,y0,y1,e1,u1,ehat1,V1,etaerr1,thetahat1_1,y2"));
    // 2 s at h = 2e-3 is 1000 steps, logged every 5 plus t = 0.
    assert_eq!(lines.count(), 201);
    let summary = stdout(&o);
    assert_eq!(summary.matches("bounded = true,").count(), 5, "{summary}");
    assert!(summary.contains("all bounded = true"));
}

#[test]
fn simulate_rejects_bad_overrides() {
    let o = dcomp(&["simulate", scenario_path("toy.scenario").to_str().unwrap(), "--h=-1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("integration settings"), "{}", stderr(&o));
}

#[test]
fn usage_errors_are_validation_failures() {
    let o = dcomp(&["simulate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = dcomp(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn verify_gain_reports_the_design() {
    let o = dcomp(&["verify-gain", scenario_path("toy.scenario").to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("P0 = [[1]]"), "{text}");
    assert!(text.contains("K = [2]"), "{text}");
    for key in ["mu = 2", "mu_min = ", "riccati_residual = ", "min_real_part_h_aug = ", "spectral_abscissa = ", "hurwitz = true"] {
        assert!(text.contains(key), "missing {key} in {text}");
    }
}

#[test]
fn verify_gain_names_the_required_minimum() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("low.scenario");
    let text = std::fs::read_to_string(scenario_path("paper.scenario"))
        .unwrap()
        .replace("mu = 12.8", "mu = 0.9");
    std::fs::write(&path, text).unwrap();
    let o = dcomp(&["verify-gain", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("below the required minimum 1.0"), "{}", stderr(&o));
}

#[test]
fn graph_check_on_chain_reports_positive_spectra() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("haug.csv");
    let o = dcomp(&[
        "graph-check",
        scenario_path("paper.scenario").to_str().unwrap(),
        "--dump-haug",
        dump.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("spanning_tree = true"));
    assert!(text.contains("spectrum_h = [1.000000, 1.000000, 1.000000, 1.000000, 1.000000]"), "{text}");

    // Orders (2, 2, 2, 1, 1) give 3 + 3 + 3 + 2 + 2 chain links.
    let csv = std::fs::read_to_string(&dump).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 13);
    assert!(rows.iter().all(|r| r.len() == 13));
    let expected = commands::paper_scenario()
        .graph
        .build_augmented_h(&dcomp_core::AugmentedSpec::new(vec![2, 2, 2, 1, 1]).unwrap())
        .unwrap();
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            assert_eq!(*v, expected[(i, j)]);
        }
    }
}

#[test]
fn graph_check_reports_disconnected_agents() {
    let o = dcomp(&["graph-check", scenario_path("disconnected.scenario").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("spanning_tree = false"));
    assert!(text.contains("unreachable_agents = [2, 3]"));
    assert!(stderr(&o).contains("no spanning tree"));
    // Full loading rejects the same file.
    assert!(matches!(
        commands::load(&scenario_path("disconnected.scenario")),
        Err(CliError::Load {
            source: LoadError::Invalid(SimError::NoSpanningTree(_)),
            ..
        })
    ));
}

#[test]
fn self_loop_in_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loop.scenario");
    let text = std::fs::read_to_string(scenario_path("toy.scenario"))
        .unwrap()
        .replace("edges = [{ from = 0, to = 1 }]", "edges = [{ from = 0, to = 1 }, { from = 1, to = 1, weight = 0.5 }]");
    std::fs::write(&path, text).unwrap();
    let o = dcomp(&["graph-check", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("self loops are not allowed"), "{}", stderr(&o));
}

#[test]
fn paper_example_honors_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("nested/run");
    let o = dcomp(&["paper-example", "--out-dir", out_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let errors = std::fs::read_to_string(out_dir.join(commands::PAPER_ERRORS_CSV)).unwrap();
    assert!(errors.starts_with("t,e1,e2,e3,e4,e5\n"));
    assert_eq!(errors.lines().count(), 4002);
    assert!(out_dir.join(commands::PAPER_CSV).exists());
    assert!(stdout(&o).contains("K = [17.30807"));
}
