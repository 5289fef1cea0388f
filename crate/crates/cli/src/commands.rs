use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use dcomp_core::gain::{self, GainDesign};
use dcomp_core::sim::{self, TRACKING_TOL};
use dcomp_core::{linalg, Metrics, Scenario, SimError, TrajectoryLog};
use nalgebra::DMatrix;
use thiserror::Error;

use crate::scenario_file::{LoadError, ScenarioFile};
use crate::PAPER_SCENARIO;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}", path = path.display())]
    Read { path: PathBuf, source: io::Error },
    #[error("cannot write {path}: {source}", path = path.display())]
    Write { path: PathBuf, source: io::Error },
    #[error("{origin}: {source}")]
    Load {
        origin: String,
        #[source]
        source: LoadError,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("graph has no spanning tree rooted at the leader; unreachable agents: {0:?}")]
    NoSpanningTree(Vec<usize>),
    #[error("run escaped at t = {0}")]
    Escaped(f64),
}

impl CliError {
    /// 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Read { .. } | CliError::Write { .. } => 2,
            _ => 1,
        }
    }
}

fn stdout_err(source: io::Error) -> CliError {
    CliError::Write {
        path: PathBuf::from("<stdout>"),
        source,
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_file(path: &Path) -> Result<ScenarioFile, CliError> {
    ScenarioFile::parse(&read(path)?).map_err(|source| CliError::Load {
        origin: path.display().to_string(),
        source,
    })
}

/// Reads and fully validates a scenario file.
pub fn load(path: &Path) -> Result<Scenario, CliError> {
    parse_file(path)?.to_scenario().map_err(|source| CliError::Load {
        origin: path.display().to_string(),
        source,
    })
}

/// The built-in five-agent reproduction scenario.
pub fn paper_scenario() -> Scenario {
    crate::scenario_file::load_str(PAPER_SCENARIO).expect("built-in scenario is valid")
}

#[derive(Debug, Clone, Default)]
pub struct SimulateOptions {
    pub h: Option<f64>,
    pub t_end: Option<f64>,
    pub stride: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn simulate(path: &Path, opts: &SimulateOptions, out: &mut dyn Write) -> Result<Metrics, CliError> {
    let mut scenario = load(path)?;
    let it = &mut scenario.integration;
    it.h = opts.h.unwrap_or(it.h);
    it.t_end = opts.t_end.unwrap_or(it.t_end);
    it.stride = opts.stride.unwrap_or(it.stride);
    let log = sim::run(&scenario)?;
    if let Some(csv) = &opts.out {
        write_file(csv, &log.to_csv())?;
    }
    let metrics = log.metrics();
    out.write_all(summary(&log, &metrics).as_bytes()).map_err(stdout_err)?;
    Ok(metrics)
}

fn summary(log: &TrajectoryLog, m: &Metrics) -> String {
    let mut s = String::new();
    let t_end = log.samples.last().map_or(0.0, |s| s.t);
    writeln!(s, "samples = {}, t_end = {t_end}", log.samples.len()).unwrap();
    if let Some(t) = m.escape {
        writeln!(s, "escape at t = {t}").unwrap();
    }
    for (i, a) in m.agents.iter().enumerate() {
        let ttt = a.time_to_tolerance.map_or("never".to_string(), |t| t.to_string());
        let lyap = a.lyapunov_residual.map_or("n/a".to_string(), |r| format!("{r:e}"));
        writeln!(
            s,
            "agent {}: bounded = {}, sup|x| = {:.6}, sup|theta_hat| = {:.6}, sup|u| = {:.6}, \
             peak|e| = {:.6}, final|e| = {:e}, time to |e| < {TRACKING_TOL} = {ttt}, lyapunov residual = {lyap}",
            i + 1,
            a.bounded,
            a.sup_x,
            a.sup_theta_hat,
            a.sup_u,
            a.peak_abs_e,
            a.final_abs_e,
        )
        .unwrap();
    }
    writeln!(s, "all bounded = {}", m.all_bounded()).unwrap();
    s
}

fn fmt_vec<'a>(v: impl IntoIterator<Item = &'a f64>) -> String {
    let items: Vec<String> = v.into_iter().map(|x| x.to_string()).collect();
    format!("[{}]", items.join(", "))
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = m.row_iter().map(|r| fmt_vec(r.iter())).collect();
    format!("[{}]", rows.join(", "))
}

/// Flat `key = value` report of the gain design.
pub fn gain_report(d: &GainDesign) -> String {
    let mut s = String::new();
    writeln!(s, "P0 = {}", fmt_matrix(&d.p0)).unwrap();
    writeln!(s, "mu = {}", d.mu).unwrap();
    writeln!(s, "mu_min = {}", d.mu_min).unwrap();
    writeln!(s, "K = {}", fmt_vec(d.k.iter())).unwrap();
    writeln!(s, "riccati_residual = {:e}", d.riccati_residual).unwrap();
    writeln!(s, "min_real_part_h_aug = {}", d.min_real_part_h_aug).unwrap();
    writeln!(s, "spectral_abscissa = {}", d.check.spectral_abscissa).unwrap();
    writeln!(s, "factored_abscissa = {}", d.check.factored_abscissa).unwrap();
    writeln!(s, "hurwitz = {}", d.check.is_hurwitz() && d.check.routes_agree()).unwrap();
    s
}

pub fn verify_gain(path: &Path, out: &mut dyn Write) -> Result<GainDesign, CliError> {
    let design = load(path)?.design()?;
    out.write_all(gain_report(&design).as_bytes()).map_err(stdout_err)?;
    Ok(design)
}

fn fmt_spectrum(m: &DMatrix<f64>) -> Result<String, CliError> {
    let mut eig = linalg::eigenvalues(m).map_err(|e| CliError::Sim(SimError::Gain(e.into())))?;
    eig.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let items: Vec<String> = eig
        .iter()
        .map(|z| {
            if z.im.abs() < 5e-7 {
                format!("{:.6}", z.re)
            } else {
                format!("{:.6}{:+.6}i", z.re, z.im)
            }
        })
        .collect();
    Ok(format!("[{}]", items.join(", ")))
}

/// Reports reachability and the spectra of `H` and `Ĥ`. Only the graph and
/// agent orders need to be valid; a graph without a spanning tree is
/// reported and then returned as an error.
pub fn graph_check(path: &Path, dump_haug: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let file = parse_file(path)?;
    let load_err = |source| CliError::Load {
        origin: path.display().to_string(),
        source,
    };
    let graph = file.graph().map_err(load_err)?;
    let spec = file.orders().map_err(load_err)?;
    let h = graph.build_h();
    let h_aug = graph.build_augmented_h(&spec).map_err(SimError::Graph)?;
    let unreachable = graph.unreachable_agents();

    let mut s = String::new();
    writeln!(s, "agents = {}", graph.agents()).unwrap();
    writeln!(s, "edges = {}", graph.edges().len()).unwrap();
    writeln!(s, "spanning_tree = {}", unreachable.is_empty()).unwrap();
    if !unreachable.is_empty() {
        writeln!(s, "unreachable_agents = {unreachable:?}").unwrap();
    }
    writeln!(s, "spectrum_h = {}", fmt_spectrum(&h)?).unwrap();
    writeln!(s, "spectrum_h_aug = {}", fmt_spectrum(&h_aug)?).unwrap();
    if unreachable.is_empty() {
        let bound = gain::mu_lower_bound(&h_aug).map_err(SimError::Gain)?;
        writeln!(s, "mu_min = {bound}").unwrap();
    }
    out.write_all(s.as_bytes()).map_err(stdout_err)?;

    if let Some(csv) = dump_haug {
        let mut text = String::new();
        for row in h_aug.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(text, "{}", cells.join(",")).unwrap();
        }
        write_file(csv, &text)?;
    }
    if unreachable.is_empty() {
        Ok(())
    } else {
        Err(CliError::NoSpanningTree(unreachable))
    }
}

pub const PAPER_CSV: &str = "paper_example.csv";
pub const PAPER_ERRORS_CSV: &str = "paper_example_errors.csv";

/// Runs the built-in scenario and writes the full trajectory CSV and the
/// tracking-error CSV into `out_dir`.
pub fn paper_example(out_dir: &Path, out: &mut dyn Write) -> Result<TrajectoryLog, CliError> {
    fs::create_dir_all(out_dir).map_err(|source| CliError::Write {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let scenario = paper_scenario();
    let design = scenario.design()?;
    let log = sim::run(&scenario)?;
    write_file(&out_dir.join(PAPER_CSV), &log.to_csv())?;
    write_file(&out_dir.join(PAPER_ERRORS_CSV), &log.errors_csv())?;
    let metrics = log.metrics();
    let mut s = gain_report(&design);
    s.push_str(&summary(&log, &metrics));
    writeln!(s, "wrote {} and {}", out_dir.join(PAPER_CSV).display(), out_dir.join(PAPER_ERRORS_CSV).display()).unwrap();
    out.write_all(s.as_bytes()).map_err(stdout_err)?;
    if let Some(t) = log.escape {
        return Err(CliError::Escaped(t));
    }
    Ok(log)
}
