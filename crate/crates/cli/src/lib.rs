//! Batch driver for orbit-inertia experiments: single runs, seed sweeps
//! with a shared plant cache, and regressor rank diagnostics.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use orbit_inertia::multibody::{panda_fixed, panda_floating, MultibodyModel};
use orbit_inertia::regressor::{
    base_parameter_analysis_with_priority, force_regressor, momentum_regressor, ColumnSelection, RegressorSample,
    SampleKind, DEFAULT_RANK_TOL,
};
use orbit_inertia::simulation::{estimate, simulate, write_trace_csv, ExperimentLog, Recording, Scenario, SimulationError, Summary};
use orbit_inertia::spatial::Pose;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment variable capping sweep parallelism.
pub const THREADS_ENV: &str = "ORBIT_INERTIA_THREADS";

/// Batch of (scenario, seed) pairs. Scenario paths are relative to the
/// manifest file; so is `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub scenarios: Vec<PathBuf>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub parallelism: Option<usize>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::Parse(_) | SimulationError::InvalidScenario(_) | SimulationError::MomentumRequiresFloating => {
                CliError::Usage(e.to_string())
            }
            SimulationError::Io { .. } => CliError::Usage(e.to_string()),
            SimulationError::Model(_) | SimulationError::Estimator(_) => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

impl RunManifest {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut m: RunManifest =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("manifest parse error: {e}")))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for s in &mut m.scenarios {
            if s.is_relative() {
                *s = dir.join(&*s);
            }
        }
        if m.out_dir.is_relative() {
            m.out_dir = dir.join(&m.out_dir);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.scenarios.is_empty() || self.seeds.is_empty() {
            return Err(CliError::Usage("manifest lists no runs".into()));
        }
        let unique: HashSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(CliError::Usage("manifest seeds must be unique".into()));
        }
        if self.parallelism == Some(0) {
            return Err(CliError::Usage("parallelism must be at least 1".into()));
        }
        Ok(())
    }
}

/// Thread count: the manifest's request (or the machine's), capped by
/// [`THREADS_ENV`].
pub fn thread_count(requested: Option<usize>) -> usize {
    let base = requested.unwrap_or_else(|| std::thread::available_parallelism().map(usize::from).unwrap_or(1));
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&c| c > 0);
    cap.map_or(base, |c| base.min(c)).max(1)
}

/// Lightweight outcome of one run; the full log is written to disk and dropped.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub scenario: String,
    pub seed: u64,
    pub summary: Summary,
    pub t: Vec<f64>,
    pub d_phi: Vec<f64>,
    /// Smallest pseudo-inertia eigenvalue over the accepted estimates (rows after the prior).
    pub min_eig: f64,
    pub failure: Option<String>,
    pub wall_time: f64,
}

impl RunResult {
    fn from_log(log: &ExperimentLog, wall_time: f64) -> Self {
        Self {
            scenario: log.scenario.clone(),
            seed: log.seed,
            summary: log.summary,
            t: log.rows.iter().map(|r| r.t).collect(),
            d_phi: log.rows.iter().map(|r| r.d_phi).collect(),
            min_eig: log.rows.iter().skip(1).map(|r| r.min_eig).fold(f64::INFINITY, f64::min),
            failure: log.failure.clone(),
            wall_time,
        }
    }

    /// Time at which `D_φ` first falls below `threshold` (the prior row excluded).
    pub fn first_time_below(&self, threshold: f64) -> Option<f64> {
        self.d_phi.iter().zip(&self.t).skip(1).find(|(d, _)| **d < threshold).map(|(_, t)| *t)
    }
}

fn run_stem(name: &str, seed: u64) -> String {
    format!("{name}_seed{seed}")
}

#[derive(Serialize)]
struct RunSummaryFile<'a> {
    scenario: &'a str,
    seed: u64,
    #[serde(rename = "final_D_phi")]
    final_d_phi: f64,
    #[serde(rename = "final_RMS")]
    final_rms: f64,
    wall_time: f64,
    steps: usize,
    stalls: usize,
    max_momentum_drift: Option<f64>,
    failure: Option<&'a str>,
}

fn write_run_outputs(out_dir: &Path, log: &ExperimentLog, wall_time: f64) -> Result<(), CliError> {
    let stem = run_stem(&log.scenario, log.seed);
    let csv = out_dir.join(format!("{stem}.csv"));
    let mut w = io::BufWriter::new(fs::File::create(&csv).map_err(|e| io_err(&csv, e))?);
    write_trace_csv(&mut w, log).and_then(|_| w.flush()).map_err(|e| io_err(&csv, e))?;
    let json = out_dir.join(format!("{stem}.json"));
    let summary = RunSummaryFile {
        scenario: &log.scenario,
        seed: log.seed,
        final_d_phi: log.summary.final_d_phi,
        final_rms: log.summary.final_rms,
        wall_time,
        steps: log.summary.steps,
        stalls: log.summary.stalls,
        max_momentum_drift: log.summary.max_momentum_drift,
        failure: log.failure.as_deref(),
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&json, text + "\n").map_err(|e| io_err(&json, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

/// Run one scenario. `seed` overrides the scenario's own seed.
pub fn cmd_run(scenario_path: &Path, seed: Option<u64>, out_dir: &Path) -> Result<RunResult, CliError> {
    let scenario = Scenario::from_file(scenario_path)?;
    scenario.load_model()?;
    ensure_dir(out_dir)?;
    let seed = seed.unwrap_or(scenario.seed);
    let start = Instant::now();
    let recording = simulate(&scenario)?;
    let log = estimate(&scenario, &recording, seed)?;
    let wall = start.elapsed().as_secs_f64();
    write_run_outputs(out_dir, &log, wall)?;
    let result = RunResult::from_log(&log, wall);
    match &log.failure {
        Some(f) => Err(CliError::Runtime(format!("{}: {f} (partial log written)", scenario.name))),
        None => Ok(result),
    }
}

/// Run every (scenario, seed) pair. Plant runs are shared between pairs
/// with the same plant configuration. With `out_dir`, each run's trace and
/// summary are written there. Results come back in (scenario, seed) order.
pub fn run_batch(scenarios: &[Scenario], seeds: &[u64], threads: usize, out_dir: Option<&Path>) -> Vec<Result<RunResult, String>> {
    let pairs: Vec<(usize, u64)> = (0..scenarios.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    run_pairs(scenarios, &pairs, threads, out_dir)
}

/// As [`run_batch`] for an explicit list of (scenario index, seed) pairs.
pub fn run_pairs(scenarios: &[Scenario], pairs: &[(usize, u64)], threads: usize, out_dir: Option<&Path>) -> Vec<Result<RunResult, String>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
    pool.install(|| {
        let mut keys: BTreeMap<String, usize> = BTreeMap::new();
        let mut plants: Vec<&Scenario> = Vec::new();
        let plant_of: Vec<usize> = scenarios
            .iter()
            .map(|s| {
                *keys.entry(s.plant_key()).or_insert_with(|| {
                    plants.push(s);
                    plants.len() - 1
                })
            })
            .collect();
        let recordings: Vec<Result<Arc<Recording>, String>> =
            plants.par_iter().map(|s| simulate(s).map(Arc::new).map_err(|e| e.to_string())).collect();
        pairs
            .par_iter()
            .map(|&(i, seed)| {
                let scenario = &scenarios[i];
                let recording = recordings[plant_of[i]].as_ref().map_err(|e| format!("{}: {e}", scenario.name))?;
                let start = Instant::now();
                let log = estimate(scenario, recording, seed).map_err(|e| format!("{}: {e}", scenario.name))?;
                let wall = start.elapsed().as_secs_f64() + recording.wall_time;
                if let Some(dir) = out_dir {
                    write_run_outputs(dir, &log, wall).map_err(|e| e.message().to_string())?;
                }
                Ok(RunResult::from_log(&log, wall))
            })
            .collect()
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

/// Per-scenario statistics of final `D_φ` and RMS, plus a per-run table.
pub fn write_aggregate_csv<W: Write>(mut out: W, names: &[String], results: &[Result<RunResult, String>]) -> io::Result<()> {
    writeln!(out, "scenario,runs,failed,median_D_phi,q25_D_phi,q75_D_phi,min_D_phi,max_D_phi,median_rms")?;
    for name in names {
        let ok: Vec<&RunResult> = results.iter().filter_map(|r| r.as_ref().ok()).filter(|r| &r.scenario == name).collect();
        let failed = ok.iter().filter(|r| r.failure.is_some()).count();
        let mut d: Vec<f64> = ok.iter().map(|r| r.summary.final_d_phi).collect();
        d.sort_by(f64::total_cmp);
        let rms: Vec<f64> = ok.iter().map(|r| r.summary.final_rms).collect();
        writeln!(
            out,
            "{name},{},{failed},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            d.len(),
            quantile(&d, 0.5),
            quantile(&d, 0.25),
            quantile(&d, 0.75),
            d.first().copied().unwrap_or(f64::NAN),
            d.last().copied().unwrap_or(f64::NAN),
            median(&rms)
        )?;
    }
    Ok(())
}

fn write_runs_csv<W: Write>(mut out: W, results: &[Result<RunResult, String>]) -> io::Result<()> {
    writeln!(out, "scenario,seed,final_D_phi,final_rms,steps,stalls,failure")?;
    for r in results.iter().filter_map(|r| r.as_ref().ok()) {
        let failure = r.failure.as_deref().unwrap_or("").replace(',', ";");
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{},{},{failure}",
            r.scenario, r.seed, r.summary.final_d_phi, r.summary.final_rms, r.summary.steps, r.summary.stalls
        )?;
    }
    Ok(())
}

/// Outcome of a sweep: results in manifest order and the count of failed runs.
#[derive(Debug)]
pub struct SweepOutcome {
    pub results: Vec<Result<RunResult, String>>,
    pub failed: usize,
}

pub fn cmd_sweep(manifest_path: &Path) -> Result<SweepOutcome, CliError> {
    let manifest = RunManifest::from_file(manifest_path)?;
    let scenarios = manifest.scenarios.iter().map(Scenario::from_file).collect::<Result<Vec<_>, _>>()?;
    for s in &scenarios {
        s.load_model()?;
    }
    let names: Vec<String> = scenarios.iter().map(|s| s.name.clone()).collect();
    if names.iter().collect::<HashSet<_>>().len() != names.len() {
        return Err(CliError::Usage("scenario names in a manifest must be unique".into()));
    }
    ensure_dir(&manifest.out_dir)?;
    let results = run_batch(&scenarios, &manifest.seeds, thread_count(manifest.parallelism), Some(&manifest.out_dir));
    let agg = manifest.out_dir.join("aggregate.csv");
    let mut buf = Vec::new();
    write_aggregate_csv(&mut buf, &names, &results).expect("in-memory write");
    fs::write(&agg, buf).map_err(|e| io_err(&agg, e))?;
    let runs = manifest.out_dir.join("runs.csv");
    let mut buf = Vec::new();
    write_runs_csv(&mut buf, &results).expect("in-memory write");
    fs::write(&runs, buf).map_err(|e| io_err(&runs, e))?;
    let failed = results.iter().filter(|r| r.as_ref().map_or(true, |r| r.failure.is_some())).count();
    Ok(SweepOutcome { results, failed })
}

/// Resolve a model argument: a JSON path or `builtin:panda_fixed` / `builtin:panda_floating`.
pub fn load_model(arg: &str) -> Result<MultibodyModel, CliError> {
    match arg {
        "builtin:panda_fixed" => Ok(panda_fixed()),
        "builtin:panda_floating" => Ok(panda_floating()),
        path => MultibodyModel::from_file(path).map_err(|e| CliError::Usage(format!("{path}: {e}"))),
    }
}

/// Rank of a stacked regressor and whether the end-effector link's ten columns are all independent.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub rank: usize,
    pub columns: usize,
    pub target_independent: usize,
    pub pivot_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankAnalysis {
    pub force: RankReport,
    /// `None` for fixed-base models.
    pub momentum: Option<RankReport>,
}

fn random_state(model: &MultibodyModel, rng: &mut ChaCha8Rng) -> orbit_inertia::multibody::RobotState {
    let mut s = model.zero_state();
    if model.is_floating() {
        let mut u = || rng.gen_range(-1.0..1.0);
        let pose = Pose::from_xyz_rpy([u(), u(), u()], [3.0 * u(), 1.5 * u(), 3.0 * u()]);
        s.set_base_pose(&pose);
    }
    let off = model.nq() - model.n_joints();
    for k in off..model.nq() {
        s.q[k] = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    }
    s.nu = DVector::from_fn(model.nv(), |_, _| rng.gen_range(-1.0..1.0));
    s
}

fn rank_report(model: &MultibodyModel, samples: &[RegressorSample]) -> Result<RankReport, CliError> {
    let labels = model.param_labels();
    let ee = ColumnSelection::link(model, model.end_effector);
    let bp = base_parameter_analysis_with_priority(samples, DEFAULT_RANK_TOL, ee.indices(), Some(&labels))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(RankReport {
        rank: bp.rank,
        columns: labels.len(),
        target_independent: ee.indices().iter().filter(|&&c| bp.independent.contains(c)).count(),
        pivot_labels: bp.independent.labels().to_vec(),
    })
}

/// Numerical rank of force and momentum regressors stacked over `n_samples` random states.
pub fn rank_analysis(model: &MultibodyModel, n_samples: usize, seed: u64) -> Result<RankAnalysis, CliError> {
    if n_samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states: Vec<_> = (0..n_samples).map(|_| random_state(model, &mut rng)).collect();
    let force: Vec<RegressorSample> = states
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let acc = DVector::from_fn(model.nv(), |_, _| rng.gen_range(-2.0..2.0));
            let u = force_regressor(model, s, &acc);
            let rows = u.nrows();
            RegressorSample::unweighted(SampleKind::Force, u, DVector::zeros(rows), k as f64)
        })
        .collect();
    let momentum = if model.is_floating() {
        let samples = states
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let u = momentum_regressor(model, s).map_err(|e| CliError::Runtime(e.to_string()))?;
                Ok(RegressorSample::unweighted(SampleKind::Momentum, u, DVector::zeros(6), k as f64))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Some(rank_report(model, &samples)?)
    } else {
        None
    };
    Ok(RankAnalysis { force: rank_report(model, &force)?, momentum })
}

fn print_rank<W: Write>(out: &mut W, what: &str, r: &RankReport, n: usize, ee: &str) -> io::Result<()> {
    writeln!(out, "{what} regressor: rank {} of {} columns over {n} samples", r.rank, r.columns)?;
    let verdict = if r.target_independent == 10 { "all linearly independent" } else { "NOT all independent" };
    writeln!(out, "  target columns ({ee}): {}/10 independent, {verdict}", r.target_independent)?;
    writeln!(out, "  independent columns: {}", r.pivot_labels.join(" "))
}

pub fn cmd_rank<W: Write>(out: &mut W, model_arg: &str, n_samples: usize, seed: u64) -> Result<RankAnalysis, CliError> {
    let model = load_model(model_arg)?;
    let analysis = rank_analysis(&model, n_samples, seed)?;
    let ee = model.links()[model.end_effector].name.clone();
    let w = |e: io::Error| CliError::Runtime(e.to_string());
    writeln!(out, "model {}: {} links, {} inertial parameters", model.name, model.links().len(), analysis.force.columns).map_err(w)?;
    print_rank(out, "force", &analysis.force, n_samples, &ee).map_err(w)?;
    match &analysis.momentum {
        Some(m) => print_rank(out, "momentum", m, n_samples, &ee).map_err(w)?,
        None => writeln!(out, "momentum regressor: skipped, fixed-base model has no free-floating momentum").map_err(w)?,
    }
    Ok(analysis)
}
