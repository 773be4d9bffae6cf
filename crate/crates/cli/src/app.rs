//! Subcommand orchestration, artifact layout and run summaries.
//!
//! Layout of an output directory:
//!
//! ```text
//! resolved_config.json   config with every default materialized
//! run_info.json          command, code version, seeds, wall clock
//! summary.json           derived statistics and the pass/fail table
//! trajectory.jsonl       one observable record per saved step (path, det)
//! distance.jsonl         direct vs rescaled distance per saved step (rescaled)
//! paths/NNNNNN.jsonl     per-path observable records (ensemble)
//! paths.json             per-path summaries (ensemble)
//! convergence.json       ladder and rescaling tables (converge)
//! fields/*.f64 + *.json  raw little-endian fields with shape sidecars
//! FAILED                 present only when the run aborted
//! ```
//!
//! Summaries are computed from the stored artifacts alone, so `report`
//! reproduces them byte for byte.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, LineWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use spme_core::ensemble::{
    bound_checks, coupled_convergence_study, estimate_cstar_from, prob_from_taus, rescaling_study,
    run_ensemble, BoundCheck, ConvergenceTable, CstarEstimate, PathSummary, ProbEstimate, RescalingTable,
    StudySetup,
};
use spme_core::noise::NoiseSpec;
use spme_core::observables::{
    extinction_report, extinction_time_series, moment_bound_check, ExtinctionReport, MomentReport,
};
use spme_core::solver::{PathFailure, PathSolver, StepRecord, Trajectory};
use spme_core::spectral::{self, embedding_constant, Boundary, DomainRef, Field};
use spme_core::Error;
use thiserror::Error as ThisError;

use crate::config::{load_config, CstarPolicy, RunConfig};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Slack on the deterministic extinction-time bound.
pub const EXTINCTION_SLACK: f64 = 1.05;
/// Relative mass drift tolerated by conservative runs.
pub const MASS_TOL: f64 = 1e-8;
/// Fraction of the initial mass left at extinction.
pub const MASS_EXTINCT: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Path,
    Det,
    Rescaled,
    Ensemble,
    Converge,
    Gamma,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Path => "path",
            Command::Det => "det",
            Command::Rescaled => "rescaled",
            Command::Ensemble => "ensemble",
            Command::Converge => "converge",
            Command::Gamma => "gamma",
            Command::Report => "report",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub paths: Option<usize>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub path_index: u64,
    /// Exponent override for `gamma`.
    pub m: Option<f64>,
    /// `report`: fail with exit code 4 if any check fails.
    pub check: bool,
}

#[derive(Debug, ThisError)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Config(Error),
    #[error("numerical failure: {0}")]
    Numeric(Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed checks: {}", .0.join(", "))]
    CheckFailed(Vec<String>),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Numeric(_) => 3,
            AppError::CheckFailed(_) => 4,
            AppError::Io(_) => 1,
        }
    }
}

fn config_err(e: Error) -> AppError {
    match e {
        Error::Io(io) => AppError::Io(io),
        e => AppError::Config(e),
    }
}

fn numeric(e: Error) -> AppError {
    match e {
        Error::Io(io) => AppError::Io(io),
        e => AppError::Numeric(e),
    }
}

fn json_err(e: serde_json::Error) -> AppError {
    AppError::Io(std::io::Error::other(e))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &str, pass: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        pass,
        detail,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GammaInfo {
    pub m: f64,
    pub gamma: f64,
    pub converged: bool,
    /// Set when `gamma` came from the config rather than the search.
    pub overridden: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TauStats {
    pub n: usize,
    pub extinct: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// Time between recorded steps, the resolution of `τ̂`.
    pub resolution: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    pub command: Command,
    pub config_hash: String,
    pub seed_base: u64,
    pub path_indices: Vec<u64>,
    pub c_infinity_sq: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<GammaInfo>,
    pub cstar_policy: CstarPolicy,
    pub cstar_used: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cstar_estimate: Option<CstarEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cstar_error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extinction: Option<ExtinctionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<TauStats>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub cdf: Vec<ProbEstimate>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub bound_checks: Vec<BoundCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moment: Option<MomentReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_rescaling_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceOutput>,
    pub checks: Vec<Check>,
}

impl Summary {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failed(&self) -> Vec<String> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect()
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ConvergenceOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ladder: Option<ConvergenceTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rescaling: Option<RescalingTable>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: Command,
    pub code_version: String,
    pub config_hash: String,
    pub seed_base: u64,
    pub path_indices: Vec<u64>,
    pub threads: Option<usize>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DistanceRecord {
    pub step: u64,
    pub t: f64,
    pub distance: f64,
}

#[derive(Serialize, Deserialize)]
struct FieldSidecar {
    shape: Vec<usize>,
    dtype: String,
    boundary: Boundary,
    #[serde(rename = "L")]
    length: f64,
    step: u64,
    t: f64,
}

/// Output directory with the standard artifact names.
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let _ = fs::remove_file(dir.join("FAILED"));
        Ok(Artifacts { dir: dir.to_path_buf() })
    }

    pub fn open(dir: &Path) -> Self {
        Artifacts { dir: dir.to_path_buf() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), AppError> {
        let mut text = serde_json::to_string_pretty(value).map_err(json_err)?;
        text.push('\n');
        fs::write(self.path(name), text)?;
        Ok(())
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T, AppError> {
        let text = fs::read_to_string(self.path(name))?;
        serde_json::from_str(&text).map_err(json_err)
    }

    fn jsonl_writer(&self, name: &str) -> std::io::Result<LineWriter<File>> {
        if let Some(parent) = self.path(name).parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(LineWriter::new(File::create(self.path(name))?))
    }

    fn write_field(&self, name: &str, values: &[f64], domain: &DomainRef, step: u64, t: f64) -> Result<(), AppError> {
        fs::create_dir_all(self.path("fields"))?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(self.path(&format!("fields/{name}.f64")), bytes)?;
        let spec = domain.spec();
        self.write_json(
            &format!("fields/{name}.json"),
            &FieldSidecar {
                shape: vec![spec.n; spec.d],
                dtype: "f64-le".into(),
                boundary: spec.boundary,
                length: spec.length,
                step,
                t,
            },
        )
    }

    fn write_failure(&self, failure: &PathFailure) -> Result<(), AppError> {
        self.write_json("FAILED", failure)
    }

    fn read_failure(&self) -> Result<Option<PathFailure>, AppError> {
        if self.path("FAILED").exists() {
            Ok(Some(self.read_json("FAILED")?))
        } else {
            Ok(None)
        }
    }
}

fn write_record<T: Serialize>(w: &mut impl Write, rec: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, AppError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(json_err)?);
        }
    }
    Ok(out)
}

/// Inputs shared by every subcommand.
struct Context {
    cfg: RunConfig,
    domain: DomainRef,
    x0: Field,
}

impl Context {
    fn new(cfg: RunConfig) -> Result<Self, AppError> {
        let domain = cfg.build_domain().map_err(config_err)?;
        let x0 = cfg.initial_field(&domain).map_err(config_err)?;
        Ok(Context { cfg, domain, x0 })
    }

    fn noise(&self, command: Command) -> NoiseSpec {
        if command == Command::Det {
            NoiseSpec {
                modes: Vec::new(),
                seed_base: self.cfg.noise.seed_base,
            }
        } else {
            self.cfg.noise.clone()
        }
    }

    fn c_infinity_sq(&self, command: Command) -> Result<f64, AppError> {
        Ok(self
            .noise(command)
            .evaluate(&self.domain)
            .map_err(config_err)?
            .constants()
            .c_infinity_sq)
    }

    fn solver(&self, command: Command) -> Result<PathSolver, AppError> {
        PathSolver::new(
            self.domain.clone(),
            self.cfg.graph.clone(),
            self.cfg.solver.clone(),
            &self.noise(command),
        )
        .map_err(config_err)
    }

    fn gamma(&self) -> Result<Option<GammaInfo>, AppError> {
        if !self.cfg.extinction_analysis() {
            return Ok(None);
        }
        let m = self.cfg.graph.coercivity().expect("checked by extinction_analysis").m;
        if let Some(g) = self.cfg.analysis.gamma {
            return Ok(Some(GammaInfo {
                m,
                gamma: g,
                converged: true,
                overridden: true,
            }));
        }
        let e = embedding_constant(&self.domain, m, self.cfg.analysis.embedding_seed).map_err(numeric)?;
        Ok(Some(GammaInfo {
            m,
            gamma: e.gamma,
            converged: e.converged,
            overridden: false,
        }))
    }

    fn nonnegative_start(&self) -> bool {
        self.x0.min() >= 0.0
    }

    fn positivity_floor(&self) -> f64 {
        -self.cfg.solver.positivity_tol * self.x0.sup_norm().max(1.0)
    }

    fn record_every(&self) -> f64 {
        self.cfg.solver.dt * self.cfg.solver.save_every as f64
    }

    fn base_summary(&self, command: Command, c_inf: f64, gamma: Option<GammaInfo>, paths: Vec<u64>) -> Summary {
        let cstar_used = match self.cfg.analysis.cstar {
            CstarPolicy::Fixed { value } => value,
            _ => c_inf,
        };
        Summary {
            command,
            config_hash: self.cfg.hash(),
            seed_base: self.cfg.noise.seed_base,
            path_indices: paths,
            c_infinity_sq: c_inf,
            gamma,
            cstar_policy: self.cfg.analysis.cstar,
            cstar_used,
            cstar_estimate: None,
            cstar_error: None,
            extinction: None,
            tau: None,
            cdf: Vec::new(),
            bound_checks: Vec::new(),
            moment: None,
            max_rescaling_distance: None,
            convergence: None,
            checks: Vec::new(),
        }
    }
}

fn resolve_config(config: &Path, opts: &RunOptions) -> Result<RunConfig, AppError> {
    let mut cfg = load_config(config).map_err(config_err)?;
    if let Some(seed) = opts.seed {
        cfg.noise.seed_base = seed;
    }
    if let Some(n) = opts.paths {
        cfg.ensemble.n_paths = n;
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

/// Runs `command` and returns its summary (for `gamma`, a summary holding only
/// the constant).
pub fn run(command: Command, config: Option<&Path>, opts: &RunOptions) -> Result<Summary, AppError> {
    if command == Command::Report {
        return report(config, opts);
    }
    let config = config.ok_or_else(|| {
        AppError::Config(Error::InvalidParameter("--config is required".into()))
    })?;
    let cfg = resolve_config(config, opts)?;
    let art = Artifacts::create(&cfg.output_dir)?;
    art.write_json("resolved_config.json", &cfg)?;
    let ctx = Context::new(cfg)?;
    let start = Instant::now();
    let (summary, paths) = match command {
        Command::Path | Command::Det => run_single(&ctx, command, &art, opts.path_index)?,
        Command::Rescaled => run_rescaled_cmd(&ctx, &art, opts.path_index)?,
        Command::Ensemble => run_ensemble_cmd(&ctx, &art, opts.threads)?,
        Command::Converge => run_converge(&ctx, &art, opts.threads)?,
        Command::Gamma => (run_gamma(&ctx, &art, opts.m)?, Vec::new()),
        Command::Report => unreachable!(),
    };
    art.write_json(
        "run_info.json",
        &RunInfo {
            command,
            code_version: CODE_VERSION.into(),
            config_hash: ctx.cfg.hash(),
            seed_base: ctx.cfg.noise.seed_base,
            path_indices: paths,
            threads: opts.threads,
            wall_clock_s: start.elapsed().as_secs_f64(),
        },
    )?;
    art.write_json("summary.json", &summary)?;
    if let Some(f) = art.read_failure()? {
        return Err(AppError::Numeric(Error::InvalidParameter(format!(
            "path aborted at step {} (t = {}): {}",
            f.step, f.t, f.message
        ))));
    }
    Ok(summary)
}

fn run_single(
    ctx: &Context,
    command: Command,
    art: &Artifacts,
    path_index: u64,
) -> Result<(Summary, Vec<u64>), AppError> {
    let solver = ctx.solver(command)?;
    let mut writer = art.jsonl_writer("trajectory.jsonl")?;
    let mut io_error = None;
    let traj = solver.run_path_streaming(&ctx.x0, path_index, &mut |rec| {
        if io_error.is_none() {
            io_error = write_record(&mut writer, rec).err();
        }
    });
    writer.flush()?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    write_fields(ctx, art, &traj)?;
    if let Some(f) = &traj.failure {
        art.write_failure(f)?;
    }
    let summary = single_summary(ctx, command, path_index, &traj.records, traj.failure.as_ref())?;
    Ok((summary, vec![path_index]))
}

fn write_fields(ctx: &Context, art: &Artifacts, traj: &Trajectory) -> Result<(), AppError> {
    let last = traj.records.last();
    art.write_field(
        "terminal",
        traj.terminal.values(),
        &ctx.domain,
        last.map_or(0, |r| r.step),
        last.map_or(0.0, |r| r.t),
    )?;
    for s in &traj.snapshots {
        art.write_field(&format!("step_{:08}", s.step), &s.values, &ctx.domain, s.step, s.t)?;
    }
    Ok(())
}

fn single_summary(
    ctx: &Context,
    command: Command,
    path_index: u64,
    records: &[StepRecord],
    failure: Option<&PathFailure>,
) -> Result<Summary, AppError> {
    let c_inf = ctx.c_infinity_sq(command)?;
    let gamma = ctx.gamma()?;
    let mut s = ctx.base_summary(command, c_inf, gamma.clone(), vec![path_index]);
    let times: Vec<f64> = records.iter().map(|r| r.t).collect();
    let hm1: Vec<f64> = records.iter().map(|r| r.hm1).collect();
    let theta = ctx.cfg.analysis.theta_ext;
    let report = extinction_report_from(ctx, &times, &hm1, gamma.as_ref().map(|g| g.gamma), s.cstar_used);
    s.checks.push(check(
        "completed",
        failure.is_none(),
        failure.map_or_else(|| "all steps taken".into(), |f| f.message.clone()),
    ));
    if ctx.nonnegative_start() {
        let min = records.iter().map(|r| r.min).fold(f64::INFINITY, f64::min);
        let floor = ctx.positivity_floor();
        s.checks.push(check(
            "positivity",
            min >= floor,
            format!("min recorded value {min:.3e}, floor {floor:.3e}"),
        ));
    }
    if command == Command::Det {
        let tau = extinction_time_series(&times, &hm1, theta);
        if let Some(tau_max) = report.tau_max {
            let pass = tau.is_some_and(|t| t <= EXTINCTION_SLACK * tau_max);
            s.checks.push(check(
                "extinction_time_bound",
                pass,
                format!("tau_hat {tau:?}, bound {tau_max:.6e} (slack {EXTINCTION_SLACK})"),
            ));
            let mono = hm1.windows(2).all(|w| w[1] <= w[0]);
            s.checks.push(check("hm1_nonincreasing", mono, "recorded H^-1 norm".into()));
            if let Some(tau) = tau {
                let m0 = records.first().map_or(0.0, |r| r.mass);
                let m_tau = records.iter().find(|r| r.t >= tau).map_or(f64::NAN, |r| r.mass);
                s.checks.push(check(
                    "mass_extinguished",
                    m_tau.abs() <= MASS_EXTINCT * m0.abs(),
                    format!("mass {m_tau:.3e} at tau_hat from {m0:.3e}"),
                ));
            }
        }
        if ctx.domain.spec().boundary == Boundary::Periodic && ctx.cfg.solver.nu == 0.0 {
            let m0 = records.first().map_or(0.0, |r| r.mass);
            let drift = records.iter().map(|r| (r.mass - m0).abs()).fold(0.0, f64::max);
            let l1 = spectral::lp_norm(&ctx.x0, 1.0);
            s.checks.push(check(
                "mass_conserved",
                drift <= MASS_TOL * l1,
                format!("max mass drift {drift:.3e}, L1 norm of x0 {l1:.3e}"),
            ));
        }
    }
    s.tau = Some(tau_stats(&[extinction_time_series(&times, &hm1, theta)], ctx.record_every()));
    s.extinction = Some(report);
    Ok(s)
}

fn extinction_report_from(
    ctx: &Context,
    times: &[f64],
    hm1: &[f64],
    gamma: Option<f64>,
    cstar: f64,
) -> ExtinctionReport {
    let records: Vec<StepRecord> = times
        .iter()
        .zip(hm1)
        .enumerate()
        .map(|(i, (&t, &h))| StepRecord {
            step: i as u64,
            t,
            hm1: h,
            hm1_nu: h,
            l2: 0.0,
            lm1: 0.0,
            mass: 0.0,
            min: 0.0,
            max: 0.0,
            inner_iters: 0,
        })
        .collect();
    let traj = Trajectory {
        path_index: 0,
        seed_base: 0,
        dt: ctx.cfg.solver.dt,
        records,
        snapshots: Vec::new(),
        terminal: Field::zeros(ctx.domain.clone()),
        sup_l2_sq: 0.0,
        min_value: 0.0,
        steps_taken: 0,
        failure: None,
    };
    let gamma = if ctx.cfg.extinction_analysis() { gamma } else { None };
    extinction_report(
        &traj,
        &ctx.cfg.graph,
        ctx.cfg.analysis.theta_ext,
        gamma,
        cstar,
        &ctx.cfg.report_grid(),
    )
}

fn tau_stats(taus: &[Option<f64>], resolution: f64) -> TauStats {
    let ext: Vec<f64> = taus.iter().flatten().copied().collect();
    let n = ext.len();
    let mean = (n > 0).then(|| ext.iter().sum::<f64>() / n as f64);
    let std = mean.filter(|_| n > 1).map(|m| {
        (ext.iter().map(|t| (t - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    });
    TauStats {
        n: taus.len(),
        extinct: n,
        mean,
        std,
        min: ext.iter().copied().reduce(f64::min),
        max: ext.iter().copied().reduce(f64::max),
        resolution,
    }
}

fn run_rescaled_cmd(ctx: &Context, art: &Artifacts, path_index: u64) -> Result<(Summary, Vec<u64>), AppError> {
    let direct = ctx.solver(Command::Rescaled)?;
    let rescaled = ctx.solver(Command::Rescaled)?;
    rescaled.rescaling_rate().map_err(config_err)?;
    let mut a = direct.start(&ctx.x0, path_index).map_err(numeric)?;
    let mut b = rescaled.start(&ctx.x0, path_index).map_err(numeric)?;
    let mut writer = art.jsonl_writer("distance.jsonl")?;
    let distance = |a: &Field, b: &Field| spectral::hminus1_norm_mean_free(&a.sub(b).expect("same domain"));
    write_record(&mut writer, &DistanceRecord { step: 0, t: 0.0, distance: distance(&a.x, &b.x) })?;
    let n = ctx.cfg.solver.n_steps();
    let every = ctx.cfg.solver.save_every as u64;
    for k in 1..=n {
        let res = direct.step(&mut a).and_then(|_| rescaled.step_rescaled(&mut b));
        if let Err(e) = res {
            let f = PathFailure {
                step: k,
                t: k as f64 * ctx.cfg.solver.dt,
                message: e.to_string(),
            };
            art.write_failure(&f)?;
            break;
        }
        if k % every == 0 || k == n {
            write_record(&mut writer, &DistanceRecord { step: a.step, t: a.t, distance: distance(&a.x, &b.x) })?;
        }
    }
    writer.flush()?;
    art.write_field("terminal_direct", a.x.values(), &ctx.domain, a.step, a.t)?;
    art.write_field("terminal_rescaled", b.x.values(), &ctx.domain, b.step, b.t)?;
    let summary = rescaled_summary(ctx, &read_jsonl(&art.path("distance.jsonl"))?, art.read_failure()?.as_ref())?;
    Ok((summary, vec![path_index]))
}

fn rescaled_summary(ctx: &Context, dist: &[DistanceRecord], failure: Option<&PathFailure>) -> Result<Summary, AppError> {
    let c_inf = ctx.c_infinity_sq(Command::Rescaled)?;
    let mut s = ctx.base_summary(Command::Rescaled, c_inf, None, Vec::new());
    let max = dist.iter().map(|d| d.distance).fold(0.0, f64::max);
    s.max_rescaling_distance = Some(max);
    s.checks.push(check(
        "completed",
        failure.is_none(),
        failure.map_or_else(|| "all steps taken".into(), |f| f.message.clone()),
    ));
    if ctx.cfg.noise.is_silent() {
        s.checks.push(check("zero_noise_identical", max == 0.0, format!("max distance {max:.3e}")));
    }
    Ok(s)
}

fn run_ensemble_cmd(ctx: &Context, art: &Artifacts, threads: Option<usize>) -> Result<(Summary, Vec<u64>), AppError> {
    let solver = ctx.solver(Command::Ensemble)?;
    let ens = run_ensemble(&solver, &ctx.x0, ctx.cfg.ensemble.n_paths, threads).map_err(numeric)?;
    fs::create_dir_all(art.path("paths"))?;
    for t in &ens.trajectories {
        let mut w = art.jsonl_writer(&format!("paths/{:06}.jsonl", t.path_index))?;
        for r in &t.records {
            write_record(&mut w, r)?;
        }
        w.flush()?;
    }
    let summaries = ens.summaries(ctx.cfg.analysis.theta_ext);
    art.write_json("paths.json", &summaries)?;
    let records = read_path_records(art, &summaries)?;
    let s = ensemble_summary(ctx, &summaries, &records)?;
    let indices = summaries.iter().map(|p| p.path_index).collect();
    Ok((s, indices))
}

fn read_path_records(art: &Artifacts, summaries: &[PathSummary]) -> Result<Vec<Vec<StepRecord>>, AppError> {
    summaries
        .iter()
        .map(|p| read_jsonl(&art.path(&format!("paths/{:06}.jsonl", p.path_index))))
        .collect()
}

fn ensemble_summary(ctx: &Context, paths: &[PathSummary], records: &[Vec<StepRecord>]) -> Result<Summary, AppError> {
    let c_inf = ctx.c_infinity_sq(Command::Ensemble)?;
    let gamma = ctx.gamma()?;
    let indices = paths.iter().map(|p| p.path_index).collect();
    let mut s = ctx.base_summary(Command::Ensemble, c_inf, gamma.clone(), indices);
    let theta = ctx.cfg.analysis.theta_ext;
    let done: Vec<&Vec<StepRecord>> = paths
        .iter()
        .zip(records)
        .filter(|(p, _)| p.failure.is_none())
        .map(|(_, r)| r)
        .collect();
    let failed = paths.len() - done.len();
    s.checks.push(check(
        "failure_budget",
        failed as f64 <= spme_core::ensemble::FAILURE_BUDGET * paths.len() as f64,
        format!("{failed} of {} paths aborted", paths.len()),
    ));
    let times: Vec<f64> = done
        .iter()
        .max_by_key(|r| r.len())
        .map(|r| r.iter().map(|x| x.t).collect())
        .unwrap_or_default();
    let hm1: Vec<Vec<f64>> = done
        .iter()
        .map(|r| {
            let mut h: Vec<f64> = r.iter().map(|x| x.hm1).collect();
            h.resize(times.len(), 0.0);
            h
        })
        .collect();
    let taus: Vec<Option<f64>> = hm1.iter().map(|h| extinction_time_series(&times, h, theta)).collect();
    s.tau = Some(tau_stats(&taus, ctx.record_every()));
    s.cdf = ctx.cfg.report_grid().iter().map(|&t| prob_from_taus(&taus, t)).collect();
    if let Some(c) = ctx.cfg.graph.coercivity().filter(|c| c.m > 0.0 && c.m < 1.0) {
        match estimate_cstar_from(&times, &hm1, c.m, c_inf, theta) {
            Ok(e) => {
                if ctx.cfg.analysis.cstar == CstarPolicy::Estimated {
                    s.cstar_used = e.cstar;
                }
                s.cstar_estimate = Some(e);
            }
            Err(e) => s.cstar_error = Some(e.to_string()),
        }
        if ctx.cfg.analysis.cstar == CstarPolicy::Estimated {
            s.checks.push(check(
                "cstar_finite",
                s.cstar_estimate.is_some(),
                s.cstar_error.clone().unwrap_or_else(|| format!("{:.6e}", s.cstar_used)),
            ));
        }
    }
    if let (Some(g), Some(c)) = (&gamma, ctx.cfg.graph.coercivity()) {
        let x0 = spectral::hminus1_norm_mean_free(&ctx.x0);
        s.bound_checks = bound_checks(&s.cdf, x0, c.rho, g.gamma, c.m, s.cstar_used).map_err(numeric)?;
        let bad = s.bound_checks.iter().filter(|b| !b.pass).count();
        s.checks.push(check(
            "extinction_probability_bound",
            bad == 0,
            format!("{bad} of {} report times below the bound (C* = {:.6e})", s.bound_checks.len(), s.cstar_used),
        ));
    }
    if ctx.nonnegative_start() {
        let min = paths.iter().map(|p| p.min_value).fold(f64::INFINITY, f64::min);
        let floor = ctx.positivity_floor();
        s.checks.push(check(
            "positivity",
            min >= floor,
            format!("min value over all paths {min:.3e}, floor {floor:.3e}"),
        ));
    }
    if ctx.cfg.graph.is_lipschitz() {
        let sup: Vec<f64> = paths.iter().filter(|p| p.failure.is_none()).map(|p| p.sup_l2_sq).collect();
        let x0_sq = spectral::l2_norm(&ctx.x0).powi(2);
        let m = moment_bound_check(&sup, x0_sq, c_inf, ctx.cfg.solver.horizon);
        s.checks.push(check(
            "moment_bound",
            m.pass,
            format!("upper confidence limit {:.6e}, bound {:.6e}", m.upper_cl, m.bound),
        ));
        s.moment = Some(m);
    }
    Ok(s)
}

fn study_setup(ctx: &Context) -> StudySetup {
    StudySetup {
        domain: ctx.domain.clone(),
        graph: ctx.cfg.graph.clone(),
        base: ctx.cfg.solver.clone(),
        noise: ctx.cfg.noise.clone(),
        x0: ctx.x0.clone(),
    }
}

fn run_converge(ctx: &Context, art: &Artifacts, threads: Option<usize>) -> Result<(Summary, Vec<u64>), AppError> {
    let e = &ctx.cfg.ensemble;
    if e.ladder.is_none() && e.rescaling_dts.is_empty() {
        return Err(AppError::Config(Error::ConsistencyError {
            first: "ensemble.ladder".into(),
            second: "ensemble.rescaling_dts".into(),
            message: "converge needs a ladder or rescaling time steps".into(),
        }));
    }
    let setup = study_setup(ctx);
    let ladder = e
        .ladder
        .as_ref()
        .map(|l| coupled_convergence_study(&setup, l, e.n_paths, threads, e.independent_noise))
        .transpose()
        .map_err(numeric)?;
    let rescaling = if e.rescaling_dts.is_empty() {
        None
    } else {
        Some(rescaling_study(&setup, &e.rescaling_dts, e.n_paths, threads).map_err(numeric)?)
    };
    art.write_json("convergence.json", &ConvergenceOutput { ladder, rescaling })?;
    let out: ConvergenceOutput = art.read_json("convergence.json")?;
    Ok((converge_summary(ctx, out)?, (0..e.n_paths as u64).collect()))
}

fn converge_summary(ctx: &Context, out: ConvergenceOutput) -> Result<Summary, AppError> {
    let c_inf = ctx.c_infinity_sq(Command::Converge)?;
    let mut s = ctx.base_summary(Command::Converge, c_inf, None, (0..ctx.cfg.ensemble.n_paths as u64).collect());
    if let Some(t) = &out.ladder {
        if t.ladder.name() != "dt" {
            s.checks.push(check(
                "ladder_exponent",
                (0.8..=1.3).contains(&t.exponent),
                format!("fitted exponent {:.4} of the squared coupled error", t.exponent),
            ));
        }
    }
    if let Some(r) = &out.rescaling {
        s.checks.push(check(
            "rescaling_order",
            r.order >= 0.4 || r.levels.iter().all(|l| l.mean_sup_distance == 0.0),
            format!("fitted order {:.4}", r.order),
        ));
    }
    s.convergence = Some(out);
    Ok(s)
}

fn run_gamma(ctx: &Context, art: &Artifacts, m: Option<f64>) -> Result<Summary, AppError> {
    let m = match m.or_else(|| ctx.cfg.graph.coercivity().map(|c| c.m)) {
        Some(m) => m,
        None => {
            return Err(AppError::Config(Error::ConsistencyError {
                first: "graph".into(),
                second: "--m".into(),
                message: "graph has no coercivity exponent; pass --m".into(),
            }))
        }
    };
    let e = embedding_constant(&ctx.domain, m, ctx.cfg.analysis.embedding_seed).map_err(numeric)?;
    art.write_json("gamma.json", &e)?;
    println!("gamma = {:.9} (m = {m}, converged = {})", e.gamma, e.converged);
    let mut s = ctx.base_summary(Command::Gamma, 0.0, None, Vec::new());
    s.gamma = Some(GammaInfo {
        m,
        gamma: e.gamma,
        converged: e.converged,
        overridden: false,
    });
    Ok(s)
}

/// Recomputes the summary of a stored run and writes it to `report.json`.
fn report(config: Option<&Path>, opts: &RunOptions) -> Result<Summary, AppError> {
    let dir = match (&opts.out, config) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => load_config(c).map_err(config_err)?.output_dir,
        (None, None) => {
            return Err(AppError::Config(Error::InvalidParameter(
                "report needs --out or --config".into(),
            )))
        }
    };
    let art = Artifacts::open(&dir);
    let cfg = load_config(&art.path("resolved_config.json")).map_err(config_err)?;
    let info: RunInfo = art.read_json("run_info.json")?;
    let ctx = Context::new(cfg)?;
    let summary = match info.command {
        Command::Path | Command::Det => {
            let records: Vec<StepRecord> = read_jsonl(&art.path("trajectory.jsonl"))?;
            single_summary(&ctx, info.command, info.path_indices[0], &records, art.read_failure()?.as_ref())?
        }
        Command::Rescaled => rescaled_summary(
            &ctx,
            &read_jsonl(&art.path("distance.jsonl"))?,
            art.read_failure()?.as_ref(),
        )?,
        Command::Ensemble => {
            let paths: Vec<PathSummary> = art.read_json("paths.json")?;
            let records = read_path_records(&art, &paths)?;
            ensemble_summary(&ctx, &paths, &records)?
        }
        Command::Converge => converge_summary(&ctx, art.read_json("convergence.json")?)?,
        Command::Gamma | Command::Report => art.read_json("summary.json")?,
    };
    art.write_json("report.json", &summary)?;
    if opts.check && !summary.all_pass() {
        return Err(AppError::CheckFailed(summary.failed()));
    }
    Ok(summary)
}
