//! Monte Carlo ensembles over Brownian paths.
//!
//! Paths are keyed by their index, so results do not depend on the number of
//! worker threads: work is distributed with rayon and collected in path order.
//! Parameter ladders are advanced in lockstep on shared keys (common random
//! numbers).

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::MonotoneGraph;
use crate::noise::NoiseSpec;
use crate::observables::{extinction_prob_bound, extinction_time, supermartingale_series};
use crate::solver::{PathSolver, SolverConfig, Trajectory};
use crate::spectral::{self, DomainRef, Field};

/// Largest tolerated fraction of aborted paths.
pub const FAILURE_BUDGET: f64 = 0.01;
/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Offset separating path keys of different ladder levels in independent-noise mode.
const INDEPENDENT_KEY_OFFSET: u64 = 1 << 40;

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn check_failures(failed: usize, total: usize) -> Result<()> {
    if failed as f64 > FAILURE_BUDGET * total as f64 {
        Err(Error::EnsembleFailed { failed, total })
    } else {
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PathSummary {
    pub path_index: u64,
    pub seed_base: u64,
    pub tau_hat: Option<f64>,
    pub sup_l2_sq: f64,
    pub min_value: f64,
    pub steps_taken: u64,
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct EnsembleResult {
    pub n_paths: usize,
    pub seed_base: u64,
    /// In path-index order.
    pub trajectories: Vec<Trajectory>,
    pub failures: usize,
    pub wall_clock_s: f64,
    pub threads: Option<usize>,
}

/// `p̂` with its Wilson 95% interval.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ProbEstimate {
    pub t: f64,
    pub successes: usize,
    pub n: usize,
    pub p: f64,
    /// `sqrt(p̂(1 - p̂)/n)`.
    pub std_error: f64,
    pub lo: f64,
    pub hi: f64,
}

pub fn wilson(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes == n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

impl EnsembleResult {
    pub fn completed(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(|t| t.is_complete())
    }

    pub fn summaries(&self, theta: f64) -> Vec<PathSummary> {
        self.trajectories
            .iter()
            .map(|t| PathSummary {
                path_index: t.path_index,
                seed_base: t.seed_base,
                tau_hat: extinction_time(t, theta),
                sup_l2_sq: t.sup_l2_sq,
                min_value: t.min_value,
                steps_taken: t.steps_taken,
                failure: t.failure.as_ref().map(|f| f.message.clone()),
            })
            .collect()
    }

    /// Recorded times of the longest completed path.
    pub fn record_times(&self) -> Vec<f64> {
        self.completed()
            .max_by_key(|t| t.records.len())
            .map(|t| t.times())
            .unwrap_or_default()
    }

    /// `‖X‖₋₁` per completed path on [`record_times`](Self::record_times); paths
    /// stopped at extinction are continued by zero.
    pub fn hm1_matrix(&self) -> Vec<Vec<f64>> {
        let len = self.record_times().len();
        self.completed()
            .map(|t| {
                let mut h = t.hm1_series();
                h.resize(len, 0.0);
                h
            })
            .collect()
    }

    pub fn sup_l2_sq(&self) -> Vec<f64> {
        self.completed().map(|t| t.sup_l2_sq).collect()
    }

    pub fn extinction_times(&self, theta: f64) -> Vec<Option<f64>> {
        self.completed().map(|t| extinction_time(t, theta)).collect()
    }
}

/// Runs `n_paths` paths of `solver` from `x0`.
pub fn run_ensemble(
    solver: &PathSolver,
    x0: &Field,
    n_paths: usize,
    threads: Option<usize>,
) -> Result<EnsembleResult> {
    run_ensemble_with(n_paths, threads, solver.seed_base(), |i| solver.run_path(x0, i))
}

/// Ensemble of rescaled-scheme paths.
pub fn run_rescaled_ensemble(
    solver: &PathSolver,
    x0: &Field,
    n_paths: usize,
    threads: Option<usize>,
) -> Result<EnsembleResult> {
    solver.rescaling_rate()?;
    run_ensemble_with(n_paths, threads, solver.seed_base(), |i| {
        solver.run_rescaled(x0, i).expect("checked above")
    })
}

pub fn run_ensemble_with(
    n_paths: usize,
    threads: Option<usize>,
    seed_base: u64,
    path: impl Fn(u64) -> Trajectory + Sync + Send,
) -> Result<EnsembleResult> {
    if n_paths == 0 {
        return Err(Error::InvalidParameter("n_paths must be >= 1".into()));
    }
    let start = Instant::now();
    let trajectories: Vec<Trajectory> = in_pool(threads, || {
        (0..n_paths as u64).into_par_iter().map(&path).collect()
    })?;
    let failures = trajectories.iter().filter(|t| !t.is_complete()).count();
    check_failures(failures, n_paths)?;
    Ok(EnsembleResult {
        n_paths,
        seed_base,
        trajectories,
        failures,
        wall_clock_s: start.elapsed().as_secs_f64(),
        threads,
    })
}

/// Fraction of completed paths with `τ̂ ≤ t`, with its Wilson interval.
pub fn estimate_extinction_prob(ens: &EnsembleResult, t: f64, theta: f64) -> ProbEstimate {
    let taus = ens.extinction_times(theta);
    prob_from_taus(&taus, t)
}

pub fn prob_from_taus(taus: &[Option<f64>], t: f64) -> ProbEstimate {
    let n = taus.len();
    let k = taus.iter().filter(|tau| tau.is_some_and(|v| v <= t)).count();
    let p = if n > 0 { k as f64 / n as f64 } else { 0.0 };
    let (lo, hi) = wilson(k, n, Z95);
    ProbEstimate {
        t,
        successes: k,
        n,
        p,
        std_error: if n > 0 { (p * (1.0 - p) / n as f64).sqrt() } else { 0.0 },
        lo,
        hi,
    }
}

pub fn extinction_cdf(ens: &EnsembleResult, grid: &[f64], theta: f64) -> Vec<ProbEstimate> {
    let taus = ens.extinction_times(theta);
    grid.iter().map(|&t| prob_from_taus(&taus, t)).collect()
}

/// One report-grid comparison of `p̂(t)` with the extinction probability bound.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct BoundCheck {
    pub t: f64,
    pub p_hat: f64,
    pub std_error: f64,
    pub bound: f64,
    /// `p̂ + 2 SE ≥ bound`, vacuous where the bound is not positive.
    pub pass: bool,
}

pub fn bound_checks(
    cdf: &[ProbEstimate],
    x0_norm: f64,
    rho: f64,
    gamma: f64,
    m: f64,
    cstar: f64,
) -> Result<Vec<BoundCheck>> {
    cdf.iter()
        .filter(|e| e.t > 0.0)
        .map(|e| {
            let bound = extinction_prob_bound(x0_norm, e.t, rho, gamma, m, cstar)?;
            Ok(BoundCheck {
                t: e.t,
                p_hat: e.p,
                std_error: e.std_error,
                bound,
                pass: bound <= 0.0 || e.p + 2.0 * e.std_error >= bound,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct CstarEstimate {
    pub cstar: f64,
    pub cap: f64,
    pub evaluations: usize,
}

/// Whether `t ↦ mean_i M_C(t)` is nonincreasing within two standard errors of
/// the paired step differences at every recorded step.
pub fn supermartingale_test(times: &[f64], hm1: &[Vec<f64>], cstar: f64, m: f64) -> bool {
    let n = hm1.len();
    if n == 0 || times.len() < 2 {
        return true;
    }
    let series: Vec<Vec<f64>> = hm1
        .iter()
        .map(|h| supermartingale_series(times, h, cstar, m))
        .collect();
    (0..times.len() - 1).all(|j| {
        let diffs = series.iter().map(|s| s[j + 1] - s[j]);
        let mean = diffs.clone().sum::<f64>() / n as f64;
        let var = if n > 1 {
            diffs.map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        mean <= 2.0 * (var / n as f64).sqrt()
    })
}

/// Zeroes `hm1` from the first record at or below `theta · hm1[0]` on, so
/// roundoff-level states after extinction do not count as growth.
pub fn absorb_extinct(hm1: &mut [f64], theta: f64) {
    let level = theta * hm1.first().copied().unwrap_or(0.0);
    if let Some(k) = hm1.iter().position(|&h| h <= level) {
        hm1[k..].iter_mut().for_each(|h| *h = 0.0);
    }
}

/// Smallest `C* ≥ 0` passing [`supermartingale_test`], by bisection on
/// `[0, 10³ C_∞²]`. Paths count as extinct once below `theta` relative to
/// their start.
pub fn estimate_cstar(ens: &EnsembleResult, m: f64, c_inf_sq: f64, theta: f64) -> Result<CstarEstimate> {
    estimate_cstar_from(&ens.record_times(), &ens.hm1_matrix(), m, c_inf_sq, theta)
}

pub fn estimate_cstar_from(
    times: &[f64],
    hm1: &[Vec<f64>],
    m: f64,
    c_inf_sq: f64,
    theta: f64,
) -> Result<CstarEstimate> {
    if !(m > 0.0 && m < 1.0) {
        return Err(Error::DomainError(format!("C* estimation needs 0 < m < 1, got {m}")));
    }
    let mut hm1 = hm1.to_vec();
    for h in &mut hm1 {
        absorb_extinct(h, theta);
    }
    let hm1 = &hm1[..];
    let cap = 1e3 * c_inf_sq;
    let mut evaluations = 1;
    if supermartingale_test(times, hm1, 0.0, m) {
        return Ok(CstarEstimate {
            cstar: 0.0,
            cap,
            evaluations,
        });
    }
    let mut hi = (1e-6 * cap).max(f64::MIN_POSITIVE);
    loop {
        evaluations += 1;
        if hi > cap {
            return Err(Error::ReachedCap { cap });
        }
        if supermartingale_test(times, hm1, hi, m) {
            break;
        }
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > 1e-6 * hi {
        evaluations += 1;
        let mid = 0.5 * (lo + hi);
        if supermartingale_test(times, hm1, mid, m) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(CstarEstimate {
        cstar: hi,
        cap,
        evaluations,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "parameter", content = "values", rename_all = "snake_case")]
pub enum Ladder {
    Lambda(Vec<f64>),
    Nu(Vec<f64>),
    Dt(Vec<f64>),
}

impl Ladder {
    pub fn values(&self) -> &[f64] {
        match self {
            Ladder::Lambda(v) | Ladder::Nu(v) | Ladder::Dt(v) => v,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ladder::Lambda(_) => "lambda",
            Ladder::Nu(_) => "nu",
            Ladder::Dt(_) => "dt",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LadderPair {
    pub a: f64,
    pub b: f64,
    /// `E sup_t ‖X_a - X_b‖₋₁²`.
    pub mean_sup_sq: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ConvergenceTable {
    pub ladder: Ladder,
    pub n_paths: usize,
    pub independent_noise: bool,
    pub pairs: Vec<LadderPair>,
    /// Least-squares slope of `ln E sup ‖X_a - X_b‖₋₁²` against `ln(a + b)`.
    pub exponent: f64,
    /// Same for each adjacent pair of pairs.
    pub local_exponents: Vec<f64>,
    pub failures: usize,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    (mean, (var / n as f64).sqrt())
}

/// Lockstep integration of several configurations on one path. Level `i`
/// advances every `strides[i]` base steps; `compare(k)` is called after each
/// base step `k` with the current states.
struct Lockstep<'a> {
    solvers: &'a [PathSolver],
    strides: Vec<u64>,
    rescaled: Vec<bool>,
}

impl Lockstep<'_> {
    fn run(
        &self,
        x0: &Field,
        keys: &[u64],
        base_steps: u64,
        mut compare: impl FnMut(u64, &[Field]),
    ) -> Result<()> {
        let mut states = self
            .solvers
            .iter()
            .zip(keys)
            .map(|(s, &k)| s.start(x0, k))
            .collect::<Result<Vec<_>>>()?;
        for k in 1..=base_steps {
            for (i, (s, st)) in self.solvers.iter().zip(states.iter_mut()).enumerate() {
                if k % self.strides[i] == 0 {
                    if self.rescaled[i] {
                        s.step_rescaled(st)?;
                    } else {
                        s.step(st)?;
                    }
                }
            }
            let fields: Vec<Field> = states.iter().map(|s| s.x.clone()).collect();
            compare(k, &fields);
        }
        Ok(())
    }
}

fn distance(a: &Field, b: &Field) -> f64 {
    spectral::hminus1_norm_mean_free(&a.sub(b).expect("same domain"))
}

/// Common inputs of the ladder studies.
#[derive(Clone, Debug)]
pub struct StudySetup {
    pub domain: DomainRef,
    pub graph: MonotoneGraph,
    pub base: SolverConfig,
    pub noise: NoiseSpec,
    pub x0: Field,
}

fn level_configs(setup: &StudySetup, ladder: &Ladder) -> Result<(Vec<SolverConfig>, Vec<u64>, u64)> {
    let vals = ladder.values();
    if vals.len() < 3 {
        return Err(Error::InvalidParameter("a ladder needs at least 3 levels".into()));
    }
    let base = &setup.base;
    match ladder {
        Ladder::Lambda(v) | Ladder::Nu(v) => {
            let cfgs = v
                .iter()
                .map(|&x| {
                    let mut c = base.clone();
                    if matches!(ladder, Ladder::Lambda(_)) {
                        c.lambda = x;
                    } else {
                        c.nu = x;
                    }
                    c
                })
                .collect();
            Ok((cfgs, vec![1; v.len()], base.n_steps()))
        }
        Ladder::Dt(v) => {
            let fine = v.iter().copied().fold(f64::INFINITY, f64::min);
            let mut strides = Vec::with_capacity(v.len());
            let mut cfgs = Vec::with_capacity(v.len());
            for &dt in v {
                let r = dt / fine;
                let s = r.round();
                if (r - s).abs() > 1e-9 * r {
                    return Err(Error::InvalidParameter(format!(
                        "time step {dt} is not an integer multiple of {fine}"
                    )));
                }
                let mut c = base.clone();
                c.dt = dt;
                c.brownian_stride = base.brownian_stride * s as u64;
                strides.push(s as u64);
                cfgs.push(c);
            }
            let mut fine_cfg = base.clone();
            fine_cfg.dt = fine;
            let steps = fine_cfg.n_steps();
            let coarsest = *strides.iter().max().unwrap();
            if steps % coarsest != 0 {
                return Err(Error::InvalidParameter(
                    "horizon is not a whole number of coarsest steps".into(),
                ));
            }
            Ok((cfgs, strides, steps))
        }
    }
}

/// Coupled errors between adjacent levels of a parameter ladder.
pub fn coupled_convergence_study(
    setup: &StudySetup,
    ladder: &Ladder,
    n_paths: usize,
    threads: Option<usize>,
    independent_noise: bool,
) -> Result<ConvergenceTable> {
    if n_paths == 0 {
        return Err(Error::InvalidParameter("n_paths must be >= 1".into()));
    }
    let (cfgs, strides, base_steps) = level_configs(setup, ladder)?;
    let solvers = cfgs
        .into_iter()
        .map(|c| PathSolver::new(setup.domain.clone(), setup.graph.clone(), c, &setup.noise))
        .collect::<Result<Vec<_>>>()?;
    let levels = solvers.len();
    let lock = Lockstep {
        solvers: &solvers,
        strides: strides.clone(),
        rescaled: vec![false; levels],
    };
    let per_path: Vec<Result<Vec<f64>>> = in_pool(threads, || {
        (0..n_paths as u64)
            .into_par_iter()
            .map(|p| {
                let keys: Vec<u64> = (0..levels as u64)
                    .map(|i| if independent_noise { p + i * INDEPENDENT_KEY_OFFSET } else { p })
                    .collect();
                let mut sup = vec![0.0f64; levels - 1];
                lock.run(&setup.x0, &keys, base_steps, |k, xs| {
                    for i in 0..levels - 1 {
                        let s = strides[i].max(strides[i + 1]);
                        if k % s == 0 {
                            sup[i] = sup[i].max(distance(&xs[i], &xs[i + 1]).powi(2));
                        }
                    }
                })?;
                Ok(sup)
            })
            .collect()
    })?;
    let failures = per_path.iter().filter(|r| r.is_err()).count();
    check_failures(failures, n_paths)?;
    let ok: Vec<Vec<f64>> = per_path.into_iter().filter_map(|r| r.ok()).collect();
    let vals = ladder.values();
    let pairs: Vec<LadderPair> = (0..levels - 1)
        .map(|i| {
            let col: Vec<f64> = ok.iter().map(|s| s[i]).collect();
            let (mean, se) = mean_se(&col);
            LadderPair {
                a: vals[i],
                b: vals[i + 1],
                mean_sup_sq: mean,
                std_error: se,
            }
        })
        .collect();
    let x: Vec<f64> = pairs.iter().map(|p| p.a + p.b).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.mean_sup_sq).collect();
    let local_exponents = (0..pairs.len().saturating_sub(1))
        .map(|i| loglog_slope(&x[i..i + 2], &y[i..i + 2]))
        .collect();
    Ok(ConvergenceTable {
        ladder: ladder.clone(),
        n_paths,
        independent_noise,
        exponent: loglog_slope(&x, &y),
        local_exponents,
        pairs,
        failures,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct RescalingLevel {
    pub dt: f64,
    /// `E sup_t ‖X_direct - X_rescaled‖₋₁`.
    pub mean_sup_distance: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RescalingTable {
    pub n_paths: usize,
    pub levels: Vec<RescalingLevel>,
    /// Least-squares slope of `ln E sup distance` against `ln Δt`.
    pub order: f64,
    pub failures: usize,
}

/// Pathwise distance between the direct and the rescaled scheme for each time
/// step of `dts`, on shared Brownian paths.
pub fn rescaling_study(
    setup: &StudySetup,
    dts: &[f64],
    n_paths: usize,
    threads: Option<usize>,
) -> Result<RescalingTable> {
    if n_paths == 0 || dts.is_empty() {
        return Err(Error::InvalidParameter("need paths and time steps".into()));
    }
    setup.noise.constant_variance_rate()?;
    let ladder = Ladder::Dt(dts.to_vec());
    let (cfgs, strides, base_steps) = if dts.len() >= 3 {
        level_configs(setup, &ladder)?
    } else {
        let mut padded = dts.to_vec();
        while padded.len() < 3 {
            padded.push(*padded.last().unwrap());
        }
        let (c, s, b) = level_configs(setup, &Ladder::Dt(padded))?;
        (c[..dts.len()].to_vec(), s[..dts.len()].to_vec(), b)
    };
    let mut solvers = Vec::with_capacity(2 * dts.len());
    let mut all_strides = Vec::with_capacity(2 * dts.len());
    let mut rescaled = Vec::with_capacity(2 * dts.len());
    for (c, &s) in cfgs.iter().zip(&strides) {
        for flag in [false, true] {
            solvers.push(PathSolver::new(setup.domain.clone(), setup.graph.clone(), c.clone(), &setup.noise)?);
            all_strides.push(s);
            rescaled.push(flag);
        }
    }
    let lock = Lockstep {
        solvers: &solvers,
        strides: all_strides,
        rescaled,
    };
    let per_path: Vec<Result<Vec<f64>>> = in_pool(threads, || {
        (0..n_paths as u64)
            .into_par_iter()
            .map(|p| {
                let keys = vec![p; solvers.len()];
                let mut sup = vec![0.0f64; dts.len()];
                lock.run(&setup.x0, &keys, base_steps, |k, xs| {
                    for (i, s) in strides.iter().enumerate() {
                        if k % s == 0 {
                            sup[i] = sup[i].max(distance(&xs[2 * i], &xs[2 * i + 1]));
                        }
                    }
                })?;
                Ok(sup)
            })
            .collect()
    })?;
    let failures = per_path.iter().filter(|r| r.is_err()).count();
    check_failures(failures, n_paths)?;
    let ok: Vec<Vec<f64>> = per_path.into_iter().filter_map(|r| r.ok()).collect();
    let levels: Vec<RescalingLevel> = dts
        .iter()
        .enumerate()
        .map(|(i, &dt)| {
            let col: Vec<f64> = ok.iter().map(|s| s[i]).collect();
            let (mean, se) = mean_se(&col);
            RescalingLevel {
                dt,
                mean_sup_distance: mean,
                std_error: se,
            }
        })
        .collect();
    let x: Vec<f64> = levels.iter().map(|l| l.dt).collect();
    let y: Vec<f64> = levels.iter().map(|l| l.mean_sup_distance).collect();
    Ok(RescalingTable {
        n_paths,
        order: loglog_slope(&x, &y),
        levels,
        failures,
    })
}
