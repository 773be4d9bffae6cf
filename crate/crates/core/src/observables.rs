//! Extinction detection, the extinction-time and extinction-probability bounds,
//! the discounted supermartingale statistic and moment-bound checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::MonotoneGraph;
use crate::solver::Trajectory;

pub const DEFAULT_THETA_EXT: f64 = 1e-6;
/// Thresholds swept in the sensitivity part of an [`ExtinctionReport`].
pub const THETA_SWEEP: [f64; 3] = [1e-4, 1e-6, 1e-8];

/// First recorded time with `‖X(t)‖₋₁ ≤ θ ‖X(0)‖₋₁`.
pub fn extinction_time(traj: &Trajectory, theta: f64) -> Option<f64> {
    extinction_time_series(&traj.times(), &traj.hm1_series(), theta)
}

pub fn extinction_time_series(times: &[f64], hm1: &[f64], theta: f64) -> Option<f64> {
    let level = theta * *hm1.first()?;
    times
        .iter()
        .zip(hm1)
        .find(|(_, &h)| h <= level)
        .map(|(&t, _)| t)
}

fn check_fast_diffusion(m: f64) -> Result<()> {
    if m > 0.0 && m < 1.0 {
        Ok(())
    } else {
        Err(Error::DomainError(format!("extinction bounds need 0 < m < 1, got m = {m}")))
    }
}

/// `τ_max = ‖x‖₋₁^{1-m} / (ρ (1-m) γ^{m+1})`.
pub fn deterministic_extinction_bound(x0_norm: f64, rho: f64, gamma: f64, m: f64) -> Result<f64> {
    check_fast_diffusion(m)?;
    if !(rho > 0.0 && gamma > 0.0) {
        return Err(Error::DomainError("rho and gamma must be positive".into()));
    }
    Ok(x0_norm.powf(1.0 - m) / (rho * (1.0 - m) * gamma.powf(m + 1.0)))
}

/// Lower bound `1 - ‖x‖₋₁^{1-m} C* / (ρ γ^{m+1} (1 - e^{-C*(1-m)t}))` for
/// `ℙ[τ ≤ t]`; at `C* = 0` the `C* → 0` limit is returned. May be negative.
pub fn extinction_prob_bound(x0_norm: f64, t: f64, rho: f64, gamma: f64, m: f64, cstar: f64) -> Result<f64> {
    check_fast_diffusion(m)?;
    if !(t > 0.0) {
        return Err(Error::DomainError("t must be positive".into()));
    }
    if !(cstar >= 0.0) {
        return Err(Error::DomainError("C* must be >= 0".into()));
    }
    let a = x0_norm.powf(1.0 - m);
    if a == 0.0 {
        return Ok(1.0);
    }
    let k = cstar * (1.0 - m);
    // (1 - e^{-kt}) / C*, continuous at C* = 0
    let horizon_factor = if k * t < 1e-8 {
        (1.0 - m) * t * (1.0 - 0.5 * k * t)
    } else {
        -(-k * t).exp_m1() / cstar
    };
    Ok(1.0 - a / (rho * gamma.powf(m + 1.0) * horizon_factor))
}

/// The same bound, read off the final display of the supermartingale argument:
/// `ℙ(τ > t) (1 - e^{-C*(1-m)t}) / (C*(1-m)) ≤ ‖x‖₋₁^{1-m} / (ρ(1-m)γ^{m+1})`.
pub fn extinction_prob_bound_prelimit(
    x0_norm: f64,
    t: f64,
    rho: f64,
    gamma: f64,
    m: f64,
    cstar: f64,
) -> Result<f64> {
    check_fast_diffusion(m)?;
    if !(t > 0.0 && cstar > 0.0) {
        return Err(Error::DomainError("t and C* must be positive".into()));
    }
    let rhs = x0_norm.powf(1.0 - m) / (rho * (1.0 - m) * gamma.powf(m + 1.0));
    let k = cstar * (1.0 - m);
    let weight = (1.0 - (-k * t).exp()) / k;
    Ok(1.0 - rhs / weight)
}

/// The two smallness conditions for extinction with positive probability: the
/// one stated with the corollary and the one implied by the bound's `t → ∞`
/// limit. They differ by the exponent `1 - m`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SmallnessConditions {
    /// `‖x‖₋₁ < ρ γ^{m+1} / C*`
    pub stated: bool,
    /// `‖x‖₋₁^{1-m} < ρ γ^{m+1} / C*`
    pub from_bound: bool,
    pub threshold: f64,
    pub discrepant: bool,
}

pub fn smallness_conditions(x0_norm: f64, rho: f64, gamma: f64, m: f64, cstar: f64) -> SmallnessConditions {
    let threshold = if cstar > 0.0 {
        rho * gamma.powf(m + 1.0) / cstar
    } else {
        f64::INFINITY
    };
    let stated = x0_norm < threshold;
    let from_bound = x0_norm.powf(1.0 - m) < threshold;
    SmallnessConditions {
        stated,
        from_bound,
        threshold,
        discrepant: stated != from_bound,
    }
}

/// `M(t_n) = e^{-C*(1-m)t_n} ‖X(t_n)‖₋₁^{1-m}`.
pub fn supermartingale_statistic(traj: &Trajectory, cstar: f64, m: f64) -> Vec<f64> {
    supermartingale_series(&traj.times(), &traj.hm1_series(), cstar, m)
}

pub fn supermartingale_series(times: &[f64], hm1: &[f64], cstar: f64, m: f64) -> Vec<f64> {
    times
        .iter()
        .zip(hm1)
        .map(|(&t, &h)| (-cstar * (1.0 - m) * t).exp() * h.powf(1.0 - m))
        .collect()
}

pub fn mass_series(traj: &Trajectory) -> Vec<f64> {
    traj.records.iter().map(|r| r.mass).collect()
}

/// `|X|_p` per recorded step. Available for `p = 2`, for `p = m + 1` (the
/// recorded exponent `m_rec`), and for any `p` when snapshots were kept.
pub fn lp_series(traj: &Trajectory, p: f64, m_rec: f64) -> Result<Vec<f64>> {
    if p == 2.0 {
        return Ok(traj.records.iter().map(|r| r.l2).collect());
    }
    if (p - (m_rec + 1.0)).abs() < 1e-15 {
        return Ok(traj.records.iter().map(|r| r.lm1).collect());
    }
    if traj.snapshots.len() == traj.records.len() && !traj.snapshots.is_empty() {
        let vol = traj.terminal.domain().cell_volume();
        return Ok(traj
            .snapshots
            .iter()
            .map(|s| (vol * s.values.iter().map(|v| v.abs().powf(p)).sum::<f64>()).powf(1.0 / p))
            .collect());
    }
    Err(Error::InvalidParameter(format!(
        "|X|_{p} was not recorded; keep snapshots to compute it"
    )))
}

/// Ensemble check of `E sup_t |X(t)|₂² ≤ 2 |x|₂² e^{3 C_∞² T}`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MomentReport {
    pub n_paths: usize,
    pub estimate: f64,
    pub std_error: f64,
    /// One-sided 95% upper confidence limit.
    pub upper_cl: f64,
    pub bound: f64,
    pub ratio: f64,
    pub pass: bool,
}

pub fn moment_bound_check(sup_l2_sq: &[f64], x0_l2_sq: f64, c_inf_sq: f64, horizon: f64) -> MomentReport {
    let n = sup_l2_sq.len();
    let mean = sup_l2_sq.iter().sum::<f64>() / n.max(1) as f64;
    let var = if n > 1 {
        sup_l2_sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let se = (var / n.max(1) as f64).sqrt();
    let upper_cl = mean + 1.645 * se;
    let bound = 2.0 * x0_l2_sq * (3.0 * c_inf_sq * horizon).exp();
    MomentReport {
        n_paths: n,
        estimate: mean,
        std_error: se,
        upper_cl,
        bound,
        ratio: if bound > 0.0 { mean / bound } else { f64::INFINITY },
        pass: upper_cl <= bound,
    }
}

/// Parameters of the extinction bound attached to a report.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct BoundParameters {
    pub rho: f64,
    pub gamma: f64,
    pub m: f64,
    pub cstar: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExtinctionReport {
    pub tau_hat: Option<f64>,
    pub theta: f64,
    /// Largest `‖X‖₋₁` recorded after `τ̂`.
    pub post_tau_max: Option<f64>,
    /// `τ̂` for each threshold in [`THETA_SWEEP`].
    pub theta_sweep: Vec<(f64, Option<f64>)>,
    /// Set when `τ̂` is only a threshold crossing of a diffusion that does not go
    /// extinct in finite time (no coercivity with `m < 1`).
    pub threshold_crossing_only: bool,
    pub bound: Option<BoundParameters>,
    pub tau_max: Option<f64>,
    /// `(t, lower bound of ℙ[τ ≤ t])`.
    pub bound_curve: Vec<(f64, f64)>,
    pub smallness: Option<SmallnessConditions>,
}

/// Builds the report for one trajectory. `gamma` is the discrete embedding
/// constant for the graph's coercivity exponent.
pub fn extinction_report(
    traj: &Trajectory,
    graph: &MonotoneGraph,
    theta: f64,
    gamma: Option<f64>,
    cstar: f64,
    report_grid: &[f64],
) -> ExtinctionReport {
    let times = traj.times();
    let hm1 = traj.hm1_series();
    let tau_hat = extinction_time_series(&times, &hm1, theta);
    let post_tau_max = tau_hat.map(|tau| {
        times
            .iter()
            .zip(&hm1)
            .filter(|(&t, _)| t >= tau)
            .map(|(_, &h)| h)
            .fold(0.0, f64::max)
    });
    let coercive = graph.coercivity().filter(|c| c.m > 0.0 && c.m < 1.0);
    let x0 = hm1.first().copied().unwrap_or(0.0);
    let bound = match (coercive, gamma) {
        (Some(c), Some(g)) => Some(BoundParameters {
            rho: c.rho,
            gamma: g,
            m: c.m,
            cstar,
        }),
        _ => None,
    };
    let tau_max = bound.and_then(|b| deterministic_extinction_bound(x0, b.rho, b.gamma, b.m).ok());
    let bound_curve = bound
        .map(|b| {
            report_grid
                .iter()
                .filter(|&&t| t > 0.0)
                .filter_map(|&t| {
                    extinction_prob_bound(x0, t, b.rho, b.gamma, b.m, b.cstar)
                        .ok()
                        .map(|p| (t, p))
                })
                .collect()
        })
        .unwrap_or_default();
    ExtinctionReport {
        tau_hat,
        theta,
        post_tau_max,
        theta_sweep: THETA_SWEEP
            .iter()
            .map(|&th| (th, extinction_time_series(&times, &hm1, th)))
            .collect(),
        threshold_crossing_only: tau_hat.is_some() && coercive.is_none() && x0 > 0.0,
        bound,
        tau_max,
        bound_curve,
        smallness: bound.map(|b| smallness_conditions(x0, b.rho, b.gamma, b.m, b.cstar)),
    }
}
