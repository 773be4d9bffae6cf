//! Drift-implicit Euler–Maruyama for `dX + (ν - Δ)(ψ_λ(X) + λX) dt = X dW`.
//!
//! Each step solves `u + Δt (ν - Δ) γ̃(u) = b` with `γ̃ = ψ_λ + λ·id`. The solve
//! works in the flux variable `w = γ̃(u)`: with `β = γ̃^{-1}` the equation becomes
//! `β(w) + Δt A w = b`, the gradient of a strictly convex functional, and is
//! minimized by a line-searched inexact Newton method whose linear systems are
//! solved by conjugate gradients with a diagonally scaled spectral
//! preconditioner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::MonotoneGraph;
use crate::noise::{EvaluatedNoise, NoiseSpec, PathIncrements};
use crate::spectral::{self, DomainRef, Field};

/// Guard `λ₀` in `γ̃ = ψ + λ₀·id` when `λ = 0`.
pub const LAMBDA_GUARD: f64 = 1e-8;
pub const DEFAULT_INNER_TOL: f64 = 1e-10;
pub const DEFAULT_INNER_BUDGET: usize = 10_000;
pub const DEFAULT_POSITIVITY_TOL: f64 = 1e-8;

const NEWTON_CAP: usize = 200;
const CG_FORCING: f64 = 1e-3;
const LINE_SEARCH_CAP: usize = 40;

fn default_inner_tol() -> f64 {
    DEFAULT_INNER_TOL
}
fn default_inner_budget() -> usize {
    DEFAULT_INNER_BUDGET
}
fn default_positivity_tol() -> f64 {
    DEFAULT_POSITIVITY_TOL
}
fn one() -> usize {
    1
}
fn one_u64() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub lambda: f64,
    #[serde(default)]
    pub nu: f64,
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    /// Cap on conjugate-gradient iterations per implicit step.
    #[serde(default = "default_inner_budget")]
    pub inner_budget: usize,
    /// Observable records (and snapshots, if kept) every `save_every` steps.
    #[serde(default = "one")]
    pub save_every: usize,
    #[serde(default)]
    pub positivity_clip: bool,
    /// Negative undershoot allowed before a nonnegative run is aborted, relative
    /// to `max(1, ‖x0‖_∞)`.
    #[serde(default = "default_positivity_tol")]
    pub positivity_tol: f64,
    /// Number of base Brownian draws per step (for coupled `Δt` ladders).
    #[serde(default = "one_u64")]
    pub brownian_stride: u64,
    #[serde(default)]
    pub keep_snapshots: bool,
    /// Stop once `‖X‖₋₁ ≤ θ ‖X(0)‖₋₁` at a recorded step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_at_extinction: Option<f64>,
}

impl SolverConfig {
    pub fn new(dt: f64, horizon: f64, lambda: f64, nu: f64) -> Self {
        SolverConfig {
            dt,
            horizon,
            lambda,
            nu,
            inner_tol: DEFAULT_INNER_TOL,
            inner_budget: DEFAULT_INNER_BUDGET,
            save_every: 1,
            positivity_clip: false,
            positivity_tol: DEFAULT_POSITIVITY_TOL,
            brownian_stride: 1,
            keep_snapshots: false,
            stop_at_extinction: None,
        }
    }

    pub fn validate(&self, graph: &MonotoneGraph) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.dt) || !pos(self.horizon) {
            return Err(Error::InvalidParameter("dt and T must be positive".into()));
        }
        if self.dt > self.horizon * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter("dt exceeds the horizon T".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidParameter("lambda must be >= 0".into()));
        }
        if self.lambda == 0.0 && !graph.is_lipschitz() {
            return Err(Error::InvalidParameter(
                "lambda = 0 requires a Lipschitz graph".into(),
            ));
        }
        if !(self.nu.is_finite() && self.nu >= 0.0) {
            return Err(Error::InvalidParameter("nu must be >= 0".into()));
        }
        if !pos(self.inner_tol) || self.inner_budget == 0 {
            return Err(Error::InvalidParameter("inner_tol and inner_budget must be positive".into()));
        }
        if self.save_every == 0 || self.brownian_stride == 0 {
            return Err(Error::InvalidParameter("save_every and brownian_stride must be >= 1".into()));
        }
        if !(self.positivity_tol >= 0.0) {
            return Err(Error::InvalidParameter("positivity_tol must be >= 0".into()));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> u64 {
        (self.horizon / self.dt - 1e-9).ceil().max(1.0) as u64
    }
}

/// The regularized flux `γ̃ = ψ_λ + λ·id` and its inverse.
#[derive(Clone, Debug)]
pub struct Flux {
    graph: MonotoneGraph,
    lambda: f64,
}

impl Flux {
    pub fn new(graph: MonotoneGraph, lambda: f64) -> Result<Self> {
        graph.validate()?;
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidParameter("lambda must be >= 0".into()));
        }
        if lambda == 0.0 && !graph.is_lipschitz() {
            return Err(Error::InvalidParameter(
                "lambda = 0 requires a Lipschitz graph".into(),
            ));
        }
        Ok(Flux { graph, lambda })
    }

    pub fn graph(&self) -> &MonotoneGraph {
        &self.graph
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `γ̃(r)`.
    pub fn eval(&self, r: f64) -> Result<f64> {
        if self.lambda == 0.0 {
            Ok(self.graph.eval(r).lo + LAMBDA_GUARD * r)
        } else {
            Ok(self.graph.yosida(self.lambda, r)? + self.lambda * r)
        }
    }

    /// `u = γ̃^{-1}(w)` and `du/dw`.
    ///
    /// With `p = J_λ u` and `η = ψ_λ(u) ∈ ψ(p)`, `w = λp + (1 + λ²)η`, so `p` is the
    /// resolvent of `ψ` at `w/λ` with parameter `(1 + λ²)/λ`.
    pub fn inverse_with_slope(&self, w: f64) -> Result<(f64, f64)> {
        let lam = self.lambda;
        if lam == 0.0 {
            let (u, s) = self.graph.resolvent_with_slope(1.0 / LAMBDA_GUARD, w / LAMBDA_GUARD)?;
            return Ok((u, s / LAMBDA_GUARD));
        }
        let q = 1.0 + lam * lam;
        let lp = q / lam;
        let r = w / lam;
        let (p, s) = self.graph.resolvent_with_slope(lp, r)?;
        let eta = self.graph.eval(p).project((r - p) / lp);
        Ok((p + lam * eta, s / lam + (1.0 - s) * lam / q))
    }
}

/// Outcome of one implicit drift solve.
#[derive(Clone, Debug)]
pub struct DriftSolve {
    pub u: Field,
    /// Flux `w = γ̃(u)`.
    pub w: Vec<f64>,
    pub newton: usize,
    pub cg: usize,
    /// Final residual in `|·|₋₁,max(ν,1)`.
    pub residual: f64,
}

/// Solver for `u + Δt (ν - Δ) γ̃(u) = b` on a fixed domain.
#[derive(Clone, Debug)]
pub struct DriftSolver {
    domain: DomainRef,
    flux: Flux,
    nu: f64,
    tol: f64,
    budget: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl DriftSolver {
    pub fn new(domain: DomainRef, flux: Flux, nu: f64, tol: f64, budget: usize) -> Result<Self> {
        if !(nu.is_finite() && nu >= 0.0) {
            return Err(Error::InvalidParameter("nu must be >= 0".into()));
        }
        Ok(DriftSolver {
            domain,
            flux,
            nu,
            tol,
            budget,
        })
    }

    pub fn flux(&self) -> &Flux {
        &self.flux
    }

    pub fn domain(&self) -> &DomainRef {
        &self.domain
    }

    fn residual_norm(&self, g: &[f64]) -> f64 {
        let alpha = self.nu.max(1.0);
        self.domain
            .quadratic_form(g, |e| 1.0 / (alpha + e))
            .max(0.0)
            .sqrt()
    }

    fn invert(&self, w: &[f64], u: &mut [f64], du: &mut [f64]) -> Result<()> {
        for ((wi, ui), di) in w.iter().zip(u.iter_mut()).zip(du.iter_mut()) {
            let (a, b) = self.flux.inverse_with_slope(*wi)?;
            *ui = a;
            *di = b;
        }
        Ok(())
    }

    pub fn solve(&self, b: &Field, dt: f64) -> Result<DriftSolve> {
        self.solve_from(b, dt, None)
    }

    /// As [`solve`](Self::solve), starting Newton from the flux `guess` instead of `γ̃(b)`.
    pub fn solve_from(&self, b: &Field, dt: f64, guess: Option<Vec<f64>>) -> Result<DriftSolve> {
        if !same_domain(b.domain(), &self.domain) {
            return Err(Error::DomainMismatch);
        }
        let n = self.domain.len();
        let bv = b.values();
        let nu = self.nu;
        let target = self.tol * self.residual_norm(bv).max(1e-30);

        let mut w = match guess {
            Some(g) if g.len() == n => g,
            _ => bv
                .iter()
                .map(|&r| self.flux.eval(r))
                .collect::<Result<Vec<f64>>>()?,
        };
        let mut aw = self.domain.apply_multiplier(&w, |e| dt * (nu + e));
        let mut u = vec![0.0; n];
        let mut du = vec![0.0; n];
        let mut g = vec![0.0; n];
        let mut trial = vec![0.0; n];
        let mut tu = vec![0.0; n];
        let mut tdu = vec![0.0; n];
        let mut cg_total = 0usize;

        for newton in 0..=NEWTON_CAP {
            self.invert(&w, &mut u, &mut du)?;
            for i in 0..n {
                g[i] = u[i] + aw[i] - bv[i];
            }
            let res = self.residual_norm(&g);
            if !res.is_finite() {
                return Err(Error::NonConvergence {
                    iterations: cg_total,
                    residual: res,
                });
            }
            if res <= target {
                return Ok(DriftSolve {
                    u: Field::from_raw(self.domain.clone(), u),
                    w,
                    newton,
                    cg: cg_total,
                    residual: res,
                });
            }
            if newton == NEWTON_CAP || cg_total >= self.budget {
                return Err(Error::NonConvergence {
                    iterations: cg_total,
                    residual: res,
                });
            }

            let (delta, adelta, its) = self.pcg(&du, &g, dt, self.budget - cg_total);
            cg_total += its;

            // Exact line search on the convex objective along δ:
            // φ'(t) = ⟨β(w + tδ) + Aw + tAδ - b, δ⟩ is nondecreasing.
            let slope0 = dot(&g, &delta);
            if !(slope0 < 0.0) {
                return Err(Error::NonConvergence {
                    iterations: cg_total,
                    residual: res,
                });
            }
            let mut phi = |t: f64, trial: &mut Vec<f64>| -> Result<f64> {
                for i in 0..n {
                    trial[i] = w[i] + t * delta[i];
                }
                self.invert(trial, &mut tu, &mut tdu)?;
                Ok((0..n)
                    .map(|i| (tu[i] + aw[i] + t * adelta[i] - bv[i]) * delta[i])
                    .sum())
            };
            let mut t = 1.0;
            let s1 = phi(1.0, &mut trial)?;
            if s1 > 0.0 {
                // Illinois iteration for the root of φ' in (0, 1).
                let (mut lo, mut flo, mut hi, mut fhi) = (0.0, slope0, 1.0, s1);
                let mut side = 0i8;
                for _ in 0..LINE_SEARCH_CAP {
                    t = (lo * fhi - hi * flo) / (fhi - flo);
                    if !(t > lo && t < hi) {
                        t = 0.5 * (lo + hi);
                    }
                    let ft = phi(t, &mut trial)?;
                    if ft.abs() <= 0.1 * slope0.abs() {
                        break;
                    }
                    if ft < 0.0 {
                        lo = t;
                        flo = ft;
                        if side == -1 {
                            fhi *= 0.5;
                        }
                        side = -1;
                    } else {
                        hi = t;
                        fhi = ft;
                        if side == 1 {
                            flo *= 0.5;
                        }
                        side = 1;
                    }
                }
            }
            for i in 0..n {
                w[i] += t * delta[i];
                aw[i] += t * adelta[i];
            }
            if newton % 8 == 7 {
                aw = self.domain.apply_multiplier(&w, |e| dt * (nu + e));
            }
        }
        unreachable!()
    }

    /// Preconditioned CG for `(diag(du) + Δt A) δ = -g`; returns `δ`, `Δt A δ` and
    /// the iteration count. The preconditioner is `S (c + Δt A)^{-1} S` with
    /// `c = min du` and `S` chosen so that its diagonal matches that of the Hessian.
    fn pcg(&self, du: &[f64], g: &[f64], dt: f64, budget: usize) -> (Vec<f64>, Vec<f64>, usize) {
        let n = du.len();
        let nu = self.nu;
        let eig = self.domain.eigenvalues();
        let abar = dt * (nu + eig.iter().sum::<f64>() / n as f64);
        let c = du.iter().copied().fold(f64::INFINITY, f64::min);
        let sc: Vec<f64> = du.iter().map(|d| ((c + abar) / (d + abar)).sqrt()).collect();
        let precond = |r: &[f64]| {
            let t: Vec<f64> = r.iter().zip(&sc).map(|(a, b)| a * b).collect();
            let mut v = self.domain.apply_multiplier(&t, |e| 1.0 / (c + dt * (nu + e)));
            v.iter_mut().zip(&sc).for_each(|(a, b)| *a *= b);
            v
        };
        let hmul = |p: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let ap = self.domain.apply_multiplier(p, |e| dt * (nu + e));
            let hp = (0..n).map(|i| ap[i] + du[i] * p[i]).collect();
            (hp, ap)
        };
        let mut x = vec![0.0; n];
        let mut ax = vec![0.0; n];
        let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
        let rhs_norm = dot(&r, &r).sqrt();
        let mut z = precond(&r);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut its = 0;
        while its < budget.max(1) {
            its += 1;
            let (hp, ap) = hmul(&p);
            let php = dot(&p, &hp);
            if !(php > 0.0) {
                break;
            }
            let alpha = rz / php;
            for i in 0..n {
                x[i] += alpha * p[i];
                ax[i] += alpha * ap[i];
                r[i] -= alpha * hp[i];
            }
            if dot(&r, &r).sqrt() <= CG_FORCING * rhs_norm {
                break;
            }
            z = precond(&r);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        (x, ax, its)
    }

}

fn same_domain(a: &DomainRef, b: &DomainRef) -> bool {
    std::sync::Arc::ptr_eq(a, b) || a.spec() == b.spec()
}

/// One backward-Euler drift step `u + Δt(ν - Δ)γ̃(u) = b`.
pub fn implicit_drift_solve(
    b: &Field,
    dt: f64,
    lambda: f64,
    nu: f64,
    graph: &MonotoneGraph,
    tol: f64,
) -> Result<Field> {
    let solver = DriftSolver::new(
        b.domain().clone(),
        Flux::new(graph.clone(), lambda)?,
        nu,
        tol,
        DEFAULT_INNER_BUDGET,
    )?;
    Ok(solver.solve(b, dt)?.u)
}

/// Observables at one recorded step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub t: f64,
    /// `‖X‖₋₁` (fluctuation part on periodic boxes with an excluded zero mode).
    pub hm1: f64,
    /// `|X|₋₁,ν` (equal to `hm1` when `ν = 0`).
    pub hm1_nu: f64,
    pub l2: f64,
    /// `|X|_{m+1}` with `m` the growth exponent of the graph.
    pub lm1: f64,
    pub mass: f64,
    pub min: f64,
    pub max: f64,
    /// Conjugate-gradient iterations spent on the step that produced this state.
    pub inner_iters: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u64,
    pub t: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathFailure {
    pub step: u64,
    pub t: f64,
    pub message: String,
}

/// A simulated path: recorded observables plus whole-run statistics.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub path_index: u64,
    pub seed_base: u64,
    pub dt: f64,
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot>,
    pub terminal: Field,
    /// `sup_t |X(t)|₂²` over every step, not just recorded ones.
    pub sup_l2_sq: f64,
    /// `min_{t,x} X` over every step.
    pub min_value: f64,
    pub steps_taken: u64,
    pub failure: Option<PathFailure>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn hm1_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.hm1).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }
}

/// Exponent `m` used for the `|X|_{m+1}` observable.
pub fn record_exponent(graph: &MonotoneGraph) -> f64 {
    graph.growth_exponent()
}

pub fn observe(x: &Field, step: u64, t: f64, nu: f64, m: f64, inner: u64) -> StepRecord {
    let (hm1, hm1_nu) = spectral::hminus1_pair(x, nu);
    StepRecord {
        step,
        t,
        hm1,
        hm1_nu,
        l2: spectral::l2_norm(x),
        lm1: spectral::lp_norm(x, m + 1.0),
        mass: x.mass(),
        min: x.min(),
        max: x.max(),
        inner_iters: inner,
    }
}

/// Which equation a path integrates.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Scheme {
    Direct,
    /// `X = e^W Y` with scalar `W`; `sigma2 = Σ μ_j² c_j²`.
    Rescaled { sigma2: f64 },
}

/// Integrator for one configuration; shared immutably across paths.
#[derive(Clone, Debug)]
pub struct PathSolver {
    domain: DomainRef,
    config: SolverConfig,
    drift: DriftSolver,
    noise: EvaluatedNoise,
    seed_base: u64,
    m: f64,
}

/// Mutable state of a path being advanced.
#[derive(Clone, Debug)]
pub struct PathState {
    pub x: Field,
    pub step: u64,
    pub t: f64,
    pub last_inner: u64,
    keys: PathIncrements,
    floor: Option<f64>,
    /// Fluxes of the last two states, for the Newton predictor.
    flux_hist: [Option<Vec<f64>>; 2],
}

impl PathSolver {
    pub fn new(
        domain: DomainRef,
        graph: MonotoneGraph,
        config: SolverConfig,
        noise: &NoiseSpec,
    ) -> Result<Self> {
        config.validate(&graph)?;
        let flux = Flux::new(graph.clone(), config.lambda)?;
        let drift = DriftSolver::new(
            domain.clone(),
            flux,
            config.nu,
            config.inner_tol,
            config.inner_budget,
        )?;
        Ok(PathSolver {
            noise: noise.evaluate(&domain)?,
            seed_base: noise.seed_base,
            m: record_exponent(&graph),
            domain,
            config,
            drift,
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn domain(&self) -> &DomainRef {
        &self.domain
    }

    pub fn graph(&self) -> &MonotoneGraph {
        self.drift.flux().graph()
    }

    pub fn noise(&self) -> &EvaluatedNoise {
        &self.noise
    }

    pub fn seed_base(&self) -> u64 {
        self.seed_base
    }

    pub fn drift(&self) -> &DriftSolver {
        &self.drift
    }

    pub fn start(&self, x0: &Field, path_index: u64) -> Result<PathState> {
        if !same_domain(x0.domain(), &self.domain) {
            return Err(Error::DomainMismatch);
        }
        let floor = (x0.min() >= 0.0)
            .then(|| -self.config.positivity_tol * x0.sup_norm().max(1.0));
        Ok(PathState {
            x: x0.clone(),
            step: 0,
            t: 0.0,
            last_inner: 0,
            keys: PathIncrements::new(self.seed_base, path_index, self.noise.len()),
            floor,
            flux_hist: [None, None],
        })
    }

    fn observe(&self, x: &Field, step: u64, t: f64, inner: u64) -> StepRecord {
        observe(x, step, t, self.config.nu, self.m, inner)
    }

    fn increments(&self, state: &mut PathState) -> Vec<f64> {
        if self.noise.is_empty() {
            return Vec::new();
        }
        state
            .keys
            .increments(state.step, self.config.dt, self.config.brownian_stride)
    }

    /// `X_{n+1}` from `X_n`: explicit Itô noise, backward-Euler drift.
    pub fn step(&self, state: &mut PathState) -> Result<()> {
        self.advance(state, Scheme::Direct)
    }

    /// Step of the rescaled random PDE, returned in the `X` variable.
    pub fn step_rescaled(&self, state: &mut PathState) -> Result<()> {
        let sigma2 = self.rescaling_rate()?;
        self.advance(state, Scheme::Rescaled { sigma2 })
    }

    /// `σ² = Σ μ_k² c_k²` for constant modes.
    pub fn rescaling_rate(&self) -> Result<f64> {
        let mut sigma2 = 0.0;
        for k in 0..self.noise.len() {
            let e = self.noise.mode_field(k);
            let v = e.values();
            let c = v[0];
            if v.iter().any(|&x| (x - c).abs() > 1e-14 * c.abs().max(1.0)) {
                return Err(Error::RescalingInapplicable(k));
            }
            sigma2 += (self.noise.mus()[k] * c).powi(2);
        }
        Ok(sigma2)
    }

    fn advance(&self, state: &mut PathState, scheme: Scheme) -> Result<()> {
        let dt = self.config.dt;
        let incr = self.increments(state);
        let (b, dt_eff) = match scheme {
            Scheme::Direct => {
                if incr.is_empty() || self.noise.is_silent() {
                    (state.x.clone(), dt)
                } else {
                    let noise = self.noise.apply_increment(&state.x, &incr)?;
                    (state.x.add(&noise)?, dt)
                }
            }
            Scheme::Rescaled { sigma2 } => {
                // Z (1 + σ²Δt/2) + Δt A γ̃(Z) = e^{ΔW} X_n with Z = X_{n+1}.
                let dw = if incr.is_empty() {
                    0.0
                } else {
                    self.noise.multiplier(&incr)[0]
                };
                let damp = 1.0 + 0.5 * sigma2 * dt;
                let scale = dw.exp() / damp;
                let b = if scale == 1.0 {
                    state.x.clone()
                } else {
                    state.x.scaled(scale)
                };
                (b, dt / damp)
            }
        };
        // Predictor γ̃(b) + (w_n - w_{n-1}); plain extrapolation when b = X_n.
        let guess = match &state.flux_hist {
            [Some(w1), Some(w0)] => {
                let mut g = Vec::with_capacity(w1.len());
                for ((r, a), c) in b.values().iter().zip(w1).zip(w0) {
                    g.push(self.drift.flux().eval(*r)? + a - c);
                }
                Some(g)
            }
            _ => None,
        };
        let solved = self.drift.solve_from(&b, dt_eff, guess)?;
        state.flux_hist.swap(0, 1);
        state.flux_hist[0] = Some(solved.w.clone());
        let mut x = solved.u;
        state.step += 1;
        state.t = state.step as f64 * dt;
        state.last_inner = solved.cg as u64;
        if let Some(bad) = x.values().iter().position(|v| !v.is_finite()) {
            return Err(Error::NaNDetected {
                step: state.step,
                time: state.t,
                detail: format!("non-finite value at node {bad}"),
            });
        }
        if let Some(floor) = state.floor {
            if self.config.positivity_clip {
                x = x.map(|v| v.max(0.0));
            } else {
                let min = x.min();
                if min < floor {
                    return Err(Error::PositivityViolation {
                        step: state.step,
                        time: state.t,
                        min,
                        threshold: floor,
                    });
                }
            }
        }
        state.x = x;
        Ok(())
    }

    fn run(&self, x0: &Field, path_index: u64, scheme: Scheme, sink: &mut dyn FnMut(&StepRecord)) -> Trajectory {
        let mut traj = Trajectory {
            path_index,
            seed_base: self.seed_base,
            dt: self.config.dt,
            records: Vec::new(),
            snapshots: Vec::new(),
            terminal: x0.clone(),
            sup_l2_sq: spectral::l2_norm(x0).powi(2),
            min_value: x0.min(),
            steps_taken: 0,
            failure: None,
        };
        let mut state = match self.start(x0, path_index) {
            Ok(s) => s,
            Err(e) => {
                traj.failure = Some(PathFailure {
                    step: 0,
                    t: 0.0,
                    message: e.to_string(),
                });
                return traj;
            }
        };
        let first = self.observe(x0, 0, 0.0, 0);
        let stop_level = self.config.stop_at_extinction.map(|th| th * first.hm1);
        sink(&first);
        traj.records.push(first);
        if self.config.keep_snapshots {
            traj.snapshots.push(Snapshot {
                step: 0,
                t: 0.0,
                values: x0.values().to_vec(),
            });
        }
        let n = self.config.n_steps();
        let every = self.config.save_every as u64;
        while state.step < n {
            let attempted = state.step + 1;
            if let Err(e) = self.advance(&mut state, scheme) {
                if let Error::PositivityViolation { min, .. } = e {
                    traj.min_value = traj.min_value.min(min);
                }
                traj.failure = Some(PathFailure {
                    step: attempted,
                    t: attempted as f64 * self.config.dt,
                    message: e.to_string(),
                });
                break;
            }
            traj.steps_taken = state.step;
            traj.sup_l2_sq = traj.sup_l2_sq.max(spectral::l2_norm(&state.x).powi(2));
            traj.min_value = traj.min_value.min(state.x.min());
            if state.step % every == 0 || state.step == n {
                let rec = self.observe(&state.x, state.step, state.t, state.last_inner);
                sink(&rec);
                traj.records.push(rec);
                if self.config.keep_snapshots {
                    traj.snapshots.push(Snapshot {
                        step: state.step,
                        t: state.t,
                        values: state.x.values().to_vec(),
                    });
                }
                if stop_level.is_some_and(|lvl| rec.hm1 <= lvl) {
                    break;
                }
            }
        }
        traj.terminal = state.x;
        traj
    }

    pub fn run_path(&self, x0: &Field, path_index: u64) -> Trajectory {
        self.run(x0, path_index, Scheme::Direct, &mut |_| {})
    }

    /// Like [`run_path`](Self::run_path), handing each record to `sink` as it is produced.
    pub fn run_path_streaming(
        &self,
        x0: &Field,
        path_index: u64,
        sink: &mut dyn FnMut(&StepRecord),
    ) -> Trajectory {
        self.run(x0, path_index, Scheme::Direct, sink)
    }

    pub fn run_rescaled(&self, x0: &Field, path_index: u64) -> Result<Trajectory> {
        let sigma2 = self.rescaling_rate()?;
        Ok(self.run(x0, path_index, Scheme::Rescaled { sigma2 }, &mut |_| {}))
    }

    pub fn run_rescaled_streaming(
        &self,
        x0: &Field,
        path_index: u64,
        sink: &mut dyn FnMut(&StepRecord),
    ) -> Result<Trajectory> {
        let sigma2 = self.rescaling_rate()?;
        Ok(self.run(x0, path_index, Scheme::Rescaled { sigma2 }, sink))
    }
}

pub fn run_path(
    x0: &Field,
    graph: &MonotoneGraph,
    config: &SolverConfig,
    noise: &NoiseSpec,
    path_index: u64,
) -> Result<Trajectory> {
    let solver = PathSolver::new(x0.domain().clone(), graph.clone(), config.clone(), noise)?;
    Ok(solver.run_path(x0, path_index))
}

pub fn run_deterministic(x0: &Field, graph: &MonotoneGraph, config: &SolverConfig) -> Result<Trajectory> {
    run_path(x0, graph, config, &NoiseSpec::none(), 0)
}

pub fn run_rescaled(
    x0: &Field,
    graph: &MonotoneGraph,
    config: &SolverConfig,
    noise: &NoiseSpec,
    path_index: u64,
) -> Result<Trajectory> {
    let solver = PathSolver::new(x0.domain().clone(), graph.clone(), config.clone(), noise)?;
    solver.run_rescaled(x0, path_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{ModeShape, NoiseMode};
    use crate::spectral::{Boundary, Domain, DomainSpec, ZeroMode};
    use rand_chacha::ChaCha8Rng;
    use rand_core::{RngCore, SeedableRng};
    use std::f64::consts::PI;

    fn domain(d: usize, l: f64, n: usize, boundary: Boundary) -> DomainRef {
        Domain::new(DomainSpec {
            d,
            length: l,
            n,
            boundary,
            zero_mode: ZeroMode::Exclude,
        })
        .unwrap()
    }

    fn graphs() -> Vec<MonotoneGraph> {
        vec![
            MonotoneGraph::Linear { a: 1.0 },
            MonotoneGraph::Power { m: 0.5, rho: 1.0 },
            MonotoneGraph::Power { m: 0.2, rho: 1.0 },
            MonotoneGraph::Power { m: 2.0, rho: 1.0 },
            MonotoneGraph::Heaviside {
                rho: 1.0,
                r_c: 0.3,
                alpha: 0.0,
            },
            MonotoneGraph::LipschitzTabulated {
                points: vec![[-1.0, -2.0], [0.0, 0.0], [1.0, 0.5], [2.0, 3.0]],
            },
        ]
    }

    fn bump(dom: &DomainRef, height: f64) -> Field {
        let c = dom.spec().length / 2.0;
        let r = dom.spec().length / 4.0;
        Field::from_fn(dom.clone(), |p| {
            let s = (p[0] - c).abs() / r;
            if s < 1.0 {
                height * (1.0 - s * s).powi(2)
            } else {
                0.0
            }
        })
    }

    #[test]
    fn flux_inverse_roundtrip_and_slope() {
        for g in graphs() {
            for &lam in &[0.1, 1e-2, 1e-3] {
                let f = Flux::new(g.clone(), lam).unwrap();
                for &r in &[-2.5, -0.4, 0.0, 0.1, 0.3, 0.31, 1.7] {
                    let w = f.eval(r).unwrap();
                    let (u, _) = f.inverse_with_slope(w).unwrap();
                    assert!((u - r).abs() <= 1e-9 * (1.0 + r.abs()), "{g:?} λ={lam} r={r}: {u}");
                    let h = 1e-9 * lam * (1.0 + w.abs());
                    let fd = (f.inverse_with_slope(w + h).unwrap().0
                        - f.inverse_with_slope(w - h).unwrap().0)
                        / (2.0 * h);
                    let (_, du) = f.inverse_with_slope(w).unwrap();
                    // kinks of β are allowed to disagree with the central difference
                    if (fd - du).abs() > 1e-3 * du.max(1.0) {
                        let l = (f.inverse_with_slope(w).unwrap().0
                            - f.inverse_with_slope(w - h).unwrap().0)
                            / h;
                        let rr = (f.inverse_with_slope(w + h).unwrap().0
                            - f.inverse_with_slope(w).unwrap().0)
                            / h;
                        let near = |a: f64| (a - du).abs() <= 1e-3 * du.max(1.0);
                        assert!(near(l) || near(rr), "{g:?} λ={lam} w={w}: {du} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn lambda_zero_requires_lipschitz() {
        assert!(Flux::new(MonotoneGraph::Power { m: 0.2, rho: 1.0 }, 0.0).is_err());
        let f = Flux::new(MonotoneGraph::Linear { a: 2.0 }, 0.0).unwrap();
        let (u, du) = f.inverse_with_slope(4.0).unwrap();
        assert!((u - 4.0 / (2.0 + LAMBDA_GUARD)).abs() < 1e-12);
        assert!((du - 1.0 / (2.0 + LAMBDA_GUARD)).abs() < 1e-12);
    }

    #[test]
    fn linear_eigenfunction_is_diagonal_solve() {
        for &b in &[Boundary::Periodic, Boundary::Dirichlet] {
            let dom = domain(2, PI, 16, b);
            let k = match b {
                Boundary::Periodic => 2.0,
                Boundary::Dirichlet => 1.0,
            };
            let rhs = Field::from_fn(dom.clone(), |p| (k * p[0]).sin() * (k * p[1]).sin());
            let mu = 2.0 * k * k;
            for &(lam, nu) in &[(0.1, 0.0), (1e-3, 0.5), (0.0, 1.0)] {
                let dt = 1e-2;
                let a = 1.0;
                let kappa = if lam > 0.0 {
                    a / (1.0 + lam * a) + lam
                } else {
                    a + LAMBDA_GUARD
                };
                let u = implicit_drift_solve(&rhs, dt, lam, nu, &MonotoneGraph::Linear { a }, 1e-12)
                    .unwrap();
                let expect = rhs.scaled(1.0 / (1.0 + dt * kappa * (nu + mu)));
                let err = spectral::l2_norm(&u.sub(&expect).unwrap()) / spectral::l2_norm(&expect);
                assert!(err < 1e-10, "{b:?} λ={lam} ν={nu}: {err}");
            }
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let dom = domain(1, PI, 32, Boundary::Dirichlet);
        for g in graphs() {
            let u = implicit_drift_solve(&Field::zeros(dom.clone()), 1e-3, 1e-2, 0.0, &g, 1e-10).unwrap();
            assert_eq!(u.sup_norm(), 0.0);
        }
    }

    fn random_field(dom: &DomainRef, seed: u64, scale: f64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..dom.len())
            .map(|_| scale * ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5))
            .collect();
        Field::new(dom.clone(), v).unwrap()
    }

    #[test]
    fn residual_contract_and_contraction() {
        let dom = domain(1, PI, 64, Boundary::Dirichlet);
        let nu = 0.5;
        let tol = 1e-10;
        for (gi, g) in graphs().into_iter().enumerate() {
            let solver = DriftSolver::new(dom.clone(), Flux::new(g, 1e-2).unwrap(), nu, tol, DEFAULT_INNER_BUDGET)
                .unwrap();
            for trial in 0..4u64 {
                let b1 = random_field(&dom, 10 * gi as u64 + trial, 3.0);
                let b2 = random_field(&dom, 1000 + 10 * gi as u64 + trial, 3.0);
                let dt = 1e-2;
                let s1 = solver.solve(&b1, dt).unwrap();
                let s2 = solver.solve(&b2, dt).unwrap();
                assert!(s1.residual <= tol * solver.residual_norm(b1.values()).max(1e-30));
                // residual recomputed from scratch
                let w = s1.u.values().iter().map(|&r| solver.flux().eval(r).unwrap()).collect::<Vec<_>>();
                let aw = dom.apply_multiplier(&w, |e| dt * (nu + e));
                let g: Vec<f64> = (0..dom.len()).map(|i| s1.u.values()[i] + aw[i] - b1.values()[i]).collect();
                assert!(solver.residual_norm(&g) <= 1e-8 * solver.residual_norm(b1.values()));
                let du = spectral::hminus1_nu_norm(&s1.u.sub(&s2.u).unwrap(), nu).unwrap();
                let db = spectral::hminus1_nu_norm(&b1.sub(&b2).unwrap(), nu).unwrap();
                assert!(du <= db * (1.0 + 1e-8), "graph {gi}: {du} > {db}");
            }
        }
    }

    #[test]
    fn heat_decay_matches_exact() {
        let l = 2.0 * PI;
        let dom = domain(1, l, 128, Boundary::Periodic);
        let k = 2.0 * PI / l;
        let x0 = Field::from_fn(dom.clone(), |p| (k * p[0]).sin());
        let cfg = SolverConfig::new(1e-4, 0.1, 0.0, 0.0);
        let tr = run_deterministic(&x0, &MonotoneGraph::Linear { a: 1.0 }, &cfg).unwrap();
        assert!(tr.is_complete());
        let exact = x0.scaled((-k * k * 0.1).exp());
        let err = spectral::l2_norm(&tr.terminal.sub(&exact).unwrap()) / spectral::l2_norm(&exact);
        assert!(err < 1e-3, "{err}");
        assert_eq!(tr.records.len(), 1001);
    }

    #[test]
    fn zero_initial_state_is_absorbing() {
        let dom = domain(1, PI, 32, Boundary::Dirichlet);
        let noise = NoiseSpec {
            modes: vec![NoiseMode {
                mu: 0.5,
                e: ModeShape::Constant { c: 1.0 },
            }],
            seed_base: 3,
        };
        let cfg = SolverConfig::new(1e-3, 0.02, 1e-2, 0.0);
        let tr = run_path(&Field::zeros(dom), &MonotoneGraph::Power { m: 0.5, rho: 1.0 }, &cfg, &noise, 0).unwrap();
        assert!(tr.records.iter().all(|r| r.hm1 == 0.0 && r.max == 0.0 && r.min == 0.0));
    }

    fn noisy() -> NoiseSpec {
        NoiseSpec {
            modes: vec![
                NoiseMode {
                    mu: 0.3,
                    e: ModeShape::Constant { c: 1.0 },
                },
                NoiseMode {
                    mu: 0.2,
                    e: ModeShape::Sine {
                        wave_vector: vec![1.0],
                        amplitude: 1.0,
                    },
                },
            ],
            seed_base: 11,
        }
    }

    #[test]
    fn paths_are_deterministic() {
        let dom = domain(1, PI, 64, Boundary::Dirichlet);
        let x0 = bump(&dom, 1.0);
        let cfg = SolverConfig::new(1e-3, 0.05, 1e-2, 0.0);
        let g = MonotoneGraph::Power { m: 0.5, rho: 1.0 };
        let a = run_path(&x0, &g, &cfg, &noisy(), 4).unwrap();
        let b = run_path(&x0, &g, &cfg, &noisy(), 4).unwrap();
        assert_eq!(a.records, b.records);
        let c = run_path(&x0, &g, &cfg, &noisy(), 5).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn silent_noise_matches_deterministic() {
        let dom = domain(1, PI, 64, Boundary::Dirichlet);
        let x0 = bump(&dom, 1.0);
        let cfg = SolverConfig::new(1e-3, 0.05, 1e-2, 0.0);
        let g = MonotoneGraph::Power { m: 0.5, rho: 1.0 };
        let mut silent = noisy();
        silent.modes.iter_mut().for_each(|m| m.mu = 0.0);
        let a = run_path(&x0, &g, &cfg, &silent, 2).unwrap();
        let b = run_deterministic(&x0, &g, &cfg).unwrap();
        assert_eq!(a.records, b.records);

        let mut constant = silent.clone();
        constant.modes.truncate(1);
        let r = run_rescaled(&x0, &g, &cfg, &constant, 2).unwrap();
        assert_eq!(r.records, b.records);
    }

    #[test]
    fn rescaling_rejects_spatial_modes() {
        let dom = domain(1, PI, 32, Boundary::Dirichlet);
        let cfg = SolverConfig::new(1e-3, 0.01, 1e-2, 0.0);
        let err = run_rescaled(&bump(&dom, 1.0), &MonotoneGraph::Linear { a: 1.0 }, &cfg, &noisy(), 0)
            .unwrap_err();
        assert!(matches!(err, Error::RescalingInapplicable(1)));
    }

    #[test]
    fn drift_step_dissipates_energy() {
        let dom = domain(1, PI, 64, Boundary::Dirichlet);
        let nu = 0.3;
        for g in graphs() {
            let mut cfg = SolverConfig::new(2e-3, 0.02, 1e-2, nu);
            cfg.positivity_tol = f64::INFINITY;
            let solver = PathSolver::new(dom.clone(), g.clone(), cfg, &NoiseSpec::none()).unwrap();
            let mut st = solver.start(&bump(&dom, 1.5), 0).unwrap();
            for _ in 0..10 {
                let before = spectral::hminus1_nu_norm(&st.x, nu).unwrap().powi(2) / 2.0;
                solver.step(&mut st).unwrap();
                let x = &st.x;
                let flux: f64 = x
                    .values()
                    .iter()
                    .map(|&r| solver.drift().flux().eval(r).unwrap() * r)
                    .sum::<f64>()
                    * dom.cell_volume();
                let after = spectral::hminus1_nu_norm(x, nu).unwrap().powi(2) / 2.0 + 2e-3 * flux;
                assert!(after <= before * (1.0 + 1e-9) + 1e-14, "{g:?}: {after} > {before}");
            }
        }
    }

    #[test]
    fn periodic_porous_medium_conserves_mass() {
        let dom = domain(1, 2.0 * PI, 64, Boundary::Periodic);
        let x0 = bump(&dom, 1.0).map(|v| v + 0.1);
        let cfg = SolverConfig::new(1e-3, 0.2, 1e-3, 0.0);
        let tr = run_deterministic(&x0, &MonotoneGraph::Power { m: 2.0, rho: 1.0 }, &cfg).unwrap();
        let m0 = tr.records[0].mass;
        for r in &tr.records {
            assert!((r.mass - m0).abs() <= 1e-8 * m0.abs(), "{} vs {m0}", r.mass);
        }
        assert!(tr.min_value >= 0.0);
    }

    #[test]
    fn fast_diffusion_decays_monotonically() {
        let dom = domain(1, PI, 64, Boundary::Dirichlet);
        let mut cfg = SolverConfig::new(1e-3, 2.0, 1e-3, 0.0);
        cfg.stop_at_extinction = Some(1e-6);
        let tr = run_deterministic(&bump(&dom, 0.5), &MonotoneGraph::Power { m: 0.5, rho: 1.0 }, &cfg).unwrap();
        assert!(tr.is_complete());
        let h = tr.hm1_series();
        assert!(h.windows(2).all(|w| w[1] < w[0]));
        assert!(*h.last().unwrap() <= 1e-6 * h[0]);
        assert!(tr.records.last().unwrap().t < 2.0);
    }

    #[test]
    fn config_validation() {
        let g = MonotoneGraph::Power { m: 0.2, rho: 1.0 };
        assert!(SolverConfig::new(1e-3, 1.0, 0.0, 0.0).validate(&g).is_err());
        assert!(SolverConfig::new(2.0, 1.0, 1e-3, 0.0).validate(&g).is_err());
        let mut c = SolverConfig::new(1e-3, 1.0, 1e-3, 0.0);
        c.save_every = 0;
        assert!(c.validate(&g).is_err());
        assert_eq!(SolverConfig::new(1e-4, 0.1, 0.0, 0.0).n_steps(), 1000);
    }
}
