//! Truncated box domains, spectral transforms and the Fourier-multiplier norms.
//!
//! Periodic boxes use the exponential basis on the nodes `x_j = j h`; Dirichlet
//! boxes use the sine basis `sin(π k x / L)`, `k = 1..N`, on the cell centres
//! `x_j = (j + 1/2) h`. In both cases `h = L / N` and all derivatives and inverses
//! are exact multipliers.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    Dirichlet,
}

/// Treatment of the `ξ = 0` mode in negative norms on periodic boxes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum ZeroMode {
    #[default]
    Exclude,
    Shift {
        eps0: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub d: usize,
    #[serde(rename = "L")]
    pub length: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub boundary: Boundary,
    #[serde(default)]
    pub zero_mode: ZeroMode,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.d) {
            return Err(Error::InvalidParameter(format!("d = {} outside 1..=3", self.d)));
        }
        if !(self.length.is_finite() && self.length > 0.0) {
            return Err(Error::InvalidParameter("box length L must be positive".into()));
        }
        if self.n < 8 || !self.n.is_power_of_two() {
            return Err(Error::InvalidParameter(format!(
                "N = {} must be a power of two >= 8",
                self.n
            )));
        }
        if let ZeroMode::Shift { eps0 } = self.zero_mode {
            if !(eps0.is_finite() && eps0 > 0.0) {
                return Err(Error::InvalidParameter("zero-mode shift eps0 must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn grid_len(&self) -> usize {
        self.n.pow(self.d as u32)
    }
}

/// Spectral coefficients in the basis of the domain.
#[derive(Clone, Debug)]
pub enum Spectrum {
    Periodic(Vec<Complex64>),
    Sine(Vec<f64>),
}

impl Spectrum {
    fn power(&self, k: usize) -> f64 {
        match self {
            Spectrum::Periodic(c) => c[k].norm_sqr(),
            Spectrum::Sine(c) => c[k] * c[k],
        }
    }

    fn cross(&self, other: &Spectrum, k: usize) -> f64 {
        match (self, other) {
            (Spectrum::Periodic(a), Spectrum::Periodic(b)) => (a[k] * b[k].conj()).re,
            (Spectrum::Sine(a), Spectrum::Sine(b)) => a[k] * b[k],
            _ => unreachable!("spectra from different boundary types"),
        }
    }

    fn scale_by(&mut self, f: impl Fn(usize) -> f64) {
        match self {
            Spectrum::Periodic(c) => c.iter_mut().enumerate().for_each(|(k, z)| *z *= f(k)),
            Spectrum::Sine(c) => c.iter_mut().enumerate().for_each(|(k, z)| *z *= f(k)),
        }
    }
}

/// A discretized box with cached transform plans and the Laplacian spectrum.
pub struct Domain {
    spec: DomainSpec,
    /// `|ξ|²` (periodic) or `μ_k` (Dirichlet) per coefficient, row-major.
    eig: Vec<f64>,
    /// Plancherel weights: `|u|₂² = Σ_k weight_k |û_k|²`.
    weight: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// `e^{iπk/(2N)}`, `k = 0..=N`, for the sine transform.
    twiddle: Vec<Complex64>,
}

impl fmt::Debug for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Domain").field("spec", &self.spec).finish()
    }
}

pub type DomainRef = Arc<Domain>;

impl Domain {
    pub fn new(spec: DomainSpec) -> Result<DomainRef> {
        spec.validate()?;
        let n = spec.n;
        let d = spec.d;
        let len = spec.grid_len();
        let h = spec.spacing();
        let mut planner = FftPlanner::new();
        let fft_len = match spec.boundary {
            Boundary::Periodic => n,
            Boundary::Dirichlet => 2 * n,
        };
        let fwd = planner.plan_fft_forward(fft_len);
        let inv = planner.plan_fft_inverse(fft_len);

        // Per-axis eigenvalues and Plancherel factors.
        let (axis_eig, axis_w): (Vec<f64>, Vec<f64>) = match spec.boundary {
            Boundary::Periodic => (0..n)
                .map(|i| {
                    let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
                    let xi = 2.0 * std::f64::consts::PI * k / spec.length;
                    (xi * xi, spec.length / (n * n) as f64)
                })
                .unzip(),
            Boundary::Dirichlet => (1..=n)
                .map(|k| {
                    let xi = std::f64::consts::PI * k as f64 / spec.length;
                    let c = if k < n { 2.0 / n as f64 } else { 1.0 / n as f64 };
                    (xi * xi, h * c)
                })
                .unzip(),
        };
        let mut eig = vec![0.0; len];
        let mut weight = vec![1.0; len];
        for (idx, (e, w)) in eig.iter_mut().zip(weight.iter_mut()).enumerate() {
            let mut rem = idx;
            for _ in 0..d {
                let i = rem % n;
                rem /= n;
                *e += axis_eig[i];
                *w *= axis_w[i];
            }
        }
        let twiddle = (0..=n)
            .map(|k| Complex64::from_polar(1.0, std::f64::consts::PI * k as f64 / (2 * n) as f64))
            .collect();
        Ok(Arc::new(Domain {
            spec,
            eig,
            weight,
            fwd,
            inv,
            twiddle,
        }))
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.eig.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eig.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.spec.spacing()
    }

    /// Quadrature weight `h^d` of a single node.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.spec.d as i32)
    }

    pub fn volume(&self) -> f64 {
        self.spec.length.powi(self.spec.d as i32)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eig
    }

    /// Smallest nonzero Laplacian eigenvalue.
    pub fn first_eigenvalue(&self) -> f64 {
        self.eig
            .iter()
            .copied()
            .filter(|&e| e > 0.0)
            .fold(f64::INFINITY, f64::min)
    }

    /// Node coordinates along one axis.
    pub fn axis_coordinates(&self) -> Vec<f64> {
        let h = self.spacing();
        let shift = match self.spec.boundary {
            Boundary::Periodic => 0.0,
            Boundary::Dirichlet => 0.5,
        };
        (0..self.spec.n).map(|j| (j as f64 + shift) * h).collect()
    }

    /// Coordinates of node `idx` (row-major, axis 0 slowest).
    pub fn node(&self, idx: usize, axis_coords: &[f64]) -> [f64; 3] {
        let n = self.spec.n;
        let d = self.spec.d;
        let mut x = [0.0; 3];
        let mut rem = idx;
        for a in (0..d).rev() {
            x[a] = axis_coords[rem % n];
            rem /= n;
        }
        x
    }

    /// Plancherel-weighted multiplier pairing: `Σ_k w_k f(eig_k) |û_k|²`.
    pub fn weighted_power(&self, s: &Spectrum, f: impl Fn(f64) -> f64) -> f64 {
        (0..self.len())
            .map(|k| self.weight[k] * f(self.eig[k]) * s.power(k))
            .sum()
    }

    fn weighted_cross(&self, a: &Spectrum, b: &Spectrum, f: impl Fn(f64) -> f64) -> f64 {
        (0..self.len())
            .map(|k| self.weight[k] * f(self.eig[k]) * a.cross(b, k))
            .sum()
    }

    pub fn forward(&self, u: &[f64]) -> Spectrum {
        assert_eq!(u.len(), self.len());
        match self.spec.boundary {
            Boundary::Periodic => {
                let mut c: Vec<Complex64> = u.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                self.periodic_pass(&mut c, &*self.fwd);
                Spectrum::Periodic(c)
            }
            Boundary::Dirichlet => {
                let mut c = u.to_vec();
                for axis in 0..self.spec.d {
                    self.sine_axis(&mut c, axis, true);
                }
                Spectrum::Sine(c)
            }
        }
    }

    pub fn inverse(&self, s: Spectrum) -> Vec<f64> {
        match s {
            Spectrum::Periodic(mut c) => {
                self.periodic_pass(&mut c, &*self.inv);
                let norm = 1.0 / self.len() as f64;
                c.into_iter().map(|z| z.re * norm).collect()
            }
            Spectrum::Sine(mut c) => {
                for axis in 0..self.spec.d {
                    self.sine_axis(&mut c, axis, false);
                }
                c
            }
        }
    }

    /// `F^{-1}[f(eig) F u]`.
    pub fn apply_multiplier(&self, u: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut s = self.forward(u);
        s.scale_by(|k| f(self.eig[k]));
        self.inverse(s)
    }

    /// Spectral `∂u/∂x_axis` on a periodic box (Nyquist mode dropped).
    pub fn derivative(&self, u: &[f64], axis: usize) -> Vec<f64> {
        assert_eq!(self.spec.boundary, Boundary::Periodic);
        let n = self.spec.n;
        let stride = n.pow((self.spec.d - 1 - axis) as u32);
        let mut s = self.forward(u);
        if let Spectrum::Periodic(c) = &mut s {
            for (idx, z) in c.iter_mut().enumerate() {
                let i = (idx / stride) % n;
                let k = if i < n / 2 {
                    i as f64
                } else if i == n / 2 {
                    0.0
                } else {
                    i as f64 - n as f64
                };
                let xi = 2.0 * std::f64::consts::PI * k / self.spec.length;
                *z *= Complex64::new(0.0, xi);
            }
        }
        self.inverse(s)
    }

    /// `Σ_k w_k f(eig_k) |û_k|²`, i.e. `⟨f(-Δ) u, u⟩₂`.
    pub fn quadratic_form(&self, u: &[f64], f: impl Fn(f64) -> f64) -> f64 {
        let s = self.forward(u);
        self.weighted_power(&s, f)
    }

    /// `⟨f(-Δ) u, v⟩₂`.
    pub fn bilinear_form(&self, u: &[f64], v: &[f64], f: impl Fn(f64) -> f64) -> f64 {
        let a = self.forward(u);
        let b = self.forward(v);
        self.weighted_cross(&a, &b, f)
    }

    fn periodic_pass(&self, data: &mut [Complex64], plan: &dyn Fft<f64>) {
        let n = self.spec.n;
        let d = self.spec.d;
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        let mut line = vec![Complex64::default(); n * n.pow(d as u32 - 1)];
        for axis in 0..d {
            let stride = n.pow((d - 1 - axis) as u32);
            if stride == 1 {
                plan.process_with_scratch(data, &mut scratch);
                continue;
            }
            gather_lines(data, &mut line, n, stride);
            plan.process_with_scratch(&mut line, &mut scratch);
            scatter_lines(&line, data, n, stride);
        }
    }

    /// One axis of the separable sine transform via a length-2N complex FFT of the
    /// odd extension. Forward yields raw sums `S_k`; inverse includes the
    /// normalization `c_k` (2/N, or 1/N for `k = N`).
    fn sine_axis(&self, data: &mut [f64], axis: usize, forward: bool) {
        let n = self.spec.n;
        let d = self.spec.d;
        let stride = n.pow((d - 1 - axis) as u32);
        let lines = self.len() / n;
        let m = 2 * n;
        let mut buf = vec![Complex64::default(); lines * m];
        for (l, chunk) in buf.chunks_mut(m).enumerate() {
            let base = line_base(l, n, stride);
            if forward {
                for j in 0..n {
                    let v = data[base + j * stride];
                    chunk[j] = Complex64::new(v, 0.0);
                    chunk[m - 1 - j] = Complex64::new(-v, 0.0);
                }
            } else {
                chunk[0] = Complex64::default();
                for k in 1..=n {
                    let c = if k < n { 2.0 / n as f64 } else { 1.0 / n as f64 };
                    chunk[k] = self.twiddle[k] * (c * data[base + (k - 1) * stride]);
                }
                for z in chunk[n + 1..].iter_mut() {
                    *z = Complex64::default();
                }
            }
        }
        let plan = if forward { &self.fwd } else { &self.inv };
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        plan.process_with_scratch(&mut buf, &mut scratch);
        for (l, chunk) in buf.chunks(m).enumerate() {
            let base = line_base(l, n, stride);
            if forward {
                for k in 1..=n {
                    // S_k = Re(Y_k e^{-iθ_k} i/2)
                    let z = chunk[k] * self.twiddle[k].conj();
                    data[base + (k - 1) * stride] = -0.5 * z.im;
                }
            } else {
                for j in 0..n {
                    data[base + j * stride] = chunk[j].im;
                }
            }
        }
    }
}

fn line_base(l: usize, n: usize, stride: usize) -> usize {
    (l / stride) * n * stride + l % stride
}

fn gather_lines(data: &[Complex64], line: &mut [Complex64], n: usize, stride: usize) {
    for (l, chunk) in line.chunks_mut(n).enumerate() {
        let base = line_base(l, n, stride);
        for (j, z) in chunk.iter_mut().enumerate() {
            *z = data[base + j * stride];
        }
    }
}

fn scatter_lines(line: &[Complex64], data: &mut [Complex64], n: usize, stride: usize) {
    for (l, chunk) in line.chunks(n).enumerate() {
        let base = line_base(l, n, stride);
        for (j, z) in chunk.iter().enumerate() {
            data[base + j * stride] = *z;
        }
    }
}

/// A real grid function on a domain.
#[derive(Clone, Debug)]
pub struct Field {
    domain: DomainRef,
    values: Vec<f64>,
}

impl Field {
    pub fn new(domain: DomainRef, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(Error::DomainMismatch);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite field value at node {i}")));
        }
        Ok(Field { domain, values })
    }

    pub(crate) fn from_raw(domain: DomainRef, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), domain.len());
        Field { domain, values }
    }

    pub fn zeros(domain: DomainRef) -> Self {
        let n = domain.len();
        Field {
            domain,
            values: vec![0.0; n],
        }
    }

    /// Samples `f` at the nodes.
    pub fn from_fn(domain: DomainRef, f: impl Fn([f64; 3]) -> f64) -> Self {
        let coords = domain.axis_coordinates();
        let values = (0..domain.len()).map(|i| f(domain.node(i, &coords))).collect();
        Field { domain, values }
    }

    pub fn domain(&self) -> &DomainRef {
        &self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn check_compatible(&self, other: &Field) -> Result<()> {
        if Arc::ptr_eq(&self.domain, &other.domain) || self.domain.spec == other.domain.spec {
            Ok(())
        } else {
            Err(Error::DomainMismatch)
        }
    }

    pub fn scaled(&self, c: f64) -> Field {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field::from_raw(self.domain.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.check_compatible(other)?;
        Ok(Field::from_raw(
            self.domain.clone(),
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Field) -> Result<Field> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `∫ u` by nodal quadrature.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.domain.cell_volume()
    }
}

/// Spectral Laplacian.
pub fn laplacian(u: &Field) -> Field {
    let v = u.domain.apply_multiplier(&u.values, |e| -e);
    Field::from_raw(u.domain.clone(), v)
}

/// Grid average.
pub fn mean(u: &Field) -> f64 {
    u.values.iter().sum::<f64>() / u.values.len() as f64
}

fn require_mean_zero(u: &Field) -> Result<()> {
    let m = mean(u);
    if m.abs() > 1e-12 * u.sup_norm() {
        Err(Error::SingularMode { mean: m })
    } else {
        Ok(())
    }
}

/// Effective shift for `(α - Δ)^{-1}` under the zero-mode policy, and whether the
/// zero mode is dropped (input must then be mean-zero).
fn resolve_shift(domain: &Domain, alpha: f64) -> (f64, bool) {
    if alpha > 0.0 {
        return (alpha, false);
    }
    match (domain.spec.boundary, domain.spec.zero_mode) {
        (Boundary::Dirichlet, _) => (0.0, false),
        (Boundary::Periodic, ZeroMode::Shift { eps0 }) => (eps0, false),
        (Boundary::Periodic, ZeroMode::Exclude) => (0.0, true),
    }
}

fn inverse_symbol(shift: f64) -> impl Fn(f64) -> f64 {
    move |e| {
        let s = shift + e;
        if s > 0.0 {
            1.0 / s
        } else {
            0.0
        }
    }
}

/// `(α - Δ)^{-1} u`.
pub fn inv_shifted_laplacian(u: &Field, alpha: f64) -> Result<Field> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter("shift α must be finite and >= 0".into()));
    }
    let (shift, drop_zero) = resolve_shift(&u.domain, alpha);
    if drop_zero {
        require_mean_zero(u)?;
    }
    let v = u.domain.apply_multiplier(&u.values, inverse_symbol(shift));
    Ok(Field::from_raw(u.domain.clone(), v))
}

/// `(α - Δ) u`.
pub fn shifted_laplacian(u: &Field, alpha: f64) -> Field {
    let v = u.domain.apply_multiplier(&u.values, |e| alpha + e);
    Field::from_raw(u.domain.clone(), v)
}

/// `‖u‖₋₁ = ⟨(-Δ)^{-1} u, u⟩^{1/2}`.
pub fn hminus1_norm(u: &Field) -> Result<f64> {
    let (shift, drop_zero) = resolve_shift(&u.domain, 0.0);
    if drop_zero {
        require_mean_zero(u)?;
    }
    Ok(u.domain
        .quadratic_form(&u.values, inverse_symbol(shift))
        .max(0.0)
        .sqrt())
}

/// `‖u‖₋₁` of the fluctuation part; coincides with [`hminus1_norm`] on
/// admissible inputs and never errors.
pub fn hminus1_norm_mean_free(u: &Field) -> f64 {
    let (shift, _) = resolve_shift(&u.domain, 0.0);
    u.domain
        .quadratic_form(&u.values, inverse_symbol(shift))
        .max(0.0)
        .sqrt()
}

/// `⟨(-Δ)^{-1} u, v⟩`.
pub fn hminus1_inner(u: &Field, v: &Field) -> Result<f64> {
    u.check_compatible(v)?;
    let (shift, drop_zero) = resolve_shift(&u.domain, 0.0);
    if drop_zero {
        require_mean_zero(u)?;
        require_mean_zero(v)?;
    }
    Ok(u.domain
        .bilinear_form(&u.values, &v.values, inverse_symbol(shift)))
}

/// `|u|₋₁,ν = ⟨u, (ν - Δ)^{-1} u⟩^{1/2}`.
pub fn hminus1_nu_norm(u: &Field, nu: f64) -> Result<f64> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::InvalidParameter("ν must be > 0".into()));
    }
    Ok(u.domain
        .quadratic_form(&u.values, |e| 1.0 / (nu + e))
        .max(0.0)
        .sqrt())
}

/// `(‖u‖₋₁, |u|₋₁,ν)` from a single transform; the first is taken mean-free as
/// in [`hminus1_norm_mean_free`], and the second falls back to it when `ν = 0`.
pub fn hminus1_pair(u: &Field, nu: f64) -> (f64, f64) {
    let (shift, _) = resolve_shift(&u.domain, 0.0);
    let s = u.domain.forward(&u.values);
    let a = u.domain.weighted_power(&s, inverse_symbol(shift)).max(0.0).sqrt();
    let b = if nu > 0.0 {
        u.domain.weighted_power(&s, |e| 1.0 / (nu + e)).max(0.0).sqrt()
    } else {
        a
    };
    (a, b)
}

/// `‖u‖₁ = (Σ |ξ|² |û|²)^{1/2}`.
pub fn h1_seminorm(u: &Field) -> f64 {
    u.domain.quadratic_form(&u.values, |e| e).max(0.0).sqrt()
}

/// `|u|_p` by nodal quadrature.
pub fn lp_norm(u: &Field, p: f64) -> f64 {
    let vol = u.domain.cell_volume();
    if p == 2.0 {
        return (vol * u.values.iter().map(|v| v * v).sum::<f64>()).sqrt();
    }
    (vol * u.values.iter().map(|v| v.abs().powf(p)).sum::<f64>()).powf(1.0 / p)
}

pub fn l2_norm(u: &Field) -> f64 {
    lp_norm(u, 2.0)
}

/// Result of the embedding-constant search.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingConstant {
    /// `γ = 1 / quotient`.
    pub gamma: f64,
    /// Best achieved `‖u‖₋₁ / |u|_{m+1}` (a lower bound for the discrete supremum).
    pub quotient: f64,
    pub m: f64,
    pub starts: usize,
    pub iterations: usize,
    /// Whether the best start met the stagnation criterion.
    pub converged: bool,
    #[serde(skip)]
    pub maximizer: Option<Vec<f64>>,
}

pub const EMBEDDING_STARTS: usize = 8;
pub const EMBEDDING_STAGNATION: f64 = 1e-8;
pub const EMBEDDING_BUDGET: usize = 20_000;

/// Embedding constant `γ` with `γ^{-1} = sup ‖u‖₋₁ / |u|_{m+1}` over grid functions.
///
/// Maximizes the convex functional `½‖u‖₋₁²` over the `L^{m+1}` unit sphere by
/// the dual power iteration `u ← J_q((-Δ)^{-1} u)`, where `J_q` is the duality
/// map of `L^q`, `q = (m+1)/m`. Each step maximizes the linearization over the
/// sphere, so the objective is monotone.
pub fn embedding_constant(domain: &DomainRef, m: f64, seed: u64) -> Result<EmbeddingConstant> {
    embedding_constant_with(domain, m, seed, EMBEDDING_STARTS, EMBEDDING_BUDGET)
}

pub fn embedding_constant_with(
    domain: &DomainRef,
    m: f64,
    seed: u64,
    starts: usize,
    budget: usize,
) -> Result<EmbeddingConstant> {
    if !(m > 0.0 && m <= 1.0) {
        return Err(Error::DomainError(format!("embedding exponent m = {m} outside (0, 1]")));
    }
    let p = m + 1.0;
    let q = p / m;
    let (shift, drop_zero) = resolve_shift(domain, 0.0);
    let inv = inverse_symbol(shift);
    let vol = domain.cell_volume();
    let lp = |u: &[f64]| (vol * u.iter().map(|v| v.abs().powf(p)).sum::<f64>()).powf(1.0 / p);
    let project = |u: &mut Vec<f64>| {
        if drop_zero {
            let mu = u.iter().sum::<f64>() / u.len() as f64;
            u.iter_mut().for_each(|v| *v -= mu);
        }
        let norm = lp(u);
        u.iter_mut().for_each(|v| *v /= norm);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut total_iters = 0;
    let mut any_converged = false;
    for _ in 0..starts.max(1) {
        let mut u: Vec<f64> = (0..domain.len())
            .map(|_| uniform(&mut rng) + 0.25 * (uniform(&mut rng) - 0.5))
            .collect();
        project(&mut u);
        let mut value = 0.0;
        let mut converged = false;
        for _ in 0..budget {
            total_iters += 1;
            let mut s = domain.forward(&u);
            let energy = domain.weighted_power(&s, &inv);
            s.scale_by(|k| inv(domain.eig[k]));
            let v = domain.inverse(s);
            let next_value = energy.max(0.0).sqrt();
            if value > 0.0 && (next_value - value).abs() <= EMBEDDING_STAGNATION * next_value {
                value = value.max(next_value);
                converged = true;
                break;
            }
            value = value.max(next_value);
            let mut next: Vec<f64> = v.iter().map(|&x| x.abs().powf(q - 1.0) * x.signum()).collect();
            project(&mut next);
            u = next;
        }
        any_converged |= converged;
        let q_val = value;
        if best.as_ref().is_none_or(|(b, _)| q_val > *b) {
            best = Some((q_val, u));
        }
    }
    if !any_converged {
        return Err(Error::NonConvergence {
            iterations: total_iters,
            residual: f64::NAN,
        });
    }
    let (quotient, maximizer) = best.expect("at least one start");
    Ok(EmbeddingConstant {
        gamma: 1.0 / quotient,
        quotient,
        m,
        starts: starts.max(1),
        iterations: total_iters,
        converged: any_converged,
        maximizer: Some(maximizer),
    })
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn dom(d: usize, l: f64, n: usize, b: Boundary) -> DomainRef {
        Domain::new(DomainSpec {
            d,
            length: l,
            n,
            boundary: b,
            zero_mode: ZeroMode::Exclude,
        })
        .unwrap()
    }

    fn random_field(domain: &DomainRef, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..domain.len()).map(|_| uniform(&mut rng) - 0.5).collect();
        Field::new(domain.clone(), v).unwrap()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn spec_validation() {
        let mut s = DomainSpec {
            d: 1,
            length: 1.0,
            n: 12,
            boundary: Boundary::Periodic,
            zero_mode: ZeroMode::Exclude,
        };
        assert!(s.validate().is_err());
        s.n = 4;
        assert!(s.validate().is_err());
        s.n = 16;
        assert!(s.validate().is_ok());
        s.d = 4;
        assert!(s.validate().is_err());
    }

    #[test]
    fn transform_roundtrip_and_plancherel() {
        for &b in &[Boundary::Periodic, Boundary::Dirichlet] {
            for d in 1..=3 {
                let domain = dom(d, 2.3, 8, b);
                let u = random_field(&domain, 7 + d as u64);
                let back = domain.inverse(domain.forward(u.values()));
                assert!(rel(&back, u.values()) < 1e-12, "{b:?} d={d}");
                let l2sq = l2_norm(&u).powi(2);
                let spec = domain.quadratic_form(u.values(), |_| 1.0);
                assert!((l2sq - spec).abs() < 1e-12 * l2sq, "{b:?} d={d}");
            }
        }
    }

    #[test]
    fn laplacian_eigenfunctions() {
        let l = 1.7;
        let p = dom(1, l, 64, Boundary::Periodic);
        let u = Field::from_fn(p.clone(), |x| (2.0 * PI * x[0] / l).sin());
        let lap = laplacian(&u);
        let expect = u.scaled(-(2.0 * PI / l).powi(2));
        assert!(rel(lap.values(), expect.values()) < 1e-12);

        let c = Field::from_fn(p, |_| 3.0);
        assert!(laplacian(&c).sup_norm() < 1e-12);

        let dd = dom(1, l, 64, Boundary::Dirichlet);
        let u = Field::from_fn(dd, |x| (PI * x[0] / l).sin());
        let lap = laplacian(&u);
        let expect = u.scaled(-(PI / l).powi(2));
        assert!(rel(lap.values(), expect.values()) < 1e-12);
    }

    #[test]
    fn inverse_shifted_roundtrip() {
        for &b in &[Boundary::Periodic, Boundary::Dirichlet] {
            let domain = dom(2, 3.0, 16, b);
            let u = random_field(&domain, 11);
            let v = inv_shifted_laplacian(&u, 1.0).unwrap();
            let back = shifted_laplacian(&v, 1.0);
            assert!(rel(back.values(), u.values()) < 1e-12);
            let z = inv_shifted_laplacian(&Field::zeros(domain.clone()), 0.5).unwrap();
            assert_eq!(z.sup_norm(), 0.0);
        }
        // eigenfunction with eigenvalue μ → u/(1+μ)
        let dd = dom(1, PI, 32, Boundary::Dirichlet);
        let u = Field::from_fn(dd, |x| (3.0 * x[0]).sin());
        let v = inv_shifted_laplacian(&u, 1.0).unwrap();
        assert!(rel(v.values(), u.scaled(1.0 / 10.0).values()) < 1e-12);
    }

    #[test]
    fn singular_mode_rejected() {
        let p = dom(1, 1.0, 16, Boundary::Periodic);
        let c = Field::from_fn(p.clone(), |x| 1.0 + x[0]);
        assert!(matches!(
            inv_shifted_laplacian(&c, 0.0),
            Err(Error::SingularMode { .. })
        ));
        assert!(matches!(hminus1_norm(&c), Err(Error::SingularMode { .. })));
        let zero_mean = Field::from_fn(p, |x| (2.0 * PI * x[0]).cos());
        assert!(hminus1_norm(&zero_mean).is_ok());
    }

    #[test]
    fn hminus1_examples() {
        let dd = dom(1, PI, 64, Boundary::Dirichlet);
        assert_eq!(hminus1_norm(&Field::zeros(dd.clone())).unwrap(), 0.0);
        let u = Field::from_fn(dd.clone(), |x| x[0].sin());
        assert!((hminus1_norm(&u).unwrap() - l2_norm(&u)).abs() < 1e-12);
        let r = random_field(&dd, 3);
        let c = -2.7;
        let a = hminus1_norm(&r.scaled(c)).unwrap();
        assert!((a - c.abs() * hminus1_norm(&r).unwrap()).abs() < 1e-12 * a);
    }

    #[test]
    fn hminus1_nu_examples() {
        let dd = dom(1, PI, 64, Boundary::Dirichlet);
        let u = Field::from_fn(dd.clone(), |x| x[0].sin() * (2.0 / PI).sqrt());
        assert!((l2_norm(&u) - 1.0).abs() < 1e-12);
        let nu = 0.3;
        assert!((hminus1_nu_norm(&u, nu).unwrap() - (nu + 1.0f64).powf(-0.5)).abs() < 1e-12);
        let r = random_field(&dd, 5);
        let a = hminus1_nu_norm(&r, 0.1).unwrap();
        let b = hminus1_nu_norm(&r, 0.2).unwrap();
        assert!(a >= b);
        assert!(a <= hminus1_norm(&r).unwrap());
        assert!(a <= l2_norm(&r) / 0.1f64.sqrt());
        let near = hminus1_nu_norm(&r, 1e-12).unwrap();
        assert!((near - hminus1_norm(&r).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn h1_and_lp_examples() {
        let p = dom(1, 1.0, 64, Boundary::Periodic);
        assert!(h1_seminorm(&Field::from_fn(p.clone(), |_| 2.0)) < 1e-12);
        let u = Field::from_fn(p.clone(), |x| (2.0 * PI * x[0]).sin());
        assert!((h1_seminorm(&u) - 2.0 * PI * l2_norm(&u)).abs() < 1e-12);
        // indicator of a quarter of the grid
        let f = 0.25;
        let ind = Field::from_fn(p, |x| if x[0] < f { 1.0 } else { 0.0 });
        for &pp in &[1.0, 1.5, 2.0, 3.0] {
            assert!((lp_norm(&ind, pp) - f.powf(1.0 / pp)).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_linear_case_is_first_eigenvalue() {
        for &l in &[PI, 2.0] {
            let dd = dom(1, l, 64, Boundary::Dirichlet);
            let e = embedding_constant(&dd, 1.0, 1).unwrap();
            assert!((e.gamma - PI / l).abs() < 1e-6, "L={l}: γ = {}", e.gamma);
        }
    }

    #[test]
    fn embedding_inequality_holds_on_random_fields() {
        let dd = dom(1, PI, 64, Boundary::Dirichlet);
        let m = 0.5;
        let e = embedding_constant(&dd, m, 2).unwrap();
        let maxi = Field::new(dd.clone(), e.maximizer.clone().unwrap()).unwrap();
        let qm = hminus1_norm(&maxi).unwrap() / lp_norm(&maxi, m + 1.0);
        assert!((qm - e.quotient).abs() < 1e-9 * e.quotient);
        for s in 0..50 {
            let r = random_field(&dd, 100 + s);
            assert!(hminus1_norm(&r).unwrap() <= lp_norm(&r, m + 1.0) / e.gamma * (1.0 + 1e-9));
        }
    }

    #[test]
    fn duality_inequality() {
        let dd = dom(2, 2.0, 16, Boundary::Dirichlet);
        for s in 0..20 {
            let u = random_field(&dd, s);
            let v = random_field(&dd, 1000 + s);
            let ip = hminus1_inner(&u, &v).unwrap();
            assert!(ip.abs() <= hminus1_norm(&u).unwrap() * hminus1_norm(&v).unwrap() * (1.0 + 1e-12));
        }
    }
}
