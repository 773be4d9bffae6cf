//! Truncated multiplicative noise `W(t) = Σ_k μ_k e_k β_k(t)`.
//!
//! Brownian increments come from a counter-based generator: the draw for
//! `(seed_base, path, step, mode)` is a fixed position in a ChaCha stream, so
//! any increment can be recomputed without replaying the path and runs at
//! different `λ`, `ν` or `Δt` share their noise exactly.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{self, Boundary, DomainRef, Field};

/// Analytic spatial profile of one noise mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModeShape {
    Constant {
        c: f64,
    },
    /// `amplitude · cos(k · x)`
    Cosine {
        wave_vector: Vec<f64>,
        amplitude: f64,
    },
    /// `amplitude · sin(k · x)`
    Sine {
        wave_vector: Vec<f64>,
        amplitude: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseMode {
    pub mu: f64,
    pub e: ModeShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub modes: Vec<NoiseMode>,
    #[serde(default)]
    pub seed_base: u64,
}

impl ModeShape {
    fn wave(&self) -> Option<(&[f64], f64)> {
        match self {
            ModeShape::Constant { .. } => None,
            ModeShape::Cosine {
                wave_vector,
                amplitude,
            }
            | ModeShape::Sine {
                wave_vector,
                amplitude,
            } => Some((wave_vector, *amplitude)),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            ModeShape::Constant { .. } => true,
            _ => self.wave().is_some_and(|(k, _)| k.iter().all(|&v| v == 0.0)),
        }
    }

    /// Value and gradient at `x`.
    pub fn value_and_gradient(&self, x: &[f64; 3], d: usize) -> (f64, [f64; 3]) {
        match self {
            ModeShape::Constant { c } => (*c, [0.0; 3]),
            ModeShape::Cosine {
                wave_vector,
                amplitude,
            } => {
                let phase: f64 = (0..d).map(|i| wave_vector[i] * x[i]).sum();
                let mut g = [0.0; 3];
                for i in 0..d {
                    g[i] = -amplitude * wave_vector[i] * phase.sin();
                }
                (amplitude * phase.cos(), g)
            }
            ModeShape::Sine {
                wave_vector,
                amplitude,
            } => {
                let phase: f64 = (0..d).map(|i| wave_vector[i] * x[i]).sum();
                let mut g = [0.0; 3];
                for i in 0..d {
                    g[i] = amplitude * wave_vector[i] * phase.cos();
                }
                (amplitude * phase.sin(), g)
            }
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec::default()
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// First `k` modes, same seed.
    pub fn truncated(&self, k: usize) -> NoiseSpec {
        NoiseSpec {
            modes: self.modes.iter().take(k).cloned().collect(),
            seed_base: self.seed_base,
        }
    }

    pub fn is_silent(&self) -> bool {
        self.modes.iter().all(|m| m.mu == 0.0)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.modes.len() > u32::MAX as usize {
            return Err(Error::InvalidParameter("at most 2^32 noise modes".into()));
        }
        for (i, m) in self.modes.iter().enumerate() {
            if !m.mu.is_finite() {
                return Err(Error::InvalidParameter(format!("noise mode {i}: mu not finite")));
            }
            if let Some((k, a)) = m.e.wave() {
                if k.len() != d {
                    return Err(Error::InvalidParameter(format!(
                        "noise mode {i}: wave vector has {} components, domain has d = {d}",
                        k.len()
                    )));
                }
                if !a.is_finite() || k.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidParameter(format!("noise mode {i}: non-finite shape")));
                }
            }
        }
        Ok(())
    }

    /// Quadratic variation rate `Σ μ_k² c_k²` of `W` for spatially constant modes.
    pub fn constant_variance_rate(&self) -> Result<f64> {
        let mut rate = 0.0;
        for (i, m) in self.modes.iter().enumerate() {
            let c = match &m.e {
                ModeShape::Constant { c } => *c,
                shape if shape.is_constant() => match shape {
                    ModeShape::Cosine { amplitude, .. } => *amplitude,
                    _ => 0.0,
                },
                _ => return Err(Error::RescalingInapplicable(i)),
            };
            rate += (m.mu * c).powi(2);
        }
        Ok(rate)
    }

    /// Grid evaluation of all modes.
    pub fn evaluate(&self, domain: &DomainRef) -> Result<EvaluatedNoise> {
        let d = domain.spec().d;
        self.validate(d)?;
        let coords = domain.axis_coordinates();
        let vol = domain.cell_volume();
        let mut shapes = Vec::with_capacity(self.len());
        let mut stats = Vec::with_capacity(self.len());
        for m in &self.modes {
            let mut vals = Vec::with_capacity(domain.len());
            let mut sup = 0.0f64;
            let mut grad_sup = 0.0f64;
            let mut grad_ld = 0.0f64;
            for i in 0..domain.len() {
                let x = domain.node(i, &coords);
                let (v, g) = m.e.value_and_gradient(&x, d);
                let gn = g.iter().map(|c| c * c).sum::<f64>().sqrt();
                sup = sup.max(v.abs());
                grad_sup = grad_sup.max(gn);
                grad_ld += vol * gn.powi(d as i32);
                vals.push(v);
            }
            shapes.push(vals);
            stats.push(ModeStats {
                sup,
                grad_sup,
                grad_ld: grad_ld.powf(1.0 / d as f64),
            });
        }
        Ok(EvaluatedNoise {
            domain: domain.clone(),
            mus: self.modes.iter().map(|m| m.mu).collect(),
            shapes,
            stats,
        })
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModeStats {
    /// `|e|_∞` over the grid.
    pub sup: f64,
    /// `|∇e|_∞` over the grid.
    pub grad_sup: f64,
    /// `|∇e|_d` by quadrature.
    pub grad_ld: f64,
}

/// Noise modes sampled on a grid, ready for stepping.
#[derive(Clone, Debug)]
pub struct EvaluatedNoise {
    domain: DomainRef,
    mus: Vec<f64>,
    shapes: Vec<Vec<f64>>,
    stats: Vec<ModeStats>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct NoiseConstants {
    /// `36 Σ μ_k² (|∇e_k|_∞² + |e_k|_∞² + 1)`.
    pub c_infinity_sq: f64,
    /// `Σ μ_k² (|e_k|_∞² + |∇e_k|_d² + 1)`.
    pub jj_sum: f64,
}

impl EvaluatedNoise {
    pub fn len(&self) -> usize {
        self.mus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mus.is_empty()
    }

    pub fn is_silent(&self) -> bool {
        self.mus.iter().all(|&m| m == 0.0)
    }

    pub fn mus(&self) -> &[f64] {
        &self.mus
    }

    pub fn stats(&self) -> &[ModeStats] {
        &self.stats
    }

    pub fn mode_field(&self, k: usize) -> Field {
        Field::from_raw(self.domain.clone(), self.shapes[k].clone())
    }

    pub fn constants(&self) -> NoiseConstants {
        let mut c_inf = 0.0;
        let mut jj = 0.0;
        for (mu, s) in self.mus.iter().zip(&self.stats) {
            let mu2 = mu * mu;
            c_inf += mu2 * (s.grad_sup.powi(2) + s.sup.powi(2) + 1.0);
            jj += mu2 * (s.sup.powi(2) + s.grad_ld.powi(2) + 1.0);
        }
        NoiseConstants {
            c_infinity_sq: 36.0 * c_inf,
            jj_sum: jj,
        }
    }

    /// Pointwise multiplier `Σ_k μ_k e_k Δβ_k`.
    pub fn multiplier(&self, increments: &[f64]) -> Vec<f64> {
        assert_eq!(increments.len(), self.len());
        let mut out = vec![0.0; self.domain.len()];
        for ((mu, shape), db) in self.mus.iter().zip(&self.shapes).zip(increments) {
            let c = mu * db;
            if c == 0.0 {
                continue;
            }
            for (o, e) in out.iter_mut().zip(shape) {
                *o += c * e;
            }
        }
        out
    }

    /// One Euler–Maruyama noise contribution `Σ_k μ_k (e_k ⊙ X) Δβ_k`.
    pub fn apply_increment(&self, x: &Field, increments: &[f64]) -> Result<Field> {
        if x.values().len() != self.domain.len() {
            return Err(Error::DomainMismatch);
        }
        let m = self.multiplier(increments);
        Ok(Field::from_raw(
            x.domain().clone(),
            x.values().iter().zip(&m).map(|(a, b)| a * b).collect(),
        ))
    }

    /// Gram matrix of the modes in the discrete `H^{-1}` inner product (zero mode
    /// dropped on periodic boxes).
    pub fn gram_matrix(&self) -> Vec<Vec<f64>> {
        let k = self.len();
        let domain = &self.domain;
        let symbol = |e: f64| if e > 0.0 { 1.0 / e } else { 0.0 };
        let mut g = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i..k {
                let v = domain.bilinear_form(&self.shapes[i], &self.shapes[j], symbol);
                g[i][j] = v;
                g[j][i] = v;
            }
        }
        g
    }
}

/// Counter-keyed Gaussian source for one path.
#[derive(Clone, Debug)]
pub struct PathIncrements {
    rng: ChaCha8Rng,
    modes: usize,
}

impl PathIncrements {
    pub fn new(seed_base: u64, path: u64, modes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_base);
        rng.set_stream(path);
        PathIncrements { rng, modes }
    }

    /// Standard normal keyed by `(step, mode)` at the base resolution.
    pub fn standard_normal(&mut self, step: u64, mode: usize) -> f64 {
        // Four 32-bit words per draw; the slot does not depend on the number of
        // modes, so nested noise specs share their common draws.
        let slot = ((step as u128) << 32) | mode as u128;
        self.rng.set_word_pos(slot * 4);
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Increments `Δβ_k`, `k < K`, for a step of length `dt` that spans `stride`
    /// base-resolution steps. The increment is the sum of the `stride` base draws,
    /// so coarse and fine time grids see the same Brownian path.
    pub fn increments(&mut self, step: u64, dt: f64, stride: u64) -> Vec<f64> {
        let scale = (dt / stride as f64).sqrt();
        (0..self.modes)
            .map(|k| {
                let s: f64 = (0..stride)
                    .map(|j| self.standard_normal(step * stride + j, k))
                    .sum();
                scale * s
            })
            .collect()
    }
}

/// Report of the discrete `H^{-1}` multiplier bound for one `(e, x)` pair.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MultiplierReport {
    /// `‖x e‖₋₁ / ‖x‖₋₁`.
    pub ratio: f64,
    pub e_sup: f64,
    pub grad_sup: f64,
    pub grad_ld: f64,
    /// `2(|e|_∞ + |∇e|_∞)`.
    pub bound_factor_2: f64,
    /// `|e|_∞ + |∇e|_d`.
    pub lemma_factor: f64,
    /// `ratio / lemma_factor`.
    pub lemma_quotient: f64,
    /// Smallest `C` with `ratio ≤ |e|_∞ + C |∇e|_d` (0 if `∇e = 0`).
    pub implied_c: f64,
    pub violates_factor_2: bool,
}

/// Gradient of a grid function used as a multiplier: spectral on periodic boxes,
/// second-order differences on Dirichlet boxes (the multiplier carries no
/// boundary condition).
pub fn multiplier_gradient(e: &Field) -> Vec<[f64; 3]> {
    let domain = e.domain();
    let spec = domain.spec();
    let (n, d) = (spec.n, spec.d);
    let mut grad = vec![[0.0; 3]; domain.len()];
    match spec.boundary {
        Boundary::Periodic => {
            for axis in 0..d {
                let g = domain.derivative(e.values(), axis);
                for (gi, v) in grad.iter_mut().zip(g) {
                    gi[axis] = v;
                }
            }
        }
        Boundary::Dirichlet => {
            let h = domain.spacing();
            let v = e.values();
            for axis in 0..d {
                let stride = n.pow((d - 1 - axis) as u32);
                for (idx, gi) in grad.iter_mut().enumerate() {
                    let j = (idx / stride) % n;
                    gi[axis] = if j == 0 {
                        (-3.0 * v[idx] + 4.0 * v[idx + stride] - v[idx + 2 * stride]) / (2.0 * h)
                    } else if j == n - 1 {
                        (3.0 * v[idx] - 4.0 * v[idx - stride] + v[idx - 2 * stride]) / (2.0 * h)
                    } else {
                        (v[idx + stride] - v[idx - stride]) / (2.0 * h)
                    };
                }
            }
        }
    }
    grad
}

pub fn multiplier_bound_check(e: &Field, x: &Field) -> Result<MultiplierReport> {
    e.check_compatible(x)?;
    let domain = e.domain();
    let d = domain.spec().d;
    let xe = x.mul(e)?;
    let num = spectral::hminus1_norm(&xe)?;
    let den = spectral::hminus1_norm(x)?;
    let ratio = if den > 0.0 { num / den } else { 0.0 };
    let grad = multiplier_gradient(e);
    let vol = domain.cell_volume();
    let mut grad_sup = 0.0f64;
    let mut grad_ld = 0.0f64;
    for g in &grad {
        let gn = g.iter().map(|c| c * c).sum::<f64>().sqrt();
        grad_sup = grad_sup.max(gn);
        grad_ld += vol * gn.powi(d as i32);
    }
    let grad_ld = grad_ld.powf(1.0 / d as f64);
    let e_sup = e.sup_norm();
    let bound_factor_2 = 2.0 * (e_sup + grad_sup);
    let lemma_factor = e_sup + grad_ld;
    Ok(MultiplierReport {
        ratio,
        e_sup,
        grad_sup,
        grad_ld,
        bound_factor_2,
        lemma_factor,
        lemma_quotient: if lemma_factor > 0.0 { ratio / lemma_factor } else { 0.0 },
        implied_c: if grad_ld > 0.0 {
            ((ratio - e_sup) / grad_ld).max(0.0)
        } else {
            0.0
        },
        violates_factor_2: ratio > bound_factor_2 * (1.0 + 1e-12),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{Domain, DomainSpec, ZeroMode};
    use std::f64::consts::PI;

    fn dirichlet(n: usize) -> DomainRef {
        Domain::new(DomainSpec {
            d: 1,
            length: PI,
            n,
            boundary: Boundary::Dirichlet,
            zero_mode: ZeroMode::Exclude,
        })
        .unwrap()
    }

    fn constant_noise(mu: f64) -> NoiseSpec {
        NoiseSpec {
            modes: vec![NoiseMode {
                mu,
                e: ModeShape::Constant { c: 1.0 },
            }],
            seed_base: 9,
        }
    }

    #[test]
    fn c_infinity_examples() {
        let dom = dirichlet(32);
        let mut silent = constant_noise(0.0);
        silent.modes.push(NoiseMode {
            mu: 0.0,
            e: ModeShape::Cosine {
                wave_vector: vec![2.0],
                amplitude: 1.0,
            },
        });
        assert_eq!(silent.evaluate(&dom).unwrap().constants().c_infinity_sq, 0.0);

        let mu = 0.3;
        let c = constant_noise(mu).evaluate(&dom).unwrap().constants();
        assert!((c.c_infinity_sq - 72.0 * mu * mu).abs() < 1e-14);

        let mut more = constant_noise(mu);
        more.modes.push(NoiseMode {
            mu: 0.1,
            e: ModeShape::Sine {
                wave_vector: vec![1.0],
                amplitude: 0.5,
            },
        });
        let c2 = more.evaluate(&dom).unwrap().constants();
        assert!(c2.c_infinity_sq >= c.c_infinity_sq);
        assert!(c2.jj_sum >= c.jj_sum);
    }

    #[test]
    fn increments_are_keyed() {
        let mut a = PathIncrements::new(5, 3, 2);
        let mut b = PathIncrements::new(5, 3, 2);
        let x = a.standard_normal(17, 1);
        let _ = b.standard_normal(4, 0);
        assert_eq!(x, b.standard_normal(17, 1));
        let mut c = PathIncrements::new(5, 4, 2);
        assert_ne!(x, c.standard_normal(17, 1));
    }

    #[test]
    fn strided_increment_is_sum_of_fine_draws() {
        let mut a = PathIncrements::new(1, 0, 1);
        let dt = 0.04;
        let coarse = a.increments(3, dt, 4)[0];
        let fine: f64 = (12..16).map(|s| a.increments(s, dt / 4.0, 1)[0]).sum();
        assert!((coarse - fine).abs() < 1e-15);
    }

    #[test]
    fn increment_moments() {
        // mean within 4σ of 0 and variance within 1% of Δt over 10⁶ draws
        let n = 1_000_000u64;
        let dt = 0.01;
        let mut src = PathIncrements::new(42, 0, 1);
        let (mut s1, mut s2) = (0.0, 0.0);
        for step in 0..n {
            let x = src.increments(step, dt, 1)[0];
            s1 += x;
            s2 += x * x;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 4.0 * (dt / n as f64).sqrt(), "mean {mean}");
        assert!((var - dt).abs() < 0.01 * dt, "var {var}");
    }

    #[test]
    fn apply_increment_examples() {
        let dom = dirichlet(32);
        let x = Field::from_fn(dom.clone(), |p| p[0].sin());
        let noise = constant_noise(0.7).evaluate(&dom).unwrap();
        assert_eq!(noise.apply_increment(&x, &[0.0]).unwrap().sup_norm(), 0.0);
        let out = noise.apply_increment(&x, &[0.2]).unwrap();
        let expect = x.scaled(0.7 * 0.2);
        for (a, b) in out.values().iter().zip(expect.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn multiplier_check_examples() {
        let dom = dirichlet(64);
        let x = Field::from_fn(dom.clone(), |p| (2.0 * p[0]).sin());
        let one = Field::from_fn(dom.clone(), |_| 1.0);
        let r = multiplier_bound_check(&one, &x).unwrap();
        assert!((r.ratio - 1.0).abs() < 1e-12);
        assert!(r.bound_factor_2 >= 1.0 && r.lemma_factor >= 1.0);
        let c = Field::from_fn(dom, |_| -2.5);
        let r = multiplier_bound_check(&c, &x).unwrap();
        assert!((r.ratio - 2.5).abs() < 1e-12);
    }

    #[test]
    fn gram_matrix_is_symmetric_psd_diagonal() {
        let dom = dirichlet(32);
        let mut n = constant_noise(1.0);
        n.modes.push(NoiseMode {
            mu: 1.0,
            e: ModeShape::Sine {
                wave_vector: vec![1.0],
                amplitude: 1.0,
            },
        });
        let g = n.evaluate(&dom).unwrap().gram_matrix();
        assert_eq!(g[0][1], g[1][0]);
        assert!(g[0][0] > 0.0 && g[1][1] > 0.0);
        assert!(g[0][1].powi(2) <= g[0][0] * g[1][1]);
    }
}
