//! Maximal monotone graphs on the real line and their convex calculus.
//!
//! Every graph satisfies `0 ∈ ψ(0)`. Multivalued points are represented by the
//! closed interval of the maximal monotone fill-in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Iteration budget for scalar root finding.
pub const SCALAR_BUDGET: usize = 200;
/// Mixed absolute/relative residual tolerance for scalar solves.
pub const SCALAR_TOL: f64 = 1e-12;

/// A closed interval `[lo, hi]`; degenerate where the graph is single-valued.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        v >= self.lo - tol && v <= self.hi + tol
    }

    pub fn project(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn is_singleton(&self) -> bool {
        self.lo == self.hi
    }
}

/// Catalog of supported graphs.
///
/// * `power`: `ψ(r) = ρ|r|^{m-1} r`
/// * `heaviside`: `ψ(r) = ρ H(r - r_c) + α r`, filled with `[0, ρ]` at the jump
/// * `lipschitz_tabulated`: piecewise-linear interpolation of nondecreasing samples,
///   extended linearly beyond the table
/// * `linear`: `ψ(r) = a r`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MonotoneGraph {
    Power {
        m: f64,
        rho: f64,
    },
    Heaviside {
        rho: f64,
        #[serde(default)]
        r_c: f64,
        #[serde(default)]
        alpha: f64,
    },
    LipschitzTabulated {
        points: Vec<[f64; 2]>,
    },
    Linear {
        a: f64,
    },
}

/// Coercivity `ψ(r) r ≥ ρ |r|^{m+1}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coercivity {
    pub rho: f64,
    pub m: f64,
}

/// Which hypothesis regimes a graph satisfies; recorded with every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisClaims {
    /// Single-valued, nondecreasing, Lipschitz with `ψ(0) = 0`.
    pub lipschitz: bool,
    /// Maximal monotone with polynomial growth of exponent `m ≥ 1`.
    pub polynomial_growth_m_ge_1: bool,
    /// Growth exponent `m` and constant `C` with `sup|ψ(r)| ≤ C(1 + |r|^m)`.
    pub growth_m: f64,
    pub growth_c: f64,
    pub coercivity: Option<Coercivity>,
    /// Coercive with `m = (d-2)/(d+2)` for the run's dimension.
    pub extinction_exponent_matches_dimension: bool,
}

impl MonotoneGraph {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        match *self {
            MonotoneGraph::Power { m, rho } => {
                if !(m.is_finite() && m > 0.0) {
                    return bad("power graph requires finite m > 0");
                }
                if !(rho.is_finite() && rho > 0.0) {
                    return bad("power graph requires finite rho > 0");
                }
            }
            MonotoneGraph::Heaviside { rho, r_c, alpha } => {
                if !(rho.is_finite() && rho > 0.0) {
                    return bad("heaviside graph requires finite rho > 0");
                }
                if !(r_c.is_finite() && r_c >= 0.0) {
                    return bad("heaviside graph requires r_c >= 0 so that 0 ∈ ψ(0)");
                }
                if !(alpha.is_finite() && alpha >= 0.0) {
                    return bad("heaviside graph requires alpha >= 0");
                }
            }
            MonotoneGraph::LipschitzTabulated { ref points } => {
                if points.len() < 2 {
                    return bad("tabulated graph needs at least two samples");
                }
                for w in points.windows(2) {
                    if !(w[1][0] > w[0][0]) {
                        return bad("tabulated abscissae must be strictly increasing");
                    }
                    if w[1][1] < w[0][1] {
                        return bad("tabulated values must be nondecreasing");
                    }
                }
                if points.iter().flatten().any(|v| !v.is_finite()) {
                    return bad("tabulated samples must be finite");
                }
                if self.table_value(0.0).abs() > 1e-12 {
                    return bad("tabulated graph must satisfy ψ(0) = 0");
                }
            }
            MonotoneGraph::Linear { a } => {
                if !(a.is_finite() && a >= 0.0) {
                    return bad("linear graph requires finite a >= 0");
                }
            }
        }
        Ok(())
    }

    /// The set `ψ(r)` as a closed interval.
    pub fn eval(&self, r: f64) -> Interval {
        match *self {
            MonotoneGraph::Power { m, rho } => Interval::point(rho * r.abs().powf(m) * r.signum0()),
            MonotoneGraph::Heaviside { rho, r_c, alpha } => {
                let lin = alpha * r;
                if r < r_c {
                    Interval::point(lin)
                } else if r > r_c {
                    Interval::point(rho + lin)
                } else {
                    Interval {
                        lo: lin,
                        hi: rho + lin,
                    }
                }
            }
            MonotoneGraph::LipschitzTabulated { .. } => Interval::point(self.table_value(r)),
            MonotoneGraph::Linear { a } => Interval::point(a * r),
        }
    }

    /// Derivative of ψ where it exists; `+∞` at infinite-slope points.
    pub fn slope(&self, r: f64) -> f64 {
        match *self {
            MonotoneGraph::Power { m, rho } => {
                if r == 0.0 {
                    if m < 1.0 {
                        f64::INFINITY
                    } else if m == 1.0 {
                        rho
                    } else {
                        0.0
                    }
                } else {
                    rho * m * r.abs().powf(m - 1.0)
                }
            }
            MonotoneGraph::Heaviside { r_c, alpha, .. } => {
                if r == r_c {
                    f64::INFINITY
                } else {
                    alpha
                }
            }
            MonotoneGraph::LipschitzTabulated { ref points } => {
                let i = segment_index(points, r);
                (points[i + 1][1] - points[i][1]) / (points[i + 1][0] - points[i][0])
            }
            MonotoneGraph::Linear { a } => a,
        }
    }

    /// Lipschitz constant for single-valued Lipschitz graphs.
    pub fn lipschitz_constant(&self) -> Option<f64> {
        match *self {
            MonotoneGraph::Linear { a } => Some(a),
            MonotoneGraph::LipschitzTabulated { ref points } => Some(
                points
                    .windows(2)
                    .map(|w| (w[1][1] - w[0][1]) / (w[1][0] - w[0][0]))
                    .fold(0.0, f64::max),
            ),
            MonotoneGraph::Power { m, rho } if m == 1.0 => Some(rho),
            _ => None,
        }
    }

    pub fn is_lipschitz(&self) -> bool {
        self.lipschitz_constant().is_some()
    }

    pub fn growth_exponent(&self) -> f64 {
        match *self {
            MonotoneGraph::Power { m, .. } => m,
            _ => 1.0,
        }
    }

    /// Constant `C` in `sup |ψ(r)| ≤ C (1 + |r|^m)`.
    pub fn growth_constant(&self) -> f64 {
        match *self {
            MonotoneGraph::Power { rho, .. } => rho,
            MonotoneGraph::Heaviside { rho, alpha, .. } => rho.max(alpha),
            MonotoneGraph::LipschitzTabulated { .. } => self.lipschitz_constant().unwrap_or(0.0),
            MonotoneGraph::Linear { a } => a,
        }
    }

    /// Coercivity `inf{η r : η ∈ ψ(r)} ≥ ρ|r|^{m+1}`, if it holds.
    pub fn coercivity(&self) -> Option<Coercivity> {
        match *self {
            MonotoneGraph::Power { m, rho } => Some(Coercivity { rho, m }),
            MonotoneGraph::Heaviside { alpha, .. } if alpha > 0.0 => {
                Some(Coercivity { rho: alpha, m: 1.0 })
            }
            MonotoneGraph::Linear { a } if a > 0.0 => Some(Coercivity { rho: a, m: 1.0 }),
            MonotoneGraph::LipschitzTabulated { ref points } => {
                // ψ(r)/r is minimized over the breakpoints and the linear tails.
                let mut inf = f64::INFINITY;
                for p in points {
                    if p[0] != 0.0 {
                        inf = inf.min(p[1] / p[0]);
                    }
                }
                inf = inf.min(self.slope(f64::MAX)).min(self.slope(f64::MIN));
                (inf > 0.0).then_some(Coercivity { rho: inf, m: 1.0 })
            }
            _ => None,
        }
    }

    pub fn hypotheses(&self, d: usize) -> HypothesisClaims {
        let m = self.growth_exponent();
        let coercivity = self.coercivity();
        let critical = if d >= 3 {
            Some((d as f64 - 2.0) / (d as f64 + 2.0))
        } else {
            None
        };
        HypothesisClaims {
            lipschitz: self.is_lipschitz(),
            polynomial_growth_m_ge_1: m >= 1.0,
            growth_m: m,
            growth_c: self.growth_constant(),
            coercivity,
            extinction_exponent_matches_dimension: match (coercivity, critical) {
                (Some(c), Some(mc)) => (c.m - mc).abs() < 1e-12,
                _ => false,
            },
        }
    }

    /// Resolvent `(1 + λψ)^{-1}(s)`.
    pub fn resolvent(&self, lambda: f64, s: f64) -> Result<f64> {
        self.resolvent_with_slope(lambda, s).map(|(p, _)| p)
    }

    /// Resolvent together with its derivative `d/ds (1 + λψ)^{-1}(s) ∈ [0, 1]`.
    pub fn resolvent_with_slope(&self, lambda: f64, s: f64) -> Result<(f64, f64)> {
        debug_assert!(lambda > 0.0);
        match *self {
            MonotoneGraph::Linear { a } => Ok((s / (1.0 + lambda * a), 1.0 / (1.0 + lambda * a))),
            MonotoneGraph::Heaviside { rho, r_c, alpha } => {
                let k = 1.0 + lambda * alpha;
                let lo = r_c * k;
                let hi = lo + lambda * rho;
                if s < lo {
                    Ok((s / k, 1.0 / k))
                } else if s > hi {
                    Ok(((s - lambda * rho) / k, 1.0 / k))
                } else {
                    Ok((r_c, 0.0))
                }
            }
            MonotoneGraph::Power { m, rho } => {
                let c = lambda * rho;
                let t = power_resolvent_magnitude(m, c, s.abs())?;
                let slope = if t == 0.0 {
                    if m < 1.0 {
                        0.0
                    } else if m == 1.0 {
                        1.0 / (1.0 + c)
                    } else {
                        1.0
                    }
                } else {
                    1.0 / (1.0 + c * m * t.powf(m - 1.0))
                };
                Ok((t * s.signum0(), slope))
            }
            MonotoneGraph::LipschitzTabulated { ref points } => {
                Ok(tabulated_resolvent(points, lambda, s))
            }
        }
    }

    /// Yosida approximation `ψ_λ(r) = (r - (1 + λψ)^{-1} r) / λ`, evaluated as the
    /// projection of that quotient onto `ψ(p)` to avoid cancellation.
    pub fn yosida(&self, lambda: f64, r: f64) -> Result<f64> {
        let p = self.resolvent(lambda, r)?;
        Ok(self.eval(p).project((r - p) / lambda))
    }

    /// Potential `j` with `∂j = ψ`, normalized so `j(0) = 0`.
    pub fn potential(&self, r: f64) -> f64 {
        match *self {
            MonotoneGraph::Power { m, rho } => rho * r.abs().powf(m + 1.0) / (m + 1.0),
            MonotoneGraph::Heaviside { rho, r_c, alpha } => {
                rho * (r - r_c).max(0.0) + 0.5 * alpha * r * r
            }
            MonotoneGraph::Linear { a } => 0.5 * a * r * r,
            MonotoneGraph::LipschitzTabulated { .. } => self.table_integral(r),
        }
    }

    /// Moreau envelope `j_λ(r) = |r - p|²/(2λ) + j(p)` with `p` the resolvent.
    pub fn moreau_envelope(&self, lambda: f64, r: f64) -> Result<f64> {
        let p = self.resolvent(lambda, r)?;
        Ok((r - p).powi(2) / (2.0 * lambda) + self.potential(p))
    }

    fn table_value(&self, r: f64) -> f64 {
        match self {
            MonotoneGraph::LipschitzTabulated { points } => {
                let i = segment_index(points, r);
                let (a, b) = (points[i], points[i + 1]);
                a[1] + (b[1] - a[1]) * (r - a[0]) / (b[0] - a[0])
            }
            _ => unreachable!("table_value on non-tabulated graph"),
        }
    }

    fn table_integral(&self, r: f64) -> f64 {
        // ∫_0^r ψ, piecewise trapezoids between the breakpoints crossed.
        let MonotoneGraph::LipschitzTabulated { points } = self else {
            unreachable!()
        };
        let (lo, hi, sign) = if r >= 0.0 { (0.0, r, 1.0) } else { (r, 0.0, -1.0) };
        let mut knots = vec![lo];
        knots.extend(points.iter().map(|p| p[0]).filter(|&x| x > lo && x < hi));
        knots.push(hi);
        let total: f64 = knots
            .windows(2)
            .map(|w| 0.5 * (w[1] - w[0]) * (self.table_value(w[0]) + self.table_value(w[1])))
            .sum();
        sign * total
    }
}

/// Index `i` of the segment `[x_i, x_{i+1}]` used for `r`, with the end segments
/// extended to ±∞.
fn segment_index(points: &[[f64; 2]], r: f64) -> usize {
    let n = points.len();
    match points.binary_search_by(|p| p[0].partial_cmp(&r).unwrap_or(std::cmp::Ordering::Less)) {
        Ok(i) => i.min(n - 2),
        Err(i) => i.saturating_sub(1).min(n - 2),
    }
}

/// Exact resolvent of a piecewise-linear graph: bisection over the breakpoints of
/// the increasing map `r ↦ r + λψ(r)` followed by a linear solve on the bracketing
/// segment.
fn tabulated_resolvent(points: &[[f64; 2]], lambda: f64, s: f64) -> (f64, f64) {
    let g = |p: &[f64; 2]| p[0] + lambda * p[1];
    let n = points.len();
    let (mut lo, mut hi) = (0usize, n - 1);
    let i = if s <= g(&points[0]) {
        0
    } else if s >= g(&points[n - 1]) {
        n - 2
    } else {
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if g(&points[mid]) <= s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    let (a, b) = (points[i], points[i + 1]);
    let slope = (b[1] - a[1]) / (b[0] - a[0]);
    // r + λ(a_y + slope (r - a_x)) = s
    let denom = 1.0 + lambda * slope;
    let r = (s - lambda * (a[1] - slope * a[0])) / denom;
    (r, 1.0 / denom)
}

/// Solves `t + c t^m = s` for `t ≥ 0` given `s ≥ 0`, `c > 0`.
fn power_resolvent_magnitude(m: f64, c: f64, s: f64) -> Result<f64> {
    if s == 0.0 {
        return Ok(0.0);
    }
    if m == 1.0 {
        return Ok(s / (1.0 + c));
    }
    if m == 2.0 {
        return Ok(2.0 * s / (1.0 + (1.0 + 4.0 * c * s).sqrt()));
    }
    if m == 0.5 {
        let root = 2.0 * s / (c + (c * c + 4.0 * s).sqrt());
        return Ok(root * root);
    }
    // Safeguarded Newton. Both s and (s/c)^{1/m} bound the root from above, and
    // f(t) = t + c t^m - s is monotone, so the bracket [0, t0] always holds it.
    let f = |t: f64| t + c * t.powf(m) - s;
    let mut hi = s.min((s / c).powf(1.0 / m));
    let mut lo = 0.0;
    let mut t = hi;
    let mut fv = f(t);
    for _ in 0..SCALAR_BUDGET {
        let scale = t + c * t.powf(m) + s;
        if fv.abs() <= 4.0 * f64::EPSILON * scale || hi - lo <= f64::EPSILON * hi {
            return Ok(t);
        }
        if fv > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let df = 1.0 + c * m * t.powf(m - 1.0);
        let mut next = t - fv / df;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        t = next;
        fv = f(t);
    }
    let residual = fv.abs();
    if residual <= SCALAR_TOL * s.max(1.0) {
        Ok(t)
    } else {
        Err(Error::NonConvergence {
            iterations: SCALAR_BUDGET,
            residual,
        })
    }
}

trait Signum0 {
    fn signum0(self) -> f64;
}

impl Signum0 for f64 {
    /// Sign with `0 ↦ 0`.
    fn signum0(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heav() -> MonotoneGraph {
        MonotoneGraph::Heaviside {
            rho: 1.0,
            r_c: 0.0,
            alpha: 0.0,
        }
    }

    fn table() -> MonotoneGraph {
        MonotoneGraph::LipschitzTabulated {
            points: vec![[-2.0, -1.0], [0.0, 0.0], [0.5, 1.0], [1.0, 1.2], [3.0, 2.0]],
        }
    }

    /// Residual `|r + λ proj_{ψ(r)}((s-r)/λ) - s|` of the resolvent contract.
    fn resolvent_residual(g: &MonotoneGraph, lambda: f64, s: f64) -> f64 {
        let r = g.resolvent(lambda, s).unwrap();
        let eta = g.eval(r).project((s - r) / lambda);
        (r + lambda * eta - s).abs()
    }

    #[test]
    fn eval_examples() {
        let p = MonotoneGraph::Power { m: 1.0, rho: 1.0 };
        assert_eq!(p.eval(2.0), Interval::point(2.0));
        assert_eq!(heav().eval(0.0), Interval { lo: 0.0, hi: 1.0 });
        assert_eq!(heav().eval(-3.0), Interval::point(0.0));
    }

    #[test]
    fn resolvent_examples() {
        let lin = MonotoneGraph::Linear { a: 1.0 };
        assert_eq!(lin.resolvent(1.0, 2.0).unwrap(), 1.0);
        assert_eq!(heav().resolvent(0.1, 0.05).unwrap(), 0.0);
        let p = MonotoneGraph::Power { m: 0.2, rho: 1.0 };
        assert_eq!(p.resolvent(0.5, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn yosida_examples() {
        for g in [heav(), table(), MonotoneGraph::Power { m: 0.2, rho: 2.0 }] {
            assert_eq!(g.yosida(0.3, 0.0).unwrap(), 0.0);
        }
        assert!((heav().yosida(0.1, 0.05).unwrap() - 0.5).abs() < 1e-14);
        assert!((heav().yosida(0.1, 1.0).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn potential_examples() {
        let p = MonotoneGraph::Power { m: 1.0, rho: 1.0 };
        assert_eq!(p.potential(2.0), 2.0);
        assert_eq!(heav().potential(3.0), 3.0);
        for g in [p, heav(), table(), MonotoneGraph::Linear { a: 3.0 }] {
            assert_eq!(g.potential(0.0), 0.0);
        }
    }

    #[test]
    fn tabulated_potential_matches_quadrature() {
        let g = table();
        for &r in &[-3.0, -0.7, 0.3, 0.9, 2.0, 4.5] {
            let n = 20_000;
            let h = r / n as f64;
            let quad: f64 = (0..n)
                .map(|i| h * g.eval((i as f64 + 0.5) * h).lo)
                .sum();
            assert!((g.potential(r) - quad).abs() < 1e-6, "r = {r}");
        }
    }

    #[test]
    fn moreau_examples() {
        let lin = MonotoneGraph::Linear { a: 1.0 };
        // p = 1, |2 - 1|²/2 + 1²/2; closed form a r²/(2(1 + λa)) = 1
        assert_eq!(lin.moreau_envelope(1.0, 2.0).unwrap(), 1.0);
        assert!((heav().moreau_envelope(0.1, 0.05).unwrap() - 0.0125).abs() < 1e-15);
        assert_eq!(heav().moreau_envelope(0.1, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_powers_match_safeguarded_newton() {
        for &m in &[0.5, 2.0] {
            for &s in &[1e-9, 0.3, 1.0, 7.0, 1e4] {
                let exact = power_resolvent_magnitude(m, 0.7, s).unwrap();
                // perturb m by an ulp-level amount to force the iterative branch
                let iter = power_resolvent_magnitude(m * (1.0 + 1e-15), 0.7, s).unwrap();
                assert!((exact - iter).abs() <= 1e-12 * exact.max(1e-300), "m={m} s={s}");
            }
        }
    }

    #[test]
    fn resolvent_residual_tiny_for_all_kinds() {
        let graphs = [
            MonotoneGraph::Power { m: 0.2, rho: 1.0 },
            MonotoneGraph::Power { m: 0.5, rho: 1.0 },
            MonotoneGraph::Power { m: 2.0, rho: 1.0 },
            MonotoneGraph::Power { m: 3.3, rho: 0.4 },
            heav(),
            MonotoneGraph::Heaviside {
                rho: 2.0,
                r_c: 0.5,
                alpha: 0.3,
            },
            table(),
        ];
        for g in &graphs {
            for &lambda in &[1e-3, 0.1, 1.0] {
                for i in -50..=50 {
                    let s = (i as f64) * 0.37;
                    let res = resolvent_residual(g, lambda, s);
                    assert!(res <= SCALAR_TOL * s.abs().max(1.0), "{g:?} λ={lambda} s={s}");
                }
            }
        }
    }

    #[test]
    fn validation_rejects_bad_graphs() {
        assert!(MonotoneGraph::Power { m: 0.0, rho: 1.0 }.validate().is_err());
        assert!(MonotoneGraph::Heaviside {
            rho: 1.0,
            r_c: -1.0,
            alpha: 0.0
        }
        .validate()
        .is_err());
        let shifted = MonotoneGraph::LipschitzTabulated {
            points: vec![[-1.0, 0.5], [1.0, 1.0]],
        };
        assert!(shifted.validate().is_err());
        let decreasing = MonotoneGraph::LipschitzTabulated {
            points: vec![[-1.0, 1.0], [1.0, -1.0]],
        };
        assert!(decreasing.validate().is_err());
        assert!(table().validate().is_ok());
    }

    #[test]
    fn hypothesis_claims() {
        let fd = MonotoneGraph::Power { m: 0.2, rho: 1.0 };
        let h = fd.hypotheses(3);
        assert!(h.extinction_exponent_matches_dimension);
        assert!(!h.lipschitz);
        assert!(!h.polynomial_growth_m_ge_1);
        assert!(table().hypotheses(1).lipschitz);
        assert!(!heav().hypotheses(3).extinction_exponent_matches_dimension);
    }

    #[test]
    fn graph_config_is_tagged() {
        let g: MonotoneGraph = serde_json::from_str(r#"{"kind":"power","m":0.2,"rho":1.0}"#).unwrap();
        assert_eq!(g, MonotoneGraph::Power { m: 0.2, rho: 1.0 });
        let h: MonotoneGraph = serde_json::from_str(r#"{"kind":"heaviside","rho":1.0}"#).unwrap();
        assert_eq!(h, heav());
        assert!(serde_json::from_str::<MonotoneGraph>(r#"{"kind":"power","m":0.2,"rho":1.0,"x":1}"#).is_err());
    }
}
