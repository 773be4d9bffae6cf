use std::sync::OnceLock;

use proptest::prelude::*;
use spme_core::spectral::*;

fn domain(d: usize, l: f64, n: usize, b: Boundary) -> DomainRef {
    Domain::new(DomainSpec {
        d,
        length: l,
        n,
        boundary: b,
        zero_mode: ZeroMode::Exclude,
    })
    .unwrap()
}

fn domains() -> impl Strategy<Value = DomainRef> {
    (
        1usize..=3,
        0.5f64..7.0,
        prop_oneof![Just(8usize), Just(16)],
        prop_oneof![Just(Boundary::Periodic), Just(Boundary::Dirichlet)],
    )
        .prop_map(|(d, l, n, b)| domain(d, l, if d == 3 { 8 } else { n }, b))
}

/// Random field; mean removed on periodic boxes so it is admissible for `‖·‖₋₁`.
fn field(dom: &DomainRef, seed: u64) -> Field {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let vals: Vec<f64> = (0..dom.len()).map(|_| next()).collect();
    let u = Field::new(dom.clone(), vals).unwrap();
    if dom.spec().boundary == Boundary::Periodic {
        let m = mean(&u);
        u.map(|v| v - m)
    } else {
        u
    }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transform_roundtrip(dom in domains(), seed in any::<u64>()) {
        let u = field(&dom, seed);
        let back = dom.inverse(dom.forward(u.values()));
        prop_assert!(rel(&back, u.values()) <= 1e-12);
    }

    #[test]
    fn plancherel(dom in domains(), seed in any::<u64>()) {
        let u = field(&dom, seed);
        let l2sq = l2_norm(&u).powi(2);
        let spec = dom.weighted_power(&dom.forward(u.values()), |_| 1.0);
        prop_assert!((l2sq - spec).abs() <= 1e-12 * l2sq);
    }

    #[test]
    fn duality(dom in domains(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let u = field(&dom, s1);
        let v = field(&dom, s2);
        let ip = hminus1_inner(&u, &v).unwrap();
        prop_assert!(ip.abs() <= hminus1_norm(&u).unwrap() * hminus1_norm(&v).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn shifted_norm_bounds(dom in domains(), seed in any::<u64>(), nu in 1e-3f64..10.0) {
        let u = field(&dom, seed);
        let nu_norm = hminus1_nu_norm(&u, nu).unwrap();
        prop_assert!(nu_norm <= l2_norm(&u) / nu.sqrt() * (1.0 + 1e-12));
        prop_assert!(nu_norm <= hminus1_norm(&u).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn laplacian_inverse_roundtrip(dom in domains(), seed in any::<u64>(), alpha in 0.0f64..5.0) {
        let u = field(&dom, seed);
        let back = shifted_laplacian(&inv_shifted_laplacian(&u, alpha).unwrap(), alpha);
        prop_assert!(rel(back.values(), u.values()) <= 1e-10);
    }
}

struct Embedding {
    dom: DomainRef,
    m: f64,
    gamma: f64,
}

fn embeddings() -> &'static [Embedding] {
    static CELL: OnceLock<Vec<Embedding>> = OnceLock::new();
    CELL.get_or_init(|| {
        [
            (domain(1, std::f64::consts::PI, 64, Boundary::Dirichlet), 0.5),
            (domain(2, 2.0, 16, Boundary::Dirichlet), 0.2),
            (domain(1, 3.0, 32, Boundary::Periodic), 0.5),
        ]
        .into_iter()
        .map(|(dom, m)| {
            let gamma = embedding_constant(&dom, m, 1).unwrap().gamma;
            Embedding { dom, m, gamma }
        })
        .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embedding_inequality(which in 0usize..3, seed in any::<u64>(), sharp in 0.0f64..4.0) {
        let e = &embeddings()[which];
        // mix the random field with a sharpened copy to probe concentrated data
        let u = field(&e.dom, seed).map(|v| v.signum() * v.abs().powf(1.0 + sharp));
        let u = if e.dom.spec().boundary == Boundary::Periodic {
            let m = mean(&u);
            u.map(|v| v - m)
        } else {
            u
        };
        let lhs = hminus1_norm(&u).unwrap();
        let rhs = lp_norm(&u, e.m + 1.0) / e.gamma;
        prop_assert!(lhs <= rhs * (1.0 + 1e-9), "{lhs} > {rhs}");
    }
}
