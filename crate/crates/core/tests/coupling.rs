use std::f64::consts::PI;

use spme_core::ensemble::*;
use spme_core::graph::MonotoneGraph;
use spme_core::noise::*;
use spme_core::solver::SolverConfig;
use spme_core::spectral::*;

fn setup(graph: MonotoneGraph) -> StudySetup {
    let domain = Domain::new(DomainSpec {
        d: 1,
        length: PI,
        n: 64,
        boundary: Boundary::Periodic,
        zero_mode: ZeroMode::Exclude,
    })
    .unwrap();
    let x0 = Field::from_fn(domain.clone(), |p| (2.0 * p[0]).sin() + 0.3 * (4.0 * p[0]).cos());
    let mut base = SolverConfig::new(1e-3, 0.2, 1e-2, 0.0);
    // signed data
    base.positivity_tol = f64::INFINITY;
    let noise = NoiseSpec {
        modes: vec![
            NoiseMode {
                mu: 0.1,
                e: ModeShape::Constant { c: 1.0 },
            },
            NoiseMode {
                mu: 0.1,
                e: ModeShape::Cosine {
                    wave_vector: vec![2.0],
                    amplitude: 1.0,
                },
            },
        ],
        seed_base: 3,
    };
    StudySetup {
        domain,
        graph,
        base,
        noise,
        x0,
    }
}

fn halving_ratios(table: &ConvergenceTable) -> Vec<f64> {
    table
        .pairs
        .windows(2)
        .map(|w| w[0].mean_sup_sq / w[1].mean_sup_sq)
        .collect()
}

#[test]
fn halving_lambda_halves_coupled_error() {
    let s = setup(MonotoneGraph::Heaviside {
        rho: 1.0,
        r_c: 0.0,
        alpha: 0.0,
    });
    let table = coupled_convergence_study(&s, &Ladder::Lambda(vec![0.1, 0.05, 0.025]), 16, None, false).unwrap();
    assert_eq!(table.failures, 0);
    let ratios = halving_ratios(&table);
    println!("lambda ratios {ratios:?} exponent {:.3}", table.exponent);
    for r in ratios {
        assert!((1.5..=3.0).contains(&r), "ratio {r}");
    }
}

#[test]
fn halving_nu_halves_coupled_error() {
    let s = setup(MonotoneGraph::Heaviside {
        rho: 1.0,
        r_c: 0.0,
        alpha: 0.0,
    });
    let table = coupled_convergence_study(&s, &Ladder::Nu(vec![0.1, 0.05, 0.025]), 16, None, false).unwrap();
    assert_eq!(table.failures, 0);
    let ratios = halving_ratios(&table);
    println!("nu ratios {ratios:?} exponent {:.3}", table.exponent);
    for r in ratios {
        assert!((1.5..=3.0).contains(&r), "ratio {r}");
    }
}

#[test]
fn coupled_error_vanishes_with_the_parameter_gap() {
    // a fixed noise path: the coupled error falls as the ladder tightens
    let s = setup(MonotoneGraph::Power { m: 2.0, rho: 1.0 });
    let table = coupled_convergence_study(&s, &Ladder::Lambda(vec![0.1, 0.05, 0.025, 0.0125]), 8, None, false).unwrap();
    let errs: Vec<f64> = table.pairs.iter().map(|p| p.mean_sup_sq).collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    assert!(table.exponent > 0.8);
}
