use std::sync::OnceLock;

use epictrl::model::{build_sidher, estimate_lipschitz, SidherNonlinearity};
use epictrl::{Domain, ParameterVector};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn theta() -> impl Strategy<Value = ParameterVector> {
    proptest::array::uniform9(0.0..1.0f64).prop_map(ParameterVector::from_array)
}

fn simplex() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(1e-9..1.0f64, 6).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    })
}

fn unit_box() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0..=1.0f64, 6)
}

fn input() -> impl Strategy<Value = Vec<f64>> {
    (0.0..=1.0f64, 0.0..=0.9f64, 0.1..=0.7f64, 0.0..=0.7f64).prop_map(|(a, b, c, d)| vec![a, b, c, d])
}

fn lipschitz(domain: &Domain) -> f64 {
    let m = build_sidher(&ParameterVector::reference_truth()).unwrap();
    estimate_lipschitz(&m, domain, 21).unwrap().value
}

fn box_ell() -> f64 {
    static L: OnceLock<f64> = OnceLock::new();
    *L.get_or_init(|| lipschitz(&Domain::sidher_box()))
}

fn simplex_ell() -> f64 {
    static L: OnceLock<f64> = OnceLock::new();
    *L.get_or_init(|| lipschitz(&Domain::sidher_simplex()))
}

fn ratio(x: &[f64], xh: &[f64], u: &[f64]) -> f64 {
    use epictrl::model::Nonlinearity;
    let pick = |x: &[f64]| vec![x[0], x[1], x[3]];
    let (a, b) = (pick(x), pick(xh));
    let (mut fa, mut fb) = ([0.0; 5], [0.0; 5]);
    SidherNonlinearity.eval(&a, u, &mut fa);
    SidherNonlinearity.eval(&b, u, &mut fb);
    let num: f64 = fa.iter().zip(&fb).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let den: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn lipschitz_inequality_on_box(x in unit_box(), xh in unit_box(), u in input()) {
        prop_assert!(ratio(&x, &xh, &u) <= box_ell() * (1.0 + 1e-12));
    }

    #[test]
    fn lipschitz_inequality_on_simplex(x in simplex(), xh in simplex(), u in input()) {
        prop_assert!(ratio(&x, &xh, &u) <= simplex_ell() * (1.0 + 1e-12));
    }
}

proptest! {
    #[test]
    fn rate_matrices_have_zero_column_sums(th in theta()) {
        let m = build_sidher(&th).unwrap();
        for mat in [m.a(), m.g()] {
            for j in 0..mat.ncols() {
                prop_assert!(mat.column(j).sum().abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn total_population_is_stationary(th in theta(), x in unit_box(), u in input()) {
        let m = build_sidher(&th).unwrap();
        let dx = m.eval_dynamics(&x, &u).unwrap();
        prop_assert!(dx.iter().sum::<f64>().abs() <= 1e-14);
    }

    #[test]
    fn last_output_closes_the_population(th in theta(), x in simplex()) {
        let y = build_sidher(&th).unwrap().eval_output(&x).unwrap();
        prop_assert!((y[9] - (1.0 - (y[2] + y[5] + y[8]))).abs() <= 1e-14);
    }
}

/// The Jacobian of f with respect to (S, I, H) is affine in each variable, so
/// its largest singular value over the box is attained at a corner.
fn corner_oracle(simplex: bool) -> f64 {
    let mut best = 0.0f64;
    let u1 = [0.0, 1.0];
    let u2 = [0.0, 0.9];
    let u3 = [0.1, 0.7];
    let u4 = [0.0, 0.7];
    for mask in 0..8u32 {
        let s = (mask & 1) as f64;
        let i = ((mask >> 1) & 1) as f64;
        let h = ((mask >> 2) & 1) as f64;
        if simplex && s + i + h > 1.0 {
            continue;
        }
        for a in u1 {
            for b in u2 {
                for c in u3 {
                    for d in u4 {
                        let j = DMatrix::from_row_slice(
                            5,
                            3,
                            &[i, s, 0.0, i * a, s * a, 0.0, 0.0, 0.0, b, 0.0, c, 0.0, d, 0.0, 0.0],
                        );
                        best = best.max(j.singular_values().max());
                    }
                }
            }
        }
    }
    best
}

#[test]
fn box_bound_matches_corner_oracle() {
    let ell = box_ell();
    assert!((ell - 4.49f64.sqrt()).abs() <= 1e-9, "{ell}");
    assert!((ell - corner_oracle(false)).abs() <= 1e-9);
}

#[test]
fn simplex_bound_matches_vertex_oracle() {
    let ell = simplex_ell();
    assert!((ell - 2.49f64.sqrt()).abs() <= 1e-9, "{ell}");
    assert!((ell - corner_oracle(true)).abs() <= 1e-9);
}
