use std::sync::{Arc, OnceLock};

use approx::assert_relative_eq;
use bk_thermo::measures::{AtomicMeasure, Provenance};
use bk_thermo::verify::rapid_growth_check;
use bk_thermo::xfer::DiscreteOperator;
use bk_thermo::*;
use num_complex::Complex64;
use proptest::prelude::*;

fn model() -> &'static BkMapDescriptor {
    static M: OnceLock<BkMapDescriptor> = OnceLock::new();
    M.get_or_init(|| BkMapDescriptor::tangent(0.5).unwrap())
}

fn params() -> PotentialParams {
    PotentialParams::new(1.5, 3.0)
}

fn small_operator() -> &'static DiscreteOperator {
    static OP: OnceLock<DiscreteOperator> = OnceLock::new();
    OP.get_or_init(|| {
        let m = model();
        let zs = m.repelling_fixed_point(Complex64::new(4.6, 0.0)).unwrap();
        let policy = SamplingPolicy {
            depth: 3,
            budget: 400,
            ..SamplingPolicy::default()
        };
        let cloud = Arc::new(sample_julia(m, zs, &policy).unwrap());
        let trunc = TruncationPolicy {
            k: 10,
            ..TruncationPolicy::default()
        };
        let op = TruncatedOperator::new(m, params(), trunc).unwrap();
        DiscreteOperator::build(&op, cloud).unwrap()
    })
}

/// Smallest `|f'||z|/|f|²` over poles `k ∈ {−1, 0}`, the two closest to the origin.
fn rapid_growth_c0() -> f64 {
    static C: OnceLock<f64> = OnceLock::new();
    *C.get_or_init(|| {
        let m = model();
        let rep = rapid_growth_check(m, &[-1, 0], (m.r0, 100.0 * m.r0)).unwrap();
        rep.constant("c0[k=-1]")
            .unwrap()
            .min(rep.constant("c0[k=0]").unwrap())
    })
}

fn real_julia_like() -> impl Strategy<Value = f64> {
    (1.2f64..60.0, any::<bool>()).prop_map(|(x, neg)| if neg { -x } else { x })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ergodic_sums_telescope(x in real_julia_like(), n in 1usize..4, k in 1usize..4) {
        let (m, p) = (model(), params());
        let z = Complex64::new(x, 0.0);
        let Ok(orbit) = m.forward_orbit(z, n) else { return Ok(()) };
        let (Ok(a), Ok(b), Ok(c)) = (m.ergodic_sum(z, n, &p), m.ergodic_sum(orbit[n], k, &p), m.ergodic_sum(z, n + k, &p)) else {
            return Ok(());
        };
        prop_assert!((a + b - c).abs() <= 1e-9 * (1.0 + c.abs()), "{a} + {b} != {c}");
    }

    #[test]
    fn branches_are_weighted_preimages(re in -30.0f64..30.0, im in -3.0f64..3.0, k in -40i64..40) {
        let (m, p) = (model(), params());
        let w = Complex64::new(re, im);
        prop_assume!(w.norm() > 0.5 && (w.im.abs() - 0.5).abs() > 0.05);
        let b = m.branch(w, k, &p).unwrap();
        prop_assert!(m.is_preimage(b.z, w, m.preimage_tol));
        prop_assert!(b.metric_weight > 0.0 && b.metric_weight.is_finite());
        prop_assert_eq!(b.branch_index, k);
        let other = m.branch(w, k + 1, &p).unwrap();
        prop_assert!((other.z - b.z).norm() > 1.0);
    }

    #[test]
    fn rapid_growth_holds_near_every_pole(k in -50i64..50, s in 0.0f64..2.0, theta in 0.0f64..std::f64::consts::TAU) {
        let m = model();
        let (a, _) = m.pole(k);
        let big = m.r0 * 10f64.powf(s);
        let z = a + Complex64::from_polar(m.sing_radius / big, theta);
        let fz = m.eval(z).finite().unwrap();
        prop_assume!(fz.norm() > m.r0);
        let fp = m.deriv_with_value(z, fz).norm();
        prop_assert!(fp * z.norm() >= rapid_growth_c0() * fz.norm_sqr() * (1.0 - 1e-9));
    }

    #[test]
    fn operator_is_linear_and_positive(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let op = small_operator();
        let n = op.len();
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 10_000) as f64 / 1000.0
        };
        let phi: Vec<f64> = (0..n).map(|_| next()).collect();
        let psi: Vec<f64> = (0..n).map(|_| next()).collect();
        let combo: Vec<f64> = phi.iter().zip(&psi).map(|(a, b)| alpha * a + b).collect();
        let (lphi, lpsi, lcombo) = (op.apply_scaled(&phi, 1.0), op.apply_scaled(&psi, 1.0), op.apply_scaled(&combo, 1.0));
        for i in 0..n {
            let expect = alpha * lphi[i] + lpsi[i];
            let scale = alpha.abs() * lphi[i].abs() + lpsi[i].abs();
            prop_assert!((lcombo[i] - expect).abs() <= 1e-12 * scale.max(1e-300));
            prop_assert!(lphi[i] >= 0.0);
        }
    }

    #[test]
    fn tree_values_grow_with_branch_range(k in 2u32..8, extra in 1u32..6) {
        let m = model();
        let zs = Complex64::new(4.604216777200845, 0.0);
        let base = TruncationPolicy { k, k_max: 64, tail_tol: 1.0, node_tol: 0.0, node_budget: 1 << 22 };
        let wide = TruncationPolicy { k: k + extra, ..base };
        let (a, _) = xfer::power_one(m, zs, 3, &params(), &base).unwrap();
        let (b, _) = xfer::power_one(m, zs, 3, &params(), &wide).unwrap();
        prop_assert!(b >= a);
    }

    #[test]
    fn atom_merging_keeps_mass(xs in proptest::collection::vec((-50.0f64..50.0, 0.0f64..1.0), 1..40)) {
        let atoms: Vec<(Complex64, f64)> = xs.iter().map(|&(x, w)| (Complex64::new(x.round(), 0.0), w)).collect();
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        let mu = AtomicMeasure::new(atoms, Provenance::NuS).unwrap();
        assert_relative_eq!(mu.total_mass, total, max_relative = 1e-12, epsilon = 1e-300);
        prop_assert!(mu.atoms.windows(2).all(|w| w[0].0.re < w[1].0.re));
    }

    #[test]
    fn tail_mass_is_monotone(xs in proptest::collection::vec((-50.0f64..50.0, 0.01f64..1.0), 1..40), r1 in 0.0f64..60.0, dr in 0.0f64..30.0) {
        let mu = AtomicMeasure::new(xs.iter().map(|&(x, w)| (Complex64::new(x, 0.0), w)).collect(), Provenance::NuS).unwrap();
        let (a, b) = (mu.tail_mass(r1), mu.tail_mass(r1 + dr));
        prop_assert!(b <= a && (0.0..=1.0 + 1e-12).contains(&a));
    }
}
