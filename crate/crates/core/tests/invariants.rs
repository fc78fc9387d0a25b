use std::sync::{Arc, OnceLock};

use bk_thermo::measures::*;
use bk_thermo::pressure::estimate_pressure;
use bk_thermo::verify::{preimage_oracle_check, run_all};
use bk_thermo::xfer::{cesaro_density, power_one};
use bk_thermo::*;
use num_complex::Complex64;

struct Desk {
    m: BkMapDescriptor,
    p: PotentialParams,
    zs: Complex64,
    trunc: TruncationPolicy,
    cloud: Arc<JuliaCloud>,
}

fn desk() -> &'static Desk {
    static D: OnceLock<Desk> = OnceLock::new();
    D.get_or_init(|| {
        let m = BkMapDescriptor::tangent(0.5).unwrap();
        let zs = m.repelling_fixed_point(Complex64::new(4.6, 0.0)).unwrap();
        let cloud = Arc::new(sample_julia(&m, zs, &SamplingPolicy::default()).unwrap());
        Desk {
            m,
            p: PotentialParams::new(1.5, 3.0),
            zs,
            trunc: TruncationPolicy {
                k: 30,
                ..TruncationPolicy::default()
            },
            cloud,
        }
    })
}

fn real(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

#[test]
fn grid_search_finds_exactly_the_enumerated_branches() {
    let d = desk();
    let rep =
        preimage_oracle_check(&d.m, &[real(0.2), real(1.0), real(-3.0)], 20.0, 400, 6).unwrap();
    assert!(rep.passed(), "{rep:?}");
    // atan(−6) − 6π lies just outside the square
    assert_eq!(rep.constant("roots[w=-3+0i]"), Some(12.0));
    assert_eq!(rep.constant("roots[w=0.2+0i]"), Some(13.0));
}

#[test]
fn one_level_over_a_depth_n_tree_is_the_next_power() {
    let d = desk();
    let (n, w) = (3, d.zs);
    let exact = TruncationPolicy {
        k: 12,
        k_max: 12,
        tail_tol: 1.0,
        node_tol: 0.0,
        node_budget: 1 << 22,
    };
    let (next, tree) = power_one(&d.m, w, n + 1, &d.p, &exact).unwrap();
    let set = d.m.branch_set(w, &exact, &d.p).unwrap();
    let composed: f64 = set
        .branches
        .iter()
        .map(|b| b.metric_weight * power_one(&d.m, b.z, n, &d.p, &exact).unwrap().0)
        .sum();
    let slack = tree.tail_certificate(n + 1) + 1e-12 * next;
    assert!((next - composed).abs() <= slack, "{next} vs {composed}");
}

#[test]
fn normalized_powers_are_lipschitz_for_close_pairs() {
    let d = desk();
    let trunc = TruncationPolicy { k: 20, ..d.trunc };
    let pairs: Vec<(Complex64, Complex64)> = (0..d.cloud.len())
        .step_by(d.cloud.len() / 6)
        .filter_map(|i| {
            let (j, dist) = d.cloud.neighbour(i)?;
            (dist > 0.0 && dist < d.m.delta).then(|| (d.cloud.points[i], d.cloud.points[j]))
        })
        .take(4)
        .collect();
    assert!(pairs.len() >= 3);
    let n_max = 8;
    let mut per_n = vec![0.0_f64; n_max];
    for &(w1, w2) in &pairs {
        let (_, t1) = power_one(&d.m, w1, n_max, &d.p, &trunc).unwrap();
        let (_, t2) = power_one(&d.m, w2, n_max, &d.p, &trunc).unwrap();
        for n in 1..=n_max {
            let c = (t1.value(n) - t2.value(n)).abs() / (t1.value(n) * (w1 - w2).norm());
            per_n[n - 1] = per_n[n - 1].max(c);
        }
    }
    // one constant works for all n: the deep half does not exceed the shallow half by much
    let shallow = per_n[..n_max / 2].iter().copied().fold(0.0, f64::max);
    let deep = per_n[n_max / 2..].iter().copied().fold(0.0, f64::max);
    assert!(deep <= 1.3 * shallow, "{per_n:?}");
}

#[test]
fn transfer_of_one_decays_at_infinity() {
    let d = desk();
    let mut pts: Vec<Complex64> = d.cloud.points.iter().copied().step_by(97).collect();
    pts.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    let vals: Vec<f64> = pts
        .iter()
        .map(|&w| d.m.branch_set(w, &d.trunc, &d.p).unwrap().total_weight())
        .collect();
    let bins: Vec<f64> = vals
        .chunks(vals.len() / 5)
        .map(|c| c.iter().copied().fold(0.0, f64::max))
        .collect();
    assert!(bins.windows(2).all(|w| w[1] < w[0]), "{bins:?}");
    assert!(*bins.last().unwrap() < 0.05 * bins[0]);
}

#[test]
fn pressure_does_not_depend_on_the_basepoint() {
    let d = desk();
    let inner: Vec<Complex64> = d
        .cloud
        .points
        .iter()
        .copied()
        .filter(|z| z.norm() <= 5.0)
        .collect();
    let (a, b) = (inner[0], inner[inner.len() / 2]);
    let ea = estimate_pressure(&d.m, &d.p, a, 8, &d.trunc).unwrap();
    let eb = estimate_pressure(&d.m, &d.p, b, 8, &d.trunc).unwrap();
    assert!((ea.value - eb.value).abs() <= ea.error_bar + eb.error_bar);
}

#[test]
fn conformality_on_single_branches_improves_with_depth() {
    let d = desk();
    let boxes = [
        (real(1.5), 0.3, 1),
        (real(4.6), 0.5, 0),
        (real(-2.0), 0.5, -2),
    ];
    let defect = |depth| {
        let mu = conformal_estimate(
            &d.m,
            d.zs,
            &d.p,
            depth,
            &d.trunc,
            ConformalStrategy::AdjointPower,
        )
        .unwrap()
        .measure;
        boxes
            .iter()
            .map(|&(c, r, k)| {
                let (direct, weighted) = branch_box_mass(&d.m, &mu, c, r, k, &d.p).unwrap();
                (direct / weighted - 1.0).abs()
            })
            .fold(0.0, f64::max)
    };
    let (coarse, fine) = (defect(4), defect(8));
    assert!(fine < coarse && fine < 5e-2, "{coarse} -> {fine}");
}

#[test]
fn escaping_mass_vanishes() {
    let d = desk();
    let mt = conformal_estimate(
        &d.m,
        d.zs,
        &d.p,
        8,
        &d.trunc,
        ConformalStrategy::AdjointPower,
    )
    .unwrap()
    .measure;
    let esc = escaping_fraction(&d.m, &mt, 5.0, 8).unwrap();
    assert!(esc.windows(2).all(|w| w[1] <= w[0]));
    assert!(esc[7] < esc[0]);
}

#[test]
fn two_constructions_and_the_gibbs_state_are_equivalent() {
    let d = desk();
    let (nu, adj) = conformal_pair(&d.m, d.zs, &d.p, 8, &d.trunc).unwrap();
    let agr = cross_check(&nu.measure, &adj.measure, &default_test_fns(), 0.02).unwrap();
    assert!(agr.max_relative < 0.02);
    let h = cesaro_density(&d.m, d.cloud.clone(), &d.p, &d.trunc, adj.pressure, 16).unwrap();
    let mu = gibbs_from_density(&adj.measure, &h.h).unwrap();
    for r in [2.0, 5.0, 20.0] {
        let (lo, hi) = ratio_band(&mu, &adj.measure, r).unwrap();
        assert!(
            lo > 0.0 && hi.is_finite() && hi / lo < 1e3,
            "R = {r}: [{lo}, {hi}]"
        );
    }
}

#[test]
fn verification_reports_serialize_with_all_fields() {
    let d = desk();
    let reports = run_all(&d.m, &d.cloud, &d.p, &d.trunc).unwrap();
    assert!(reports.iter().all(|r| r.passed()), "{reports:?}");
    for r in &reports {
        let v = serde_json::to_value(r).unwrap();
        for key in [
            "lemma_id",
            "samples",
            "fitted_constants",
            "tolerance",
            "verdict",
            "provenance",
        ] {
            assert!(v.get(key).is_some(), "{key} missing in {v}");
        }
    }
}
