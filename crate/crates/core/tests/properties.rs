mod common;

use std::collections::BTreeMap;

use chrono::Duration;
use proptest::prelude::*;

use wq_surrogate::car1::{car1_whiten, Group};
use wq_surrogate::data::{interpolate_level, parse_csv, write_csv, DataKind, Dataset, LevelSeries, Observation, Schema};
use wq_surrogate::gls::{fit_problem, profiled_objective, FitOptions, GlsProblem, Method};
use wq_surrogate::infer::interval_bounds;
use wq_surrogate::oracle::{dense_whiten, loglik_dense_oracle};
use wq_surrogate::validate::block_sizes;

use common::{origin, random_problem, rng};

fn rebuild(p: &GlsProblem, y: Vec<f64>, times: Vec<f64>) -> GlsProblem {
    GlsProblem::new(p.x().to_vec(), y, times, p.groups().to_vec(), p.column_labels().to_vec()).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn arb_cell() -> impl Strategy<Value = Option<f64>> {
    prop_oneof![
        1 => Just(None),
        4 => (-1e6f64..1e6).prop_map(Some),
        1 => any::<f64>().prop_filter("finite", |v| v.is_finite()).prop_map(Some),
    ]
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    (1usize..4, 1usize..25, 0usize..4).prop_flat_map(|(sites, per_site, nvars)| {
        let rows = sites * per_site;
        (
            proptest::collection::vec(arb_cell(), rows * nvars),
            proptest::collection::vec(1i64..100_000, rows),
        )
            .prop_map(move |(cells, gaps)| {
                let vars: Vec<String> = (0..nvars).map(|j| format!("v{j}")).collect();
                let mut obs = Vec::new();
                for s in 0..sites {
                    let mut t = origin();
                    for k in 0..per_site {
                        let row = s * per_site + k;
                        t += Duration::seconds(gaps[row]);
                        let values: BTreeMap<String, Option<f64>> =
                            vars.iter().enumerate().map(|(j, v)| (v.clone(), cells[row * nvars + j])).collect();
                        obs.push(Observation {
                            timestamp: t,
                            site: format!("S{s}"),
                            values,
                        });
                    }
                }
                Dataset::new(DataKind::Laboratory, vars, obs).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip(ds in arb_dataset()) {
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let (back, report) = parse_csv(buf.as_slice(), &Schema::default(), DataKind::Laboratory).unwrap();
        prop_assert!(report.unparseable.is_empty());
        prop_assert_eq!(back.variables(), ds.variables());
        prop_assert_eq!(back.observations(), ds.observations());
    }

    #[test]
    fn interpolation_stays_between_neighbours(
        levels in proptest::collection::vec(0.01f64..50.0, 2..20),
        gaps in proptest::collection::vec(60i64..86_400, 20),
        probes in proptest::collection::vec(0.0f64..1.0, 1..30),
    ) {
        let mut t = origin();
        let pts: Vec<_> = levels.iter().enumerate().map(|(i, &l)| { t += Duration::seconds(gaps[i]); (t, l) }).collect();
        let series = LevelSeries::new("A", pts.clone()).unwrap();
        let span = (pts.last().unwrap().0 - pts[0].0).num_seconds() as f64;
        let targets: Vec<_> = probes.iter().map(|u| pts[0].0 + Duration::seconds((u * span) as i64)).collect();
        let got = interpolate_level(&series, &targets).unwrap();
        for (tt, v) in targets.iter().zip(&got) {
            let v = v.expect("inside span");
            let i = pts.iter().position(|(pt, _)| pt >= tt).unwrap();
            let (lo, hi) = if i == 0 { (pts[0].1, pts[0].1) } else { (pts[i - 1].1.min(pts[i].1), pts[i - 1].1.max(pts[i].1)) };
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
        // knots reproduce exactly, outside the span is missing
        let knots: Vec<_> = pts.iter().map(|p| p.0).collect();
        let at = interpolate_level(&series, &knots).unwrap();
        for (p, v) in pts.iter().zip(&at) {
            prop_assert_eq!(*v, Some(p.1));
        }
        let outside = [pts[0].0 - Duration::seconds(1), pts.last().unwrap().0 + Duration::seconds(1)];
        prop_assert_eq!(interpolate_level(&series, &outside).unwrap(), vec![None, None]);
    }

    #[test]
    fn fast_whitening_matches_cholesky(seed in any::<u64>(), n in 1usize..60, phi in 0.01f64..0.995) {
        let mut r = rng(seed);
        let p = random_problem(&mut r, n.max(2), 1, 1);
        let (w, ld) = car1_whiten(p.y(), p.times(), phi).unwrap();
        let (wd, ldd) = dense_whiten(p.y(), p.times(), phi).unwrap();
        prop_assert!(rel(ld, ldd) < 1e-9);
        for (a, b) in w.iter().zip(&wd) {
            prop_assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn objective_matches_dense_oracle(
        seed in any::<u64>(),
        n in 10usize..80,
        p in 1usize..5,
        groups in 1usize..4,
        phi in 0.01f64..0.99,
    ) {
        let mut r = rng(seed);
        let prob = random_problem(&mut r, n, p, groups);
        for method in [Method::Ml, Method::Reml] {
            let fast = profiled_objective(&prob, phi, method).unwrap().neg_loglik;
            let dense = loglik_dense_oracle(&prob, phi, method).unwrap();
            prop_assert!(rel(fast, dense) < 1e-8, "{fast} vs {dense}");
        }
    }

    #[test]
    fn response_scaling_is_equivariant(seed in any::<u64>(), c in 0.1f64..20.0) {
        let mut r = rng(seed);
        let prob = random_problem(&mut r, 60, 3, 2);
        let scaled = rebuild(&prob, prob.y().iter().map(|v| c * v).collect(), prob.times().to_vec());
        let a = fit_problem(&prob, Method::Reml, &FitOptions::default()).unwrap().profile;
        let b = fit_problem(&scaled, Method::Reml, &FitOptions::default()).unwrap().profile;
        prop_assert!((a.phi - b.phi).abs() < 1e-5);
        for (x, y) in a.beta.iter().zip(&b.beta) {
            prop_assert!((c * x - y).abs() < 1e-4 * (1.0 + y.abs()));
        }
        prop_assert!(rel(c * c * a.sigma2, b.sigma2) < 1e-4);
    }

    #[test]
    fn time_shift_leaves_likelihood_unchanged(seed in any::<u64>(), shift in -1e4f64..1e4, phi in 0.05f64..0.95) {
        let mut r = rng(seed);
        let prob = random_problem(&mut r, 50, 2, 2);
        let shifted = rebuild(&prob, prob.y().to_vec(), prob.times().iter().map(|t| t + shift).collect());
        let a = profiled_objective(&prob, phi, Method::Reml).unwrap();
        let b = profiled_objective(&shifted, phi, Method::Reml).unwrap();
        prop_assert!(rel(a.neg_loglik, b.neg_loglik) < 1e-9);
    }

    #[test]
    fn time_rescaling_maps_phi(seed in any::<u64>(), s in 0.2f64..5.0, phi in 0.05f64..0.95) {
        // stretching time by s at phi is the same as phi^s on the original times
        let mut r = rng(seed);
        let prob = random_problem(&mut r, 40, 2, 1);
        let stretched = rebuild(&prob, prob.y().to_vec(), prob.times().iter().map(|t| t * s).collect());
        let a = profiled_objective(&stretched, phi, Method::Ml).unwrap();
        let b = profiled_objective(&prob, phi.powf(s), Method::Ml).unwrap();
        prop_assert!(rel(a.neg_loglik, b.neg_loglik) < 1e-8);
    }

    #[test]
    fn group_order_does_not_matter(seed in any::<u64>(), phi in 0.05f64..0.95) {
        let mut r = rng(seed);
        let prob = random_problem(&mut r, 45, 3, 3);
        let mut groups: Vec<Group> = prob.groups().to_vec();
        groups.reverse();
        let swapped = GlsProblem::new(prob.x().to_vec(), prob.y().to_vec(), prob.times().to_vec(), groups, prob.column_labels().to_vec()).unwrap();
        let a = profiled_objective(&prob, phi, Method::Reml).unwrap();
        let b = profiled_objective(&swapped, phi, Method::Reml).unwrap();
        prop_assert!(rel(a.neg_loglik, b.neg_loglik) < 1e-10);
    }

    #[test]
    fn block_size_contract(n in 2usize..5000, k in 2usize..20) {
        prop_assume!(n >= k);
        let sizes = block_sizes(n, k).unwrap();
        prop_assert_eq!(sizes.len(), k);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        let (hi, lo) = (n.div_ceil(k), n / k);
        for (i, &s) in sizes.iter().enumerate() {
            prop_assert_eq!(s, if i < n % k { hi } else { lo });
        }
    }

    #[test]
    fn interval_width_grows_with_variance(point in -5.0f64..5.0, v in 1e-6f64..10.0, extra in 1e-6f64..10.0) {
        let z = 1.959963984540054;
        let (l0, u0) = interval_bounds(point, v, z);
        let (l1, u1) = interval_bounds(point, v + extra, z);
        prop_assert!(l0 < point && point < u0);
        prop_assert!(u1 - l1 > u0 - l0);
        prop_assert!(10f64.powf(l0) < 10f64.powf(point) && 10f64.powf(point) < 10f64.powf(u0));
        // width does not depend on the point
        let (l2, u2) = interval_bounds(point + 3.0, v, z);
        prop_assert!(((u2 - l2) - (u0 - l0)).abs() < 1e-12);
    }
}
