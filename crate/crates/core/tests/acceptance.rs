//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! Criteria 9-11 need the study dataset under `tests/fixtures/study/`
//! (`lab.csv`, `sensor_MR.csv`, `level_MR.csv`) and are skipped without it.
//! Every Monte Carlo criterion uses a seed fixed in this file.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use wq_surrogate::car1::{CorrelationSpec, GroupRule};
use wq_surrogate::data::{attach_levels, parse_csv, DataKind, Dataset, LevelSeries, Schema};
use wq_surrogate::design::{build_design, build_design_with, DesignMatrix, DesignOptions, ModelFormula, QuantileRule};
use wq_surrogate::gls::{fit, profiled_objective, sigma_confint, FittedModel, Method};
use wq_surrogate::infer::{anova_sequential, predict};
use wq_surrogate::oracle::loglik_dense_oracle;
use wq_surrogate::select::{backward_stepwise, compose, select_per_site, SiteWinner};
use wq_surrogate::validate::{block_sizes, cross_validate, make_blocks, simulate, SimGroup, SimulationSpec};

use common::{origin, random_problem, rng, simulated};

const TSS_FORMULA: &str = "log10(TSS) ~ log10(turbidity) + site + t15(turbidity) \
    + log10(turbidity):site + log10(turbidity):t15(turbidity)";

const NOX_FULL: &str = "log10(NOx) ~ log10(conductivity) + log10(turbidity) + log10(level) \
    + log10(level):log10(conductivity) + log10(level):log10(turbidity)";

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn check(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn skip(detail: &str) -> Outcome {
    Outcome {
        status: Status::Skip,
        detail: detail.to_owned(),
    }
}

fn f(s: &str) -> ModelFormula {
    ModelFormula::parse(s).unwrap()
}

fn c1_oracle() -> Outcome {
    const PHIS: [f64; 4] = [0.01, 0.5, 0.9, 0.99];
    let errs: Vec<f64> = (0..1000u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng(0xC1_0000 + i);
            let p = r.random_range(1..=8usize);
            let groups = r.random_range(1..=4usize);
            let n = r.random_range((p + 2).max(2 * groups)..=200);
            let prob = random_problem(&mut r, n, p, groups);
            let phi = PHIS[i as usize % 4];
            [Method::Ml, Method::Reml]
                .iter()
                .map(|&m| {
                    let fast = profiled_objective(&prob, phi, m).unwrap().neg_loglik;
                    let dense = loglik_dense_oracle(&prob, phi, m).unwrap();
                    (fast - dense).abs() / dense.abs()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    check(
        worst <= 1e-8,
        format!("max relative error {worst:.2e} over 1000 designs x 2 methods (limit 1e-8)"),
    )
}

fn c2_recovery() -> Outcome {
    const REPS: u64 = 500;
    let (beta, phi, sigma) = ([1.0, 2.0], 0.8, 0.5);
    let hits: Vec<[bool; 4]> = (0..REPS)
        .into_par_iter()
        .map(|rep| {
            let ds = simulated("y ~ x", &beta, phi, sigma, &[("A", 2000)], (0.25, 1.75), &[], 0xC2_0000 + rep);
            let d = build_design(&ds, &f("y ~ x")).unwrap();
            let m = fit(&d, &CorrelationSpec::by_site(), Method::Reml).unwrap();
            let se = m.beta_se();
            let z = 1.959963984540054;
            let covers = |est: f64, se: f64, truth: f64| (est - truth).abs() <= z * se;
            let in_iv = |iv: Option<wq_surrogate::gls::Interval>, truth: f64| iv.is_some_and(|iv| iv.lower <= truth && truth <= iv.upper);
            [
                covers(m.beta[0], se[0], beta[0]),
                covers(m.beta[1], se[1], beta[1]),
                in_iv(m.phi_interval, phi),
                in_iv(sigma_confint(&m, 0.95).ok(), sigma),
            ]
        })
        .collect();
    let rates: Vec<f64> = (0..4)
        .map(|j| hits.iter().filter(|h| h[j]).count() as f64 / REPS as f64)
        .collect();
    let ok = rates.iter().all(|r| (0.93..=0.97).contains(r));
    check(
        ok,
        format!(
            "coverage beta0 {:.3}, beta1 {:.3}, phi {:.3}, sigma {:.3} over {REPS} replicates (target 0.93-0.97)",
            rates[0], rates[1], rates[2], rates[3]
        ),
    )
}

fn c3_reml_bias() -> Outcome {
    const REPS: u64 = 1000;
    let formula = "y ~ x1 + x2 + x3 + x4 + x5";
    let pairs: Vec<(f64, f64)> = (0..REPS)
        .into_par_iter()
        .map(|rep| {
            let ds = simulated(formula, &[1.0, 0.5, -0.5, 0.3, 0.2, -0.1], 0.7, 1.0, &[("A", 60)], (0.5, 1.5), &[], 0xC3_0000 + rep);
            let d = build_design(&ds, &f(formula)).unwrap();
            let corr = CorrelationSpec::by_site();
            let ml = fit(&d, &corr, Method::Ml).unwrap().phi;
            let reml = fit(&d, &corr, Method::Reml).unwrap().phi;
            (ml, reml)
        })
        .collect();
    let ml = pairs.iter().map(|p| p.0).sum::<f64>() / REPS as f64;
    let reml = pairs.iter().map(|p| p.1).sum::<f64>() / REPS as f64;
    check(
        ml < reml,
        format!("mean phi ML {ml:.4} < REML {reml:.4} (true 0.7, n = 60, p = 6, {REPS} replicates)"),
    )
}

fn c4_cv_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for i in 0..20u64 {
        let mut r = rng(0xC4_0000 + i);
        let k = r.random_range(2..=6usize);
        let na = r.random_range(20..120usize);
        let nb = r.random_range(20..120usize);
        let form = "log10(y) ~ log10(x) + site";
        let ds = simulated(form, &[0.3, 0.8, 0.2], 0.7, 0.2, &[("A", na), ("B", nb)], (0.3, 4.0), &[("x", 1.0, 0.4)], 0xC4_1000 + i);
        let cv = cross_validate(&ds, &f(form), &CorrelationSpec::by_site(), k).unwrap();
        worst = worst.max((cv.cv_r2 - (1.0 - cv.cv_rmse.powi(2) / cv.var_y)).abs());
        // the same statistics rebuilt from the held-out predictions
        let n = cv.predictions.len() as f64;
        let rmse = (cv.predictions.iter().map(|p| (p.observed - p.predicted).powi(2)).sum::<f64>() / n).sqrt();
        let mean = cv.predictions.iter().map(|p| p.observed).sum::<f64>() / n;
        let var = cv.predictions.iter().map(|p| (p.observed - mean).powi(2)).sum::<f64>() / (n - 1.0);
        worst = worst.max((cv.cv_r2 - (1.0 - rmse * rmse / var)).abs());
        runs += 1;
    }
    let mut bad_partitions = 0;
    let mut r = rng(0xC4_2000);
    for _ in 0..100 {
        let k = r.random_range(2..=10usize);
        let n = r.random_range(k..=3000usize);
        let sizes = block_sizes(n, k).unwrap();
        let want: Vec<usize> = (0..k).map(|b| if b < n % k { n.div_ceil(k) } else { n / k }).collect();
        let ds = simulated("y ~ 1", &[0.0], 0.5, 1.0, &[("S", n)], (0.1, 1.0), &[], n as u64);
        let part = make_blocks(&ds, k).unwrap();
        let flat: Vec<usize> = part.sites[0].blocks.concat();
        let lens: Vec<usize> = part.sites[0].blocks.iter().map(Vec::len).collect();
        if sizes != want || lens != want || flat != (0..n).collect::<Vec<_>>() {
            bad_partitions += 1;
        }
    }
    check(
        worst <= 1e-12 && bad_partitions == 0,
        format!("max cvR2 identity error {worst:.1e} over {runs} runs; {bad_partitions}/100 partitions off contract"),
    )
}

fn c5_prediction_coverage() -> Outcome {
    let train = simulated("y ~ x", &[1.0, 2.0], 0.8, 0.5, &[("A", 2000)], (0.25, 1.75), &[], 0xC5_0000);
    let d = build_design(&train, &f("y ~ x")).unwrap();
    let model = fit(&d, &CorrelationSpec::by_site(), Method::Reml).unwrap();
    let last = d.times().into_iter().fold(0.0, f64::max);
    let mut r = rng(0xC5_0001);
    let times: Vec<f64> = wq_surrogate::validate::irregular_times(10_000, 5.0, 10.0, &mut r)
        .into_iter()
        .map(|t| t + last + 30.0)
        .collect();
    let test = simulate(&SimulationSpec {
        formula: f("y ~ x"),
        beta: vec![1.0, 2.0],
        phi: 0.8,
        sigma: 0.5,
        groups: vec![SimGroup { site: "A".into(), times }],
        origin: origin(),
        covariates: Default::default(),
        seed: 0xC5_0002,
    })
    .unwrap();
    let series = predict(&model, &test);
    let inside = series
        .rows
        .iter()
        .zip(test.observations())
        .filter(|(row, obs)| {
            let y = obs.value("y").unwrap();
            row.lower <= y && y <= row.upper
        })
        .count();
    let rate = inside as f64 / series.rows.len() as f64;
    check(
        series.rows.len() == 10_000 && (0.93..=0.97).contains(&rate),
        format!("coverage {rate:.4} on {} fresh points (target 0.93-0.97)", series.rows.len()),
    )
}

fn c6_df() -> Outcome {
    let tss = simulated(
        TSS_FORMULA,
        &[0.4, 1.0, 0.1, -0.1, 0.2, 0.05, -0.05, 0.1],
        0.85,
        0.2,
        &[("MR", 106), ("PR", 193), ("SC", 143)],
        (1.0, 10.0),
        &[("turbidity", 1.0, 0.6)],
        0xC6_0000,
    );
    let d = build_design(&tss, &f(TSS_FORMULA)).unwrap();
    let m = fit(&d, &CorrelationSpec::by_site(), Method::Reml).unwrap();
    let table = anova_sequential(&m, &d).unwrap();
    let tss_df: Vec<(usize, usize)> = table.rows.iter().map(|r| (r.df_num, r.df_den)).collect();
    let tss_ok = tss_df == vec![(1, 434), (1, 434), (2, 434), (1, 434), (2, 434), (1, 434)];

    let corr = CorrelationSpec::new(GroupRule::Level {
        var: "level".into(),
        rule: QuantileRule::Median,
    });
    let mut nox_dens = Vec::new();
    for (i, (site, n)) in [("MR", 58usize), ("PR", 81), ("SC", 94)].iter().enumerate() {
        let ds = simulated(
            NOX_FULL,
            &[-1.0, 0.3, 0.1, 0.2, -0.1, 0.05],
            0.86,
            0.3,
            &[(site, *n)],
            (1.0, 10.0),
            &[("conductivity", 2.5, 0.5), ("turbidity", 1.0, 0.5), ("level", 0.0, 0.3)],
            0xC6_1000 + i as u64,
        );
        let opts = DesignOptions {
            extra_required: corr.required_variables(),
            layout: None,
        };
        let d = build_design_with(&ds, &f(NOX_FULL), &opts).unwrap();
        let m = fit(&d, &corr, Method::Reml).unwrap();
        let t = anova_sequential(&m, &d).unwrap();
        let dens: Vec<usize> = t.rows.iter().map(|r| r.df_den).collect();
        nox_dens.push(if dens.iter().all(|&x| x == dens[0]) { dens[0] } else { usize::MAX });
    }
    check(
        tss_ok && nox_dens == vec![52, 75, 88],
        format!("TSS (df_num, df_den) {tss_df:?}; NOx denominators {nox_dens:?}"),
    )
}

fn c7_selection() -> Outcome {
    const REPS: u64 = 200;
    let truth = "y ~ x1 + x2 + x3 + x1:x3";
    let full = f(truth);
    let results: Vec<(bool, bool)> = (0..REPS)
        .into_par_iter()
        .map(|rep| {
            // x2 is pure noise; x1, x3 and their interaction are real
            let ds = simulated(truth, &[1.0, 0.5, 0.0, -0.4, 0.3], 0.6, 1.0, &[("A", 1000)], (0.5, 2.0), &[], 0xC7_0000 + rep);
            let trace = backward_stepwise(&ds, &full, &CorrelationSpec::by_site()).unwrap();
            let dropped = !trace.winner.terms().iter().any(|t| t.label() == "x2");
            let marginal = trace.steps.iter().all(|s| {
                s.formula
                    .terms()
                    .iter()
                    .all(|t| t.marginal_terms().iter().all(|m| s.formula.contains(m)))
            });
            (dropped, marginal)
        })
        .collect();
    let rate = results.iter().filter(|r| r.0).count() as f64 / REPS as f64;
    let violations = results.iter().filter(|r| !r.1).count();
    check(
        rate >= 0.85 && violations == 0,
        format!("noise covariate dropped in {:.1}% of {REPS} replicates (target >= 85%); {violations} marginality violations", 100.0 * rate),
    )
}

fn timing_design(n: usize) -> DesignMatrix {
    let form = "y ~ x1 + x2 + x3 + x4 + x5 + x6 + x7";
    let ds = simulated(
        form,
        &[1.0, 0.5, -0.5, 0.3, 0.2, -0.1, 0.4, 0.1],
        0.8,
        1.0,
        &[("A", n / 2), ("B", n - n / 2)],
        (0.01, 0.1),
        &[],
        0xC8_0000 + n as u64,
    );
    build_design(&ds, &f(form)).unwrap()
}

fn c8_performance() -> Outcome {
    // the two sizes are timed alternately and the best of five kept, so
    // drift in machine load hits both sides of the ratio
    let designs = [timing_design(100_000), timing_design(200_000)];
    let corr = CorrelationSpec::by_site();
    let mut best = [f64::INFINITY; 2];
    let mut evals = [0; 2];
    for _ in 0..5 {
        for (k, d) in designs.iter().enumerate() {
            let start = Instant::now();
            let m = fit(d, &corr, Method::Reml).unwrap();
            best[k] = best[k].min(start.elapsed().as_secs_f64());
            assert_eq!(m.p, 8);
            evals[k] = m.optimizer.evaluations;
        }
    }
    let [t1, t2] = best;
    let ratio = t2 / t1;
    check(
        t1 < 5.0 && ratio <= 2.3,
        format!(
            "n = 1e5, p = 8 REML fit {t1:.3} s (limit 5 s); doubling n x{ratio:.2} (limit 2.3); likelihood evaluations {} and {}",
            evals[0], evals[1]
        ),
    )
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/study")
}

fn load(path: &Path, kind: DataKind) -> Dataset {
    parse_csv(fs::File::open(path).unwrap(), &Schema::default(), kind).unwrap().0
}

fn tss_model(lab: &Dataset) -> FittedModel {
    let d = build_design(lab, &f(TSS_FORMULA)).unwrap();
    fit(&d, &CorrelationSpec::by_site(), Method::Reml).unwrap()
}

fn within(v: f64, target: f64, tol: f64) -> bool {
    (v - target).abs() <= tol
}

fn c9_tss(lab: &Dataset) -> Outcome {
    let m = tss_model(lab);
    let cv = cross_validate(lab, &f(TSS_FORMULA), &CorrelationSpec::by_site(), 5).unwrap();
    let (lo, hi) = m.phi_interval.map_or((f64::NAN, f64::NAN), |iv| (iv.lower, iv.upper));
    let ok = within(m.phi, 0.8737, 0.005)
        && within(lo, 0.8304, 0.01)
        && within(hi, 0.9072, 0.01)
        && within(cv.cv_rmse, 0.1799, 0.005)
        && within(cv.cv_r2, 0.9074, 0.005)
        && cv.cv_pc == 1.0;
    check(
        ok,
        format!(
            "phi {:.4} ({lo:.4}, {hi:.4}), cvRMSE {:.4}, cvR2 {:.2}%, cvPC {:.2}%",
            m.phi,
            cv.cv_rmse,
            100.0 * cv.cv_r2,
            100.0 * cv.cv_pc
        ),
    )
}

/// Per-site selection under the three level rules, the composite formula,
/// and each site's winning grouping.
fn nox_composite(lab: &Dataset) -> (ModelFormula, Vec<SiteWinner>) {
    let full = f(NOX_FULL);
    let winners: Vec<SiteWinner> = ["MR", "PR", "SC"]
        .iter()
        .map(|site| {
            let sel = select_per_site(lab, &full, site, &QuantileRule::ALL, "level", 5).unwrap();
            SiteWinner {
                site: site.to_string(),
                formula: sel.best_formula,
                grouping: sel.best_grouping,
            }
        })
        .collect();
    (compose(&winners, Some(&full)).unwrap().union, winners)
}

fn c10_nox(lab: &Dataset) -> Outcome {
    let (composite, winners) = nox_composite(lab);
    let targets = [("MR", 0.2581, 0.8612), ("PR", 0.1742, 0.8607), ("SC", 0.3505, 0.8657)];
    let mut ok = true;
    let mut parts = Vec::new();
    for ((site, r2, phi), w) in targets.iter().zip(&winners) {
        let ds = lab.filter_site(site);
        let median = matches!(w.grouping.grouping, GroupRule::Level { rule: QuantileRule::Median, .. });
        let cv = cross_validate(&ds, &composite, &w.grouping, 5).unwrap();
        let opts = DesignOptions {
            extra_required: w.grouping.required_variables(),
            layout: None,
        };
        let m = fit(&build_design_with(&ds, &composite, &opts).unwrap(), &w.grouping, Method::Reml).unwrap();
        ok &= median && within(cv.cv_r2, *r2, 0.02) && within(m.phi, *phi, 0.01);
        parts.push(format!(
            "{site}: {} cvR2 {:.2}% phi {:.4}",
            w.grouping.grouping,
            100.0 * cv.cv_r2,
            m.phi
        ));
    }
    check(ok, parts.join("; "))
}

fn c11_extremes(lab: &Dataset, dir: &Path) -> Outcome {
    let sensor = load(&dir.join("sensor_MR.csv"), DataKind::Sensor);
    let levels = load(&dir.join("level_MR.csv"), DataKind::Sensor);
    let tss = predict(&tss_model(lab), &sensor);
    let top = tss.max_point().unwrap();
    let top_turb = sensor
        .observations()
        .iter()
        .find(|o| o.timestamp == top.timestamp && o.site == top.site)
        .and_then(|o| o.value("turbidity"))
        .unwrap_or(f64::NAN);
    let tss_ok = within(top.point_back, 888.0, 0.05 * 888.0)
        && within(top_turb, 396.0, 1.0)
        && top.extrapolated.iter().any(|v| v == "turbidity");

    let (composite, winners) = nox_composite(lab);
    let mr = winners.iter().find(|w| w.site == "MR").unwrap();
    let opts = DesignOptions {
        extra_required: mr.grouping.required_variables(),
        layout: None,
    };
    let mr_lab = lab.filter_site("MR");
    let model = fit(&build_design_with(&mr_lab, &composite, &opts).unwrap(), &mr.grouping, Method::Reml).unwrap();
    let with_levels = attach_levels(&sensor, &LevelSeries::from_dataset(&levels, "level").unwrap(), "level").unwrap();
    let nox = predict(&model, &with_levels);
    let peak = nox.max_point().unwrap();
    let range = peak.upper_back - peak.lower_back;
    let nox_ok = range > 30_000.0 && peak.extrapolated.iter().any(|v| v == "conductivity");
    check(
        tss_ok && nox_ok,
        format!(
            "max TSS {:.1} mg/L at {top_turb:.0} NTU (flags {:?}); NOx peak interval range {range:.0} mg/L (flags {:?})",
            top.point_back, top.extrapolated, peak.extrapolated
        ),
    )
}

fn main() -> ExitCode {
    type Criterion<'a> = (&'a str, Box<dyn Fn() -> Outcome + 'a>);
    let dir = fixture_dir();
    let lab = dir.join("lab.csv");
    let have_fixture = lab.exists() && dir.join("sensor_MR.csv").exists() && dir.join("level_MR.csv").exists();
    let lab_data = have_fixture.then(|| load(&lab, DataKind::Laboratory));
    let absent = "study dataset not present under tests/fixtures/study";

    let criteria: Vec<Criterion> = vec![
        ("C1 oracle equivalence", Box::new(c1_oracle)),
        ("C2 parameter recovery", Box::new(c2_recovery)),
        ("C3 REML vs ML bias", Box::new(c3_reml_bias)),
        ("C4 cvR2 identity and blocks", Box::new(c4_cv_identity)),
        ("C5 prediction coverage", Box::new(c5_prediction_coverage)),
        ("C6 df arithmetic", Box::new(c6_df)),
        ("C7 selection sanity", Box::new(c7_selection)),
        ("C8 performance", Box::new(c8_performance)),
        (
            "C9 TSS model (fixture)",
            Box::new(|| lab_data.as_ref().map_or_else(|| skip(absent), c9_tss)),
        ),
        (
            "C10 NOx per site (fixture)",
            Box::new(|| lab_data.as_ref().map_or_else(|| skip(absent), c10_nox)),
        ),
        (
            "C11 prediction extremes (fixture)",
            Box::new(|| lab_data.as_ref().map_or_else(|| skip(absent), |l| c11_extremes(l, &dir))),
        ),
    ];

    let mut failed = 0;
    for (name, run) in &criteria {
        let start = Instant::now();
        let out = run();
        let tag = match out.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Skip => "SKIP",
        };
        println!("{tag} {name}: {} [{:.1} s]", out.detail, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} criteria, {failed} failed", criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
