#![allow(dead_code)]

use chrono::{TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use wq_surrogate::car1::Group;
use wq_surrogate::data::{Dataset, Timestamp};
use wq_surrogate::design::ModelFormula;
use wq_surrogate::gls::GlsProblem;
use wq_surrogate::validate::{irregular_times, simulate, CovariateDist, SimGroup, SimulationSpec};

pub fn origin() -> Timestamp {
    Utc.with_ymd_and_hms(2016, 1, 1, 0, 0, 0).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random grouped problem: intercept plus `p - 1` standard normal columns,
/// `groups` blocks of irregular times, response standard normal.
pub fn random_problem(rng: &mut ChaCha8Rng, n: usize, p: usize, groups: usize) -> GlsProblem {
    let mut x = Vec::with_capacity(n * p);
    for _ in 0..n {
        x.push(1.0);
        for _ in 1..p {
            x.push(rng.sample(StandardNormal));
        }
    }
    let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut times = vec![0.0; n];
    let mut gs = Vec::new();
    let mut start = 0;
    for g in 0..groups {
        let len = if g + 1 == groups { n - start } else { n / groups };
        let t = irregular_times(len, 0.05, 3.0, rng);
        times[start..start + len].copy_from_slice(&t);
        gs.push(Group {
            label: format!("g{g}"),
            rows: (start..start + len).collect(),
        });
        start += len;
    }
    let labels = (0..p).map(|j| format!("c{j}")).collect();
    GlsProblem::new(x, y, times, gs, labels).unwrap()
}

/// Simulated dataset with one site per entry of `sizes`, irregular gaps
/// uniform on `[min_gap, max_gap]` days.
#[allow(clippy::too_many_arguments)]
pub fn simulated(
    formula: &str,
    beta: &[f64],
    phi: f64,
    sigma: f64,
    sizes: &[(&str, usize)],
    gaps: (f64, f64),
    covariates: &[(&str, f64, f64)],
    seed: u64,
) -> Dataset {
    let mut r = rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let groups = sizes
        .iter()
        .map(|(site, n)| SimGroup {
            site: site.to_string(),
            times: irregular_times(*n, gaps.0, gaps.1, &mut r),
        })
        .collect();
    let spec = SimulationSpec {
        formula: ModelFormula::parse(formula).unwrap(),
        beta: beta.to_vec(),
        phi,
        sigma,
        groups,
        origin: origin(),
        covariates: covariates
            .iter()
            .map(|(v, mean, sd)| (v.to_string(), CovariateDist { mean: *mean, sd: *sd }))
            .collect(),
        seed,
    };
    simulate(&spec).unwrap()
}

/// Kolmogorov-Smirnov distance of the sample from Uniform(0, 1).
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &u)| {
            let lo = u - i as f64 / n;
            let hi = (i + 1) as f64 / n - u;
            lo.max(hi)
        })
        .fold(0.0, f64::max)
}
