//! Blocked chronological cross-validation and the CAR(1) data generator.

use std::collections::{BTreeMap, BTreeSet};

use chrono::Duration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::car1::{check_phi, lag_terms, CorrelationSpec};
use crate::data::{DataKind, Dataset, Observation, Timestamp};
use crate::design::{build_design_with, Category, DesignLayout, DesignMatrix, DesignOptions, Factor, ModelFormula};
use crate::error::{Error, Result};
use crate::gls::{fit, Method};
use crate::infer::{interval_bounds, z_quantile, PREDICTION_LEVEL};

/// Sizes of `k` contiguous blocks over `n` rows: `ceil(n/k)` for the first
/// `n mod k` blocks, `floor(n/k)` for the rest.
pub fn block_sizes(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Partition("block count must be positive".into()));
    }
    if n < k {
        return Err(Error::Partition(format!("{n} rows cannot fill {k} blocks")));
    }
    let (q, r) = (n / k, n % k);
    Ok((0..k).map(|i| if i < r { q + 1 } else { q }).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteBlocks {
    pub site: String,
    /// Contiguous runs of row indices in time order.
    pub blocks: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub sites: Vec<SiteBlocks>,
}

impl BlockPartition {
    pub fn block_count(&self) -> usize {
        self.sites.iter().map(|s| s.blocks.len()).sum()
    }
}

fn partition_rows(site_rows: Vec<(String, Vec<usize>)>, k: usize) -> Result<BlockPartition> {
    let sites = site_rows
        .into_iter()
        .map(|(site, rows)| {
            let sizes = block_sizes(rows.len(), k).map_err(|e| Error::Partition(format!("site {site}: {e}")))?;
            let mut start = 0;
            let blocks = sizes
                .into_iter()
                .map(|s| {
                    let b = rows[start..start + s].to_vec();
                    start += s;
                    b
                })
                .collect();
            Ok(SiteBlocks { site, blocks })
        })
        .collect::<Result<_>>()?;
    Ok(BlockPartition { sites })
}

/// Splits each site's observations (canonical dataset indices) into `k`
/// chronological blocks.
pub fn make_blocks(dataset: &Dataset, k: usize) -> Result<BlockPartition> {
    let mut per_site: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, o) in dataset.observations().iter().enumerate() {
        per_site.entry(o.site.clone()).or_default().push(i);
    }
    partition_rows(per_site.into_iter().collect(), k)
}

/// Blocks over design rows.
pub fn make_design_blocks(design: &DesignMatrix, k: usize) -> Result<BlockPartition> {
    partition_rows(design.site_rows(), k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDetail {
    pub site: String,
    pub block: usize,
    pub held_out: usize,
    pub phi: Option<f64>,
    pub sum_squared_error: f64,
    pub hits: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPrediction {
    pub site: String,
    pub timestamp: Timestamp,
    pub observed: f64,
    pub predicted: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvStats {
    /// On the model (log10) scale.
    pub cv_rmse: f64,
    /// Fraction of held-out responses inside their 95% interval.
    pub cv_pc: f64,
    /// `1 - cv_rmse^2 / var_y`.
    pub cv_r2: f64,
    /// RMSE of back-transformed predictions against raw observations.
    pub rmse_backtransformed: f64,
    /// Sample variance (n - 1) of the full response, model scale.
    pub var_y: f64,
    pub blocks_per_site: usize,
    pub predicted: usize,
    pub total: usize,
    /// True when any fold failed; statistics then cover the other folds.
    pub partial: bool,
    pub folds: Vec<FoldDetail>,
    pub predictions: Vec<CvPrediction>,
}

struct FoldOutcome {
    detail: FoldDetail,
    predictions: Vec<(usize, f64, f64, f64)>,
}

/// Leave-one-block-out cross-validation with REML refits. Every fold refits
/// on all rows outside its block (pooled over the sites in `dataset`) and
/// predicts the block with the infinite-horizon interval.
pub fn cross_validate(dataset: &Dataset, formula: &ModelFormula, corr: &CorrelationSpec, k: usize) -> Result<CvStats> {
    let opts = DesignOptions {
        extra_required: corr.required_variables(),
        layout: None,
    };
    let design = build_design_with(dataset, formula, &opts)?;
    let partition = make_design_blocks(&design, k)?;
    let z = z_quantile(PREDICTION_LEVEL);

    let folds: Vec<(String, usize, Vec<usize>)> = partition
        .sites
        .iter()
        .flat_map(|s| s.blocks.iter().enumerate().map(move |(b, rows)| (s.site.clone(), b, rows.clone())))
        .collect();

    let outcomes: Vec<FoldOutcome> = folds
        .par_iter()
        .map(|(site, block, held)| {
            let held_set: BTreeSet<usize> = held.iter().copied().collect();
            let train: Vec<usize> = (0..design.n).filter(|i| !held_set.contains(i)).collect();
            let mut detail = FoldDetail {
                site: site.clone(),
                block: *block,
                held_out: held.len(),
                phi: None,
                sum_squared_error: 0.0,
                hits: 0,
                error: None,
            };
            let model = match fit(&design.subset(&train), corr, Method::Reml) {
                Ok(m) => m,
                Err(e) => {
                    detail.error = Some(e.to_string());
                    return FoldOutcome {
                        detail,
                        predictions: Vec::new(),
                    };
                }
            };
            detail.phi = Some(model.phi);
            let predictions: Vec<(usize, f64, f64, f64)> = held
                .iter()
                .map(|&i| {
                    let x = design.row(i);
                    let point = model.linear_predictor(x);
                    let (lo, hi) = interval_bounds(point, model.sigma2 + model.coef_variance(x), z);
                    (i, point, lo, hi)
                })
                .collect();
            for &(i, point, lo, hi) in &predictions {
                let obs = design.y[i];
                detail.sum_squared_error += (obs - point).powi(2);
                if lo <= obs && obs <= hi {
                    detail.hits += 1;
                }
            }
            FoldOutcome { detail, predictions }
        })
        .collect();

    let back = |v: f64| if formula.response().log10 { 10f64.powf(v) } else { v };
    let (mut sse, mut sse_back, mut hits, mut predicted) = (0.0, 0.0, 0usize, 0usize);
    let mut predictions = Vec::new();
    let mut details = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        sse += o.detail.sum_squared_error;
        hits += o.detail.hits;
        for (i, point, lo, hi) in o.predictions {
            let observed = design.y[i];
            sse_back += (back(point) - back(observed)).powi(2);
            predicted += 1;
            predictions.push(CvPrediction {
                site: design.rows[i].site.clone(),
                timestamp: design.rows[i].timestamp,
                observed,
                predicted: point,
                lower: lo,
                upper: hi,
            });
        }
        details.push(o.detail);
    }
    if predicted == 0 {
        let reasons: Vec<String> = details.iter().filter_map(|d| d.error.clone()).collect();
        return Err(Error::Consistency(format!("every fold failed: {}", reasons.join("; "))));
    }
    let cv_rmse = (sse / predicted as f64).sqrt();
    let var_y = design.response_variance();
    Ok(CvStats {
        cv_rmse,
        cv_pc: hits as f64 / predicted as f64,
        cv_r2: 1.0 - cv_rmse * cv_rmse / var_y,
        rmse_backtransformed: (sse_back / predicted as f64).sqrt(),
        var_y,
        blocks_per_site: k,
        predicted,
        total: design.n,
        partial: details.iter().any(|d| d.error.is_some()),
        folds: details,
        predictions,
    })
}

/// Model-scale distribution of a simulated covariate. Log10 covariates are
/// stored raw as `10^draw`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateDist {
    pub mean: f64,
    pub sd: f64,
}

impl Default for CovariateDist {
    fn default() -> Self {
        Self { mean: 0.0, sd: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGroup {
    pub site: String,
    /// Strictly increasing, decimal days from the origin.
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub formula: ModelFormula,
    pub beta: Vec<f64>,
    pub phi: f64,
    pub sigma: f64,
    pub groups: Vec<SimGroup>,
    pub origin: Timestamp,
    /// Per-variable covariate distributions; unlisted variables use N(0, 1).
    pub covariates: BTreeMap<String, CovariateDist>,
    pub seed: u64,
}

/// Rng for group `index` under `seed`: one ChaCha stream per group.
pub fn group_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// CAR(1) errors with marginal standard deviation `sigma` by the innovations
/// recursion `e_k = r_k e_{k-1} + sigma sqrt(1 - r_k^2) u_k`.
pub fn car1_noise<R: Rng>(times: &[f64], phi: f64, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_phi(phi)?;
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma = {sigma} must be non-negative")));
    }
    let mut out: Vec<f64> = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let u: f64 = rng.sample(StandardNormal);
        let e = if k == 0 {
            sigma * u
        } else {
            let dt = t - times[k - 1];
            if !(dt > 0.0) {
                return Err(Error::Ordering {
                    group: String::new(),
                    position: k,
                });
            }
            let (r, one_minus) = lag_terms(phi, dt);
            r * out[k - 1] + sigma * one_minus.sqrt() * u
        };
        out.push(e);
    }
    Ok(out)
}

/// Draws covariates and `y = X beta + e` with CAR(1) errors per group. Each
/// group becomes one site. Deterministic for a given seed.
pub fn simulate(spec: &SimulationSpec) -> Result<Dataset> {
    check_phi(spec.phi)?;
    let f = &spec.formula;
    let mut levels = BTreeMap::new();
    for t in f.terms() {
        for factor in t.factors() {
            match factor {
                Factor::Site => {
                    let sites: BTreeSet<String> = spec.groups.iter().map(|g| g.site.clone()).collect();
                    levels.insert(factor.to_string(), sites.into_iter().collect::<Vec<_>>());
                }
                Factor::T15 { .. } => {
                    levels.insert(factor.to_string(), vec![Category::low().label, Category::high().label]);
                }
                Factor::Categorical { var } => {
                    return Err(Error::Input(format!("cannot simulate categorical cat({var})")));
                }
                Factor::Continuous { .. } => {}
            }
        }
    }
    let layout = DesignLayout {
        levels,
        ranges: BTreeMap::new(),
    };
    let p = layout.column_labels(f).len();
    if spec.beta.len() != p {
        return Err(Error::Input(format!("beta has {} entries, design has {p} columns", spec.beta.len())));
    }
    let variables = f.covariate_variables();
    let log_vars: BTreeSet<String> = f
        .terms()
        .iter()
        .flat_map(|t| t.factors())
        .filter_map(|fa| match fa {
            Factor::Continuous { var, log10: true } => Some(var.clone()),
            _ => None,
        })
        .collect();

    let mut observations = Vec::new();
    for (gi, group) in spec.groups.iter().enumerate() {
        let mut rng = group_rng(spec.seed, gi);
        let noise = car1_noise(&group.times, spec.phi, spec.sigma, &mut rng)?;
        let mut last: Option<Timestamp> = None;
        for (k, &t) in group.times.iter().enumerate() {
            let timestamp = spec.origin + Duration::seconds((t * 86_400.0).round() as i64);
            if last.is_some_and(|l| timestamp <= l) {
                return Err(Error::Ordering {
                    group: group.site.clone(),
                    position: k,
                });
            }
            last = Some(timestamp);
            let mut values = BTreeMap::new();
            for var in &variables {
                let d = spec.covariates.get(var).copied().unwrap_or_default();
                let draw: f64 = d.mean + d.sd * rng.sample::<f64, _>(StandardNormal);
                let raw = if log_vars.contains(var) { 10f64.powf(draw) } else { draw };
                values.insert(var.clone(), Some(raw));
            }
            let mut obs = Observation {
                timestamp,
                site: group.site.clone(),
                values,
            };
            let x = layout
                .encode(f, &obs)
                .map_err(|e| Error::Domain(format!("simulated row: {e}")))?;
            let mean: f64 = x.iter().zip(&spec.beta).map(|(a, b)| a * b).sum();
            let y = mean + noise[k];
            let raw = if f.response().log10 { 10f64.powf(y) } else { y };
            obs.values.insert(f.response().var.clone(), Some(raw));
            observations.push(obs);
        }
    }
    let mut all_vars = vec![f.response().var.clone()];
    all_vars.extend(variables);
    Dataset::new(DataKind::Laboratory, all_vars, observations)
}

/// Irregular sampling times: gaps drawn uniformly from `[min_gap, max_gap]`.
pub fn irregular_times<R: Rng>(n: usize, min_gap: f64, max_gap: f64, rng: &mut R) -> Vec<f64> {
    let mut t = 0.0;
    (0..n)
        .map(|i| {
            if i > 0 {
                t += rng.random_range(min_gap..=max_gap);
            }
            t
        })
        .collect()
}
