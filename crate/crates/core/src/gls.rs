//! Generalised least squares with CAR(1) errors.
//!
//! For fixed `phi` the design and response are whitened group by group and
//! folded row by row into the triangular factor of `[X_w | y_w]` with Givens
//! rotations. Everything the profiled likelihood needs falls out of that
//! factor: `beta` by back substitution, the residual sum of squares as the
//! squared corner element, and `ln |X' Lambda^-1 X|` from its diagonal. The
//! remaining one-dimensional problem in `phi` is solved on the logit scale.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::artifact::{lenient_f64, Provenance, ARTIFACT_VERSION};
use crate::car1::{check_phi, lag_terms, CorrelationSpec, Group, TIME_UNIT};
use crate::data::Timestamp;
use crate::design::{DesignLayout, DesignMatrix, ModelFormula};
use crate::error::{Error, Result};
use crate::optimize::grid_then_brent;

/// Relative size of a triangular pivot below which a column is treated as
/// collinear with the columns before it.
const RANK_TOLERANCE: f64 = 1e-10;

/// Logit-scale step for the second difference behind the phi interval.
const CURVATURE_STEP: f64 = 5e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ml,
    Reml,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ml => "ml",
            Method::Reml => "reml",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ml" => Ok(Method::Ml),
            "reml" => Ok(Method::Reml),
            other => Err(Error::Input(format!("unknown method {other:?}"))),
        }
    }
}

/// Numeric GLS problem: row-major `x` (n x p), response, times and a
/// partition of the rows into independent CAR(1) groups.
#[derive(Debug, Clone)]
pub struct GlsProblem {
    n: usize,
    p: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    times: Vec<f64>,
    groups: Vec<Group>,
    column_labels: Vec<String>,
}

impl GlsProblem {
    pub fn new(
        x: Vec<f64>,
        y: Vec<f64>,
        times: Vec<f64>,
        groups: Vec<Group>,
        column_labels: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        let p = column_labels.len();
        if p == 0 || x.len() != n * p || times.len() != n {
            return Err(Error::Input(format!(
                "inconsistent problem sizes: x {} values, y {n}, times {}, p {p}",
                x.len(),
                times.len()
            )));
        }
        if x.iter().chain(&y).chain(&times).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite entry in design, response or times".into()));
        }
        let mut seen = vec![false; n];
        for g in &groups {
            for (k, &i) in g.rows.iter().enumerate() {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Input(format!("groups do not partition the rows (row {i})")));
                }
                if k > 0 && !(times[i] > times[g.rows[k - 1]]) {
                    return Err(Error::Ordering {
                        group: g.label.clone(),
                        position: k,
                    });
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Input("groups do not cover every row".into()));
        }
        Ok(Self {
            n,
            p,
            x,
            y,
            times,
            groups,
            column_labels,
        })
    }

    pub fn from_design(design: &DesignMatrix, corr: &CorrelationSpec) -> Result<Self> {
        Self::new(
            design.x.clone(),
            design.y.clone(),
            design.times(),
            corr.groups(design)?,
            design.column_labels.clone(),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn column_labels(&self) -> &[String] {
        &self.column_labels
    }
}

/// Upper-triangular factor of the whitened `[X | y]`, row-major (p+1)^2.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedFactor {
    pub p: usize,
    pub r: Vec<f64>,
    pub logdet_lambda: f64,
}

impl WhitenedFactor {
    fn m(&self) -> usize {
        self.p + 1
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.m() + j]
    }

    /// Components of `Q' y_w` along the design columns. Their squares are
    /// the sequential sums of squares in column order.
    pub fn qty(&self) -> Vec<f64> {
        (0..self.p).map(|j| self.at(j, self.p)).collect()
    }

    pub fn rss(&self) -> f64 {
        self.at(self.p, self.p).powi(2)
    }

    pub fn solve_beta(&self) -> Vec<f64> {
        let p = self.p;
        let mut beta = vec![0.0; p];
        for j in (0..p).rev() {
            let s: f64 = (j + 1..p).map(|k| self.at(j, k) * beta[k]).sum();
            beta[j] = (self.at(j, p) - s) / self.at(j, j);
        }
        beta
    }

    /// `(X_w' X_w)^-1 = R^-1 R^-T`, row-major p x p.
    pub fn xtx_inverse(&self) -> Vec<f64> {
        let p = self.p;
        let mut rinv = vec![0.0; p * p];
        for j in 0..p {
            rinv[j * p + j] = 1.0 / self.at(j, j);
            for i in (0..j).rev() {
                let s: f64 = (i + 1..=j).map(|k| self.at(i, k) * rinv[k * p + j]).sum();
                rinv[i * p + j] = -s / self.at(i, i);
            }
        }
        let mut out = vec![0.0; p * p];
        for i in 0..p {
            for j in i..p {
                let s: f64 = (j..p).map(|k| rinv[i * p + k] * rinv[j * p + k]).sum();
                out[i * p + j] = s;
                out[j * p + i] = s;
            }
        }
        out
    }

    pub fn logdet_xtx(&self) -> f64 {
        (0..self.p).map(|j| 2.0 * self.at(j, j).abs().ln()).sum()
    }
}

fn givens_absorb(r: &mut [f64], w: &mut [f64], m: usize) {
    for j in 0..m {
        let b = w[j];
        if b == 0.0 {
            continue;
        }
        let a = r[j * m + j];
        let h = (a * a + b * b).sqrt();
        let (c, s) = (a / h, b / h);
        r[j * m + j] = h;
        for k in j + 1..m {
            let rk = r[j * m + k];
            let wk = w[k];
            r[j * m + k] = c * rk + s * wk;
            w[k] = c * wk - s * rk;
        }
    }
}

/// Whitens the problem at `phi` and factorises it. Rows are folded in
/// canonical group order, time order within group.
pub fn whitened_factor(problem: &GlsProblem, phi: f64) -> Result<WhitenedFactor> {
    check_phi(phi)?;
    let (p, m) = (problem.p, problem.p + 1);
    let mut r = vec![0.0; m * m];
    let mut w = vec![0.0; m];
    let mut col_sq = vec![0.0; p];
    let mut logdet = 0.0;
    for g in &problem.groups {
        let mut prev: Option<usize> = None;
        for &i in &g.rows {
            let xi = &problem.x[i * p..(i + 1) * p];
            match prev {
                None => {
                    w[..p].copy_from_slice(xi);
                    w[p] = problem.y[i];
                }
                Some(j) => {
                    let (rho, one_minus) = lag_terms(phi, problem.times[i] - problem.times[j]);
                    let scale = 1.0 / one_minus.sqrt();
                    let xj = &problem.x[j * p..(j + 1) * p];
                    for c in 0..p {
                        w[c] = (xi[c] - rho * xj[c]) * scale;
                    }
                    w[p] = (problem.y[i] - rho * problem.y[j]) * scale;
                    logdet += one_minus.ln();
                }
            }
            for c in 0..p {
                col_sq[c] += w[c] * w[c];
            }
            givens_absorb(&mut r, &mut w, m);
            prev = Some(i);
        }
    }
    let collinear: Vec<String> = (0..p)
        .filter(|&j| col_sq[j] == 0.0 || r[j * m + j].abs() <= RANK_TOLERANCE * col_sq[j].sqrt())
        .map(|j| problem.column_labels[j].clone())
        .collect();
    if !collinear.is_empty() {
        return Err(Error::Singular { columns: collinear });
    }
    Ok(WhitenedFactor {
        p,
        r,
        logdet_lambda: logdet,
    })
}

/// Profiled likelihood at a fixed `phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub phi: f64,
    pub method: Method,
    /// Negative (restricted) log-likelihood with beta and sigma^2 profiled out.
    pub neg_loglik: f64,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub rss: f64,
    pub factor: WhitenedFactor,
}

/// ML: `sigma^2 = RSS/n`, `-2l = n ln(2 pi sigma^2) + ln|Lambda| + n`.
/// REML: `sigma^2 = RSS/(n-p)`, `-2l = (n-p) ln(2 pi sigma^2) + ln|Lambda|
/// + ln|X' Lambda^-1 X| + (n-p)`.
pub fn profiled_objective(problem: &GlsProblem, phi: f64, method: Method) -> Result<Profile> {
    if problem.n <= problem.p {
        return Err(Error::Input(format!("need n > p (n = {}, p = {})", problem.n, problem.p)));
    }
    let factor = whitened_factor(problem, phi)?;
    let beta = factor.solve_beta();
    let rss = factor.rss();
    Ok(profile_from_factor(problem.n, phi, method, factor, beta, rss))
}

fn profile_from_factor(n: usize, phi: f64, method: Method, factor: WhitenedFactor, beta: Vec<f64>, rss: f64) -> Profile {
    let p = factor.p;
    let two_pi = 2.0 * std::f64::consts::PI;
    let (sigma2, neg2) = match method {
        Method::Ml => {
            let nf = n as f64;
            let s2 = rss / nf;
            (s2, nf * (two_pi * s2).ln() + factor.logdet_lambda + nf)
        }
        Method::Reml => {
            let df = (n - p) as f64;
            let s2 = rss / df;
            (
                s2,
                df * (two_pi * s2).ln() + factor.logdet_lambda + factor.logdet_xtx() + df,
            )
        }
    };
    Profile {
        phi,
        method,
        neg_loglik: 0.5 * neg2,
        beta,
        sigma2,
        rss,
        factor,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub phi_min: f64,
    pub phi_max: f64,
    /// Convergence tolerance on the logit(phi) scale.
    pub tolerance: f64,
    pub max_iter: usize,
    pub grid_points: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            phi_min: 1e-6,
            phi_max: 1.0 - 1e-6,
            tolerance: 1e-8,
            max_iter: 200,
            grid_points: 25,
        }
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlsFit {
    pub profile: Profile,
    pub iterations: usize,
    pub evaluations: usize,
    /// Second derivative of the negative log-likelihood in logit(phi) at the
    /// optimum; `None` at a bound or when not positive.
    pub logit_curvature: Option<f64>,
    /// Variance of `ln sigma^2` from the joint information of
    /// `(logit phi, ln sigma^2)`; `None` whenever the curvature is.
    pub log_sigma2_variance: Option<f64>,
    pub at_bound: bool,
    pub degenerate: bool,
}

/// Minimises the profiled objective over phi.
pub fn fit_problem(problem: &GlsProblem, method: Method, opts: &FitOptions) -> Result<GlsFit> {
    if problem.n <= problem.p + 1 {
        return Err(Error::Input(format!(
            "need n > p + 1 to estimate phi (n = {}, p = {})",
            problem.n, problem.p
        )));
    }
    let start = profiled_objective(problem, opts.phi_min, method)?;
    let mean = problem.y.iter().sum::<f64>() / problem.n as f64;
    let tss: f64 = problem.y.iter().map(|v| (v - mean).powi(2)).sum();
    if start.rss <= 1e-24 * tss.max(f64::MIN_POSITIVE) {
        return Ok(GlsFit {
            profile: start,
            iterations: 0,
            evaluations: 1,
            logit_curvature: None,
            log_sigma2_variance: None,
            at_bound: true,
            degenerate: true,
        });
    }

    let objective = |t: f64| profiled_objective(problem, logistic(t), method).map(|pr| pr.neg_loglik);
    let (lo, hi) = (logit(opts.phi_min), logit(opts.phi_max));
    let min = grid_then_brent(objective, lo, hi, opts.grid_points, opts.tolerance, opts.max_iter)?;
    let profile = profiled_objective(problem, logistic(min.x), method)?;

    let h = CURVATURE_STEP;
    let at_bound = min.x - lo < 2.0 * h || hi - min.x < 2.0 * h;
    let (logit_curvature, log_sigma2_variance) = if at_bound {
        (None, None)
    } else {
        let up = profiled_objective(problem, logistic(min.x + h), method)?;
        let down = profiled_objective(problem, logistic(min.x - h), method)?;
        let curvature =
            Some((up.neg_loglik - 2.0 * profile.neg_loglik + down.neg_loglik) / (h * h)).filter(|c| *c > 0.0 && c.is_finite());
        (curvature, curvature.and_then(|_| log_sigma2_variance(&profile, &up, &down, h)))
    };
    Ok(GlsFit {
        profile,
        iterations: min.iterations,
        evaluations: min.evaluations + if at_bound { 1 } else { 3 },
        logit_curvature,
        log_sigma2_variance,
        at_bound,
        degenerate: false,
    })
}

/// With `s = ln sigma^2` and `-2l(t, s) = m s + L(t) + R(t) e^-s` (`m` the
/// residual degrees of freedom, `L` the log determinants, `R` the whitened
/// RSS), inverts the Hessian at the optimum using second differences in
/// `t = logit phi`.
fn log_sigma2_variance(at: &Profile, up: &Profile, down: &Profile, h: f64) -> Option<f64> {
    let m = at.rss / at.sigma2;
    let logdets = |pr: &Profile| match pr.method {
        Method::Ml => pr.factor.logdet_lambda,
        Method::Reml => pr.factor.logdet_lambda + pr.factor.logdet_xtx(),
    };
    let r = at.rss;
    let r1 = (up.rss - down.rss) / (2.0 * h);
    let r2 = (up.rss - 2.0 * r + down.rss) / (h * h);
    let l2 = (logdets(up) - 2.0 * logdets(at) + logdets(down)) / (h * h);
    let f_tt = l2 + r2 * m / r;
    let f_ts = -r1 * m / r;
    let f_ss = m;
    let det = f_tt * f_ss - f_ts * f_ts;
    Some(2.0 * f_tt / det).filter(|v| *v > 0.0 && v.is_finite() && det > 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerReport {
    pub options: FitOptions,
    pub iterations: usize,
    pub evaluations: usize,
    pub at_bound: bool,
}

/// Everything needed to report, audit and predict from a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub version: u32,
    pub formula: ModelFormula,
    pub correlation: CorrelationSpec,
    pub method: Method,
    pub n: usize,
    pub p: usize,
    pub groups: usize,
    /// Sites present in the fitted rows.
    pub sites: Vec<String>,
    pub column_labels: Vec<String>,
    pub beta: Vec<f64>,
    pub phi: f64,
    pub sigma2: f64,
    #[serde(with = "lenient_f64")]
    pub loglik: f64,
    #[serde(with = "lenient_f64")]
    pub aic: f64,
    /// Fixed effects plus phi and sigma^2.
    pub aic_parameters: usize,
    /// sigma^2 (X' Lambda^-1 X)^-1, row-major p x p.
    pub beta_cov: Vec<f64>,
    pub phi_logit_curvature: Option<f64>,
    pub phi_interval: Option<Interval>,
    pub sigma_interval: Option<Interval>,
    pub log_sigma2_variance: Option<f64>,
    pub layout: DesignLayout,
    pub response_log10: bool,
    pub time_origin: Timestamp,
    pub time_unit: String,
    pub quantile_estimator: String,
    pub optimizer: OptimizerReport,
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

pub fn fit(design: &DesignMatrix, corr: &CorrelationSpec, method: Method) -> Result<FittedModel> {
    fit_with(design, corr, method, &FitOptions::default())
}

pub fn fit_with(design: &DesignMatrix, corr: &CorrelationSpec, method: Method, opts: &FitOptions) -> Result<FittedModel> {
    let problem = GlsProblem::from_design(design, corr)?;
    let g = fit_problem(&problem, method, opts)?;
    let p = design.p;
    let pr = &g.profile;
    let beta_cov: Vec<f64> = pr.factor.xtx_inverse().into_iter().map(|v| v * pr.sigma2).collect();
    let aic_parameters = p + 2;
    let loglik = -pr.neg_loglik;
    let mut warnings = Vec::new();
    if g.degenerate {
        warnings.push("degenerate fit: residual variance is zero".to_owned());
    } else if g.at_bound {
        warnings.push(format!("phi estimate {} at the search bound", pr.phi));
    }
    let mut model = FittedModel {
        version: ARTIFACT_VERSION,
        formula: design.formula.clone(),
        correlation: corr.clone(),
        method,
        n: design.n,
        p,
        groups: problem.groups().len(),
        sites: design.site_rows().into_iter().map(|(s, _)| s).collect(),
        column_labels: design.column_labels.clone(),
        beta: pr.beta.clone(),
        phi: pr.phi,
        sigma2: pr.sigma2,
        loglik,
        aic: -2.0 * loglik + 2.0 * aic_parameters as f64,
        aic_parameters,
        beta_cov,
        phi_logit_curvature: g.logit_curvature,
        phi_interval: None,
        sigma_interval: None,
        log_sigma2_variance: g.log_sigma2_variance,
        layout: design.layout.clone(),
        response_log10: design.formula.response().log10,
        time_origin: design.origin,
        time_unit: TIME_UNIT.into(),
        quantile_estimator: "type7".into(),
        optimizer: OptimizerReport {
            options: *opts,
            iterations: g.iterations,
            evaluations: g.evaluations,
            at_bound: g.at_bound,
        },
        warnings,
        provenance: Provenance::default(),
    };
    model.phi_interval = phi_confint(&model, 0.95).ok();
    model.sigma_interval = sigma_confint(&model, 0.95).ok();
    Ok(model)
}

/// Normal-approximation interval on logit(phi) from the curvature of the
/// profiled objective, mapped back to phi.
pub fn phi_confint(model: &FittedModel, level: f64) -> Result<Interval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("confidence level {level} outside (0, 1)")));
    }
    let curvature = model
        .phi_logit_curvature
        .ok_or_else(|| Error::NoInterval(format!("phi = {} is at a search bound or the curvature is not positive", model.phi)))?;
    let z = Normal::standard().inverse_cdf(0.5 + 0.5 * level);
    let se = 1.0 / curvature.sqrt();
    let t = logit(model.phi);
    Ok(Interval {
        lower: logistic(t - z * se),
        upper: logistic(t + z * se),
        level,
    })
}

/// Wald interval for sigma built on the `ln sigma^2` scale.
pub fn sigma_confint(model: &FittedModel, level: f64) -> Result<Interval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("confidence level {level} outside (0, 1)")));
    }
    let var = model
        .log_sigma2_variance
        .ok_or_else(|| Error::NoInterval("sigma has no information estimate at this fit".into()))?;
    let z = Normal::standard().inverse_cdf(0.5 + 0.5 * level);
    let s = model.sigma2.ln();
    let half = z * var.sqrt();
    Ok(Interval {
        lower: (0.5 * (s - half)).exp(),
        upper: (0.5 * (s + half)).exp(),
        level,
    })
}

impl FittedModel {
    pub fn beta_se(&self) -> Vec<f64> {
        (0..self.p).map(|j| self.beta_cov[j * self.p + j].sqrt()).collect()
    }

    /// `x beta`.
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.beta).map(|(a, b)| a * b).sum()
    }

    /// `x Cov(beta) x'`.
    pub fn coef_variance(&self, x: &[f64]) -> f64 {
        let p = self.p;
        let mut s = 0.0;
        for i in 0..p {
            let row: f64 = (0..p).map(|j| self.beta_cov[i * p + j] * x[j]).sum();
            s += x[i] * row;
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::loglik_dense_oracle;

    fn one_group(n: usize) -> Vec<Group> {
        vec![Group {
            label: "all".into(),
            rows: (0..n).collect(),
        }]
    }

    fn small_problem() -> GlsProblem {
        let times = vec![0.0, 0.7, 1.5, 3.0, 3.2, 5.0, 6.1, 8.0];
        let xs: Vec<f64> = vec![0.1, 0.5, -0.3, 1.2, 0.8, -1.0, 0.4, 2.0];
        let y = vec![1.0, 2.1, 0.2, 3.5, 2.0, -0.7, 1.9, 4.2];
        let x = xs.iter().flat_map(|&v| [1.0, v]).collect();
        GlsProblem::new(x, y, times, one_group(8), vec!["(Intercept)".into(), "x".into()]).unwrap()
    }

    #[test]
    fn sigma_variance_matches_numeric_hessian() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut times = Vec::new();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut e = 0.0f64;
        for i in 0..120 {
            let xi = ((i * 37) % 17) as f64 / 4.0;
            let shock: f64 = rng.sample(rand_distr::StandardNormal);
            e = 0.6 * e + shock;
            x.extend([1.0, xi]);
            y.push(0.5 + 1.5 * xi + e);
            times.push(i as f64 * 0.8 + ((i * 13) % 5) as f64 * 0.1);
        }
        let pr = GlsProblem::new(x, y, times, one_group(120), vec!["a".into(), "b".into()]).unwrap();
        for method in [Method::Ml, Method::Reml] {
            let g = fit_problem(&pr, method, &FitOptions::default()).unwrap();
            let var = g.log_sigma2_variance.unwrap_or_else(|| panic!("phi {} curv {:?}", g.profile.phi, g.logit_curvature));
            // -l(t, s) with beta profiled (ML) or integrated (REML)
            let negl = |t: f64, s: f64| {
                let p = profiled_objective(&pr, logistic(t), method).unwrap();
                let m = p.rss / p.sigma2;
                let mut l = p.factor.logdet_lambda;
                if method == Method::Reml {
                    l += p.factor.logdet_xtx();
                }
                0.5 * (m * s + l + p.rss * (-s).exp())
            };
            let (t0, s0, h) = (logit(g.profile.phi), g.profile.sigma2.ln(), 1e-3);
            let ftt = (negl(t0 + h, s0) - 2.0 * negl(t0, s0) + negl(t0 - h, s0)) / (h * h);
            let fss = (negl(t0, s0 + h) - 2.0 * negl(t0, s0) + negl(t0, s0 - h)) / (h * h);
            let fts = (negl(t0 + h, s0 + h) - negl(t0 + h, s0 - h) - negl(t0 - h, s0 + h) + negl(t0 - h, s0 - h))
                / (4.0 * h * h);
            let want = ftt / (ftt * fss - fts * fts);
            assert!((var - want).abs() < 1e-3 * want, "{method}: {var} vs {want}");
            // the profile curvature is the Schur complement of the same matrix
            let c = g.logit_curvature.unwrap();
            assert!((c - (ftt - fts * fts / fss)).abs() < 1e-3 * c);
        }
    }

    #[test]
    fn phi_zero_is_ols() {
        let pr = small_problem();
        let prof = profiled_objective(&pr, 0.0, Method::Ml).unwrap();
        // closed-form simple regression
        let xs: Vec<f64> = (0..8).map(|i| pr.x()[2 * i + 1]).collect();
        let n = 8.0;
        let (mx, my) = (xs.iter().sum::<f64>() / n, pr.y().iter().sum::<f64>() / n);
        let sxy: f64 = xs.iter().zip(pr.y()).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = xs.iter().map(|a| (a - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((prof.beta[1] - slope).abs() < 1e-13);
        assert!((prof.beta[0] - (my - slope * mx)).abs() < 1e-13);
        let rss: f64 = xs
            .iter()
            .zip(pr.y())
            .map(|(a, b)| (b - prof.beta[0] - prof.beta[1] * a).powi(2))
            .sum();
        assert!((prof.sigma2 - rss / n).abs() < 1e-13);
        let reml = profiled_objective(&pr, 0.0, Method::Reml).unwrap();
        assert!((reml.sigma2 - rss / (n - 2.0)).abs() < 1e-13);
    }

    #[test]
    fn matches_dense_oracle() {
        let pr = small_problem();
        for phi in [0.0, 0.2, 0.5, 0.9, 0.99] {
            for method in [Method::Ml, Method::Reml] {
                let fast = profiled_objective(&pr, phi, method).unwrap().neg_loglik;
                let dense = loglik_dense_oracle(&pr, phi, method).unwrap();
                assert!((fast - dense).abs() <= 1e-10 * dense.abs().max(1.0), "{phi} {method}: {fast} vs {dense}");
            }
        }
    }

    #[test]
    fn collinear_columns_are_named() {
        let x = vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        let pr = GlsProblem::new(
            x,
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0.0, 1.0, 2.0, 3.0],
            one_group(4),
            vec!["(Intercept)".into(), "twice".into()],
        )
        .unwrap();
        match profiled_objective(&pr, 0.3, Method::Ml) {
            Err(Error::Singular { columns }) => assert_eq!(columns, vec!["twice".to_owned()]),
            other => panic!("expected singular, got {other:?}"),
        }
    }

    #[test]
    fn block_logdet_is_additive() {
        let times = vec![0.0, 1.0, 2.5, 0.0, 0.5, 4.0];
        let groups = vec![
            Group {
                label: "a".into(),
                rows: vec![0, 1, 2],
            },
            Group {
                label: "b".into(),
                rows: vec![3, 4, 5],
            },
        ];
        let pr = GlsProblem::new(vec![1.0; 6], vec![1.0, 2.0, 0.5, 3.0, 1.0, 2.2], times.clone(), groups, vec!["c".into()])
            .unwrap();
        let f = whitened_factor(&pr, 0.6).unwrap();
        let (_, a) = crate::car1::car1_whiten(&[0.0; 3], &times[..3], 0.6).unwrap();
        let (_, b) = crate::car1::car1_whiten(&[0.0; 3], &times[3..], 0.6).unwrap();
        assert!((f.logdet_lambda - (a + b)).abs() < 1e-15);
    }

    #[test]
    fn problem_validation() {
        let bad = GlsProblem::new(vec![1.0; 3], vec![1.0; 3], vec![0.0, 2.0, 1.0], one_group(3), vec!["c".into()]);
        assert!(matches!(bad, Err(Error::Ordering { .. })));
        let missing = GlsProblem::new(
            vec![1.0; 3],
            vec![1.0; 3],
            vec![0.0, 1.0, 2.0],
            vec![Group {
                label: "a".into(),
                rows: vec![0, 1],
            }],
            vec!["c".into()],
        );
        assert!(matches!(missing, Err(Error::Input(_))));
    }

    #[test]
    fn xtx_inverse_matches_direct() {
        let pr = small_problem();
        let f = whitened_factor(&pr, 0.4).unwrap();
        let inv = f.xtx_inverse();
        // R'R times inverse = I
        let p = 2;
        let mut rtr = vec![0.0; 4];
        for i in 0..p {
            for j in 0..p {
                rtr[i * p + j] = (0..p).map(|k| f.at(k, i) * f.at(k, j)).sum();
            }
        }
        for i in 0..p {
            for j in 0..p {
                let v: f64 = (0..p).map(|k| rtr[i * p + k] * inv[k * p + j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fit_needs_more_rows_than_parameters() {
        let pr = GlsProblem::new(vec![1.0, 0.0, 1.0, 1.0], vec![1.0, 2.0], vec![0.0, 1.0], one_group(2), vec!["a".into(), "b".into()])
            .unwrap();
        assert!(matches!(fit_problem(&pr, Method::Ml, &FitOptions::default()), Err(Error::Input(_))));
    }

    #[test]
    fn perfect_fit_is_flagged_degenerate() {
        let times: Vec<f64> = (0..10).map(|i| i as f64 * 1.3).collect();
        let xs: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = xs.iter().map(|v| 2.0 + 3.0 * v).collect();
        let x = xs.iter().flat_map(|&v| [1.0, v]).collect();
        let pr = GlsProblem::new(x, y, times, one_group(10), vec!["(Intercept)".into(), "x".into()]).unwrap();
        let g = fit_problem(&pr, Method::Reml, &FitOptions::default()).unwrap();
        assert!(g.degenerate);
        assert!((g.profile.beta[1] - 3.0).abs() < 1e-12);
        assert!(g.logit_curvature.is_none());
    }
}
