//! Sequential F tests for the fixed effects and infinite-horizon prediction.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal};

use crate::artifact::{fmt17, Provenance};
use crate::data::{format_timestamp, Dataset, Timestamp};
use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::gls::{whitened_factor, FittedModel, GlsProblem, Method};

pub const PREDICTION_LEVEL: f64 = 0.95;

pub const EXTRAPOLATION_CAVEAT: &str = "Predictions flagged as extrapolated use covariate values outside the \
range seen in model fitting; their intervals can be very wide and the back-transformed values unrealistic. \
Values are reported as computed, without clamping.";

/// Two-sided standard normal quantile for `level` coverage.
pub fn z_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + 0.5 * level)
}

/// `point -/+ z sqrt(variance)`.
pub fn interval_bounds(point: f64, variance: f64, z: f64) -> (f64, f64) {
    let half = z * variance.max(0.0).sqrt();
    (point - half, point + half)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaRow {
    pub term: String,
    pub df_num: usize,
    pub df_den: usize,
    pub f_value: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaTable {
    pub rows: Vec<AnovaRow>,
    pub n: usize,
    pub p: usize,
    pub phi: f64,
    pub method: Method,
}

/// Type I tests on the whitened regression at the fitted phi: each term's
/// sum of squares given the terms before it, over `RSS / (n - p)`.
pub fn anova_sequential(model: &FittedModel, design: &DesignMatrix) -> Result<AnovaTable> {
    if design.p != model.p || design.n != model.n || design.column_labels != model.column_labels || design.formula != model.formula {
        return Err(Error::Consistency(format!(
            "design ({} x {}, {}) does not match the fitted model ({} x {}, {})",
            design.n, design.p, design.formula, model.n, model.p, model.formula
        )));
    }
    let problem = GlsProblem::from_design(design, &model.correlation)?;
    let factor = whitened_factor(&problem, model.phi)?;
    let qty = factor.qty();
    let df_den = design.n - design.p;
    let denom = factor.rss() / df_den as f64;
    let rows = design
        .term_columns
        .iter()
        .map(|tc| {
            let ss: f64 = tc.range().map(|j| qty[j] * qty[j]).sum();
            let f_value = ss / tc.len as f64 / denom;
            let p_value = if f_value > 0.0 {
                FisherSnedecor::new(tc.len as f64, df_den as f64)
                    .map_err(|e| Error::Domain(e.to_string()))?
                    .sf(f_value)
                    .max(f64::MIN_POSITIVE)
            } else {
                1.0
            };
            Ok(AnovaRow {
                term: tc.label.clone(),
                df_num: tc.len,
                df_den,
                f_value,
                p_value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AnovaTable {
        rows,
        n: design.n,
        p: design.p,
        phi: model.phi,
        method: model.method,
    })
}

impl AnovaTable {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("term\tdf_num\tdf_den\tf_value\tp_value\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.term,
                r.df_num,
                r.df_den,
                fmt17(r.f_value),
                fmt17(r.p_value)
            ));
        }
        s
    }
}

impl fmt::Display for AnovaTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.term.len()).max().unwrap_or(4).max(4);
        writeln!(f, "{:width$}  {:>10}  {:>12}  {:>10}", "Term", "df", "F", "p")?;
        for r in &self.rows {
            let p = if r.p_value < 1e-4 {
                "<0.0001".to_owned()
            } else {
                format!("{:.4}", r.p_value)
            };
            writeln!(
                f,
                "{:width$}  {:>10}  {:>12.4}  {:>10}",
                r.term,
                format!("{}, {}", r.df_num, r.df_den),
                r.f_value,
                p
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub timestamp: Timestamp,
    pub site: String,
    /// Model scale (log10 when the response is log-transformed).
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    /// Back-transformed to the response's units.
    pub point_back: f64,
    pub lower_back: f64,
    pub upper_back: f64,
    /// Covariates outside their training range.
    pub extrapolated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRow {
    pub timestamp: Timestamp,
    pub site: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSeries {
    pub response: String,
    pub response_log10: bool,
    pub level: f64,
    pub z: f64,
    pub rows: Vec<PredictionRow>,
    pub skipped: Vec<SkippedRow>,
    pub caveat: String,
    pub provenance: Provenance,
}

/// Infinite-horizon prediction: no residual carry-over, so the variance is
/// the marginal `sigma^2` plus the coefficient uncertainty `x Cov(beta) x'`.
/// Rows lacking a covariate are skipped and reported.
pub fn predict(model: &FittedModel, newdata: &Dataset) -> PredictionSeries {
    let z = z_quantile(PREDICTION_LEVEL);
    let back = |v: f64| if model.response_log10 { 10f64.powf(v) } else { v };
    let results: Vec<std::result::Result<PredictionRow, SkippedRow>> = newdata
        .observations()
        .par_iter()
        .map(|obs| {
            let x = model.layout.encode(&model.formula, obs).map_err(|reason| SkippedRow {
                timestamp: obs.timestamp,
                site: obs.site.clone(),
                reason,
            })?;
            let point = model.linear_predictor(&x);
            let (lower, upper) = interval_bounds(point, model.sigma2 + model.coef_variance(&x), z);
            Ok(PredictionRow {
                timestamp: obs.timestamp,
                site: obs.site.clone(),
                point,
                lower,
                upper,
                point_back: back(point),
                lower_back: back(lower),
                upper_back: back(upper),
                extrapolated: model.layout.extrapolated(obs),
            })
        })
        .collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(s) => skipped.push(s),
        }
    }
    PredictionSeries {
        response: model.formula.response().to_string(),
        response_log10: model.response_log10,
        level: PREDICTION_LEVEL,
        z,
        rows,
        skipped,
        caveat: EXTRAPOLATION_CAVEAT.to_owned(),
        provenance: model.provenance.clone(),
    }
}

impl PredictionSeries {
    /// Plot-data export: one row per prediction, both scales, flags joined
    /// with `;`.
    pub fn to_tsv(&self) -> String {
        let scale = if self.response_log10 { "log10" } else { "model" };
        let mut s = format!(
            "timestamp\tsite\tpoint_{scale}\tlower95_{scale}\tupper95_{scale}\tpoint\tlower95\tupper95\textrapolated\n"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                format_timestamp(&r.timestamp),
                r.site,
                fmt17(r.point),
                fmt17(r.lower),
                fmt17(r.upper),
                fmt17(r.point_back),
                fmt17(r.lower_back),
                fmt17(r.upper_back),
                r.extrapolated.join(";")
            ));
        }
        s
    }

    /// Row with the largest back-transformed point prediction.
    pub fn max_point(&self) -> Option<&PredictionRow> {
        self.rows.iter().max_by(|a, b| a.point_back.total_cmp(&b.point_back))
    }
}
