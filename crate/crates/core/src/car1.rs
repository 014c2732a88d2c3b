//! Continuous-time AR(1) correlation: whitening and grouping.
//!
//! With `Corr(e_i, e_j) = phi^|t_i - t_j|` the process is Markov, so the
//! Cholesky innovations have a closed form: for `r_k = phi^(t_k - t_{k-1})`,
//! `e_1 = z_1` and `e_k = (z_k - r_k z_{k-1}) / sqrt(1 - r_k^2)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::design::{quantile_type7, DesignMatrix, QuantileRule};
use crate::error::{Error, Result};

pub const TIME_UNIT: &str = "days";

/// Correlation between two observations `dt` time units apart.
#[inline]
pub fn lag_correlation(phi: f64, dt: f64) -> f64 {
    if phi == 0.0 {
        0.0
    } else {
        (dt * phi.ln()).exp()
    }
}

/// `(r, 1 - r^2)` for lag `dt`, with `1 - r` formed without cancellation.
#[inline]
pub(crate) fn lag_terms(phi: f64, dt: f64) -> (f64, f64) {
    if phi == 0.0 {
        return (0.0, 1.0);
    }
    let a = dt * phi.ln();
    let r = a.exp();
    (r, -a.exp_m1() * (1.0 + r))
}

pub(crate) fn check_phi(phi: f64) -> Result<()> {
    if (0.0..1.0).contains(&phi) {
        Ok(())
    } else {
        Err(Error::Domain(format!("phi = {phi} outside [0, 1)")))
    }
}

/// Whitens `z` observed at strictly increasing `times`. Returns the
/// innovations and `ln |Lambda|`.
pub fn car1_whiten(z: &[f64], times: &[f64], phi: f64) -> Result<(Vec<f64>, f64)> {
    check_phi(phi)?;
    if z.len() != times.len() {
        return Err(Error::Input(format!(
            "{} values but {} times",
            z.len(),
            times.len()
        )));
    }
    let mut out = Vec::with_capacity(z.len());
    let mut logdet = 0.0;
    for k in 0..z.len() {
        if k == 0 {
            out.push(z[0]);
            continue;
        }
        let dt = times[k] - times[k - 1];
        if !(dt > 0.0) {
            return Err(Error::Ordering {
                group: String::new(),
                position: k,
            });
        }
        let (r, one_minus) = lag_terms(phi, dt);
        out.push((z[k] - r * z[k - 1]) / one_minus.sqrt());
        logdet += one_minus.ln();
    }
    Ok((out, logdet))
}

/// How rows are partitioned into independent CAR(1) series.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum GroupRule {
    /// One series over all rows.
    Single,
    /// One series per site.
    Site,
    /// Within each site, low/high split of the raw level variable at the
    /// site's sample quantile over the fitted rows.
    Level { var: String, rule: QuantileRule },
}

impl GroupRule {
    pub fn level(rule: QuantileRule) -> Self {
        GroupRule::Level {
            var: "level".into(),
            rule,
        }
    }
}

impl fmt::Display for GroupRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupRule::Single => f.write_str("none"),
            GroupRule::Site => f.write_str("site"),
            GroupRule::Level { var, rule } if var == "level" => write!(f, "level:{rule}"),
            GroupRule::Level { var, rule } => write!(f, "level:{rule}:{var}"),
        }
    }
}

impl FromStr for GroupRule {
    type Err = Error;
    /// `none`, `site`, `level:<q1|median|q3>[:<variable>]`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        match parts.as_slice() {
            ["none"] | ["single"] => Ok(GroupRule::Single),
            ["site"] => Ok(GroupRule::Site),
            ["level", rule] => Ok(GroupRule::level(rule.parse()?)),
            ["level", rule, var] if !var.is_empty() => Ok(GroupRule::Level {
                var: (*var).to_owned(),
                rule: rule.parse()?,
            }),
            _ => Err(Error::Input(format!("unknown grouping {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorrelationSpec {
    #[serde(with = "rule_text")]
    pub grouping: GroupRule,
    pub time_unit: String,
}

mod rule_text {
    use super::GroupRule;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &GroupRule, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(r)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<GroupRule, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub label: String,
    /// Row indices in strictly increasing time order.
    pub rows: Vec<usize>,
}

impl CorrelationSpec {
    pub fn new(grouping: GroupRule) -> Self {
        Self {
            grouping,
            time_unit: TIME_UNIT.into(),
        }
    }

    pub fn by_site() -> Self {
        Self::new(GroupRule::Site)
    }

    /// Variables beyond the formula's that grouping needs on every row.
    pub fn required_variables(&self) -> Vec<String> {
        match &self.grouping {
            GroupRule::Level { var, .. } => vec![var.clone()],
            _ => Vec::new(),
        }
    }

    /// Partitions the design's rows into groups, canonical label order.
    pub fn groups(&self, design: &DesignMatrix) -> Result<Vec<Group>> {
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        match &self.grouping {
            GroupRule::Single => {
                let mut rows: Vec<usize> = (0..design.n).collect();
                rows.sort_by(|&a, &b| design.rows[a].days.total_cmp(&design.rows[b].days));
                map.insert("all".into(), rows);
            }
            GroupRule::Site => {
                for (site, rows) in design.site_rows() {
                    map.insert(site, rows);
                }
            }
            GroupRule::Level { var, rule } => {
                let levels = design
                    .raw
                    .get(var)
                    .ok_or_else(|| Error::Input(format!("grouping variable {var:?} not in design")))?;
                for (site, rows) in design.site_rows() {
                    let site_levels: Vec<f64> = rows.iter().map(|&i| levels[i]).collect();
                    let cut = quantile_type7(&site_levels, rule.probability())?;
                    for i in rows {
                        let cat = if levels[i] < cut { "low" } else { "high" };
                        map.entry(format!("{site}/{cat}")).or_default().push(i);
                    }
                }
            }
        }
        let groups: Vec<Group> = map.into_iter().map(|(label, rows)| Group { label, rows }).collect();
        for g in &groups {
            for (k, w) in g.rows.windows(2).enumerate() {
                if !(design.rows[w[1]].days > design.rows[w[0]].days) {
                    return Err(Error::Ordering {
                        group: g.label.clone(),
                        position: k + 1,
                    });
                }
            }
        }
        Ok(groups)
    }
}
