//! Model formulas and their numeric design matrices.
//!
//! Formula grammar (whitespace-insensitive):
//!
//! ```text
//! formula  := response "~" rhs
//! response := "log10(" var ")" | var
//! rhs      := "1" | term ("+" term)*
//! term     := factor (":" factor)*
//! factor   := "log10(" var ")" | "cat(" var ")" | "t15(" var ")" | "site" | var
//! ```
//!
//! `site` is the observation's site label, dummy coded. `cat(var)` dummy codes
//! the distinct values of a variable. `t15(var)` splits a raw turbidity value
//! at 15 NTU. A bare `var` enters untransformed. The intercept is implicit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{days_since, Dataset, Observation, Timestamp};
use crate::error::{Error, Result};

/// Turbidity guideline separating the low and high T15 categories (NTU).
pub const T15_THRESHOLD_NTU: f64 = 15.0;

pub const INTERCEPT_LABEL: &str = "(Intercept)";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Factor {
    Continuous { var: String, log10: bool },
    Site,
    Categorical { var: String },
    T15 { var: String },
}

impl Factor {
    /// Raw dataset variable read by this factor; `None` for the site label.
    pub fn variable(&self) -> Option<&str> {
        match self {
            Factor::Continuous { var, .. } | Factor::Categorical { var } | Factor::T15 { var } => Some(var),
            Factor::Site => None,
        }
    }

    pub fn is_categorical(&self) -> bool {
        !matches!(self, Factor::Continuous { .. })
    }

    fn parse(token: &str) -> Result<Self> {
        let token = token.trim();
        if let Some((func, rest)) = token.split_once('(') {
            let arg = rest
                .strip_suffix(')')
                .map(str::trim)
                .filter(|a| is_identifier(a))
                .ok_or_else(|| Error::Formula(format!("malformed factor {token:?}")))?;
            return match func.trim() {
                "log10" => Ok(Factor::Continuous {
                    var: arg.to_owned(),
                    log10: true,
                }),
                "cat" if arg == "site" => Ok(Factor::Site),
                "cat" => Ok(Factor::Categorical { var: arg.to_owned() }),
                "t15" => Ok(Factor::T15 { var: arg.to_owned() }),
                other => Err(Error::Formula(format!("unknown function {other:?}"))),
            };
        }
        if token == "site" {
            Ok(Factor::Site)
        } else if is_identifier(token) {
            Ok(Factor::Continuous {
                var: token.to_owned(),
                log10: false,
            })
        } else {
            Err(Error::Formula(format!("malformed factor {token:?}")))
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Continuous { var, log10: true } => write!(f, "log10({var})"),
            Factor::Continuous { var, log10: false } => write!(f, "{var}"),
            Factor::Site => write!(f, "site"),
            Factor::Categorical { var } => write!(f, "cat({var})"),
            Factor::T15 { var } => write!(f, "t15({var})"),
        }
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// A main effect (one factor) or an interaction of distinct factors.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Term {
    factors: Vec<Factor>,
}

impl Term {
    pub fn main(factor: Factor) -> Self {
        Self { factors: vec![factor] }
    }

    pub fn interaction(factors: Vec<Factor>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Formula("empty term".into()));
        }
        let distinct: BTreeSet<&Factor> = factors.iter().collect();
        if distinct.len() != factors.len() {
            return Err(Error::Formula("interaction repeats a factor".into()));
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn is_main(&self) -> bool {
        self.factors.len() == 1
    }

    fn factor_set(&self) -> BTreeSet<&Factor> {
        self.factors.iter().collect()
    }

    /// Same factors regardless of order.
    pub fn same_as(&self, other: &Term) -> bool {
        self.factor_set() == other.factor_set()
    }

    /// True when `other`'s factors are a strict subset of this term's.
    pub fn strictly_contains(&self, other: &Term) -> bool {
        let mine = self.factor_set();
        let theirs = other.factor_set();
        theirs.len() < mine.len() && theirs.is_subset(&mine)
    }

    /// Every non-empty strict sub-term, lower orders first.
    pub fn marginal_terms(&self) -> Vec<Term> {
        let k = self.factors.len();
        let mut out: Vec<Term> = (1..(1u32 << k) - 1)
            .map(|mask| Term {
                factors: (0..k)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| self.factors[i].clone())
                    .collect(),
            })
            .collect();
        out.sort_by_key(Term::order);
        out
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.factors.iter().map(Factor::to_string).collect();
        write!(f, "{}", parts.join(":"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Response {
    pub var: String,
    pub log10: bool,
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.log10 {
            write!(f, "log10({})", self.var)
        } else {
            write!(f, "{}", self.var)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModelFormula {
    response: Response,
    terms: Vec<Term>,
}

impl ModelFormula {
    /// Checks for duplicate terms and that every interaction's factors
    /// appear earlier as main effects.
    pub fn new(response: Response, terms: Vec<Term>) -> Result<Self> {
        for (i, term) in terms.iter().enumerate() {
            if terms[..i].iter().any(|t| t.same_as(term)) {
                return Err(Error::Formula(format!("duplicate term {term}")));
            }
            if !term.is_main() {
                for f in term.factors() {
                    let main = Term::main(f.clone());
                    if !terms[..i].iter().any(|t| t.same_as(&main)) {
                        return Err(Error::Formula(format!(
                            "interaction {term} needs main effect {f} earlier in the formula"
                        )));
                    }
                }
            }
        }
        Ok(Self { response, terms })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (lhs, rhs) = text
            .split_once('~')
            .ok_or_else(|| Error::Formula(format!("missing '~' in {text:?}")))?;
        let response = match Factor::parse(lhs)? {
            Factor::Continuous { var, log10 } => Response { var, log10 },
            other => return Err(Error::Formula(format!("response cannot be {other}"))),
        };
        let rhs = rhs.trim();
        let mut terms = Vec::new();
        if rhs != "1" {
            for tok in rhs.split('+') {
                let factors = tok.split(':').map(Factor::parse).collect::<Result<Vec<_>>>()?;
                terms.push(Term::interaction(factors)?);
            }
        }
        Self::new(response, terms)
    }

    /// Every main effect and every interaction of the given factors, ordered
    /// by interaction order.
    pub fn full_factorial(response: Response, factors: Vec<Factor>) -> Result<Self> {
        let top = Term::interaction(factors)?;
        let mut terms = top.marginal_terms();
        terms.push(top);
        Self::new(response, terms)
    }

    pub fn response(&self) -> &Response {
        &self.response
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn contains(&self, term: &Term) -> bool {
        self.terms.iter().any(|t| t.same_as(term))
    }

    pub fn without(&self, term: &Term) -> Result<Self> {
        Self::new(
            self.response.clone(),
            self.terms.iter().filter(|t| !t.same_as(term)).cloned().collect(),
        )
    }

    /// Raw dataset variables read by the covariates (response excluded).
    pub fn covariate_variables(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .terms
            .iter()
            .flat_map(|t| t.factors().iter().filter_map(Factor::variable))
            .collect();
        set.into_iter().map(str::to_owned).collect()
    }

    fn distinct_factors(&self) -> Vec<&Factor> {
        let mut seen = BTreeSet::new();
        self.terms
            .iter()
            .flat_map(|t| t.factors())
            .filter(|f| seen.insert(*f))
            .collect()
    }
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "{} ~ 1", self.response);
        }
        let parts: Vec<String> = self.terms.iter().map(Term::to_string).collect();
        write!(f, "{} ~ {}", self.response, parts.join(" + "))
    }
}

impl FromStr for ModelFormula {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl TryFrom<String> for ModelFormula {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<ModelFormula> for String {
    fn from(f: ModelFormula) -> String {
        f.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub label: String,
    pub index: usize,
}

impl Category {
    pub fn low() -> Self {
        Self {
            label: "low".into(),
            index: 0,
        }
    }

    pub fn high() -> Self {
        Self {
            label: "high".into(),
            index: 1,
        }
    }
}

pub fn derive_t15(turbidity_ntu: f64) -> Result<Category> {
    if !(turbidity_ntu > 0.0) || !turbidity_ntu.is_finite() {
        return Err(Error::Domain(format!("turbidity {turbidity_ntu} must be positive")));
    }
    Ok(if turbidity_ntu < T15_THRESHOLD_NTU {
        Category::low()
    } else {
        Category::high()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantileRule {
    Q1,
    Median,
    Q3,
}

impl QuantileRule {
    pub const ALL: [QuantileRule; 3] = [QuantileRule::Q1, QuantileRule::Median, QuantileRule::Q3];

    pub fn probability(self) -> f64 {
        match self {
            QuantileRule::Q1 => 0.25,
            QuantileRule::Median => 0.5,
            QuantileRule::Q3 => 0.75,
        }
    }
}

impl fmt::Display for QuantileRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantileRule::Q1 => "q1",
            QuantileRule::Median => "median",
            QuantileRule::Q3 => "q3",
        })
    }
}

impl FromStr for QuantileRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "q1" => Ok(QuantileRule::Q1),
            "median" | "q2" => Ok(QuantileRule::Median),
            "q3" => Ok(QuantileRule::Q3),
            other => Err(Error::Input(format!("unknown quantile rule {other:?}"))),
        }
    }
}

/// Sample quantile with linear interpolation between order statistics
/// (h = (n - 1) q + 1, 1-based).
pub fn quantile_type7(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Input("quantile of an empty sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Low/high split at the rule's sample quantile of `levels` (strict `<`).
pub fn derive_level_group(levels: &[f64], rule: QuantileRule) -> Result<Vec<Category>> {
    if let Some(l) = levels.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(Error::Domain(format!("level {l} must be positive")));
    }
    let cut = quantile_type7(levels, rule.probability())?;
    Ok(levels
        .iter()
        .map(|&l| if l < cut { Category::low() } else { Category::high() })
        .collect())
}

/// Everything needed to encode new rows consistently with a training design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignLayout {
    /// Categorical factor label -> levels, reference level first.
    pub levels: BTreeMap<String, Vec<String>>,
    /// Raw (untransformed) covariate variable -> observed (min, max).
    pub ranges: BTreeMap<String, (f64, f64)>,
}

fn categorical_label(factor: &Factor, obs: &Observation) -> std::result::Result<String, String> {
    match factor {
        Factor::Site => Ok(obs.site.clone()),
        Factor::Categorical { var } => obs.value(var).map(|v| format!("{v}")).ok_or_else(|| format!("missing {var}")),
        Factor::T15 { var } => {
            let v = obs.value(var).ok_or_else(|| format!("missing {var}"))?;
            derive_t15(v).map(|c| c.label).map_err(|e| e.to_string())
        }
        Factor::Continuous { .. } => unreachable!("continuous factor has no label"),
    }
}

impl DesignLayout {
    fn factor_columns(&self, factor: &Factor, obs: &Observation) -> std::result::Result<Vec<f64>, String> {
        match factor {
            Factor::Continuous { var, log10 } => {
                let v = obs.value(var).ok_or_else(|| format!("missing {var}"))?;
                if *log10 {
                    if v <= 0.0 {
                        return Err(format!("log10 of non-positive {var} = {v}"));
                    }
                    Ok(vec![v.log10()])
                } else {
                    Ok(vec![v])
                }
            }
            _ => {
                let label = categorical_label(factor, obs)?;
                let levels = self
                    .levels
                    .get(&factor.to_string())
                    .ok_or_else(|| format!("no levels recorded for {factor}"))?;
                let idx = levels
                    .iter()
                    .position(|l| *l == label)
                    .ok_or_else(|| format!("{factor} level {label:?} unseen in training data"))?;
                let mut cols = vec![0.0; levels.len() - 1];
                if idx > 0 {
                    cols[idx - 1] = 1.0;
                }
                Ok(cols)
            }
        }
    }

    fn factor_labels(&self, factor: &Factor) -> Vec<String> {
        match factor {
            Factor::Continuous { .. } => vec![factor.to_string()],
            _ => self.levels[&factor.to_string()][1..]
                .iter()
                .map(|l| format!("{factor}[{l}]"))
                .collect(),
        }
    }

    fn term_labels(&self, term: &Term) -> Vec<String> {
        term.factors().iter().fold(vec![String::new()], |acc, f| {
            let cols = self.factor_labels(f);
            acc.iter()
                .flat_map(|a| {
                    cols.iter()
                        .map(move |c| if a.is_empty() { c.clone() } else { format!("{a}:{c}") })
                })
                .collect()
        })
    }

    /// Intercept followed by each term's expanded columns.
    pub fn column_labels(&self, formula: &ModelFormula) -> Vec<String> {
        std::iter::once(INTERCEPT_LABEL.to_owned())
            .chain(formula.terms().iter().flat_map(|t| self.term_labels(t)))
            .collect()
    }

    /// Encodes one observation's covariates. Interaction columns are products
    /// of the factors' expanded columns, first factor varying slowest.
    pub fn encode(&self, formula: &ModelFormula, obs: &Observation) -> std::result::Result<Vec<f64>, String> {
        let mut row = vec![1.0];
        for term in formula.terms() {
            let mut acc = vec![1.0];
            for f in term.factors() {
                let cols = self.factor_columns(f, obs)?;
                acc = acc.iter().flat_map(|a| cols.iter().map(move |c| a * c)).collect();
            }
            row.extend(acc);
        }
        Ok(row)
    }

    /// Covariates of `obs` outside their training range.
    pub fn extrapolated(&self, obs: &Observation) -> Vec<String> {
        self.ranges
            .iter()
            .filter(|(var, (lo, hi))| obs.value(var).is_some_and(|v| v < *lo || v > *hi))
            .map(|(var, _)| var.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowKey {
    pub site: String,
    pub timestamp: Timestamp,
    /// Decimal days since the design's time origin.
    pub days: f64,
    /// Canonical index of the source observation in the dataset.
    pub source: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermColumns {
    pub label: String,
    pub start: usize,
    pub len: usize,
}

impl TermColumns {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub formula: ModelFormula,
    pub n: usize,
    pub p: usize,
    /// Row-major n x p.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub column_labels: Vec<String>,
    /// Intercept first, then each formula term in order.
    pub term_columns: Vec<TermColumns>,
    pub rows: Vec<RowKey>,
    /// Raw values of every variable the design read, per row.
    pub raw: BTreeMap<String, Vec<f64>>,
    pub dropped: usize,
    pub layout: DesignLayout,
    pub origin: Timestamp,
}

#[derive(Debug, Clone, Default)]
pub struct DesignOptions {
    /// Variables that must be present for a row to be kept even though the
    /// formula does not read them (e.g. the level used for grouping).
    pub extra_required: Vec<String>,
    /// Encode with an existing layout instead of deriving one.
    pub layout: Option<DesignLayout>,
}

pub fn build_design(dataset: &Dataset, formula: &ModelFormula) -> Result<DesignMatrix> {
    build_design_with(dataset, formula, &DesignOptions::default())
}

pub fn build_design_with(dataset: &Dataset, formula: &ModelFormula, opts: &DesignOptions) -> Result<DesignMatrix> {
    let mut required: Vec<String> = vec![formula.response().var.clone()];
    required.extend(formula.covariate_variables());
    required.extend(opts.extra_required.iter().cloned());
    let required: Vec<String> = {
        let mut seen = BTreeSet::new();
        required.into_iter().filter(|v| seen.insert(v.clone())).collect()
    };
    if let Some(missing) = required.iter().find(|v| !dataset.has_variable(v)) {
        return Err(Error::Formula(format!("variable {missing:?} not in dataset")));
    }

    let complete: Vec<usize> = dataset
        .observations()
        .iter()
        .enumerate()
        .filter(|(_, o)| required.iter().all(|v| o.value(v).is_some()))
        .map(|(i, _)| i)
        .collect();
    let dropped = dataset.len() - complete.len();
    if complete.is_empty() {
        return Err(Error::EmptyDesign { dropped });
    }
    let obs = |i: usize| &dataset.observations()[i];

    if formula.response().log10 {
        let var = &formula.response().var;
        if let Some(&i) = complete.iter().find(|&&i| obs(i).value(var).unwrap() <= 0.0) {
            return Err(Error::Domain(format!(
                "log10 of non-positive {var} at site {} row {i}",
                obs(i).site
            )));
        }
    }

    let layout = match &opts.layout {
        Some(l) => l.clone(),
        None => {
            let mut levels = BTreeMap::new();
            for factor in formula.distinct_factors() {
                if !factor.is_categorical() {
                    continue;
                }
                let labels: Vec<String> = if let Factor::T15 { .. } = factor {
                    vec![Category::low().label, Category::high().label]
                } else {
                    let set: BTreeSet<String> = complete
                        .iter()
                        .map(|&i| categorical_label(factor, obs(i)).map_err(Error::Domain))
                        .collect::<Result<_>>()?;
                    set.into_iter().collect()
                };
                levels.insert(factor.to_string(), labels);
            }
            let mut ranges = BTreeMap::new();
            for var in formula.covariate_variables() {
                let vals = complete.iter().map(|&i| obs(i).value(&var).unwrap());
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                ranges.insert(var, (lo, hi));
            }
            DesignLayout { levels, ranges }
        }
    };

    let column_labels = layout.column_labels(formula);
    let p = column_labels.len();
    let mut term_columns = vec![TermColumns {
        label: INTERCEPT_LABEL.into(),
        start: 0,
        len: 1,
    }];
    for term in formula.terms() {
        let start = term_columns.last().map(|t| t.start + t.len).unwrap();
        term_columns.push(TermColumns {
            label: term.label(),
            start,
            len: layout.term_labels(term).len(),
        });
    }

    let origin = dataset.origin().expect("non-empty dataset");
    let n = complete.len();
    let mut x = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    let mut raw: BTreeMap<String, Vec<f64>> = required.iter().map(|v| (v.clone(), Vec::with_capacity(n))).collect();
    for &i in &complete {
        let o = obs(i);
        let encoded = layout
            .encode(formula, o)
            .map_err(|e| Error::Domain(format!("site {} at {}: {e}", o.site, o.timestamp)))?;
        debug_assert_eq!(encoded.len(), p);
        x.extend(encoded);
        let resp = o.value(&formula.response().var).unwrap();
        y.push(if formula.response().log10 { resp.log10() } else { resp });
        for (var, col) in raw.iter_mut() {
            col.push(o.value(var).unwrap());
        }
        rows.push(RowKey {
            site: o.site.clone(),
            timestamp: o.timestamp,
            days: days_since(&origin, &o.timestamp),
            source: i,
        });
    }

    Ok(DesignMatrix {
        formula: formula.clone(),
        n,
        p,
        x,
        y,
        column_labels,
        term_columns,
        rows,
        raw,
        dropped,
        layout,
        origin,
    })
}

impl DesignMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.days).collect()
    }

    /// Row indices per site, canonical site order, time order within site.
    pub fn site_rows(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            out.entry(&r.site).or_default().push(i);
        }
        out.into_iter().map(|(s, v)| (s.to_owned(), v)).collect()
    }

    /// Rows at the given indices (ascending), same layout and time origin.
    pub fn subset(&self, indices: &[usize]) -> DesignMatrix {
        let mut x = Vec::with_capacity(indices.len() * self.p);
        for &i in indices {
            x.extend_from_slice(self.row(i));
        }
        DesignMatrix {
            formula: self.formula.clone(),
            n: indices.len(),
            p: self.p,
            x,
            y: indices.iter().map(|&i| self.y[i]).collect(),
            column_labels: self.column_labels.clone(),
            term_columns: self.term_columns.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            raw: self
                .raw
                .iter()
                .map(|(k, v)| (k.clone(), indices.iter().map(|&i| v[i]).collect()))
                .collect(),
            dropped: 0,
            layout: self.layout.clone(),
            origin: self.origin,
        }
    }

    /// Sample variance (denominator n - 1) of the response.
    pub fn response_variance(&self) -> f64 {
        let n = self.y.len() as f64;
        let mean = self.y.iter().sum::<f64>() / n;
        self.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    }
}
