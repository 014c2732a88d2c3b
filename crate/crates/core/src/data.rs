//! Laboratory and sensor CSV ingest, river-level interpolation and range checks.
//!
//! Observations are kept in a canonical order: sites lexicographically, then
//! strictly ascending timestamps within each site. Every downstream module
//! relies on that order for deterministic reductions.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Timestamp = DateTime<Utc>;

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Laboratory,
    Sensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub timestamp: Timestamp,
    pub site: String,
    pub values: BTreeMap<String, Option<f64>>,
}

impl Observation {
    pub fn value(&self, var: &str) -> Option<f64> {
        self.values.get(var).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    kind: DataKind,
    variables: Vec<String>,
    observations: Vec<Observation>,
}

impl Dataset {
    /// Sorts observations into canonical (site, time) order and rejects
    /// duplicate (site, timestamp) pairs. Values whose variable is not in
    /// `variables` are kept but never reported.
    pub fn new(kind: DataKind, variables: Vec<String>, observations: Vec<Observation>) -> Result<Self> {
        let mut indexed: Vec<(usize, Observation)> = observations.into_iter().enumerate().collect();
        indexed.sort_by(|a, b| (&a.1.site, a.1.timestamp).cmp(&(&b.1.site, b.1.timestamp)));
        for pair in indexed.windows(2) {
            let (prev, cur) = (&pair[0].1, &pair[1].1);
            if prev.site == cur.site && prev.timestamp == cur.timestamp {
                return Err(Error::Duplicate {
                    row: pair[0].0.max(pair[1].0),
                    site: cur.site.clone(),
                    timestamp: format_timestamp(&cur.timestamp),
                });
            }
        }
        for (_, obs) in &indexed {
            for (var, v) in &obs.values {
                if let Some(v) = v {
                    if !v.is_finite() {
                        return Err(Error::Input(format!("non-finite value for {var} at site {}", obs.site)));
                    }
                }
            }
        }
        Ok(Self {
            kind,
            variables,
            observations: indexed.into_iter().map(|(_, o)| o).collect(),
        })
    }

    pub fn empty(kind: DataKind) -> Self {
        Self {
            kind,
            variables: Vec::new(),
            observations: Vec::new(),
        }
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn has_variable(&self, var: &str) -> bool {
        self.variables.iter().any(|v| v == var)
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Distinct sites in canonical order.
    pub fn sites(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.observations.iter().map(|o| o.site.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// Earliest timestamp over all sites.
    pub fn origin(&self) -> Option<Timestamp> {
        self.observations.iter().map(|o| o.timestamp).min()
    }

    pub fn filter_site(&self, site: &str) -> Dataset {
        self.filter(|o| o.site == site)
    }

    pub fn filter(&self, keep: impl Fn(&Observation) -> bool) -> Dataset {
        Dataset {
            kind: self.kind,
            variables: self.variables.clone(),
            observations: self.observations.iter().filter(|o| keep(o)).cloned().collect(),
        }
    }

    /// Keeps the observations at the given canonical indices (any order).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        Dataset {
            kind: self.kind,
            variables: self.variables.clone(),
            observations: idx.iter().map(|&i| self.observations[i].clone()).collect(),
        }
    }

    /// Number of present values of `var` at `site`.
    pub fn count_present(&self, var: &str, site: &str) -> usize {
        self.observations
            .iter()
            .filter(|o| o.site == site && o.value(var).is_some())
            .count()
    }
}

/// Decimal days elapsed from `origin` to `t`.
pub fn days_since(origin: &Timestamp, t: &Timestamp) -> f64 {
    (*t - *origin).num_seconds() as f64 / SECONDS_PER_DAY
}

pub fn format_timestamp(t: &Timestamp) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Accepts RFC 3339 with offset, or naive `YYYY-MM-DD[T| ]HH:MM[:SS]`, or a
/// bare date. Naive values are taken as UTC. Sub-second parts are truncated.
pub fn parse_timestamp(s: &str) -> Option<Timestamp> {
    let s = s.trim();
    let t = if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        t.with_timezone(&Utc)
    } else {
        const NAIVE: [&str; 4] = ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"];
        let naive = NAIVE
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
            .or_else(|| {
                NaiveDate::parse_from_str(s, "%Y-%m-%d")
                    .ok()
                    .and_then(|d| d.and_hms_opt(0, 0, 0))
            })?;
        naive.and_utc()
    };
    DateTime::from_timestamp(t.timestamp(), 0)
}

/// Column mapping for CSV ingest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub timestamp: String,
    pub site: String,
    /// Used when the file has no site column.
    pub default_site: Option<String>,
    /// variable name -> column name. Empty means every other column is a
    /// variable named after its header.
    pub variables: Vec<(String, String)>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            site: "site".into(),
            default_site: None,
            variables: Vec::new(),
        }
    }
}

impl Schema {
    /// Parses `key=column` lines. `timestamp`, `site` and `default_site` are
    /// reserved keys; any other key names a variable. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut schema = Schema::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, col) = line
                .split_once('=')
                .ok_or_else(|| Error::Schema(format!("line {}: expected key=column", lineno + 1)))?;
            let (key, col) = (key.trim(), col.trim());
            if key.is_empty() || col.is_empty() {
                return Err(Error::Schema(format!("line {}: empty key or column", lineno + 1)));
            }
            match key {
                "timestamp" => schema.timestamp = col.to_owned(),
                "site" => schema.site = col.to_owned(),
                "default_site" => schema.default_site = Some(col.to_owned()),
                _ => {
                    if schema.variables.iter().any(|(k, _)| k == key) {
                        return Err(Error::Schema(format!("variable {key} mapped twice")));
                    }
                    schema.variables.push((key.to_owned(), col.to_owned()))
                }
            }
        }
        Ok(schema)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub rows: usize,
    /// (data row number starting at 1, column, raw cell) for cells that were
    /// neither empty/NA nor a finite number.
    pub unparseable: Vec<(usize, String, String)>,
}

fn parse_cell(cell: &str) -> std::result::Result<Option<f64>, ()> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(()),
    }
}

pub fn parse_csv<R: Read>(reader: R, schema: &Schema, kind: DataKind) -> Result<(Dataset, ParseReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Schema("missing header row".into()));
    }
    let find = |name: &str| headers.iter().position(|h| h == name);
    let ts_col = find(&schema.timestamp)
        .ok_or_else(|| Error::Schema(format!("timestamp column {:?} not in header", schema.timestamp)))?;
    let site_col = find(&schema.site);
    if site_col.is_none() && schema.default_site.is_none() {
        return Err(Error::Schema(format!(
            "site column {:?} not in header and no default_site given",
            schema.site
        )));
    }
    let var_cols: Vec<(String, usize)> = if schema.variables.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != ts_col && Some(*i) != site_col)
            .map(|(i, h)| (h.to_owned(), i))
            .collect()
    } else {
        schema
            .variables
            .iter()
            .map(|(var, col)| {
                find(col)
                    .map(|i| (var.clone(), i))
                    .ok_or_else(|| Error::Schema(format!("column {col:?} for {var} not in header")))
            })
            .collect::<Result<_>>()?
    };

    let mut report = ParseReport::default();
    let mut observations = Vec::new();
    let mut seen: BTreeMap<(String, Timestamp), usize> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let raw_ts = record.get(ts_col).unwrap_or("");
        let timestamp = parse_timestamp(raw_ts).ok_or_else(|| Error::Timestamp {
            row,
            value: raw_ts.to_owned(),
        })?;
        let site = match site_col {
            Some(c) => record.get(c).unwrap_or("").to_owned(),
            None => schema.default_site.clone().unwrap_or_default(),
        };
        if site.is_empty() {
            return Err(Error::Input(format!("row {row}: empty site")));
        }
        if seen.insert((site.clone(), timestamp), row).is_some() {
            return Err(Error::Duplicate {
                row,
                site,
                timestamp: format_timestamp(&timestamp),
            });
        }
        let mut values = BTreeMap::new();
        for (var, col) in &var_cols {
            let cell = record.get(*col).unwrap_or("");
            let v = parse_cell(cell).unwrap_or_else(|()| {
                report.unparseable.push((row, var.clone(), cell.to_owned()));
                None
            });
            values.insert(var.clone(), v);
        }
        observations.push(Observation { timestamp, site, values });
    }
    report.rows = observations.len();
    let variables = var_cols.into_iter().map(|(v, _)| v).collect();
    Ok((Dataset::new(kind, variables, observations)?, report))
}

/// Writes `timestamp,site,<variables...>` with missing values as `NA`.
/// Parsing the output with [`Schema::default`] reproduces the dataset.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["timestamp".to_owned(), "site".to_owned()];
    header.extend(dataset.variables.iter().cloned());
    w.write_record(&header)?;
    for obs in &dataset.observations {
        let mut rec = vec![format_timestamp(&obs.timestamp), obs.site.clone()];
        for var in &dataset.variables {
            rec.push(match obs.value(var) {
                Some(v) => format!("{v:?}"),
                None => "NA".to_owned(),
            });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSeries {
    site: String,
    points: Vec<(Timestamp, f64)>,
}

impl LevelSeries {
    pub fn new(site: impl Into<String>, points: Vec<(Timestamp, f64)>) -> Result<Self> {
        let site = site.into();
        for (i, w) in points.windows(2).enumerate() {
            if w[1].0 <= w[0].0 {
                return Err(Error::Ordering {
                    group: site,
                    position: i + 1,
                });
            }
        }
        if let Some((t, l)) = points.iter().find(|(_, l)| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::Domain(format!("level {l} at {} must be positive", format_timestamp(t))));
        }
        Ok(Self { site, points })
    }

    /// One series per site from the present values of `var`.
    pub fn from_dataset(dataset: &Dataset, var: &str) -> Result<Vec<LevelSeries>> {
        dataset
            .sites()
            .into_iter()
            .map(|site| {
                let points = dataset
                    .observations
                    .iter()
                    .filter(|o| o.site == site)
                    .filter_map(|o| o.value(var).map(|l| (o.timestamp, l)))
                    .collect();
                LevelSeries::new(site, points)
            })
            .collect()
    }

    pub fn site(&self) -> &str {
        &self.site
    }

    pub fn points(&self) -> &[(Timestamp, f64)] {
        &self.points
    }
}

/// Linear interpolation of the level series at each target. Targets outside
/// the recorded span yield `None`.
pub fn interpolate_level(series: &LevelSeries, targets: &[Timestamp]) -> Result<Vec<Option<f64>>> {
    let pts = &series.points;
    if pts.is_empty() {
        return Err(Error::Input(format!("empty level series for site {}", series.site)));
    }
    Ok(targets
        .iter()
        .map(|t| match pts.binary_search_by(|(pt, _)| pt.cmp(t)) {
            Ok(i) => Some(pts[i].1),
            Err(0) => None,
            Err(i) if i == pts.len() => None,
            Err(i) => {
                let (t0, l0) = pts[i - 1];
                let (t1, l1) = pts[i];
                let w = (*t - t0).num_seconds() as f64 / (t1 - t0).num_seconds() as f64;
                Some(l0 + w * (l1 - l0))
            }
        })
        .collect())
}

/// Fills `var` on every observation by interpolating the matching site's
/// level series; sites without a series get missing values.
pub fn attach_levels(dataset: &Dataset, series: &[LevelSeries], var: &str) -> Result<Dataset> {
    let mut out = dataset.clone();
    if !out.has_variable(var) {
        out.variables.push(var.to_owned());
    }
    for site in dataset.sites() {
        let idx: Vec<usize> = (0..out.observations.len())
            .filter(|&i| out.observations[i].site == site)
            .collect();
        let interpolated = match series.iter().find(|s| s.site == site) {
            Some(s) => {
                let targets: Vec<Timestamp> = idx.iter().map(|&i| out.observations[i].timestamp).collect();
                interpolate_level(s, &targets)?
            }
            None => vec![None; idx.len()],
        };
        for (i, v) in idx.into_iter().zip(interpolated) {
            out.observations[i].values.insert(var.to_owned(), v);
        }
    }
    Ok(out)
}

/// Inclusive expected bounds for one variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    /// Strictly positive values, as required by the log10 transform.
    pub fn positive() -> Self {
        Self {
            min: f64::MIN_POSITIVE,
            max: f64::INFINITY,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedValue {
    pub timestamp: Timestamp,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeEntry {
    pub variable: String,
    pub site: String,
    pub min: f64,
    pub max: f64,
    pub count: usize,
    pub out_of_bounds: Vec<FlaggedValue>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RangeReport {
    pub entries: Vec<RangeEntry>,
}

impl RangeReport {
    pub fn get(&self, variable: &str, site: &str) -> Option<&RangeEntry> {
        self.entries.iter().find(|e| e.variable == variable && e.site == site)
    }

    pub fn flagged_count(&self) -> usize {
        self.entries.iter().map(|e| e.out_of_bounds.len()).sum()
    }
}

/// Observed min/max/count per (variable, site) with out-of-bounds values
/// listed. Variables without expected bounds are summarised only.
pub fn validate_ranges(dataset: &Dataset, expected: &BTreeMap<String, Bounds>) -> RangeReport {
    let mut entries = Vec::new();
    for var in &dataset.variables {
        for site in dataset.sites() {
            let mut entry: Option<RangeEntry> = None;
            for obs in dataset.observations.iter().filter(|o| o.site == site) {
                let Some(v) = obs.value(var) else { continue };
                let e = entry.get_or_insert_with(|| RangeEntry {
                    variable: var.clone(),
                    site: site.clone(),
                    min: v,
                    max: v,
                    count: 0,
                    out_of_bounds: Vec::new(),
                });
                e.min = e.min.min(v);
                e.max = e.max.max(v);
                e.count += 1;
                if expected.get(var).is_some_and(|b| !b.contains(v)) {
                    e.out_of_bounds.push(FlaggedValue {
                        timestamp: obs.timestamp,
                        value: v,
                    });
                }
            }
            entries.extend(entry);
        }
    }
    RangeReport { entries }
}
