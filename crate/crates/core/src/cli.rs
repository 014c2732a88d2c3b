//! Command-line front end.
//!
//! ```text
//! wq-surrogate [--config FILE] [--threads N] [--seed N] [--out DIR] <command> [flags]
//! ```
//!
//! Every flag can also be given in the config file as a `key = value` line
//! (dashes or underscores, `#` comments); flags on the command line win. The
//! effective settings of a run are hashed and the hash is written into every
//! artifact together with the tool version.
//!
//! Formula grammar:
//!
//! ```text
//! formula  := response "~" term ("+" term)*  |  response "~" "1"
//! response := var | log10(var)
//! term     := factor (":" factor)*
//! factor   := var | log10(var) | site | cat(var) | t15(var)
//! ```
//!
//! Log10 transforms are never implicit: `log10(TSS) ~ log10(turbidity)` fits
//! on the log scale and back-transforms predictions, `TSS ~ turbidity` does
//! not. Grouping rules for the CAR(1) errors are `none`, `site` or
//! `level:<q1|median|q3>[:var]`.
//!
//! Exit status is 0 on success, 1 on usage or input errors and 2 when the
//! numerical pipeline fails (singular design, no convergence).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::artifact::{config_hash, fmt17, from_json_str, to_json_string, Provenance, ARTIFACT_VERSION, TOOL_VERSION};
use crate::car1::{CorrelationSpec, GroupRule, TIME_UNIT};
use crate::data::{
    attach_levels, format_timestamp, parse_csv, validate_ranges, write_csv, Bounds, DataKind, Dataset, LevelSeries, ParseReport,
    RangeReport, Schema,
};
use crate::design::{build_design_with, DesignOptions, ModelFormula, QuantileRule};
use crate::error::{Error, Result};
use crate::gls::{fit, FittedModel, Method, Interval};
use crate::infer::{anova_sequential, predict};
use crate::select::{backward_stepwise, compose, select_per_site, SelectionTrace, SiteSelection, SiteWinner};
use crate::validate::{cross_validate, simulate, CvStats, SimulationSpec};

#[derive(Debug, Parser)]
#[command(name = "wq-surrogate", version, about = "GLS surrogate models with CAR(1) errors for water-quality data")]
struct Cli {
    /// key = value file supplying defaults for any flag
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<String>,
    /// Seed for every random draw
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one GLS model and write model.json
    Fit(FitArgs),
    /// Backward stepwise AIC selection; writes selection.json
    Select(SelectArgs),
    /// Blocked cross-validation; writes cv.json
    Cv(CvArgs),
    /// Sequential F tests for a fitted model; writes anova.tsv
    Anova(AnovaArgs),
    /// Predictions with 95% intervals from sensor data; writes predictions.tsv
    Predict(PredictArgs),
    /// Simulate a dataset from a JSON simulation spec; writes simulated.csv
    Simulate(SimulateArgs),
    /// Range checks on input data; writes ranges.json
    #[command(name = "validate-data")]
    ValidateData(ValidateArgs),
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Laboratory CSV
    #[arg(long)]
    lab: Option<String>,
    /// key=column schema file for the laboratory CSV
    #[arg(long)]
    schema: Option<String>,
    #[arg(long)]
    formula: Option<String>,
    /// none | site | level:<rule>[:var] (default site)
    #[arg(long)]
    group: Option<String>,
    /// reml | ml (default reml)
    #[arg(long)]
    method: Option<String>,
    /// Restrict to one site
    #[arg(long)]
    site: Option<String>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long)]
    lab: Option<String>,
    #[arg(long)]
    schema: Option<String>,
    /// Full starting formula
    #[arg(long)]
    formula: Option<String>,
    #[arg(long)]
    group: Option<String>,
    #[arg(long)]
    site: Option<String>,
    /// Comma-separated level-grouping rules (q1,median,q3); switches to
    /// per-site selection scored by cross-validation
    #[arg(long)]
    rules: Option<String>,
    /// Level variable for the grouping rules (default level)
    #[arg(long)]
    level_var: Option<String>,
    /// Blocks per site for rule scoring (default 5)
    #[arg(long)]
    blocks: Option<String>,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[arg(long)]
    lab: Option<String>,
    #[arg(long)]
    schema: Option<String>,
    /// JSON {formula, group, site?}
    #[arg(long)]
    model_spec: Option<String>,
    #[arg(long)]
    formula: Option<String>,
    #[arg(long)]
    group: Option<String>,
    #[arg(long)]
    site: Option<String>,
    /// Blocks per site (default 5)
    #[arg(long)]
    blocks: Option<String>,
}

#[derive(Debug, Args)]
struct AnovaArgs {
    /// model.json from fit
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    lab: Option<String>,
    #[arg(long)]
    schema: Option<String>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: Option<String>,
    /// Sensor CSV
    #[arg(long)]
    sensor: Option<String>,
    #[arg(long)]
    sensor_schema: Option<String>,
    /// Level CSV, interpolated onto the sensor timestamps
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    levels_schema: Option<String>,
    /// Name of the level variable (default: the model's grouping variable,
    /// else level)
    #[arg(long)]
    level_var: Option<String>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// JSON simulation spec; --seed overrides its seed
    #[arg(long)]
    spec: Option<String>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    lab: Option<String>,
    #[arg(long)]
    schema: Option<String>,
    #[arg(long)]
    sensor: Option<String>,
    #[arg(long)]
    sensor_schema: Option<String>,
    /// JSON map variable -> {min, max}; unlisted variables must be positive
    #[arg(long)]
    bounds: Option<String>,
}

const GLOBAL_KEYS: [&str; 3] = ["threads", "seed", "out"];

const NON_HASHED_KEYS: [&str; 2] = ["threads", "out"];

/// Effective settings of one run: config file overlaid by flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Input(format!("{} needs --{}", self.command, key.replace('_', "-"))))
    }

    /// Path that must exist now.
    pub fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        match self.get(key) {
            None => Ok(None),
            Some(p) => {
                let path = PathBuf::from(p);
                if !path.exists() {
                    return Err(Error::Input(format!("--{} {p}: no such file", key.replace('_', "-"))));
                }
                Ok(Some(path))
            }
        }
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.require(key)?;
        Ok(self.path(key)?.expect("checked above"))
    }

    pub fn seed(&self) -> Result<Option<u64>> {
        self.get("seed")
            .map(|s| s.parse::<u64>().map_err(|_| Error::Input(format!("seed {s:?} is not a 64-bit unsigned integer"))))
            .transpose()
    }

    pub fn blocks(&self) -> Result<usize> {
        let k = match self.get("blocks") {
            None => 5,
            Some(s) => s.parse::<usize>().map_err(|_| Error::Input(format!("blocks {s:?} is not a count")))?,
        };
        if k < 2 {
            return Err(Error::Input(format!("blocks must be at least 2, got {k}")));
        }
        Ok(k)
    }

    pub fn threads(&self) -> Result<Option<usize>> {
        match self.get("threads") {
            None => Ok(None),
            Some(s) => match s.parse::<usize>() {
                Ok(n) if n > 0 => Ok(Some(n)),
                _ => Err(Error::Input(format!("threads {s:?} is not a positive count"))),
            },
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out").unwrap_or("."))
    }

    pub fn method(&self) -> Result<Method> {
        self.get("method").unwrap_or("reml").parse()
    }

    pub fn grouping(&self) -> Result<CorrelationSpec> {
        Ok(CorrelationSpec::new(self.get("group").unwrap_or("site").parse::<GroupRule>()?))
    }

    pub fn formula(&self) -> Result<ModelFormula> {
        ModelFormula::parse(self.require("formula")?)
    }

    /// SHA-256 over the sorted `key=value` lines, command first. The output
    /// directory and thread count do not change results and are left out.
    pub fn hash(&self) -> String {
        let mut text = format!("command={}\n", self.command);
        for (k, v) in self.values.iter().filter(|(k, _)| !NON_HASHED_KEYS.contains(&k.as_str())) {
            let _ = writeln!(text, "{k}={v}");
        }
        config_hash(&text)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            tool_version: TOOL_VERSION.to_owned(),
            config_hash: Some(self.hash()),
        }
    }
}

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("config {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("config line {}: expected key = value", lineno + 1)))?;
        let v = v.trim().trim_matches('"');
        out.insert(k.trim().replace('-', "_"), v.to_owned());
    }
    Ok(out)
}

/// Every flag id any subcommand accepts.
fn known_keys() -> Vec<String> {
    let cmd = Cli::command();
    let mut keys: Vec<String> = GLOBAL_KEYS.iter().map(|s| s.to_string()).collect();
    for sub in cmd.get_subcommands() {
        keys.extend(sub.get_arguments().map(|a| a.get_id().to_string()));
    }
    keys
}

fn command_line_values(m: &ArgMatches, out: &mut BTreeMap<String, String>) {
    for id in m.ids() {
        if m.value_source(id.as_str()) == Some(ValueSource::CommandLine) {
            if let Ok(Some(v)) = m.try_get_one::<String>(id.as_str()) {
                out.insert(id.to_string(), v.clone());
            }
        }
    }
}

fn resolve(matches: &ArgMatches) -> Result<RunConfig> {
    let (command, sub) = matches.subcommand().expect("subcommand is required");
    let accepted: Vec<String> = Cli::command()
        .find_subcommand(command)
        .expect("known subcommand")
        .get_arguments()
        .map(|a| a.get_id().to_string())
        .filter(|id| id != "config")
        .chain(GLOBAL_KEYS.iter().map(|k| k.to_string()))
        .collect();

    let mut values = BTreeMap::new();
    let config = sub
        .get_one::<PathBuf>("config")
        .or_else(|| matches.get_one::<PathBuf>("config"));
    if let Some(path) = config {
        let known = known_keys();
        for (k, v) in parse_config_file(path)? {
            if !known.contains(&k) {
                return Err(Error::Input(format!("config key {k:?} is not a known flag")));
            }
            // keys for other subcommands are allowed and ignored
            if accepted.contains(&k) {
                values.insert(k, v);
            }
        }
    }
    command_line_values(matches, &mut values);
    command_line_values(sub, &mut values);
    values.remove("config");
    Ok(RunConfig {
        command: command.to_owned(),
        values,
    })
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = resolve(&matches).and_then(|cfg| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads()?.unwrap_or(0))
            .build()
            .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
        pool.install(|| dispatch(&cfg))
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cfg: &RunConfig) -> Result<()> {
    match cfg.command.as_str() {
        "fit" => cmd_fit(cfg),
        "select" => cmd_select(cfg),
        "cv" => cmd_cv(cfg),
        "anova" => cmd_anova(cfg),
        "predict" => cmd_predict(cfg),
        "simulate" => cmd_simulate(cfg),
        "validate-data" => cmd_validate(cfg),
        other => Err(Error::Input(format!("unknown command {other}"))),
    }
}

/// Wrapper giving every JSON artifact the same metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub version: u32,
    pub provenance: Provenance,
    pub time_unit: String,
    pub response_log10: Option<bool>,
    pub result: T,
}

impl<T> Artifact<T> {
    fn new(cfg: &RunConfig, response_log10: Option<bool>, result: T) -> Self {
        Self {
            version: ARTIFACT_VERSION,
            provenance: cfg.provenance(),
            time_unit: TIME_UNIT.to_owned(),
            response_log10,
            result,
        }
    }
}

fn write_artifact(cfg: &RunConfig, name: &str, contents: &str) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    eprintln!("wrote {}", path.display());
    Ok(path)
}

fn tsv_header(cfg: &RunConfig, extra: &[(&str, String)]) -> String {
    let mut s = format!("# tool_version: {TOOL_VERSION}\n# config_hash: {}\n# time_unit: {TIME_UNIT}\n", cfg.hash());
    for (k, v) in extra {
        let _ = writeln!(s, "# {k}: {v}");
    }
    s
}

fn load_schema(cfg: &RunConfig, key: &str) -> Result<Schema> {
    match cfg.path(key)? {
        Some(p) => Schema::parse(&fs::read_to_string(p)?),
        None => Ok(Schema::default()),
    }
}

fn load_csv(cfg: &RunConfig, path_key: &str, schema_key: &str, kind: DataKind) -> Result<Dataset> {
    let path = cfg.require_path(path_key)?;
    let schema = load_schema(cfg, schema_key)?;
    let (ds, report) = parse_csv(fs::File::open(&path)?, &schema, kind)?;
    warn_unparseable(&path, &report);
    Ok(ds)
}

fn warn_unparseable(path: &Path, report: &ParseReport) {
    if !report.unparseable.is_empty() {
        eprintln!(
            "warning: {}: {} unparseable cell(s) treated as missing",
            path.display(),
            report.unparseable.len()
        );
    }
}

fn load_lab(cfg: &RunConfig) -> Result<Dataset> {
    let ds = load_csv(cfg, "lab", "schema", DataKind::Laboratory)?;
    match cfg.get("site") {
        None => Ok(ds),
        Some(site) => {
            let sub = ds.filter_site(site);
            if sub.is_empty() {
                return Err(Error::Input(format!("site {site:?} not in {}", cfg.get("lab").unwrap_or(""))));
            }
            Ok(sub)
        }
    }
}

fn fit_lab(ds: &Dataset, formula: &ModelFormula, corr: &CorrelationSpec, method: Method) -> Result<FittedModel> {
    let opts = DesignOptions {
        extra_required: corr.required_variables(),
        layout: None,
    };
    fit(&build_design_with(ds, formula, &opts)?, corr, method)
}

fn fmt_interval(iv: &Option<Interval>) -> String {
    match iv {
        Some(iv) => format!("({:.4}, {:.4})", iv.lower, iv.upper),
        None => "(unavailable)".to_owned(),
    }
}

fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let ds = load_lab(cfg)?;
    let formula = cfg.formula()?;
    let corr = cfg.grouping()?;
    let mut model = fit_lab(&ds, &formula, &corr, cfg.method()?)?;
    model.provenance = cfg.provenance();
    write_artifact(cfg, "model.json", &to_json_string(&model)?)?;

    let mut s = format!("{}  [{}; grouping {}]\n", model.formula, model.method, model.correlation.grouping);
    let _ = writeln!(s, "n = {}, p = {}, groups = {}", model.n, model.p, model.groups);
    let se = model.beta_se();
    let width = model.column_labels.iter().map(String::len).max().unwrap_or(0);
    for ((label, b), e) in model.column_labels.iter().zip(&model.beta).zip(&se) {
        let _ = writeln!(s, "  {label:width$}  {b:>14.6}  (se {e:.6})");
    }
    let _ = writeln!(s, "phi = {:.4} {}", model.phi, fmt_interval(&model.phi_interval));
    let _ = writeln!(s, "sigma = {:.6}, logLik = {:.4}, AIC = {:.4}", model.sigma2.sqrt(), model.loglik, model.aic);
    for w in &model.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    print!("{s}");
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionOutput {
    pub traces: Vec<SelectionTrace>,
    pub per_site: Vec<SiteSelection>,
    pub composite: Option<ModelFormula>,
}

fn render_trace(trace: &SelectionTrace) -> String {
    let mut s = format!("grouping {}, {} rows\n", trace.correlation.grouping, trace.rows);
    let _ = writeln!(s, "  {:>4}  {:>12}  {:24}  formula", "step", "AIC", "dropped");
    for (i, st) in trace.steps.iter().enumerate() {
        let _ = writeln!(
            s,
            "  {:>4}  {:>12.4}  {:24}  {}",
            i,
            st.aic,
            st.dropped.as_deref().unwrap_or("-"),
            st.formula
        );
    }
    s
}

fn cmd_select(cfg: &RunConfig) -> Result<()> {
    let ds = load_lab(cfg)?;
    let full = cfg.formula()?;
    let mut output = SelectionOutput {
        traces: Vec::new(),
        per_site: Vec::new(),
        composite: None,
    };
    let mut text = String::new();
    match cfg.get("rules") {
        None => {
            let trace = backward_stepwise(&ds, &full, &cfg.grouping()?)?;
            text.push_str(&render_trace(&trace));
            let _ = writeln!(text, "selected: {}", trace.winner);
            output.traces.push(trace);
        }
        Some(rules) => {
            let rules = rules
                .split(',')
                .map(|r| r.trim().parse::<QuantileRule>())
                .collect::<Result<Vec<_>>>()?;
            let level_var = cfg.get("level_var").unwrap_or("level");
            let k = cfg.blocks()?;
            let mut winners = Vec::new();
            for site in ds.sites() {
                let sel = select_per_site(&ds, &full, &site, &rules, level_var, k)?;
                let _ = writeln!(text, "site {site}");
                for run in &sel.runs {
                    text.push_str(&render_trace(&run.trace));
                    let _ = writeln!(text, "  rule {}: cvRMSE {:.4}, cvR2 {:.4}", run.rule, run.cv.cv_rmse, run.cv.cv_r2);
                }
                let _ = writeln!(text, "  selected: {} [{}]", sel.best_formula, sel.best_grouping.grouping);
                winners.push(SiteWinner {
                    site: site.clone(),
                    formula: sel.best_formula.clone(),
                    grouping: sel.best_grouping.clone(),
                });
                output.per_site.push(sel);
            }
            let composite = compose(&winners, Some(&full))?;
            let _ = writeln!(text, "composite: {}", composite.union);
            output.composite = Some(composite.union);
        }
    }
    let log10 = Some(full.response().log10);
    write_artifact(cfg, "selection.json", &to_json_string(&Artifact::new(cfg, log10, &output))?)?;
    print!("{text}");
    Ok(())
}

/// Model description accepted by `cv --model-spec`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub formula: String,
    pub group: Option<String>,
    pub method: Option<String>,
    pub site: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvOutput {
    pub formula: ModelFormula,
    pub correlation: CorrelationSpec,
    pub blocks: usize,
    pub phi: f64,
    pub phi_interval: Option<Interval>,
    pub stats: CvStats,
}

fn cmd_cv(cfg: &RunConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(path) = cfg.path("model_spec")? {
        let spec: ModelSpec = from_json_str(&fs::read_to_string(path)?)?;
        // explicit flags win over the spec file
        cfg.values.entry("formula".into()).or_insert(spec.formula);
        if let Some(g) = spec.group {
            cfg.values.entry("group".into()).or_insert(g);
        }
        if let Some(s) = spec.site {
            cfg.values.entry("site".into()).or_insert(s);
        }
        if let Some(m) = spec.method {
            if m.parse::<Method>()? != Method::Reml {
                return Err(Error::Input("cross-validation refits by REML only".into()));
            }
        }
    }
    let ds = load_lab(&cfg)?;
    let formula = cfg.formula()?;
    let corr = cfg.grouping()?;
    let k = cfg.blocks()?;
    let stats = cross_validate(&ds, &formula, &corr, k)?;
    let full = fit_lab(&ds, &formula, &corr, Method::Reml)?;
    let out = CvOutput {
        formula: formula.clone(),
        correlation: corr,
        blocks: k,
        phi: full.phi,
        phi_interval: full.phi_interval,
        stats,
    };
    write_artifact(&cfg, "cv.json", &to_json_string(&Artifact::new(&cfg, Some(full.response_log10), &out))?)?;

    let st = &out.stats;
    let mut s = format!("{formula}  [{} blocks per site]\n", k);
    let _ = writeln!(s, "  cvR2    {:>8.2}%", 100.0 * st.cv_r2);
    let _ = writeln!(s, "  cvRMSE  {:>10.4}  ({:.4} back-transformed)", st.cv_rmse, st.rmse_backtransformed);
    let _ = writeln!(s, "  cvPC    {:>8.2}%", 100.0 * st.cv_pc);
    let _ = writeln!(s, "  phi     {:>10.4}  {}", out.phi, fmt_interval(&out.phi_interval));
    if st.partial {
        let _ = writeln!(s, "warning: some folds failed; {} of {} rows predicted", st.predicted, st.total);
    }
    print!("{s}");
    Ok(())
}

fn read_model(cfg: &RunConfig) -> Result<FittedModel> {
    from_json_str(&fs::read_to_string(cfg.require_path("model")?)?)
}

fn cmd_anova(cfg: &RunConfig) -> Result<()> {
    let model = read_model(cfg)?;
    let lab = load_csv(cfg, "lab", "schema", DataKind::Laboratory)?;
    let ds = lab.filter(|o| model.sites.contains(&o.site));
    let opts = DesignOptions {
        extra_required: model.correlation.required_variables(),
        layout: Some(model.layout.clone()),
    };
    let design = build_design_with(&ds, &model.formula, &opts)?;
    let table = anova_sequential(&model, &design)?;
    let header = tsv_header(
        cfg,
        &[
            ("formula", model.formula.to_string()),
            ("method", model.method.to_string()),
            ("phi", fmt17(model.phi)),
            ("tests", "sequential (type I)".to_owned()),
        ],
    );
    write_artifact(cfg, "anova.tsv", &(header + &table.to_tsv()))?;
    print!("{table}");
    Ok(())
}

fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let model = read_model(cfg)?;
    let mut sensor = load_csv(cfg, "sensor", "sensor_schema", DataKind::Sensor)?;
    if cfg.get("levels").is_some() {
        let levels = load_csv(cfg, "levels", "levels_schema", DataKind::Sensor)?;
        let var = match (cfg.get("level_var"), &model.correlation.grouping) {
            (Some(v), _) => v.to_owned(),
            (None, GroupRule::Level { var, .. }) => var.clone(),
            (None, _) => "level".to_owned(),
        };
        let series = LevelSeries::from_dataset(&levels, &var)?;
        sensor = attach_levels(&sensor, &series, &var)?;
    }
    let series = predict(&model, &sensor);
    let header = tsv_header(
        cfg,
        &[
            ("model_config_hash", model.provenance.config_hash.clone().unwrap_or_default()),
            ("formula", model.formula.to_string()),
            ("level", format!("{}", series.level)),
            ("z", fmt17(series.z)),
            ("interval", "infinite-horizon normal".to_owned()),
            ("skipped_rows", series.skipped.len().to_string()),
            ("caveat", series.caveat.clone()),
        ],
    );
    write_artifact(cfg, "predictions.tsv", &(header + &series.to_tsv()))?;

    let flagged = series.rows.iter().filter(|r| !r.extrapolated.is_empty()).count();
    let mut s = format!(
        "{} predictions, {} skipped, {} extrapolated\n",
        series.rows.len(),
        series.skipped.len(),
        flagged
    );
    if let Some(m) = series.max_point() {
        let _ = writeln!(
            s,
            "max back-transformed {} = {:.4} ({:.4}, {:.4}) at {} {}",
            series.response,
            m.point_back,
            m.lower_back,
            m.upper_back,
            m.site,
            format_timestamp(&m.timestamp)
        );
    }
    print!("{s}");
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let mut spec: SimulationSpec = from_json_str(&fs::read_to_string(cfg.require_path("spec")?)?)?;
    if let Some(seed) = cfg.seed()? {
        spec.seed = seed;
    }
    let ds = simulate(&spec)?;
    let mut buf = tsv_header(cfg, &[("formula", spec.formula.to_string()), ("seed", spec.seed.to_string())]).into_bytes();
    write_csv(&ds, &mut buf)?;
    write_artifact(cfg, "simulated.csv", &String::from_utf8(buf).expect("utf-8 output"))?;
    println!("{} rows at {} site(s)", ds.len(), ds.sites().len());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationOutput {
    pub laboratory: Option<RangeReport>,
    pub sensor: Option<RangeReport>,
    pub unparseable: BTreeMap<String, Vec<(usize, String, String)>>,
}

fn cmd_validate(cfg: &RunConfig) -> Result<()> {
    let bounds: BTreeMap<String, Bounds> = match cfg.path("bounds")? {
        Some(p) => from_json_str(&fs::read_to_string(p)?)?,
        None => BTreeMap::new(),
    };
    if cfg.get("lab").is_none() && cfg.get("sensor").is_none() {
        return Err(Error::Input("validate-data needs --lab and/or --sensor".into()));
    }
    let mut out = ValidationOutput {
        laboratory: None,
        sensor: None,
        unparseable: BTreeMap::new(),
    };
    let mut text = String::new();
    for (key, schema_key, kind) in [
        ("lab", "schema", DataKind::Laboratory),
        ("sensor", "sensor_schema", DataKind::Sensor),
    ] {
        let Some(path) = cfg.path(key)? else { continue };
        let (ds, report) = parse_csv(fs::File::open(&path)?, &load_schema(cfg, schema_key)?, kind)?;
        let mut expected = bounds.clone();
        for v in ds.variables() {
            expected.entry(v.clone()).or_insert_with(Bounds::positive);
        }
        let ranges = validate_ranges(&ds, &expected);
        let _ = writeln!(
            text,
            "{}: {} rows, {} out-of-range value(s), {} unparseable cell(s)",
            path.display(),
            report.rows,
            ranges.flagged_count(),
            report.unparseable.len()
        );
        out.unparseable.insert(key.to_owned(), report.unparseable);
        match kind {
            DataKind::Laboratory => out.laboratory = Some(ranges),
            DataKind::Sensor => out.sensor = Some(ranges),
        }
    }
    write_artifact(cfg, "ranges.json", &to_json_string(&Artifact::new(cfg, None, &out))?)?;
    print!("{text}");
    Ok(())
}
