//! Experiment files and the `run`, `compare` and `sweep-missing` commands.
//!
//! A config file is a JSON object with the fields of [`FlConfig`] plus the
//! harness keys `out_dir`, `noise_levels`, `missing_rates` and
//! `aggregators`. Unknown keys are rejected.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{FedGraphError, Result};
use crate::sim::fl::{prepare_seeds, run_prepared, Aggregator, FlConfig, RunReport, SeedSetup};
use crate::VERSION;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "FEDGRAPH_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "fedgraph-out";

const HARNESS_KEYS: [&str; 4] = ["out_dir", "noise_levels", "missing_rates", "aggregators"];

/// A parsed experiment file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Experiment {
    pub fl: FlConfig,
    pub out_dir: Option<PathBuf>,
    /// Noise levels of `compare`; defaults to `[fl.noise_scale]`.
    pub noise_levels: Vec<f64>,
    /// Rates of `sweep-missing`; defaults to 0.00, 0.01, ..., 0.10.
    pub missing_rates: Vec<f64>,
    /// Aggregators of `compare`.
    pub aggregators: Vec<Aggregator>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct HarnessKeys {
    out_dir: Option<PathBuf>,
    noise_levels: Option<Vec<f64>>,
    missing_rates: Option<Vec<f64>>,
    aggregators: Option<Vec<Aggregator>>,
}

/// The default missing-rate grid.
pub fn missing_rate_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 100.0).collect()
}

fn config_error(e: impl std::fmt::Display) -> FedGraphError {
    FedGraphError::Config(e.to_string())
}

/// Sets `path` (dot separated) in `doc` to `value`, creating objects on the way.
fn set_dotted(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_error(format!("malformed override key {path:?}")));
    }
    for (i, key) in keys.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            _ => {
                return Err(config_error(format!(
                    "override {path:?}: {} is not an object",
                    keys[..i].join(".")
                )))
            }
        };
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("loop returns on the last key")
}

/// Applies one `key=value` override. The value is parsed as JSON, falling
/// back to a plain string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_error(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    set_dotted(doc, key.trim(), value)
}

impl Experiment {
    /// Parses a JSON document after applying overrides and an optional seed.
    pub fn from_value(mut doc: Value, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        if !doc.is_object() {
            return Err(config_error("config must be a JSON object"));
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        if let Some(s) = seed {
            set_dotted(&mut doc, "seeds", Value::from(vec![s]))?;
        }
        let Value::Object(mut map) = doc else { unreachable!() };
        let mut harness = Map::new();
        for key in HARNESS_KEYS {
            if let Some(v) = map.remove(key) {
                harness.insert(key.to_string(), v);
            }
        }
        let keys: HarnessKeys = serde_json::from_value(Value::Object(harness)).map_err(config_error)?;
        let fl: FlConfig = serde_json::from_value(Value::Object(map)).map_err(config_error)?;
        fl.validate()?;
        let exp = Self {
            noise_levels: keys.noise_levels.unwrap_or_else(|| vec![fl.noise_scale]),
            missing_rates: keys.missing_rates.unwrap_or_else(missing_rate_grid),
            aggregators: keys.aggregators.unwrap_or_default(),
            out_dir: keys.out_dir,
            fl,
        };
        if exp.noise_levels.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(config_error("noise_levels must be finite and nonnegative"));
        }
        if exp.missing_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(config_error("missing_rates must lie in [0, 1]"));
        }
        Ok(exp)
    }

    pub fn from_str(text: &str, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| config_error(format!("malformed JSON: {e}")))?;
        Self::from_value(doc, overrides, seed)
    }

    /// Reads `path`, or starts from the defaults when it is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| config_error(format!("{}: {e}", p.display())))?;
                Self::from_str(&text, overrides, seed)
            }
            None => Self::from_value(Value::Object(Map::new()), overrides, seed),
        }
    }

    /// Output directory: the flag, then the config, then the environment.
    pub fn resolve_out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    /// The effective configuration as written to disk.
    pub fn effective(&self) -> Value {
        let mut v = serde_json::to_value(&self.fl).expect("config serializes");
        let m = v.as_object_mut().expect("config is an object");
        m.insert(
            "noise_levels".into(),
            serde_json::to_value(&self.noise_levels).expect("floats"),
        );
        m.insert(
            "missing_rates".into(),
            serde_json::to_value(&self.missing_rates).expect("floats"),
        );
        m.insert(
            "aggregators".into(),
            serde_json::to_value(&self.aggregators).expect("enum"),
        );
        v
    }
}

/// Process exit code for an error: 2 for configuration problems, 3 otherwise.
pub fn exit_code(e: &FedGraphError) -> i32 {
    match e {
        FedGraphError::Config(_) => 2,
        _ => 3,
    }
}

fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".to_string()
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Reproducibility header written at the top of every CSV file.
fn csv_header(out: &mut impl Write, exp: &Experiment) -> Result<()> {
    writeln!(out, "# {VERSION}")?;
    writeln!(out, "# config: {}", serde_json::to_string(&exp.effective())?)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    version: &'a str,
    config: Value,
    #[serde(flatten)]
    body: T,
}

fn stamped<T: Serialize>(exp: &Experiment, body: T) -> Stamped<'static, T> {
    Stamped {
        version: VERSION,
        config: exp.effective(),
        body,
    }
}

/// What `run` produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub files: Vec<PathBuf>,
}

impl RunOutput {
    pub fn failed(&self) -> bool {
        !self.report.failed_seeds().is_empty()
    }
}

pub fn write_rounds_csv(out: &mut impl Write, exp: &Experiment, reports: &[&RunReport]) -> Result<()> {
    csv_header(out, exp)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["seed", "round", "client", "accuracy", "loss", "aggregator"])
        .map_err(csv_error)?;
    for r in reports {
        for s in &r.seeds {
            for m in &s.metrics {
                w.write_record([
                    m.seed.to_string(),
                    m.round.to_string(),
                    m.client.to_string(),
                    fmt_f(m.accuracy),
                    fmt_f(m.loss),
                    r.aggregator.to_string(),
                ])
                .map_err(csv_error)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> FedGraphError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FedGraphError::Io(io),
        other => FedGraphError::Format(format!("{other:?}")),
    }
}

/// `run`: one aggregator over all seeds. Writes `effective_config.json`,
/// `rounds.csv` and `report.json`.
pub fn cmd_run(exp: &Experiment, out_dir: &Path) -> Result<RunOutput> {
    fs::create_dir_all(out_dir)?;
    let config_path = out_dir.join("effective_config.json");
    write_json(&config_path, &stamped(exp, Map::new()))?;
    let setups = prepare_seeds(&exp.fl)?;
    let report = run_prepared(&exp.fl, &setups, exp.fl.aggregator);

    let csv_path = out_dir.join("rounds.csv");
    let mut out = create(&csv_path)?;
    write_rounds_csv(&mut out, exp, &[&report])?;
    out.flush()?;
    let report_path = out_dir.join("report.json");
    write_json(&report_path, &stamped(exp, &report))?;
    Ok(RunOutput {
        report,
        files: vec![config_path, csv_path, report_path],
    })
}

/// One cell of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareCell {
    pub aggregator: Aggregator,
    pub noise_scale: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub final_accuracies: Vec<f64>,
    pub failed_seeds: Vec<u64>,
}

/// Randomness shared by all aggregators for one seed at one noise level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DrawRecord {
    pub noise_scale: f64,
    pub seed: u64,
    pub setup_digest: String,
    pub channel_digests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareOutput {
    pub cells: Vec<CompareCell>,
    pub draws: Vec<DrawRecord>,
    #[serde(skip)]
    pub reports: Vec<RunReport>,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

impl CompareOutput {
    pub fn cell(&self, agg: Aggregator, noise_scale: f64) -> Option<&CompareCell> {
        self.cells
            .iter()
            .find(|c| c.aggregator == agg && c.noise_scale == noise_scale)
    }

    pub fn failed(&self) -> bool {
        self.cells.iter().any(|c| !c.failed_seeds.is_empty())
    }
}

/// Runs every aggregator on the same seeds, partitions, initial models and
/// channel draws, once per noise level.
pub fn compare(exp: &Experiment) -> Result<CompareOutput> {
    if exp.aggregators.len() < 2 {
        return Err(config_error("compare needs at least two aggregators"));
    }
    let mut cells = Vec::new();
    let mut draws = Vec::new();
    let mut reports = Vec::new();
    for &s in &exp.noise_levels {
        let cfg = FlConfig {
            noise_scale: s,
            ..exp.fl.clone()
        };
        let setups = prepare_seeds(&cfg)?;
        let mut shared: Vec<Option<Vec<String>>> = vec![None; setups.len()];
        for &agg in &exp.aggregators {
            let report = run_prepared(&cfg, &setups, agg);
            for (slot, seed) in shared.iter_mut().zip(&report.seeds) {
                let d = &seed.channel_digests;
                match slot {
                    None => *slot = Some(d.clone()),
                    Some(prev) => {
                        let n = prev.len().min(d.len());
                        if prev[..n] != d[..n] {
                            return Err(FedGraphError::InvalidParameter(format!(
                                "channel draws differ between aggregators for seed {}",
                                seed.seed
                            )));
                        }
                        if d.len() > prev.len() {
                            *prev = d.clone();
                        }
                    }
                }
            }
            cells.push(CompareCell {
                aggregator: agg,
                noise_scale: s,
                mean_accuracy: report.mean_final_accuracy,
                std_accuracy: report.std_final_accuracy,
                final_accuracies: report.seeds.iter().map(|r| r.final_accuracy).collect(),
                failed_seeds: report.failed_seeds(),
            });
            reports.push(report);
        }
        for (setup, digests) in setups.iter().zip(shared) {
            draws.push(DrawRecord {
                noise_scale: s,
                seed: setup.seed,
                setup_digest: setup_digest(setup),
                channel_digests: digests.unwrap_or_default(),
            });
        }
    }
    Ok(CompareOutput {
        cells,
        draws,
        reports,
        files: Vec::new(),
    })
}

fn setup_digest(s: &SeedSetup) -> String {
    s.digest()
}

fn pct(v: f64) -> String {
    if v.is_finite() {
        format!("{:.2}", 100.0 * v)
    } else {
        "nan".to_string()
    }
}

/// `compare`: writes `compare.csv`, `compare.md` and `compare.json`.
pub fn cmd_compare(exp: &Experiment, out_dir: &Path) -> Result<CompareOutput> {
    fs::create_dir_all(out_dir)?;
    let mut result = compare(exp)?;

    let csv_path = out_dir.join("compare.csv");
    let mut out = create(&csv_path)?;
    csv_header(&mut out, exp)?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record([
            "aggregator",
            "noise_scale",
            "mean_accuracy",
            "std_accuracy",
            "n_seeds",
            "failed_seeds",
        ])
        .map_err(csv_error)?;
        for c in &result.cells {
            w.write_record([
                c.aggregator.to_string(),
                fmt_f(c.noise_scale),
                fmt_f(c.mean_accuracy),
                fmt_f(c.std_accuracy),
                c.final_accuracies.len().to_string(),
                c.failed_seeds.len().to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
    }
    out.flush()?;

    let md_path = out_dir.join("compare.md");
    let mut md = create(&md_path)?;
    writeln!(md, "<!-- {VERSION} -->")?;
    writeln!(md, "<!-- config: {} -->", serde_json::to_string(&exp.effective())?)?;
    writeln!(md)?;
    write!(md, "| aggregator |")?;
    for s in &exp.noise_levels {
        write!(md, " s = {s} |")?;
    }
    writeln!(md)?;
    writeln!(md, "|---|{}", "---|".repeat(exp.noise_levels.len()))?;
    for &agg in &exp.aggregators {
        write!(md, "| {agg} |")?;
        for &s in &exp.noise_levels {
            let c = result.cell(agg, s).expect("every cell was run");
            write!(md, " {} ± {} |", pct(c.mean_accuracy), pct(c.std_accuracy))?;
        }
        writeln!(md)?;
    }
    md.flush()?;

    let json_path = out_dir.join("compare.json");
    write_json(&json_path, &stamped(exp, &result))?;
    result.files = vec![csv_path, md_path, json_path];
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub missing_rate: f64,
    pub noise_scale: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub final_accuracies: Vec<f64>,
    pub failed_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

impl SweepOutput {
    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| !r.failed_seeds.is_empty())
    }
}

/// Final accuracy of the configured aggregator at every missing rate.
pub fn sweep_missing(exp: &Experiment) -> Result<SweepOutput> {
    if exp.fl.aggregator != Aggregator::Jgesr {
        return Err(config_error(format!(
            "sweep-missing runs the jgesr aggregator, config selects {}",
            exp.fl.aggregator
        )));
    }
    let mut rows = Vec::with_capacity(exp.missing_rates.len());
    for &rate in &exp.missing_rates {
        let cfg = FlConfig {
            missing_rate: rate,
            ..exp.fl.clone()
        };
        let setups = prepare_seeds(&cfg)?;
        let report = run_prepared(&cfg, &setups, cfg.aggregator);
        rows.push(SweepRow {
            missing_rate: rate,
            noise_scale: cfg.noise_scale,
            mean_accuracy: report.mean_final_accuracy,
            std_accuracy: report.std_final_accuracy,
            final_accuracies: report.seeds.iter().map(|r| r.final_accuracy).collect(),
            failed_seeds: report.failed_seeds(),
        });
    }
    Ok(SweepOutput {
        rows,
        files: Vec::new(),
    })
}

/// `sweep-missing`: writes `sweep_missing.csv` and `sweep_missing.json`.
pub fn cmd_sweep_missing(exp: &Experiment, out_dir: &Path) -> Result<SweepOutput> {
    fs::create_dir_all(out_dir)?;
    let mut result = sweep_missing(exp)?;
    let csv_path = out_dir.join("sweep_missing.csv");
    let mut out = create(&csv_path)?;
    csv_header(&mut out, exp)?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record([
            "missing_rate",
            "noise_scale",
            "mean_accuracy",
            "std_accuracy",
            "n_seeds",
            "failed_seeds",
        ])
        .map_err(csv_error)?;
        for r in &result.rows {
            w.write_record([
                format!("{:.2}", r.missing_rate),
                fmt_f(r.noise_scale),
                fmt_f(r.mean_accuracy),
                fmt_f(r.std_accuracy),
                r.final_accuracies.len().to_string(),
                r.failed_seeds.len().to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
    }
    out.flush()?;
    let json_path = out_dir.join("sweep_missing.json");
    write_json(&json_path, &stamped(exp, &result))?;
    result.files = vec![csv_path, json_path];
    Ok(result)
}
