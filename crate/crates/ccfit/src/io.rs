//! File formats: dataset CSV, design/plan/predictor specs, run manifests
//! and number formatting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use ccfit_core::population::canonicalize_labels;
use ccfit_core::{Design, Matrix, ObservedData, PredictorSpec, SplitPlan};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::simlab::MetricsRow;

/// Input rejected before any estimation: bad syntax, missing cells, or a
/// spec that contradicts the data.
#[derive(Debug, thiserror::Error)]
pub enum InputError {
    #[error("line {line}: {msg}")]
    Line { line: u64, msg: String },
    #[error("{0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// A parsed dataset with its original group labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub observed: ObservedData,
    pub covariates: Vec<String>,
    pub stratum: Option<Vec<usize>>,
    pub stratum_labels: Vec<String>,
    pub pair: Option<Vec<usize>>,
    pub pair_labels: Vec<String>,
}

pub fn read_to_string(path: &Path) -> Result<String, InputError> {
    std::fs::read_to_string(path).map_err(|e| InputError::Io { path: path.display().to_string(), source: e })
}

fn covariate_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix('x')?;
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) || rest.starts_with('0') {
        return None;
    }
    rest.parse().ok()
}

/// Parses a dataset: columns `y`, `z`, optional `stratum` and `pair`, and
/// covariates `x1..xd`. Other columns are rejected.
pub fn parse_dataset(text: &str) -> Result<Dataset, InputError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| InputError::Line { line: 1, msg: e.to_string() })?.clone();
    let mut col: BTreeMap<&str, usize> = BTreeMap::new();
    let mut xcols: Vec<(usize, usize)> = Vec::new();
    for (j, h) in header.iter().enumerate() {
        let known = matches!(h, "y" | "z" | "stratum" | "pair");
        if let Some(k) = covariate_index(h) {
            xcols.push((k, j));
        } else if !known {
            return Err(InputError::Line { line: 1, msg: format!("unknown column '{h}'") });
        }
        if col.insert(h, j).is_some() {
            return Err(InputError::Line { line: 1, msg: format!("duplicate column '{h}'") });
        }
    }
    for req in ["y", "z"] {
        if !col.contains_key(req) {
            return Err(InputError::Line { line: 1, msg: format!("missing required column '{req}'") });
        }
    }
    xcols.sort();
    for (pos, (k, _)) in xcols.iter().enumerate() {
        if *k != pos + 1 {
            return Err(InputError::Line { line: 1, msg: format!("covariates must be x1..x{}, found x{k}", xcols.len()) });
        }
    }
    let d = xcols.len();
    let (mut y, mut z, mut xs) = (Vec::new(), Vec::new(), Vec::new());
    let (mut strata, mut pairs) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            InputError::Line { line, msg: e.to_string() }
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let cell = |name: &str, j: usize| -> Result<&str, InputError> {
            match rec.get(j) {
                Some(s) if !s.is_empty() => Ok(s),
                _ => Err(InputError::Line { line, msg: format!("missing value in column '{name}'") }),
            }
        };
        let real = |name: &str, j: usize| -> Result<f64, InputError> {
            let s = cell(name, j)?;
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(InputError::Line { line, msg: format!("column '{name}': '{s}' is not a finite number") }),
            }
        };
        y.push(real("y", col["y"])?);
        z.push(match cell("z", col["z"])? {
            "0" => 0u8,
            "1" => 1u8,
            s => return Err(InputError::Line { line, msg: format!("column 'z': '{s}' is not 0 or 1") }),
        });
        for (k, j) in &xcols {
            xs.push(real(&format!("x{k}"), *j)?);
        }
        if let Some(&j) = col.get("stratum") {
            strata.push(cell("stratum", j)?.to_string());
        }
        if let Some(&j) = col.get("pair") {
            pairs.push(cell("pair", j)?.to_string());
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(InputError::Line { line: 2, msg: "dataset has no rows".into() });
    }
    let (stratum, stratum_labels) = if col.contains_key("stratum") {
        let (idx, labels) = canonicalize_labels(&strata);
        (Some(idx), labels)
    } else {
        (None, Vec::new())
    };
    let (pair, pair_labels) = if col.contains_key("pair") {
        let (idx, labels) = canonicalize_labels(&pairs);
        let mut counts = vec![0usize; labels.len()];
        for &p in &idx {
            counts[p] += 1;
        }
        if let Some(p) = counts.iter().position(|&c| c != 2) {
            return Err(InputError::Spec(format!("pair '{}' has {} units, expected 2", labels[p], counts[p])));
        }
        (Some(idx), labels)
    } else {
        (None, Vec::new())
    };
    let x = Matrix::from_row_major(n, d, xs).map_err(|e| InputError::Spec(e.to_string()))?;
    let groups = pair.clone().or_else(|| stratum.clone());
    let observed = ObservedData::new(x, z, y, groups).map_err(|e| InputError::Spec(e.to_string()))?;
    Ok(Dataset {
        observed,
        covariates: (1..=d).map(|k| format!("x{k}")).collect(),
        stratum,
        stratum_labels,
        pair,
        pair_labels,
    })
}

fn parse_list(s: &str) -> Result<Vec<usize>, InputError> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| InputError::Spec(format!("'{t}' is not a count"))))
        .collect()
}

fn parse_prob(s: &str) -> Result<f64, InputError> {
    s.trim().parse::<f64>().map_err(|_| InputError::Spec(format!("'{s}' is not a probability")))
}

fn load_json_spec(spec: &str) -> Result<Option<String>, InputError> {
    let t = spec.trim();
    if t.starts_with('{') {
        return Ok(Some(t.to_string()));
    }
    if t.ends_with(".json") {
        return read_to_string(Path::new(t)).map(Some);
    }
    Ok(None)
}

/// Design from a shorthand (`auto`, `cre`, `cre:N1`, `bre:R1`, `sre`,
/// `sre:T1,T2,..`, `mpe`) or JSON, resolved against the dataset.
pub fn parse_design(spec: &str, data: &Dataset) -> Result<Design, InputError> {
    let n = data.observed.n();
    let n1 = data.observed.n_treated();
    if let Some(json) = load_json_spec(spec)? {
        return serde_json::from_str(&json).map_err(|e| InputError::Spec(format!("design JSON: {e}")));
    }
    let (name, arg) = match spec.split_once(':') {
        Some((a, b)) => (a.trim(), Some(b)),
        None => (spec.trim(), None),
    };
    let strata_needed = || {
        data.stratum.clone().ok_or_else(|| InputError::Spec("design 'sre' needs a 'stratum' column".into()))
    };
    let observed_treated = |s: &[usize]| {
        let k = s.iter().max().map_or(0, |m| m + 1);
        let mut t = vec![0usize; k];
        for (i, &g) in s.iter().enumerate() {
            t[g] += data.observed.z[i] as usize;
        }
        t
    };
    match (name, arg) {
        ("auto", None) => {
            if let Some(p) = &data.pair {
                Ok(Design::MatchedPairs { pairs: p.clone() })
            } else if let Some(s) = &data.stratum {
                Ok(Design::Stratified { treated: observed_treated(s), strata: s.clone() })
            } else {
                Err(InputError::Spec("no stratum or pair column: choose the design with bre:R1 or cre".into()))
            }
        }
        ("cre", None) => Ok(Design::Complete { n, n1 }),
        ("cre", Some(a)) => Ok(Design::Complete { n, n1: parse_list(a)?.first().copied().unwrap_or(0) }),
        ("bre", Some(a)) => Ok(Design::Bernoulli { n, r1: parse_prob(a)? }),
        ("sre", None) => {
            let s = strata_needed()?;
            Ok(Design::Stratified { treated: observed_treated(&s), strata: s })
        }
        ("sre", Some(a)) => Ok(Design::Stratified { strata: strata_needed()?, treated: parse_list(a)? }),
        ("mpe", None) => data
            .pair
            .clone()
            .or_else(|| data.stratum.clone())
            .map(|pairs| Design::MatchedPairs { pairs })
            .ok_or_else(|| InputError::Spec("design 'mpe' needs a 'pair' column".into())),
        _ => Err(InputError::Spec(format!("unknown design spec '{spec}'"))),
    }
}

/// Plan from a shorthand (`default`, `bernoulli:PI`, `by-treatment:A,B`,
/// `by-stratum:K`) or JSON. `None` means the design's default plan.
pub fn parse_plan(spec: &str) -> Result<Option<SplitPlan>, InputError> {
    if let Some(json) = load_json_spec(spec)? {
        return serde_json::from_str(&json).map(Some).map_err(|e| InputError::Spec(format!("plan JSON: {e}")));
    }
    let (name, arg) = match spec.split_once(':') {
        Some((a, b)) => (a.trim(), Some(b)),
        None => (spec.trim(), None),
    };
    match (name, arg) {
        ("default" | "optimal", None) => Ok(None),
        ("bernoulli", Some(a)) => Ok(Some(SplitPlan::Bernoulli { pi: parse_prob(a)? })),
        ("by-treatment", Some(a)) => match parse_list(a)?.as_slice() {
            [t, c] => Ok(Some(SplitPlan::ByTreatment { fold1_treated: *t, fold1_control: *c })),
            _ => Err(InputError::Spec("by-treatment needs two counts: treated,control".into())),
        },
        ("by-stratum", Some(a)) => match parse_list(a)?.as_slice() {
            [k] => Ok(Some(SplitPlan::ByStratum { k_fold1: *k })),
            _ => Err(InputError::Spec("by-stratum needs one count".into())),
        },
        _ => Err(InputError::Spec(format!("unknown plan spec '{spec}'"))),
    }
}

/// Predictor from a model name, `calibrated:NAME`, or JSON.
pub fn parse_predictor(spec: &str) -> Result<PredictorSpec, InputError> {
    let json = match load_json_spec(spec)? {
        Some(j) => j,
        None => match spec.trim().split_once(':') {
            Some(("calibrated", base)) => format!(r#"{{"model":"calibrated","base":{{"model":"{}"}}}}"#, base.trim()),
            _ => format!(r#"{{"model":"{}"}}"#, spec.trim()),
        },
    };
    serde_json::from_str(&json).map_err(|e| InputError::Spec(format!("predictor '{spec}': {e}")))
}

/// Round-trip exact decimal form of a double (17 significant digits).
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, fmt_num)
}

pub const METRICS_HEADER: [&str; 20] = [
    "experiment",
    "grid",
    "grid_value",
    "n",
    "d",
    "method",
    "seed",
    "replications",
    "failures",
    "failure_rate",
    "tau_true",
    "mean_estimate",
    "bias",
    "variance",
    "mse",
    "mse_se",
    "coverage",
    "mean_v",
    "inflation",
    "variance_se",
];

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    w.write_record(METRICS_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.grid.clone(),
            fmt_num(r.grid_value),
            r.n.to_string(),
            r.d.to_string(),
            r.method.clone(),
            r.seed.clone(),
            r.replications.to_string(),
            r.failures.to_string(),
            fmt_num(r.failure_rate),
            fmt_num(r.tau_true),
            fmt_num(r.mean_estimate),
            fmt_num(r.bias),
            fmt_num(r.variance),
            fmt_num(r.mse),
            fmt_num(r.mse_se),
            fmt_opt(r.coverage),
            fmt_opt(r.mean_v),
            fmt_opt(r.inflation),
            fmt_num(r.variance_se),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

fn parse_num(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|_| format!("'{s}' is not a number"))
}

/// Reads a metrics CSV back (used for plotting and tests).
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, InputError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| InputError::Spec(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let err = |m: String| InputError::Line { line, msg: m };
        let g = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| parse_num(g(i)).map_err(err);
        let opt = |i: usize| if g(i).is_empty() { Ok(None) } else { num(i).map(Some) };
        let int = |i: usize| g(i).parse::<usize>().map_err(|_| err(format!("'{}' is not a count", g(i))));
        out.push(MetricsRow {
            experiment: g(0).into(),
            grid: g(1).into(),
            grid_value: num(2)?,
            n: int(3)?,
            d: int(4)?,
            method: g(5).into(),
            seed: g(6).into(),
            replications: int(7)?,
            failures: int(8)?,
            failure_rate: num(9)?,
            tau_true: num(10)?,
            mean_estimate: num(11)?,
            bias: num(12)?,
            variance: num(13)?,
            mse: num(14)?,
            mse_se: num(15)?,
            coverage: opt(16)?,
            mean_v: opt(17)?,
            inflation: opt(18)?,
            variance_se: num(19)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    /// SHA-256 of the configuration bytes (inputs and specs).
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

impl RunManifest {
    pub fn new(command: Vec<String>, config_hash: String, seed: Option<u64>, started_unix: f64) -> Self {
        Self {
            command,
            config_hash,
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix,
            finished_unix: now_unix(),
        }
    }
}

/// Path of the manifest written next to a CSV or SVG output.
pub fn manifest_path(out: &Path) -> std::path::PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    s.into()
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), InputError> {
    std::fs::write(path, contents).map_err(|e| InputError::Io { path: path.display().to_string(), source: e })
}

pub fn write_manifest(out: &Path, m: &RunManifest) -> Result<(), InputError> {
    let json = serde_json::to_string_pretty(m).expect("manifest serializes");
    write_file(&manifest_path(out), json.as_bytes())
}

/// CSV of a split: one row per unit with its fold and conditional
/// probabilities.
pub fn split_csv(split: &ccfit_core::SplitResult, z: &[u8]) -> String {
    let mut s = String::from("unit,z,fold,p0,p1\r\n");
    for i in 0..split.n() {
        let [p0, p1] = split.cond_prob[i];
        let _ = write!(s, "{},{},{},{},{}\r\n", i + 1, z[i], split.membership[i], fmt_num(p0), fmt_num(p1));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "y,z,x1,x2\n1.5,1,0.1,2\n0.5,0,0.2,1\n2.5,1,0.3,0\n1.0,0,0.4,-1\n";

    #[test]
    fn dataset_round_trip() {
        let d = parse_dataset(CSV).unwrap();
        assert_eq!(d.observed.n(), 4);
        assert_eq!(d.observed.d(), 2);
        assert_eq!(d.observed.z, vec![1, 0, 1, 0]);
        assert_eq!(d.observed.x.get(3, 1), -1.0);
    }

    #[test]
    fn missing_cell_reports_line() {
        let bad = "y,z,x1\n1,1,0.5\n2,0,\n";
        match parse_dataset(bad) {
            Err(InputError::Line { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("x1"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_dataset("y,z\n1,2\n"), Err(InputError::Line { line: 2, .. })));
        assert!(parse_dataset("y,x1\n1,2\n").is_err());
        assert!(parse_dataset("y,z,x2\n1,1,2\n").is_err());
    }

    #[test]
    fn strata_and_pairs_are_canonicalized() {
        let d = parse_dataset("y,z,stratum\n1,1,b\n2,0,b\n3,1,a\n4,0,a\n").unwrap();
        assert_eq!(d.stratum, Some(vec![0, 0, 1, 1]));
        assert_eq!(d.stratum_labels, vec!["b", "a"]);
        let des = parse_design("auto", &d).unwrap();
        assert_eq!(des, Design::Stratified { strata: vec![0, 0, 1, 1], treated: vec![1, 1] });
        assert!(parse_dataset("y,z,pair\n1,1,p\n2,0,p\n3,1,q\n").is_err());
    }

    #[test]
    fn spec_shorthands() {
        let d = parse_dataset(CSV).unwrap();
        assert_eq!(parse_design("cre", &d).unwrap(), Design::Complete { n: 4, n1: 2 });
        assert_eq!(parse_design("cre:3", &d).unwrap(), Design::Complete { n: 4, n1: 3 });
        assert_eq!(parse_design("bre:0.5", &d).unwrap(), Design::Bernoulli { n: 4, r1: 0.5 });
        assert_eq!(parse_design(r#"{"type":"cre","n":4,"n1":2}"#, &d).unwrap(), Design::Complete { n: 4, n1: 2 });
        assert!(parse_design("auto", &d).is_err());
        assert_eq!(parse_plan("default").unwrap(), None);
        assert_eq!(
            parse_plan("by-treatment:1,1").unwrap(),
            Some(SplitPlan::ByTreatment { fold1_treated: 1, fold1_control: 1 })
        );
        assert_eq!(parse_predictor("ols").unwrap(), PredictorSpec::Ols);
        assert_eq!(
            parse_predictor("calibrated:poisson").unwrap(),
            PredictorSpec::Calibrated { base: Box::new(PredictorSpec::poisson()) }
        );
        assert!(parse_predictor("forest").is_err());
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456789.123456789, f64::MIN_POSITIVE] {
            assert_eq!(fmt_num(v).parse::<f64>().unwrap(), v);
        }
    }
}
