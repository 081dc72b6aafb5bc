//! Seed aggregation, rank correlation and report files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::rng::scene_rng;

pub const CSV_HEADER: [&str; 7] = ["dataset", "model_tag", "seed", "shift", "split", "key", "value"];
pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

/// Which objects a value was computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
    #[serde(rename = "all")]
    All,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Id => "ID",
            Split::Ood => "OOD",
            Split::All => "all",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ID" => Ok(Split::Id),
            "OOD" => Ok(Split::Ood),
            "all" => Ok(Split::All),
            other => Err(Error::InvalidData(format!("unknown split {other:?}"))),
        }
    }
}

/// Rounds to 9 significant digits; non-finite values pass through.
pub fn round_sig9(v: f64) -> f64 {
    if !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

/// Shortest decimal form of `v` rounded to 9 significant digits.
pub fn format_sig9(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    round_sig9(v).to_string()
}

fn ser_sig9<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(round_sig9(*v))
    } else {
        s.serialize_none()
    }
}

fn de_nullable<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub dataset: String,
    pub model_tag: String,
    pub seed: u64,
    pub shift: String,
    pub split: Split,
    /// Metric or property name.
    pub key: String,
    #[serde(serialize_with = "ser_sig9", deserialize_with = "de_nullable")]
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Dataset,
    ModelTag,
    Seed,
    Shift,
    Split,
    Key,
}

impl GroupKey {
    pub fn name(self) -> &'static str {
        CSV_HEADER[self as usize]
    }

    fn of(self, r: &Record) -> String {
        match self {
            GroupKey::Dataset => r.dataset.clone(),
            GroupKey::ModelTag => r.model_tag.clone(),
            GroupKey::Seed => r.seed.to_string(),
            GroupKey::Shift => r.shift.clone(),
            GroupKey::Split => r.split.to_string(),
            GroupKey::Key => r.key.clone(),
        }
    }
}

impl FromStr for GroupKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dataset" => GroupKey::Dataset,
            "model_tag" => GroupKey::ModelTag,
            "seed" => GroupKey::Seed,
            "shift" => GroupKey::Shift,
            "split" => GroupKey::Split,
            "key" => GroupKey::Key,
            other => return Err(Error::Config(format!("unknown group key {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub group: BTreeMap<String, String>,
    pub n: usize,
    #[serde(serialize_with = "ser_sig9", deserialize_with = "de_nullable")]
    pub median: f64,
    #[serde(serialize_with = "ser_sig9", deserialize_with = "de_nullable")]
    pub ci_low: f64,
    #[serde(serialize_with = "ser_sig9", deserialize_with = "de_nullable")]
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pair: [String; 2],
    #[serde(serialize_with = "ser_sig9", deserialize_with = "de_nullable")]
    pub rho: f64,
    #[serde(serialize_with = "ser_sig9", deserialize_with = "de_nullable")]
    pub p: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<Record>,
    #[serde(default)]
    pub aggregates: Vec<Aggregate>,
    #[serde(default)]
    pub correlations: Vec<Correlation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Median with a percentile-bootstrap 95% interval. Returns `None` for empty input.
pub fn median_ci(values: &[f64], resamples: usize, rng: &mut impl Rng) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let med = median(values);
    let n = values.len();
    let mut meds = Vec::with_capacity(resamples);
    let mut buf = vec![0.0; n];
    for _ in 0..resamples {
        for b in buf.iter_mut() {
            *b = values[rng.random_range(0..n)];
        }
        buf.sort_by(f64::total_cmp);
        meds.push(quantile_sorted(&buf, 0.5));
    }
    meds.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&meds, 0.025).min(med);
    let hi = quantile_sorted(&meds, 0.975).max(med);
    Some((med, lo, hi))
}

/// Groups records by `keys` and aggregates each group's finite values.
/// Groups without finite values are reported in the warnings.
pub fn aggregate(records: &[Record], keys: &[GroupKey], seed: u64) -> (Vec<Aggregate>, Vec<String>) {
    let mut groups: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry(keys.iter().map(|k| k.of(r)).collect())
            .or_default()
            .push(r.value);
    }
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for (gi, (values_key, values)) in groups.into_iter().enumerate() {
        let group: BTreeMap<String, String> = keys.iter().map(|k| k.name().to_string()).zip(values_key).collect();
        let mut finite: Vec<f64> = values.into_iter().filter(|v| v.is_finite()).collect();
        // Sorting first makes the result independent of record order.
        finite.sort_by(f64::total_cmp);
        let mut rng = scene_rng(seed, gi);
        match median_ci(&finite, BOOTSTRAP_RESAMPLES, &mut rng) {
            Some((median, ci_low, ci_high)) => out.push(Aggregate {
                group,
                n: finite.len(),
                median,
                ci_low,
                ci_high,
            }),
            None => warnings.push(format!("group {group:?} has no finite values; skipped")),
        }
    }
    (out, warnings)
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("series of length {} and {}", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::Config(format!("rank correlation needs at least 3 points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Numerics("non-finite value in correlation input".into()));
    }
    Ok(())
}

/// Spearman's rho with a two-sided p-value from the t approximation.
/// `None` when either series is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Option<(f64, f64)>> {
    check_pair(xs, ys)?;
    let Some(rho) = pearson(&ranks(xs), &ranks(ys)) else {
        return Ok(None);
    };
    let n = xs.len() as f64;
    if rho.abs() >= 1.0 {
        return Ok(Some((rho, 0.0)));
    }
    let t = rho * ((n - 2.0) / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 2.0).expect("positive degrees of freedom");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(Some((rho, p)))
}

pub const EXACT_MAX_N: usize = 10;

fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else {
        return false;
    };
    let j = (i..v.len()).rev().find(|&j| v[j] > v[i - 1]).expect("successor exists");
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Spearman's rho with an exact two-sided permutation p-value (n ≤ 10).
pub fn spearman_exact(xs: &[f64], ys: &[f64]) -> Result<Option<(f64, f64)>> {
    check_pair(xs, ys)?;
    if xs.len() > EXACT_MAX_N {
        return Err(Error::Config(format!("exact test limited to n <= {EXACT_MAX_N}")));
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let Some(rho) = pearson(&rx, &ry) else {
        return Ok(None);
    };
    let mut perm: Vec<usize> = (0..ry.len()).collect();
    let (mut hits, mut total) = (0u64, 0u64);
    loop {
        let permuted: Vec<f64> = perm.iter().map(|&i| ry[i]).collect();
        let r = pearson(&rx, &permuted).expect("ranks are not constant");
        if r.abs() >= rho.abs() - 1e-12 {
            hits += 1;
        }
        total += 1;
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(Some((rho, hits as f64 / total as f64)))
}

/// Spearman correlation between the values of keys `a` and `b`, paired by
/// (dataset, model_tag, seed, shift, split).
pub fn correlate_keys(records: &[Record], a: &str, b: &str) -> Result<Option<Correlation>> {
    type Id = (String, String, u64, String, Split);
    let id = |r: &Record| -> Id { (r.dataset.clone(), r.model_tag.clone(), r.seed, r.shift.clone(), r.split) };
    let mut left: BTreeMap<Id, f64> = BTreeMap::new();
    let mut right: BTreeMap<Id, f64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.value.is_finite()) {
        if r.key == a {
            left.insert(id(r), r.value);
        }
        if r.key == b {
            right.insert(id(r), r.value);
        }
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = left
        .iter()
        .filter_map(|(k, &x)| right.get(k).map(|&y| (x, y)))
        .unzip();
    Ok(spearman(&xs, &ys)?.map(|(rho, p)| Correlation {
        pair: [a.to_string(), b.to_string()],
        rho,
        p,
        n: xs.len(),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

/// CSV of the records.
pub fn to_csv(records: &[Record]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::InvalidData(e.to_string());
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in records {
        w.write_record([
            r.dataset.as_str(),
            &r.model_tag,
            &r.seed.to_string(),
            &r.shift,
            r.split.as_str(),
            &r.key,
            &format_sig9(r.value),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<Record>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| Error::InvalidData(e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::InvalidData(format!("unexpected csv header {header:?}")));
    }
    rd.records()
        .map(|row| {
            let row = row.map_err(|e| Error::InvalidData(e.to_string()))?;
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::InvalidData(format!("{s:?}: {e}")));
            Ok(Record {
                dataset: row[0].to_string(),
                model_tag: row[1].to_string(),
                seed: row[2].parse().map_err(|e| Error::InvalidData(format!("seed {:?}: {e}", &row[2])))?,
                shift: row[3].to_string(),
                split: row[4].parse()?,
                key: row[5].to_string(),
                value: num(&row[6])?,
            })
        })
        .collect()
}

pub fn to_json(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Writes the report: records only for CSV, the full report for JSON.
pub fn emit(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => to_csv(&report.records)?,
        ReportFormat::Json => to_json(report),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads records from a CSV file or a JSON report.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(report.records)
    } else {
        parse_csv(&text)
    }
}
