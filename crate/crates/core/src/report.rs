//! Experiment result assembly: raw per-replication error samples, their
//! median/IQR summaries, and CSV/JSON emission with a round-trip guarantee
//! (re-reading the CSV and re-summarizing reproduces the JSON).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training method a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "PFL")]
    Pfl,
    #[serde(rename = "CFL")]
    Cfl,
    #[serde(rename = "Local")]
    Local,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Pfl => "PFL",
            Method::Cfl => "CFL",
            Method::Local => "Local",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One raw observation: a client's mean error in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapeSample {
    pub method: Method,
    pub client_id: String,
    pub replication: usize,
    pub mape_pct: f64,
}

/// Median and interquartile range with mid-point interpolation: for even
/// counts the median averages the two central order statistics, and the
/// quartiles are medians of the lower/upper halves (excluding the central
/// element when the count is odd).
pub fn summarize(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Empty("summary samples"));
    }
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = mid_median(&s);
    if s.len() < 2 {
        return Ok((median, 0.0));
    }
    let half = s.len() / 2;
    let lower = &s[..half];
    let upper = &s[s.len() - half..];
    Ok((median, mid_median(upper) - mid_median(lower)))
}

fn mid_median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Hyperparameters chosen for one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenHypers {
    pub replication: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub median: f64,
    pub iqr: f64,
    pub count: usize,
}

/// Full experiment output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub version: String,
    pub replications: usize,
    pub samples: Vec<MapeSample>,
    /// Pooled over clients, keyed by method name.
    pub per_method: BTreeMap<String, SummaryEntry>,
    /// Keyed by "method/client_id".
    pub per_method_client: BTreeMap<String, SummaryEntry>,
    pub hyperparameters: Vec<ChosenHypers>,
    /// Replications that failed, with their error messages.
    pub failures: Vec<String>,
    pub wall_clock_secs: f64,
}

impl ExperimentReport {
    pub fn assemble(
        seed: u64,
        replications: usize,
        samples: Vec<MapeSample>,
        hyperparameters: Vec<ChosenHypers>,
        failures: Vec<String>,
        wall_clock_secs: f64,
    ) -> Result<Self> {
        let (per_method, per_method_client) = summarize_samples(&samples)?;
        Ok(Self {
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            replications,
            samples,
            per_method,
            per_method_client,
            hyperparameters,
            failures,
            wall_clock_secs,
        })
    }

    /// Pooled median for one method, if any samples exist.
    pub fn method_median(&self, method: Method) -> Option<f64> {
        self.per_method.get(method.name()).map(|e| e.median)
    }

    pub fn client_median(&self, method: Method, client_id: &str) -> Option<f64> {
        self.per_method_client
            .get(&format!("{}/{client_id}", method.name()))
            .map(|e| e.median)
    }
}

type SummaryMaps = (BTreeMap<String, SummaryEntry>, BTreeMap<String, SummaryEntry>);

/// Group samples and summarize each group.
pub fn summarize_samples(samples: &[MapeSample]) -> Result<SummaryMaps> {
    let mut by_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut by_method_client: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in samples {
        by_method.entry(s.method.name().to_string()).or_default().push(s.mape_pct);
        by_method_client
            .entry(format!("{}/{}", s.method.name(), s.client_id))
            .or_default()
            .push(s.mape_pct);
    }
    let fold = |m: BTreeMap<String, Vec<f64>>| -> Result<BTreeMap<String, SummaryEntry>> {
        m.into_iter()
            .map(|(k, v)| {
                let (median, iqr) = summarize(&v)?;
                Ok((k, SummaryEntry { median, iqr, count: v.len() }))
            })
            .collect()
    };
    Ok((fold(by_method)?, fold(by_method_client)?))
}

/// Write the raw long-format CSV and the summary JSON next to each other.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("raw_mape.csv"))?;
    for s in &report.samples {
        w.serialize(s)?;
    }
    w.flush()?;

    let mut slim = report.clone();
    slim.samples.clear(); // raw samples live in the CSV
    let json = serde_json::to_string_pretty(&slim)?;
    std::fs::write(dir.join("summary.json"), json)?;
    Ok(())
}

/// Read the raw CSV back.
pub fn read_raw_csv(path: &Path) -> Result<Vec<MapeSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
