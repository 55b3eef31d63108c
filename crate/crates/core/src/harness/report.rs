use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{metrics, AccuracyMatrix, Metrics};
use super::{io_err, HarnessError};
use crate::attack::Norm;

/// One (substitute, victim, attack) accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub substitute: String,
    pub victim: String,
    /// Gradient-computation method, or "none".
    pub method: String,
    /// Optimization back-end name, e.g. "UN-DP-DI2-TI-PI-FGSM".
    pub backend: String,
    pub norm: Norm,
    pub epsilon: f64,
    pub iterations: usize,
    pub seed: u64,
    pub n_examples: usize,
    pub accuracy: f64,
}

impl ReportRecord {
    /// Canonical ordering used for every written file.
    pub fn sort(records: &mut [ReportRecord]) {
        records.sort_by(|a, b| {
            (&a.method, &a.backend, &a.substitute, &a.victim)
                .cmp(&(&b.method, &b.backend, &b.substitute, &b.victim))
                .then(a.epsilon.total_cmp(&b.epsilon))
                .then((a.iterations, a.seed, a.n_examples).cmp(&(b.iterations, b.seed, b.n_examples)))
                .then((a.norm as u8).cmp(&(b.norm as u8)))
                .then(a.accuracy.total_cmp(&b.accuracy))
        });
    }
}

/// Matrices grouped by (method, backend), keyed `"method/backend"`.
pub fn matrices(records: &[ReportRecord]) -> Result<BTreeMap<String, AccuracyMatrix>, HarnessError> {
    let mut groups: BTreeMap<String, Vec<&ReportRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(format!("{}/{}", r.method, r.backend)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(key, rs)| {
            let mut subs: Vec<String> = rs.iter().map(|r| r.substitute.clone()).collect();
            let mut vics: Vec<String> = rs.iter().map(|r| r.victim.clone()).collect();
            subs.sort();
            subs.dedup();
            vics.sort();
            vics.dedup();
            let mut acc = vec![vec![f64::NAN; vics.len()]; subs.len()];
            for r in rs {
                let i = subs.binary_search(&r.substitute).expect("collected");
                let j = vics.binary_search(&r.victim).expect("collected");
                acc[i][j] = r.accuracy;
            }
            if acc.iter().flatten().any(|a| a.is_nan()) {
                return Err(HarnessError::Config(format!("{key}: records do not form a full matrix")));
            }
            Ok((key, AccuracyMatrix::new(subs, vics, acc)?))
        })
        .collect()
}

pub fn summary(records: &[ReportRecord]) -> Result<BTreeMap<String, Metrics>, HarnessError> {
    matrices(records)?.into_iter().map(|(k, m)| Ok((k, metrics(&m)?))).collect()
}

pub fn to_csv(records: &[ReportRecord]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record([
            "substitute", "victim", "method", "backend", "norm", "epsilon", "iterations", "seed", "n_examples", "accuracy",
        ])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv writes utf-8"))
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRecord>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}

/// Writes results.csv, results.json and summary.json (records in canonical order).
pub fn write_report(records: &[ReportRecord], out_dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut sorted = records.to_vec();
    ReportRecord::sort(&mut sorted);
    let write = |name: &str, body: String| {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))
    };
    write("results.csv", to_csv(&sorted)?)?;
    write("results.json", serde_json::to_string_pretty(&sorted)?)?;
    write("summary.json", serde_json::to_string_pretty(&summary(&sorted)?)?)?;
    Ok(())
}
