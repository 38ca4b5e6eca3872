//! Multi-config, multi-seed comparison tables.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ExperimentFile;
use crate::run::{run_experiment, RunOptions};

/// Fields that never have to agree between compared configs.
const BOOKKEEPING: [&str; 3] = ["output_dir", "seeds", "repeats"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub algorithm: String,
    pub seeds: usize,
    pub mean_last5_acc: f64,
    /// Sample standard deviation; absent for a single seed.
    pub std_last5_acc: Option<f64>,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn is_swept(key: &str, sweep: &[String]) -> bool {
    let covered = |p: &str| key == p || key.starts_with(&format!("{p}."));
    BOOKKEEPING.iter().any(|p| covered(p)) || sweep.iter().any(|p| covered(p))
}

fn fields(cfg: &ExperimentFile) -> Result<BTreeMap<String, Value>> {
    let mut out = BTreeMap::new();
    flatten("", &serde_json::to_value(cfg)?, &mut out);
    Ok(out)
}

/// Errors unless every config agrees with the first outside `sweep`.
pub fn check_comparable(configs: &[ExperimentFile], sweep: &[String]) -> Result<()> {
    let Some(first) = configs.first() else {
        bail!("nothing to compare");
    };
    let base = fields(first)?;
    for (i, cfg) in configs.iter().enumerate().skip(1) {
        let other = fields(cfg)?;
        let keys: std::collections::BTreeSet<&String> = base.keys().chain(other.keys()).collect();
        for k in keys {
            if is_swept(k, sweep) {
                continue;
            }
            if base.get(k) != other.get(k) {
                bail!(
                    "config {i} differs from config 0 in non-sweep field {k}: {} vs {}",
                    other.get(k).map_or("absent".into(), Value::to_string),
                    base.get(k).map_or("absent".into(), Value::to_string)
                );
            }
        }
    }
    Ok(())
}

fn label(cfg: &ExperimentFile, sweep: &[String]) -> Result<String> {
    if sweep.is_empty() {
        return Ok(cfg.federation.algorithm.name().to_string());
    }
    let f = fields(cfg)?;
    let parts: Vec<String> = sweep
        .iter()
        .map(|p| {
            let shown: Vec<String> = f
                .iter()
                .filter(|(k, _)| *k == p || k.starts_with(&format!("{p}.")))
                .map(|(_, v)| v.to_string())
                .collect();
            format!("{p}={}", shown.join("/"))
        })
        .collect();
    Ok(parts.join(" "))
}

pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// Runs every config on every seed under `out/config_<i>/` and summarizes
/// last-5-round accuracy per config.
pub fn compare_suite(
    configs: &[ExperimentFile],
    seeds: &[u64],
    sweep: &[String],
    out: &Path,
    opts: RunOptions,
) -> Result<Vec<CompareRow>> {
    check_comparable(configs, sweep)?;
    if seeds.is_empty() {
        bail!("no seeds to run");
    }
    let mut rows = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        let summaries = run_experiment(cfg, seeds, &out.join(format!("config_{i}")), opts)
            .with_context(|| format!("config {i}"))?;
        let accs: Vec<f64> = summaries.iter().map(|s| s.last5_acc).collect();
        let (mean, std) = mean_std(&accs);
        rows.push(CompareRow {
            label: label(cfg, sweep)?,
            algorithm: cfg.federation.algorithm.name().to_string(),
            seeds: seeds.len(),
            mean_last5_acc: mean,
            std_last5_acc: std,
        });
    }
    let mut w = csv::Writer::from_path(out.join("comparison.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

pub fn format_table(rows: &[CompareRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<width$}  {:>8}  {:>8}  seeds\n", "config", "mean", "std");
    for r in rows {
        let std = r.std_last5_acc.map_or("-".to_string(), |v| format!("{v:.4}"));
        s.push_str(&format!(
            "{:<width$}  {:>8.4}  {:>8}  {}\n",
            r.label, r.mean_last5_acc, std, r.seeds
        ));
    }
    s
}
