//! Experiment harness: config files, seeded runs, CSV output, SVG plots and
//! multi-seed comparisons.

pub mod compare;
pub mod config;
pub mod plot;
pub mod run;
pub mod selftest;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use fedptr_core::data::label_entropy;

use crate::config::ExperimentFile;

/// Writes `partition.csv` and `label_stats.csv` (size, entropy and class
/// histogram per client) for one seed. Returns the mean label entropy.
pub fn write_partition(file: &ExperimentFile, seed: u64, dir: &Path) -> Result<f64> {
    let data = file.prepare(seed)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let f = File::create(dir.join("partition.csv"))?;
    data.partition.write_csv(BufWriter::new(f))?;

    let mut w = csv::Writer::from_path(dir.join("label_stats.csv"))?;
    let classes = data.train.num_classes();
    let mut header = vec!["client".to_string(), "size".into(), "entropy".into()];
    header.extend((0..classes).map(|k| format!("class_{k}")));
    w.write_record(&header)?;
    for (c, counts) in data.partition.label_counts(&data.train).iter().enumerate() {
        let mut row = vec![
            c.to_string(),
            counts.iter().sum::<usize>().to_string(),
            label_entropy(counts).to_string(),
        ];
        row.extend(counts.iter().map(usize::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    for c in data.partition.zero_sample_clients() {
        log::warn!("client {c} received no samples");
    }
    Ok(data.partition.mean_label_entropy(&data.train))
}
