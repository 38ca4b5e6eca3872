//! One seeded run: federation rounds streamed to CSV, then summary, snapshots
//! and plots.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fedptr_core::federation::{Federation, LambdaRecord, RoundMetrics, RunOutput, RoundReport};
use fedptr_core::trajectory::write_aux_snapshot;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentFile;
use crate::plot::{self, Series};

pub const METRICS_COLUMNS: [&str; 9] = [
    "round",
    "train_loss",
    "test_acc",
    "grad_norm",
    "gamma_mean",
    "cos_aux",
    "cos_local",
    "mtt_loss",
    "skipped_flags",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: String,
    pub seed: u64,
    pub rounds: usize,
    pub last5_acc: f64,
    pub final_test_acc: f64,
    pub dataset_sha256: String,
    pub client_mtt_updates: usize,
    pub server_mtt_updates: usize,
    pub zero_sample_clients: Vec<usize>,
    pub config: ExperimentFile,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub sequential: bool,
    pub skip_plots: bool,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn check_finite(m: &RoundMetrics) -> Result<()> {
    let named = [
        ("train_loss", Some(m.train_loss)),
        ("test_acc", Some(m.test_acc)),
        ("grad_norm", Some(m.grad_norm)),
        ("gamma_mean", m.gamma_mean),
        ("cos_aux", m.cos_aux),
        ("cos_local", m.cos_local),
        ("mtt_loss", m.mtt_loss),
    ];
    for (name, v) in named {
        if let Some(v) = v {
            if !v.is_finite() {
                bail!("non-finite {name} ({v}) at round {}", m.round);
            }
        }
    }
    Ok(())
}

struct Writers {
    metrics: csv::Writer<BufWriter<File>>,
    similarity: csv::Writer<BufWriter<File>>,
    layers: csv::Writer<BufWriter<File>>,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

impl Writers {
    fn create(dir: &Path) -> Result<Self> {
        let mut similarity = csv_writer(&dir.join("similarity.csv"))?;
        similarity.write_record(["round", "client", "cos_aux", "cos_local"])?;
        let mut layers = csv_writer(&dir.join("layer_norms.csv"))?;
        layers.write_record(["round", "client", "layer", "norm", "lambda"])?;
        Ok(Writers {
            metrics: csv_writer(&dir.join("metrics.csv"))?,
            similarity,
            layers,
        })
    }

    fn write(&mut self, r: &RoundReport) -> Result<()> {
        self.metrics.serialize(&r.metrics)?;
        for p in &r.probes {
            self.similarity.serialize(p)?;
        }
        for l in &r.lambdas {
            self.layers.serialize(l)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.metrics.flush()?;
        self.similarity.flush()?;
        self.layers.flush()?;
        Ok(())
    }
}

/// Runs every round for `seed`, writing into `dir`.
pub fn run_seed(file: &ExperimentFile, seed: u64, dir: &Path, opts: RunOptions) -> Result<(Summary, RunOutput)> {
    let data = file.prepare(seed)?;
    let cfg = file.fed_config(seed);
    let fed = Federation::new(cfg.clone(), &data.train, &data.partition, &data.test)?.with_parallel(!opts.sequential);
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut writers = Writers::create(dir)?;

    let mut state = fed.init_state()?;
    let mut reports = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let report = fed.run_round(&mut state).with_context(|| format!("round {t}"))?;
        check_finite(&report.metrics)?;
        writers.write(&report)?;
        log::info!(
            "seed {seed} round {t}: loss {:.4} acc {:.4}",
            report.metrics.train_loss,
            report.metrics.test_acc
        );
        reports.push(report);
    }
    writers.finish()?;
    let out = RunOutput { reports, state };

    write_snapshots(&out, &dir.join("aux_snapshots"))?;
    let metrics = out.metrics();
    let summary = Summary {
        algorithm: cfg.algorithm.name().to_string(),
        seed,
        rounds: cfg.rounds,
        last5_acc: out.last5_acc(),
        final_test_acc: metrics.last().map_or(f64::NAN, |m| m.test_acc),
        dataset_sha256: data.dataset_sha256,
        client_mtt_updates: out.state.counters().total_client(),
        server_mtt_updates: out.state.counters().server,
        zero_sample_clients: data.partition.zero_sample_clients(),
        config: ExperimentFile {
            seeds: vec![seed],
            ..file.clone()
        },
    };
    let json = serde_json::to_string_pretty(&summary)?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    if !opts.skip_plots {
        write_plots(&out, &dir.join("plots"))?;
    }
    Ok((summary, out))
}

/// Runs every configured seed under `out/seed_<s>/`.
pub fn run_experiment(file: &ExperimentFile, seeds: &[u64], out: &Path, opts: RunOptions) -> Result<Vec<Summary>> {
    seeds
        .iter()
        .map(|&s| {
            run_seed(file, s, &seed_dir(out, s), opts)
                .map(|(summary, _)| summary)
                .with_context(|| format!("seed {s}"))
        })
        .collect()
}

fn write_snapshots(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let round = Some(out.state.round());
    if let Some(aux) = out.state.server_aux() {
        write_aux_snapshot(dir, "server", aux, round)?;
    }
    for i in 0..out.state.counters().client.len() {
        if let Some(aux) = out.state.client_aux(i) {
            write_aux_snapshot(dir, &format!("client_{i}"), aux, round)?;
        }
    }
    Ok(())
}

fn column(metrics: &[RoundMetrics], f: impl Fn(&RoundMetrics) -> Option<f64>) -> Vec<(f64, f64)> {
    metrics
        .iter()
        .filter_map(|m| f(m).map(|v| (m.round as f64, v)))
        .collect()
}

/// Mean norm per layer over every record.
pub fn mean_layer_norms(records: &[LambdaRecord]) -> Vec<f64> {
    let layers = records.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    let mut sum = vec![0.0; layers];
    let mut count = vec![0usize; layers];
    for r in records {
        sum[r.layer] += r.norm;
        count[r.layer] += 1;
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c.max(1) as f64).collect()
}

fn write_plots(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = out.metrics();
    let acc = [Series::new("test_acc", column(&m, |r| Some(r.test_acc)))];
    fs::write(dir.join("accuracy.svg"), plot::line_chart("test accuracy", "round", &acc))?;
    let loss = [Series::new("train_loss", column(&m, |r| Some(r.train_loss)))];
    fs::write(dir.join("loss.svg"), plot::line_chart("training loss", "round", &loss))?;
    if m.iter().any(|r| r.cos_aux.is_some() || r.cos_local.is_some()) {
        let sim = [
            Series::new("cos_aux", column(&m, |r| r.cos_aux)),
            Series::new("cos_local", column(&m, |r| r.cos_local)),
        ];
        fs::write(dir.join("similarity.svg"), plot::line_chart("cosine to global step", "round", &sim))?;
    }
    let records: Vec<LambdaRecord> = out.reports.iter().flat_map(|r| r.lambdas.iter().cloned()).collect();
    if !records.is_empty() {
        let bars: Vec<(String, f64)> = mean_layer_norms(&records)
            .into_iter()
            .enumerate()
            .map(|(j, v)| (format!("layer {j}"), v))
            .collect();
        fs::write(dir.join("layer_norms.svg"), plot::bar_chart("mean distance to target per layer", &bars))?;
    }
    Ok(())
}
