use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedptr_core::federation::Algorithm;
use fedptr_harness::compare::{compare_suite, format_table};
use fedptr_harness::config::{expand_sweep, ExperimentFile};
use fedptr_harness::plot;
use fedptr_harness::run::{run_experiment, seed_dir, RunOptions};
use fedptr_harness::{selftest, write_partition};

#[derive(Parser)]
#[command(name = "fedptr", version, about = "Federated learning with trajectory projection: seeded experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment file (JSON). Subcommands also take it positionally.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long, global = true, env = "FEDPTR_SEED")]
    seed: Option<u64>,
    /// Output directory; defaults to the file's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for client updates (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured seed and write metrics, summaries and plots.
    Run { file: Option<PathBuf> },
    /// Run with the proximal weight forced to zero and report gradient cosines.
    Probe { file: Option<PathBuf> },
    /// Write the client partition and per-client label statistics.
    Partition { file: Option<PathBuf> },
    /// Plot columns of a metrics CSV as an SVG line chart.
    Plot {
        metrics: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "test_acc")]
        columns: Vec<String>,
        #[arg(long)]
        title: Option<String>,
        /// SVG path; defaults to the CSV path with an .svg extension.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Check every analytic derivative against finite differences.
    Selftest,
    /// Run several configs over the same seeds and tabulate last-5 accuracy.
    Compare {
        files: Vec<PathBuf>,
        /// Dotted field allowed to differ between configs (repeatable).
        #[arg(long)]
        sweep: Vec<String>,
        /// `field=v1,v2,...`: expand the first config over these JSON values.
        #[arg(long)]
        grid: Option<String>,
    },
}

fn load(positional: Option<PathBuf>, global: &Global) -> Result<ExperimentFile> {
    match positional.or_else(|| global.config.clone()) {
        Some(p) => ExperimentFile::load(&p),
        None => bail!("no experiment file given (positional or --config)"),
    }
}

fn seeds(file: &ExperimentFile, global: &Global) -> Vec<u64> {
    global.seed.map_or_else(|| file.run_seeds(), |s| vec![s])
}

fn out_dir(file: &ExperimentFile, global: &Global) -> PathBuf {
    global.out.clone().unwrap_or_else(|| file.output_dir.clone())
}

fn run(file: ExperimentFile, global: &Global) -> Result<()> {
    let out = out_dir(&file, global);
    for s in run_experiment(&file, &seeds(&file, global), &out, RunOptions::default())? {
        println!(
            "{} seed {}: last-5 accuracy {:.4} -> {}",
            s.algorithm,
            s.seed,
            s.last5_acc,
            seed_dir(&out, s.seed).display()
        );
    }
    Ok(())
}

fn probe(mut file: ExperimentFile, global: &Global) -> Result<()> {
    if file.federation.algorithm != Algorithm::FedPtr {
        log::info!("probe mode runs client-side projection; switching algorithm to fedptr");
        file.federation.algorithm = Algorithm::FedPtr;
    }
    file.federation.probe = true;
    let out = out_dir(&file, global);
    for s in run_experiment(&file, &seeds(&file, global), &out, RunOptions::default())? {
        let dir = seed_dir(&out, s.seed);
        let cols = plot::read_columns(&dir.join("metrics.csv"), &["cos_aux".into(), "cos_local".into()])?;
        let mean = |i: usize| {
            let p = &cols[i].points;
            p.iter().map(|q| q.1).sum::<f64>() / p.len().max(1) as f64
        };
        println!(
            "seed {}: mean cos_aux {:.4}, mean cos_local {:.4} -> {}",
            s.seed,
            mean(0),
            mean(1),
            dir.display()
        );
    }
    Ok(())
}

fn partition(file: ExperimentFile, global: &Global) -> Result<()> {
    let out = out_dir(&file, global);
    for s in seeds(&file, global) {
        let dir = seed_dir(&out, s);
        let h = write_partition(&file, s, &dir)?;
        println!("seed {s}: mean label entropy {h:.4} -> {}", dir.display());
    }
    Ok(())
}

fn plot_cmd(metrics: &Path, columns: &[String], title: Option<String>, output: Option<PathBuf>) -> Result<()> {
    let series = plot::read_columns(metrics, columns)?;
    let title = title.unwrap_or_else(|| columns.join(", "));
    let output = output.unwrap_or_else(|| metrics.with_extension("svg"));
    std::fs::write(&output, plot::line_chart(&title, "round", &series))
        .with_context(|| format!("writing {}", output.display()))?;
    println!("{}", output.display());
    Ok(())
}

fn selftest_cmd() -> Result<bool> {
    let mut ok = true;
    for c in selftest::run_all()? {
        let tag = if c.passed() { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] {}: worst {:.3e} (tolerance {:.0e}) over {} instances in {:.2?}",
            c.name, c.worst, c.tolerance, c.instances, c.elapsed
        );
        ok &= c.passed();
    }
    Ok(ok)
}

fn compare(files: Vec<PathBuf>, mut sweep: Vec<String>, grid: Option<String>, global: &Global) -> Result<()> {
    let mut configs = files.iter().map(ExperimentFile::load).collect::<Result<Vec<_>>>()?;
    if let Some(c) = &global.config {
        configs.insert(0, ExperimentFile::load(c)?);
    }
    if let Some(g) = grid {
        let Some((path, values)) = g.split_once('=') else {
            bail!("--grid expects field=v1,v2,...");
        };
        let Some(base) = configs.first() else {
            bail!("--grid needs a base config");
        };
        let values = values
            .split(',')
            .map(|v| serde_json::from_str(v.trim()).unwrap_or_else(|_| serde_json::Value::String(v.trim().into())))
            .collect::<Vec<_>>();
        configs = expand_sweep(base, path, &values)?;
        sweep.push(path.to_string());
    }
    let Some(first) = configs.first() else {
        bail!("no configs to compare");
    };
    let seeds = seeds(first, global);
    let out = out_dir(first, global);
    std::fs::create_dir_all(&out)?;
    let rows = compare_suite(&configs, &seeds, &sweep, &out, RunOptions::default())?;
    print!("{}", format_table(&rows));
    println!("-> {}", out.join("comparison.csv").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.global.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let g = &cli.global;
    let result = match cli.command {
        Command::Run { file } => load(file, g).and_then(|f| run(f, g)),
        Command::Probe { file } => load(file, g).and_then(|f| probe(f, g)),
        Command::Partition { file } => load(file, g).and_then(|f| partition(f, g)),
        Command::Plot {
            metrics,
            columns,
            title,
            output,
        } => plot_cmd(&metrics, &columns, title, output),
        Command::Selftest => match selftest_cmd() {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("selftest failed");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
        Command::Compare { files, sweep, grid } => compare(files, sweep, grid, g),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
