//! Command-line driver: data generation, source training, adaptation runs, ratio
//! sweeps and importance dumps.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ftta_core::checkpoint::{load_checkpoint, save_checkpoint};
use ftta_core::data::{
    build_stream, decode_dataset, encode_dataset, stream_from_dataset, Dataset, Stream, StreamSpec,
};
use ftta_core::harness::{adapt_stream, Method};
use ftta_core::importance::ImportanceReport;
use ftta_core::metrics::RunReport;
use ftta_core::model::build_model;
use ftta_core::train::{error_rate, train_source, TrainConfig};
use thiserror::Error;

use crate::config::Settings;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] ftta_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::Io { .. } => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ftta", about = "Memory-efficient test-time adaptation benchmark", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every random choice of the command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Settings file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunInputs {
    /// Model checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write clean train/test sets, a corrupted test stream and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Stream manifest (`kind severity count seed` lines); defaults to the benchmark.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a source model on the clean training set.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Adapt a source model online over the test stream.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: RunInputs,
        /// source, bn-stat, tent, surgeon, surgeon-bn, full-tuning, static, freeze or
        /// gradient-checkpoint.
        #[arg(long)]
        method: String,
        /// Pruning ratio for `static`.
        #[arg(long)]
        ratio: Option<f64>,
        /// Comma-separated layer indices for `freeze`.
        #[arg(long)]
        layers: Option<String>,
    },
    /// Static-ratio grid plus the dynamic method, one summary row each.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: RunInputs,
    },
    /// Per-batch layer importance and pruning ratios of the dynamic method.
    Importance {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: RunInputs,
        /// surgeon or surgeon-bn.
        #[arg(long, default_value = "surgeon")]
        method: String,
    },
}

/// Run the CLI on `args` (including the program name) and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_settings(common: &Common) -> Result<Settings, CliError> {
    match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            Settings::parse(&text)
        }
        None => Ok(Settings::default()),
    }
}

/// Write via a temporary file in the same directory and rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

fn prepare_out(common: &Common) -> Result<(), CliError> {
    fs::create_dir_all(&common.out).map_err(io_err(&common.out))?;
    Ok(())
}

fn read_dataset_file(path: &Path) -> Result<Dataset, CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(decode_dataset(&bytes)?)
}

fn load_stream(dir: &Path, settings: &Settings) -> Result<Stream, CliError> {
    let manifest_path = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let spec = StreamSpec::from_manifest(&manifest, settings.bench.batch_size)?;
    let ds = read_dataset_file(&dir.join("stream.srgd"))?;
    Ok(stream_from_dataset(&ds, &spec)?)
}

fn parse_method(name: &str, ratio: Option<f64>, layers: Option<&str>) -> Result<Method, CliError> {
    let method = match (name, ratio, layers) {
        ("static", Some(p), _) => format!("static({p})"),
        ("static", None, _) => return Err(CliError::Config("--method static needs --ratio".into())),
        ("freeze", _, Some(l)) => format!("freeze({l})"),
        ("freeze", _, None) => return Err(CliError::Config("--method freeze needs --layers".into())),
        (other, None, None) => other.to_string(),
        _ => return Err(CliError::Config("--ratio and --layers only apply to static and freeze".into())),
    };
    method.parse().map_err(|e: ftta_core::Error| CliError::Config(e.to_string()))
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { common, manifest } => gen_data(&common, manifest.as_deref()),
        Command::Train { common, data } => train(&common, &data),
        Command::Adapt {
            common,
            inputs,
            method,
            ratio,
            layers,
        } => {
            let method = parse_method(&method, ratio, layers.as_deref())?;
            adapt(&common, &inputs, method)
        }
        Command::Sweep { common, inputs } => sweep(&common, &inputs),
        Command::Importance { common, inputs, method } => {
            let method = parse_method(&method, None, None)?;
            if !method.uses_prepass() {
                return Err(CliError::Config(format!("importance needs a dynamic method, got {method}")));
            }
            importance(&common, &inputs, method)
        }
    }
}

fn gen_data(common: &Common, manifest: Option<&Path>) -> Result<(), CliError> {
    let settings = load_settings(common)?;
    let bench = &settings.bench;
    let spec = match manifest {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            StreamSpec::from_manifest(&text, bench.batch_size).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => bench.stream_spec(common.seed).map_err(|e| CliError::Config(e.to_string()))?,
    };
    let train = bench.train_set(common.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let test = bench.test_set(common.seed)?;
    let stream = build_stream(&test, &spec)?;
    prepare_out(common)?;
    write_atomic(&common.out.join("train.srgd"), &encode_dataset(&train)?)?;
    write_atomic(&common.out.join("test.srgd"), &encode_dataset(&test)?)?;
    write_atomic(&common.out.join("stream.srgd"), &encode_dataset(&stream.to_dataset()?)?)?;
    write_atomic(&common.out.join("manifest.txt"), spec.to_manifest().as_bytes())?;
    println!(
        "wrote {} training, {} test and {} stream samples to {}",
        train.len(),
        test.len(),
        stream.samples(),
        common.out.display()
    );
    Ok(())
}

fn train(common: &Common, data: &Path) -> Result<(), CliError> {
    let settings = load_settings(common)?;
    let train_set = read_dataset_file(&data.join("train.srgd"))?;
    let shape = train_set.image_shape();
    let mut model = build_model::<f32>(
        settings.arch,
        [shape[0], shape[1], shape[2]],
        train_set.classes(),
        common.seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    model.meta.seed = common.seed;
    let cfg = TrainConfig {
        seed: common.seed,
        ..settings.train.clone()
    };
    let (model, log) = train_source(model, &train_set, &cfg)?;
    prepare_out(common)?;
    save_checkpoint(&model, &common.out.join("model.srgw"))?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in log.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{:e}\n", e + 1, l));
    }
    write_atomic(&common.out.join("train_log.csv"), csv.as_bytes())?;
    let test_path = data.join("test.srgd");
    if test_path.exists() {
        let test = read_dataset_file(&test_path)?;
        println!("clean test error: {:.2}%", 100.0 * error_rate(&model, &test, 100)?);
    }
    Ok(())
}

fn run_method(
    settings: &Settings,
    inputs: &RunInputs,
    method: Method,
    seed: u64,
) -> Result<(RunReport, Vec<ImportanceReport>), CliError> {
    let cfg = settings.adaptation(method, seed)?;
    if !inputs.model.exists() {
        return Err(io_err(&inputs.model)(std::io::ErrorKind::NotFound.into()));
    }
    let model = load_checkpoint(&inputs.model)?;
    let stream = load_stream(&inputs.data, settings)?;
    let (_, outcomes) = adapt_stream(model.clone(), &stream, &cfg)?;
    let report = RunReport::build(&model, &cfg, &stream.segment_names, stream.classes, &outcomes)?;
    let importance = outcomes.into_iter().filter_map(|o| o.importance).collect();
    Ok((report, importance))
}

fn adapt(common: &Common, inputs: &RunInputs, method: Method) -> Result<(), CliError> {
    let settings = load_settings(common)?;
    let (report, _) = run_method(&settings, inputs, method, common.seed)?;
    prepare_out(common)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&common.out.join("report.json"), json.as_bytes())?;
    write_atomic(&common.out.join("batches.csv"), report.batches_csv().as_bytes())?;
    println!(
        "{}: mean online error {:.2}%, average cache {:.0} bytes",
        report.method, report.mean_error, report.avg_cache_bytes
    );
    Ok(())
}

fn sweep(common: &Common, inputs: &RunInputs) -> Result<(), CliError> {
    let settings = load_settings(common)?;
    let mut csv = String::from("method,ratio,mean-error,avg-cache-bytes\n");
    for &p in &settings.ratios {
        let (r, _) = run_method(&settings, inputs, Method::Static(p), common.seed)?;
        csv.push_str(&format!("static,{p},{},{}\n", r.mean_error, r.avg_cache_bytes));
    }
    let (r, _) = run_method(&settings, inputs, Method::Surgeon, common.seed)?;
    csv.push_str(&format!("surgeon,,{},{}\n", r.mean_error, r.avg_cache_bytes));
    prepare_out(common)?;
    write_atomic(&common.out.join("sweep.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn importance(common: &Common, inputs: &RunInputs, method: Method) -> Result<(), CliError> {
    let settings = load_settings(common)?;
    let (_, reports) = run_method(&settings, inputs, method, common.seed)?;
    let mut csv = String::from(ImportanceReport::CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        for row in r.csv_rows() {
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    prepare_out(common)?;
    write_atomic(&common.out.join("importance.csv"), csv.as_bytes())?;
    println!("wrote importance for {} batches", reports.len());
    Ok(())
}
