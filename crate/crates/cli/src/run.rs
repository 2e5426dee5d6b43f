//! Experiment orchestration: per-seed split, training, evaluation and
//! result files.
//!
//! A run directory holds
//!
//! ```text
//! config.toml              resolved configuration, defaults included
//! seeds.json               seeds in run order
//! metrics/seed-<s>.jsonl   one MetricsRecord per epoch
//! metrics.csv              every epoch of every seed
//! summary.csv              mean ± std of the final-epoch metrics over seeds
//! checkpoints/seed-<s>.json
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;
use whvi::data::{synth_generate, DataError, Dataset, Manifest};
use whvi::models::Regressor;
use whvi::train::{evaluate, rng_for, train_loop, MetricsRecord, TrainError, EVAL_STREAM, INIT_STREAM};
use whvi::TensorError;

use crate::checkpoint::{checkpoint_read, checkpoint_save, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("dataset error: {0}")]
    Data(#[from] DataError),
    #[error("training aborted: {0}")]
    Train(#[from] TrainError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Train(TrainError::Tensor(e))
    }
}

impl CliError {
    /// 1 configuration, 2 runtime (including non-finite aborts), 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(e) => match e {
                DataError::UnknownDataset { .. } | DataError::TargetIndex { .. } | DataError::InvalidFraction(_) => 1,
                DataError::Io { .. }
                | DataError::MalformedRow { .. }
                | DataError::NonNumeric { .. }
                | DataError::ColumnCount { .. }
                | DataError::RowCount { .. }
                | DataError::Manifest { .. } => 3,
                DataError::TooFewRows(_) | DataError::NotSplit(_) => 2,
            },
            CliError::Train(TrainError::Config { .. }) => 1,
            CliError::Train(_) => 2,
            CliError::Checkpoint(CheckpointError::Io { .. }) | CliError::Io { .. } => 3,
            CliError::Checkpoint(_) => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(ExperimentConfig::from_toml(&text)?)
}

/// The full (unsplit) dataset a config refers to.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset, CliError> {
    let d = &config.dataset;
    let ds = match (&d.name, d.synthetic) {
        (Some(name), _) => {
            let manifest = d.manifest.as_ref().expect("validated");
            Manifest::load_dataset(manifest, name)?
        }
        (None, Some(f)) => {
            let mut ds = synth_generate(f, d.n, d.noise_std, d.generation_seed);
            ds.name = dataset_label(config);
            ds
        }
        (None, None) => unreachable!("validated config names a dataset"),
    };
    Ok(match &d.targets {
        Some(cols) => ds.select_targets(cols)?,
        None => ds,
    })
}

/// Label used in reports; synthetic functions are marked as stand-ins for
/// the unnamed simulator benchmarks.
pub fn dataset_label(config: &ExperimentConfig) -> String {
    match (&config.dataset.name, config.dataset.synthetic) {
        (Some(n), _) => n.clone(),
        (None, Some(f)) => format!("{} (substitute)", f.name()),
        (None, None) => String::new(),
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub output: Option<PathBuf>,
    pub seed_override: Option<Vec<u64>>,
    pub quiet: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub metric: &'static str,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    /// Per seed, in `config.seeds` order.
    pub records: Vec<(u64, Vec<MetricsRecord>)>,
    pub summary: Vec<SummaryRow>,
}

impl RunOutcome {
    pub fn final_records(&self) -> Vec<&MetricsRecord> {
        self.records.iter().filter_map(|(_, r)| r.last()).collect()
    }

    pub fn summary_of(&self, metric: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.metric == metric)
    }
}

/// Mean and sample standard deviation (`n - 1`; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Final-epoch metrics reduced over seeds.
pub fn summarize(finals: &[&MetricsRecord]) -> Vec<SummaryRow> {
    type Get = fn(&MetricsRecord) -> Option<f64>;
    let metrics: [(&'static str, Get); 6] = [
        ("test_rmse", |r| r.test_rmse),
        ("test_mnll", |r| r.test_mnll),
        ("elbo", |r| Some(r.elbo)),
        ("data_fit", |r| Some(r.data_fit)),
        ("kl", |r| Some(r.kl)),
        ("num_params", |r| Some(r.num_params as f64)),
    ];
    metrics
        .iter()
        .filter_map(|(name, get)| {
            let values: Vec<f64> = finals.iter().filter_map(|r| get(r)).collect();
            (!values.is_empty()).then(|| {
                let (mean, std) = mean_std(&values);
                SummaryRow {
                    metric: name,
                    mean,
                    std,
                    n: values.len(),
                }
            })
        })
        .collect()
}

/// Splits, trains and checkpoints one seed; metrics stream to `jsonl`.
pub fn run_seed(
    config: &ExperimentConfig,
    dataset: &Dataset,
    seed: u64,
    dir: &Path,
    quiet: bool,
) -> Result<Vec<MetricsRecord>, CliError> {
    let ds = dataset.split(config.dataset.train_fraction, seed)?;
    let spec = config.model_spec(ds.n_features(), ds.n_targets());
    let mut model = spec.build(&mut rng_for(seed, INIT_STREAM))?;
    let stats = ds.target_stats()?.clone();
    model.set_output_scaling(&stats.mean, &stats.std);

    let path = dir.join("metrics").join(format!("seed-{seed}.jsonl"));
    let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    let mut write_err = None;
    let label = config.model.label();
    let records = train_loop(model.as_mut(), &ds, &config.training, seed, label, |r| {
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(out, "{line}").and_then(|_| out.flush()) {
            write_err.get_or_insert(e);
        }
        if !quiet {
            if let (Some(rmse), Some(mnll)) = (r.test_rmse, r.test_mnll) {
                eprintln!(
                    "[{label} seed {seed}] epoch {:>4}  elbo {:>12.3}  kl {:>10.3}  rmse {rmse:.4}  mnll {mnll:.4}",
                    r.epoch, r.elbo, r.kl
                );
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&path)(e));
    }
    checkpoint_save(
        model.as_ref(),
        Some(seed),
        &dir.join("checkpoints").join(format!("seed-{seed}.json")),
    )?;
    Ok(records)
}

pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let mut config = config.clone();
    if let Some(seeds) = &opts.seed_override {
        config.seeds = seeds.clone();
    }
    if let Some(dir) = &opts.output {
        config.output_dir = dir.clone();
    }
    config.validate()?;
    let dir = config.output_dir.clone();
    for sub in [dir.clone(), dir.join("metrics"), dir.join("checkpoints")] {
        std::fs::create_dir_all(&sub).map_err(io_err(&sub))?;
    }
    write_file(&dir.join("config.toml"), &config.to_toml())?;
    write_file(
        &dir.join("seeds.json"),
        &serde_json::to_string(&config.seeds).expect("seeds serialize"),
    )?;

    let dataset = load_dataset(&config)?;
    let results: Vec<Result<Vec<MetricsRecord>, CliError>> = if config.workers <= 1 {
        config
            .seeds
            .iter()
            .map(|&s| run_seed(&config, &dataset, s, &dir, opts.quiet))
            .collect()
    } else {
        let mut results = Vec::with_capacity(config.seeds.len());
        for chunk in config.seeds.chunks(config.workers) {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&s| {
                        let (config, dataset, dir) = (&config, &dataset, &dir);
                        scope.spawn(move || run_seed(config, dataset, s, dir, opts.quiet))
                    })
                    .collect();
                results.extend(handles.into_iter().map(|h| h.join().expect("seed worker panicked")));
            });
        }
        results
    };
    let mut records = Vec::with_capacity(results.len());
    for (&seed, r) in config.seeds.iter().zip(results) {
        records.push((seed, r?));
    }

    write_metrics_csv(&dir.join("metrics.csv"), &records)?;
    let finals: Vec<&MetricsRecord> = records.iter().filter_map(|(_, r)| r.last()).collect();
    let summary = summarize(&finals);
    write_summary_csv(&dir.join("summary.csv"), &config, &summary)?;
    Ok(RunOutcome {
        dir,
        config,
        records,
        summary,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_io(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

fn write_metrics_csv(path: &Path, records: &[(u64, Vec<MetricsRecord>)]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    for r in records.iter().flat_map(|(_, r)| r) {
        w.serialize(r).map_err(csv_io(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_summary_csv(path: &Path, config: &ExperimentConfig, rows: &[SummaryRow]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let io = csv_io(path);
    w.write_record(["dataset", "model", "metric", "mean", "std", "n_seeds"])
        .map_err(&io)?;
    let dataset = dataset_label(config);
    for r in rows {
        w.write_record([
            dataset.as_str(),
            config.model.label(),
            r.metric,
            &r.mean.to_string(),
            &r.std.to_string(),
            &r.n.to_string(),
        ])
        .map_err(&io)?;
    }
    w.flush().map_err(io_err(path))
}

/// Test RMSE and MNLL of a checkpoint on the test split of its seed.
pub fn evaluate_checkpoint(
    config: &ExperimentConfig,
    checkpoint: &Path,
    n_mc: Option<usize>,
) -> Result<(u64, f64, f64), CliError> {
    let ckpt = checkpoint_read(checkpoint)?;
    let model: Box<dyn Regressor> = ckpt.into_model()?;
    let seed = ckpt.seed.unwrap_or(config.seeds[0]);
    let ds = load_dataset(config)?.split(config.dataset.train_fraction, seed)?;
    let (x, y) = (ds.test_x()?, ds.test_y()?);
    let n_mc = n_mc.unwrap_or(config.training.n_mc_eval);
    let (rmse, mnll) = evaluate(model.as_ref(), &x, &y, n_mc, &mut rng_for(seed, EVAL_STREAM))?;
    Ok((seed, rmse, mnll))
}

/// `(in_dim, out_dim)` of the dataset, read from the manifest without
/// loading the CSV.
pub fn dataset_dims(config: &ExperimentConfig) -> Result<(usize, usize), CliError> {
    let d = &config.dataset;
    let targets = |available: usize| d.targets.as_ref().map_or(available, Vec::len);
    match (&d.name, d.synthetic) {
        (Some(name), _) => {
            let path = d.manifest.as_ref().expect("validated");
            let (manifest, _) = Manifest::load(path)?;
            let entry = manifest.datasets.get(name).ok_or_else(|| DataError::UnknownDataset {
                name: name.clone(),
                manifest: path.clone(),
            })?;
            Ok((entry.n_features, targets(entry.n_targets)))
        }
        (None, Some(f)) => Ok((f.input_dim(), 1)),
        (None, None) => unreachable!("validated config names a dataset"),
    }
}
