//! Experiment orchestration: `run` trains one configuration and writes its
//! artifacts, `sweep` repeats `run` along one axis.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{self, Histogram, LayerMetrics, MetricRecord, RecordKind};
use crate::nn::{ParamKind, Tensor};
use crate::sim::{codecs_by_kind, shard, Cluster, ClusterConfig, CodecSpec};

pub use config::{
    CodecAssignment, CodecConfig, DatasetConfig, ExperimentConfig, LayerConfig, ModelConfig,
    OptimizerConfig,
};

/// Loads the train and test splits described by `cfg`, shaped to the
/// model's input.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match &cfg.dataset {
        DatasetConfig::Mnist {
            dir,
            train_limit,
            test_limit,
            center,
        } => {
            let mut train = data::load_mnist(dir, Split::Train)?;
            let mut test = data::load_mnist(dir, Split::Test)?;
            if let Some(n) = train_limit {
                train = train.truncate(*n);
            }
            if let Some(n) = test_limit {
                test = test.truncate(*n);
            }
            if *center {
                let means = train.feature_means();
                train.subtract(&means);
                test.subtract(&means);
            }
            (train, test)
        }
        DatasetConfig::Gaussians {
            classes,
            dim,
            train,
            test,
            separation,
            seed,
        } => {
            let all = data::synth_gaussians(*classes, *dim, train + test, *separation, *seed)?;
            let (train, mut test) = data::split_train_test(all, *train)?;
            test.split = Split::Test;
            (train, test)
        }
    };
    reshape(&mut train, &cfg.model.input)?;
    reshape(&mut test, &cfg.model.input)?;
    Ok((train, test))
}

fn reshape(data: &mut Dataset, input: &[usize]) -> Result<()> {
    if data.sample_shape() == input {
        return Ok(());
    }
    let want: usize = input.iter().product();
    if data.features.sample_len() != want {
        return Err(Error::InvalidConfig(format!(
            "model.input: {input:?} does not fit dataset samples of shape {:?}",
            data.sample_shape()
        )));
    }
    let mut shape = vec![data.len()];
    shape.extend_from_slice(input);
    let features = std::mem::replace(&mut data.features, Tensor::zeros(vec![0]));
    data.features = Tensor::new(shape, features.into_data())?;
    Ok(())
}

/// Column-name prefixes of the parameterized layers: `fc0`, `fc1`, ...,
/// `conv0`, ... numbered per kind in network order.
pub fn layer_names(kinds: &[ParamKind]) -> Vec<String> {
    let (mut fc, mut conv) = (0, 0);
    kinds
        .iter()
        .map(|k| match k {
            ParamKind::FullyConnected => {
                fc += 1;
                format!("fc{}", fc - 1)
            }
            ParamKind::Convolution => {
                conv += 1;
                format!("conv{}", conv - 1)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for the simulated learners.
    pub threads: Option<usize>,
    /// Prints one progress line per epoch to stderr.
    pub progress: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Diverged { step: u64, rank: usize, loss: f32 },
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub layer_names: Vec<String>,
    pub layer_kinds: Vec<ParamKind>,
    pub codecs: Vec<CodecSpec>,
    pub records: Vec<MetricRecord>,
    pub status: RunStatus,
    /// Test error after the last completed epoch.
    pub final_test_error: Option<f64>,
    /// Rank 0's residue histograms after each epoch, one entry per epoch.
    pub histograms: Vec<Vec<(String, Histogram)>>,
    /// Final weights of rank 0, per layer.
    pub weights: Vec<Vec<f32>>,
    pub wall_seconds: f64,
}

impl RunReport {
    pub fn epoch_records(&self) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(|r| r.kind == RecordKind::Epoch)
    }

    /// Traffic summed over every step of the run, per layer.
    pub fn layer_totals(&self) -> Vec<LayerMetrics> {
        let mut totals = vec![LayerMetrics::default(); self.layer_names.len()];
        for r in self.records.iter().filter(|r| r.kind == RecordKind::Step) {
            for (t, l) in totals.iter_mut().zip(&r.layers) {
                t.absorb(l);
            }
        }
        totals
    }

    /// Dense bits over payload bits, summed across all layers and steps.
    pub fn mean_compression_rate(&self) -> f64 {
        sum_rate(self.layer_totals().iter())
    }

    /// Same ratio restricted to fully connected layers.
    pub fn fc_compression_rate(&self) -> f64 {
        let totals = self.layer_totals();
        sum_rate(
            totals
                .iter()
                .zip(&self.layer_kinds)
                .filter(|(_, k)| **k == ParamKind::FullyConnected)
                .map(|(t, _)| t),
        )
    }

    pub fn summary(&self) -> Summary {
        let totals = self.layer_totals();
        Summary {
            status: match self.status {
                RunStatus::Completed => "completed".into(),
                RunStatus::Diverged { .. } => "diverged".into(),
            },
            steps: self
                .records
                .iter()
                .filter(|r| r.kind == RecordKind::Step)
                .count() as u64,
            epochs: self.epoch_records().count(),
            final_test_error: self.final_test_error,
            final_train_loss: self.epoch_records().last().map(|r| r.train_loss),
            mean_compression_rate: finite(self.mean_compression_rate()),
            layers: self
                .layer_names
                .iter()
                .zip(&totals)
                .zip(&self.codecs)
                .map(|((name, t), codec)| LayerSummary {
                    name: name.clone(),
                    codec: codec.name().into(),
                    payload_bits: t.payload_bits,
                    dense_bits: t.dense_bits,
                    mean_compression_rate: finite(t.rate()),
                    mean_selected_per_bin: finite(t.selected_per_bin()),
                })
                .collect(),
        }
    }
}

fn sum_rate<'a>(layers: impl Iterator<Item = &'a LayerMetrics>) -> f64 {
    let mut total = LayerMetrics::default();
    for l in layers {
        total.payload_bits += l.payload_bits;
        total.dense_bits += l.dense_bits;
    }
    total.rate()
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub status: String,
    pub steps: u64,
    pub epochs: usize,
    pub final_test_error: Option<f64>,
    pub final_train_loss: Option<f32>,
    pub mean_compression_rate: Option<f64>,
    pub layers: Vec<LayerSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSummary {
    pub name: String,
    pub codec: String,
    pub payload_bits: u64,
    pub dense_bits: u64,
    pub mean_compression_rate: Option<f64>,
    pub mean_selected_per_bin: Option<f64>,
}

/// Trains `cfg` and, when `out` is given, writes `metrics.csv`,
/// `summary.json` and (if enabled) `rg_hist_epoch<k>.csv` there.
///
/// A NaN loss stops training; the rows gathered so far are still written
/// and the report's status says where it happened.
pub fn run(cfg: &ExperimentConfig, out: Option<&Path>, opts: &RunOptions) -> Result<RunReport> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    run_on(cfg, &train, &test, out, opts)
}

/// [`run`] with datasets already loaded.
pub fn run_on(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    out: Option<&Path>,
    opts: &RunOptions,
) -> Result<RunReport> {
    let started = Instant::now();
    cfg.validate()?;
    if train.len() < cfg.global_batch {
        return Err(Error::InvalidConfig(format!(
            "global_batch: {} exceeds the {} training samples",
            cfg.global_batch,
            train.len()
        )));
    }
    let model = cfg.build_model()?;
    if model.classes() < train.classes {
        return Err(Error::InvalidConfig(format!(
            "model.layers: {} outputs for {} classes",
            model.classes(),
            train.classes
        )));
    }
    let kinds = model.param_kinds();
    let names = layer_names(&kinds);
    let codecs = codecs_by_kind(
        &kinds,
        cfg.codec.fc.to_spec("codec.fc")?,
        cfg.codec.conv.to_spec("codec.conv")?,
    );
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut cluster = Cluster::new(
        ClusterConfig {
            learners: cfg.learners,
            global_batch: cfg.global_batch,
            codecs: codecs.clone(),
            optimizer: cfg.optimizer.kind(),
            seed: cfg.seed,
            threads: opts.threads,
            verify_ranks: cfg.verify_ranks,
            track_percentiles: cfg.percentiles,
        },
        model,
    )?;

    let mut report = RunReport {
        layer_names: names,
        layer_kinds: kinds,
        codecs,
        records: Vec::new(),
        status: RunStatus::Completed,
        final_test_error: None,
        histograms: Vec::new(),
        weights: Vec::new(),
        wall_seconds: 0.0,
    };

    let local = cfg.global_batch / cfg.learners;
    'epochs: for epoch in 1..=cfg.epochs {
        let streams = shard(
            train.len(),
            cfg.learners,
            cfg.global_batch,
            cfg.seed,
            epoch as u64 - 1,
        )?;
        let steps = streams[0].len() / local;
        let mut epoch_layers = vec![LayerMetrics::default(); report.layer_names.len()];
        let mut loss_sum = 0.0f64;
        for s in 0..steps {
            let shards: Vec<&[usize]> = streams
                .iter()
                .map(|st| &st[s * local..(s + 1) * local])
                .collect();
            let outcome = match cluster.sync_step(train, &shards) {
                Ok(o) => o,
                Err(Error::Diverged { step, rank, loss }) => {
                    report.status = RunStatus::Diverged { step, rank, loss };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            loss_sum += outcome.loss as f64;
            for (acc, l) in epoch_layers.iter_mut().zip(&outcome.layers) {
                acc.absorb(l);
            }
            report.records.push(MetricRecord {
                kind: RecordKind::Step,
                step: cluster.step_count(),
                epoch,
                train_loss: outcome.loss,
                test_error: None,
                layers: outcome.layers,
            });
        }

        let test_error = cluster.test_error(test)?;
        report.final_test_error = Some(test_error);
        let rec = MetricRecord {
            kind: RecordKind::Epoch,
            step: cluster.step_count(),
            epoch,
            train_loss: (loss_sum / steps as f64) as f32,
            test_error: Some(test_error),
            layers: epoch_layers,
        };
        if opts.progress {
            eprintln!(
                "epoch {epoch}/{}: loss {:.4} test error {:.4} rate {:.1}",
                cfg.epochs,
                rec.train_loss,
                test_error,
                rec.total().rate()
            );
        }
        report.records.push(rec);

        let hists: Vec<(String, Histogram)> = report
            .layer_names
            .iter()
            .enumerate()
            .filter_map(|(i, name)| {
                cluster
                    .residue(0, i)
                    .map(|r| (name.clone(), Histogram::of(r)))
            })
            .collect();
        if cfg.histograms {
            if let Some(dir) = out {
                let path = dir.join(format!("rg_hist_epoch{epoch}.csv"));
                let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                metrics::write_histograms(std::io::BufWriter::new(file), &hists)?;
            }
        }
        report.histograms.push(hists);
    }

    report.weights = cluster
        .model()
        .params()
        .iter()
        .map(|p| p.to_vec())
        .collect();
    report.wall_seconds = started.elapsed().as_secs_f64();
    if let Some(dir) = out {
        write_artifacts(dir, &report)?;
    }
    Ok(report)
}

fn write_artifacts(dir: &Path, report: &RunReport) -> Result<()> {
    let path = dir.join("metrics.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    metrics::write_metrics(
        std::io::BufWriter::new(file),
        &report.layer_names,
        &report.records,
    )?;
    let path = dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&report.summary()).expect("summary serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Bin length of every binned codec.
    BinLen,
    GlobalBatch,
    Learners,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::BinLen => "lt",
            SweepAxis::GlobalBatch => "minibatch",
            SweepAxis::Learners => "learners",
        }
    }

    /// The config with this axis set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: usize) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            SweepAxis::BinLen => {
                c.codec.fc = c.codec.fc.with_bin_len(value);
                c.codec.conv = c.codec.conv.with_bin_len(value);
            }
            SweepAxis::GlobalBatch => c.global_batch = value,
            SweepAxis::Learners => c.learners = value,
        }
        c
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lt" | "l_t" | "bin_len" => Ok(SweepAxis::BinLen),
            "minibatch" | "batch" | "global_batch" => Ok(SweepAxis::GlobalBatch),
            "learners" | "n" => Ok(SweepAxis::Learners),
            _ => Err(Error::InvalidConfig(format!(
                "axis: expected one of lt, minibatch, learners, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: usize,
    /// The run's report, or why it failed.
    pub outcome: std::result::Result<RunReport, Error>,
}

impl SweepPoint {
    pub fn status(&self) -> String {
        match &self.outcome {
            Ok(r) => match r.status {
                RunStatus::Completed => "ok".into(),
                RunStatus::Diverged { step, .. } => format!("diverged at step {step}"),
            },
            Err(e) => format!("error: {e}"),
        }
    }
}

/// One run per value. Each run writes into `out/<axis>_<value>/`; the
/// aggregate goes to `out/sweep.csv`. A failing run is recorded and the
/// sweep moves on.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[usize],
    out: Option<&Path>,
    opts: &RunOptions,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::InvalidConfig(
            "values: at least one sweep value is needed".into(),
        ));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let data = load_datasets(cfg)?;
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let c = axis.apply(cfg, value);
        let run_dir: Option<PathBuf> = out.map(|d| d.join(format!("{}_{value}", axis.name())));
        let outcome = run_on(&c, &data.0, &data.1, run_dir.as_deref(), opts);
        points.push(SweepPoint { value, outcome });
    }
    if let Some(dir) = out {
        let path = dir.join("sweep.csv");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_sweep(std::io::BufWriter::new(file), axis, &points)?;
    }
    Ok(points)
}

/// Rows `axis,value,status,final_test_error,mean_compression_rate`.
pub fn write_sweep<W: std::io::Write>(w: W, axis: SweepAxis, points: &[SweepPoint]) -> Result<()> {
    let mut out = metrics::csv_writer(w);
    let wrap = |e: csv::Error| Error::Io {
        path: "sweep.csv".into(),
        message: e.to_string(),
    };
    out.write_record([
        "axis",
        "value",
        "status",
        "final_test_error",
        "mean_compression_rate",
    ])
    .map_err(wrap)?;
    for p in points {
        let (err, rate) = match &p.outcome {
            Ok(r) => (
                r.final_test_error
                    .map(|e| e.to_string())
                    .unwrap_or_default(),
                finite(r.mean_compression_rate())
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            ),
            Err(_) => (String::new(), String::new()),
        };
        out.write_record([
            axis.name().to_string(),
            p.value.to_string(),
            p.status(),
            err,
            rate,
        ])
        .map_err(wrap)?;
    }
    out.flush().map_err(|e| Error::io("sweep.csv", e))
}
