//! Training, evaluation, forecasting and ablation drivers behind the CLI.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::LossBreakdown;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{
    load_csv, split_chronological, synth_generate, window_split, NormStats, SeriesTable, Splits,
    WindowSet,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_series, MetricsReport, SeriesForecast};
use crate::model::{DistillModel, ForecastBatch};
use crate::optim::Adam;

const SHUFFLE_STREAM: u64 = 10;
const EVAL_BATCH: usize = 64;

pub const CONFIG_FILE: &str = "config.txt";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSONL: &str = "ablation.jsonl";

/// The configured series: a CSV file or the synthetic generator.
pub fn load_series(cfg: &RunConfig) -> Result<SeriesTable> {
    match &cfg.data_path {
        Some(p) => Ok(load_csv(p)?),
        None => Ok(synth_generate(
            cfg.synth_seed.unwrap_or(cfg.seed),
            cfg.synth_len,
            cfg.synth_variates,
            &cfg.synth_spec(),
        )?),
    }
}

/// Raw splits plus normalized windows for each of them.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub raw: Splits,
    pub norm: NormStats,
    pub train: WindowSet,
    pub val: Option<WindowSet>,
    pub test: WindowSet,
    /// Test windows in original units (for in-sample histories).
    pub test_raw: WindowSet,
}

impl Prepared {
    pub fn variates(&self) -> usize {
        self.norm.variates()
    }
}

/// Splits the series chronologically and windows each split. Statistics are
/// fitted on the training split unless `norm` is supplied; with
/// `normalize = false` they are the identity.
pub fn prepare(cfg: &RunConfig, table: &SeriesTable, norm: Option<&NormStats>) -> Result<Prepared> {
    let raw = split_chronological(table, cfg.train_ratio, cfg.val_ratio, cfg.lookback)?;
    let norm = match norm {
        Some(n) => n.clone(),
        None if cfg.normalize => NormStats::fit(&raw.train)?,
        None => NormStats::identity(table.variates()),
    };
    let (l, h, s) = (cfg.lookback, cfg.horizon, cfg.stride);
    let train = window_split(&norm.apply(&raw.train)?, l, h, s)?;
    let val = window_split(&norm.apply(&raw.val)?, l, h, s).ok();
    let test = window_split(&norm.apply(&raw.test)?, l, h, s)?;
    let test_raw = window_split(&raw.test, l, h, s)?;
    Ok(Prepared {
        raw,
        norm,
        train,
        val,
        test,
        test_raw,
    })
}

/// One line of the loss trace: epoch means of every loss component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task: f64,
    pub feature: f64,
    pub ot: f64,
    pub total: f64,
    pub feature_per_layer: Vec<f64>,
}

impl EpochRecord {
    fn from_breakdown(epoch: usize, b: &LossBreakdown) -> Self {
        Self {
            epoch,
            task: b.task,
            feature: b.feature,
            ot: b.ot,
            total: b.total,
            feature_per_layer: b.feature_per_layer.clone(),
        }
    }
}

pub struct TrainOutcome {
    pub model: DistillModel,
    pub trace: Vec<EpochRecord>,
    pub steps: usize,
}

/// Trains a fresh model for `cfg.epochs` epochs over shuffled minibatches.
pub fn train(
    cfg: &RunConfig,
    data: &Prepared,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut model = DistillModel::new(cfg.model_config(data.variates()), cfg.seed)?;
    model.norm = data.norm.clone();
    let mut opt = Adam::new(&model.store, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut parts = Vec::new();
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.train.batch(idx);
            let b = model.train_step(&batch, &mut opt).map_err(|e| Error::Training {
                epoch,
                step: step + 1,
                source: Box::new(e),
            })?;
            parts.push(b);
            steps += 1;
        }
        let mean = LossBreakdown::mean(&parts).ok_or_else(|| Error::Model("no training windows".into()))?;
        let rec = EpochRecord::from_breakdown(epoch, &mean);
        on_epoch(&rec);
        trace.push(rec);
    }
    Ok(TrainOutcome { model, trace, steps })
}

/// Student forecasts for every window, de-normalized, in window order.
pub fn predict(model: &DistillModel, windows: &WindowSet) -> Result<ForecastBatch> {
    let idx: Vec<usize> = (0..windows.len()).collect();
    let mut predictions = Vec::with_capacity(windows.targets.len());
    let mut targets = Vec::with_capacity(windows.targets.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let fb = model.forward_infer(&windows.batch(chunk))?;
        predictions.extend(fb.predictions);
        targets.extend(fb.targets);
    }
    Ok(ForecastBatch {
        size: windows.len(),
        horizon: windows.horizon,
        variates: windows.variates,
        predictions,
        targets,
        norm: model.norm.clone(),
    })
}

/// Splits flat `[N, H, P]` predictions into per-(window, variate) series
/// scored against the raw windows' targets and lookback histories.
pub fn score(predictions: &[f64], raw: &WindowSet, seasonality: Option<usize>) -> Result<MetricsReport> {
    let (h, p, l) = (raw.horizon, raw.variates, raw.lookback);
    let column = |buf: &[f64], rows: usize, v: usize| -> Vec<f64> { (0..rows).map(|t| buf[t * p + v]).collect() };
    let mut owned = Vec::with_capacity(raw.len() * p);
    for w in 0..raw.len() {
        let pred = &predictions[w * h * p..(w + 1) * h * p];
        for v in 0..p {
            owned.push((
                column(pred, h, v),
                column(raw.target(w), h, v),
                column(raw.input(w), l, v),
            ));
        }
    }
    let series: Vec<SeriesForecast> = owned
        .iter()
        .map(|(pred, target, insample)| SeriesForecast {
            pred,
            target,
            insample,
        })
        .collect();
    evaluate_series(&series, seasonality, raw.len())
}

/// Metrics of the student on normalized windows, scored in original units.
pub fn evaluate(
    model: &DistillModel,
    windows: &WindowSet,
    raw: &WindowSet,
    seasonality: Option<usize>,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let fb = predict(model, windows)?;
    let mut report = score(&fb.predictions, raw, seasonality)?;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Windows a raw table, normalizes with the model's stats and evaluates.
pub fn evaluate_table(
    model: &DistillModel,
    table: &SeriesTable,
    stride: usize,
    seasonality: Option<usize>,
) -> Result<MetricsReport> {
    let (l, h) = (model.cfg.backbone.lookback, model.cfg.horizon);
    let raw = window_split(table, l, h, stride)?;
    let norm = window_split(&model.norm.apply(table)?, l, h, stride)?;
    evaluate(model, &norm, &raw, seasonality)
}

/// Last-value persistence forecast for every raw window, flat `[N, H, P]`.
pub fn persistence(raw: &WindowSet) -> Vec<f64> {
    let (h, p, l) = (raw.horizon, raw.variates, raw.lookback);
    let mut out = Vec::with_capacity(raw.len() * h * p);
    for w in 0..raw.len() {
        let last = &raw.input(w)[(l - 1) * p..l * p];
        for _ in 0..h {
            out.extend_from_slice(last);
        }
    }
    out
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Result of [`cmd_train`].
pub struct TrainSummary {
    pub trace: Vec<EpochRecord>,
    pub test: MetricsReport,
    pub persistence: MetricsReport,
    pub checkpoint: PathBuf,
    pub model: DistillModel,
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    test: &'a MetricsReport,
    persistence: &'a MetricsReport,
    steps: usize,
    train_secs: f64,
}

/// Trains per `cfg` and writes the resolved config, loss trace, checkpoint
/// and test metrics into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let table = load_series(cfg)?;
    let data = prepare(cfg, &table, None)?;
    let start = Instant::now();
    let outcome = train(cfg, &data, |r| {
        log::info!(
            "epoch {}: total {:.6} task {:.6} feature {:.6} ot {:.6}",
            r.epoch,
            r.total,
            r.task,
            r.feature,
            r.ot
        )
    })?;
    let train_secs = start.elapsed().as_secs_f64();
    write_jsonl(&out.join(TRACE_FILE), &outcome.trace)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, &outcome.model.named_tensors())?;
    let test = evaluate(&outcome.model, &data.test, &data.test_raw, cfg.seasonality)?;
    let persistence = score(&persistence(&data.test_raw), &data.test_raw, cfg.seasonality)?;
    let metrics = TrainMetrics {
        test: &test,
        persistence: &persistence,
        steps: outcome.steps,
        train_secs,
    };
    fs::write(out.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)?)?;
    Ok(TrainSummary {
        trace: outcome.trace,
        test,
        persistence,
        checkpoint: ckpt,
        model: outcome.model,
    })
}

/// Rebuilds the model described by `cfg` and restores it from a checkpoint.
/// The variate count is taken from the stored normalization statistics.
pub fn load_model(path: &Path, cfg: &RunConfig) -> Result<DistillModel> {
    let tensors = checkpoint::load(path)?;
    let variates = tensors
        .iter()
        .find(|(n, _)| n == "norm.mean")
        .map(|(_, t)| t.len())
        .ok_or_else(|| crate::error::CheckpointError::MissingParam("norm.mean".into()))?;
    let mut model = DistillModel::new(cfg.model_config(variates), cfg.seed)?;
    model.load_named_tensors(&tensors)?;
    Ok(model)
}

/// Student-only evaluation of a checkpoint on the configured test split.
pub fn cmd_eval(path: &Path, cfg: &RunConfig) -> Result<MetricsReport> {
    let model = load_model(path, cfg)?;
    let table = load_series(cfg)?;
    if table.variates() != model.cfg.variates {
        return Err(Error::Model(format!(
            "data has {} variates, checkpoint has {}",
            table.variates(),
            model.cfg.variates
        )));
    }
    let data = prepare(cfg, &table, Some(&model.norm))?;
    evaluate(&model, &data.test, &data.test_raw, cfg.seasonality)
}

/// `H×P` forecast in original units from the last `lookback` rows of `input`.
pub fn forecast(model: &DistillModel, input: &SeriesTable, horizon: usize) -> Result<Vec<Vec<f64>>> {
    let (l, p) = (model.cfg.backbone.lookback, model.cfg.variates);
    if input.variates() != p {
        return Err(Error::Model(format!(
            "input has {} variates, model expects {p}",
            input.variates()
        )));
    }
    if input.len() < l {
        return Err(crate::error::DataError::TooShort {
            len: input.len(),
            need: l,
        }
        .into());
    }
    if horizon == 0 || horizon > model.cfg.horizon {
        return Err(Error::Model(format!(
            "horizon {horizon} outside 1..={} supported by the model",
            model.cfg.horizon
        )));
    }
    let recent = model.norm.apply(&input.rows(input.len() - l, input.len()))?;
    let batch = crate::data::Batch {
        size: 1,
        lookback: l,
        horizon: model.cfg.horizon,
        variates: p,
        inputs: recent.values.data().to_vec(),
        targets: vec![0.0; model.cfg.horizon * p],
    };
    let fb = model.forward_infer(&batch)?;
    Ok(fb.predictions.chunks(p).take(horizon).map(<[f64]>::to_vec).collect())
}

/// Forecast CSV: header `horizon,<variate names>`, one row per step.
pub fn write_forecast_csv<W: std::io::Write>(rows: &[Vec<f64>], names: &[String], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["horizon".to_string()];
    header.extend(names.iter().cloned());
    out.write_record(&header).map_err(csv_err)?;
    for (i, r) in rows.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(r.iter().map(|v| v.to_string()));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Loads a checkpoint and writes `horizon` forecast rows to `out`.
pub fn cmd_forecast(
    path: &Path,
    cfg: &RunConfig,
    input: &Path,
    horizon: usize,
    out: &Path,
) -> Result<Vec<Vec<f64>>> {
    let model = load_model(path, cfg)?;
    let table = load_csv(input)?;
    let rows = forecast(&model, &table, horizon)?;
    write_forecast_csv(&rows, &table.variate_names, fs::File::create(out)?)?;
    Ok(rows)
}

/// Component switches of one ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub dag: bool,
    pub feature: bool,
    pub ot: bool,
}

/// The four compared variants: each component alone, then all of them.
pub const ABLATION_ROWS: [(&str, Toggles); 4] = [
    ("1", Toggles { dag: true, feature: false, ot: false }),
    ("2", Toggles { dag: false, feature: true, ot: false }),
    ("3", Toggles { dag: false, feature: false, ot: true }),
    ("full", Toggles { dag: true, feature: true, ot: true }),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub toggles: Toggles,
    pub metrics: MetricsReport,
    pub final_total: f64,
}

pub fn ablation_config(base: &RunConfig, t: Toggles) -> RunConfig {
    RunConfig {
        use_dag: t.dag,
        use_feature: t.feature,
        use_ot: t.ot,
        ..base.clone()
    }
}

/// Trains and evaluates every ablation variant on the same data, writing a
/// CSV table and a JSON-lines record per row into `out`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(out)?;
    let table = load_series(cfg)?;
    let data = prepare(cfg, &table, None)?;
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (name, t) in ABLATION_ROWS {
        let c = ablation_config(cfg, t);
        let outcome = train(&c, &data, |_| {})?;
        let metrics = evaluate(&outcome.model, &data.test, &data.test_raw, c.seasonality)?;
        log::info!("ablation row {name}: smape {:.4} mase {:.4}", metrics.smape, metrics.mase);
        rows.push(AblationRow {
            model: name.to_string(),
            toggles: t,
            final_total: outcome.trace.last().map_or(f64::NAN, |r| r.total),
            metrics,
        });
    }
    write_ablation_csv(&rows, fs::File::create(out.join(ABLATION_CSV))?)?;
    write_jsonl(&out.join(ABLATION_JSONL), &rows)?;
    Ok(rows)
}

pub fn write_ablation_csv<W: std::io::Write>(rows: &[AblationRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "dag", "feature", "ot", "smape", "mase", "owa", "mse", "mae"])
        .map_err(csv_err)?;
    let mark = |b: bool| if b { "yes" } else { "no" }.to_string();
    for r in rows {
        let m = &r.metrics;
        out.write_record([
            r.model.clone(),
            mark(r.toggles.dag),
            mark(r.toggles.feature),
            mark(r.toggles.ot),
            m.smape.to_string(),
            m.mase.to_string(),
            m.owa.map_or_else(String::new, |v| v.to_string()),
            m.mse.to_string(),
            m.mae.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
