use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    forward_fill, interpolate_zeros, parse_series, pearson_matrix, validate, write_anomalies, write_correlation,
    write_series, ColumnSchema, PriceSeries,
};
use crate::diagnostics::diagnose;
use crate::evaluation::{dm_test, metrics, EvalError};
use crate::models::checkpoint::{read_checkpoint, write_checkpoint};
use crate::models::{
    predict_scaled, sarima_fit, sarima_forecast_rolling, train, BiLstm, BiLstmConfig, ForecastModel, ModelKind,
    TemporalEncoding, Transformer, TransformerConfig,
};
use crate::split::{make_windows, temporal_split, Scaler, TemporalSplit, WindowConfig, WindowSet};

use super::artifacts::{read_checked, write_atomic, Layout};
use super::report::{now_iso, BenchmarkReport, DiagnosticsSummary, DmRow, MetricRow, Provenance};
use super::{emit_tables, ErrorKind, PipelineError, RunConfig, Stage};

/// One scored point: `step` runs from 1 to the horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    #[serde(default)]
    pub commodity: String,
    #[serde(default)]
    pub model: String,
    pub window_id: usize,
    pub step: usize,
    #[serde(default)]
    pub date: String,
    pub actual: f64,
    pub predicted: f64,
}

/// Test-range forecasts of one model, window-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecasts {
    pub rows: Vec<ForecastRow>,
}

impl Forecasts {
    pub fn horizon(&self) -> usize {
        self.rows.iter().map(|r| r.step).max().unwrap_or(0)
    }

    pub fn actual(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.actual).collect()
    }

    pub fn predicted(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.predicted).collect()
    }

    pub fn errors(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.actual - r.predicted).collect()
    }

    /// Hash of the evaluation grid: window ids, steps, dates and actuals.
    pub fn grid_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.rows {
            h.update((r.window_id as u64).to_le_bytes());
            h.update((r.step as u64).to_le_bytes());
            h.update(r.date.as_bytes());
            h.update(r.actual.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    fn to_csv(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| e.into_error().into())
    }

    fn from_csv(body: &[u8]) -> Result<Self, csv::Error> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(body);
        let rows = r.deserialize().collect::<Result<Vec<ForecastRow>, _>>()?;
        Ok(Self { rows })
    }
}

/// Reads a prediction CSV with at least `window_id,step,actual,predicted`
/// columns; `#` lines are ignored.
pub fn read_forecasts(path: &Path) -> Result<Forecasts, PipelineError> {
    let body = std::fs::read(path).map_err(|e| {
        PipelineError::new(Stage::Dm, ErrorKind::Data, format!("cannot read {}: {e}", path.display()))
    })?;
    let f = Forecasts::from_csv(&body)
        .map_err(|e| PipelineError::csv(Stage::Dm, e).context(&path.display().to_string()))?;
    if f.rows.is_empty() {
        return Err(PipelineError::new(Stage::Dm, ErrorKind::Data, format!("{} has no rows", path.display())));
    }
    Ok(f)
}

/// DM test of `a` against `b` on a shared evaluation grid. `Ok(None)` when the
/// forecasts are indistinguishable.
pub fn compare_forecasts(
    a: &Forecasts,
    b: &Forecasts,
) -> Result<Option<crate::evaluation::DmResult>, PipelineError> {
    if a.grid_fingerprint() != b.grid_fingerprint() {
        return Err(PipelineError::new(
            Stage::Dm,
            ErrorKind::Data,
            "forecasts were scored on different evaluation grids",
        ));
    }
    match dm_test(&a.errors(), &b.errors(), a.horizon()) {
        Ok(r) => Ok(Some(r)),
        Err(EvalError::Indistinguishable) => Ok(None),
        Err(e) => Err(PipelineError::eval(Stage::Dm, e)),
    }
}

/// A configured run bound to its output directory and config hash.
pub struct Run {
    cfg: RunConfig,
    hash: String,
    layout: Layout,
    progress: bool,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        cfg.check_inputs()?;
        let hash = cfg.hash()?;
        let layout = Layout::new(cfg.output_dir.clone());
        Ok(Self {
            cfg,
            hash,
            layout,
            progress: false,
        })
    }

    /// Reports stage completions on standard error.
    pub fn with_progress(mut self, on: bool) -> Self {
        self.progress = on;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn commodities(&self) -> Vec<String> {
        self.cfg.data.keys().cloned().collect()
    }

    fn log(&self, msg: impl FnOnce() -> String) {
        if self.progress {
            eprintln!("{}", msg());
        }
    }

    fn write(&self, stage: Stage, path: &Path, body: &[u8]) -> Result<(), PipelineError> {
        write_atomic(stage, path, &self.hash, body)
    }

    fn read(&self, stage: Stage, path: &Path) -> Result<Vec<u8>, PipelineError> {
        read_checked(stage, path, &self.hash)
    }

    /// Runs `f` for every commodity on at most `jobs` worker threads. The
    /// first failure in commodity order is returned.
    pub fn for_each_commodity<F>(&self, jobs: usize, f: F) -> Result<(), PipelineError>
    where
        F: Fn(&str) -> Result<(), PipelineError> + Sync,
    {
        let names = self.commodities();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| PipelineError::new(Stage::Config, ErrorKind::Io, e.to_string()))?;
        let results: Vec<_> = pool.install(|| names.par_iter().map(|c| f(c)).collect());
        results.into_iter().collect()
    }

    /// Parses, repairs and flags one input file, caching the cleaned series
    /// and its anomaly report.
    pub fn ingest(&self, commodity: &str) -> Result<PriceSeries, PipelineError> {
        let stage = Stage::Ingest;
        let path = &self.cfg.data[commodity];
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::new(stage, ErrorKind::Data, format!("cannot read {}: {e}", path.display()))
        })?;
        let header = text.lines().next().unwrap_or("");
        let err = |e| PipelineError::data(stage, e).context(commodity);
        let schema = ColumnSchema::detect(header).map_err(err)?;
        let raw = parse_series(text.as_bytes(), commodity, &schema).map_err(err)?;
        let filled = forward_fill(&raw).map_err(err)?;
        let mut flags = filled.anomalies().to_vec();
        flags.extend(validate(&filled, self.cfg.low, self.cfg.high));
        flags.sort_by(|a, b| (a.date, a.kind.as_str()).cmp(&(b.date, b.kind.as_str())));
        let mut series = filled.with_anomalies(Vec::new());
        if self.cfg.interpolate_zeros {
            series = interpolate_zeros(&series);
        }
        let series = series.with_anomalies(flags);

        let mut body = Vec::new();
        write_series(&mut body, &series).map_err(err)?;
        self.write(stage, &self.layout.series(commodity), &body)?;
        let mut body = Vec::new();
        write_anomalies(&mut body, series.anomalies()).map_err(err)?;
        self.write(stage, &self.layout.anomalies(commodity), &body)?;
        self.log(|| format!("[{commodity}] ingested {} days, {} flags", series.len(), series.anomalies().len()));
        Ok(series)
    }

    /// Pearson matrix over the dates shared by every cached series.
    pub fn correlate(&self) -> Result<(), PipelineError> {
        let stage = Stage::Ingest;
        let names = self.commodities();
        if names.len() < 2 {
            return Ok(());
        }
        let all = names
            .iter()
            .map(|c| self.load_series(c))
            .collect::<Result<Vec<_>, _>>()?;
        let start = all.iter().filter_map(|s| s.first_date()).max();
        let end = all.iter().filter_map(|s| s.last_date()).min();
        let (Some(start), Some(end)) = (start, end) else {
            return Ok(());
        };
        if start >= end {
            return Ok(());
        }
        let clipped: Vec<Vec<f64>> = all
            .iter()
            .map(|s| {
                s.records()
                    .iter()
                    .filter(|r| r.date >= start && r.date <= end)
                    .map(|r| r.mid_price)
                    .collect()
            })
            .collect();
        let pairs: Vec<(&str, &[f64])> = names.iter().map(String::as_str).zip(clipped.iter().map(Vec::as_slice)).collect();
        let m = pearson_matrix(&pairs).map_err(|e| PipelineError::data(stage, e))?;
        let mut body = Vec::new();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        write_correlation(&mut body, &refs, &m).map_err(|e| PipelineError::data(stage, e))?;
        self.write(stage, &self.layout.correlation(), &body)
    }

    pub fn load_series(&self, commodity: &str) -> Result<PriceSeries, PipelineError> {
        let body = self.read(Stage::Ingest, &self.layout.series(commodity))?;
        parse_series(&body[..], commodity, &ColumnSchema::default())
            .map_err(|e| PipelineError::data(Stage::Ingest, e).context(commodity))
    }

    pub fn diagnose(&self, commodity: &str) -> Result<DiagnosticsSummary, PipelineError> {
        let series = self.load_series(commodity)?;
        let mids = series.mids();
        let row = diagnose(commodity, &mids, self.cfg.diagnostics_period)
            .map_err(|e| PipelineError::diagnostics(Stage::Diagnose, e).context(commodity))?;
        let summary = DiagnosticsSummary::new(&row, &mids);
        let body = DiagnosticsSummary::to_csv(std::slice::from_ref(&summary))
            .map_err(|e| PipelineError::csv(Stage::Diagnose, e))?;
        self.write(Stage::Diagnose, &self.layout.diagnostics_row(commodity), &body)?;
        self.log(|| format!("[{commodity}] ADF p {:.4}, R/S {:.3}", summary.adf_p, summary.rs_ratio));
        Ok(summary)
    }

    pub fn load_diagnostics(&self, commodity: &str) -> Result<DiagnosticsSummary, PipelineError> {
        let body = self.read(Stage::Diagnose, &self.layout.diagnostics_row(commodity))?;
        let mut rows = DiagnosticsSummary::from_csv(&body).map_err(|e| PipelineError::csv(Stage::Diagnose, e))?;
        match rows.len() {
            1 => Ok(rows.remove(0)),
            n => Err(PipelineError::new(
                Stage::Diagnose,
                ErrorKind::Data,
                format!("{commodity}: expected one diagnostics row, found {n}"),
            )),
        }
    }

    fn split_of(&self, stage: Stage, n: usize) -> Result<TemporalSplit, PipelineError> {
        temporal_split(n, self.cfg.fractions).map_err(|e| PipelineError::split(stage, e))
    }

    fn neural(&self, kind: ModelKind, series_len: usize) -> Result<ForecastModel, PipelineError> {
        let w = self.cfg.window;
        let model = match kind {
            ModelKind::Bilstm => BiLstm::new(
                BiLstmConfig {
                    seq_len: w.seq_len,
                    horizon: w.horizon,
                    ..BiLstmConfig::default()
                },
                self.cfg.seed,
            )
            .map(ForecastModel::Bilstm),
            ModelKind::Transformer | ModelKind::T2vTransformer => {
                let enc = if kind == ModelKind::Transformer {
                    TemporalEncoding::Sinusoidal
                } else {
                    TemporalEncoding::Time2Vec
                };
                let cfg = TransformerConfig {
                    seq_len: w.seq_len,
                    horizon: w.horizon,
                    ..TransformerConfig::new(enc, series_len)
                };
                Transformer::new(cfg, self.cfg.seed).map(ForecastModel::Transformer)
            }
            _ => unreachable!("only neural kinds are built here"),
        };
        model.map_err(|e| PipelineError::model(Stage::Train, e))
    }

    /// Fits one model on the training range (neural models also see the
    /// validation range for early stopping) and caches its checkpoint.
    pub fn train(&self, commodity: &str, kind: ModelKind) -> Result<(), PipelineError> {
        let stage = Stage::Train;
        let started = Instant::now();
        let y = self.load_series(commodity)?.mids();
        let split = self.split_of(stage, y.len())?;
        let merr = |e| PipelineError::model(stage, e).context(&format!("{commodity}/{kind}"));
        let model = match kind {
            ModelKind::Naive => ForecastModel::Naive {
                horizon: self.cfg.window.horizon,
            },
            ModelKind::Sarima => ForecastModel::Sarima(sarima_fit(&y[split.train.clone()], &self.cfg.sarima).map_err(merr)?),
            _ => {
                let (tr, va) = self.fit_windows(&y, &split)?;
                let mut model = self.neural(kind, y.len())?;
                let net = model.network_mut().expect("neural kinds carry a network");
                let tcfg = self.cfg.train_config(commodity).map_err(merr)?;
                let report = train(net, &tr, &va, &tcfg).map_err(merr)?;
                let mut body = Vec::new();
                report
                    .write_history(&mut body)
                    .map_err(|e| PipelineError::new(stage, ErrorKind::Io, e.to_string()))?;
                self.write(stage, &self.layout.history(commodity, kind.as_str()), &body)?;
                self.log(|| {
                    format!(
                        "[{commodity}] {kind}: {} epochs, best epoch {} (val {:.4e})",
                        report.epochs_run(),
                        report.best_epoch,
                        report.best_val_loss
                    )
                });
                model
            }
        };
        let mut body = Vec::new();
        write_checkpoint(&model, &mut body).map_err(merr)?;
        self.write(stage, &self.layout.checkpoint(commodity, kind.as_str()), &body)?;
        self.log(|| format!("[{commodity}] trained {kind} in {:.1}s", started.elapsed().as_secs_f64()));
        Ok(())
    }

    /// Scaled training and validation windows, with the leakage guard: no
    /// training target reaches the validation range and no validation target
    /// reaches the test range.
    fn fit_windows(&self, y: &[f64], split: &TemporalSplit) -> Result<(WindowSet, WindowSet), PipelineError> {
        let stage = Stage::Train;
        let e = |e| PipelineError::split(stage, e);
        let scaler = Scaler::fit_on_train(y, split).map_err(e)?;
        let scaled = scaler.transform_all(y);
        let tr = make_windows(&scaled, split.train.clone(), self.cfg.window).map_err(e)?;
        let va = make_windows(&scaled, split.val.clone(), self.cfg.window).map_err(e)?;
        tr.check_within(split.train.end).map_err(e)?;
        va.check_within(split.val.end).map_err(e)?;
        Ok((tr, va))
    }

    pub fn load_model(&self, commodity: &str, kind: ModelKind) -> Result<ForecastModel, PipelineError> {
        let body = self.read(Stage::Predict, &self.layout.checkpoint(commodity, kind.as_str()))?;
        let model = read_checkpoint(&body[..]).map_err(|e| PipelineError::model(Stage::Predict, e))?;
        if model.kind() != kind {
            return Err(PipelineError::new(
                Stage::Predict,
                ErrorKind::Config,
                format!("checkpoint for {kind} holds a {} model", model.kind()),
            ));
        }
        Ok(model)
    }

    /// Forecasts every test window and caches them in long format.
    pub fn predict(&self, commodity: &str, kind: ModelKind) -> Result<Forecasts, PipelineError> {
        let stage = Stage::Predict;
        let series = self.load_series(commodity)?;
        let (y, dates) = (series.mids(), series.dates());
        let split = self.split_of(stage, y.len())?;
        let model = self.load_model(commodity, kind)?;
        let wcfg = WindowConfig {
            stride: self.cfg.eval_stride,
            ..self.cfg.window
        };
        let e = |e| PipelineError::split(stage, e);
        let test = make_windows(&y, split.test.clone(), wcfg).map_err(e)?;
        let h = wcfg.horizon;
        let merr = |e| PipelineError::model(stage, e).context(&format!("{commodity}/{kind}"));
        let preds: Vec<Vec<f64>> = match &model {
            ForecastModel::Naive { horizon } => (0..test.len())
                .map(|i| crate::models::naive_predict(test.input(i), *horizon))
                .collect::<Result<_, _>>()
                .map_err(merr)?,
            ForecastModel::Sarima(m) => {
                let starts: Vec<usize> = (0..test.len()).map(|i| test.target_start(i)).collect();
                sarima_forecast_rolling(m, &y, &starts, h).map_err(merr)?
            }
            ForecastModel::Bilstm(_) | ForecastModel::Transformer(_) => {
                let scaler = Scaler::fit_on_train(&y, &split).map_err(e)?;
                let scaled = make_windows(&scaler.transform_all(&y), split.test.clone(), wcfg).map_err(e)?;
                let net = model.network().expect("neural kinds carry a network");
                predict_scaled(net, &scaled)
                    .map_err(merr)?
                    .iter()
                    .map(|p| scaler.inverse_all(p))
                    .collect()
            }
        };
        let mut rows = Vec::with_capacity(test.len() * h);
        for (i, p) in preds.iter().enumerate() {
            if p.len() != h {
                return Err(PipelineError::new(
                    stage,
                    ErrorKind::Config,
                    format!("{kind} produced {} steps, horizon is {h}", p.len()),
                ));
            }
            let start = test.target_start(i);
            for (s, (&a, &f)) in test.target(i).iter().zip(p).enumerate() {
                if !f.is_finite() {
                    return Err(PipelineError::new(
                        stage,
                        ErrorKind::Numeric,
                        format!("{commodity}/{kind}: non-finite forecast in window {i}"),
                    ));
                }
                rows.push(ForecastRow {
                    commodity: commodity.to_string(),
                    model: kind.as_str().to_string(),
                    window_id: i,
                    step: s + 1,
                    date: dates[start + s].format("%Y-%m-%d").to_string(),
                    actual: a,
                    predicted: f,
                });
            }
        }
        let out = Forecasts { rows };
        let body = out.to_csv().map_err(|e| PipelineError::csv(stage, e))?;
        self.write(stage, &self.layout.forecasts(commodity, kind.as_str()), &body)?;
        self.log(|| format!("[{commodity}] {kind}: {} test windows", test.len()));
        Ok(out)
    }

    pub fn load_forecasts(&self, commodity: &str, kind: ModelKind) -> Result<Forecasts, PipelineError> {
        let body = self.read(Stage::Evaluate, &self.layout.forecasts(commodity, kind.as_str()))?;
        Forecasts::from_csv(&body).map_err(|e| PipelineError::csv(Stage::Evaluate, e))
    }

    /// Metrics for every selected (commodity, model) pair from cached forecasts.
    pub fn evaluate(&self) -> Result<Vec<MetricRow>, PipelineError> {
        let mut rows = Vec::new();
        for c in self.commodities() {
            for &kind in &self.cfg.models {
                let f = self.load_forecasts(&c, kind)?;
                let report = metrics(&f.actual(), &f.predicted())
                    .map_err(|e| PipelineError::eval(Stage::Evaluate, e).context(&format!("{c}/{kind}")))?;
                rows.push(MetricRow {
                    commodity: c.clone(),
                    model: kind,
                    report,
                });
            }
        }
        Ok(rows)
    }

    /// DM rows for every configured pair whose models are both selected.
    pub fn dm(&self) -> Result<Vec<DmRow>, PipelineError> {
        let mut rows = Vec::new();
        for c in self.commodities() {
            for pair in self.cfg.active_dm_pairs() {
                let a = self.load_forecasts(&c, pair.comparison)?;
                let b = self.load_forecasts(&c, pair.reference)?;
                let result = compare_forecasts(&a, &b).map_err(|e| e.context(&c))?;
                rows.push(DmRow {
                    commodity: c.clone(),
                    comparison: pair.comparison.as_str().to_string(),
                    reference: pair.reference.as_str().to_string(),
                    result,
                });
            }
        }
        Ok(rows)
    }

    /// Assembles the report from cached diagnostics and forecasts.
    pub fn report(&self, started: Option<String>) -> Result<BenchmarkReport, PipelineError> {
        let diagnostics = self
            .commodities()
            .iter()
            .map(|c| self.load_diagnostics(c))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BenchmarkReport {
            commodities: self.commodities(),
            models: self.cfg.models.clone(),
            metrics: self.evaluate()?,
            diagnostics,
            dm: self.dm()?,
            provenance: Provenance {
                seed: self.cfg.seed,
                config_hash: self.hash.clone(),
                started: started.unwrap_or_else(now_iso),
                finished: now_iso(),
            },
        })
    }

    /// Ingest through prediction for one commodity.
    pub fn process(&self, commodity: &str) -> Result<(), PipelineError> {
        self.diagnose(commodity)?;
        for &kind in &self.cfg.models {
            self.train(commodity, kind)?;
            self.predict(commodity, kind)?;
        }
        Ok(())
    }
}

/// Runs every stage and writes the report tables. Commodities run in
/// parallel on at most `jobs` threads.
pub fn run_pipeline(cfg: RunConfig, jobs: usize) -> Result<BenchmarkReport, PipelineError> {
    Run::new(cfg)?.execute(jobs)
}

impl Run {
    /// [`run_pipeline`] on an existing run.
    pub fn execute(&self, jobs: usize) -> Result<BenchmarkReport, PipelineError> {
        let started = now_iso();
        self.for_each_commodity(jobs, |c| self.ingest(c).map(|_| ()))?;
        self.correlate()?;
        self.for_each_commodity(jobs, |c| self.process(c))?;
        let report = self.report(Some(started))?;
        emit_tables(&report, self.layout())?;
        Ok(report)
    }
}
