use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::diagnostics::DiagnosticsRow;
use crate::evaluation::{DmResult, MetricReport, OVERLAP_CAVEAT};
use crate::models::ModelKind;

use super::artifacts::{write_atomic, Layout};
use super::{ErrorKind, PipelineError, Stage};

pub(crate) fn now_iso() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    chrono::DateTime::from_timestamp(secs as i64, 0)
        .map(|t| t.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub commodity: String,
    pub model: ModelKind,
    pub report: MetricReport,
}

#[derive(Serialize)]
struct MetricRecord<'a> {
    commodity: &'a str,
    model: &'a str,
    mae: f64,
    rmse: f64,
    mape: f64,
    n: usize,
    skipped_zero_targets: usize,
}

/// Descriptive statistics and stationarity diagnostics for one series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub commodity: String,
    pub n: usize,
    pub adf_p: f64,
    pub adf_stat: f64,
    pub adf_lags: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
    pub stationary: bool,
    pub rs_ratio: f64,
    pub period: usize,
}

impl DiagnosticsSummary {
    pub fn new(row: &DiagnosticsRow, values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
        Self {
            commodity: row.commodity.clone(),
            n,
            adf_p: row.adf.p_value,
            adf_stat: row.adf.statistic,
            adf_lags: row.adf.lags_used,
            min: values.iter().cloned().fold(f64::INFINITY, f64::min),
            max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            mean,
            std: var.sqrt(),
            stationary: row.stationary(),
            rs_ratio: row.rs_ratio,
            period: row.period,
        }
    }

    pub(crate) fn to_csv(rows: &[Self]) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| e.into_error().into())
    }

    pub(crate) fn from_csv(body: &[u8]) -> Result<Vec<Self>, csv::Error> {
        csv::Reader::from_reader(body).deserialize().collect()
    }
}

/// One DM comparison; `result` is `None` when the two forecasts are identical.
#[derive(Clone, Debug, PartialEq)]
pub struct DmRow {
    pub commodity: String,
    pub comparison: String,
    pub reference: String,
    pub result: Option<DmResult>,
}

impl DmRow {
    pub fn direction(&self) -> String {
        match &self.result {
            None => "indistinguishable".into(),
            Some(r) => match r.direction {
                crate::evaluation::Direction::ComparisonBetter => format!("{} better", self.comparison),
                crate::evaluation::Direction::ReferenceBetter => format!("{} better", self.reference),
                crate::evaluation::Direction::Tie => "tie".into(),
            },
        }
    }

    pub fn significance(&self) -> &'static str {
        match self.result.map(|r| r.p_value) {
            Some(p) if p < 0.01 => "***",
            Some(p) if p < 0.05 => "**",
            Some(p) if p < 0.1 => "*",
            _ => "n.s.",
        }
    }
}

#[derive(Serialize)]
struct DmRecord<'a> {
    commodity: &'a str,
    comparison: &'a str,
    reference: &'a str,
    dm_stat: Option<f64>,
    p_value: Option<f64>,
    direction: String,
    significance: &'a str,
    fallback: bool,
    n: Option<usize>,
    h: Option<usize>,
    nw_lag: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub started: String,
    pub finished: String,
}

/// Everything emitted by a run.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub commodities: Vec<String>,
    pub models: Vec<ModelKind>,
    pub metrics: Vec<MetricRow>,
    pub diagnostics: Vec<DiagnosticsSummary>,
    pub dm: Vec<DmRow>,
    pub provenance: Provenance,
}

impl BenchmarkReport {
    /// Errors unless every selected (commodity, model) pair has exactly one
    /// metric row.
    pub fn check_complete(&self) -> Result<(), PipelineError> {
        let incomplete = |m: String| PipelineError::new(Stage::Report, ErrorKind::Config, format!("incomplete report: {m}"));
        if self.models.is_empty() || self.commodities.is_empty() {
            return Err(incomplete("no models or commodities selected".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &self.metrics {
            if !seen.insert((r.commodity.as_str(), r.model)) {
                return Err(incomplete(format!("duplicate metric row {}/{}", r.commodity, r.model)));
            }
        }
        for c in &self.commodities {
            for m in &self.models {
                if !seen.contains(&(c.as_str(), *m)) {
                    return Err(incomplete(format!("missing metric row {c}/{m}")));
                }
            }
        }
        if seen.len() != self.commodities.len() * self.models.len() {
            return Err(incomplete("metric rows for unselected pairs".into()));
        }
        Ok(())
    }

    /// Models with the lowest value of `metric` within one commodity,
    /// optionally among neural models only.
    pub fn best(&self, commodity: &str, metric: fn(&MetricReport) -> f64, deep_only: bool) -> Vec<ModelKind> {
        let rows: Vec<_> = self
            .metrics
            .iter()
            .filter(|r| r.commodity == commodity && (!deep_only || r.model.is_neural()))
            .filter(|r| !metric(&r.report).is_nan())
            .collect();
        let min = rows.iter().map(|r| metric(&r.report)).fold(f64::INFINITY, f64::min);
        rows.iter().filter(|r| metric(&r.report) == min).map(|r| r.model).collect()
    }
}

fn csv_err(e: csv::Error) -> PipelineError {
    PipelineError::csv(Stage::Report, e)
}

fn metrics_csv(rows: &[MetricRow]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(MetricRecord {
            commodity: &r.commodity,
            model: r.model.as_str(),
            mae: r.report.mae,
            rmse: r.report.rmse,
            mape: r.report.mape,
            n: r.report.n,
            skipped_zero_targets: r.report.skipped_zero_targets,
        })?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

fn dm_csv(rows: &[DmRow]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        let res = r.result.as_ref();
        w.serialize(DmRecord {
            commodity: &r.commodity,
            comparison: &r.comparison,
            reference: &r.reference,
            dm_stat: res.map(|x| x.statistic),
            p_value: res.map(|x| x.p_value),
            direction: r.direction(),
            significance: r.significance(),
            fallback: res.is_some_and(|x| x.used_fallback),
            n: res.map(|x| x.n),
            h: res.map(|x| x.h),
            nw_lag: res.map(|x| x.nw_lag),
        })?;
    }
    if rows.is_empty() {
        return Ok(b"commodity,comparison,reference,dm_stat,p_value,direction,significance,fallback,n,h,nw_lag\n".to_vec());
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

/// The DM table as CSV text, without the hash line.
pub fn dm_table(rows: &[DmRow]) -> Result<String, PipelineError> {
    let bytes = dm_csv(rows).map_err(csv_err)?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Writes the metrics table alone.
pub fn emit_metrics(rows: &[MetricRow], layout: &Layout, hash: &str) -> Result<PathBuf, PipelineError> {
    if rows.is_empty() {
        return Err(PipelineError::new(Stage::Evaluate, ErrorKind::Config, "no metric rows to write"));
    }
    let path = layout.metrics();
    write_atomic(Stage::Evaluate, &path, hash, &metrics_csv(rows).map_err(csv_err)?)?;
    Ok(path)
}

/// Writes the diagnostics table alone.
pub fn emit_diagnostics(rows: &[DiagnosticsSummary], layout: &Layout, hash: &str) -> Result<PathBuf, PipelineError> {
    let path = layout.diagnostics();
    let body = DiagnosticsSummary::to_csv(rows).map_err(|e| PipelineError::csv(Stage::Diagnose, e))?;
    write_atomic(Stage::Diagnose, &path, hash, &body)?;
    Ok(path)
}

/// Writes the DM table alone.
pub fn emit_dm(rows: &[DmRow], layout: &Layout, hash: &str) -> Result<PathBuf, PipelineError> {
    let path = layout.dm();
    write_atomic(Stage::Dm, &path, hash, &dm_csv(rows).map_err(csv_err)?)?;
    Ok(path)
}

fn fmt_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001".into()
    } else {
        format!("{p:.3}")
    }
}

/// Plain-text tables with best-model flags.
pub fn summary_text(report: &BenchmarkReport) -> String {
    type Metric = fn(&MetricReport) -> f64;
    let metrics: [(&str, Metric); 3] = [("MAE", |m| m.mae), ("RMSE", |m| m.rmse), ("MAPE(%)", |m| m.mape)];
    let mut s = String::new();
    let _ = writeln!(s, "Forecast accuracy on the test range (original scale)");
    let _ = writeln!(s, "* best overall per metric, + best deep learning model per metric");
    let _ = writeln!(s, "best = lowest MAE per commodity");
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<16} {:<16} {:>12} {:>12} {:>12} {:>6}  best", "commodity", "model", "MAE", "RMSE", "MAPE(%)", "n");
    for c in &report.commodities {
        let winners: Vec<(Vec<ModelKind>, Vec<ModelKind>)> = metrics
            .iter()
            .map(|(_, f)| (report.best(c, *f, false), report.best(c, *f, true)))
            .collect();
        for row in report.metrics.iter().filter(|r| &r.commodity == c) {
            let cells: Vec<String> = metrics
                .iter()
                .zip(&winners)
                .map(|((_, f), (all, deep))| {
                    let mark = if all.contains(&row.model) {
                        "*"
                    } else if deep.contains(&row.model) {
                        "+"
                    } else {
                        " "
                    };
                    format!("{:.4}{mark}", f(&row.report))
                })
                .collect();
            let best = if winners[0].0.contains(&row.model) { "best" } else { "" };
            let _ = writeln!(
                s,
                "{:<16} {:<16} {:>12} {:>12} {:>12} {:>6}  {best}",
                c, row.model, cells[0], cells[1], cells[2], row.report.n
            );
        }
    }
    if !report.diagnostics.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "Series diagnostics");
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>9} {:>9} {:>9} {:>9} {:>11} {:>6}",
            "commodity", "ADF p", "min", "max", "mean", "std", "stationary", "R/S"
        );
        for d in &report.diagnostics {
            let _ = writeln!(
                s,
                "{:<16} {:>8} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>11} {:>6.2}",
                d.commodity,
                fmt_p(d.adf_p),
                d.min,
                d.max,
                d.mean,
                d.std,
                if d.stationary { "yes" } else { "no" },
                d.rs_ratio
            );
        }
    }
    if !report.dm.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "Diebold-Mariano tests (HLN corrected, squared loss)");
        let _ = writeln!(s, "positive statistic = comparison model has lower loss");
        let _ = writeln!(
            s,
            "{:<16} {:<16} {:<16} {:>14} {:>8} {:<24} sig",
            "commodity", "comparison", "reference", "DM", "p", "direction"
        );
        for r in &report.dm {
            let (stat, p) = match &r.result {
                Some(x) => (
                    format!("{:.3}{}", x.statistic, if x.used_fallback { "\u{2020}" } else { " " }),
                    fmt_p(x.p_value),
                ),
                None => ("-".into(), "-".into()),
            };
            let _ = writeln!(
                s,
                "{:<16} {:<16} {:<16} {:>14} {:>8} {:<24} {}",
                r.commodity,
                r.comparison,
                r.reference,
                stat,
                p,
                r.direction(),
                r.significance()
            );
        }
        let _ = writeln!(s, "\u{2020} Newey-West variance was not positive; the unconditional variance was used.");
        let _ = writeln!(s, "Note: {OVERLAP_CAVEAT}");
    }
    s
}

fn provenance(p: &Provenance) -> String {
    format!(
        "seed = {}\nconfig_hash = {}\nstarted = {}\nfinished = {}\nversion = {}\n",
        p.seed,
        p.config_hash,
        p.started,
        p.finished,
        env!("CARGO_PKG_VERSION")
    )
}

/// Writes the metrics, diagnostics and DM tables, a plain-text summary and
/// the provenance block. Returns the written paths.
pub fn emit_tables(report: &BenchmarkReport, layout: &Layout) -> Result<Vec<PathBuf>, PipelineError> {
    report.check_complete()?;
    let hash = &report.provenance.config_hash;
    let mut out = vec![emit_metrics(&report.metrics, layout, hash)?];
    out.push(emit_diagnostics(&report.diagnostics, layout, hash)?);
    out.push(emit_dm(&report.dm, layout, hash)?);
    write_atomic(Stage::Report, &layout.summary(), hash, summary_text(report).as_bytes())?;
    out.push(layout.summary());
    write_atomic(Stage::Report, &layout.provenance(), hash, provenance(&report.provenance).as_bytes())?;
    out.push(layout.provenance());
    Ok(out)
}
