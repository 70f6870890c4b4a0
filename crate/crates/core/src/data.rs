//! Daily price series: ingestion, range validation, gap repair and
//! cross-commodity correlation.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};

use chrono::{Days, NaiveDate};
use thiserror::Error;

/// Default validity band, in currency per kg.
pub const DEFAULT_LOW: f64 = 0.1;
pub const DEFAULT_HIGH: f64 = 500.0;

const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("input is empty")]
    Empty,
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("{} unparseable row(s): {}", .0.len(), format_rows(.0))]
    Rows(Vec<RowError>),
    #[error("dates are not strictly increasing at {0}")]
    Unordered(NaiveDate),
    #[error("cannot fill a gap before the first observation ({first}); requested start {start}")]
    LeadingGap { start: NaiveDate, first: NaiveDate },
    #[error("series lengths differ: {0:?}")]
    LengthMismatch(Vec<usize>),
    #[error("series `{0}` has zero variance")]
    ZeroVariance(String),
    #[error("csv: {0}")]
    Csv(String),
}

fn format_rows(rows: &[RowError]) -> String {
    rows.iter()
        .take(5)
        .map(|r| r.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// A single rejected input row. `row` is the 1-based line number, header included.
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub row: usize,
    pub kind: RowErrorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowErrorKind {
    MalformedDate(String),
    NonNumeric { column: String, value: String },
    DuplicateDate(NaiveDate),
    FieldCount,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            RowErrorKind::MalformedDate(v) => write!(f, "row {}: malformed date `{v}`", self.row),
            RowErrorKind::NonNumeric { column, value } => {
                write!(f, "row {}: non-numeric {column} `{value}`", self.row)
            }
            RowErrorKind::DuplicateDate(d) => write!(f, "row {}: duplicate date {d}", self.row),
            RowErrorKind::FieldCount => write!(f, "row {}: wrong number of fields", self.row),
        }
    }
}

impl From<csv::Error> for DataError {
    fn from(e: csv::Error) -> Self {
        DataError::Csv(e.to_string())
    }
}

/// One day of prices. `mid_price` is always `(min_price + max_price) / 2`;
/// mid-only inputs store the mid in all three fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriceRecord {
    pub date: NaiveDate,
    pub min_price: f64,
    pub max_price: f64,
    pub mid_price: f64,
}

impl PriceRecord {
    pub fn from_range(date: NaiveDate, min_price: f64, max_price: f64) -> Self {
        Self {
            date,
            min_price,
            max_price,
            mid_price: compute_mid(min_price, max_price),
        }
    }

    pub fn from_mid(date: NaiveDate, mid: f64) -> Self {
        Self {
            date,
            min_price: mid,
            max_price: mid,
            mid_price: mid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AnomalyKind {
    OutOfRange,
    ZeroPrice,
    GapFilled,
}

impl AnomalyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::OutOfRange => "out-of-range",
            AnomalyKind::ZeroPrice => "zero-price",
            AnomalyKind::GapFilled => "gap-filled",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnomalyFlag {
    pub date: NaiveDate,
    pub kind: AnomalyKind,
    pub raw_value: f64,
}

/// Date-ascending daily records for one commodity.
#[derive(Clone, Debug, PartialEq)]
pub struct PriceSeries {
    commodity: String,
    records: Vec<PriceRecord>,
    anomalies: Vec<AnomalyFlag>,
}

impl PriceSeries {
    /// Builds a series, rejecting non-increasing dates.
    pub fn new(commodity: impl Into<String>, records: Vec<PriceRecord>) -> Result<Self, DataError> {
        if let Some(w) = records.windows(2).find(|w| w[1].date <= w[0].date) {
            return Err(DataError::Unordered(w[1].date));
        }
        Ok(Self {
            commodity: commodity.into(),
            records,
            anomalies: Vec::new(),
        })
    }

    pub fn commodity(&self) -> &str {
        &self.commodity
    }

    pub fn records(&self) -> &[PriceRecord] {
        &self.records
    }

    pub fn anomalies(&self) -> &[AnomalyFlag] {
        &self.anomalies
    }

    /// Attaches validation flags; record values are left untouched.
    pub fn with_anomalies(mut self, flags: impl IntoIterator<Item = AnomalyFlag>) -> Self {
        self.anomalies.extend(flags);
        self.anomalies.sort_by_key(|f| f.date);
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn mids(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mid_price).collect()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.records.iter().map(|r| r.date).collect()
    }

    pub fn first_date(&self) -> Option<NaiveDate> {
        self.records.first().map(|r| r.date)
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.records.last().map(|r| r.date)
    }

    /// True when consecutive dates differ by exactly one day.
    pub fn is_continuous(&self) -> bool {
        self.records
            .windows(2)
            .all(|w| w[0].date.checked_add_days(Days::new(1)) == Some(w[1].date))
    }
}

/// Column mapping for delimiter-separated input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ColumnSchema {
    Range {
        date: String,
        min: String,
        max: String,
    },
    Mid {
        date: String,
        mid: String,
    },
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema::Range {
            date: "date".into(),
            min: "min_price".into(),
            max: "max_price".into(),
        }
    }
}

impl ColumnSchema {
    /// Picks a schema from common header spellings: a `mid`/`mid_price`
    /// column wins, otherwise `min`/`max` (with or without `_price`).
    pub fn detect(header: &str) -> Result<Self, DataError> {
        let cols: Vec<String> = header
            .split(',')
            .map(|c| c.trim().trim_start_matches('\u{feff}').to_ascii_lowercase())
            .collect();
        let find = |names: &[&str]| {
            names
                .iter()
                .find(|n| cols.iter().any(|c| c == *n))
                .map(|n| n.to_string())
        };
        let date = find(&["date"]).ok_or_else(|| DataError::MissingColumn("date".into()))?;
        if let Some(mid) = find(&["mid_price", "mid"]) {
            return Ok(ColumnSchema::Mid { date, mid });
        }
        let min = find(&["min_price", "min"]).ok_or_else(|| DataError::MissingColumn("min".into()))?;
        let max = find(&["max_price", "max"]).ok_or_else(|| DataError::MissingColumn("max".into()))?;
        Ok(ColumnSchema::Range { date, min, max })
    }
}

/// Arithmetic mean of the day's bounds.
pub fn compute_mid(min_price: f64, max_price: f64) -> f64 {
    (min_price + max_price) / 2.0
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    let b = s.as_bytes();
    if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
        return None;
    }
    NaiveDate::parse_from_str(s, DATE_FORMAT).ok()
}

/// Parses comma-separated text with a header row into a date-sorted series.
///
/// Every bad row is collected and reported together with its line number.
pub fn parse_series(
    input: impl Read,
    commodity: &str,
    schema: &ColumnSchema,
) -> Result<PriceSeries, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim_start_matches('\u{feff}').to_ascii_lowercase())
        .collect();
    if headers.iter().all(|h| h.is_empty()) {
        return Err(DataError::Empty);
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == &name.to_ascii_lowercase())
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let (date_col, value_cols): (usize, Vec<(String, usize)>) = match schema {
        ColumnSchema::Range { date, min, max } => {
            (col(date)?, vec![(min.clone(), col(min)?), (max.clone(), col(max)?)])
        }
        ColumnSchema::Mid { date, mid } => (col(date)?, vec![(mid.clone(), col(mid)?)]),
    };

    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row?;
        if row.iter().all(|f| f.is_empty()) {
            continue;
        }
        let Some(date_field) = row.get(date_col) else {
            errors.push(RowError {
                row: line,
                kind: RowErrorKind::FieldCount,
            });
            continue;
        };
        let Some(date) = parse_date(date_field) else {
            errors.push(RowError {
                row: line,
                kind: RowErrorKind::MalformedDate(date_field.to_string()),
            });
            continue;
        };
        let mut values = Vec::with_capacity(value_cols.len());
        for (name, idx) in &value_cols {
            let raw = row.get(*idx).unwrap_or("");
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    errors.push(RowError {
                        row: line,
                        kind: RowErrorKind::NonNumeric {
                            column: name.clone(),
                            value: raw.to_string(),
                        },
                    });
                }
            }
        }
        if values.len() != value_cols.len() {
            continue;
        }
        if !seen.insert(date) {
            errors.push(RowError {
                row: line,
                kind: RowErrorKind::DuplicateDate(date),
            });
            continue;
        }
        records.push(match values.as_slice() {
            [lo, hi] => PriceRecord::from_range(date, *lo, *hi),
            [mid] => PriceRecord::from_mid(date, *mid),
            _ => unreachable!("schema yields one or two value columns"),
        });
    }
    if !errors.is_empty() {
        return Err(DataError::Rows(errors));
    }
    if records.is_empty() {
        return Err(DataError::Empty);
    }
    records.sort_by_key(|r| r.date);
    PriceSeries::new(commodity, records)
}

/// Flags records whose min, max or mid lies outside `[low, high]`. Exact zeros
/// are reported as `zero-price`; the series itself is not modified.
pub fn validate(series: &PriceSeries, low: f64, high: f64) -> Vec<AnomalyFlag> {
    let mut flags = Vec::new();
    for r in series.records() {
        let values = [r.min_price, r.max_price, r.mid_price];
        if let Some(z) = values.iter().find(|v| **v == 0.0) {
            flags.push(AnomalyFlag {
                date: r.date,
                kind: AnomalyKind::ZeroPrice,
                raw_value: *z,
            });
        } else if let Some(v) = values.iter().find(|v| **v < low || **v > high) {
            flags.push(AnomalyFlag {
                date: r.date,
                kind: AnomalyKind::OutOfRange,
                raw_value: *v,
            });
        }
    }
    flags
}

/// Fills every missing calendar day between the first and last record with the
/// previous day's values, flagging each inserted day as `gap-filled`.
pub fn forward_fill(series: &PriceSeries) -> Result<PriceSeries, DataError> {
    let (first, last) = match (series.first_date(), series.last_date()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(DataError::Empty),
    };
    forward_fill_between(series, first, last)
}

/// Like [`forward_fill`] over an explicit calendar `[start, end]`. Days after
/// the last record are filled from it; days before the first record cannot be.
pub fn forward_fill_between(
    series: &PriceSeries,
    start: NaiveDate,
    end: NaiveDate,
) -> Result<PriceSeries, DataError> {
    let first = series.first_date().ok_or(DataError::Empty)?;
    if start < first {
        return Err(DataError::LeadingGap { start, first });
    }
    let mut out = Vec::new();
    let mut flags: Vec<AnomalyFlag> = series.anomalies().to_vec();
    let mut it = series.records().iter().peekable();
    let mut last: Option<PriceRecord> = None;
    let mut day = first;
    while day <= end {
        if let Some(r) = it.peek().filter(|r| r.date == day) {
            last = Some(**r);
            it.next();
            if day >= start {
                out.push(*last.as_ref().unwrap());
            }
        } else if let Some(prev) = last {
            if day >= start {
                out.push(PriceRecord { date: day, ..prev });
                flags.push(AnomalyFlag {
                    date: day,
                    kind: AnomalyKind::GapFilled,
                    raw_value: prev.mid_price,
                });
            }
        }
        day = day
            .checked_add_days(Days::new(1))
            .expect("calendar date overflow");
    }
    flags.retain(|f| f.date >= start && f.date <= end);
    Ok(PriceSeries::new(series.commodity(), out)?.with_anomalies(flags))
}

/// Replaces zero-price records by linear interpolation between the nearest
/// non-zero neighbours. Used only for sensitivity runs; flags are kept.
pub fn interpolate_zeros(series: &PriceSeries) -> PriceSeries {
    let recs = series.records();
    let n = recs.len();
    let is_zero = |r: &PriceRecord| r.mid_price == 0.0;
    let mut out = recs.to_vec();
    let mut i = 0;
    while i < n {
        if !is_zero(&recs[i]) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < n && is_zero(&recs[j]) {
            j += 1;
        }
        let left = i.checked_sub(1).map(|k| recs[k]);
        let right = (j < n).then(|| recs[j]);
        for (k, rec) in out.iter_mut().enumerate().take(j).skip(i) {
            let lerp = |a: f64, b: f64| {
                let w = (k + 1 - i) as f64 / (j + 1 - i) as f64;
                a + (b - a) * w
            };
            let (lo, hi) = match (left, right) {
                (Some(l), Some(r)) => (lerp(l.min_price, r.min_price), lerp(l.max_price, r.max_price)),
                (Some(l), None) => (l.min_price, l.max_price),
                (None, Some(r)) => (r.min_price, r.max_price),
                (None, None) => (0.0, 0.0),
            };
            *rec = PriceRecord::from_range(rec.date, lo, hi);
        }
        i = j;
    }
    PriceSeries {
        commodity: series.commodity.clone(),
        records: out,
        anomalies: series.anomalies.clone(),
    }
}

/// Pearson correlation matrix of equally long series, computed on levels.
pub fn pearson_matrix(series: &[(&str, &[f64])]) -> Result<Vec<Vec<f64>>, DataError> {
    let lens: Vec<usize> = series.iter().map(|(_, s)| s.len()).collect();
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(DataError::LengthMismatch(lens));
    }
    if lens.first().copied().unwrap_or(0) < 2 {
        return Err(DataError::Empty);
    }
    let centered: Vec<Vec<f64>> = series
        .iter()
        .map(|(name, s)| {
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let c: Vec<f64> = s.iter().map(|v| v - mean).collect();
            let ss: f64 = c.iter().map(|v| v * v).sum();
            if ss == 0.0 {
                Err(DataError::ZeroVariance(name.to_string()))
            } else {
                let norm = ss.sqrt();
                Ok(c.into_iter().map(|v| v / norm).collect())
            }
        })
        .collect::<Result<_, _>>()?;
    let k = centered.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        m[i][i] = 1.0;
        for j in (i + 1)..k {
            let r: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            let r = r.clamp(-1.0, 1.0);
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    Ok(m)
}

pub fn write_anomalies(w: impl Write, flags: &[AnomalyFlag]) -> Result<(), DataError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["date", "kind", "raw_value"])?;
    for f in flags {
        out.write_record([
            f.date.format(DATE_FORMAT).to_string(),
            f.kind.to_string(),
            f.raw_value.to_string(),
        ])?;
    }
    out.flush().map_err(|e| DataError::Csv(e.to_string()))
}

pub fn write_correlation(w: impl Write, names: &[&str], matrix: &[Vec<f64>]) -> Result<(), DataError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["commodity".to_string()];
    header.extend(names.iter().map(|s| s.to_string()));
    out.write_record(&header)?;
    for (name, row) in names.iter().zip(matrix) {
        let mut rec = vec![name.to_string()];
        rec.extend(row.iter().map(|v| format!("{v:.6}")));
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| DataError::Csv(e.to_string()))
}

/// Writes `date,min_price,max_price,mid_price`; readable by [`parse_series`]
/// with the default schema.
pub fn write_series(w: impl Write, series: &PriceSeries) -> Result<(), DataError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["date", "min_price", "max_price", "mid_price"])?;
    for r in series.records() {
        out.write_record([
            r.date.format(DATE_FORMAT).to_string(),
            r.min_price.to_string(),
            r.max_price.to_string(),
            r.mid_price.to_string(),
        ])?;
    }
    out.flush().map_err(|e| DataError::Csv(e.to_string()))
}
