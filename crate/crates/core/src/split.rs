//! Temporal train/validation/test splitting, train-only MinMax scaling and
//! sliding-window construction.

use std::io::{Read, Write};
use std::ops::Range;

use thiserror::Error;

/// Default lookback and forecast horizon.
pub const SEQ_LEN: usize = 90;
pub const HORIZON: usize = 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplitError {
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    Fractions([f64; 3]),
    #[error("series of length {n} is too short; need at least {min}")]
    TooShort { n: usize, min: usize },
    #[error("cannot fit a scaler on an empty segment")]
    EmptySegment,
    #[error("cannot fit a scaler on a constant segment (value {0})")]
    ConstantSegment(f64),
    #[error("range {start}..{end} leaves fewer than {horizon} target steps after {history} steps of history")]
    RangeTooShort {
        start: usize,
        end: usize,
        horizon: usize,
        history: usize,
    },
    #[error("window {window} reaches index {reach}, beyond the allowed end {end}")]
    Leakage {
        window: usize,
        reach: usize,
        end: usize,
    },
    #[error("invalid window config: {0}")]
    Config(String),
    #[error("window file: {0}")]
    Io(String),
}

/// Contiguous, ordered, disjoint ranges covering `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemporalSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl TemporalSplit {
    pub fn len(&self) -> usize {
        self.test.end
    }

    pub fn is_empty(&self) -> bool {
        self.test.end == 0
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Splits `n` points without shuffling. Boundaries sit at
/// `floor(n * f1)` and `floor(n * (f1 + f2))`; the test split takes the rest.
pub fn temporal_split(n: usize, fractions: [f64; 3]) -> Result<TemporalSplit, SplitError> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f > 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(SplitError::Fractions(fractions));
    }
    let min = 1 + 1 + 1;
    if n < min {
        return Err(SplitError::TooShort { n, min });
    }
    // the small offset absorbs representation error in products like 10 * 0.9
    let boundary = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
    let train_end = boundary(fractions[0]).clamp(1, n - 2);
    let val_end = boundary(fractions[0] + fractions[1]).clamp(train_end + 1, n - 1);
    Ok(TemporalSplit {
        train: 0..train_end,
        val: train_end..val_end,
        test: val_end..n,
    })
}

/// MinMax scaler; `transform` maps the fitted range onto `[0, 1]` without clamping.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    observed_min: f64,
    observed_max: f64,
    fitted_on: Option<Range<usize>>,
}

impl Scaler {
    pub fn new(observed_min: f64, observed_max: f64) -> Result<Self, SplitError> {
        if !(observed_min < observed_max) {
            return Err(SplitError::ConstantSegment(observed_min));
        }
        Ok(Self {
            observed_min,
            observed_max,
            fitted_on: None,
        })
    }

    /// Fits on `values[split.train]` only and records that provenance.
    pub fn fit_on_train(values: &[f64], split: &TemporalSplit) -> Result<Self, SplitError> {
        let mut s = fit_scaler(&values[split.train.clone()])?;
        s.fitted_on = Some(split.train.clone());
        Ok(s)
    }

    pub fn observed_min(&self) -> f64 {
        self.observed_min
    }

    pub fn observed_max(&self) -> f64 {
        self.observed_max
    }

    pub fn fitted_on(&self) -> Option<&Range<usize>> {
        self.fitted_on.as_ref()
    }

    pub fn range(&self) -> f64 {
        self.observed_max - self.observed_min
    }

    pub fn transform(&self, x: f64) -> f64 {
        (x - self.observed_min) / self.range()
    }

    pub fn inverse(&self, y: f64) -> f64 {
        y * self.range() + self.observed_min
    }

    pub fn transform_all(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|x| self.transform(*x)).collect()
    }

    pub fn inverse_all(&self, ys: &[f64]) -> Vec<f64> {
        ys.iter().map(|y| self.inverse(*y)).collect()
    }
}

/// Records the min and max of a (training) segment.
pub fn fit_scaler(values: &[f64]) -> Result<Scaler, SplitError> {
    if values.is_empty() {
        return Err(SplitError::EmptySegment);
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Scaler::new(min, max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowConfig {
    pub seq_len: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            seq_len: SEQ_LEN,
            horizon: HORIZON,
            stride: 1,
        }
    }
}

/// (input, target) pairs stored flat. Window `i` reads
/// `series[origin_i .. origin_i + seq_len]` and predicts the next `horizon` values.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    seq_len: usize,
    horizon: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    origins: Vec<usize>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.horizon..(i + 1) * self.horizon]
    }

    /// Global series index of the first input element of window `i`.
    pub fn origin(&self, i: usize) -> usize {
        self.origins[i]
    }

    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    /// Global index of the first target element of window `i`.
    pub fn target_start(&self, i: usize) -> usize {
        self.origins[i] + self.seq_len
    }

    /// Errors if any window's target reaches past `end` (exclusive).
    pub fn check_within(&self, end: usize) -> Result<(), SplitError> {
        for (i, o) in self.origins.iter().enumerate() {
            let reach = o + self.seq_len + self.horizon;
            if reach > end {
                return Err(SplitError::Leakage {
                    window: i,
                    reach,
                    end,
                });
            }
        }
        Ok(())
    }

    /// Keeps the windows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> WindowSet {
        let mut out = WindowSet {
            seq_len: self.seq_len,
            horizon: self.horizon,
            inputs: Vec::with_capacity(indices.len() * self.seq_len),
            targets: Vec::with_capacity(indices.len() * self.horizon),
            origins: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            out.inputs.extend_from_slice(self.input(i));
            out.targets.extend_from_slice(self.target(i));
            out.origins.push(self.origins[i]);
        }
        out
    }

    /// Little-endian layout: `count, seq_len, horizon` as u64, then `count`
    /// origins as u64, then all inputs and all targets as f64.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), SplitError> {
        let io = |e: std::io::Error| SplitError::Io(e.to_string());
        for v in [self.len(), self.seq_len, self.horizon] {
            w.write_all(&(v as u64).to_le_bytes()).map_err(io)?;
        }
        for o in &self.origins {
            w.write_all(&(*o as u64).to_le_bytes()).map_err(io)?;
        }
        for v in self.inputs.iter().chain(&self.targets) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, SplitError> {
        let mut buf = [0u8; 8];
        let mut next = |r: &mut dyn Read| -> Result<[u8; 8], SplitError> {
            r.read_exact(&mut buf).map_err(|e| SplitError::Io(e.to_string()))?;
            Ok(buf)
        };
        let count = u64::from_le_bytes(next(&mut r)?) as usize;
        let seq_len = u64::from_le_bytes(next(&mut r)?) as usize;
        let horizon = u64::from_le_bytes(next(&mut r)?) as usize;
        let origins = (0..count)
            .map(|_| next(&mut r).map(|b| u64::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let inputs = (0..count * seq_len)
            .map(|_| next(&mut r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>, _>>()?;
        let targets = (0..count * horizon)
            .map(|_| next(&mut r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            seq_len,
            horizon,
            inputs,
            targets,
            origins,
        })
    }
}

/// Target-anchored windows whose targets lie inside `range`.
///
/// Target starts run from `max(range.start, seq_len)` in steps of `stride`;
/// input context may come from before `range` (earlier splits). The count is
/// `floor((usable_len - horizon) / stride) + 1`.
pub fn make_windows(
    series: &[f64],
    range: Range<usize>,
    cfg: WindowConfig,
) -> Result<WindowSet, SplitError> {
    if cfg.seq_len == 0 || cfg.horizon == 0 || cfg.stride == 0 {
        return Err(SplitError::Config(format!("{cfg:?}")));
    }
    if range.end > series.len() {
        return Err(SplitError::Config(format!(
            "range end {} beyond series length {}",
            range.end,
            series.len()
        )));
    }
    let first_target = range.start.max(cfg.seq_len);
    if range.end < first_target + cfg.horizon {
        return Err(SplitError::RangeTooShort {
            start: range.start,
            end: range.end,
            horizon: cfg.horizon,
            history: cfg.seq_len,
        });
    }
    let count = (range.end - first_target - cfg.horizon) / cfg.stride + 1;
    let mut ws = WindowSet {
        seq_len: cfg.seq_len,
        horizon: cfg.horizon,
        inputs: Vec::with_capacity(count * cfg.seq_len),
        targets: Vec::with_capacity(count * cfg.horizon),
        origins: Vec::with_capacity(count),
    };
    for w in 0..count {
        let t = first_target + w * cfg.stride;
        let origin = t - cfg.seq_len;
        ws.inputs.extend_from_slice(&series[origin..t]);
        ws.targets.extend_from_slice(&series[t..t + cfg.horizon]);
        ws.origins.push(origin);
    }
    Ok(ws)
}
