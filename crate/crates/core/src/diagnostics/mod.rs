//! Stationarity testing and seasonal-trend decomposition.

mod adf;
mod stl;

pub use adf::{adf_test, mackinnon_p, max_lag, AdfResult, Regression};
pub use stl::{rs_ratio, seasonal_strength, stl_decompose, stl_decompose_with, StlConfig, StlResult};

use thiserror::Error;

/// Default STL period in days (annual cycle).
pub const DEFAULT_PERIOD: usize = 365;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("series of length {n} is shorter than the minimum {min}")]
    TooShort { n: usize, min: usize },
    #[error("series is constant")]
    Constant,
    #[error("series contains non-finite values")]
    NonFinite,
    #[error("invalid STL parameter: {0}")]
    Config(String),
    #[error("seasonal component has zero variance")]
    ZeroSeasonalVariance,
    #[error("regression design is singular")]
    Singular,
}

/// Population standard deviation.
pub(crate) fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// One row per commodity of the `diagnose` output.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRow {
    pub commodity: String,
    pub adf: AdfResult,
    pub rs_ratio: f64,
    pub period: usize,
}

impl DiagnosticsRow {
    pub fn stationary(&self) -> bool {
        self.adf.p_value < 0.05
    }
}

/// ADF and STL R/S for one series.
pub fn diagnose(commodity: &str, values: &[f64], period: usize) -> Result<DiagnosticsRow, DiagnosticsError> {
    let adf = adf_test(values)?;
    let stl = stl_decompose(values, period)?;
    Ok(DiagnosticsRow {
        commodity: commodity.to_string(),
        adf,
        rs_ratio: rs_ratio(&stl)?,
        period,
    })
}
