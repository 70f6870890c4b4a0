use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use super::DiagnosticsError;

const MIN_LEN: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regression {
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdfResult {
    pub statistic: f64,
    pub p_value: f64,
    pub lags_used: usize,
    pub nobs: usize,
    pub regression: Regression,
}

/// `floor(12 * (n / 100)^(1/4))`.
pub fn max_lag(n: usize) -> usize {
    (12.0 * (n as f64 / 100.0).powf(0.25)).floor() as usize
}

// MacKinnon (1994) response surface, constant-only regression, one
// integrated variable. Values as tabulated in statsmodels `adfvalues`.
const TAU_MAX: f64 = 2.74;
const TAU_MIN: f64 = -18.83;
const TAU_STAR: f64 = -1.61;
const TAU_SMALLP: [f64; 3] = [2.1659, 1.4412, 0.038269];
const TAU_LARGEP: [f64; 4] = [1.7339, 0.93202, -0.12745, -0.010368];

/// Approximate p-value of a constant-only Dickey-Fuller statistic.
pub fn mackinnon_p(stat: f64) -> f64 {
    if stat > TAU_MAX {
        return 1.0;
    }
    if stat < TAU_MIN {
        return 0.0;
    }
    let coef: &[f64] = if stat <= TAU_STAR { &TAU_SMALLP } else { &TAU_LARGEP };
    let z = coef.iter().rev().fold(0.0, |acc, c| acc * stat + c);
    Normal::standard().cdf(z)
}

struct OlsFit {
    coef: DVector<f64>,
    ssr: f64,
    /// Diagonal of `(X'X)^-1`.
    xtx_inv_diag: Vec<f64>,
}

fn ols(x: DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit, DiagnosticsError> {
    let k = x.ncols();
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..k).any(|i| r[(i, i)].abs() <= 1e-12 * scale.max(1e-300)) {
        return Err(DiagnosticsError::Singular);
    }
    let qty = qr.q().transpose() * y;
    let coef = r.solve_upper_triangular(&qty).ok_or(DiagnosticsError::Singular)?;
    let resid = y - &x * &coef;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or(DiagnosticsError::Singular)?;
    let xtx_inv_diag = (0..k).map(|i| r_inv.row(i).iter().map(|v| v * v).sum()).collect();
    Ok(OlsFit {
        coef,
        ssr: resid.norm_squared(),
        xtx_inv_diag,
    })
}

/// Design for `lags` lagged differences over rows `t = start..nd` of the
/// differenced series: columns are constant, level lag, then the lagged
/// differences.
fn design(x: &[f64], dx: &[f64], start: usize, lags: usize) -> (DMatrix<f64>, DVector<f64>) {
    let rows = dx.len() - start;
    let cols = 2 + lags;
    let m = DMatrix::from_fn(rows, cols, |r, c| {
        let t = start + r;
        match c {
            0 => 1.0,
            1 => x[t],
            j => dx[t - (j - 1)],
        }
    });
    let y = DVector::from_iterator(rows, dx[start..].iter().copied());
    (m, y)
}

fn aic(ssr: f64, nobs: usize, k: usize) -> f64 {
    let n = nobs as f64;
    let llf = -n / 2.0 * ((2.0 * std::f64::consts::PI).ln() + (ssr / n).ln() + 1.0);
    -2.0 * llf + 2.0 * k as f64
}

/// Augmented Dickey-Fuller test with a constant and the lag order chosen by
/// AIC on a common estimation sample.
pub fn adf_test(values: &[f64]) -> Result<AdfResult, DiagnosticsError> {
    let n = values.len();
    if n < MIN_LEN {
        return Err(DiagnosticsError::TooShort { n, min: MIN_LEN });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DiagnosticsError::NonFinite);
    }
    if values.iter().all(|v| *v == values[0]) {
        return Err(DiagnosticsError::Constant);
    }
    let dx: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    let maxlag = max_lag(n).min(n / 2 - 2);

    let mut best = (f64::INFINITY, 0);
    for lags in 0..=maxlag {
        let (xm, y) = design(values, &dx, maxlag, lags);
        let nobs = y.len();
        if let Ok(fit) = ols(xm, &y) {
            let a = aic(fit.ssr, nobs, lags + 2);
            if a < best.0 {
                best = (a, lags);
            }
        }
    }
    if best.0 == f64::INFINITY {
        return Err(DiagnosticsError::Singular);
    }
    let lags = best.1;
    let (xm, y) = design(values, &dx, lags, lags);
    let nobs = y.len();
    let k = xm.ncols();
    let fit = ols(xm, &y)?;
    let sigma2 = fit.ssr / (nobs - k) as f64;
    let statistic = fit.coef[1] / (sigma2 * fit.xtx_inv_diag[1]).sqrt();
    if !statistic.is_finite() {
        return Err(DiagnosticsError::Singular);
    }
    Ok(AdfResult {
        statistic,
        p_value: mackinnon_p(statistic),
        lags_used: lags,
        nobs,
        regression: Regression::Constant,
    })
}
