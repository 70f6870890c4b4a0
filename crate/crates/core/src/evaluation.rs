//! Point-accuracy metrics and the Diebold-Mariano test with the
//! Harvey-Leybourne-Newbold small-sample correction.

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

/// Footnote attached to every emitted DM report.
pub const OVERLAP_CAVEAT: &str = "Adjacent evaluation windows overlap, so the effective number of \
independent observations is closer to the number of windows than to the number of scored points; \
the HAC correction at lag h-1 does not fully remove inter-window dependence.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("series of length {n} is too short for lag {lag}")]
    TooShortForLag { n: usize, lag: usize },
    #[error("forecasts are indistinguishable: loss differential is identically zero")]
    Indistinguishable,
    #[error("invalid horizon {0}")]
    Horizon(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MapeMode {
    /// Terms with a zero target are left out of the average and counted.
    SkipZeros,
    /// Zero targets are replaced by this value in the denominator.
    Epsilon(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    pub n: usize,
    pub skipped_zero_targets: usize,
}

pub fn metrics(actual: &[f64], predicted: &[f64]) -> Result<MetricReport, EvalError> {
    metrics_with(actual, predicted, MapeMode::SkipZeros)
}

/// MAE, RMSE and MAPE over paired original-scale values. If every target is
/// zero under [`MapeMode::SkipZeros`] the MAPE is NaN.
pub fn metrics_with(actual: &[f64], predicted: &[f64], mode: MapeMode) -> Result<MetricReport, EvalError> {
    if actual.len() != predicted.len() {
        return Err(EvalError::LengthMismatch(actual.len(), predicted.len()));
    }
    if actual.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = actual.len();
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut pct_sum = 0.0;
    let mut pct_n = 0usize;
    let mut skipped = 0usize;
    for (y, yhat) in actual.iter().zip(predicted) {
        let e = y - yhat;
        abs_sum += e.abs();
        sq_sum += e * e;
        let denom = match mode {
            MapeMode::SkipZeros if *y == 0.0 => {
                skipped += 1;
                continue;
            }
            MapeMode::Epsilon(eps) if *y == 0.0 => eps,
            _ => *y,
        };
        pct_sum += (e / denom).abs();
        pct_n += 1;
    }
    let mape = if pct_n == 0 {
        f64::NAN
    } else {
        100.0 * pct_sum / pct_n as f64
    };
    Ok(MetricReport {
        mae: abs_sum / n as f64,
        rmse: (sq_sum / n as f64).sqrt(),
        mape,
        n,
        skipped_zero_targets: skipped,
    })
}

/// Squared-error loss differential `d_t = a_t^2 - b_t^2`.
pub fn loss_differential(err_a: &[f64], err_b: &[f64]) -> Result<Vec<f64>, EvalError> {
    if err_a.len() != err_b.len() {
        return Err(EvalError::LengthMismatch(err_a.len(), err_b.len()));
    }
    Ok(err_a.iter().zip(err_b).map(|(a, b)| a * a - b * b).collect())
}

/// Weighting of the lagged autocovariances in the long-run variance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum HacKernel {
    /// Unit weights up to the lag. Not guaranteed positive; a non-positive
    /// estimate triggers the unconditional-variance fallback in [`dm_test`].
    #[default]
    Truncated,
    /// Weights `1 - k / (lag + 1)`; always non-negative.
    Bartlett,
}

/// Autocovariance at lag `k` with the `1/n` normalisation.
fn autocov(d: &[f64], mean: f64, k: usize) -> f64 {
    let n = d.len();
    (k..n).map(|t| (d[t] - mean) * (d[t - k] - mean)).sum::<f64>() / n as f64
}

/// Estimated variance of the mean of `d`:
/// `(gamma_0 + 2 * sum_{k=1..lag} w_k gamma_k) / n`.
pub fn hac_variance(d: &[f64], lag: usize, kernel: HacKernel) -> Result<f64, EvalError> {
    let n = d.len();
    if n <= lag {
        return Err(EvalError::TooShortForLag { n, lag });
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let mut s = autocov(d, mean, 0);
    for k in 1..=lag {
        let w = match kernel {
            HacKernel::Truncated => 1.0,
            HacKernel::Bartlett => 1.0 - k as f64 / (lag + 1) as f64,
        };
        s += 2.0 * w * autocov(d, mean, k);
    }
    Ok(s / n as f64)
}

/// Long-run variance of the mean used by the DM test (truncated kernel).
pub fn newey_west_var(d: &[f64], lag: usize) -> Result<f64, EvalError> {
    hac_variance(d, lag, HacKernel::Truncated)
}

/// `sqrt((n + 1 - 2h + h(h-1)/n) / n)`.
pub fn hln_multiplier(n: usize, h: usize) -> f64 {
    let (n, h) = (n as f64, h as f64);
    ((n + 1.0 - 2.0 * h + h * (h - 1.0) / n) / n).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// The comparison model (first argument) has the lower mean loss.
    ComparisonBetter,
    ReferenceBetter,
    Tie,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::ComparisonBetter => "comparison_better",
            Direction::ReferenceBetter => "reference_better",
            Direction::Tie => "tie",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DmResult {
    /// HLN-corrected statistic; positive when the comparison model has lower loss.
    pub statistic: f64,
    pub p_value: f64,
    pub h: usize,
    pub n: usize,
    pub nw_lag: usize,
    pub used_fallback: bool,
    pub direction: Direction,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DmConfig {
    pub h: usize,
    pub lag: usize,
    pub kernel: HacKernel,
}

impl DmConfig {
    pub fn for_horizon(h: usize) -> Self {
        Self {
            h,
            lag: h.saturating_sub(1),
            kernel: HacKernel::Truncated,
        }
    }
}

/// DM test of comparison errors `err_a` against reference errors `err_b`
/// at horizon `h`, HAC lag `h - 1`.
pub fn dm_test(err_a: &[f64], err_b: &[f64], h: usize) -> Result<DmResult, EvalError> {
    dm_test_with(err_a, err_b, DmConfig::for_horizon(h))
}

pub fn dm_test_with(err_a: &[f64], err_b: &[f64], cfg: DmConfig) -> Result<DmResult, EvalError> {
    // reference loss minus comparison loss: positive mean favours A
    let d = loss_differential(err_b, err_a)?;
    dm_from_differential(&d, cfg)
}

/// DM test on a precomputed differential `d_t = loss_ref - loss_cmp`.
pub fn dm_from_differential(d: &[f64], cfg: DmConfig) -> Result<DmResult, EvalError> {
    if cfg.h == 0 {
        return Err(EvalError::Horizon(cfg.h));
    }
    let n = d.len();
    if n < 2 {
        return Err(EvalError::Empty);
    }
    if d.iter().all(|v| *v == 0.0) {
        return Err(EvalError::Indistinguishable);
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let hac = hac_variance(d, cfg.lag, cfg.kernel)?;
    let (var, used_fallback) = if hac > 0.0 {
        (hac, false)
    } else {
        (autocov(d, mean, 0) / n as f64, true)
    };
    let raw = if var > 0.0 {
        mean / var.sqrt()
    } else if mean == 0.0 {
        return Err(EvalError::Indistinguishable);
    } else {
        mean.signum() * f64::INFINITY
    };
    let statistic = raw * hln_multiplier(n, cfg.h);
    let p_value = if statistic.is_finite() {
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("n >= 2 gives positive dof");
        (2.0 * (1.0 - t.cdf(statistic.abs()))).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let direction = if mean > 0.0 {
        Direction::ComparisonBetter
    } else if mean < 0.0 {
        Direction::ReferenceBetter
    } else {
        Direction::Tie
    };
    Ok(DmResult {
        statistic,
        p_value,
        h: cfg.h,
        n,
        nw_lag: cfg.lag,
        used_fallback,
        direction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::rng::{standard_normal, stream, Stream};
    use proptest::prelude::*;

    #[test]
    fn perfect_forecast_scores_zero() {
        let y = [3.0, 4.0, 5.0];
        let m = metrics(&y, &y).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape, m.n), (0.0, 0.0, 0.0, 3));
    }

    #[test]
    fn symmetric_errors() {
        let m = metrics(&[100.0, 100.0], &[110.0, 90.0]).unwrap();
        assert_eq!(m.mae, 10.0);
        assert_eq!(m.rmse, 10.0);
        assert!((m.mape - 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_targets_are_skipped_or_substituted() {
        let m = metrics(&[0.0, 100.0], &[5.0, 110.0]).unwrap();
        assert_eq!(m.skipped_zero_targets, 1);
        assert!((m.mape - 10.0).abs() < 1e-12);
        assert_eq!(m.mae, 7.5);
        let e = metrics_with(&[0.0, 100.0], &[5.0, 110.0], MapeMode::Epsilon(1.0)).unwrap();
        assert_eq!(e.skipped_zero_targets, 0);
        assert!((e.mape - 255.0).abs() < 1e-9);
    }

    #[test]
    fn metric_errors() {
        assert_eq!(metrics(&[1.0], &[1.0, 2.0]), Err(EvalError::LengthMismatch(1, 2)));
        assert_eq!(metrics(&[], &[]), Err(EvalError::Empty));
    }

    #[test]
    fn differential_examples() {
        let a = [1.0, -2.0, 0.5];
        assert!(loss_differential(&a, &a).unwrap().iter().all(|v| *v == 0.0));
        let d1 = loss_differential(&a, &[0.0, 1.0, 2.0]).unwrap();
        let d2 = loss_differential(&[0.0, 1.0, 2.0], &a).unwrap();
        assert!(d1.iter().zip(&d2).all(|(x, y)| *x == -y));
        let d = loss_differential(&[2.0, -2.0], &[-1.0, 1.0]).unwrap();
        assert_eq!(d, vec![3.0, 3.0]);
    }

    #[test]
    fn lag_zero_is_sample_variance_over_n() {
        let d = [1.0, 4.0, -2.0, 0.5, 3.0];
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for k in [HacKernel::Truncated, HacKernel::Bartlett] {
            assert!((hac_variance(&d, 0, k).unwrap() - var / n).abs() < 1e-15);
        }
        assert!(matches!(newey_west_var(&d, 5), Err(EvalError::TooShortForLag { .. })));
    }

    #[test]
    fn alternating_differential_goes_non_positive() {
        let d: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        // gamma_0 = 1, gamma_1 = -(n-1)/n, so the truncated estimate is (2/n - 1)/n
        let v = newey_west_var(&d, 1).unwrap();
        assert!((v - (2.0 / 200.0 - 1.0) / 200.0).abs() < 1e-15);
        assert!(v <= 0.0);
        assert!(hac_variance(&d, 1, HacKernel::Bartlett).unwrap() > 0.0);
    }

    #[test]
    fn iid_variance_estimate_is_close_to_sigma2_over_n() {
        let n = 2000;
        let sigma2 = 4.0;
        let mut ratios = Vec::new();
        for seed in 0..20 {
            let mut rng = stream(seed, Stream::Synthetic);
            let d: Vec<f64> = (0..n).map(|_| 2.0 * standard_normal(&mut rng)).collect();
            ratios.push(newey_west_var(&d, 13).unwrap() / (sigma2 / n as f64));
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - 1.0).abs() < 0.2, "{mean}");
        let within = ratios.iter().filter(|r| (*r - 1.0).abs() < 0.2).count();
        assert!(within >= 14, "{within}/20");
    }

    #[test]
    fn hln_limits() {
        assert!((hln_multiplier(1_000_000, 1) - 1.0).abs() < 1e-4);
        assert!((hln_multiplier(1_000_000, 14) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn identical_forecasts_are_indistinguishable() {
        let e = [1.0, -1.0, 0.5, 2.0];
        assert_eq!(dm_test(&e, &e, 1), Err(EvalError::Indistinguishable));
    }

    #[test]
    fn one_point_perturbation_is_not_significant() {
        // The statistic is scale-free in d, so a single perturbed point gives
        // |DM| close to one whatever its size; it must not read as significant.
        let mut rng = stream(5, Stream::Synthetic);
        let e: Vec<f64> = (0..500).map(|_| standard_normal(&mut rng)).collect();
        let mut f = e.clone();
        f[100] += 1e-9;
        let r = dm_test(&f, &e, 14).unwrap();
        assert!(r.statistic.abs() < 1.5, "{}", r.statistic);
        assert!(r.p_value > 0.1);
    }

    #[test]
    fn fallback_flag_matches_recomputed_variance() {
        let mut rng = stream(11, Stream::Synthetic);
        for _ in 0..50 {
            let a: Vec<f64> = (0..60).map(|_| standard_normal(&mut rng)).collect();
            let b: Vec<f64> = (0..60).map(|i| if i % 2 == 0 { 1.5 } else { 0.2 } * standard_normal(&mut rng)).collect();
            let r = dm_test(&a, &b, 14).unwrap();
            let d = loss_differential(&b, &a).unwrap();
            assert_eq!(r.used_fallback, newey_west_var(&d, 13).unwrap() <= 0.0);
        }
    }

    #[test]
    fn constant_nonzero_differential_is_infinitely_significant() {
        let r = dm_test(&[1.0; 30], &[2.0; 30], 1).unwrap();
        assert_eq!(r.statistic, f64::INFINITY);
        assert_eq!(r.p_value, 0.0);
        assert_eq!(r.direction, Direction::ComparisonBetter);
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..50)) {
            let (y, yhat): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = metrics(&y, &yhat).unwrap();
            prop_assert!(m.mae <= m.rmse * (1.0 + 1e-12) + 1e-12);
            prop_assert!(m.mae >= 0.0 && m.rmse >= 0.0);
        }

        #[test]
        fn dm_is_antisymmetric(seed in 0u64..500) {
            let mut rng = stream(seed, Stream::Synthetic);
            let a: Vec<f64> = (0..80).map(|_| standard_normal(&mut rng)).collect();
            let b: Vec<f64> = (0..80).map(|_| 1.3 * standard_normal(&mut rng)).collect();
            let ab = dm_test(&a, &b, 14).unwrap();
            let ba = dm_test(&b, &a, 14).unwrap();
            prop_assert!((ab.statistic + ba.statistic).abs() < 1e-12);
            prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        }
    }
}
