//! Loess-based seasonal-trend decomposition (non-robust inner loop).

use super::{std_dev, DiagnosticsError};

#[derive(Clone, Debug, PartialEq)]
pub struct StlConfig {
    pub period: usize,
    /// Seasonal smoother length, odd and at least 3.
    pub seasonal: usize,
    /// Trend smoother length; derived from `period` and `seasonal` when unset.
    pub trend: Option<usize>,
    /// Low-pass length; smallest odd integer above `period` when unset.
    pub low_pass: Option<usize>,
    pub seasonal_deg: u8,
    pub trend_deg: u8,
    pub low_pass_deg: u8,
    pub inner_iter: usize,
}

impl StlConfig {
    pub fn new(period: usize) -> Self {
        Self {
            period,
            seasonal: 7,
            trend: None,
            low_pass: None,
            seasonal_deg: 1,
            trend_deg: 1,
            low_pass_deg: 1,
            inner_iter: 5,
        }
    }

    pub fn trend_len(&self) -> usize {
        self.trend.unwrap_or_else(|| {
            let t = (1.5 * self.period as f64 / (1.0 - 1.5 / self.seasonal as f64)).ceil() as usize;
            t + (t % 2 == 0) as usize
        })
    }

    pub fn low_pass_len(&self) -> usize {
        self.low_pass.unwrap_or_else(|| {
            let l = self.period + 1;
            l + (l % 2 == 0) as usize
        })
    }

    fn validate(&self, n: usize) -> Result<(), DiagnosticsError> {
        let bad = |m: String| Err(DiagnosticsError::Config(m));
        if self.period < 2 {
            return bad(format!("period {} < 2", self.period));
        }
        if n < 2 * self.period {
            return Err(DiagnosticsError::TooShort { n, min: 2 * self.period });
        }
        if self.seasonal < 3 || self.seasonal % 2 == 0 {
            return bad(format!("seasonal window {} must be odd and >= 3", self.seasonal));
        }
        let (t, l) = (self.trend_len(), self.low_pass_len());
        if t % 2 == 0 || t <= self.period {
            return bad(format!("trend window {t} must be odd and exceed the period"));
        }
        if l % 2 == 0 || l <= self.period {
            return bad(format!("low-pass window {l} must be odd and exceed the period"));
        }
        if [self.seasonal_deg, self.trend_deg, self.low_pass_deg].iter().any(|d| *d > 1) {
            return bad("loess degree must be 0 or 1".into());
        }
        if self.inner_iter == 0 {
            return bad("inner_iter must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StlResult {
    pub trend: Vec<f64>,
    pub seasonal: Vec<f64>,
    pub residual: Vec<f64>,
    pub period: usize,
}

pub fn stl_decompose(values: &[f64], period: usize) -> Result<StlResult, DiagnosticsError> {
    stl_decompose_with(values, &StlConfig::new(period))
}

pub fn stl_decompose_with(values: &[f64], cfg: &StlConfig) -> Result<StlResult, DiagnosticsError> {
    let n = values.len();
    cfg.validate(n)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DiagnosticsError::NonFinite);
    }
    let np = cfg.period;
    let mut trend = vec![0.0; n];
    let mut seasonal = vec![0.0; n];
    let mut detrended = vec![0.0; n];
    let mut cycle = vec![0.0; n + 2 * np];
    let mut scratch = Scratch::new(n + 2 * np);

    for _ in 0..cfg.inner_iter {
        for i in 0..n {
            detrended[i] = values[i] - trend[i];
        }
        smooth_subseries(&detrended, np, cfg.seasonal, cfg.seasonal_deg, &mut cycle, &mut scratch);
        let filtered = low_pass_filter(&cycle, np);
        let low = loess_smooth(&filtered, cfg.low_pass_len(), cfg.low_pass_deg, &mut scratch);
        for i in 0..n {
            seasonal[i] = cycle[np + i] - low[i];
            detrended[i] = values[i] - seasonal[i];
        }
        trend = loess_smooth(&detrended, cfg.trend_len(), cfg.trend_deg, &mut scratch);
    }
    let residual = (0..n).map(|i| values[i] - trend[i] - seasonal[i]).collect();
    Ok(StlResult {
        trend,
        seasonal,
        residual,
        period: np,
    })
}

/// `std(residual) / std(seasonal)`.
pub fn rs_ratio(stl: &StlResult) -> Result<f64, DiagnosticsError> {
    let s = std_dev(&stl.seasonal);
    if s == 0.0 || !s.is_finite() {
        return Err(DiagnosticsError::ZeroSeasonalVariance);
    }
    Ok(std_dev(&stl.residual) / s)
}

/// `max(0, 1 - var(R) / var(S + R))`.
pub fn seasonal_strength(stl: &StlResult) -> f64 {
    let sr: Vec<f64> = stl.seasonal.iter().zip(&stl.residual).map(|(s, r)| s + r).collect();
    let denom = std_dev(&sr).powi(2);
    if denom == 0.0 {
        return 0.0;
    }
    (1.0 - std_dev(&stl.residual).powi(2) / denom).max(0.0)
}

struct Scratch {
    weights: Vec<f64>,
    sub: Vec<f64>,
    smoothed: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            weights: vec![0.0; n],
            sub: Vec::with_capacity(n),
            smoothed: Vec::with_capacity(n),
        }
    }
}

/// Local weighted fit at position `xs` (1-based) over points `nleft..=nright`.
/// Returns `None` when every weight vanishes.
fn loess_point(
    y: &[f64],
    len: usize,
    deg: u8,
    xs: f64,
    nleft: usize,
    nright: usize,
    w: &mut [f64],
) -> Option<f64> {
    let n = y.len();
    let range = n as f64 - 1.0;
    let mut h = (xs - nleft as f64).max(nright as f64 - xs);
    if len > n {
        h += ((len - n) / 2) as f64;
    }
    let h9 = 0.999 * h;
    let h1 = 0.001 * h;
    let mut a = 0.0;
    for j in nleft..=nright {
        let r = (j as f64 - xs).abs();
        w[j - 1] = if r <= h9 {
            let v = if r <= h1 { 1.0 } else { (1.0 - (r / h).powi(3)).powi(3) };
            a += v;
            v
        } else {
            0.0
        };
    }
    if a <= 0.0 {
        return None;
    }
    for j in nleft..=nright {
        w[j - 1] /= a;
    }
    if h > 0.0 && deg > 0 {
        let a: f64 = (nleft..=nright).map(|j| w[j - 1] * j as f64).sum();
        let c: f64 = (nleft..=nright).map(|j| w[j - 1] * (j as f64 - a).powi(2)).sum();
        if c.sqrt() > 0.001 * range {
            let b = (xs - a) / c;
            for j in nleft..=nright {
                w[j - 1] *= b * (j as f64 - a) + 1.0;
            }
        }
    }
    Some((nleft..=nright).map(|j| w[j - 1] * y[j - 1]).sum())
}

fn loess_smooth(y: &[f64], len: usize, deg: u8, scratch: &mut Scratch) -> Vec<f64> {
    let n = y.len();
    let mut out = vec![0.0; n];
    loess_into(y, len, deg, &mut out, &mut scratch.weights);
    out
}

fn loess_into(y: &[f64], len: usize, deg: u8, out: &mut [f64], w: &mut [f64]) {
    let n = y.len();
    if n < 2 {
        out[0] = y[0];
        return;
    }
    let (mut nleft, mut nright) = if len >= n { (1, n) } else { (1, len) };
    let nsh = (len + 1) / 2;
    for i in 1..=n {
        if len < n && i > nsh && nright != n {
            nleft += 1;
            nright += 1;
        }
        out[i - 1] = loess_point(y, len, deg, i as f64, nleft, nright, w).unwrap_or(y[i - 1]);
    }
}

/// Smooths each cycle-subseries and extends it by one point at either end.
/// `out` has length `n + 2 * np`.
fn smooth_subseries(y: &[f64], np: usize, len: usize, deg: u8, out: &mut [f64], scratch: &mut Scratch) {
    let n = y.len();
    for j in 0..np {
        scratch.sub.clear();
        scratch.sub.extend(y.iter().skip(j).step_by(np).copied());
        let k = scratch.sub.len();
        scratch.smoothed.clear();
        scratch.smoothed.resize(k + 2, 0.0);
        let sub = &scratch.sub;
        let w = &mut scratch.weights;
        loess_into(sub, len, deg, &mut scratch.smoothed[1..=k], w);
        let nright = len.min(k);
        scratch.smoothed[0] = loess_point(sub, len, deg, 0.0, 1, nright, w).unwrap_or(scratch.smoothed[1]);
        let nleft = (k as isize - len as isize + 1).max(1) as usize;
        scratch.smoothed[k + 1] =
            loess_point(sub, len, deg, (k + 1) as f64, nleft, k, w).unwrap_or(scratch.smoothed[k]);
        for (m, v) in scratch.smoothed.iter().enumerate() {
            out[m * np + j] = *v;
        }
    }
    debug_assert!(out.len() == n + 2 * np);
}

fn moving_average(x: &[f64], len: usize) -> Vec<f64> {
    let newn = x.len() + 1 - len;
    let mut out = Vec::with_capacity(newn);
    let mut v: f64 = x[..len].iter().sum();
    out.push(v / len as f64);
    for j in 1..newn {
        v = v - x[j - 1] + x[len + j - 1];
        out.push(v / len as f64);
    }
    out
}

/// Moving averages of length `np`, `np` and 3; shortens by `2 * np`.
fn low_pass_filter(x: &[f64], np: usize) -> Vec<f64> {
    moving_average(&moving_average(&moving_average(x, np), np), 3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::rng::{standard_normal, stream, Stream};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn reference_series() -> Vec<f64> {
        (0..120)
            .map(|t| {
                let t = t as f64;
                (2.0 * PI * t / 12.0).sin() * 3.0
                    + 0.05 * t
                    + (t * 0.7).cos() * 0.5
                    + ((t as u64 * 37) % 11) as f64 / 10.0
            })
            .collect()
    }

    #[test]
    fn matches_reference_decomposition() {
        let r = stl_decompose(&reference_series(), 12).unwrap();
        let expect = [
            (0, 0.5473878580267362, -0.14690688332107615, 0.09951902529433998),
            (1, 0.5891494419296467, 1.5365644373843856, 0.20670721432821193),
            (5, 0.761846350633358, 1.4923726774826627, -0.07244737176141902),
            (60, 3.5154618307538295, 0.024011964781669438, 0.1605335469703113),
            (118, 6.534822220260468, -2.1906302966350593, 0.2612021411694583),
            (119, 6.600188807527451, -1.4581236459357936, -0.41595340432526307),
        ];
        for (i, t, s, e) in expect {
            assert!((r.trend[i] - t).abs() < 1e-9, "trend[{i}] {}", r.trend[i]);
            assert!((r.seasonal[i] - s).abs() < 1e-9, "seasonal[{i}] {}", r.seasonal[i]);
            assert!((r.residual[i] - e).abs() < 1e-9, "residual[{i}] {}", r.residual[i]);
        }
        assert!((rs_ratio(&r).unwrap() - 0.2278445098007339).abs() < 1e-9);
    }

    #[test]
    fn default_windows() {
        let c = StlConfig::new(365);
        assert_eq!((c.trend_len(), c.low_pass_len()), (697, 367));
        let c = StlConfig::new(30);
        assert_eq!((c.trend_len(), c.low_pass_len()), (59, 31));
    }

    #[test]
    fn pure_sine_has_no_residual() {
        let p = 30;
        let y: Vec<f64> = (0..600).map(|t| (2.0 * PI * t as f64 / p as f64).sin()).collect();
        let r = stl_decompose(&y, p).unwrap();
        assert!(std_dev(&r.residual) < 1e-3 * std_dev(&r.seasonal));
    }

    #[test]
    fn ramp_has_no_seasonality() {
        let y: Vec<f64> = (0..400).map(|t| 2.0 + 0.5 * t as f64).collect();
        let r = stl_decompose(&y, 30).unwrap();
        assert!(std_dev(&r.seasonal) < 0.05 * (y[399] - y[0]));
    }

    #[test]
    fn recovers_constructed_rs_ratio() {
        let (n, p) = (2000, 30);
        let seas: Vec<f64> = (0..n).map(|t| 10.0 * (2.0 * PI * t as f64 / p as f64).sin()).collect();
        let mut rng = stream(3, Stream::Synthetic);
        let raw: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let k = 0.5 * std_dev(&seas) / std_dev(&raw);
        let y: Vec<f64> = (0..n).map(|t| 50.0 + 0.01 * t as f64 + seas[t] + k * raw[t]).collect();
        let cfg = StlConfig {
            seasonal: 35,
            ..StlConfig::new(p)
        };
        let rs = rs_ratio(&stl_decompose_with(&y, &cfg).unwrap()).unwrap();
        assert!((0.4..=0.6).contains(&rs), "{rs}");
    }

    #[test]
    fn zero_residual_gives_zero_ratio() {
        let r = StlResult {
            trend: vec![0.0; 4],
            seasonal: vec![1.0, -1.0, 1.0, -1.0],
            residual: vec![0.0; 4],
            period: 2,
        };
        assert_eq!(rs_ratio(&r).unwrap(), 0.0);
        let flat = StlResult { seasonal: vec![0.0; 4], ..r };
        assert_eq!(rs_ratio(&flat), Err(DiagnosticsError::ZeroSeasonalVariance));
    }

    #[test]
    fn errors() {
        assert!(matches!(stl_decompose(&[1.0; 10], 1), Err(DiagnosticsError::Config(_))));
        assert_eq!(stl_decompose(&[1.0; 10], 6), Err(DiagnosticsError::TooShort { n: 10, min: 12 }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn reconstructs_and_is_scale_free(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let mut rng = stream(seed, Stream::Synthetic);
            let y: Vec<f64> = (0..140)
                .map(|t| (t as f64 * 0.9).sin() * 4.0 + standard_normal(&mut rng) + 20.0)
                .collect();
            let r = stl_decompose(&y, 14).unwrap();
            let max = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..y.len() {
                prop_assert!((r.trend[i] + r.seasonal[i] + r.residual[i] - y[i]).abs() <= 1e-8 * max);
            }
            let ys: Vec<f64> = y.iter().map(|v| v * scale).collect();
            let a = rs_ratio(&r).unwrap();
            let b = rs_ratio(&stl_decompose(&ys, 14).unwrap()).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a);
        }
    }
}
