//! Deterministic inputs shared by the benchmarks.

/// Noisy weekly and yearly seasonal series around a slow trend.
pub fn seasonal_series(n: usize) -> Vec<f64> {
    let mut state = 0x9e37_79b9_7f4a_7c15_u64;
    (0..n)
        .map(|t| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let noise = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            let t = t as f64;
            40.0 + 0.01 * t + 3.0 * (t * std::f64::consts::TAU / 7.0).sin()
                + 5.0 * (t * std::f64::consts::TAU / 365.0).sin()
                + noise
        })
        .collect()
}

/// Two forecast error sequences with different variances.
pub fn error_pair(n: usize) -> (Vec<f64>, Vec<f64>) {
    let s = seasonal_series(n + 1);
    let a = s.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>();
    let b = a.iter().enumerate().map(|(i, e)| 1.5 * e + 0.1 * (i as f64).cos()).collect();
    (a, b)
}
