//! Seasonal ARIMA estimated by conditional sum of squares, with
//! Hyndman-Khandakar stepwise order search and expanding-window forecasts.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::diagnostics::{adf_test, seasonal_strength, stl_decompose};

use super::ModelError;

/// Weekly seasonal period.
pub const DEFAULT_PERIOD: usize = 7;
const UNIT_ROOT_ALPHA: f64 = 0.05;
const SEASONAL_STRENGTH_THRESHOLD: f64 = 0.64;
/// Bound on the unconstrained parameters feeding `tanh`.
const RAW_BOUND: f64 = 7.0;
const ROOT_MARGIN: f64 = 1e-6;
/// Longest quasi-Newton step in the unconstrained parameterization.
const MAX_STEP: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SarimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
    pub seasonal_p: usize,
    pub seasonal_d: usize,
    pub seasonal_q: usize,
    pub m: usize,
}

impl SarimaOrder {
    pub fn new(p: usize, d: usize, q: usize, sp: usize, sd: usize, sq: usize, m: usize) -> Self {
        Self {
            p,
            d,
            q,
            seasonal_p: sp,
            seasonal_d: sd,
            seasonal_q: sq,
            m,
        }
    }

    fn differencing(&self) -> usize {
        self.d + self.m * self.seasonal_d
    }

    fn ar_degree(&self) -> usize {
        self.p + self.m * self.seasonal_p
    }
}

impl std::fmt::Display for SarimaOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({},{},{})({},{},{})[{}]",
            self.p, self.d, self.q, self.seasonal_p, self.seasonal_d, self.seasonal_q, self.m
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SarimaModel {
    pub order: SarimaOrder,
    /// Non-seasonal AR coefficients: `phi(B) = 1 - sum phi_i B^i`.
    pub ar: Vec<f64>,
    /// Non-seasonal MA coefficients: `theta(B) = 1 + sum theta_j B^j`.
    pub ma: Vec<f64>,
    pub sar: Vec<f64>,
    pub sma: Vec<f64>,
    /// Mean of the differenced series; present only without differencing.
    pub intercept: Option<f64>,
    pub sigma2: f64,
    pub aic: f64,
    /// Residuals before this index of the differenced series are conditioned to zero.
    pub cond: usize,
}

impl SarimaModel {
    pub fn num_params(&self) -> usize {
        self.ar.len() + self.ma.len() + self.sar.len() + self.sma.len() + self.intercept.is_some() as usize
    }

    /// Coefficients of the expanded AR polynomial `1 - sum a_k B^k`, as `a`.
    pub fn ar_poly(&self) -> Vec<f64> {
        let phi = poly_from(&self.ar, 1, -1.0);
        let sphi = poly_from(&self.sar, self.order.m, -1.0);
        poly_mul(&phi, &sphi)[1..].iter().map(|c| -c).collect()
    }

    /// Coefficients of the expanded MA polynomial `1 + sum b_k B^k`, as `b`.
    pub fn ma_poly(&self) -> Vec<f64> {
        let theta = poly_from(&self.ma, 1, 1.0);
        let stheta = poly_from(&self.sma, self.order.m, 1.0);
        poly_mul(&theta, &stheta)[1..].to_vec()
    }

    /// Smallest root modulus over the expanded AR and MA polynomials
    /// (infinite when both are trivial).
    pub fn min_root_modulus(&self) -> f64 {
        let ar = self.ar_poly();
        let ma: Vec<f64> = self.ma_poly().iter().map(|b| -b).collect();
        min_root_modulus(&ar).min(min_root_modulus(&ma))
    }
}

/// Order search bounds and options.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub m: usize,
    pub max_p: usize,
    pub max_q: usize,
    pub max_d: usize,
    pub max_sp: usize,
    pub max_sq: usize,
    pub max_sd: usize,
    /// Stepwise neighbourhood search; `false` fits the full grid.
    pub stepwise: bool,
    pub max_iter: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            m: DEFAULT_PERIOD,
            max_p: 3,
            max_q: 3,
            max_d: 2,
            max_sp: 2,
            max_sq: 2,
            max_sd: 1,
            stepwise: true,
            max_iter: 500,
        }
    }
}

/// `[1, s*c_1 at lag step, s*c_2 at 2*step, ...]`.
fn poly_from(coefs: &[f64], step: usize, sign: f64) -> Vec<f64> {
    let mut p = vec![0.0; coefs.len() * step + 1];
    p[0] = 1.0;
    for (i, c) in coefs.iter().enumerate() {
        p[(i + 1) * step] = sign * c;
    }
    p
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Smallest root modulus of `1 - sum a_k x^k`. Roots are the reciprocals of
/// the companion-matrix eigenvalues.
fn min_root_modulus(a: &[f64]) -> f64 {
    let deg = a.iter().rposition(|c| *c != 0.0).map_or(0, |i| i + 1);
    if deg == 0 {
        return f64::INFINITY;
    }
    let mut c = DMatrix::<f64>::zeros(deg, deg);
    for j in 0..deg {
        c[(0, j)] = a[j];
    }
    for i in 1..deg {
        c[(i, i - 1)] = 1.0;
    }
    let largest = c.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    if largest == 0.0 {
        f64::INFINITY
    } else {
        1.0 / largest
    }
}

/// Maps partial autocorrelations in (-1, 1) to coefficients of a stationary
/// `1 - sum phi_i B^i` (Durbin-Levinson recursion).
fn pacf_to_ar(r: &[f64]) -> Vec<f64> {
    let mut phi: Vec<f64> = Vec::with_capacity(r.len());
    for (k, rk) in r.iter().enumerate() {
        let prev = phi.clone();
        for j in 0..k {
            phi[j] = prev[j] - rk * prev[k - 1 - j];
        }
        phi.push(*rk);
    }
    phi
}

fn constrained(raw: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = raw.iter().map(|u| u.clamp(-RAW_BOUND, RAW_BOUND).tanh()).collect();
    pacf_to_ar(&r)
}

/// `(1 - B)^d (1 - B^m)^D` applied to `y`.
pub fn difference(y: &[f64], d: usize, sd: usize, m: usize) -> Vec<f64> {
    let mut w = y.to_vec();
    for _ in 0..sd {
        w = w.iter().skip(m).zip(&w).map(|(a, b)| a - b).collect();
    }
    for _ in 0..d {
        w = w.windows(2).map(|p| p[1] - p[0]).collect();
    }
    w
}

fn diff_poly(order: &SarimaOrder) -> Vec<f64> {
    let mut p = vec![1.0];
    for _ in 0..order.d {
        p = poly_mul(&p, &[1.0, -1.0]);
    }
    for _ in 0..order.seasonal_d {
        p = poly_mul(&p, &poly_from(&[1.0], order.m, -1.0));
    }
    p
}

fn sparse(coefs: &[f64]) -> Vec<(usize, f64)> {
    coefs
        .iter()
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(i, c)| (i + 1, *c))
        .collect()
}

/// One-step residuals of `z` under `a` (AR) and `b` (MA), zero before `start`.
fn residuals(z: &[f64], ar: &[(usize, f64)], ma: &[(usize, f64)], start: usize) -> Vec<f64> {
    let mut e = vec![0.0; z.len()];
    for t in start..z.len() {
        let mut v = z[t];
        for &(l, a) in ar {
            v -= a * z[t - l];
        }
        for &(l, b) in ma {
            if l <= t {
                v -= b * e[t - l];
            }
        }
        e[t] = v;
    }
    e
}

struct Layout {
    order: SarimaOrder,
    intercept: bool,
}

impl Layout {
    fn len(&self) -> usize {
        let o = &self.order;
        o.p + o.q + o.seasonal_p + o.seasonal_q + self.intercept as usize
    }

    fn unpack(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Option<f64>) {
        let o = &self.order;
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &x[at..at + n];
            at += n;
            s.to_vec()
        };
        let ar = constrained(&take(o.p));
        let ma: Vec<f64> = constrained(&take(o.q)).iter().map(|c| -c).collect();
        let sar = constrained(&take(o.seasonal_p));
        let sma: Vec<f64> = constrained(&take(o.seasonal_q)).iter().map(|c| -c).collect();
        let mu = self.intercept.then(|| take(1)[0]);
        (ar, ma, sar, sma, mu)
    }
}

fn model_from(layout: &Layout, x: &[f64], sigma2: f64, aic: f64, cond: usize) -> SarimaModel {
    let (ar, ma, sar, sma, intercept) = layout.unpack(x);
    SarimaModel {
        order: layout.order,
        ar,
        ma,
        sar,
        sma,
        intercept,
        sigma2,
        aic,
        cond,
    }
}

fn css(w: &[f64], model: &SarimaModel) -> (f64, usize) {
    let mu = model.intercept.unwrap_or(0.0);
    let z: Vec<f64> = w.iter().map(|v| v - mu).collect();
    let e = residuals(&z, &sparse(&model.ar_poly()), &sparse(&model.ma_poly()), model.cond);
    let n = w.len() - model.cond;
    (e[model.cond..].iter().map(|v| v * v).sum(), n)
}

struct Minimum {
    x: Vec<f64>,
    converged: bool,
}

fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Quasi-Newton minimisation with central-difference gradients and an
/// Armijo backtracking line search.
fn bfgs(f: &dyn Fn(&[f64]) -> f64, x0: Vec<f64>, max_iter: usize) -> Minimum {
    let n = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    if n == 0 || !fx.is_finite() {
        return Minimum {
            converged: fx.is_finite(),
            x,
        };
    }
    let mut g = numeric_grad(f, &x);
    let mut h = DMatrix::<f64>::identity(n, n);
    for _ in 0..max_iter {
        let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm < 1e-6 * (1.0 + fx.abs()) {
            return Minimum { x, converged: true };
        }
        let gv = nalgebra::DVector::from_column_slice(&g);
        let mut p = -(&h * &gv);
        if p.dot(&gv) >= 0.0 {
            h = DMatrix::identity(n, n);
            p = -gv.clone();
        }
        let longest = p.amax();
        if longest > MAX_STEP {
            p *= MAX_STEP / longest;
        }
        let slope = p.dot(&gv);
        let mut alpha = 1.0;
        let mut next = None;
        while alpha > 1e-12 {
            let xn: Vec<f64> = x.iter().zip(p.iter()).map(|(a, b)| a + alpha * b).collect();
            let fnew = f(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * alpha * slope {
                next = Some((xn, fnew));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew)) = next else {
            // no descent available at numerical precision
            return Minimum { x, converged: true };
        };
        let gn = numeric_grad(f, &xn);
        let s = nalgebra::DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = nalgebra::DVector::from_iterator(n, gn.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - rho * &s * y.transpose();
            let right = &i - rho * &y * s.transpose();
            h = &left * &h * &right + rho * &s * s.transpose();
        }
        let done = (fx - fnew).abs() <= 1e-12 * (1.0 + fx.abs());
        x = xn;
        fx = fnew;
        g = gn;
        if done {
            return Minimum { x, converged: true };
        }
    }
    Minimum { x, converged: false }
}

/// Fits one order by CSS on the differenced series `w`, conditioning on the
/// first `cond` values. Returns `None` when the fit does not converge or the
/// fitted polynomials sit on the unit circle.
fn fit_differenced(w: &[f64], order: SarimaOrder, cond: usize, max_iter: usize) -> Option<SarimaModel> {
    if w.len() <= cond + 1 {
        return None;
    }
    let layout = Layout {
        order,
        intercept: order.differencing() == 0,
    };
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let n = (w.len() - cond) as f64;
    let objective = |x: &[f64]| {
        let m = model_from(&layout, x, 1.0, 0.0, cond);
        let (ssr, _) = css(w, &m);
        0.5 * n * (ssr.max(1e-300) / n).ln()
    };
    let mut x0 = vec![0.0; layout.len()];
    if layout.intercept {
        *x0.last_mut().unwrap() = mean;
    }
    let min = bfgs(&objective, x0, max_iter);
    if !min.converged {
        return None;
    }
    let probe = model_from(&layout, &min.x, 1.0, 0.0, cond);
    let (ssr, used) = css(w, &probe);
    let sigma2 = ssr / used as f64;
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return None;
    }
    let loglik = -0.5 * used as f64 * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
    let aic = -2.0 * loglik + 2.0 * (layout.len() + 1) as f64;
    let model = model_from(&layout, &min.x, sigma2, aic, cond);
    (model.min_root_modulus() > 1.0 + ROOT_MARGIN).then_some(model)
}

/// Fits a single order to `train` on the original scale.
pub fn sarima_fit_order(train: &[f64], order: SarimaOrder) -> Result<SarimaModel, ModelError> {
    let w = difference(train, order.d, order.seasonal_d, order.m);
    fit_differenced(&w, order, order.ar_degree(), 500).ok_or(ModelError::NoConvergence)
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|v| *v == x[0])
}

/// Seasonal differences needed, from the STL seasonal strength at period `m`.
pub fn seasonal_diffs(x: &[f64], m: usize, max_sd: usize) -> usize {
    let mut x = x.to_vec();
    let mut sd = 0;
    while sd < max_sd && x.len() >= 2 * m && !is_constant(&x) {
        let strength = match stl_decompose(&x, m) {
            Ok(stl) => seasonal_strength(&stl),
            Err(_) => break,
        };
        if strength <= SEASONAL_STRENGTH_THRESHOLD {
            break;
        }
        sd += 1;
        x = difference(&x, 0, 1, m);
    }
    sd
}

/// Non-seasonal differences needed: difference while the augmented
/// Dickey-Fuller test fails to reject a unit root at 5%.
pub fn ndiffs(x: &[f64], max_d: usize) -> usize {
    let mut x = x.to_vec();
    let mut d = 0;
    while d < max_d && !is_constant(&x) {
        match adf_test(&x) {
            Ok(r) if r.p_value >= UNIT_ROOT_ALPHA => {
                d += 1;
                x = difference(&x, 1, 0, 1);
            }
            _ => break,
        }
    }
    d
}

/// Selects and fits a SARIMA model by AIC. Differencing orders come from
/// unit-root heuristics; the ARMA orders from the stepwise (or full grid)
/// search. Every candidate conditions on the same leading observations so
/// their AICs are comparable.
pub fn sarima_fit(train: &[f64], cfg: &SearchConfig) -> Result<SarimaModel, ModelError> {
    let m = cfg.m;
    if m < 2 {
        return Err(ModelError::Config(format!("seasonal period {m} < 2")));
    }
    if train.len() < 3 * m {
        return Err(ModelError::Config(format!(
            "training series of length {} is shorter than 3 seasonal periods",
            train.len()
        )));
    }
    if train.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Config("training series contains non-finite values".into()));
    }
    let sd = seasonal_diffs(train, m, cfg.max_sd);
    let d = ndiffs(&difference(train, 0, sd, m), cfg.max_d);
    let w = difference(train, d, sd, m);
    let cond = cfg.max_p + m * cfg.max_sp;
    if w.len() <= cond + 2 * m {
        return Err(ModelError::Config("training series too short for the search bounds".into()));
    }

    let mut cache: HashMap<SarimaOrder, Option<SarimaModel>> = HashMap::new();
    let mut fit = |o: SarimaOrder| -> Option<SarimaModel> {
        cache
            .entry(o)
            .or_insert_with(|| fit_differenced(&w, o, cond, cfg.max_iter))
            .clone()
    };
    let within = |p: isize, q: isize, sp: isize, sq: isize| {
        p >= 0
            && q >= 0
            && sp >= 0
            && sq >= 0
            && p as usize <= cfg.max_p
            && q as usize <= cfg.max_q
            && sp as usize <= cfg.max_sp
            && sq as usize <= cfg.max_sq
    };
    let order = |p: isize, q: isize, sp: isize, sq: isize| {
        SarimaOrder::new(p as usize, d, q as usize, sp as usize, sd, sq as usize, m)
    };

    let mut best: Option<SarimaModel> = None;
    let consider = |cand: Option<SarimaModel>, best: &mut Option<SarimaModel>| -> bool {
        match (cand, best.as_ref()) {
            (Some(c), None) => {
                *best = Some(c);
                true
            }
            (Some(c), Some(b)) if c.aic < b.aic => {
                *best = Some(c);
                true
            }
            _ => false,
        }
    };

    if !cfg.stepwise {
        for p in 0..=cfg.max_p {
            for q in 0..=cfg.max_q {
                for sp in 0..=cfg.max_sp {
                    for sq in 0..=cfg.max_sq {
                        let c = fit(SarimaOrder::new(p, d, q, sp, sd, sq, m));
                        consider(c, &mut best);
                    }
                }
            }
        }
        return best.ok_or(ModelError::NoConvergence);
    }

    for (p, q, sp, sq) in [(2, 2, 1, 1), (0, 0, 0, 0), (1, 0, 1, 0), (0, 1, 0, 1)] {
        if within(p, q, sp, sq) {
            let c = fit(order(p, q, sp, sq));
            consider(c, &mut best);
        }
    }
    const MOVES: [(isize, isize, isize, isize); 12] = [
        (0, 0, -1, 0),
        (0, 0, 1, 0),
        (0, 0, 0, -1),
        (0, 0, 0, 1),
        (0, 0, -1, -1),
        (0, 0, 1, 1),
        (-1, 0, 0, 0),
        (1, 0, 0, 0),
        (0, -1, 0, 0),
        (0, 1, 0, 0),
        (-1, -1, 0, 0),
        (1, 1, 0, 0),
    ];
    loop {
        let Some(cur) = best.as_ref().map(|b| b.order) else {
            return Err(ModelError::NoConvergence);
        };
        let mut improved = false;
        for (dp, dq, dsp, dsq) in MOVES {
            let (p, q) = (cur.p as isize + dp, cur.q as isize + dq);
            let (sp, sq) = (cur.seasonal_p as isize + dsp, cur.seasonal_q as isize + dsq);
            if !within(p, q, sp, sq) {
                continue;
            }
            let c = fit(order(p, q, sp, sq));
            if consider(c, &mut best) {
                improved = true;
                break;
            }
        }
        if !improved {
            break;
        }
    }
    best.ok_or(ModelError::NoConvergence)
}

/// Expanding-window forecasts. For each `target_start` s the model state uses
/// `series[..s]` and the next `horizon` values are predicted; parameters stay
/// fixed.
pub fn sarima_forecast_rolling(
    model: &SarimaModel,
    series: &[f64],
    target_starts: &[usize],
    horizon: usize,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let o = &model.order;
    let nd = o.differencing();
    let w = difference(series, o.d, o.seasonal_d, o.m);
    let mu = model.intercept.unwrap_or(0.0);
    let z: Vec<f64> = w.iter().map(|v| v - mu).collect();
    let ar = sparse(&model.ar_poly());
    let ma = sparse(&model.ma_poly());
    let cond = model.cond.min(z.len());
    let e = residuals(&z, &ar, &ma, cond);
    let delta = diff_poly(o);

    let mut out = Vec::with_capacity(target_starts.len());
    for &s in target_starts {
        if s > series.len() || s <= nd + model.order.ar_degree() {
            return Err(ModelError::Config(format!("forecast origin {s} outside the usable range")));
        }
        let base = s - nd;
        let mut zf = z[..base].to_vec();
        let mut ef = e[..base].to_vec();
        let mut yf = series[..s].to_vec();
        for k in 0..horizon {
            let t = base + k;
            let mut v = 0.0;
            for &(l, a) in &ar {
                v += a * zf[t - l];
            }
            for &(l, b) in &ma {
                if l <= t {
                    v += b * ef[t - l];
                }
            }
            zf.push(v);
            ef.push(0.0);
            let yt = s + k;
            let mut y = v + mu;
            for (i, c) in delta.iter().enumerate().skip(1) {
                y -= c * yf[yt - i];
            }
            if !y.is_finite() {
                return Err(ModelError::Divergence(s));
            }
            yf.push(y);
        }
        out.push(yf[s..].to_vec());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::rng::{standard_normal, stream, Stream};

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = stream(seed, Stream::Synthetic);
        (0..n).map(|_| standard_normal(&mut rng)).collect()
    }

    fn ar1(seed: u64, n: usize, phi: f64) -> Vec<f64> {
        let e = noise(seed, n + 100);
        let mut y = vec![0.0; n + 100];
        for t in 1..y.len() {
            y[t] = phi * y[t - 1] + e[t];
        }
        y[100..].to_vec()
    }

    #[test]
    fn pacf_map_is_stationary() {
        let phi = pacf_to_ar(&[0.9, -0.95, 0.5]);
        assert!(min_root_modulus(&phi) > 1.0);
        assert_eq!(pacf_to_ar(&[0.4]), vec![0.4]);
    }

    #[test]
    fn root_modulus_of_ar1() {
        assert!((min_root_modulus(&[0.5]) - 2.0).abs() < 1e-12);
        assert_eq!(min_root_modulus(&[]), f64::INFINITY);
    }

    #[test]
    fn expanded_polynomials() {
        let m = SarimaModel {
            order: SarimaOrder::new(1, 0, 1, 1, 0, 1, 4),
            ar: vec![0.5],
            ma: vec![0.3],
            sar: vec![0.2],
            sma: vec![-0.4],
            intercept: None,
            sigma2: 1.0,
            aic: 0.0,
            cond: 5,
        };
        // (1 - 0.5B)(1 - 0.2B^4) = 1 - 0.5B - 0.2B^4 + 0.1B^5
        assert_eq!(m.ar_poly(), vec![0.5, 0.0, 0.0, 0.2, -0.1]);
        // (1 + 0.3B)(1 - 0.4B^4) = 1 + 0.3B - 0.4B^4 - 0.12B^5
        let b = m.ma_poly();
        assert!((b[0] - 0.3).abs() < 1e-15 && (b[3] + 0.4).abs() < 1e-15 && (b[4] + 0.12).abs() < 1e-15);
    }

    #[test]
    fn differencing_and_its_inverse_polynomial() {
        let y: Vec<f64> = (0..20).map(|i| (i * i) as f64).collect();
        let w = difference(&y, 1, 1, 3);
        let o = SarimaOrder::new(0, 1, 0, 0, 1, 0, 3);
        let delta = diff_poly(&o);
        for (k, wt) in w.iter().enumerate() {
            let t = k + 4;
            let v: f64 = delta.iter().enumerate().map(|(i, c)| c * y[t - i]).sum();
            assert!((v - wt).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_root_differencing() {
        let level = (0..20).filter(|s| ndiffs(&ar1(*s, 500, 0.7), 2) == 0).count();
        assert!(level >= 18, "{level}/20");
        for seed in 0..5 {
            let walk: Vec<f64> = noise(seed, 500).iter().scan(0.0, |s, v| { *s += v; Some(*s) }).collect();
            assert!(ndiffs(&walk, 2) >= 1);
        }
        assert_eq!(ndiffs(&[3.0; 50], 2), 0);
    }

    #[test]
    fn constant_mean_forecasts_the_constant() {
        let m = SarimaModel {
            order: SarimaOrder::new(0, 0, 0, 0, 0, 0, 7),
            ar: vec![],
            ma: vec![],
            sar: vec![],
            sma: vec![],
            intercept: Some(3.5),
            sigma2: 1.0,
            aic: 0.0,
            cond: 0,
        };
        let series = noise(3, 50);
        let f = sarima_forecast_rolling(&m, &series, &[20, 30], 14).unwrap();
        assert!(f.iter().flatten().all(|v| *v == 3.5));
    }

    #[test]
    fn ar1_forecast_decays_geometrically() {
        let m = SarimaModel {
            order: SarimaOrder::new(1, 0, 0, 0, 0, 0, 7),
            ar: vec![0.6],
            ma: vec![],
            sar: vec![],
            sma: vec![],
            intercept: Some(10.0),
            sigma2: 1.0,
            aic: 0.0,
            cond: 1,
        };
        let mut series = vec![10.0; 30];
        series[29] = 15.0;
        let f = &sarima_forecast_rolling(&m, &series, &[30], 5).unwrap()[0];
        for (k, v) in f.iter().enumerate() {
            assert!((v - (10.0 + 5.0 * 0.6f64.powi(k as i32 + 1))).abs() < 1e-12);
        }
    }

    #[test]
    fn random_walk_forecast_is_flat() {
        let m = SarimaModel {
            order: SarimaOrder::new(0, 1, 0, 0, 0, 0, 7),
            ar: vec![],
            ma: vec![],
            sar: vec![],
            sma: vec![],
            intercept: None,
            sigma2: 1.0,
            aic: 0.0,
            cond: 0,
        };
        let series = noise(4, 40);
        let f = &sarima_forecast_rolling(&m, &series, &[25], 6).unwrap()[0];
        assert!(f.iter().all(|v| *v == series[24]));
    }

    #[test]
    fn recovers_ar1_coefficient() {
        let mut ok = 0;
        for seed in 0..10 {
            let y = ar1(seed, 500, 0.7);
            let m = sarima_fit(&y, &SearchConfig::default()).unwrap();
            assert!(m.min_root_modulus() > 1.0 + ROOT_MARGIN);
            if m.order.p >= 1 && (0.6..=0.8).contains(&m.ar[0]) {
                ok += 1;
            }
        }
        assert!(ok >= 8, "{ok}/10");
    }

    #[test]
    fn white_noise_prefers_the_empty_model() {
        let y = noise(11, 400);
        let best = sarima_fit(&y, &SearchConfig::default()).unwrap();
        let w = difference(&y, best.order.d, best.order.seasonal_d, 7);
        let cond = 3 + 7 * 2;
        let empty = fit_differenced(&w, SarimaOrder { p: 0, q: 0, seasonal_p: 0, seasonal_q: 0, ..best.order }, cond, 500)
            .unwrap();
        assert!(best.aic >= empty.aic - 2.0 - 1e-9 || best.num_params() <= 1);
        assert!(empty.aic - best.aic <= 2.0 + 1e-9 || best.order.p + best.order.q == 0);
    }

    #[test]
    fn detects_seasonal_ma() {
        let mut hits = 0;
        for seed in 0..10 {
            let e = noise(100 + seed, 507);
            let y: Vec<f64> = (7..507).map(|t| e[t] + 0.8 * e[t - 7]).collect();
            if sarima_fit(&y, &SearchConfig::default()).unwrap().order.seasonal_q >= 1 {
                hits += 1;
            }
        }
        assert!(hits >= 8, "{hits}/10");
    }

    #[test]
    fn input_checks() {
        assert!(sarima_fit(&[1.0; 10], &SearchConfig::default()).is_err());
        assert!(sarima_fit(&noise(1, 100), &SearchConfig { m: 1, ..Default::default() }).is_err());
    }
}
