//! Temporal encodings: fixed sinusoidal positions and learnable Time2Vec.

use std::f64::consts::PI;

use crate::autodiff::rng::{stream, uniform, Stream, StreamRng};
use crate::autodiff::{Tape, Tensor, Var};

use super::ModelError;

pub const T2V_K: usize = 32;
pub const T2V_F_LOW: f64 = 0.01;
pub const T2V_F_HIGH: f64 = 10.0;

/// `[seq_len, d_model]` matrix with `sin(pos / 10000^(2i/d))` in channel
/// `2i` and the matching cosine in channel `2i + 1`.
pub fn sinusoidal_pe(seq_len: usize, d_model: usize) -> Result<Tensor, ModelError> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(ModelError::Config(format!("d_model must be even and positive, got {d_model}")));
    }
    Ok(Tensor::from_fn([seq_len, d_model], |idx| {
        let (pos, ch) = (idx / d_model, idx % d_model);
        let pair = (ch / 2 * 2) as f64;
        let angle = pos as f64 / 10000f64.powf(pair / d_model as f64);
        if ch % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Time2Vec frequencies and phases.
#[derive(Clone, Debug, PartialEq)]
pub struct T2vEncoding {
    pub omega: Vec<f64>,
    pub phi: Vec<f64>,
}

impl T2vEncoding {
    pub fn k(&self) -> usize {
        self.omega.len()
    }
}

/// Element 0 is `omega_0 * tau + phi_0`; element `i >= 1` is
/// `sin(omega_i * tau + phi_i)`.
pub fn time2vec(tau: f64, enc: &T2vEncoding) -> Vec<f64> {
    enc.omega
        .iter()
        .zip(&enc.phi)
        .enumerate()
        .map(|(i, (w, p))| {
            let z = w * tau + p;
            if i == 0 {
                z
            } else {
                z.sin()
            }
        })
        .collect()
}

/// Frequencies geometrically spaced over `[f_low, f_high]` inclusive, phases
/// uniform on `[0, 2pi)` from the encoding stream of `seed`.
pub fn init_t2v(k: usize, f_low: f64, f_high: f64, seed: u64) -> Result<T2vEncoding, ModelError> {
    init_t2v_from(k, f_low, f_high, &mut stream(seed, Stream::Encoding))
}

pub(crate) fn init_t2v_from(
    k: usize,
    f_low: f64,
    f_high: f64,
    rng: &mut StreamRng,
) -> Result<T2vEncoding, ModelError> {
    if k < 2 {
        return Err(ModelError::Config(format!("Time2Vec width must be at least 2, got {k}")));
    }
    if !(f_low > 0.0 && f_high > f_low && f_high.is_finite()) {
        return Err(ModelError::Config(format!("invalid frequency bounds [{f_low}, {f_high}]")));
    }
    let ratio = (f_high / f_low).ln() / (k - 1) as f64;
    let mut omega: Vec<f64> = (0..k).map(|i| f_low * (ratio * i as f64).exp()).collect();
    omega[0] = f_low;
    omega[k - 1] = f_high;
    let phi = (0..k).map(|_| uniform(rng, 0.0, 2.0 * PI)).collect();
    Ok(T2vEncoding { omega, phi })
}

/// `index / (n - 1)`.
pub fn normalize_tau(index: usize, n: usize) -> Result<f64, ModelError> {
    if n < 2 {
        return Err(ModelError::Config(format!("series length {n} is too short for tau")));
    }
    if index >= n {
        return Err(ModelError::Config(format!("index {index} outside series of length {n}")));
    }
    Ok(index as f64 / (n - 1) as f64)
}

/// Time2Vec on the tape. `tau` is `[.., 1]`, `omega` is `[1, k]` and `phi`
/// is `[k]`; the result is `[.., k]`.
pub fn t2v_layer(tape: &mut Tape, tau: Var, omega: Var, phi: Var) -> Result<Var, ModelError> {
    let k = tape.shape(phi)[0];
    let lin = tape.matmul(tau, omega)?;
    let z = tape.add(lin, phi)?;
    let axis = tape.shape(z).len() - 1;
    let linear = tape.slice(z, axis, 0, 1)?;
    let periodic = tape.slice(z, axis, 1, k - 1)?;
    let periodic = tape.sin(periodic)?;
    Ok(tape.concat(&[linear, periodic], axis)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use proptest::prelude::*;

    #[test]
    fn pe_reference_entries() {
        let pe = sinusoidal_pe(90, 64).unwrap();
        assert_eq!(pe.shape(), &[90, 64]);
        assert_eq!(pe.data()[0], 0.0);
        assert_eq!(pe.data()[1], 1.0);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sinusoidal_pe(10, 7).is_err());
    }

    #[test]
    fn pe_rows_are_distinct() {
        let (t, d) = (10_000, 16);
        let pe = sinusoidal_pe(t, d).unwrap();
        let rows: Vec<&[f64]> = pe.data().chunks(d).collect();
        let mut sorted = rows.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(sorted.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn t2v_at_zero_is_phase() {
        let enc = T2vEncoding {
            omega: vec![2.0, 3.0, 4.0],
            phi: vec![0.5, 1.0, -1.0],
        };
        let v = time2vec(0.0, &enc);
        assert_eq!(v, vec![0.5, 1.0f64.sin(), (-1.0f64).sin()]);
        let flat = T2vEncoding {
            omega: vec![0.0; 3],
            phi: enc.phi.clone(),
        };
        assert_eq!(time2vec(0.1, &flat), time2vec(0.9, &flat));
    }

    #[test]
    fn init_endpoints_and_spacing() {
        let e = init_t2v(2, 0.01, 10.0, 42).unwrap();
        assert_eq!(e.omega, vec![0.01, 10.0]);
        let e = init_t2v(3, 0.01, 10.0, 42).unwrap();
        assert!((e.omega[1] - 0.1f64.sqrt()).abs() < 1e-12);
        let e = init_t2v(32, 0.01, 10.0, 42).unwrap();
        let r0 = e.omega[1] / e.omega[0];
        assert!(e.omega.windows(2).all(|w| (w[1] / w[0] - r0).abs() < 1e-9));
        assert!(e.phi.iter().all(|p| (0.0..2.0 * PI).contains(p)));
        assert!(init_t2v(1, 0.01, 10.0, 0).is_err());
        assert!(init_t2v(4, 0.0, 10.0, 0).is_err());
        assert!(init_t2v(4, 5.0, 1.0, 0).is_err());
    }

    #[test]
    fn tau_endpoints() {
        assert_eq!(normalize_tau(0, 101).unwrap(), 0.0);
        assert_eq!(normalize_tau(100, 101).unwrap(), 1.0);
        assert!((normalize_tau(50, 101).unwrap() - 0.5).abs() <= 0.01);
        assert!(normalize_tau(0, 1).is_err());
        assert!(normalize_tau(5, 5).is_err());
    }

    #[test]
    fn tape_layer_matches_closed_form_and_gradient() {
        let enc = init_t2v(5, 0.01, 10.0, 7).unwrap();
        let taus = [0.0, 0.3, 0.77, 1.0];
        let mut store = ParamStore::new();
        let w = store.add("omega", Tensor::new([1, 5], enc.omega.clone()).unwrap());
        let p = store.add("phi", Tensor::new([5], enc.phi.clone()).unwrap());
        let mut tape = Tape::new();
        let tau = tape.leaf(Tensor::new([4, 1], taus.to_vec()).unwrap()).unwrap();
        let (wv, pv) = (tape.param(&store, w).unwrap(), tape.param(&store, p).unwrap());
        let out = t2v_layer(&mut tape, tau, wv, pv).unwrap();
        for (r, t) in taus.iter().enumerate() {
            let direct = time2vec(*t, &enc);
            let row = &tape.value(out).data()[r * 5..(r + 1) * 5];
            for (a, b) in row.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let loss = tape.sum(out).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let g = store.get(w).grad().data().to_vec();
        for i in 1..5 {
            let expect: f64 = taus.iter().map(|t| t * (enc.omega[i] * t + enc.phi[i]).cos()).sum();
            let fd: f64 = taus
                .iter()
                .map(|t| {
                    let h = 1e-6;
                    ((( enc.omega[i] + h) * t + enc.phi[i]).sin() - ((enc.omega[i] - h) * t + enc.phi[i]).sin()) / (2.0 * h)
                })
                .sum();
            assert!((g[i] - expect).abs() < 1e-12);
            assert!((g[i] - fd).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn only_first_element_is_linear(tau in 0.0f64..1.0, w in -5.0f64..5.0, p in -3.0f64..3.0) {
            let enc = T2vEncoding { omega: vec![w, w], phi: vec![p, p] };
            let v = time2vec(tau, &enc);
            prop_assert_eq!(v[0], w * tau + p);
            prop_assert_eq!(v[1], (w * tau + p).sin());
        }
    }
}
