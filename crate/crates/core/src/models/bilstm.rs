//! Stacked bidirectional LSTM with a linear head on the final states.

use crate::autodiff::rng::{stream, Stream};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};

use super::nn::{uniform_tensor, Linear, Mode};
use super::{ModelError, ModelKind, Network};

#[derive(Clone, Debug, PartialEq)]
pub struct BiLstmConfig {
    pub seq_len: usize,
    pub horizon: usize,
    /// Hidden width per direction.
    pub hidden: usize,
    pub layers: usize,
}

impl Default for BiLstmConfig {
    fn default() -> Self {
        Self {
            seq_len: 90,
            horizon: 14,
            hidden: 64,
            layers: 2,
        }
    }
}

/// Gate blocks are laid out input, forget, cell, output along the last axis.
#[derive(Clone, Copy, Debug)]
struct Direction {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    cfg: BiLstmConfig,
    store: ParamStore,
    cells: Vec<[Direction; 2]>,
    head: Linear,
}

impl BiLstm {
    /// Recurrent weights uniform on `+-1/sqrt(hidden)`, forget-gate bias 1.
    pub fn new(cfg: BiLstmConfig, seed: u64) -> Result<Self, ModelError> {
        if cfg.hidden == 0 || cfg.layers == 0 || cfg.seq_len == 0 || cfg.horizon == 0 {
            return Err(ModelError::Config("BiLSTM dimensions must be positive".into()));
        }
        let h = cfg.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        let mut rng = stream(seed, Stream::Init);
        let mut store = ParamStore::new();
        let mut cells = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let input = if l == 0 { 1 } else { 2 * h };
            let mut dir = |name: &str| {
                let w_ih = store.add(format!("lstm{l}.{name}.w_ih"), uniform_tensor(&[input, 4 * h], bound, &mut rng));
                let w_hh = store.add(format!("lstm{l}.{name}.w_hh"), uniform_tensor(&[h, 4 * h], bound, &mut rng));
                let mut bias = uniform_tensor(&[4 * h], bound, &mut rng);
                bias.data_mut()[h..2 * h].fill(1.0);
                let b = store.add(format!("lstm{l}.{name}.b"), bias);
                Direction { w_ih, w_hh, b }
            };
            cells.push([dir("fwd"), dir("bwd")]);
        }
        let head = Linear::new(&mut store, "head", 2 * h, cfg.horizon, &mut rng);
        Ok(Self { cfg, store, cells, head })
    }

    pub fn config(&self) -> &BiLstmConfig {
        &self.cfg
    }

    /// Runs one direction over `x: [B, T, in]`; returns hidden states in time
    /// order, each `[B, hidden]`.
    fn run(&self, tape: &mut Tape, dir: &Direction, x: Var, reverse: bool) -> Result<Vec<Var>, ModelError> {
        let shape = tape.shape(x).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let h = self.cfg.hidden;
        let w_ih = tape.param(&self.store, dir.w_ih)?;
        let w_hh = tape.param(&self.store, dir.w_hh)?;
        let bias = tape.param(&self.store, dir.b)?;
        let xp = tape.matmul(x, w_ih)?;
        let xp = tape.add(xp, bias)?;
        let mut states: Vec<Option<Var>> = vec![None; t];
        let mut hc: Option<(Var, Var)> = None;
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let g = tape.slice(xp, 1, step, 1)?;
            let mut g = tape.reshape(g, &[b, 4 * h])?;
            if let Some((hp, _)) = hc {
                let r = tape.matmul(hp, w_hh)?;
                g = tape.add(g, r)?;
            }
            let cell = tape.lstm_cell(g, hc.map(|(_, c)| c))?;
            let hn = tape.slice(cell, 1, 0, h)?;
            let c = tape.slice(cell, 1, h, h)?;
            states[step] = Some(hn);
            hc = Some((hn, c));
        }
        Ok(states.into_iter().map(|s| s.expect("every step visited")).collect())
    }

    fn stack(&self, tape: &mut Tape, states: &[Var]) -> Result<Var, ModelError> {
        let b = tape.shape(states[0])[0];
        let h = self.cfg.hidden;
        let parts = states
            .iter()
            .map(|s| tape.reshape(*s, &[b, 1, h]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(tape.concat(&parts, 1)?)
    }
}

impl Network for BiLstm {
    fn kind(&self) -> ModelKind {
        ModelKind::Bilstm
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn seq_len(&self) -> usize {
        self.cfg.seq_len
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn forward(
        &self,
        tape: &mut Tape,
        inputs: &Tensor,
        origins: &[usize],
        mode: &mut Mode,
    ) -> Result<Var, ModelError> {
        let (b, t) = self.check_inputs(inputs, origins)?;
        let mut x = tape.leaf(inputs.clone().reshaped([b, t, 1])?)?;
        let n = self.cells.len();
        let mut last = None;
        for (l, cell) in self.cells.iter().enumerate() {
            let fwd = self.run(tape, &cell[0], x, false)?;
            let bwd = self.run(tape, &cell[1], x, true)?;
            if l + 1 == n {
                last = Some(tape.concat(&[fwd[t - 1], bwd[0]], 1)?);
            } else {
                let f = self.stack(tape, &fwd)?;
                let r = self.stack(tape, &bwd)?;
                let seq = tape.concat(&[f, r], 2)?;
                x = mode.dropout(tape, seq)?;
            }
        }
        let last = last.expect("at least one layer");
        self.head.apply(tape, &self.store, last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::rng::standard_normal;
    use crate::models::gradient_check;

    fn toy() -> BiLstmConfig {
        BiLstmConfig {
            seq_len: 8,
            horizon: 3,
            hidden: 4,
            layers: 2,
        }
    }

    #[test]
    fn full_size_parameter_count() {
        let m = BiLstm::new(BiLstmConfig::default(), 42).unwrap();
        let n = m.store().num_scalars();
        assert_eq!(n, 134_414);
        assert!((n as f64 - 134_000.0).abs() <= 0.05 * 134_000.0);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let m = BiLstm::new(toy(), 1).unwrap();
        let b = m.store().value(m.cells[0][0].b).data();
        assert!(b[4..8].iter().all(|v| *v == 1.0));
    }

    #[test]
    fn output_shape_and_direction_sensitivity() {
        for seed in 0..10 {
            let m = BiLstm::new(BiLstmConfig { seq_len: 12, ..toy() }, seed).unwrap();
            let mut rng = stream(seed, Stream::Synthetic);
            let x = Tensor::from_fn([1, 12], |_| standard_normal(&mut rng));
            let mut rev = x.clone();
            rev.data_mut().reverse();
            let run = |inp: &Tensor| {
                let mut tape = Tape::new();
                let y = m.forward(&mut tape, inp, &[0], &mut Mode::Eval).unwrap();
                tape.value(y).clone()
            };
            let (a, b) = (run(&x), run(&rev));
            assert_eq!(a.shape(), &[1, 3]);
            assert_ne!(a.data(), b.data());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..2 {
            let mut m = BiLstm::new(toy(), seed).unwrap();
            let err = gradient_check(&mut m, 4, seed).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
