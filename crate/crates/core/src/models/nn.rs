//! Layer helpers shared by the neural forecasters.

use crate::autodiff::rng::{uniform, StreamRng};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};

use super::ModelError;

/// Dropout state for one forward pass.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut StreamRng, dropout: f64 },
}

impl Mode<'_> {
    pub(crate) fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { rng, dropout } => Ok(tape.dropout(x, 1.0 - *dropout, rng)?),
        }
    }
}

pub(crate) fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut StreamRng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| uniform(rng, -bound, bound))
}

/// Affine map `x @ w + b` with `w: [fan_in, fan_out]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weights and bias uniform on `+-sqrt(1 / fan_in)`.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut StreamRng) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform_tensor(&[fan_in, fan_out], bound, rng));
        let b = store.add(format!("{name}.b"), uniform_tensor(&[fan_out], bound, rng));
        Self { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled([d], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([d]));
        Self { gamma, beta }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let g = tape.param(store, self.gamma)?;
        let b = tape.param(store, self.beta)?;
        Ok(tape.layer_norm(x, g, b)?)
    }
}
