//! The five forecasters behind one contract: naive persistence, SARIMA, a
//! bidirectional LSTM and two Transformer variants that differ only in their
//! temporal encoding.

mod bilstm;
pub mod checkpoint;
pub mod encoding;
mod nn;
pub mod sarima;
mod train;
mod transformer;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::rng::{standard_normal, stream, uniform, Stream};
use crate::autodiff::{ParamStore, Tape, Tensor, TensorError, Var};

pub use bilstm::{BiLstm, BiLstmConfig};
pub use encoding::{init_t2v, normalize_tau, sinusoidal_pe, time2vec, T2vEncoding};
pub use nn::Mode;
pub use sarima::{sarima_fit, sarima_forecast_rolling, SarimaModel, SarimaOrder, SearchConfig};
pub use train::{default_dropout, predict_scaled, train, train_until, EpochControl, EpochRecord, TrainConfig, TrainReport};
pub use transformer::{TemporalEncoding, Transformer, TransformerConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("window length {got} does not match the model's {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("empty window set")]
    EmptyWindows,
    #[error("no SARIMA candidate converged")]
    NoConvergence,
    #[error("SARIMA forecast diverged at origin {0}")]
    Divergence(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Naive,
    Sarima,
    Bilstm,
    Transformer,
    T2vTransformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Naive,
        ModelKind::Sarima,
        ModelKind::Bilstm,
        ModelKind::Transformer,
        ModelKind::T2vTransformer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Naive => "naive",
            ModelKind::Sarima => "sarima",
            ModelKind::Bilstm => "bilstm",
            ModelKind::Transformer => "transformer",
            ModelKind::T2vTransformer => "t2v_transformer",
        }
    }

    pub fn is_neural(self) -> bool {
        matches!(self, ModelKind::Bilstm | ModelKind::Transformer | ModelKind::T2vTransformer)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown model kind `{s}`")))
    }
}

/// A differentiable forecaster mapping `[B, seq_len]` scaled windows to
/// `[B, horizon]` scaled predictions.
pub trait Network {
    fn kind(&self) -> ModelKind;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn seq_len(&self) -> usize;
    fn horizon(&self) -> usize;

    /// `origins[i]` is the global index of the first input element of row `i`.
    fn forward(&self, tape: &mut Tape, inputs: &Tensor, origins: &[usize], mode: &mut Mode)
        -> Result<Var, ModelError>;

    fn check_inputs(&self, inputs: &Tensor, origins: &[usize]) -> Result<(usize, usize), ModelError> {
        let shape = inputs.shape();
        if shape.len() != 2 {
            return Err(ModelError::Config(format!("inputs must be [batch, seq_len], got {shape:?}")));
        }
        if shape[1] != self.seq_len() {
            return Err(ModelError::WindowLength {
                expected: self.seq_len(),
                got: shape[1],
            });
        }
        if origins.len() != shape[0] {
            return Err(ModelError::Config(format!(
                "{} origins for a batch of {}",
                origins.len(),
                shape[0]
            )));
        }
        Ok((shape[0], shape[1]))
    }
}

/// Repeats the last observed value `horizon` times.
pub fn naive_predict(window: &[f64], horizon: usize) -> Result<Vec<f64>, ModelError> {
    let last = window.last().ok_or(ModelError::EmptyWindows)?;
    Ok(vec![*last; horizon])
}

/// A fitted forecaster of any kind.
#[derive(Clone, Debug)]
pub enum ForecastModel {
    Naive { horizon: usize },
    Sarima(SarimaModel),
    Bilstm(BiLstm),
    Transformer(Transformer),
}

impl ForecastModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            ForecastModel::Naive { .. } => ModelKind::Naive,
            ForecastModel::Sarima(_) => ModelKind::Sarima,
            ForecastModel::Bilstm(m) => m.kind(),
            ForecastModel::Transformer(m) => m.kind(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            ForecastModel::Naive { .. } => 0,
            ForecastModel::Sarima(m) => m.num_params(),
            ForecastModel::Bilstm(m) => m.store().num_scalars(),
            ForecastModel::Transformer(m) => m.store().num_scalars(),
        }
    }

    pub fn network(&self) -> Option<&dyn Network> {
        match self {
            ForecastModel::Bilstm(m) => Some(m),
            ForecastModel::Transformer(m) => Some(m),
            _ => None,
        }
    }

    pub fn network_mut(&mut self) -> Option<&mut dyn Network> {
        match self {
            ForecastModel::Bilstm(m) => Some(m),
            ForecastModel::Transformer(m) => Some(m),
            _ => None,
        }
    }
}

/// Largest relative error between reverse-mode and central finite-difference
/// gradients of the Huber loss on a random batch of `batch` windows, with
/// dropout 0.1 under a fixed mask. The relative error is
/// `|a - n| / max(|a|, |n|, 1e-6)` with step `1e-5`.
pub fn gradient_check<N: Network + ?Sized>(net: &mut N, batch: usize, seed: u64) -> Result<f64, ModelError> {
    const EPS: f64 = 1e-5;
    let (t, h) = (net.seq_len(), net.horizon());
    let mut rng = stream(seed, Stream::Synthetic);
    let inputs = Tensor::from_fn([batch, t], |_| 0.5 * standard_normal(&mut rng));
    let targets = Tensor::from_fn([batch, h], |_| uniform(&mut rng, 0.0, 1.0));
    let origins: Vec<usize> = (0..batch).map(|i| 3 * i + 1).collect();

    let loss_at = |net: &N, grad: Option<&mut ParamStore>| -> Result<f64, ModelError> {
        let mut drop_rng = stream(seed, Stream::Dropout);
        let mut mode = Mode::Train {
            rng: &mut drop_rng,
            dropout: 0.1,
        };
        let mut tape = Tape::new();
        let pred = net.forward(&mut tape, &inputs, &origins, &mut mode)?;
        let target = tape.leaf(targets.clone())?;
        let loss = tape.huber(pred, target, 1.0)?;
        let value = tape.value(loss).data()[0];
        if let Some(store) = grad {
            tape.backward(loss, store)?;
        }
        Ok(value)
    };

    let mut store = net.store().clone();
    store.zero_grads();
    loss_at(net, Some(&mut store))?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad().data().to_vec()).collect();

    let mut worst = 0.0f64;
    let ids: Vec<_> = net.store().ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for j in 0..net.store().value(id).numel() {
            let orig = net.store().value(id).data()[j];
            net.store_mut().value_mut(id).data_mut()[j] = orig + EPS;
            let up = loss_at(net, None)?;
            net.store_mut().value_mut(id).data_mut()[j] = orig - EPS;
            let down = loss_at(net, None)?;
            net.store_mut().value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
