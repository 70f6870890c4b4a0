use std::io::Write;

use crate::autodiff::rng::{permutation, stream, Stream};
use crate::autodiff::{adam_step, huber_loss, AdamConfig, Tape, Tensor, TensorError};
use crate::split::WindowSet;

use super::nn::Mode;
use super::{ModelError, Network};

const EVAL_BATCH: usize = 64;

/// Shared neural training protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_factor: f64,
    /// Stagnant epochs before the learning rate is multiplied by `plateau_factor`.
    pub plateau_patience: usize,
    /// Stagnant epochs before training stops.
    pub early_stop_patience: usize,
    /// An epoch improves only if validation loss drops below the best by more
    /// than this absolute amount.
    pub min_delta: f64,
    pub huber_delta: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 150,
            plateau_factor: 0.5,
            plateau_patience: 10,
            early_stop_patience: 20,
            min_delta: 1e-4,
            huber_delta: 1.0,
            dropout: 0.1,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and epoch budget must be positive".into());
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau factor {}", self.plateau_factor));
        }
        if self.min_delta < 0.0 || self.huber_delta <= 0.0 {
            return bad("min_delta must be non-negative and huber_delta positive".into());
        }
        Ok(())
    }
}

/// Dropout used for a commodity unless the configuration overrides it.
pub fn default_dropout(commodity: &str) -> f64 {
    let key: String = commodity
        .to_ascii_lowercase()
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect();
    match key.as_str() {
        "greenchilli" | "greenchili" | "sweetpumpkin" => 0.3,
        _ => 0.1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Returned by the per-epoch callback of [`train_until`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochControl {
    Continue,
    Halt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights were restored (lowest validation loss).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// The epoch callback ended training.
    pub halted: bool,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }

    pub fn write_history(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,lr")?;
        for r in &self.history {
            writeln!(w, "{},{:.12e},{:.12e},{:.6e}", r.epoch, r.train_loss, r.val_loss, r.lr)?;
        }
        Ok(())
    }
}

fn gather(ws: &WindowSet, idx: &[usize]) -> Result<(Tensor, Tensor, Vec<usize>), ModelError> {
    let (t, h) = (ws.seq_len(), ws.horizon());
    let mut x = Vec::with_capacity(idx.len() * t);
    let mut y = Vec::with_capacity(idx.len() * h);
    let mut o = Vec::with_capacity(idx.len());
    for &i in idx {
        x.extend_from_slice(ws.input(i));
        y.extend_from_slice(ws.target(i));
        o.push(ws.origin(i));
    }
    Ok((Tensor::new([idx.len(), t], x)?, Tensor::new([idx.len(), h], y)?, o))
}

fn non_finite(e: ModelError, epoch: usize, batch: usize) -> ModelError {
    match e {
        ModelError::Tensor(TensorError::NonFinite(_)) | ModelError::Tensor(TensorError::NonFiniteGradient(_)) => {
            ModelError::NonFiniteLoss { epoch, batch }
        }
        other => other,
    }
}

/// Scaled predictions for every window, row-major `[n, horizon]`.
pub fn predict_scaled<N: Network + ?Sized>(net: &N, windows: &WindowSet) -> Result<Vec<Vec<f64>>, ModelError> {
    let h = net.horizon();
    let mut out = Vec::with_capacity(windows.len());
    let all: Vec<usize> = (0..windows.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, _, o) = gather(windows, chunk)?;
        let mut tape = Tape::new();
        let y = net.forward(&mut tape, &x, &o, &mut Mode::Eval)?;
        out.extend(tape.value(y).data().chunks(h).map(<[f64]>::to_vec));
    }
    Ok(out)
}

fn validation_loss<N: Network + ?Sized>(net: &N, val: &WindowSet, delta: f64) -> Result<f64, ModelError> {
    let preds = predict_scaled(net, val)?;
    let h = net.horizon();
    let flat: Vec<f64> = preds.into_iter().flatten().collect();
    let target: Vec<f64> = (0..val.len()).flat_map(|i| val.target(i).to_vec()).collect();
    let n = val.len();
    Ok(huber_loss(&Tensor::new([n, h], flat)?, &Tensor::new([n, h], target)?, delta)?)
}

/// Mini-batch Adam on the Huber loss with reduce-on-plateau and early
/// stopping; the weights with the lowest validation loss are restored.
pub fn train<N: Network + ?Sized>(
    net: &mut N,
    train_set: &WindowSet,
    val_set: &WindowSet,
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    train_until(net, train_set, val_set, cfg, |_, _| EpochControl::Continue)
}

/// [`train`] with a callback run after every epoch on the current weights.
pub fn train_until<N: Network + ?Sized>(
    net: &mut N,
    train_set: &WindowSet,
    val_set: &WindowSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &N) -> EpochControl,
) -> Result<TrainReport, ModelError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(ModelError::EmptyWindows);
    }
    if train_set.seq_len() != net.seq_len() {
        return Err(ModelError::WindowLength {
            expected: net.seq_len(),
            got: train_set.seq_len(),
        });
    }
    let adam = AdamConfig::default();
    let mut shuffle_rng = stream(cfg.seed, Stream::Shuffle);
    let mut drop_rng = stream(cfg.seed, Stream::Dropout);
    let mut lr = cfg.lr;
    let mut history = Vec::new();
    let mut reference = f64::INFINITY;
    let (mut best_val, mut best_epoch) = (f64::INFINITY, 0);
    let mut best_weights = net.store().snapshot();
    let (mut stagnant, mut plateau) = (0, 0);
    let (mut stopped_early, mut halted) = (false, false);

    for epoch in 1..=cfg.max_epochs {
        let order = permutation(&mut shuffle_rng, train_set.len());
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y, o) = gather(train_set, idx)?;
            let mut tape = Tape::new();
            let mut mode = Mode::Train {
                rng: &mut drop_rng,
                dropout: cfg.dropout,
            };
            let step = (|| {
                let pred = net.forward(&mut tape, &x, &o, &mut mode)?;
                let target = tape.leaf(y)?;
                let loss = tape.huber(pred, target, cfg.huber_delta)?;
                let value = tape.value(loss).data()[0];
                tape.backward(loss, net.store_mut())?;
                adam_step(net.store_mut(), lr, &adam)?;
                Ok::<f64, ModelError>(value)
            })();
            let value = step.map_err(|e| non_finite(e, epoch, bi))?;
            loss_sum += value * idx.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = validation_loss(&*net, val_set, cfg.huber_delta)?;
        if !val_loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch, batch: 0 });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        history.push(record);
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_weights = net.store().snapshot();
        }
        if val_loss < reference - cfg.min_delta {
            reference = val_loss;
            stagnant = 0;
            plateau = 0;
        } else {
            stagnant += 1;
            plateau += 1;
            if plateau >= cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                plateau = 0;
            }
            if stagnant >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
        if on_epoch(&record, &*net) == EpochControl::Halt {
            halted = true;
            break;
        }
    }
    net.store_mut().restore(&best_weights)?;
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_loss: best_val,
        stopped_early,
        halted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BiLstm, BiLstmConfig, TemporalEncoding, Transformer, TransformerConfig};
    use crate::split::{make_windows, WindowConfig};

    fn windows(series: &[f64], range: std::ops::Range<usize>, t: usize, h: usize) -> WindowSet {
        make_windows(
            series,
            range,
            WindowConfig {
                seq_len: t,
                horizon: h,
                stride: 1,
            },
        )
        .unwrap()
    }

    fn toy_transformer(n: usize) -> Transformer {
        Transformer::new(
            TransformerConfig {
                seq_len: 12,
                horizon: 4,
                d_model: 8,
                heads: 2,
                layers: 1,
                d_ff: 16,
                t2v_k: 4,
                series_len: n,
                encoding: TemporalEncoding::Time2Vec,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn dropout_defaults() {
        assert_eq!(default_dropout("green_chilli"), 0.3);
        assert_eq!(default_dropout("Sweet Pumpkin"), 0.3);
        assert_eq!(default_dropout("garlic"), 0.1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { dropout: 1.0, ..Default::default() },
            TrainConfig { plateau_patience: 0, ..Default::default() },
            TrainConfig { early_stop_patience: 0, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn toy_bilstm() -> BiLstm {
        BiLstm::new(
            BiLstmConfig {
                seq_len: 12,
                horizon: 4,
                hidden: 8,
                layers: 2,
            },
            1,
        )
        .unwrap()
    }

    fn toy_sinusoidal(n: usize) -> Transformer {
        let mut m = toy_transformer(n);
        let cfg = TransformerConfig {
            encoding: TemporalEncoding::Sinusoidal,
            ..m.config().clone()
        };
        m = Transformer::new(cfg, 1).unwrap();
        m
    }

    fn check_constant<N: Network>(mut m: N, bound: f64) {
        let series = vec![0.6; 2000];
        let (tr, va) = (windows(&series, 0..1600, 12, 4), windows(&series, 1600..1800, 12, 4));
        let cfg = TrainConfig {
            dropout: 0.0,
            ..Default::default()
        };
        let rep = train(&mut m, &tr, &va, &cfg).unwrap();
        let first = rep.history.iter().position(|r| r.train_loss < bound);
        assert!(first.is_some_and(|e| e < 20), "{:?}", rep.history);
        assert!(rep.stopped_early && rep.epochs_run() < 150);
        let restored = validation_loss(&m, &va, 1.0).unwrap();
        assert_eq!(restored, rep.best_val_loss);
        assert_eq!(rep.history[rep.best_epoch - 1].val_loss, rep.best_val_loss);
    }

    #[test]
    fn every_network_learns_a_constant() {
        check_constant(toy_sinusoidal(2000), 1e-6);
        check_constant(toy_bilstm(), 1e-6);
        // absolute-time features vary across windows and must be unlearned
        check_constant(toy_transformer(2000), 1e-5);
    }

    #[test]
    fn callback_can_halt_training() {
        let series = vec![0.6; 200];
        let (tr, va) = (windows(&series, 0..160, 12, 4), windows(&series, 160..180, 12, 4));
        let mut m = toy_transformer(200);
        let rep = train_until(&mut m, &tr, &va, &TrainConfig::default(), |r, _| {
            if r.epoch == 3 {
                EpochControl::Halt
            } else {
                EpochControl::Continue
            }
        })
        .unwrap();
        assert!(rep.halted && !rep.stopped_early);
        assert_eq!(rep.epochs_run(), 3);
    }

    #[test]
    fn lr_halves_after_plateau() {
        let series = vec![0.25; 200];
        let (tr, va) = (windows(&series, 0..160, 12, 4), windows(&series, 160..180, 12, 4));
        let mut m = toy_transformer(200);
        let rep = train(&mut m, &tr, &va, &TrainConfig::default()).unwrap();
        let lrs: Vec<f64> = rep.history.iter().map(|r| r.lr).collect();
        assert!(lrs.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] * 0.5));
        assert!(lrs.last().unwrap() < &1e-3);
    }

    #[test]
    fn identical_seeds_replay_bitwise() {
        let series: Vec<f64> = (0..150).map(|i| 0.5 + 0.4 * (i as f64 * 0.3).sin()).collect();
        let (tr, va) = (windows(&series, 0..120, 12, 4), windows(&series, 120..140, 12, 4));
        let cfg = TrainConfig { max_epochs: 3, ..Default::default() };
        let run = || {
            let mut m = BiLstm::new(
                BiLstmConfig {
                    seq_len: 12,
                    horizon: 4,
                    hidden: 4,
                    layers: 2,
                },
                7,
            )
            .unwrap();
            let r = train(&mut m, &tr, &va, &cfg).unwrap();
            (r.history, predict_scaled(&m, &va).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_empty_sets() {
        let series = vec![0.5; 60];
        let tr = windows(&series, 0..40, 12, 4);
        let empty = tr.select(&[]);
        let mut m = toy_transformer(60);
        assert!(matches!(
            train(&mut m, &tr, &empty, &TrainConfig::default()),
            Err(ModelError::EmptyWindows)
        ));
    }

    #[test]
    fn history_csv_shape() {
        let rep = TrainReport {
            history: vec![EpochRecord { epoch: 1, train_loss: 0.5, val_loss: 0.25, lr: 1e-3 }],
            best_epoch: 1,
            best_val_loss: 0.25,
            stopped_early: false,
            halted: false,
        };
        let mut buf = Vec::new();
        rep.write_history(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("epoch,train_loss,val_loss,lr\n1,"));
    }
}
