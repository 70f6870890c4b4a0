//! Encoder-only Transformer with either fixed sinusoidal or Time2Vec
//! temporal encoding. The two variants share every other layer, its shape and
//! its initialisation draws.

use crate::autodiff::rng::{stream, Stream};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};

use super::encoding::{init_t2v_from, sinusoidal_pe, t2v_layer, T2V_F_HIGH, T2V_F_LOW, T2V_K};
use super::nn::{LayerNorm, Linear, Mode};
use super::{ModelError, ModelKind, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalEncoding {
    Sinusoidal,
    Time2Vec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub seq_len: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub t2v_k: usize,
    /// Length of the full series; Time2Vec normalises global indices by it.
    pub series_len: usize,
    pub encoding: TemporalEncoding,
}

impl TransformerConfig {
    pub fn new(encoding: TemporalEncoding, series_len: usize) -> Self {
        Self {
            seq_len: 90,
            horizon: 14,
            d_model: 64,
            heads: 4,
            layers: 2,
            d_ff: 256,
            t2v_k: T2V_K,
            series_len,
            encoding,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad("d_model must be even and positive");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by the head count");
        }
        if self.layers == 0 || self.seq_len == 0 || self.horizon == 0 || self.d_ff == 0 {
            return bad("layer count, seq_len, horizon and d_ff must be positive");
        }
        if self.encoding == TemporalEncoding::Time2Vec && (self.t2v_k < 2 || self.series_len < 2) {
            return bad("Time2Vec needs k >= 2 and a series of at least 2 points");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct T2vParams {
    omega: ParamId,
    phi: ParamId,
    proj: Linear,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    cfg: TransformerConfig,
    store: ParamStore,
    embed: Linear,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    head: Linear,
    t2v: Option<T2vParams>,
    pe: Option<Tensor>,
}

impl Transformer {
    /// Shared layers draw from the init stream of `seed` in declaration
    /// order; Time2Vec parameters come last and draw from the encoding stream.
    pub fn new(cfg: TransformerConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut rng = stream(seed, Stream::Init);
        let mut store = ParamStore::new();
        let embed = Linear::new(&mut store, "embed", 1, d, &mut rng);
        let layers = (0..cfg.layers)
            .map(|l| {
                let name = |s: &str| format!("layer{l}.{s}");
                EncoderLayer {
                    ln1: LayerNorm::new(&mut store, &name("ln1"), d),
                    qkv: Linear::new(&mut store, &name("qkv"), d, 3 * d, &mut rng),
                    out: Linear::new(&mut store, &name("attn_out"), d, d, &mut rng),
                    ln2: LayerNorm::new(&mut store, &name("ln2"), d),
                    ff1: Linear::new(&mut store, &name("ff1"), d, cfg.d_ff, &mut rng),
                    ff2: Linear::new(&mut store, &name("ff2"), cfg.d_ff, d, &mut rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(&mut store, "final_ln", d);
        let head = Linear::new(&mut store, "head", d, cfg.horizon, &mut rng);
        let (t2v, pe) = match cfg.encoding {
            TemporalEncoding::Sinusoidal => (None, Some(sinusoidal_pe(cfg.seq_len, d)?)),
            TemporalEncoding::Time2Vec => {
                let k = cfg.t2v_k;
                let mut enc_rng = stream(seed, Stream::Encoding);
                let enc = init_t2v_from(k, T2V_F_LOW, T2V_F_HIGH, &mut enc_rng)?;
                let omega = store.add("t2v.omega", Tensor::new([1, k], enc.omega)?);
                let phi = store.add("t2v.phi", Tensor::new([k], enc.phi)?);
                let proj = Linear::new(&mut store, "t2v.proj", k, d, &mut enc_rng);
                (Some(T2vParams { omega, phi, proj }), None)
            }
        };
        Ok(Self {
            cfg,
            store,
            embed,
            layers,
            final_ln,
            head,
            t2v,
            pe,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    fn attention(
        &self,
        tape: &mut Tape,
        layer: &EncoderLayer,
        h: Var,
        last_only: bool,
    ) -> Result<Var, ModelError> {
        let qkv = layer.qkv.apply(tape, &self.store, h)?;
        let ctx = tape.attention(qkv, self.cfg.heads, last_only)?;
        layer.out.apply(tape, &self.store, ctx)
    }

    fn encode(&self, tape: &mut Tape, b: usize, origins: &[usize]) -> Result<Var, ModelError> {
        let t = self.cfg.seq_len;
        if let Some(pe) = &self.pe {
            return Ok(tape.leaf(pe.clone())?);
        }
        let p = self.t2v.as_ref().expect("t2v parameters exist when no fixed encoding");
        let denom = (self.cfg.series_len - 1) as f64;
        let mut taus = Vec::with_capacity(b * t);
        for &o in origins {
            if o + t > self.cfg.series_len {
                return Err(ModelError::Config(format!(
                    "window at {o} extends past the configured series length {}",
                    self.cfg.series_len
                )));
            }
            taus.extend((0..t).map(|i| (o + i) as f64 / denom));
        }
        let tau = tape.leaf(Tensor::new([b, t, 1], taus)?)?;
        let omega = tape.param(&self.store, p.omega)?;
        let phi = tape.param(&self.store, p.phi)?;
        let feats = t2v_layer(tape, tau, omega, phi)?;
        p.proj.apply(tape, &self.store, feats)
    }
}

impl Network for Transformer {
    fn kind(&self) -> ModelKind {
        match self.cfg.encoding {
            TemporalEncoding::Sinusoidal => ModelKind::Transformer,
            TemporalEncoding::Time2Vec => ModelKind::T2vTransformer,
        }
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
        let d = self.cfg.d_model;
        let x = tape.leaf(inputs.clone().reshaped([b, t, 1])?)?;
        let x = self.embed.apply(tape, &self.store, x)?;
        let enc = self.encode(tape, b, origins)?;
        let x = tape.add(x, enc)?;
        let mut x = mode.dropout(tape, x)?;
        let n_layers = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            // only the final token reaches the head, so the last layer
            // computes queries and the feed-forward for it alone
            let last_only = l + 1 == n_layers;
            let h = layer.ln1.apply(tape, &self.store, x)?;
            let a = self.attention(tape, layer, h, last_only)?;
            let a = mode.dropout(tape, a)?;
            let resid = if last_only { tape.slice(x, 1, t - 1, 1)? } else { x };
            let x1 = tape.add(resid, a)?;
            let h2 = layer.ln2.apply(tape, &self.store, x1)?;
            let f = layer.ff1.apply(tape, &self.store, h2)?;
            let f = tape.gelu(f)?;
            let f = mode.dropout(tape, f)?;
            let f = layer.ff2.apply(tape, &self.store, f)?;
            let f = mode.dropout(tape, f)?;
            x = tape.add(x1, f)?;
        }
        let x = self.final_ln.apply(tape, &self.store, x)?;
        let x = tape.reshape(x, &[b, d])?;
        self.head.apply(tape, &self.store, x)
    }
}
