//! Flat binary checkpoints: magic, version, model kind, hyperparameters, then
//! parameters in declaration order as little-endian `f64`.

use std::io::{Read, Write};

use crate::autodiff::Tensor;

use super::{
    BiLstm, BiLstmConfig, ForecastModel, ModelError, ModelKind, Network, SarimaModel, SarimaOrder, TemporalEncoding,
    Transformer, TransformerConfig,
};

const MAGIC: &[u8; 8] = b"AGRBCKPT";
const VERSION: u32 = 1;

fn kind_code(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Naive => 0,
        ModelKind::Sarima => 1,
        ModelKind::Bilstm => 2,
        ModelKind::Transformer => 3,
        ModelKind::T2vTransformer => 4,
    }
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> std::io::Result<()> {
    put_u64(w, vs.len() as u64)?;
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_usize(r: &mut impl Read) -> Result<usize, ModelError> {
    usize::try_from(get_u64(r)?).map_err(|_| ModelError::Checkpoint("value out of range".into()))
}

fn get_f64(r: &mut impl Read) -> Result<f64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read) -> Result<Vec<f64>, ModelError> {
    let n = get_usize(r)?;
    if n > 1 << 28 {
        return Err(ModelError::Checkpoint(format!("implausible vector length {n}")));
    }
    (0..n).map(|_| get_f64(r)).collect()
}

fn write_params(w: &mut impl Write, net: &dyn Network) -> std::io::Result<()> {
    put_u64(w, net.store().len() as u64)?;
    for p in net.store().iter() {
        let shape = p.value().shape();
        put_u64(w, shape.len() as u64)?;
        for d in shape {
            put_u64(w, *d as u64)?;
        }
        for v in p.value().data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_params(r: &mut impl Read, net: &mut dyn Network) -> Result<(), ModelError> {
    let count = get_usize(r)?;
    let manifest = net.store().manifest();
    if count != manifest.len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} parameter tensors, found {count}",
            manifest.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (name, shape) in manifest {
        let ndim = get_usize(r)?;
        let dims = (0..ndim).map(|_| get_usize(r)).collect::<Result<Vec<_>, _>>()?;
        if dims != shape {
            return Err(ModelError::Checkpoint(format!("{name}: shape {dims:?} does not match {shape:?}")));
        }
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| get_f64(r)).collect::<Result<Vec<_>, _>>()?;
        values.push(Tensor::new(dims, data)?);
    }
    net.store_mut().restore(&values)?;
    Ok(())
}

pub fn write_checkpoint(model: &ForecastModel, mut w: impl Write) -> Result<(), ModelError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[kind_code(model.kind())])?;
    match model {
        ForecastModel::Naive { horizon } => put_u64(&mut w, *horizon as u64)?,
        ForecastModel::Sarima(m) => {
            let o = m.order;
            for v in [o.p, o.d, o.q, o.seasonal_p, o.seasonal_d, o.seasonal_q, o.m, m.cond] {
                put_u64(&mut w, v as u64)?;
            }
            for coefs in [&m.ar, &m.ma, &m.sar, &m.sma] {
                put_f64s(&mut w, coefs)?;
            }
            put_f64s(&mut w, &m.intercept.into_iter().collect::<Vec<_>>())?;
            put_f64s(&mut w, &[m.sigma2, m.aic])?;
        }
        ForecastModel::Bilstm(m) => {
            let c = m.config();
            for v in [c.seq_len, c.horizon, c.hidden, c.layers] {
                put_u64(&mut w, v as u64)?;
            }
            write_params(&mut w, m)?;
        }
        ForecastModel::Transformer(m) => {
            let c = m.config();
            for v in [c.seq_len, c.horizon, c.d_model, c.heads, c.layers, c.d_ff, c.t2v_k, c.series_len] {
                put_u64(&mut w, v as u64)?;
            }
            write_params(&mut w, m)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ForecastModel, ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    if u32::from_le_bytes(v) != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {}", u32::from_le_bytes(v))));
    }
    let mut k = [0u8; 1];
    r.read_exact(&mut k)?;
    let mut fields = |n: usize| (0..n).map(|_| get_usize(&mut r)).collect::<Result<Vec<_>, _>>();
    let model = match k[0] {
        0 => ForecastModel::Naive { horizon: fields(1)?[0] },
        1 => {
            let f = fields(8)?;
            let order = SarimaOrder::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6]);
            let (ar, ma, sar, sma) = (get_f64s(&mut r)?, get_f64s(&mut r)?, get_f64s(&mut r)?, get_f64s(&mut r)?);
            let intercept = get_f64s(&mut r)?.first().copied();
            let tail = get_f64s(&mut r)?;
            if tail.len() != 2 {
                return Err(ModelError::Checkpoint("malformed SARIMA trailer".into()));
            }
            ForecastModel::Sarima(SarimaModel {
                order,
                ar,
                ma,
                sar,
                sma,
                intercept,
                sigma2: tail[0],
                aic: tail[1],
                cond: f[7],
            })
        }
        2 => {
            let f = fields(4)?;
            let mut m = BiLstm::new(
                BiLstmConfig {
                    seq_len: f[0],
                    horizon: f[1],
                    hidden: f[2],
                    layers: f[3],
                },
                0,
            )?;
            read_params(&mut r, &mut m)?;
            ForecastModel::Bilstm(m)
        }
        code @ (3 | 4) => {
            let f = fields(8)?;
            let encoding = if code == 3 {
                TemporalEncoding::Sinusoidal
            } else {
                TemporalEncoding::Time2Vec
            };
            let cfg = TransformerConfig {
                seq_len: f[0],
                horizon: f[1],
                d_model: f[2],
                heads: f[3],
                layers: f[4],
                d_ff: f[5],
                t2v_k: f[6],
                series_len: f[7],
                encoding,
            };
            let mut m = Transformer::new(cfg, 0)?;
            read_params(&mut r, &mut m)?;
            ForecastModel::Transformer(m)
        }
        other => return Err(ModelError::Checkpoint(format!("unknown model kind code {other}"))),
    };
    Ok(model)
}
