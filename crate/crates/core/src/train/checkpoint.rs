//! Checkpoint file format.
//!
//! Layout: magic, format version, payload length, CRC32 of the payload,
//! then the payload — a flat sequence of named records (u64 scalars, f64
//! scalars, u64 lists, and shape-tagged little-endian f32 arrays) in a
//! fixed order, so saving the same state twice is byte-identical.
//!
//! RNG state is not stored separately: every stream is derived statelessly
//! from `root_seed` and the counters saved here, so a resumed run replays
//! the exact random choices of an uninterrupted one.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::train::optim::{AdamState, LrSchedule};

const MAGIC: &[u8; 8] = b"WLMCKPT\0";
const VERSION: u32 = 1;

/// Everything needed to resume training step-for-step.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub schedule: LrSchedule,
    pub params: ModelParams,
    pub adam: AdamState,
    pub step: u64,
    pub epoch: u64,
    /// Index of the next window within the current epoch plan.
    pub epoch_pos: u64,
    pub root_seed: u64,
    pub best_valid_bits: f64,
    pub evals_since_improve: u64,
}

enum Value {
    U64(u64),
    F64(f64),
    U64List(Vec<u64>),
    F32Array { shape: Vec<usize>, data: Vec<f32> },
}

fn push_record(out: &mut Vec<u8>, name: &str, v: &Value) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    match v {
        Value::U64(x) => {
            out.push(0);
            out.extend_from_slice(&x.to_le_bytes());
        }
        Value::F64(x) => {
            out.push(1);
            out.extend_from_slice(&x.to_bits().to_le_bytes());
        }
        Value::U64List(xs) => {
            out.push(2);
            out.extend_from_slice(&(xs.len() as u32).to_le_bytes());
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Value::F32Array { shape, data } => {
            out.push(3);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &f in data {
                out.extend_from_slice(&f.to_bits().to_le_bytes());
            }
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt(format!(
                "record truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn parse_records(payload: &[u8]) -> Result<HashMap<String, Value>> {
    let mut c = Cursor { bytes: payload, pos: 0 };
    let mut map = HashMap::new();
    while c.pos < payload.len() {
        let name_len = c.u16()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Corrupt("record name is not UTF-8".into()))?;
        let kind = c.u8()?;
        let value = match kind {
            0 => Value::U64(c.u64()?),
            1 => Value::F64(f64::from_bits(c.u64()?)),
            2 => {
                let n = c.u32()? as usize;
                let mut xs = Vec::with_capacity(n);
                for _ in 0..n {
                    xs.push(c.u64()?);
                }
                Value::U64List(xs)
            }
            3 => {
                let ndim = c.u8()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(c.u32()? as usize);
                }
                let numel: usize = shape.iter().product();
                let raw = c.take(numel * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_bits(u32::from_le_bytes(b.try_into().expect("4 bytes"))))
                    .collect();
                Value::F32Array { shape, data }
            }
            other => return Err(Error::Corrupt(format!("unknown record kind {other}"))),
        };
        map.insert(name, value);
    }
    Ok(map)
}

fn serialize(ckpt: &Checkpoint) -> Vec<u8> {
    let mut p = Vec::new();
    let cfg = &ckpt.config;
    let u = Value::U64;
    push_record(&mut p, "config.chunk_len", &u(cfg.chunk_len as u64));
    push_record(&mut p, "config.conv_channels", &Value::U64List(cfg.conv_channels.iter().map(|&x| x as u64).collect()));
    push_record(&mut p, "config.conv_strides", &Value::U64List(cfg.conv_strides.iter().map(|&x| x as u64).collect()));
    push_record(&mut p, "config.conv_kernel", &u(cfg.conv_kernel as u64));
    push_record(&mut p, "config.embed_dim", &u(cfg.embed_dim as u64));
    push_record(&mut p, "config.n_layers", &u(cfg.n_layers as u64));
    push_record(&mut p, "config.ff_dim", &u(cfg.ff_dim as u64));
    push_record(&mut p, "config.n_heads", &u(cfg.n_heads as u64));
    push_record(&mut p, "config.attn_dropout", &Value::F64(cfg.attn_dropout as f64));
    push_record(&mut p, "config.token_dropout", &Value::F64(cfg.token_dropout as f64));
    push_record(&mut p, "config.conv_dropout", &Value::F64(cfg.conv_dropout as f64));
    push_record(&mut p, "config.head_dims", &Value::U64List(cfg.head_dims.iter().map(|&x| x as u64).collect()));
    push_record(&mut p, "config.head_dropout", &Value::F64(cfg.head_dropout as f64));
    push_record(&mut p, "config.n_tokens_train", &u(cfg.n_tokens_train as u64));
    push_record(&mut p, "schedule.lr_initial", &Value::F64(ckpt.schedule.lr_initial as f64));
    push_record(&mut p, "schedule.lr_final", &Value::F64(ckpt.schedule.lr_final as f64));
    push_record(&mut p, "schedule.switch_step", &u(ckpt.schedule.switch_step));
    push_record(&mut p, "train.step", &u(ckpt.step));
    push_record(&mut p, "train.epoch", &u(ckpt.epoch));
    push_record(&mut p, "train.epoch_pos", &u(ckpt.epoch_pos));
    push_record(&mut p, "train.root_seed", &u(ckpt.root_seed));
    push_record(&mut p, "train.best_valid_bits", &Value::F64(ckpt.best_valid_bits));
    push_record(&mut p, "train.evals_since_improve", &u(ckpt.evals_since_improve));
    push_record(&mut p, "adam.step", &u(ckpt.adam.step));
    ckpt.params.for_each(|name, t| {
        push_record(
            &mut p,
            &format!("param.{name}"),
            &Value::F32Array { shape: t.shape().to_vec(), data: t.data().to_vec() },
        );
    });
    let mut idx = 0usize;
    ckpt.params.for_each(|name, _| {
        push_record(
            &mut p,
            &format!("adam.m.{name}"),
            &Value::F32Array { shape: vec![ckpt.adam.m[idx].len()], data: ckpt.adam.m[idx].clone() },
        );
        push_record(
            &mut p,
            &format!("adam.v.{name}"),
            &Value::F32Array { shape: vec![ckpt.adam.v[idx].len()], data: ckpt.adam.v[idx].clone() },
        );
        idx += 1;
    });
    p
}

/// Encode a checkpoint to bytes (header + checksummed payload).
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let payload = serialize(ckpt);
    let mut out = Vec::with_capacity(payload.len() + 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

/// Decode checkpoint bytes, verifying magic, version, and checksum before
/// touching any state.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(Error::Corrupt("missing checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion { found: version, expected: VERSION });
    }
    let payload_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let stored_crc = u32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes"));
    let payload = bytes
        .get(24..24 + payload_len)
        .ok_or_else(|| Error::Corrupt("payload shorter than header declares".into()))?;
    if crc32fast::hash(payload) != stored_crc {
        return Err(Error::Corrupt("payload checksum mismatch".into()));
    }
    let mut map = parse_records(payload)?;

    let mut take_u64 = |name: &str| -> Result<u64> {
        match map.remove(name) {
            Some(Value::U64(x)) => Ok(x),
            _ => Err(Error::Corrupt(format!("missing u64 record {name}"))),
        }
    };
    let chunk_len = take_u64("config.chunk_len")? as usize;
    let conv_kernel = take_u64("config.conv_kernel")? as usize;
    let embed_dim = take_u64("config.embed_dim")? as usize;
    let n_layers = take_u64("config.n_layers")? as usize;
    let ff_dim = take_u64("config.ff_dim")? as usize;
    let n_heads = take_u64("config.n_heads")? as usize;
    let n_tokens_train = take_u64("config.n_tokens_train")? as usize;
    let switch_step = take_u64("schedule.switch_step")?;
    let step = take_u64("train.step")?;
    let epoch = take_u64("train.epoch")?;
    let epoch_pos = take_u64("train.epoch_pos")?;
    let root_seed = take_u64("train.root_seed")?;
    let evals_since_improve = take_u64("train.evals_since_improve")?;
    let adam_step = take_u64("adam.step")?;

    let mut take_f64 = |name: &str| -> Result<f64> {
        match map.remove(name) {
            Some(Value::F64(x)) => Ok(x),
            _ => Err(Error::Corrupt(format!("missing f64 record {name}"))),
        }
    };
    let attn_dropout = take_f64("config.attn_dropout")? as f32;
    let token_dropout = take_f64("config.token_dropout")? as f32;
    let conv_dropout = take_f64("config.conv_dropout")? as f32;
    let head_dropout = take_f64("config.head_dropout")? as f32;
    let lr_initial = take_f64("schedule.lr_initial")? as f32;
    let lr_final = take_f64("schedule.lr_final")? as f32;
    let best_valid_bits = take_f64("train.best_valid_bits")?;

    let mut take_list = |name: &str| -> Result<Vec<usize>> {
        match map.remove(name) {
            Some(Value::U64List(xs)) => Ok(xs.into_iter().map(|x| x as usize).collect()),
            _ => Err(Error::Corrupt(format!("missing list record {name}"))),
        }
    };
    let channels = take_list("config.conv_channels")?;
    let strides = take_list("config.conv_strides")?;
    let head_dims = take_list("config.head_dims")?;
    let to5 = |v: Vec<usize>, what: &str| -> Result<[usize; 5]> {
        v.try_into().map_err(|_| Error::Corrupt(format!("{what} must have 5 entries")))
    };

    let config = ModelConfig {
        chunk_len,
        conv_channels: to5(channels, "conv_channels")?,
        conv_strides: to5(strides, "conv_strides")?,
        conv_kernel,
        embed_dim,
        n_layers,
        ff_dim,
        n_heads,
        attn_dropout,
        token_dropout,
        conv_dropout,
        head_dims,
        head_dropout,
        n_tokens_train,
    };
    config.validate().map_err(|e| Error::Corrupt(format!("stored config invalid: {e}")))?;

    let mut params = ModelParams::zeros(&config)?;
    let mut fill_err: Option<Error> = None;
    params.for_each_mut(|name, t| {
        if fill_err.is_some() {
            return;
        }
        match map.remove(&format!("param.{name}")) {
            Some(Value::F32Array { shape, data }) if shape == t.shape() => {
                t.data_mut().copy_from_slice(&data);
            }
            Some(_) => fill_err = Some(Error::Corrupt(format!("param {name} has wrong shape"))),
            None => fill_err = Some(Error::Corrupt(format!("missing param {name}"))),
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }

    let mut adam = AdamState::new(&params);
    adam.step = adam_step;
    let mut idx = 0usize;
    let mut moment_err: Option<Error> = None;
    params.for_each(|name, t| {
        if moment_err.is_some() {
            idx += 1;
            return;
        }
        for (tag, dst) in [("m", &mut adam.m), ("v", &mut adam.v)] {
            match map.remove(&format!("adam.{tag}.{name}")) {
                Some(Value::F32Array { data, .. }) if data.len() == t.numel() => dst[idx] = data,
                _ => moment_err = Some(Error::Corrupt(format!("missing adam.{tag}.{name}"))),
            }
        }
        idx += 1;
    });
    if let Some(e) = moment_err {
        return Err(e);
    }

    Ok(Checkpoint {
        config,
        schedule: LrSchedule { lr_initial, lr_final, switch_step },
        params,
        adam,
        step,
        epoch,
        epoch_pos,
        root_seed,
        best_valid_bits,
        evals_since_improve,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_ckpt() -> Checkpoint {
        let config = ModelConfig {
            chunk_len: 16,
            conv_channels: [4, 4, 4, 4, 4],
            conv_strides: [2, 3, 2, 3, 2],
            conv_kernel: 3,
            embed_dim: 8,
            n_layers: 1,
            ff_dim: 8,
            n_heads: 2,
            attn_dropout: 0.1,
            token_dropout: 0.1,
            conv_dropout: 0.2,
            head_dims: vec![8, 256],
            head_dropout: 0.2,
            n_tokens_train: 2,
        };
        let params = ModelParams::init(&config, 77).unwrap();
        let mut adam = AdamState::new(&params);
        adam.step = 13;
        adam.m[0][0] = 0.125;
        adam.v[2][1] = -3.5e-7;
        Checkpoint {
            config,
            schedule: LrSchedule::default(),
            params,
            adam,
            step: 13,
            epoch: 1,
            epoch_pos: 5,
            root_seed: 42,
            best_valid_bits: 7.25,
            evals_since_improve: 2,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact_and_idempotent() {
        let ckpt = tiny_ckpt();
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        for ((n1, t1), (n2, t2)) in ckpt.params.named().iter().zip(back.params.named().iter()) {
            assert_eq!(n1, n2);
            let a: Vec<u32> = t1.data().iter().map(|f| f.to_bits()).collect();
            let b: Vec<u32> = t2.data().iter().map(|f| f.to_bits()).collect();
            assert_eq!(a, b, "param {n1} not bit-exact");
        }
        assert_eq!(back.adam.m[0][0].to_bits(), 0.125f32.to_bits());
        assert_eq!(back.adam.v[2][1].to_bits(), (-3.5e-7f32).to_bits());
        assert_eq!(back.step, 13);
        assert_eq!(back.best_valid_bits, 7.25);
        // save → load → save is byte-identical
        let again = encode_checkpoint(&back);
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncated_file_is_a_checksum_error() {
        let bytes = encode_checkpoint(&tiny_ckpt());
        let cut = &bytes[..bytes.len() - 7];
        assert!(matches!(decode_checkpoint(cut), Err(Error::Corrupt(_))));
    }

    #[test]
    fn flipped_byte_is_a_checksum_error() {
        let mut bytes = encode_checkpoint(&tiny_ckpt());
        let n = bytes.len();
        bytes[n / 2] ^= 0xff;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn version_bump_is_unsupported() {
        let mut bytes = encode_checkpoint(&tiny_ckpt());
        bytes[8] = 9;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::UnsupportedVersion { found: 9, expected: 1 })
        ));
    }
}
