//! Binary checkpoint: `LSPC` magic, format version, config digest, then
//! named little-endian f32 tensors (model, both Adam moments, loop state).

use std::collections::HashMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"LSPC";
pub const VERSION: u32 = 1;
const RNG_STATE: &str = "rng.state";

/// SHA-256 over the model-shaping configuration. The epoch budget and
/// checkpoint cadence are excluded so a run can be resumed with a longer
/// schedule.
pub fn config_digest(cfg: &ModelConfig) -> [u8; 32] {
    let mut c = cfg.clone();
    c.optimizer.epochs = 0;
    c.optimizer.checkpoint_every = 0;
    let text = toml::to_string(&c).expect("model config serializes");
    Sha256::digest(text.as_bytes()).into()
}

pub fn digest_hex(d: &[u8; 32]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_tensor(out: &mut impl Write, name: &str, t: &Tensor<f32>) -> std::io::Result<()> {
    let bytes = name.as_bytes();
    out.write_all(&(bytes.len() as u16).to_le_bytes())?;
    out.write_all(bytes)?;
    out.write_all(&[t.shape().len() as u8])?;
    for &d in t.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn state_tensors(state: &ModelState) -> Vec<(String, Tensor<f32>)> {
    let mut all = Vec::new();
    for (group, m) in [("model", &state.model), ("adam_m", &state.adam_m), ("adam_v", &state.adam_v)] {
        for (name, t) in m.named() {
            all.push((format!("{group}.{name}"), t.clone()));
        }
    }
    let pos = Tensor::from_vec(&[2], vec![state.epochs_done as f32, state.step as f32]).expect("shape");
    all.push((RNG_STATE.to_string(), pos));
    all
}

pub fn encode_checkpoint(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(&state.config));
    for (name, t) in state_tensors(state) {
        write_tensor(&mut out, &name, &t).expect("writing to memory");
    }
    out
}

pub fn save_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    if state.step >= 1 << 24 || state.epochs_done >= 1 << 24 {
        return Err(Error::Checkpoint("loop position exceeds the exactly representable f32 range".into()));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_checkpoint(state)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Rebuilds a [`ModelState`] for `config` from checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8], config: &ModelConfig) -> Result<ModelState> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    if digest != config_digest(config) {
        return Err(Error::Checkpoint(format!(
            "config digest {} does not match the supplied config ({})",
            digest_hex(&digest),
            digest_hex(&config_digest(config))
        )));
    }
    let mut tensors: HashMap<String, Tensor<f32>> = HashMap::new();
    while !r.buf.is_empty() {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if tensors.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }

    let mut state = ModelState::init(config)?;
    for (group, m) in [("model", &mut state.model), ("adam_m", &mut state.adam_m), ("adam_v", &mut state.adam_v)] {
        for (name, dst) in m.named_mut() {
            let key = format!("{group}.{name}");
            let src = tensors.remove(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src;
        }
    }
    let pos = tensors.remove(RNG_STATE).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{RNG_STATE}`")))?;
    if pos.shape() != [2] {
        return Err(Error::Checkpoint(format!("`{RNG_STATE}` must have shape [2]")));
    }
    state.epochs_done = pos.data()[0] as u64;
    state.step = pos.data()[1] as u64;
    if let Some(extra) = tensors.keys().min() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(state)
}

pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<ModelState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, config).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::tests::tiny_config;

    #[test]
    fn round_trip_is_exact() {
        let cfg = tiny_config();
        let mut state = ModelState::init(&cfg).unwrap();
        state.adam_m.spk_head.weight.fill(0.25);
        state.step = 17;
        state.epochs_done = 3;
        let back = decode_checkpoint(&encode_checkpoint(&state), &cfg).unwrap();
        assert_eq!(back.model, state.model);
        assert_eq!(back.adam_m, state.adam_m);
        assert_eq!(back.adam_v, state.adam_v);
        assert_eq!((back.step, back.epochs_done), (17, 3));
    }

    #[test]
    fn mismatches_are_rejected() {
        let cfg = tiny_config();
        let state = ModelState::init(&cfg).unwrap();
        let bytes = encode_checkpoint(&state);

        let mut other = cfg.clone();
        other.decoder.hidden = 6;
        assert!(decode_checkpoint(&bytes, &other).unwrap_err().to_string().contains("digest"));

        let mut longer = cfg.clone();
        longer.optimizer.epochs = 99;
        assert!(decode_checkpoint(&bytes, &longer).is_ok());

        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(decode_checkpoint(&v2, &cfg).unwrap_err().to_string().contains("version 2"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, &cfg).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3], &cfg).is_err());
    }
}
