//! Binary formats: single tensors (`MFTK`) and model checkpoints (`MFCK`).
//! All integers and payloads are little-endian; values are stored as f32.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"MFTK";
pub const TENSOR_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("{}: truncated at byte {}", self.what, self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format(format!("{}: invalid UTF-8 string", self.what)))
    }

    fn tensor_body(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64()?).map_err(|_| Error::Format("dimension overflows usize".into()))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("{}: shape {shape:?} overflows", self.what)))?;
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| Error::Format("payload overflows".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(format!("{}: {e}", self.what)))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor_body(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn check_header(r: &mut Reader, magic: &[u8; 4], version: u32) -> Result<()> {
    if r.take(4)? != magic {
        return Err(Error::Format(format!("{}: bad magic bytes", r.what)));
    }
    let v = r.u32()?;
    if v != version {
        return Err(Error::Format(format!("{}: unsupported version {v} (expected {version})", r.what)));
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    put_u32(&mut out, TENSOR_VERSION);
    put_tensor_body(&mut out, t);
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf: bytes, pos: 0, what: "tensor file" };
    check_header(&mut r, TENSOR_MAGIC, TENSOR_VERSION)?;
    let t = r.tensor_body()?;
    r.finish()?;
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u32,
    pub config_hash: u64,
    /// Full configuration text the model was trained with.
    pub config_text: String,
    pub store: ParamStore,
}

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;

impl Checkpoint {
    /// Tensors are written in name order, parameters before buffers.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, self.epoch);
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        put_string(&mut out, &self.config_text);
        let n = self.store.params().len() + self.store.buffers().len();
        put_u32(&mut out, n as u32);
        for (kind, map) in [(KIND_PARAM, self.store.params()), (KIND_BUFFER, self.store.buffers())] {
            for (name, t) in map {
                out.push(kind);
                put_string(&mut out, name);
                put_tensor_body(&mut out, t);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0, what: "checkpoint" };
        check_header(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let epoch = r.u32()?;
        let config_hash = r.u64()?;
        let config_text = r.string()?;
        let n = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let kind = r.take(1)?[0];
            let name = r.string()?;
            let t = r.tensor_body()?;
            match kind {
                KIND_PARAM => store.insert(name, t),
                KIND_BUFFER => store.insert_buffer(name, t),
                k => return Err(Error::Format(format!("checkpoint: unknown tensor kind {k} for {name}"))),
            }
        }
        r.finish()?;
        Ok(Self {
            epoch,
            config_hash,
            config_text,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-3_f32 as f64, 7.0]).unwrap();
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_bad_headers() {
        let mut b = encode_tensor(&Tensor::scalar(1.0));
        b[0] = b'X';
        assert!(matches!(decode_tensor(&b), Err(Error::Format(_))));
        let mut b = encode_tensor(&Tensor::scalar(1.0));
        b[4] = 9;
        assert!(matches!(decode_tensor(&b), Err(Error::Format(_))));
        let b = encode_tensor(&Tensor::zeros(&[4]));
        assert!(decode_tensor(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn checkpoint_rewrite_is_identical() {
        let mut store = ParamStore::new();
        store.insert("b.weight", Tensor::new(vec![2], vec![0.25, -2.0]).unwrap());
        store.insert("a.bias", Tensor::scalar(1.5));
        store.init_batch_norm("a.bn", 3);
        let ck = Checkpoint {
            epoch: 4,
            config_hash: 0xdead_beef,
            config_text: "model.d=8\n".into(),
            store,
        };
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
    }
}
