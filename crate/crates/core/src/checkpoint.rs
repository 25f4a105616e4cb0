//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SITCKPT\0"
//! version  u32
//! length   u64      payload byte count
//! payload
//! crc32    u32      over the payload
//! ```
//!
//! The payload holds, in order: the model config as `key = value` text,
//! free-form metadata pairs, the epoch and step counters, the RNG state
//! (32-byte seed, stream, word position), every named `f32` tensor, and the
//! optimizer state (step count plus first and second moments per name).
//! Strings are `u32` length-prefixed UTF-8; tensors are name, rank, `u64`
//! extents and raw `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::Moments;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SITCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: Vec<(String, String)>,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, rng: &ChaCha8Rng) -> Self {
        Self {
            config,
            meta: Vec::new(),
            epoch: 0,
            step: 0,
            rng: RngState::capture(rng),
            tensors: Vec::new(),
            optimizer: None,
        }
    }

    /// Append every parameter of `store`.
    pub fn push_store(&mut self, store: &ParamStore<f32>) {
        for p in store.iter() {
            self.tensors.push((p.name.clone(), p.value.clone()));
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    /// Copy stored values into every parameter of `store`, by name.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let lookup: BTreeMap<&str, &Tensor<f32>> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in store.iter_mut() {
            let t = lookup
                .get(p.name.as_str())
                .ok_or_else(|| Error::MissingParameter(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(Error::ParameterShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            p.value = (*t).clone();
            p.grad = None;
        }
        Ok(())
    }

    /// CRC-32 of the encoded payload, as 8 hex digits.
    pub fn id(&self) -> String {
        format!("{:08x}", crc32fast::hash(&self.payload()))
    }

    fn payload(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.string(&self.config.to_kv());
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.string(k);
            w.string(v);
        }
        w.u64(self.epoch);
        w.u64(self.step);
        w.buf.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.buf.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.string(name);
            w.tensor(t);
        }
        match &self.optimizer {
            None => w.buf.push(0),
            Some(o) => {
                w.buf.push(1);
                w.u64(o.step);
                w.u32(o.moments.len() as u32);
                for (name, m) in &o.moments {
                    w.string(name);
                    w.floats(&m.m);
                    w.floats(&m.v);
                }
            }
        }
        w.buf
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(payload.len() + 24);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        if bytes.len() != 20 + len + 4 {
            return Err(Error::Format(format!(
                "checkpoint length {} does not match declared payload {len}",
                bytes.len()
            )));
        }
        let payload = &bytes[20..20 + len];
        let stored = u32::from_le_bytes(bytes[20 + len..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: payload, pos: 0 };
        let config = ModelConfig::from_kv(&r.string()?)?;
        let meta = (0..r.u32()?)
            .map(|_| Ok((r.string()?, r.string()?)))
            .collect::<Result<Vec<_>>>()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let tensors = (0..r.u32()?)
            .map(|_| Ok((r.string()?, r.tensor()?)))
            .collect::<Result<Vec<_>>>()?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut moments = BTreeMap::new();
                for _ in 0..r.u32()? {
                    let name = r.string()?;
                    let m = r.floats()?;
                    let v = r.floats()?;
                    moments.insert(name, Moments { m, v });
                }
                Some(OptimizerState { step, moments })
            }
            t => return Err(Error::Format(format!("bad optimizer tag {t}"))),
        };
        if r.pos != payload.len() {
            return Err(Error::Format("trailing bytes in checkpoint payload".into()));
        }
        Ok(Self {
            config,
            meta,
            epoch,
            step,
            rng: RngState { seed, stream, word_pos },
            tensors,
            optimizer,
        })
    }

    /// Write atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn floats(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for x in t.data() {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 string".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn floats(&mut self) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        self.f32s(n)
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        let data = self.f32s(n)?;
        Tensor::from_vec(&shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}
