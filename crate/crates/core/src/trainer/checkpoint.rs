//! Binary checkpoint: parameters, optimizer state, step and configuration.
//!
//! Little-endian layout:
//!
//! ```text
//! "OCWC"  version:u32  config_hash:u64
//! config_len:u32  config_text[config_len]
//! input_dim:u32  step:u64
//! tensor_count:u32
//!   repeated: name_len:u32 name rows:u32 cols:u32 f64[rows*cols]
//! t:u64 beta1:f64 beta2:f64 eps:f64
//!   repeated tensor_count times: first moment blob (rows cols f64...)
//!   repeated tensor_count times: second moment blob
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Matrix;

use super::config::{config_hash, TrainConfig};
use super::optim::OptimState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OCWC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub optim: OptimState,
    /// Number of completed training steps.
    pub step: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
    fn blob(&mut self, m: &Matrix) {
        self.u32(m.rows());
        self.u32(m.cols());
        for &x in m.data() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated {
            expected: self.at.saturating_add(n),
            found: self.buf.len(),
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self, field: &'static str) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(field, "not valid UTF-8"))
    }
    fn blob(&mut self) -> Result<Matrix> {
        let (r, c) = (self.u32()?, self.u32()?);
        let n = r.checked_mul(c).ok_or_else(|| Error::format("tensor", "shape overflows"))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format("tensor", "shape overflows"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Matrix::new(r, c, data).map_err(|_| Error::format("tensor", "non-finite or empty tensor"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let text = self.config.render();
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION as usize);
        w.u64(config_hash(&text));
        w.bytes(text.as_bytes());
        w.u32(self.model.input_dim());
        w.u64(self.step);
        let tensors = self.model.tensors();
        w.u32(tensors.len());
        for (name, m) in tensors {
            w.bytes(name.as_bytes());
            w.blob(m);
        }
        w.u64(self.optim.t);
        w.f64(self.optim.beta1);
        w.f64(self.optim.beta2);
        w.f64(self.optim.eps);
        for m in self.optim.m.iter().chain(&self.optim.v) {
            w.blob(m);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("magic", "expected OCWC"));
        }
        let version = r.u32()? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("version", format!("unsupported checkpoint version {version}")));
        }
        let hash = r.u64()?;
        let text = r.string("config")?;
        if config_hash(&text) != hash {
            return Err(Error::Compatibility(format!(
                "config hash {hash:016x} does not match the embedded configuration ({:016x})",
                config_hash(&text)
            )));
        }
        let config = TrainConfig::parse(&text).map_err(|e| Error::format("config", e.to_string()))?;
        let input_dim = r.u32()?;
        let step = r.u64()?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let name = r.string("tensor name")?;
            tensors.push((name, r.blob()?));
        }
        let template = Model::init(&config.slot, &config.walk, input_dim, 0)?;
        let model = Model::from_tensors(&template, tensors)?;
        let t = r.u64()?;
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let mut moments = Vec::with_capacity(2 * count);
        for _ in 0..2 * count {
            moments.push(r.blob()?);
        }
        let v = moments.split_off(count);
        for ((m, v), (name, p)) in moments.iter().zip(&v).zip(model.tensors()) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Compatibility(format!("optimizer moments for {name} have the wrong shape")));
            }
        }
        if r.at != bytes.len() {
            return Err(Error::format("length", format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint {
            config,
            model,
            optim: OptimState {
                m: moments,
                v,
                t,
                beta1,
                beta2,
                eps,
            },
            step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Checkpoint::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
