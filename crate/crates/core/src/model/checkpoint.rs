//! Binary checkpoint, little-endian:
//!
//! ```text
//! "VQMD" u32 version
//! u64 n, n bytes of model config text
//! u64 input_dim, u64 num_classes
//! u64 k, then k times: u64 rows, u64 cols, rows*cols f64
//! u8 has_codebook, then a codebook record when 1
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{BottleneckModel, ModelConfig};
use crate::autodiff::Tensor2D;
use crate::error::{Error, Result};
use crate::vq::{read_array, read_f64s, Codebook};

const MAGIC: &[u8; 4] = b"VQMD";
const VERSION: u32 = 1;
const MAX_CONFIG_BYTES: u64 = 1 << 20;
const MAX_TENSOR_LEN: u64 = 1 << 28;

impl BottleneckModel {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let config = self.config.to_toml();
        w.write_all(&(config.len() as u64).to_le_bytes())?;
        w.write_all(config.as_bytes())?;
        w.write_all(&(self.input_dim as u64).to_le_bytes())?;
        w.write_all(&(self.num_classes as u64).to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.rows() as u64).to_le_bytes())?;
            w.write_all(&(p.cols() as u64).to_le_bytes())?;
            for x in p.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        match &self.codebook {
            Some(cb) => {
                w.write_all(&[1])?;
                cb.write_to(w)
            }
            None => w.write_all(&[0]),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let bad = |detail: String| Error::format("<checkpoint>", detail);
        let magic: [u8; 4] = read_array(r)?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(read_array(r)?);
        if len > MAX_CONFIG_BYTES {
            return Err(bad(format!("config block of {len} bytes")));
        }
        let mut text = vec![0u8; len as usize];
        r.read_exact(&mut text)
            .map_err(|e| bad(format!("truncated config: {e}")))?;
        let text = String::from_utf8(text).map_err(|_| bad("config is not UTF-8".into()))?;
        let config: ModelConfig = toml::from_str(&text).map_err(|e| bad(format!("config: {e}")))?;
        config.validate()?;

        let input_dim = u64::from_le_bytes(read_array(r)?) as usize;
        let num_classes = u64::from_le_bytes(read_array(r)?) as usize;
        let count = u64::from_le_bytes(read_array(r)?) as usize;
        let expected = 2 * (config.encoder_depth + 2);
        if count != expected {
            return Err(bad(format!("{count} tensors, config implies {expected}")));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let rows = u64::from_le_bytes(read_array(r)?);
            let cols = u64::from_le_bytes(read_array(r)?);
            if rows.checked_mul(cols).is_none_or(|n| n > MAX_TENSOR_LEN) {
                return Err(bad(format!("implausible tensor {rows}x{cols}")));
            }
            let (rows, cols) = (rows as usize, cols as usize);
            params.push(Tensor2D::new(rows, cols, read_f64s(r, rows * cols)?)?);
        }
        let flag: [u8; 1] = read_array(r)?;
        let codebook = match flag[0] {
            0 => None,
            1 => Some(Codebook::read_from(r)?),
            f => return Err(bad(format!("bad codebook flag {f}"))),
        };
        if !r.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.len())));
        }
        let model = Self {
            config,
            input_dim,
            num_classes,
            params,
            codebook,
        };
        model.check_consistent().map_err(|e| bad(e.to_string()))?;
        Ok(model)
    }

    fn check_consistent(&self) -> Result<()> {
        let d = self.config.hidden_dim;
        let mut fan_in = self.input_dim;
        let mut shapes = Vec::new();
        for _ in 0..self.config.encoder_depth {
            shapes.push((fan_in, d));
            fan_in = d;
        }
        shapes.push((d, d));
        shapes.push((d, self.num_classes));
        for (k, &(i, o)) in shapes.iter().enumerate() {
            if self.params[2 * k].shape() != (i, o) || self.params[2 * k + 1].shape() != (1, o) {
                return Err(Error::Config(format!("layer {k} does not have shape {i}x{o}")));
            }
        }
        match (&self.codebook, self.config.codebook_size) {
            (None, None) => Ok(()),
            (Some(cb), Some(v)) if cb.size() == v && cb.dim() == d => Ok(()),
            _ => Err(Error::Config("codebook does not match config".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(path, detail),
            other => other,
        })
    }
}
