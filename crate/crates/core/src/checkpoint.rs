//! Binary checkpoint: parameters and Adam moments as little-endian f32.
//!
//! Layout: `"EFMR"`, `u32` version, model config, `u64` optimizer step,
//! `u64` parameter scalar count, `u32` tensor count, then per tensor a
//! `u32`-length-prefixed UTF-8 name, `u32` rank, `u32` dims and the f32
//! payload. Moments follow the parameters under `<name>.m` / `<name>.v`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Eformer, Mode, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EFMR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Eformer,
    pub step: u64,
    /// Moments in parameter order; present when the file carried them.
    pub moments: Option<(Vec<Tensor>, Vec<Tensor>)>,
}

impl Checkpoint {
    /// Rebuilds an optimizer around the stored moments.
    pub fn adam(&self, config: AdamConfig) -> Result<Adam> {
        let mut a = Adam::new(config, &self.model.params)?;
        a.step = self.step;
        if let Some((m, v)) = &self.moments {
            a.m = m.clone();
            a.v = v.clone();
        }
        Ok(a)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank() as u32);
    for &d in t.dims() {
        put_u32(out, d as u32);
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode(model: &Eformer, adam: Option<&Adam>) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for v in [c.stages, c.base_channels, c.window, c.heads, c.lewin_depth, c.ffn_mult] {
        put_u32(&mut out, v as u32);
    }
    out.push(match c.mode {
        Mode::Residual => 0,
        Mode::Deterministic => 1,
    });
    out.push(u8::from(c.unet_skips));
    out.push(u8::from(c.per_kernel_alpha));
    out.extend_from_slice(&adam.map_or(0, |a| a.step).to_le_bytes());
    out.extend_from_slice(&(model.num_parameters() as u64).to_le_bytes());
    let n = model.params.len() * if adam.is_some() { 3 } else { 1 };
    put_u32(&mut out, n as u32);
    for (name, t) in model.params.iter() {
        put_tensor(&mut out, name, t);
    }
    if let Some(a) = adam {
        for (suffix, ms) in [("m", &a.m), ("v", &a.v)] {
            for (name, t) in model.params.names().iter().zip(ms.iter()) {
                put_tensor(&mut out, &format!("{name}.{suffix}"), t);
            }
        }
    }
    out
}

pub fn save(path: &Path, model: &Eformer, adam: Option<&Adam>) -> Result<()> {
    fs::write(path, encode(model, adam)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("file truncated at byte {}", self.bytes.len())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = self.take(4 * count)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut f = [0usize; 6];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let mode = match r.u8()? {
        0 => Mode::Residual,
        1 => Mode::Deterministic,
        m => return Err(Error::Checkpoint(format!("unknown mode tag {m}"))),
    };
    let config = ModelConfig {
        stages: f[0],
        base_channels: f[1],
        window: f[2],
        heads: f[3],
        lewin_depth: f[4],
        ffn_mult: f[5],
        mode,
        unet_skips: r.u8()? != 0,
        per_kernel_alpha: r.u8()? != 0,
    };
    let step = r.u64()?;
    let scalars = r.u64()? as usize;
    let count = r.u32()? as usize;
    let mut model = Eformer::new(config, 0)?;
    if scalars != model.num_parameters() {
        return Err(Error::Checkpoint(format!(
            "stored parameter count {scalars} does not match config ({})",
            model.num_parameters()
        )));
    }
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if let Some(base) = name.strip_suffix(".m").filter(|b| model.params.id(b).is_some()) {
            m.push((base.to_string(), t));
        } else if let Some(base) = name.strip_suffix(".v").filter(|b| model.params.id(b).is_some()) {
            v.push((base.to_string(), t));
        } else {
            params.push((name, t));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    model.params.assign_all(params)?;
    let moments = if m.is_empty() && v.is_empty() {
        None
    } else {
        Some((order_like(&model, m, "m")?, order_like(&model, v, "v")?))
    };
    Ok(Checkpoint { model, step, moments })
}

fn order_like(model: &Eformer, entries: Vec<(String, Tensor)>, kind: &str) -> Result<Vec<Tensor>> {
    let mut scratch = model.params.clone();
    scratch
        .assign_all(entries)
        .map_err(|e| Error::Checkpoint(format!("moment buffers .{kind}: {e}")))?;
    Ok(scratch.values().to_vec())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
