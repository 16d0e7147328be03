//! Checkpoint container: magic, version, serialized config, named float32
//! parameter blobs with Adam state, batch-norm running stats, epoch
//! counter, and rng seed. Little-endian throughout; loading rebuilds the
//! layer plan from the config and fills parameters by name, so a save →
//! load round trip reproduces eval forwards bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::{build_model, Model, ModelConfig};
use crate::seeded_rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSCP";
pub const CHECKPOINT_VERSION: u32 = 1;

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

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    fn f32s(&mut self, vs: &[f32]) {
        self.u32(vs.len() as u32);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let config = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Contract(format!("config serialization failed: {e}")))?;
    w.bytes(&config);
    w.u32(model.epoch);
    w.u64(model.seed);
    w.u32(model.params.len() as u32);
    for p in &model.params {
        w.bytes(p.name.as_bytes());
        w.u32(p.value.shape.len() as u32);
        for &d in &p.value.shape {
            w.u32(d as u32);
        }
        w.f32s(&p.value.data);
        w.f32s(&p.adam_m);
        w.f32s(&p.adam_v);
        w.u64(p.step_count);
    }
    w.u32(model.bn_stats.len() as u32);
    for (name, stats) in model.bn_names.iter().zip(&model.bn_stats) {
        w.bytes(name.as_bytes());
        w.f32s(&stats.running_mean);
        w.f32s(&stats.running_var);
    }
    Ok(w.buf)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse { path: self.path.clone(), offset: self.pos as u64, detail: detail.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err(format!("truncated: needed {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        let raw = self.take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0, path: path.display().to_string() };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.err("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let config: ModelConfig = serde_json::from_slice(r.bytes()?)
        .map_err(|e| r.err(format!("bad config json: {e}")))?;
    let epoch = r.u32()?;
    let seed = r.u64()?;

    // Rebuild the plan deterministically, then overwrite the state by name.
    let mut model = build_model(&config, &mut seeded_rng(0))?;
    model.epoch = epoch;
    model.seed = seed;

    let n_params = r.u32()? as usize;
    if n_params != model.params.len() {
        return Err(r.err(format!(
            "checkpoint has {n_params} parameters, architecture expects {}",
            model.params.len()
        )));
    }
    for _ in 0..n_params {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| r.err("non-utf8 parameter name"))?;
        let ndims = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u32()? as usize);
        }
        let data = r.f32s()?;
        let adam_m = r.f32s()?;
        let adam_v = r.f32s()?;
        let step_count = r.u64()?;
        let p = model
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                offset: 0,
                detail: format!("unknown parameter {name}"),
            })?;
        if p.value.shape != shape || p.value.data.len() != data.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                offset: 0,
                detail: format!("shape mismatch for {name}: {:?} vs {shape:?}", p.value.shape),
            });
        }
        p.value.data = data;
        p.adam_m = adam_m;
        p.adam_v = adam_v;
        p.step_count = step_count;
    }
    let n_bn = r.u32()? as usize;
    if n_bn != model.bn_stats.len() {
        return Err(r.err(format!(
            "checkpoint has {n_bn} batch-norm sites, architecture expects {}",
            model.bn_stats.len()
        )));
    }
    for _ in 0..n_bn {
        let name =
            String::from_utf8(r.bytes()?.to_vec()).map_err(|_| r.err("non-utf8 bn name"))?;
        let mean = r.f32s()?;
        let var = r.f32s()?;
        let idx = model
            .bn_names
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                offset: 0,
                detail: format!("unknown batch-norm site {name}"),
            })?;
        model.bn_stats[idx].running_mean = mean;
        model.bn_stats[idx].running_var = var;
    }
    Ok(model)
}
