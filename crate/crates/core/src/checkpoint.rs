//! Versioned binary checkpoints: run config, lane basis, step counter and
//! every named parameter blob as little-endian f64, bitwise round-trippable.

use crate::array::RealArray;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::lanehead::LaneBasis;
use crate::model::Model;
use crate::rng::SplitMix64;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LFCK";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data(self.path.clone(), "truncated checkpoint"));
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

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::data(self.path.clone(), "non-utf8 string in checkpoint"))
    }
}

pub fn save(model: &Model, step_counter: u64, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let config_json = serde_json::to_string(&model.config).expect("config serializes");
    put_str(&mut out, &config_json);

    let basis = &model.basis;
    put_u32(&mut out, basis.k() as u32);
    put_u32(&mut out, basis.n() as u32);
    put_f64s(&mut out, &basis.row_positions);
    put_f64s(&mut out, &basis.x_mean);
    put_f64s(&mut out, &basis.singular_values);
    put_f64s(&mut out, basis.u.data());

    put_u64(&mut out, step_counter);

    let params = model.named_params();
    put_u32(&mut out, params.len() as u32);
    for (name, arr) in &params {
        put_str(&mut out, name);
        put_u32(&mut out, arr.shape().len() as u32);
        for &d in arr.shape() {
            put_u64(&mut out, d as u64);
        }
        put_f64s(&mut out, arr.data());
    }

    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<(Model, u64)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(4)? != MAGIC {
        return Err(Error::data(r.path.clone(), "not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(
            r.path.clone(),
            format!("unsupported checkpoint version {version} (expected {VERSION})"),
        ));
    }
    let config_json = r.string()?;
    let config: RunConfig = serde_json::from_str(&config_json)
        .map_err(|e| Error::data(r.path.clone(), format!("bad embedded config: {e}")))?;

    let k = r.u32()? as usize;
    let n = r.u32()? as usize;
    let row_positions = r.f64s(n)?;
    let x_mean = r.f64s(n)?;
    let singular_values = r.f64s(k)?;
    let u = RealArray::new(vec![k, n], r.f64s(k * n)?);
    let basis = LaneBasis {
        u,
        singular_values,
        row_positions,
        x_mean,
    };

    let step_counter = r.u64()?;

    // Build a model skeleton, then overwrite every parameter by name.
    let mut rng = SplitMix64::new(0);
    let mut model = Model::new(config, basis, &mut rng)?;
    let count = r.u32()? as usize;
    let mut loaded: std::collections::HashMap<String, RealArray> =
        std::collections::HashMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = r.f64s(len)?;
        loaded.insert(name, RealArray::new(shape, data));
    }
    if r.pos != r.buf.len() {
        return Err(Error::data(r.path.clone(), "trailing bytes in checkpoint"));
    }
    let mut missing = Vec::new();
    model.visit_mut(&mut |name, arr| match loaded.remove(&name) {
        Some(v) if v.shape() == arr.shape() => *arr = v,
        Some(v) => missing.push(format!(
            "{name}: shape {:?} vs expected {:?}",
            v.shape(),
            arr.shape()
        )),
        None => missing.push(format!("{name}: absent")),
    });
    if !missing.is_empty() || !loaded.is_empty() {
        let extra: Vec<String> = loaded.keys().cloned().collect();
        return Err(Error::data(
            path.display().to_string(),
            format!("parameter mismatch: {missing:?}, unexpected: {extra:?}"),
        ));
    }
    Ok((model, step_counter))
}
