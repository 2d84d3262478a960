//! TCNN model files.
//!
//! Layout (little-endian): `"TCNN"`, version u16, descriptor length u32 and
//! UTF-8 descriptor text (architecture plus training metadata as
//! `key = value` lines), normalizers `max_w`, `max_v` as f32, blob count
//! u32, then per blob: name length u16, UTF-8 name, rank u8, rank x u32
//! dims, f32 values.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::model::{Model, ModelSpec, Network, TrainingMeta};
use crate::textfmt::{parse_key_values, parse_u64};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TCNN";
const VERSION: u16 = 1;

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split_floats(key: &str, s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Format(format!("{key}: bad number `{x}`"))))
        .collect()
}

fn descriptor(model: &Model) -> String {
    let m = &model.meta;
    format!(
        "{}meta.seed = {}\nmeta.epochs_run = {}\nmeta.train_losses = {}\nmeta.test_losses = {}\n",
        model.spec().to_text(),
        m.seed,
        m.epochs_run,
        join(&m.train_losses),
        join(&m.test_losses)
    )
}

fn parse_meta(kv: &BTreeMap<String, String>) -> Result<TrainingMeta> {
    let get = |k: &str| kv.get(k).map(String::as_str).unwrap_or("");
    Ok(TrainingMeta {
        seed: if get("meta.seed").is_empty() { 0 } else { parse_u64("meta.seed", get("meta.seed"))? },
        epochs_run: if get("meta.epochs_run").is_empty() {
            0
        } else {
            parse_u64("meta.epochs_run", get("meta.epochs_run"))? as usize
        },
        train_losses: split_floats("meta.train_losses", get("meta.train_losses"))?,
        test_losses: split_floats("meta.test_losses", get("meta.test_losses"))?,
    })
}

pub fn write_model<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let desc = descriptor(model);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    buf.extend_from_slice(desc.as_bytes());
    buf.extend_from_slice(&(model.normalizers.0 as f32).to_le_bytes());
    buf.extend_from_slice(&(model.normalizers.1 as f32).to_le_bytes());
    let tensors = model.net.tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t, _) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("model file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn text(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Format("model file: invalid UTF-8".into()))
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a TCNN model file".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let n = r.u32()? as usize;
    let kv = parse_key_values(r.text(n)?)?;
    let spec = ModelSpec::from_map(&kv)?;
    let meta = parse_meta(&kv)?;
    let normalizers = (r.f32()? as f64, r.f32()? as f64);
    if !(normalizers.0 > 0.0 && normalizers.1 > 0.0) {
        return Err(Error::Format(format!("non-positive normalizers {normalizers:?}")));
    }
    let count = r.u32()? as usize;
    let mut blobs = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = r.text(len)?.to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let values: usize = shape.iter().product();
        let data = (0..values).map(|_| Ok(r.f32()? as f64)).collect::<Result<Vec<_>>>()?;
        if blobs.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Format(format!("duplicate weight `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after weights".into()));
    }
    let mut net = Network::new(spec, 0)?;
    let expected = net.tensors().len();
    if blobs.len() != expected {
        return Err(Error::Format(format!("expected {expected} weight tensors, found {}", blobs.len())));
    }
    for (name, t, _) in net.tensors_mut() {
        let (shape, data) = blobs.remove(&name).ok_or_else(|| Error::Format(format!("missing weight `{name}`")))?;
        if shape != t.shape {
            return Err(Error::Format(format!("weight `{name}` has shape {shape:?}, architecture needs {:?}", t.shape)));
        }
        t.data = data;
    }
    Ok(Model { net, normalizers, meta })
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    model_from_bytes(&std::fs::read(path)?)
}
