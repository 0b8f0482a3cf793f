//! Checkpoint format: magic `D2FM`, version, embedded model config, then
//! named parameter tensors (plane-tagged, 32-bit little-endian payloads).
//! Saving twice yields byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{D2Former, D2FormerConfig};
use crate::config::{model_section_from_text, model_section_text};
use crate::ctensor::{ComplexTensor, Real};
use crate::error::{Error, Result};
use crate::layers::Parameterized;

const MAGIC: &[u8; 4] = b"D2FM";
const VERSION: u32 = 1;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset: offset as u64, message: message.into() }
}

struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.off..self.off + n)
            .ok_or_else(|| parse_err(self.off, format!("truncated: wanted {n} bytes")))?;
        self.off += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn push_tensor_record(out: &mut Vec<u8>, name: &str, plane: u8, shape: &[usize], data: impl Iterator<Item = f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(plane);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize every parameter (re plane always; im plane unless real-only).
pub fn save_checkpoint<T: Real>(model: &mut D2Former<T>, path: impl AsRef<Path>) -> Result<()> {
    let cfg_text = model_section_text(&model.cfg);
    let mut records = 0u32;
    let mut body = Vec::new();
    model.visit_params("", &mut |name, p| {
        let shape = p.value.shape().to_vec();
        push_tensor_record(&mut body, name, 0, &shape, p.value.re().iter().map(|&v| v.to_f64() as f32));
        records += 1;
        if !p.is_real_only() {
            push_tensor_record(&mut body, name, 1, &shape, p.value.im().iter().map(|&v| v.to_f64() as f32));
            records += 1;
        }
    });
    let mut out = Vec::with_capacity(body.len() + cfg_text.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());
    out.extend_from_slice(&records.to_le_bytes());
    out.extend_from_slice(&body);
    fs::write(path.as_ref(), out)?;
    Ok(())
}

type TensorMap = BTreeMap<(String, u8), (Vec<usize>, Vec<f32>)>;

fn read_all(path: &Path) -> Result<(D2FormerConfig, TensorMap)> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, off: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Incompatible("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version}, this build reads version {VERSION}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let at = r.off;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| parse_err(at, "config block is not UTF-8"))?;
    let cfg = model_section_from_text(cfg_text)?;
    let records = r.u32()?;
    let mut map = TensorMap::new();
    for _ in 0..records {
        let name_len = r.u16()? as usize;
        let at = r.off;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| parse_err(at, "tensor name is not UTF-8"))?
            .to_string();
        let plane = r.u8()?;
        if plane > 1 {
            return Err(parse_err(r.off - 1, format!("plane tag {plane} (expected 0/1)")));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let vals = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        map.insert((name, plane), (shape, vals));
    }
    if r.off != buf.len() {
        return Err(parse_err(r.off, "trailing bytes after last record"));
    }
    Ok((cfg, map))
}

/// Build a model from the checkpoint's embedded config and fill every
/// parameter from the stored tensors.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<D2Former<T>> {
    let (cfg, map) = read_all(path.as_ref())?;
    let mut model = D2Former::new(&cfg, 0)?;
    fill_params(&mut model, map)?;
    Ok(model)
}

/// Load into an existing model, rejecting configuration mismatches with
/// both values named.
pub fn load_checkpoint_into<T: Real>(model: &mut D2Former<T>, path: impl AsRef<Path>) -> Result<()> {
    let (cfg, map) = read_all(path.as_ref())?;
    if cfg != model.cfg {
        if cfg.channels != model.cfg.channels {
            return Err(Error::Incompatible(format!(
                "checkpoint has C={} but the model was built with C={}",
                cfg.channels, model.cfg.channels
            )));
        }
        return Err(Error::Incompatible(format!(
            "checkpoint config {:?} differs from model config {:?}",
            cfg, model.cfg
        )));
    }
    fill_params(model, map)
}

fn fill_params<T: Real>(model: &mut D2Former<T>, mut map: TensorMap) -> Result<()> {
    let mut issue: Option<Error> = None;
    model.visit_params("", &mut |name, p| {
        if issue.is_some() {
            return;
        }
        let shape = p.value.shape().to_vec();
        let planes: &[u8] = if p.is_real_only() { &[0] } else { &[0, 1] };
        let mut re = p.value.re().to_owned();
        let mut im = p.value.im().to_owned();
        for &plane in planes {
            match map.remove(&(name.to_string(), plane)) {
                None => {
                    issue = Some(Error::Incompatible(format!(
                        "checkpoint is missing tensor '{name}' (plane {plane})"
                    )));
                    return;
                }
                Some((stored_shape, vals)) => {
                    if stored_shape != shape {
                        issue = Some(Error::Incompatible(format!(
                            "tensor '{name}' has shape {:?} in the checkpoint but {:?} in the model",
                            stored_shape, shape
                        )));
                        return;
                    }
                    let target = if plane == 0 { &mut re } else { &mut im };
                    for (dst, v) in target.iter_mut().zip(vals) {
                        *dst = T::from_f64(v as f64);
                    }
                }
            }
        }
        p.value = ComplexTensor::from_parts(re, im).expect("plane shapes");
    });
    if let Some(e) = issue {
        return Err(e);
    }
    if let Some(((name, plane), _)) = map.into_iter().next() {
        return Err(Error::Incompatible(format!(
            "checkpoint contains unexpected tensor '{name}' (plane {plane})"
        )));
    }
    Ok(())
}

/// Header inspection without building a model.
pub struct CheckpointInfo {
    pub config: D2FormerConfig,
    pub tensors: Vec<(String, u8, Vec<usize>)>,
}

pub fn checkpoint_info(path: impl AsRef<Path>) -> Result<CheckpointInfo> {
    let (config, map) = read_all(path.as_ref())?;
    let tensors = map.into_iter().map(|((n, p), (s, _))| (n, p, s)).collect();
    Ok(CheckpointInfo { config, tensors })
}
