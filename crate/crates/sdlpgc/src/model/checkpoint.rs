//! Versioned checkpoint file: a JSON manifest followed by a binary `f64`
//! parameter archive (and optionally the optimizer state), with a sha-256
//! content hash over the parameter bytes recorded in the manifest.
//!
//! Round-trips are bitwise: loading a checkpoint and running the model on
//! the same input reproduces the pre-save forward exactly.

use super::{ModelConfig, SdLpgc, Variant};
use crate::data::{NormStats, SplitSpec};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::tensor::Array;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SDLPGCKP";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: ModelConfig,
    pub variant: Variant,
    pub norm: NormStats,
    pub split: SplitSpec,
    pub dataset: String,
    pub train_seed: u64,
    pub epoch: usize,
    pub best_val_mae: f64,
    /// Zero-padding applied to each window before the first convolution.
    pub pad_len: usize,
    /// Hex sha-256 of the parameter section bytes.
    pub param_hash: String,
}

/// Optimizer state captured alongside the parameters.
pub struct AdamSnapshot {
    pub step_count: u64,
    pub first_moments: Vec<Array>,
    pub second_moments: Vec<Array>,
}

/// Everything the caller supplies beyond the model itself.
pub struct CheckpointMeta {
    pub norm: NormStats,
    pub split: SplitSpec,
    pub dataset: String,
    pub train_seed: u64,
    pub epoch: usize,
    pub best_val_mae: f64,
}

fn chk<T, E: std::fmt::Display>(r: std::result::Result<T, E>, what: &str) -> Result<T> {
    r.map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
}

fn serialize_params(model: &SdLpgc) -> Vec<u8> {
    let params = model.params();
    let mut buf = Vec::new();
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.value.ndim() as u8);
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint(
    model: &SdLpgc,
    meta: &CheckpointMeta,
    optimizer: Option<&Adam>,
    path: &Path,
) -> Result<()> {
    let params_bytes = serialize_params(model);
    let hash = Sha256::digest(&params_bytes);
    let param_hash: String = hash.iter().map(|b| format!("{b:02x}")).collect();

    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        variant: model.variant,
        norm: meta.norm,
        split: meta.split,
        dataset: meta.dataset.clone(),
        train_seed: meta.train_seed,
        epoch: meta.epoch,
        best_val_mae: meta.best_val_mae,
        pad_len: model.config.pad_len(),
        param_hash,
    };
    let manifest_bytes = chk(serde_json::to_vec(&manifest), "manifest encode")?;

    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let werr = |e: std::io::Error| Error::io(path, e);
    file.write_all(MAGIC).map_err(werr)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(werr)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())
        .map_err(werr)?;
    file.write_all(&manifest_bytes).map_err(werr)?;
    file.write_all(&params_bytes).map_err(werr)?;
    match optimizer {
        Some(opt) => {
            file.write_all(&[1u8]).map_err(werr)?;
            file.write_all(&opt.step_count.to_le_bytes()).map_err(werr)?;
            for m in opt.first_moments.iter().chain(opt.second_moments.iter()) {
                for &v in m.iter() {
                    file.write_all(&v.to_le_bytes()).map_err(werr)?;
                }
            }
        }
        None => file.write_all(&[0u8]).map_err(werr)?,
    }
    file.flush().map_err(werr)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file while reading {what} ({} bytes left, {n} needed)",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64_array(&mut self, shape: &[usize], what: &str) -> Result<Array> {
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 8, what)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        chk(
            Array::from_shape_vec(shape.to_vec(), data),
            "array shape mismatch",
        )
    }
}

/// Load a checkpoint, rebuild the model, and verify the content hash.
pub fn load_checkpoint(path: &Path) -> Result<(SdLpgc, CheckpointManifest, Option<AdamSnapshot>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };

    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (supported: {CHECKPOINT_VERSION})"
        )));
    }
    let manifest_len = r.u64("manifest length")? as usize;
    let manifest: CheckpointManifest = chk(
        serde_json::from_slice(r.take(manifest_len, "manifest")?),
        "manifest decode",
    )?;

    let params_start = r.pos;
    let n_params = r.u64("parameter count")? as usize;
    let mut loaded: Vec<(String, Array)> = Vec::with_capacity(n_params);
    for i in 0..n_params {
        let name_len = r.u16("name length")? as usize;
        let name = chk(
            std::str::from_utf8(r.take(name_len, "name")?),
            "parameter name",
        )?
        .to_string();
        let ndim = r.take(1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let value = r.f64_array(&shape, &format!("parameter {i} data"))?;
        loaded.push((name, value));
    }
    let params_end = r.pos;

    let hash = Sha256::digest(&bytes[params_start..params_end]);
    let actual: String = hash.iter().map(|b| format!("{b:02x}")).collect();
    if actual != manifest.param_hash {
        return Err(Error::Checkpoint(
            "parameter hash mismatch; the file is corrupt".into(),
        ));
    }

    let mut model = SdLpgc::new(manifest.config.clone(), manifest.variant)?;
    {
        let mut params = model.params_mut();
        if params.len() != loaded.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model wants {}",
                loaded.len(),
                params.len()
            )));
        }
        for (p, (name, value)) in params.iter_mut().zip(loaded.iter()) {
            if p.name != *name {
                return Err(Error::Checkpoint(format!(
                    "parameter order mismatch: expected {}, found {name}",
                    p.name
                )));
            }
            if p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} in file, {:?} in model",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
    }

    let opt_flag = r.take(1, "optimizer flag")?[0];
    let snapshot = if opt_flag == 1 {
        let step_count = r.u64("optimizer step count")?;
        let shapes: Vec<Vec<usize>> = model
            .params()
            .iter()
            .map(|p| p.value.shape().to_vec())
            .collect();
        let mut first = Vec::with_capacity(shapes.len());
        for s in &shapes {
            first.push(r.f64_array(s, "optimizer first moment")?);
        }
        let mut second = Vec::with_capacity(shapes.len());
        for s in &shapes {
            second.push(r.f64_array(s, "optimizer second moment")?);
        }
        Some(AdamSnapshot {
            step_count,
            first_moments: first,
            second_moments: second,
        })
    } else {
        None
    };
    Ok((model, manifest, snapshot))
}
