//! Checkpoints: a text manifest (tensor name, shape, byte offset) plus one
//! raw little-endian f32 array file.
//!
//! Model parameters and Adam moments are snapped to the f32 grid after every
//! update, so saving and reloading is the identity and a resumed run replays
//! bit-for-bit. Training checkpoints append the optimizer moments as
//! `opt.m.<name>` / `opt.v.<name>` tensors and record the step as metadata.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use align_refine_core::decoder::{DecoderConfig, ModelParams};
use align_refine_core::optim::Adam;
use align_refine_core::tensor::Tensor;
use anyhow::{anyhow, bail, Context, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.txt";
const WEIGHTS: &str = "weights.f32le";

fn write_files(
    dir: &Path,
    tensors: &[(String, &Tensor)],
    meta: &[(String, String)],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join(MANIFEST))?);
    writeln!(manifest, "version {CHECKPOINT_VERSION}")?;
    writeln!(manifest, "dtype f32le")?;
    for (k, v) in meta {
        writeln!(manifest, "meta {k} {v}")?;
    }
    let mut weights = BufWriter::new(fs::File::create(dir.join(WEIGHTS))?);
    let mut offset = 0u64;
    for (name, t) in tensors {
        writeln!(manifest, "tensor {name} {}x{} {offset}", t.rows(), t.cols())?;
        for &v in t.data() {
            weights.write_all(&(v as f32).to_le_bytes())?;
        }
        offset += (t.len() * 4) as u64;
    }
    Ok(())
}

struct Loaded {
    tensors: Vec<(String, Tensor)>,
    meta: BTreeMap<String, String>,
}

fn read_files(dir: &Path) -> Result<Loaded> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))
        .with_context(|| format!("read {}", dir.join(MANIFEST).display()))?;
    let blob = fs::read(dir.join(WEIGHTS))
        .with_context(|| format!("read {}", dir.join(WEIGHTS).display()))?;
    let mut meta = BTreeMap::new();
    let mut tensors = Vec::new();
    let mut version = None;
    for (lineno, raw) in manifest.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("version") => {
                version = Some(
                    parts
                        .next()
                        .ok_or_else(|| anyhow!("line {}: missing version", lineno + 1))?
                        .parse::<u32>()?,
                )
            }
            Some("dtype") => {
                let d = parts.next().unwrap_or("");
                if d != "f32le" {
                    bail!("unsupported dtype '{d}'");
                }
            }
            Some("meta") => {
                let k = parts.next().ok_or_else(|| anyhow!("line {}: bad meta", lineno + 1))?;
                let v: Vec<&str> = parts.collect();
                meta.insert(k.to_string(), v.join(" "));
            }
            Some("tensor") => {
                let name = parts
                    .next()
                    .ok_or_else(|| anyhow!("line {}: tensor missing name", lineno + 1))?
                    .to_string();
                let shape = parts
                    .next()
                    .ok_or_else(|| anyhow!("line {}: tensor missing shape", lineno + 1))?;
                let offset: usize = parts
                    .next()
                    .ok_or_else(|| anyhow!("line {}: tensor missing offset", lineno + 1))?
                    .parse()?;
                let (r, c) = shape
                    .split_once('x')
                    .ok_or_else(|| anyhow!("line {}: bad shape '{shape}'", lineno + 1))?;
                let rows: usize = r.parse()?;
                let cols: usize = c.parse()?;
                let need = rows * cols * 4;
                if offset + need > blob.len() {
                    bail!("tensor {name}: weights file too short");
                }
                let mut data = Vec::with_capacity(rows * cols);
                for chunk in blob[offset..offset + need].chunks_exact(4) {
                    data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
                }
                tensors.push((name, Tensor::from_vec(rows, cols, data)));
            }
            Some(other) => bail!("line {}: unknown record '{other}'", lineno + 1),
            None => {}
        }
    }
    let version = version.ok_or_else(|| anyhow!("checkpoint manifest missing version"))?;
    if version != CHECKPOINT_VERSION {
        bail!("checkpoint version {version} unsupported (want {CHECKPOINT_VERSION})");
    }
    Ok(Loaded { tensors, meta })
}

/// Saves model parameters only (inference checkpoint).
pub fn save_params(dir: &Path, params: &ModelParams, meta: &[(String, String)]) -> Result<()> {
    let tensors: Vec<(String, &Tensor)> =
        params.iter().map(|(n, t)| (n.to_string(), &**t)).collect();
    write_files(dir, &tensors, meta)
}

pub fn load_params(dir: &Path, cfg: &DecoderConfig) -> Result<(ModelParams, BTreeMap<String, String>)> {
    let loaded = read_files(dir)?;
    let model: Vec<(String, Tensor)> =
        loaded.tensors.into_iter().filter(|(n, _)| !n.starts_with("opt.")).collect();
    let params = ModelParams::from_tensors(cfg, model).map_err(|e| anyhow!("{e}"))?;
    Ok((params, loaded.meta))
}

/// Full training state: parameters, Adam moments, step count.
pub fn save_train_state(
    dir: &Path,
    params: &ModelParams,
    opt: &Adam,
    extra_meta: &[(String, String)],
) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor)> =
        params.iter().map(|(n, t)| (n.to_string(), &**t)).collect();
    let (m, v) = opt.moments();
    for (i, (name, _)) in params.iter().enumerate() {
        tensors.push((format!("opt.m.{name}"), &m[i]));
    }
    for (i, (name, _)) in params.iter().enumerate() {
        tensors.push((format!("opt.v.{name}"), &v[i]));
    }
    let mut meta = vec![("step".to_string(), opt.step_count().to_string())];
    meta.extend_from_slice(extra_meta);
    write_files(dir, &tensors, &meta)
}

pub fn load_train_state(dir: &Path, cfg: &DecoderConfig) -> Result<(ModelParams, Adam, usize)> {
    let loaded = read_files(dir)?;
    let mut model = Vec::new();
    let mut m_map: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut v_map: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in loaded.tensors {
        if let Some(n) = name.strip_prefix("opt.m.") {
            m_map.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("opt.v.") {
            v_map.insert(n.to_string(), t);
        } else {
            model.push((name, t));
        }
    }
    let params = ModelParams::from_tensors(cfg, model).map_err(|e| anyhow!("{e}"))?;
    let step: usize = loaded
        .meta
        .get("step")
        .ok_or_else(|| anyhow!("training checkpoint missing step"))?
        .parse()?;
    let mut m = Vec::with_capacity(params.num_tensors());
    let mut v = Vec::with_capacity(params.num_tensors());
    for (name, _) in params.iter() {
        m.push(m_map.remove(name).ok_or_else(|| anyhow!("missing opt.m.{name}"))?);
        v.push(v_map.remove(name).ok_or_else(|| anyhow!("missing opt.v.{name}"))?);
    }
    Ok((params, Adam::from_state(m, v, step), step))
}
