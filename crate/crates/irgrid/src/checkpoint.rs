//! Checkpoints: one JSON metadata line, then one tensor container per
//! parameter and per batch-norm buffer, in the order listed in the metadata.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use irgrid_core::model::{AttUNet, AttUNetConfig, ParamSpec};
use irgrid_core::train::{Phase, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container::{Meta, TensorContainer};

pub const MAGIC: &str = "IRGC1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CheckpointMeta {
    pub magic: String,
    pub model: AttUNetConfig,
    pub phase: Phase,
    pub train: Option<TrainConfig>,
    /// Number of completed epochs in `phase`.
    pub epoch: usize,
    pub target_scale: f64,
    pub params: Vec<String>,
    pub buffers: Vec<String>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: AttUNet<f32>,
}

fn blobs(specs: &[ParamSpec], values: &[f32]) -> Vec<TensorContainer> {
    specs
        .iter()
        .map(|s| {
            let mut extra = BTreeMap::new();
            extra.insert("name".to_string(), Value::from(s.name.clone()));
            TensorContainer::new(
                s.shape.clone(),
                values[s.offset..s.offset + s.len()].to_vec(),
                Meta {
                    extra,
                    ..Meta::default()
                },
            )
        })
        .collect()
}

pub fn write<W: Write>(
    mut w: W,
    model: &AttUNet<f32>,
    phase: Phase,
    train: Option<&TrainConfig>,
    epoch: usize,
    target_scale: f64,
) -> Result<()> {
    let meta = CheckpointMeta {
        magic: MAGIC.into(),
        model: model.config.clone(),
        phase,
        train: train.cloned(),
        epoch,
        target_scale,
        params: model.param_specs().iter().map(|s| s.name.clone()).collect(),
        buffers: model.buffer_specs().iter().map(|s| s.name.clone()).collect(),
    };
    serde_json::to_writer(&mut w, &meta)?;
    w.write_all(b"\n")?;
    for c in blobs(model.param_specs(), &model.params)
        .into_iter()
        .chain(blobs(model.buffer_specs(), &model.buffers))
    {
        c.write_to(&mut w)?;
    }
    Ok(())
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save(
    path: &Path,
    model: &AttUNet<f32>,
    phase: Phase,
    train: Option<&TrainConfig>,
    epoch: usize,
    target_scale: f64,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?);
        write(&mut w, model, phase, train, epoch, target_scale)?;
        w.flush()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn fill(specs: &[ParamSpec], names: &[String], dst: &mut [f32], r: &mut impl BufRead) -> Result<()> {
    if names.len() != specs.len() {
        bail!("checkpoint lists {} tensors, model expects {}", names.len(), specs.len());
    }
    for (spec, name) in specs.iter().zip(names) {
        if &spec.name != name {
            bail!("checkpoint tensor {name} where {} was expected", spec.name);
        }
        let c = TensorContainer::read_from(&mut *r).with_context(|| format!("reading {name}"))?;
        if c.shape != spec.shape {
            bail!("tensor {name} has shape {:?}, expected {:?}", c.shape, spec.shape);
        }
        dst[spec.offset..spec.offset + spec.len()].copy_from_slice(&c.data);
    }
    Ok(())
}

pub fn read<R: BufRead>(mut r: R) -> Result<Checkpoint> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let meta: CheckpointMeta = serde_json::from_str(line.trim_end()).context("checkpoint metadata")?;
    if meta.magic != MAGIC {
        bail!("not a checkpoint (magic {:?})", meta.magic);
    }
    let mut model = AttUNet::<f32>::new(meta.model.clone(), 0)?;
    let (ps, bs) = (model.param_specs().to_vec(), model.buffer_specs().to_vec());
    fill(&ps, &meta.params, &mut model.params, &mut r)?;
    fill(&bs, &meta.buffers, &mut model.buffers, &mut r)?;
    if !r.fill_buf()?.is_empty() {
        bail!("trailing bytes after the last tensor");
    }
    Ok(Checkpoint { meta, model })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read(BufReader::new(f)).with_context(|| format!("loading checkpoint {}", path.display()))
}
