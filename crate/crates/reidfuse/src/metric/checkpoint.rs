//! Single-file checkpoint container: backbone tag, config snapshot (JSON),
//! named f32 weight arrays, the training seed, and the epoch counter.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneKind, CnnMidConfig, WinTransformerConfig};
use crate::error::{Error, Result};
use crate::imgio::write_atomic;
use crate::metric::sampler::SamplerConfig;
use crate::metric::trainer::TrainConfig;
use crate::metric::triplet::TripletConfig;
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"REIDCKP1";

/// Everything needed to rebuild a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct CheckpointConfig {
    pub cnn_mid: CnnMidConfig,
    pub transformer: WinTransformerConfig,
    pub sampler: SamplerConfig,
    pub triplet: TripletConfig,
    pub train: TrainConfig,
}

impl CheckpointConfig {
    pub fn backbone_kind(&self) -> BackboneKind {
        self.train.backbone
    }
}

pub struct LoadedCheckpoint {
    pub config: CheckpointConfig,
    pub seed: u64,
    pub epoch: u32,
    pub params: Vec<(String, ArrayD<f32>)>,
}

pub fn checkpoint_to_bytes(
    config: &CheckpointConfig,
    store: &ParamStore,
    seed: u64,
    epoch: u32,
) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(config)
        .map_err(|e| Error::Config(format!("config not serializable: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(match config.backbone_kind() {
        BackboneKind::CnnMid => 0,
        BackboneKind::Transformer => 1,
    });
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);

    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for param in store.iter() {
        let name = param.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(param.value.ndim() as u8);
        for &d in param.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in param.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&epoch.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    config: &CheckpointConfig,
    store: &ParamStore,
    seed: u64,
    epoch: u32,
) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(config, store, seed, epoch)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(self.origin, "checkpoint truncated"));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8], origin: &Path) -> Result<LoadedCheckpoint> {
    let mut r = Reader {
        bytes,
        pos: 0,
        origin,
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::parse(origin, "missing REIDCKP1 magic"));
    }
    let tag = r.take(1)?[0];
    let meta_len = r.u32()? as usize;
    let config: CheckpointConfig = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::parse(origin, format!("bad config snapshot: {e}")))?;
    let tag_kind = match tag {
        0 => BackboneKind::CnnMid,
        1 => BackboneKind::Transformer,
        other => {
            return Err(Error::parse(
                origin,
                format!("unknown backbone tag {other}"),
            ))
        }
    };
    if tag_kind != config.backbone_kind() {
        return Err(Error::parse(origin, "backbone tag disagrees with config"));
    }

    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::parse(origin, "non-utf8 parameter name"))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut values = Vec::with_capacity(count);
        for chunk in r.take(count * 4)?.chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| Error::parse(origin, format!("bad weight shape: {e}")))?;
        params.push((name, arr));
    }
    let seed = r.u64()?;
    let epoch = r.u32()?;
    if r.pos != bytes.len() {
        return Err(Error::parse(origin, "trailing bytes after checkpoint"));
    }
    Ok(LoadedCheckpoint {
        config,
        seed,
        epoch,
        params,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, path)
}

/// Rebuilds the backbone described by a checkpoint and restores every weight.
pub fn rebuild_backbone(loaded: &LoadedCheckpoint) -> Result<(Backbone, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(loaded.seed);
    use rand::SeedableRng;
    let backbone = Backbone::build(
        loaded.config.backbone_kind(),
        &loaded.config.cnn_mid,
        &loaded.config.transformer,
        &mut store,
        &mut rng,
    )?;
    if loaded.params.len() != store.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} params, architecture expects {}",
            loaded.params.len(),
            store.len()
        )));
    }
    for (name, value) in &loaded.params {
        store.load_named(name, value.clone())?;
    }
    Ok((backbone, store))
}

/// Copies weights with matching names and shapes from a checkpoint into an
/// existing store (layer-count mismatches are fine); returns how many arrays
/// were imported.
pub fn load_pretrained(store: &mut ParamStore, path: &Path) -> Result<usize> {
    let loaded = load_checkpoint(path)?;
    let mut imported = 0;
    let existing: std::collections::HashSet<String> =
        store.iter().map(|p| p.name.clone()).collect();
    for (name, value) in loaded.params {
        if existing.contains(&name)
            && store
                .iter()
                .any(|p| p.name == name && p.value.shape() == value.shape())
        {
            store.load_named(&name, value)?;
            imported += 1;
        }
    }
    Ok(imported)
}
