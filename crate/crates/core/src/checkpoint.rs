//! Per-stage checkpoints: a TOML manifest next to a raw little-endian f64
//! payload holding the stage's tensors in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, StageTag};
use crate::error::{Error, Result};
use crate::model::Pipeline;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: StageTag,
    pub seed: u64,
    pub payload: String,
    pub payload_sha256: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor)>,
}

/// Manifest path for `tag` inside `dir`.
pub fn checkpoint_path(dir: &Path, tag: StageTag) -> PathBuf {
    dir.join(format!("{tag}.toml"))
}

fn bytes_of(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the tensors of one stage of `pipeline` under `dir`.
pub fn save_checkpoint(pipeline: &Pipeline, tag: StageTag, seed: u64, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors = pipeline.stage_tensors(tag);
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        let b = bytes_of(t);
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            sha256: sha(&b),
        });
        payload.extend(b);
    }
    let payload_name = format!("{tag}.bin");
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage: tag,
        seed,
        payload: payload_name.clone(),
        payload_sha256: sha(&payload),
        config: pipeline.cfg.clone(),
        tensors: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let bin_path = dir.join(&payload_name);
    fs::write(&bin_path, &payload).map_err(|e| Error::io(&bin_path, e))?;
    let path = checkpoint_path(dir, tag);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads and verifies a checkpoint given its manifest path.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} (this build reads {FORMAT_VERSION})",
            path.display(),
            manifest.format_version
        )));
    }
    let bin_path = path.parent().unwrap_or(Path::new(".")).join(&manifest.payload);
    let payload = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if sha(&payload) != manifest.payload_sha256 {
        return Err(Error::Checkpoint(format!("{}: payload checksum mismatch", bin_path.display())));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = offset + 8 * n;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("{}: payload too short for {}", bin_path.display(), e.name)));
        }
        let chunk = &payload[offset..end];
        if sha(chunk) != e.sha256 {
            return Err(Error::Checkpoint(format!("{}: checksum mismatch", e.name)));
        }
        let data = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
        offset = end;
    }
    if offset != payload.len() {
        return Err(Error::Checkpoint(format!("{}: trailing bytes", bin_path.display())));
    }
    Ok(Checkpoint { manifest, tensors })
}

impl Pipeline {
    /// Loads `ckpt` into the `slot` stage; the checkpoint must belong to that
    /// stage and share this pipeline's configuration.
    pub fn install(&mut self, ckpt: Checkpoint, slot: StageTag) -> Result<()> {
        if ckpt.manifest.stage != slot {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds stage {} but was loaded into {slot}",
                ckpt.manifest.stage
            )));
        }
        if ckpt.manifest.config != self.cfg {
            return Err(Error::Checkpoint(format!("{slot}: model configuration differs")));
        }
        self.set_stage_tensors(slot, ckpt.tensors)
    }

    pub fn save_all(&self, seed: u64, dir: &Path) -> Result<()> {
        for tag in StageTag::ALL {
            save_checkpoint(self, tag, seed, dir)?;
        }
        Ok(())
    }

    /// Rebuilds a pipeline from the checkpoints of every stage in `dir`.
    pub fn load_all(dir: &Path) -> Result<(Self, u64)> {
        let mut loaded = Vec::with_capacity(5);
        for tag in StageTag::ALL {
            let path = checkpoint_path(dir, tag);
            if !path.exists() {
                return Err(Error::Checkpoint(format!("missing {tag} checkpoint in {}", dir.display())));
            }
            loaded.push(load_checkpoint(&path)?);
        }
        let seed = loaded[0].manifest.seed;
        let mut p = Pipeline::new(loaded[0].manifest.config.clone(), seed)?;
        for (tag, ckpt) in StageTag::ALL.into_iter().zip(loaded) {
            p.install(ckpt, tag)?;
        }
        Ok((p, seed))
    }
}
