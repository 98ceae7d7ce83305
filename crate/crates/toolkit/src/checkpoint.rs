//! Checkpoints: a directory of `.npy` arrays plus `meta.json`.
//!
//! `meta.json` records every array's shape and SHA-256, so the digest of
//! `meta.json` identifies the whole checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use hypermod::nn::Module;
use hypermod::train::{frozen_names, new_source, PretrainConfig};
use hypermod::{new_transfer, Discriminator, Generator, SynthesisConfig, Tensor, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use npyz::WriterBuilder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, ToolError};

pub const FORMAT_VERSION: u32 = 1;
const META_FILE: &str = "meta.json";
const ARRAY_DIR: &str = "arrays";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Frozen unconditional generator and its discriminator.
    Source,
    /// Conditional training state (possibly at step 0 after alignment).
    Transfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub pretrain: PretrainConfig,
    pub train: Option<TrainConfig>,
    pub class_names: Vec<String>,
    pub step: u64,
    pub opt_steps: (u64, u64),
    pub rng: ChaCha8Rng,
    /// Generator parameters that are frozen.
    pub frozen: Vec<String>,
    pub arrays: BTreeMap<String, ArrayMeta>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: Meta,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn npy_bytes(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let shape: Vec<u64> = t.shape().iter().map(|&s| s as u64).collect();
    let mut buf = Vec::new();
    let mut w = npyz::WriteOptions::<f32>::new()
        .default_dtype()
        .shape(&shape)
        .writer(&mut buf)
        .begin_nd()
        .map_err(|e| ToolError::Checkpoint(e.to_string()))?;
    w.extend(t.data().iter().copied()).map_err(|e| ToolError::Checkpoint(e.to_string()))?;
    w.finish().map_err(|e| ToolError::Checkpoint(e.to_string()))?;
    Ok(buf)
}

fn ckpt_err(path: &Path, what: impl std::fmt::Display) -> ToolError {
    ToolError::Checkpoint(format!("{}: {what}", path.display()))
}

impl Checkpoint {
    pub fn source(g: &Generator<f32>, d: &Discriminator<f32>, pretrain: &PretrainConfig) -> Self {
        let mut arrays = g.state();
        arrays.extend(d.state());
        Self::assemble(
            CheckpointKind::Source,
            pretrain.clone(),
            None,
            vec![],
            0,
            (0, 0),
            ChaCha8Rng::seed_from_u64(pretrain.seed),
            frozen_names(g),
            arrays,
        )
    }

    pub fn transfer(t: &Trainer<f32>, pretrain: &PretrainConfig, train: &TrainConfig, class_names: &[String]) -> Self {
        Self::assemble(
            CheckpointKind::Transfer,
            pretrain.clone(),
            Some(train.clone()),
            class_names.to_vec(),
            t.step,
            (t.opt_g.steps(), t.opt_d.steps()),
            t.rng.clone(),
            frozen_names(&t.g),
            t.arrays(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        kind: CheckpointKind,
        pretrain: PretrainConfig,
        train: Option<TrainConfig>,
        class_names: Vec<String>,
        step: u64,
        opt_steps: (u64, u64),
        rng: ChaCha8Rng,
        frozen: Vec<String>,
        arrays: BTreeMap<String, Tensor<f32>>,
    ) -> Self {
        let arrays_meta = arrays
            .iter()
            .map(|(k, v)| {
                let bytes = npy_bytes(v).expect("in-memory npy encoding");
                (k.clone(), ArrayMeta { shape: v.shape().to_vec(), sha256: hex(&Sha256::digest(bytes)) })
            })
            .collect();
        Self {
            meta: Meta {
                format_version: FORMAT_VERSION,
                kind,
                pretrain,
                train,
                class_names,
                step,
                opt_steps,
                rng,
                frozen,
                arrays: arrays_meta,
            },
            arrays,
        }
    }

    fn meta_bytes(&self) -> Vec<u8> {
        let mut s = serde_json::to_vec_pretty(&self.meta).expect("metadata serializes");
        s.push(b'\n');
        s
    }

    /// SHA-256 of the metadata, which covers every array hash.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.meta_bytes()))
    }

    /// Writes to a sibling temp directory, then swaps it into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(ToolError::io(parent))?;
        let name = dir.file_name().ok_or_else(|| ckpt_err(dir, "not a directory name"))?.to_string_lossy();
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(ToolError::io(&tmp))?;
        }
        let adir = tmp.join(ARRAY_DIR);
        fs::create_dir_all(&adir).map_err(ToolError::io(&adir))?;
        for (k, v) in &self.arrays {
            let p = adir.join(format!("{k}.npy"));
            let mut f = BufWriter::new(fs::File::create(&p).map_err(ToolError::io(&p))?);
            f.write_all(&npy_bytes(v)?).map_err(ToolError::io(&p))?;
            f.flush().map_err(ToolError::io(&p))?;
        }
        let mp = tmp.join(META_FILE);
        fs::write(&mp, self.meta_bytes()).map_err(ToolError::io(&mp))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(ToolError::io(dir))?;
        }
        fs::rename(&tmp, dir).map_err(ToolError::io(dir))?;
        Ok(())
    }

    /// Loads and verifies every array against its recorded hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join(META_FILE);
        if !mp.is_file() {
            return Err(ckpt_err(dir, "no checkpoint here (meta.json missing)"));
        }
        let text = fs::read(&mp).map_err(ToolError::io(&mp))?;
        let meta: Meta = serde_json::from_slice(&text).map_err(|e| ckpt_err(&mp, e))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(ckpt_err(dir, format!("format version {} (expected {FORMAT_VERSION})", meta.format_version)));
        }
        let mut arrays = BTreeMap::new();
        for (k, am) in &meta.arrays {
            let p: PathBuf = dir.join(ARRAY_DIR).join(format!("{k}.npy"));
            let bytes = fs::read(&p).map_err(|e| ckpt_err(&p, e))?;
            if hex(&Sha256::digest(&bytes)) != am.sha256 {
                return Err(ckpt_err(&p, "hash mismatch, file is corrupt"));
            }
            let npy = npyz::NpyFile::new(BufReader::new(&bytes[..])).map_err(|e| ckpt_err(&p, e))?;
            let shape: Vec<usize> = npy.shape().iter().map(|&s| s as usize).collect();
            if shape != am.shape {
                return Err(ckpt_err(&p, format!("shape {shape:?}, metadata says {:?}", am.shape)));
            }
            let data: Vec<f32> = npy.into_vec().map_err(|e| ckpt_err(&p, e))?;
            arrays.insert(k.clone(), Tensor::from_vec(&shape, data).map_err(|e| ckpt_err(&p, e))?);
        }
        Ok(Self { meta, arrays })
    }

    pub fn n_classes(&self) -> usize {
        self.meta.class_names.len()
    }

    pub fn synthesis(&self) -> &SynthesisConfig {
        &self.meta.pretrain.synthesis
    }

    /// The frozen source generator and discriminator.
    ///
    /// For transfer checkpoints these are skeletons whose weights
    /// [`Checkpoint::trainer`] overwrites.
    pub fn source_models(&self) -> Result<(Generator<f32>, Discriminator<f32>)> {
        let t = new_source::<f32>(&self.meta.pretrain)?;
        let (mut g, mut d) = (t.g, t.d);
        if self.meta.kind == CheckpointKind::Source {
            g.load_state(&self.arrays).map_err(|e| ToolError::Checkpoint(e.to_string()))?;
            g.refresh_stats()?;
            d.load_state(&self.arrays).map_err(|e| ToolError::Checkpoint(e.to_string()))?;
        }
        g.freeze_source()?;
        self.check_frozen(&g)?;
        Ok((g, d))
    }

    /// Rebuilds the full training state of a transfer checkpoint.
    pub fn trainer(&self) -> Result<Trainer<f32>> {
        let train = match (&self.meta.kind, &self.meta.train) {
            (CheckpointKind::Transfer, Some(t)) => t,
            _ => return Err(ToolError::Checkpoint("a source checkpoint has no training state".into())),
        };
        let (g, d) = self.source_models()?;
        let mut t = new_transfer(&g, &d, self.n_classes(), train, false)?.trainer;
        t.restore(&self.arrays, self.meta.step, self.meta.rng.clone(), self.meta.opt_steps)
            .map_err(|e| ToolError::Checkpoint(e.to_string()))?;
        self.check_frozen(&t.g)?;
        Ok(t)
    }

    /// The generator used for sampling and evaluation: the averaged copy
    /// of a transfer checkpoint, the source generator otherwise.
    pub fn sampling_generator(&self) -> Result<Generator<f32>> {
        match self.meta.kind {
            CheckpointKind::Source => Ok(self.source_models()?.0),
            CheckpointKind::Transfer => Ok(self.trainer()?.g_ema),
        }
    }

    fn check_frozen(&self, g: &Generator<f32>) -> Result<()> {
        if frozen_names(g) != self.meta.frozen {
            return Err(ToolError::Checkpoint("frozen parameter set differs from the recorded one".into()));
        }
        Ok(())
    }
}
