use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::container::{Container, FORMAT_VERSION};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::pipeline::config::TrainConfig;

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Non-tensor checkpoint contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Optimizer updates applied so far; also the position of the per-step random streams.
    pub global_step: u64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

fn tensor_data(t: &Tensor) -> Result<(Vec<usize>, Vec<f32>)> {
    Ok((
        t.dims().to_vec(),
        t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
    ))
}

pub fn save(path: &Path, meta: &CheckpointMeta, model: &Denoiser, optimizer: Option<&AdamW>) -> Result<()> {
    let mut c = Container::new(CHECKPOINT_KIND, serde_json::to_value(meta)?);
    for (name, var) in model.named_parameters() {
        let (shape, data) = tensor_data(var.as_tensor())?;
        c.push(format!("model/{name}"), shape, data);
    }
    if let Some(opt) = optimizer {
        for (name, m, v) in opt.state() {
            let (shape, data) = tensor_data(m)?;
            c.push(format!("adam_m/{name}"), shape, data);
            let (shape, data) = tensor_data(v)?;
            c.push(format!("adam_v/{name}"), shape, data);
        }
    }
    c.write(path)
}

pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub model: Denoiser,
    container: Container,
    path: PathBuf,
}

impl LoadedCheckpoint {
    /// Copies stored moment buffers into `opt`.
    pub fn restore_optimizer(&self, opt: &mut AdamW) -> Result<()> {
        let device = self.model.device().clone();
        let to_tensor = |name: String| -> Option<Tensor> {
            let t = self.container.get(&name)?;
            Tensor::from_slice(&t.data, t.shape.as_slice(), &device).ok()
        };
        opt.restore(self.meta.global_step, |name| {
            Some((to_tensor(format!("adam_m/{name}"))?, to_tensor(format!("adam_v/{name}"))?))
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn load(path: &Path, device: &Device) -> Result<LoadedCheckpoint> {
    let container = Container::read(path, CHECKPOINT_KIND)?;
    let meta: CheckpointMeta = serde_json::from_value(container.meta.clone()).map_err(|e| Error::Container {
        path: path.to_path_buf(),
        reason: format!("bad checkpoint metadata: {e}"),
    })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Container {
            path: path.to_path_buf(),
            reason: format!("checkpoint format {} is not supported", meta.format_version),
        });
    }
    let model = Denoiser::new(meta.config.denoiser.clone(), meta.config.seed, candle_core::DType::F32, device)?;
    for (name, var) in model.named_parameters() {
        let stored = container.get(&format!("model/{name}")).ok_or_else(|| Error::Container {
            path: path.to_path_buf(),
            reason: format!("missing weight {name}"),
        })?;
        if stored.shape != var.dims() {
            return Err(Error::Container {
                path: path.to_path_buf(),
                reason: format!("weight {name} has shape {:?}, model expects {:?}", stored.shape, var.dims()),
            });
        }
        var.set(&Tensor::from_slice(&stored.data, stored.shape.as_slice(), device)?)?;
    }
    Ok(LoadedCheckpoint {
        meta,
        model,
        container,
        path: path.to_path_buf(),
    })
}

pub fn epoch_file(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_epoch{epoch:04}.uwb"))
}

/// Highest-epoch checkpoint in `dir`, if any.
pub fn latest(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("checkpoint_epoch") && n.ends_with(".uwb"))
        })
        .collect();
    found.sort();
    found.pop()
}
