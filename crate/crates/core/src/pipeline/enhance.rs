use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};

use crate::denoiser::{BrightnessLevel, Denoiser};
use crate::diffusion::{ddim_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::RawImage;
use crate::pipeline::checkpoint;
use crate::pipeline::config::TrainConfig;
use crate::preprocess::{fusion_for, list_files};

/// Appended to the file stem of enhanced outputs.
pub const ENHANCED_SUFFIX: &str = "_enhanced";

/// A frozen model ready for sampling.
pub struct Enhancer {
    pub model: Denoiser,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
}

impl Enhancer {
    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let loaded = checkpoint::load(path, device)?;
        Self::new(loaded.model, loaded.meta.config)
    }

    pub fn new(model: Denoiser, config: TrainConfig) -> Result<Self> {
        Ok(Self {
            schedule: config.schedule().build()?,
            model,
            config,
        })
    }

    /// Enhances one image: it is resized to the training resolution, its own
    /// color/SNR maps become the conditioning, and DDIM runs from `seed`.
    pub fn enhance_image(&self, image: &RawImage, lambda: BrightnessLevel, steps: usize, seed: u64) -> Result<RawImage> {
        let size = self.config.image_size;
        let input = image.resize(size, size);
        let fusion = fusion_for(&input, &self.config.snr);
        let cond = fusion.to_tensor(DType::F32, self.model.device())?;
        let out = ddim_sample(&self.model, &cond, lambda.value(), steps, &self.schedule, seed)?;
        RawImage::from_tensor(&out, image.source_id.clone())
    }
}

/// Path of the enhanced counterpart of `input` inside `out_dir`.
pub fn output_path(input: &Path, out_dir: &Path) -> PathBuf {
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    out_dir.join(format!("{stem}{ENHANCED_SUFFIX}.png"))
}

/// Enhances a file or every decodable image in a directory, writing PNGs with
/// the `_enhanced` suffix next to the inputs or into `out_dir`.
pub fn enhance(
    checkpoint_path: &Path,
    input: &Path,
    lambda: f64,
    steps: usize,
    seed: u64,
    out_dir: Option<&Path>,
    device: &Device,
) -> Result<Vec<PathBuf>> {
    let lambda = BrightnessLevel::new(lambda)?;
    let enhancer = Enhancer::load(checkpoint_path, device)?;
    let files = if input.is_dir() {
        list_files(input)?
            .into_iter()
            .filter(|p| {
                !p.file_stem()
                    .is_some_and(|s| s.to_string_lossy().ends_with(ENHANCED_SUFFIX))
            })
            .collect()
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(Error::io(
            input,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input not found"),
        ));
    };
    let mut written = Vec::new();
    for path in files {
        let image = match RawImage::load(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let dir = match out_dir {
            Some(d) => d.to_path_buf(),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let out = enhancer.enhance_image(&image, lambda, steps, seed)?;
        let target = output_path(&path, &dir);
        out.save_png(&target)?;
        written.push(target);
    }
    if written.is_empty() {
        return Err(Error::EmptyDataset(input.to_path_buf()));
    }
    Ok(written)
}
