//! Dataset split, the single optimization step, and the epoch loop with
//! checkpointing and a JSON-lines log.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{brightness_of, BrightnessLevel, Denoiser};
use crate::diffusion::{gaussian_noise, predict_x0_batch, sample_xt_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::{stack_images, RawImage};
use crate::losses::{composite_loss, scalar, simple_loss, LossReport, LossTerm};
use crate::optim::AdamW;
use crate::perceptual::FeatureExtractor;
use crate::pipeline::checkpoint::{self, CheckpointMeta};
use crate::pipeline::config::TrainConfig;
use crate::preprocess::{self, stack_fusion, FusionMap, TrainingTriple};
use crate::rng;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const SPLIT_FILE: &str = "split.json";

/// Seeded shuffle followed by a cut at `round(split * n)`, kept within `1..n`.
pub fn split_dataset<T: Clone>(items: &[T], split: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 items to split, got {}",
            items.len()
        )));
    }
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::InvalidArgument(format!("split must be in (0, 1), got {split}")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng::seeded(seed));
    let n_train = ((split * items.len() as f64).round() as usize).clamp(1, items.len() - 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// One element of a training batch with its diffusion draw fixed.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub source_id: String,
    pub low: RawImage,
    pub high: RawImage,
    pub fusion: FusionMap,
    pub lambda: BrightnessLevel,
    pub t: usize,
    /// `(3, H, W)` standard-normal noise.
    pub noise: Tensor,
}

impl TrainSample {
    pub fn draw<R: Rng>(triple: &TrainingTriple, sched: &NoiseSchedule, rng: &mut R, device: &Device) -> Result<Self> {
        let t = rng.random_range(1..=sched.len());
        let (h, w) = (triple.high.height(), triple.high.width());
        let noise = gaussian_noise(rng, (3, h, w), DType::F32, device)?;
        Ok(Self {
            source_id: triple.source_id.clone(),
            low: triple.low.clone(),
            high: triple.high.clone(),
            fusion: triple.fusion.clone(),
            lambda: brightness_of(&triple.high),
            t,
            noise,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub total: f64,
    pub losses: BTreeMap<LossTerm, f64>,
    pub wall_time_s: f64,
}

/// Model, optimizer, and fixed training context owned by one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Denoiser,
    pub optimizer: AdamW,
    pub schedule: NoiseSchedule,
    pub extractor: FeatureExtractor,
    pub global_step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Every source id that has contributed a gradient.
    pub seen_ids: BTreeSet<String>,
    device: Device,
}

fn load_extractor(config: &TrainConfig, device: &Device) -> Result<FeatureExtractor> {
    match &config.extractor_weights {
        Some(p) => FeatureExtractor::from_safetensors(p, DType::F32, device),
        None => FeatureExtractor::random_alexnet(config.extractor_seed, DType::F32, device),
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let model = Denoiser::new(config.denoiser.clone(), config.seed, DType::F32, device)?;
        Self::with_model(config, model, device)
    }

    fn with_model(config: TrainConfig, model: Denoiser, device: &Device) -> Result<Self> {
        let optimizer = AdamW::new(model.named_parameters(), config.optimizer())?;
        Ok(Self {
            schedule: config.schedule().build()?,
            extractor: load_extractor(&config, device)?,
            optimizer,
            model,
            config,
            global_step: 0,
            epoch: 0,
            seen_ids: BTreeSet::new(),
            device: device.clone(),
        })
    }

    /// Rebuilds a trainer (weights, moments, counters) from a checkpoint.
    pub fn from_checkpoint(path: &Path, device: &Device) -> Result<Self> {
        let loaded = checkpoint::load(path, device)?;
        let mut optimizer = AdamW::new(loaded.model.named_parameters(), loaded.meta.config.optimizer())?;
        loaded.restore_optimizer(&mut optimizer)?;
        let checkpoint::LoadedCheckpoint { meta, model, .. } = loaded;
        let mut trainer = Self::with_model(meta.config, model, device)?;
        trainer.optimizer = optimizer;
        trainer.global_step = meta.global_step;
        trainer.epoch = meta.epoch;
        Ok(trainer)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Random stream for the next optimizer step.
    pub fn step_rng(&self) -> rand_chacha::ChaCha8Rng {
        rng::stream(self.config.seed, (1 << 40) + self.global_step)
    }

    pub fn draw_samples(&self, batch: &[&TrainingTriple]) -> Result<Vec<TrainSample>> {
        let mut r = rng::stream(self.config.seed, (2 << 40) + self.global_step);
        batch
            .iter()
            .map(|t| TrainSample::draw(t, &self.schedule, &mut r, &self.device))
            .collect()
    }

    fn loss(&self, samples: &[TrainSample], epoch: usize, dropout: bool) -> Result<(Tensor, LossReport)> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let highs: Vec<&RawImage> = samples.iter().map(|s| &s.high).collect();
        let maps: Vec<&FusionMap> = samples.iter().map(|s| &s.fusion).collect();
        let x0 = stack_images(&highs, DType::F32, &self.device)?;
        let cond = stack_fusion(&maps, DType::F32, &self.device)?;
        let noise = Tensor::stack(&samples.iter().map(|s| s.noise.clone()).collect::<Vec<_>>(), 0)?;
        let ts: Vec<usize> = samples.iter().map(|s| s.t).collect();
        let lambdas: Vec<f64> = samples.iter().map(|s| s.lambda.value()).collect();

        let x_t = sample_xt_batch(&x0, &ts, &self.schedule, &noise)?;
        let eps_hat = if dropout {
            let mut r = self.step_rng();
            self.model.forward(&x_t, &ts, Some(&cond), &lambdas, Some(&mut r))?
        } else {
            self.model.forward::<rand_chacha::ChaCha8Rng>(&x_t, &ts, Some(&cond), &lambdas, None)?
        };
        let simple = simple_loss(&noise, &eps_hat)?;
        // Left unclamped: clamping zeroes the gradient of every saturated pixel,
        // which lets the auxiliary terms park x0_hat at the [0, 1] bounds.
        let x0_hat = predict_x0_batch(&x_t, &ts, &self.schedule, &eps_hat)?;
        let composite = composite_loss(
            &x0_hat,
            &x0,
            epoch,
            self.config.stage_switch_epoch,
            &self.config.loss_weights,
            &self.extractor,
        )?;
        let mut per_term = composite.report.per_term;
        per_term.insert(LossTerm::Simple, scalar(&simple)?);
        let mut active = composite.report.active_terms;
        active.insert(LossTerm::Simple);
        let report = LossReport::from_terms(per_term, active, &self.config.loss_weights);
        let total = (simple + composite.total)?;
        Ok((total, report))
    }

    /// One optimizer update on `samples`, diffusing the bright references and
    /// conditioning on the fusion maps of the dark inputs.
    pub fn train_step(&mut self, samples: &[TrainSample], epoch: usize) -> Result<LossReport> {
        let (total, report) = self.loss(samples, epoch, true)?;
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: self.global_step as usize,
                detail: format!("{:?}", report.per_term),
            });
        }
        let grads = total.backward()?;
        self.optimizer.step(&grads)?;
        self.global_step += 1;
        self.seen_ids.extend(samples.iter().map(|s| s.source_id.clone()));
        Ok(report)
    }

    /// Loss on fixed samples without dropout or an update.
    pub fn evaluate(&self, samples: &[TrainSample], epoch: usize) -> Result<LossReport> {
        Ok(self.loss(samples, epoch, false)?.1)
    }

    /// Runs one epoch over `train` in a seeded order and returns the mean losses.
    pub fn run_epoch(&mut self, train: &[TrainingTriple]) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(self.config.seed, (3 << 40) + epoch as u64));
        let mut sums: BTreeMap<LossTerm, f64> = BTreeMap::new();
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&TrainingTriple> = chunk.iter().map(|&i| &train[i]).collect();
            let samples = self.draw_samples(&batch)?;
            let report = self.train_step(&samples, epoch)?;
            for (k, v) in &report.per_term {
                *sums.entry(*k).or_default() += v;
            }
            total += report.total;
            steps += 1;
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch,
            steps,
            total: total / steps as f64,
            losses: sums.into_iter().map(|(k, v)| (k, v / steps as f64)).collect(),
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    pub fn meta(&self, train_ids: &[String], test_ids: &[String]) -> CheckpointMeta {
        CheckpointMeta {
            format_version: crate::container::FORMAT_VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            global_step: self.global_step,
            train_ids: train_ids.to_vec(),
            test_ids: test_ids.to_vec(),
        }
    }

    pub fn save(&self, path: &Path, train_ids: &[String], test_ids: &[String]) -> Result<()> {
        checkpoint::save(path, &self.meta(train_ids, test_ids), &self.model, Some(&self.optimizer))
    }
}

/// Loads triples from a preprocessed directory (one with a manifest) or
/// synthesizes them from raw images.
pub fn load_dataset(config: &TrainConfig, data_dir: &Path) -> Result<Vec<TrainingTriple>> {
    if !data_dir.is_dir() {
        return Err(Error::io(
            data_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
        ));
    }
    if data_dir.join(preprocess::MANIFEST_FILE).exists() {
        let triples = preprocess::load_triples(data_dir)?;
        if let Some(t) = triples
            .iter()
            .find(|t| t.low.height() != config.image_size || t.low.width() != config.image_size)
        {
            return Err(Error::Config(format!(
                "preprocessed image {} is {}x{}, config expects {}",
                t.source_id,
                t.low.width(),
                t.low.height(),
                config.image_size
            )));
        }
        Ok(triples)
    } else {
        preprocess::build_training_set(data_dir, config.seed, config.image_size, &config.snr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub records: Vec<EpochRecord>,
    pub split: SplitRecord,
}

fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn write_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Full training run: preprocessing, split, epoch loop, one checkpoint per
/// epoch, and `train_log.jsonl`. With `resume`, continues from the newest
/// checkpoint in `out_dir` and drops log records past it.
pub fn train(config: &TrainConfig, data_dir: &Path, out_dir: &Path, resume: bool, device: &Device) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let triples = load_dataset(config, data_dir)?;
    let (train_set, test_set) = split_dataset(&triples, config.split, config.seed)?;
    let split = SplitRecord {
        train: train_set.iter().map(|t| t.source_id.clone()).collect(),
        test: test_set.iter().map(|t| t.source_id.clone()).collect(),
    };
    let split_path = out_dir.join(SPLIT_FILE);
    fs::write(&split_path, serde_json::to_string_pretty(&split)?).map_err(|e| Error::io(&split_path, e))?;

    let log_path = out_dir.join(LOG_FILE);
    let latest = if resume { checkpoint::latest(out_dir) } else { None };
    let (mut trainer, mut records) = match latest {
        Some(path) => {
            log::info!("resuming from {}", path.display());
            let trainer = Trainer::from_checkpoint(&path, device)?;
            let records: Vec<EpochRecord> = read_log(&log_path)?
                .into_iter()
                .filter(|r| r.epoch < trainer.epoch)
                .collect();
            write_log(&log_path, &records)?;
            (trainer, records)
        }
        None => {
            write_log(&log_path, &[])?;
            (Trainer::new(config.clone(), device)?, Vec::new())
        }
    };
    if trainer.config.epochs != config.epochs {
        trainer.config.epochs = config.epochs;
    }

    let mut final_checkpoint = checkpoint::latest(out_dir).filter(|_| resume);
    while trainer.epoch < config.epochs {
        let record = trainer.run_epoch(&train_set)?;
        log::info!(
            "epoch {} total {:.4} ({} steps, {:.1}s)",
            record.epoch,
            record.total,
            record.steps,
            record.wall_time_s
        );
        let path = checkpoint::epoch_file(out_dir, trainer.epoch);
        trainer.save(&path, &split.train, &split.test)?;
        let mut f = OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&log_path, e))?;
        records.push(record);
        final_checkpoint = Some(path);
    }
    let final_checkpoint = final_checkpoint.ok_or_else(|| Error::Config("no epochs to run".into()))?;
    Ok(TrainOutcome {
        final_checkpoint,
        records,
        split,
    })
}
