//! Run configuration and the pretraining loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    fixed_weighted_total, l1_reconstruction, nt_xent, rotation_ce, ContrastiveConfig, LossBreakdown, TaskLosses,
    UncertaintyWeights,
};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::model::{ModelConfig, SiTModel};
use crate::optim::{AdamConfig, AdamW, Schedule};
use crate::pretext::{make_pretext_batch, AugmentParams, CorruptionParams, PretextBatch, PretextParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskFlags {
    pub reconstruction: bool,
    pub rotation: bool,
    pub contrastive: bool,
}

impl TaskFlags {
    pub const ALL: Self = Self {
        reconstruction: true,
        rotation: true,
        contrastive: true,
    };

    pub fn any(&self) -> bool {
        self.reconstruction || self.rotation || self.contrastive
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.reconstruction {
            parts.push("rec");
        }
        if self.rotation {
            parts.push("rot");
        }
        if self.contrastive {
            parts.push("con");
        }
        parts.join("+")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Weighting {
    Fixed([f64; 3]),
    Uncertainty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    /// Warmup for `warmup_fraction` of the run, then cosine to `lr_floor`.
    Cosine,
}

/// Settings for the supervised protocols that follow pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub finetune_epochs: u64,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub probe_epochs: u64,
    pub probe_lr: f64,
    pub probe_batch: usize,
    pub feature_batch: usize,
    pub mixup: bool,
    pub mixup_alpha: f64,
    pub auto_augment: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            finetune_epochs: 10,
            finetune_lr: 5e-4,
            finetune_batch: 32,
            probe_epochs: 100,
            probe_lr: 1e-2,
            probe_batch: 64,
            feature_batch: 64,
            mixup: false,
            mixup_alpha: 0.2,
            auto_augment: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub tasks: TaskFlags,
    pub weighting: Weighting,
    pub model: ModelConfig,
    pub optim: AdamConfig,
    pub schedule: ScheduleKind,
    pub warmup_fraction: f64,
    pub lr_floor: f64,
    pub augment: AugmentParams,
    pub corruption: CorruptionParams,
    pub temperature: f64,
    pub epochs: u64,
    /// Source images per step; each contributes two views.
    pub batch_size: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Stop (and checkpoint) once this many steps have run in total.
    pub stop_after_steps: Option<u64>,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tasks: TaskFlags::ALL,
            weighting: Weighting::Uncertainty,
            model: ModelConfig::tiny_cifar(),
            optim: AdamConfig::default(),
            schedule: ScheduleKind::Cosine,
            warmup_fraction: 0.05,
            lr_floor: 1e-6,
            augment: AugmentParams::default(),
            corruption: CorruptionParams::default(),
            temperature: ContrastiveConfig::default().temperature,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            out_dir: None,
            stop_after_steps: None,
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true/false, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tasks.any() {
            return Err(Error::Config("at least one pretext task must be enabled".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} gives {} views; at least 4 are needed",
                self.batch_size,
                2 * self.batch_size
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if let Weighting::Fixed(a) = self.weighting {
            if a.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::Config(format!("fixed weights {a:?} must be non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        self.model.validate()?;
        self.optim.validate()?;
        self.augment.validate()?;
        self.corruption.validate()
    }

    /// Apply one `key = value` setting from a config file or `--set`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "preset" {
            let seed = self.model.seed;
            self.model = ModelConfig::preset(value)?;
            self.model.seed = seed;
            return Ok(());
        }
        if self.model.set(key, value)? {
            return Ok(());
        }
        let alphas = |cfg: &mut Self| -> [f64; 3] {
            match cfg.weighting {
                Weighting::Fixed(a) => a,
                Weighting::Uncertainty => [1.0; 3],
            }
        };
        match key {
            "reconstruction" => self.tasks.reconstruction = parse_bool(key, value)?,
            "rotation" => self.tasks.rotation = parse_bool(key, value)?,
            "contrastive" => self.tasks.contrastive = parse_bool(key, value)?,
            "weighting" => {
                self.weighting = match value {
                    "uncertainty" => Weighting::Uncertainty,
                    "fixed" => Weighting::Fixed(alphas(self)),
                    _ => return Err(Error::Config(format!("weighting must be fixed or uncertainty, got `{value}`"))),
                }
            }
            "alpha1" | "alpha2" | "alpha3" => {
                let mut a = alphas(self);
                a[key.as_bytes()[5] as usize - b'1' as usize] = parse(key, value)?;
                self.weighting = Weighting::Fixed(a);
            }
            "lr" => self.optim.lr = parse(key, value)?,
            "beta1" => self.optim.beta1 = parse(key, value)?,
            "beta2" => self.optim.beta2 = parse(key, value)?,
            "adam_eps" => self.optim.eps = parse(key, value)?,
            "weight_decay" => self.optim.weight_decay = parse(key, value)?,
            "max_grad_norm" => self.optim.max_grad_norm = Some(parse(key, value)?),
            "schedule" => {
                self.schedule = match value {
                    "constant" => ScheduleKind::Constant,
                    "cosine" => ScheduleKind::Cosine,
                    _ => return Err(Error::Config(format!("schedule must be constant or cosine, got `{value}`"))),
                }
            }
            "warmup_fraction" => self.warmup_fraction = parse(key, value)?,
            "lr_floor" => self.lr_floor = parse(key, value)?,
            "crop_scale_min" => self.augment.crop_scale.0 = parse(key, value)?,
            "crop_scale_max" => self.augment.crop_scale.1 = parse(key, value)?,
            "hflip_prob" => self.augment.hflip_prob = parse(key, value)?,
            "brightness" => self.augment.brightness = parse(key, value)?,
            "contrast" => self.augment.contrast = parse(key, value)?,
            "saturation" => self.augment.saturation = parse(key, value)?,
            "drop_min" => self.corruption.drop_fraction.0 = parse(key, value)?,
            "drop_max" => self.corruption.drop_fraction.1 = parse(key, value)?,
            "replace_min" => self.corruption.replace_fraction.0 = parse(key, value)?,
            "replace_max" => self.corruption.replace_fraction.1 = parse(key, value)?,
            "block_min" => {
                let v = parse(key, value)?;
                self.corruption.block_h.0 = v;
                self.corruption.block_w.0 = v;
            }
            "block_max" => {
                let v = parse(key, value)?;
                self.corruption.block_h.1 = v;
                self.corruption.block_w.1 = v;
            }
            "blur_sigma" => self.corruption.blur_sigma = parse(key, value)?,
            "blur_kernel" => self.corruption.blur_kernel = parse(key, value)?,
            "blur_blocks_min" => self.corruption.blur_blocks.0 = parse(key, value)?,
            "blur_blocks_max" => self.corruption.blur_blocks.1 = parse(key, value)?,
            "grey_blocks_min" => self.corruption.grey_blocks.0 = parse(key, value)?,
            "grey_blocks_max" => self.corruption.grey_blocks.1 = parse(key, value)?,
            "colour_strength" => self.corruption.colour_strength = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "run_seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "stop_after_steps" => self.stop_after_steps = Some(parse(key, value)?),
            "finetune_epochs" => self.eval.finetune_epochs = parse(key, value)?,
            "finetune_lr" => self.eval.finetune_lr = parse(key, value)?,
            "finetune_batch" => self.eval.finetune_batch = parse(key, value)?,
            "probe_epochs" => self.eval.probe_epochs = parse(key, value)?,
            "probe_lr" => self.eval.probe_lr = parse(key, value)?,
            "probe_batch" => self.eval.probe_batch = parse(key, value)?,
            "feature_batch" => self.eval.feature_batch = parse(key, value)?,
            "mixup" => self.eval.mixup = parse_bool(key, value)?,
            "mixup_alpha" => self.eval.mixup_alpha = parse(key, value)?,
            "auto_augment" => self.eval.auto_augment = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Apply every setting of a `key = value` text.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (k, v) in crate::config::parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        (dataset_len / self.batch_size) as u64
    }

    pub fn schedule_for(&self, total_steps: u64) -> Schedule {
        match self.schedule {
            ScheduleKind::Constant => Schedule::Constant,
            ScheduleKind::Cosine => Schedule::WarmupCosine {
                warmup: (total_steps as f64 * self.warmup_fraction).round() as u64,
                total: total_steps,
                floor: self.lr_floor,
            },
        }
    }

    fn pretext_params(&self) -> PretextParams {
        PretextParams {
            augment: self.augment.clone(),
            corruption: if self.tasks.reconstruction {
                self.corruption.clone()
            } else {
                CorruptionParams::none()
            },
            image_size: self.model.image_size,
            patch_size: self.model.patch_size,
            rotate: self.tasks.rotation,
        }
    }
}

/// Generator for the data order of one epoch.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(2));
    rng
}

/// Generator for the augmentations and corruptions of one global step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(2) + 1);
    rng
}

/// Per-step record returned by [`Trainer::train_step`].
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub lr: f64,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: SiTModel<f32>,
    pub uncertainty: UncertaintyWeights<f32>,
    pub opt: AdamW<f32>,
    step: u64,
    total_steps: u64,
    steps_per_epoch: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig, dataset_len: usize) -> Result<Self> {
        cfg.validate()?;
        let steps_per_epoch = cfg.steps_per_epoch(dataset_len);
        if steps_per_epoch == 0 {
            return Err(Error::Config(format!(
                "dataset of {dataset_len} images is smaller than one batch of {}",
                cfg.batch_size
            )));
        }
        let total_steps = steps_per_epoch * cfg.epochs;
        let mut optim = cfg.optim;
        optim.schedule = cfg.schedule_for(total_steps);
        Ok(Self {
            model: SiTModel::new(cfg.model.clone())?,
            uncertainty: UncertaintyWeights::new(),
            opt: AdamW::new(optim)?,
            cfg,
            step: 0,
            total_steps,
            steps_per_epoch,
        })
    }

    /// Continue a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: RunConfig, dataset_len: usize, ck: &Checkpoint) -> Result<Self> {
        let mut cfg = cfg;
        cfg.model = ck.config.clone();
        let mut t = Self::new(cfg, dataset_len)?;
        ck.load_into(t.model.params_mut())?;
        ck.load_into(t.uncertainty.params_mut())?;
        if let Some(o) = &ck.optimizer {
            t.opt.restore(o.step, o.moments.clone());
        }
        t.step = ck.step;
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch
    }

    fn batch_indices(&self, dataset_len: usize) -> Vec<usize> {
        let epoch = self.epoch();
        let mut perm: Vec<usize> = (0..dataset_len).collect();
        perm.shuffle(&mut epoch_rng(self.cfg.seed, epoch));
        let k = (self.step % self.steps_per_epoch) as usize;
        let n = self.cfg.batch_size;
        perm[k * n..(k + 1) * n].to_vec()
    }

    /// The pretext batch the next step will train on.
    pub fn next_batch(&self, data: &Dataset) -> Result<PretextBatch> {
        if data.image_shape()[0] != self.cfg.model.channels {
            return Err(Error::Config(format!(
                "dataset has {} channels, model expects {}",
                data.image_shape()[0],
                self.cfg.model.channels
            )));
        }
        let idx = self.batch_indices(data.len());
        let images = data.images.select(&idx)?;
        make_pretext_batch(&images, &self.cfg.pretext_params(), &mut step_rng(self.cfg.seed, self.step))
    }

    /// Build the loss of one batch on `tape`.
    pub fn losses(&self, tape: &mut Tape<f32>, batch: &PretextBatch) -> Result<(crate::autograd::Var, LossBreakdown)> {
        let tasks = self.cfg.tasks;
        let out = self.model.forward(tape, &batch.corrupted_views)?;
        let mut losses = TaskLosses::default();
        let check = |tape: &Tape<f32>, v, term| -> Result<()> {
            if tape.scalar(v).is_finite() {
                Ok(())
            } else {
                Err(Error::NonFinite { term, step: self.step })
            }
        };
        if tasks.reconstruction {
            let target = tape.input(batch.clean_targets.clone());
            let l = l1_reconstruction(tape, target, out.recon)?;
            check(tape, l, "reconstruction loss")?;
            losses.recons = Some(l);
        }
        if tasks.rotation {
            let l = rotation_ce(tape, out.rot_logits, &batch.rotation_labels)?;
            check(tape, l, "rotation loss")?;
            losses.rotation = Some(l);
        }
        if tasks.contrastive {
            let cfg = ContrastiveConfig {
                temperature: self.cfg.temperature,
            };
            let l = nt_xent(tape, out.contr_embed, &batch.pair_index, cfg)?;
            check(tape, l, "contrastive loss")?;
            losses.contrastive = Some(l);
        }
        let (total, b) = match self.cfg.weighting {
            Weighting::Fixed(a) => fixed_weighted_total(tape, &losses, a)?,
            Weighting::Uncertainty => crate::losses::uncertainty_total(tape, &losses, &self.uncertainty)?,
        };
        check(tape, total, "total loss")?;
        Ok((total, b))
    }

    /// Forward, backward and one optimizer update.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepOutcome> {
        let batch = self.next_batch(data)?;
        let mut tape = Tape::new();
        let (total, breakdown) = self.losses(&mut tape, &batch)?;
        let grads = tape.backward(total)?;
        self.model.params_mut().accumulate(&grads);
        self.uncertainty.params_mut().accumulate(&grads);
        let lr = self.opt.step(&mut [self.model.params_mut(), self.uncertainty.params_mut()])?;
        for p in self.model.params().iter().chain(self.uncertainty.params().iter()) {
            if !p.value.all_finite() {
                return Err(Error::NonFinite {
                    term: "parameter update",
                    step: self.step,
                });
            }
        }
        self.step += 1;
        Ok(StepOutcome { breakdown, lr })
    }

    /// Full training state, including the optimizer.
    pub fn checkpoint(&self, dataset_name: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.config().clone(), &step_rng(self.cfg.seed, self.step));
        ck.push_store(self.model.params());
        ck.push_store(self.uncertainty.params());
        ck.epoch = self.epoch();
        ck.step = self.step;
        ck.optimizer = Some(OptimizerState {
            step: self.opt.steps(),
            moments: self.opt.moments().clone(),
        });
        ck.set_meta("tasks", self.cfg.tasks.label());
        ck.set_meta(
            "weighting",
            match self.cfg.weighting {
                Weighting::Fixed(a) => format!("fixed {} {} {}", a[0], a[1], a[2]),
                Weighting::Uncertainty => "uncertainty".into(),
            },
        );
        ck.set_meta("dataset", dataset_name);
        ck
    }
}

/// Result of [`pretrain`].
pub struct PretrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub checkpoint: Checkpoint,
    pub checkpoint_path: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

fn save(out: Option<&Path>, ck: &Checkpoint) -> Result<Option<PathBuf>> {
    match out {
        Some(dir) => {
            let p = dir.join(CHECKPOINT_FILE);
            ck.save(&p)?;
            Ok(Some(p))
        }
        None => Ok(None),
    }
}

/// Pretrain from scratch, or continue `resume_from`. With an output
/// directory, metrics are appended to `metrics.csv` after every step and
/// `checkpoint.ckpt` is rewritten after every epoch and at the end.
pub fn pretrain(cfg: &RunConfig, data: &Dataset, resume_from: Option<&Checkpoint>) -> Result<PretrainOutcome> {
    let mut trainer = match resume_from {
        Some(ck) => Trainer::resume(cfg.clone(), data.len(), ck)?,
        None => Trainer::new(cfg.clone(), data.len())?,
    };
    let out = cfg.out_dir.as_deref();
    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(MetricsWriter::open(&dir.join(METRICS_FILE))?)
        }
        None => None,
    };
    let stop = cfg.stop_after_steps.unwrap_or(u64::MAX).min(trainer.total_steps());
    let mut rows = Vec::new();
    let mut path = None;
    while trainer.step() < stop {
        let started = Instant::now();
        let epoch = trainer.epoch();
        let o = trainer.train_step(data)?;
        let b = o.breakdown;
        let row = MetricsRow {
            step: trainer.step(),
            epoch,
            losses: [b.recons, b.rotation, b.contrastive],
            weights: b.effective_weights,
            total: b.total,
            lr: o.lr,
            ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(w) = writer.as_mut() {
            w.append(&row)?;
        }
        rows.push(row);
        if trainer.step() % trainer.steps_per_epoch == 0 {
            path = save(out, &trainer.checkpoint(&data.name))?;
        }
    }
    let checkpoint = trainer.checkpoint(&data.name);
    if out.is_some() {
        path = save(out, &checkpoint)?;
    }
    Ok(PretrainOutcome {
        rows,
        checkpoint,
        checkpoint_path: path,
    })
}

/// A model holding the parameters of `ck`.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<SiTModel<f32>> {
    let mut model = SiTModel::new(ck.config.clone())?;
    ck.load_into(model.params_mut())?;
    Ok(model)
}

/// Stack a dataset subset into model-ready `[N, C, S, S]` images.
pub fn images_for_model(data: &Dataset, size: usize) -> Result<Tensor<f32>> {
    crate::pretext::resize_batch(&data.images, size, size)
}
