//! Supervised protocols on top of a pretrained backbone: finetuning with
//! both task heads swapped for classifiers, linear probing of frozen
//! features, domain transfer, few-shot finetuning and reconstruction
//! previews.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::autograd::{ParamStore, Tape};
use crate::checkpoint::Checkpoint;
use crate::data::{few_shot_split, write_ppm, Dataset};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, soft_cross_entropy};
use crate::model::SiTModel;
use crate::optim::{AdamConfig, AdamW, Schedule};
use crate::pretext::{augment_view, corrupt, resize_batch, stack_images, AugmentParams, CorruptionParams};
use crate::tensor::Tensor;
use crate::train::{model_from_checkpoint, EvalConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    pub dataset: String,
    pub pretrain_dataset: String,
    /// Top-1 accuracy in `[0, 1]`.
    pub accuracy: f64,
    /// Number of evaluated images.
    pub samples: usize,
    pub checkpoint_id: String,
    /// Fraction of training labels used, in `[0, 1]`.
    pub label_fraction: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "protocol,dataset,pretrain_dataset,accuracy,samples,checkpoint_id,label_fraction";

    pub fn csv_row(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record([
            self.protocol.clone(),
            self.dataset.clone(),
            self.pretrain_dataset.clone(),
            format!("{:.6}", self.accuracy),
            self.samples.to_string(),
            self.checkpoint_id.clone(),
            format!("{}", self.label_fraction),
        ])
        .expect("in-memory write");
        let bytes = w.into_inner().expect("in-memory flush");
        String::from_utf8(bytes).expect("utf-8").trim_end().to_string()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: top-1 {:.2}% on {} images of {} (pretrained on {}, {:.0}% labels, checkpoint {})",
            self.protocol,
            self.accuracy * 100.0,
            self.samples,
            self.dataset,
            self.pretrain_dataset,
            self.label_fraction * 100.0,
            self.checkpoint_id
        )
    }
}

/// Dataset images resized to the model input, with a channel check.
pub fn model_inputs(model: &SiTModel<f32>, data: &Dataset) -> Result<Tensor<f32>> {
    let cfg = model.config();
    if data.image_shape()[0] != cfg.channels {
        return Err(Error::Config(format!(
            "{} has {} channels, the model expects {}",
            data.name,
            data.image_shape()[0],
            cfg.channels
        )));
    }
    resize_batch(&data.images, cfg.image_size, cfg.image_size)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

fn argmax_rows(probs: &Tensor<f32>) -> Vec<usize> {
    let k = probs.shape()[1];
    probs
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Class probabilities: the mean of the two heads' softmax outputs.
pub fn predict_probs(model: &SiTModel<f32>, images: &Tensor<f32>, batch: usize) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = batch.max(1).min(n - start);
        let chunk = images.narrow(0, start, len)?;
        let mut tape = Tape::inference();
        let (a, b) = model.forward_heads(&mut tape, &chunk)?;
        let pa = tape.softmax(a, 1)?;
        let pb = tape.softmax(b, 1)?;
        let sum = tape.add(pa, pb)?;
        let avg = tape.scale(sum, 0.5);
        parts.push(tape.value(avg).clone());
        start += len;
    }
    Tensor::stack_rows(&parts)
}

pub fn predict(model: &SiTModel<f32>, images: &Tensor<f32>, batch: usize) -> Result<Vec<usize>> {
    Ok(argmax_rows(&predict_probs(model, images, batch)?))
}

/// Light finetuning augmentation: random resized crop, flip and jitter.
fn auto_augment(images: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let params = AugmentParams {
        crop_scale: (0.7, 1.0),
        hflip_prob: 0.5,
        brightness: 0.1,
        contrast: 0.1,
        saturation: 0.1,
    };
    let s = images.shape();
    let views = (0..s[0])
        .map(|i| {
            let img = images.narrow(0, i, 1)?.reshape(&s[1..])?;
            augment_view(&img, &params, s[2], rng)
        })
        .collect::<Result<Vec<_>>>()?;
    stack_images(&views)
}

/// Finetune every parameter with both task heads replaced by `classes`-way
/// classifiers. The loss is the mean of the two heads' cross-entropies;
/// predictions average their softmax outputs. Returns the finetuned
/// checkpoint and the accuracy on `test`.
pub fn finetune(
    ck: &Checkpoint,
    train: &Dataset,
    test: &Dataset,
    classes: usize,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(Checkpoint, EvalReport)> {
    if classes != train.class_count || classes != test.class_count {
        return Err(Error::Config(format!(
            "finetune asked for {classes} classes but the data has {} (train) and {} (test)",
            train.class_count, test.class_count
        )));
    }
    let labels = train.labels()?.to_vec();
    let mut model = model_from_checkpoint(ck)?;
    model.replace_task_heads(classes, seed ^ 0x5eed)?;
    let inputs = model_inputs(&model, train)?;
    let n = inputs.shape()[0];
    let batch = cfg.finetune_batch.clamp(1, n);
    let steps_per_epoch = n.div_ceil(batch) as u64;
    let total = steps_per_epoch * cfg.finetune_epochs;
    let mut opt = AdamW::new(AdamConfig {
        lr: cfg.finetune_lr,
        schedule: Schedule::desk_default(total),
        ..AdamConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = Beta::new(cfg.mixup_alpha.max(1e-3), cfg.mixup_alpha.max(1e-3))
        .map_err(|e| Error::Config(format!("mixup alpha: {e}")))?;
    for _ in 0..cfg.finetune_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            let mut x = inputs.select(idx)?;
            if cfg.auto_augment {
                x = auto_augment(&x, &mut rng)?;
            }
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let loss = if cfg.mixup && idx.len() > 1 {
                let lam = beta.sample(&mut rng) as f32;
                let mut perm: Vec<usize> = (0..idx.len()).collect();
                perm.shuffle(&mut rng);
                let other = x.select(&perm)?;
                let mixed: Vec<f32> = x.data().iter().zip(other.data()).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
                x = Tensor::from_vec(x.shape(), mixed)?;
                let mut q = Tensor::zeros(&[idx.len(), classes]);
                for (r, &p) in perm.iter().enumerate() {
                    q.data_mut()[r * classes + y[r]] += lam;
                    q.data_mut()[r * classes + y[p]] += 1.0 - lam;
                }
                let (a, b) = model.forward_heads(&mut tape, &x)?;
                let la = soft_cross_entropy(&mut tape, a, q.clone())?;
                let lb = soft_cross_entropy(&mut tape, b, q)?;
                let s = tape.add(la, lb)?;
                tape.scale(s, 0.5)
            } else {
                let (a, b) = model.forward_heads(&mut tape, &x)?;
                let la = cross_entropy(&mut tape, a, &y)?;
                let lb = cross_entropy(&mut tape, b, &y)?;
                let s = tape.add(la, lb)?;
                tape.scale(s, 0.5)
            };
            if !tape.scalar(loss).is_finite() {
                return Err(Error::NonFinite {
                    term: "finetune loss",
                    step: opt.steps(),
                });
            }
            let grads = tape.backward(loss)?;
            model.params_mut().accumulate(&grads);
            opt.step(&mut [model.params_mut()])?;
        }
    }
    let test_inputs = model_inputs(&model, test)?;
    let pred = predict(&model, &test_inputs, cfg.feature_batch)?;
    let mut out = Checkpoint::new(model.config().clone(), &rng);
    out.push_store(model.params());
    out.meta = ck.meta.clone();
    out.set_meta("finetuned_on", train.name.clone());
    let report = EvalReport {
        protocol: "finetune".into(),
        dataset: test.name.clone(),
        pretrain_dataset: ck.meta("dataset").unwrap_or("none").to_string(),
        accuracy: accuracy(&pred, test.labels()?),
        samples: test.len(),
        checkpoint_id: ck.id(),
        label_fraction: train.len() as f64 / train.len().max(1) as f64,
    };
    Ok((out, report))
}

/// Per-column mean and standard deviation of `[N, F]` features.
fn standardiser(x: &Tensor<f32>) -> (Vec<f32>, Vec<f32>) {
    let f = x.shape()[1];
    let n = x.shape()[0] as f64;
    let mut mean = vec![0.0f64; f];
    let mut sq = vec![0.0f64; f];
    for row in x.data().chunks(f) {
        for (j, &v) in row.iter().enumerate() {
            mean[j] += v as f64;
            sq[j] += (v as f64) * (v as f64);
        }
    }
    let mean: Vec<f64> = mean.iter().map(|m| m / n).collect();
    let std = sq.iter().zip(&mean).map(|(s, m)| ((s / n - m * m).max(0.0).sqrt() + 1e-6) as f32).collect();
    (mean.iter().map(|&m| m as f32).collect(), std)
}

fn standardise(x: &Tensor<f32>, mean: &[f32], std: &[f32]) -> Tensor<f32> {
    let f = mean.len();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(f) {
        for j in 0..f {
            row[j] = (row[j] - mean[j]) / std[j];
        }
    }
    out
}

/// Train a softmax classifier on fixed `[N, F]` features and return the
/// accuracy on the test features.
pub fn train_linear_classifier(
    train_x: &Tensor<f32>,
    train_y: &[usize],
    test_x: &Tensor<f32>,
    test_y: &[usize],
    classes: usize,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<f64> {
    let (mean, std) = standardiser(train_x);
    let tx = standardise(train_x, &mean, &std);
    let vx = standardise(test_x, &mean, &std);
    let f = tx.shape()[1];
    let mut store = ParamStore::<f32>::new();
    let w = store.add("probe.weight", Tensor::zeros(&[f, classes]))?;
    let b = store.add("probe.bias", Tensor::zeros(&[classes]))?;
    let mut opt = AdamW::new(AdamConfig {
        lr: cfg.probe_lr,
        weight_decay: 0.0,
        ..AdamConfig::default()
    })?;
    let n = tx.shape()[0];
    let batch = cfg.probe_batch.clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.probe_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            let mut tape = Tape::new();
            let x = tape.input(tx.select(idx)?);
            let wv = tape.param(&store, w);
            let bv = tape.param(&store, b);
            let logits = tape.linear(x, wv, Some(bv))?;
            let y: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
            let loss = cross_entropy(&mut tape, logits, &y)?;
            let grads = tape.backward(loss)?;
            store.accumulate(&grads);
            opt.step(&mut [&mut store])?;
        }
    }
    let mut tape = Tape::inference();
    let x = tape.input(vx);
    let wv = tape.param(&store, w);
    let bv = tape.param(&store, b);
    let logits = tape.linear(x, wv, Some(bv))?;
    Ok(accuracy(&argmax_rows(tape.value(logits)), test_y))
}

/// Linear probe of a model's frozen features. No parameter of `model` is
/// touched: features come from an inference tape.
pub fn probe_model(model: &SiTModel<f32>, train: &Dataset, test: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<f64> {
    if train.class_count != test.class_count {
        return Err(Error::Config(format!(
            "probe train set has {} classes, test set {}",
            train.class_count, test.class_count
        )));
    }
    let fx = model.features(&model_inputs(model, train)?, cfg.feature_batch)?;
    let vx = model.features(&model_inputs(model, test)?, cfg.feature_batch)?;
    train_linear_classifier(&fx, train.labels()?, &vx, test.labels()?, train.class_count, cfg, seed)
}

fn probe_report(protocol: &str, ck: &Checkpoint, model: &SiTModel<f32>, train: &Dataset, test: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    Ok(EvalReport {
        protocol: protocol.into(),
        dataset: test.name.clone(),
        pretrain_dataset: ck.meta("dataset").unwrap_or("none").to_string(),
        accuracy: probe_model(model, train, test, cfg, seed)?,
        samples: test.len(),
        checkpoint_id: ck.id(),
        label_fraction: 1.0,
    })
}

/// Linear evaluation of the checkpoint's backbone.
pub fn linear_probe(ck: &Checkpoint, train: &Dataset, test: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    let model = model_from_checkpoint(ck)?;
    probe_report("linprobe", ck, &model, train, test, cfg, seed)
}

/// Linear evaluation on a dataset other than the pretraining one. Inputs are
/// resized to the model resolution.
pub fn domain_transfer(ck: &Checkpoint, train: &Dataset, test: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    let model = model_from_checkpoint(ck)?;
    probe_report("transfer", ck, &model, train, test, cfg, seed)
}

/// Finetune on `percent`% of the training labels, then linear-probe the
/// finetuned backbone on the full training set. Both reports carry the id
/// of the input checkpoint. `percent == 0` runs the plain linear probe and
/// returns that single report.
pub fn few_shot_protocol(
    ck: &Checkpoint,
    train: &Dataset,
    test: &Dataset,
    percent: f64,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    if percent == 0.0 {
        let mut r = linear_probe(ck, train, test, cfg, seed)?;
        r.label_fraction = 0.0;
        return Ok(vec![r]);
    }
    let (subset, _) = few_shot_split(train, percent, seed)?;
    let (tuned, mut first) = finetune(ck, &subset, test, train.class_count, cfg, seed)?;
    first.protocol = "fewshot".into();
    first.label_fraction = subset.len() as f64 / train.len() as f64;
    let model = model_from_checkpoint(&tuned)?;
    let mut second = probe_report("fewshot-linprobe", ck, &model, train, test, cfg, seed)?;
    second.label_fraction = first.label_fraction;
    Ok(vec![first, second])
}

fn triplet_paths(out_dir: &Path, i: usize) -> [PathBuf; 3] {
    ["original", "corrupted", "reconstructed"].map(|k| out_dir.join(format!("{i:04}_{k}.ppm")))
}

/// Write `NNNN_original.ppm`, `NNNN_corrupted.ppm` and
/// `NNNN_reconstructed.ppm` for every image.
pub fn reconstruct_preview(
    model: &SiTModel<f32>,
    data: &Dataset,
    corruption: &CorruptionParams,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let inputs = model_inputs(model, data)?;
    let cfg = model.config();
    let s = inputs.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written = Vec::new();
    for i in 0..s[0] {
        let img = inputs.narrow(0, i, 1)?.reshape(&s[1..])?;
        let donor = inputs.narrow(0, (i + 1) % s[0], 1)?.reshape(&s[1..])?;
        let (bad, _) = corrupt(&img, corruption, cfg.patch_size, &mut rng, &donor)?;
        let rec = model.reconstruct(&bad.clone().reshape(&[1, s[1], s[2], s[3]])?)?;
        let rec = rec.reshape(&s[1..])?;
        let paths = triplet_paths(out_dir, i);
        for (p, t) in paths.iter().zip([&img, &bad, &rec]) {
            write_ppm(p, t)?;
        }
        written.extend(paths);
    }
    Ok(written)
}

/// Write `NNNN_original.ppm` and `NNNN_corrupted.ppm` pairs without a model.
pub fn corrupt_preview(
    data: &Dataset,
    corruption: &CorruptionParams,
    image_size: usize,
    patch_size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let inputs = resize_batch(&data.images, image_size, image_size)?;
    let s = inputs.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written = Vec::new();
    for i in 0..s[0] {
        let img = inputs.narrow(0, i, 1)?.reshape(&s[1..])?;
        let donor = inputs.narrow(0, (i + 1) % s[0], 1)?.reshape(&s[1..])?;
        let (bad, _) = corrupt(&img, corruption, patch_size, &mut rng, &donor)?;
        let [orig, cor, _] = triplet_paths(out_dir, i);
        write_ppm(&orig, &img)?;
        write_ppm(&cor, &bad)?;
        written.push(orig);
        written.push(cor);
    }
    Ok(written)
}

/// A fresh, untrained backbone packaged as a checkpoint.
pub fn random_init_checkpoint(config: &crate::model::ModelConfig) -> Result<Checkpoint> {
    let model = SiTModel::<f32>::new(config.clone())?;
    let mut ck = Checkpoint::new(config.clone(), &ChaCha8Rng::seed_from_u64(config.seed));
    ck.push_store(model.params());
    ck.set_meta("dataset", "none");
    Ok(ck)
}

/// Labels permuted by a seeded shuffle, for permutation controls.
pub fn shuffled_labels(data: &Dataset, seed: u64) -> Result<Dataset> {
    let mut labels = data.labels()?.to_vec();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = data.clone();
    out.labels = Some(labels);
    Ok(out)
}

/// Random split of a labeled dataset into train and test parts.
pub fn train_test_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((data.len() as f64 * test_fraction).round() as usize).clamp(1, data.len() - 1);
    let (test, train) = idx.split_at(k);
    let (mut test, mut train) = (test.to_vec(), train.to_vec());
    test.sort_unstable();
    train.sort_unstable();
    Ok((data.subset(&train)?, data.subset(&test)?))
}

/// Draw `n` ids uniformly for the bench and tests.
pub fn sample_indices(n: usize, len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..len)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 16,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
            contrastive_dim: 8,
            ..ModelConfig::tiny_cifar()
        }
    }

    #[test]
    fn prediction_averages_both_heads() {
        let mut model = SiTModel::<f32>::new(tiny()).unwrap();
        model.replace_task_heads(3, 1).unwrap();
        let data = synthetic_dataset(5, 3, 8, 0).unwrap();
        let probs = predict_probs(&model, &data.images, 2).unwrap();
        let mut tape = Tape::inference();
        let (a, b) = model.forward_heads(&mut tape, &data.images).unwrap();
        let pa = tape.softmax(a, 1).unwrap();
        let pb = tape.softmax(b, 1).unwrap();
        let expect: Vec<f32> = tape.value(pa).data().iter().zip(tape.value(pb).data()).map(|(x, y)| (x + y) / 2.0).collect();
        assert_eq!(probs.shape(), &[5, 3]);
        for (x, y) in probs.data().iter().zip(&expect) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn probe_leaves_backbone_untouched() {
        let ck = random_init_checkpoint(&tiny()).unwrap();
        let model = model_from_checkpoint(&ck).unwrap();
        let before: Vec<u8> = model.params().iter().flat_map(|p| p.value.data().iter().flat_map(|v| v.to_le_bytes())).collect();
        let data = synthetic_dataset(24, 2, 8, 4).unwrap();
        let cfg = EvalConfig {
            probe_epochs: 5,
            ..EvalConfig::default()
        };
        let acc = probe_model(&model, &data, &data, &cfg, 0).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let after: Vec<u8> = model.params().iter().flat_map(|p| p.value.data().iter().flat_map(|v| v.to_le_bytes())).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn finetune_rejects_class_mismatch() {
        let ck = random_init_checkpoint(&tiny()).unwrap();
        let data = synthetic_dataset(8, 2, 8, 4).unwrap();
        assert!(finetune(&ck, &data, &data, 3, &EvalConfig::default(), 0).is_err());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let ck = random_init_checkpoint(&ModelConfig { channels: 1, ..tiny() }).unwrap();
        let data = synthetic_dataset(8, 2, 8, 4).unwrap();
        assert!(domain_transfer(&ck, &data, &data, &EvalConfig::default(), 0).is_err());
    }

    #[test]
    fn preview_files() {
        let dir = tempfile::tempdir().unwrap();
        let model = SiTModel::<f32>::new(tiny()).unwrap();
        let data = synthetic_dataset(3, 3, 16, 0).unwrap();
        let files = reconstruct_preview(&model, &data, &CorruptionParams::none(), 0, dir.path()).unwrap();
        assert_eq!(files.len(), 9);
        for i in 0..3 {
            let [o, c, _] = triplet_paths(dir.path(), i);
            assert_eq!(std::fs::read(o).unwrap(), std::fs::read(c).unwrap());
        }
    }

    #[test]
    fn report_csv_row() {
        let r = EvalReport {
            protocol: "linprobe".into(),
            dataset: "a,b".into(),
            pretrain_dataset: "x".into(),
            accuracy: 0.5,
            samples: 10,
            checkpoint_id: "0000abcd".into(),
            label_fraction: 1.0,
        };
        assert_eq!(r.csv_row(), "linprobe,\"a,b\",x,0.500000,10,0000abcd,1");
        assert!(r.to_string().contains("50.00%"));
    }
}
