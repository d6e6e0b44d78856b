//! Pretraining loop and classification transfer (linear probe / full finetune).

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{hex, Augment, DataError, Dataset, Loader};
use crate::layers::{LayerNorm, Linear};
use crate::masking::{MaskError, MaskPlan};
use crate::model::{MaskedAutoencoder, ModelConfig};
use crate::objective::{cosine_warmup_lr, scaled_lr, AdamW, GradAccumulator, MetricsRow, OptimConfig, OptimError};
use crate::params::{Init, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Config(String),
}

impl TrainError {
    /// Failures caused by the numbers themselves rather than the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, TrainError::Optim(OptimError::NonFiniteGrad { .. } | OptimError::NonFiniteLoss { .. }))
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the mask for image `index` in `epoch`.
pub fn mask_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    mix_seed(mix_seed(seed, epoch as u64), index as u64)
}

/// Hex SHA-256 over the index lists of a batch of plans.
pub fn plans_digest(plans: &[MaskPlan]) -> String {
    let mut h = Sha256::new();
    for pl in plans {
        for list in [&pl.visible, &pl.predicted] {
            h.update((list.len() as u32).to_le_bytes());
            for &i in list.iter() {
                h.update((i as u32).to_le_bytes());
            }
        }
    }
    hex(&h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub mask_ratio: f64,
    pub prediction_ratio: f64,
    /// Images per optimizer step; gradients of `accum_steps` micro-batches
    /// make up one step.
    pub accum_steps: usize,
    pub seed: u64,
    pub augment_flip: bool,
    pub augment_crop_pad: usize,
    /// Stop after this many optimizer steps (the schedule still spans all epochs).
    pub max_steps: Option<u64>,
}

impl PretrainConfig {
    pub fn micro_batch(&self) -> usize {
        (self.optim.batch_size / self.accum_steps.max(1)).max(1)
    }

    pub fn peak_lr(&self) -> f64 {
        scaled_lr(self.optim.base_lr, self.optim.batch_size, self.mask_ratio, self.prediction_ratio)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.optim.validate().map_err(TrainError::Config)?;
        MaskPlan::new(self.model.encoder.num_patches(), self.mask_ratio, self.prediction_ratio, 0)?;
        if self.accum_steps == 0 || self.optim.batch_size % self.accum_steps != 0 {
            return Err(TrainError::Config(format!(
                "batch size {} is not a multiple of {} accumulation steps",
                self.optim.batch_size, self.accum_steps
            )));
        }
        Ok(())
    }
}

/// Progress notification from the training loop.
#[derive(Debug, Clone)]
pub enum TrainEvent<'a> {
    Step { row: &'a MetricsRow, mask_digest: &'a str },
    Epoch { epoch: usize, mean_loss: f64 },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub mask_digests: Vec<String>,
    pub steps: u64,
    pub peak_lr: f64,
}

/// Pretrains `params` in place on `dataset` for `optim.total_epochs` epochs.
pub fn pretrain(
    cfg: &PretrainConfig,
    model: &MaskedAutoencoder,
    params: &mut ParamStore<f32>,
    dataset: &Dataset,
    mut on_event: impl FnMut(TrainEvent<'_>),
) -> Result<PretrainReport, TrainError> {
    cfg.validate()?;
    let n = cfg.model.encoder.num_patches();
    let micro = cfg.micro_batch();
    let loader = Loader::new(dataset, cfg.optim.batch_size, cfg.seed)
        .with_augment(Augment { flip: cfg.augment_flip, crop_pad: cfg.augment_crop_pad });
    let per_epoch = loader.batches_per_epoch();
    if per_epoch == 0 {
        return Err(TrainError::Config(format!(
            "{} images cannot fill one batch of {}",
            dataset.len(),
            cfg.optim.batch_size
        )));
    }
    let epochs = cfg.optim.total_epochs.ceil() as usize;
    let peak = cfg.peak_lr();
    let mut opt = AdamW::new(params, &cfg.optim);
    let mut report = PretrainReport { peak_lr: peak, ..Default::default() };
    let mut step: u64 = 0;
    'outer: for epoch in 0..epochs {
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0usize;
        for (b, batch) in loader.epoch::<f32>(epoch).enumerate() {
            let frac = epoch as f64 + b as f64 / per_epoch as f64;
            if frac >= cfg.optim.total_epochs {
                break 'outer;
            }
            let lr = cosine_warmup_lr(frac, peak, cfg.optim.warmup_epochs, cfg.optim.total_epochs);
            let plans = batch
                .indices
                .iter()
                .map(|&i| MaskPlan::new(n, cfg.mask_ratio, cfg.prediction_ratio, mask_seed(cfg.seed, epoch, i)))
                .collect::<Result<Vec<_>, _>>()?;
            let digest = plans_digest(&plans);
            let mut acc = GradAccumulator::new();
            let mut loss_sum = 0.0;
            let image_len = dataset.image_len();
            for start in (0..plans.len()).step_by(micro) {
                let end = (start + micro).min(plans.len());
                let mut shape = batch.images.shape().to_vec();
                shape[0] = end - start;
                let images = Tensor::new(shape, batch.images.data()[start * image_len..end * image_len].to_vec())?;
                let mut tape = Tape::new();
                let p = params.bind(&mut tape, true);
                let pass = model.forward(&mut tape, &p, &images, &plans[start..end], false)?;
                let loss = tape.value(pass.loss).item() as f64;
                if !loss.is_finite() {
                    return Err(OptimError::NonFiniteLoss { loss, step: step + 1 }.into());
                }
                tape.backward(pass.loss)?;
                let weight = (end - start) as f64 / plans.len() as f64;
                acc.add(params.grads(&tape, &p), weight)?;
                loss_sum += loss * weight;
            }
            let grads = acc.take().expect("at least one micro-batch");
            opt.step(params, &grads, lr)?;
            step += 1;
            epoch_sum += loss_sum;
            epoch_steps += 1;
            let row = MetricsRow {
                epoch,
                step,
                lr,
                loss: loss_sum,
                variant: cfg.model.decoder.variant.label().to_string(),
                p: cfg.mask_ratio,
                gamma: cfg.prediction_ratio,
                seed: cfg.seed,
            };
            on_event(TrainEvent::Step { row: &row, mask_digest: &digest });
            report.step_losses.push(loss_sum);
            report.mask_digests.push(digest);
            if cfg.max_steps.is_some_and(|m| step >= m) {
                if epoch_steps > 0 {
                    report.epoch_losses.push(epoch_sum / epoch_steps as f64);
                }
                break 'outer;
            }
        }
        let mean = epoch_sum / epoch_steps.max(1) as f64;
        report.epoch_losses.push(mean);
        on_event(TrainEvent::Epoch { epoch, mean_loss: mean });
    }
    report.steps = step;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Classification transfer

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Frozen encoder, trained linear classifier.
    LinearProbe,
    /// Encoder and classifier trained together.
    Full,
}

impl std::str::FromStr for ProbeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear_probe" | "linear" | "probe" => Ok(ProbeMode::LinearProbe),
            "full" | "finetune" => Ok(ProbeMode::Full),
            other => Err(format!("unknown finetune mode {other:?} (linear_probe | full)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub seed: u64,
    pub augment_flip: bool,
    pub augment_crop_pad: usize,
}

impl ProbeConfig {
    pub fn linear_probe(seed: u64) -> Self {
        ProbeConfig {
            mode: ProbeMode::LinearProbe,
            epochs: 30,
            batch_size: 128,
            lr: 1e-2,
            weight_decay: 0.0,
            warmup_epochs: 1.0,
            seed,
            augment_flip: false,
            augment_crop_pad: 0,
        }
    }

    pub fn full(seed: u64) -> Self {
        ProbeConfig {
            mode: ProbeMode::Full,
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 1.0,
            seed,
            augment_flip: true,
            augment_crop_pad: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochAccuracy {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mode: ProbeMode,
    pub epochs: Vec<EpochAccuracy>,
    pub test_accuracy: f64,
}

impl ProbeReport {
    pub const CSV_HEADER: &'static str = "epoch,mode,loss,train_accuracy,test_accuracy";

    pub fn to_csv(&self) -> String {
        let mode = match self.mode {
            ProbeMode::LinearProbe => "linear_probe",
            ProbeMode::Full => "full",
        };
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            s.push_str(&format!("{},{},{:.6},{:.4},{:.4}\n", e.epoch, mode, e.loss, e.train_accuracy, e.test_accuracy));
        }
        s
    }
}

/// Classifier over globally average-pooled patch tokens.
struct Classifier {
    norm: LayerNorm,
    fc: Linear,
}

impl Classifier {
    fn forward(&self, tape: &mut Tape<f32>, p: &crate::params::Bound, pooled: Var) -> Result<Var, TensorError> {
        let h = self.norm.forward(tape, p, pooled)?;
        self.fc.forward(tape, p, h)
    }
}

/// Mean of the patch-token rows of the last encoder map, `[B, dim]`.
fn pooled_features(
    model: &MaskedAutoencoder,
    tape: &mut Tape<f32>,
    p: &crate::params::Bound,
    images: &Tensor<f32>,
) -> Result<Var, TensorError> {
    let f = model.encoder.encode_all(tape, p, images)?;
    let b = images.shape()[0];
    let n = model.cfg.encoder.num_patches();
    let patches = tape.gather(f.last(), Arc::new(vec![(1..=n).collect(); b]))?;
    tape.mean_axis(patches, 1)
}

fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    logits
        .rows()
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i);
            best == Some(l)
        })
        .count()
}

/// Trains a classifier on `train` and reports accuracy on `test`.
/// `params` holds the (pretrained) encoder; it is not modified.
pub fn finetune(
    model_cfg: &ModelConfig,
    params: &ParamStore<f32>,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<ProbeReport, TrainError> {
    let classes = 1 + train
        .labels
        .as_ref()
        .ok_or(DataError::Unlabeled)?
        .iter()
        .chain(test.labels.as_ref().ok_or(DataError::Unlabeled)?)
        .copied()
        .max()
        .unwrap_or(0) as usize;
    let mut store = params.clone();
    let mut init = Init::new(mix_seed(cfg.seed, 0x7072_6f62));
    // rebuilding the model registers the same names in the same order
    let mut scratch = ParamStore::<f32>::new();
    let model = MaskedAutoencoder::build(model_cfg, &mut scratch, &mut Init::new(0))?;
    if scratch.len() != store.len() {
        return Err(TrainError::Config("checkpoint does not match the model configuration".into()));
    }
    let dim = model_cfg.encoder.dim;
    let head = Classifier {
        norm: LayerNorm::new(&mut store, "probe.norm", dim)?,
        fc: Linear::new(&mut store, &mut init, "probe.fc", dim, classes, true)?,
    };
    let first_head = scratch.len();

    let optim = OptimConfig {
        base_lr: cfg.lr,
        batch_size: cfg.batch_size,
        weight_decay: cfg.weight_decay,
        warmup_epochs: cfg.warmup_epochs.min(cfg.epochs as f64),
        total_epochs: cfg.epochs as f64,
        ..OptimConfig::default()
    };
    let mut opt = AdamW::new(&store, &optim);
    let trainable: Vec<bool> = store
        .iter()
        .enumerate()
        .map(|(i, (name, _))| i >= first_head || (cfg.mode == ProbeMode::Full && name.starts_with("encoder.")))
        .collect();
    let decay: Vec<bool> = store
        .iter()
        .zip(&trainable)
        .map(|((name, v), &t)| t && crate::objective::decays(name, v.shape()))
        .collect();
    opt.set_decay_mask(decay);

    // frozen features are computed once
    let frozen = |ds: &Dataset| -> Result<Tensor<f32>, TrainError> {
        let mut out = Vec::with_capacity(ds.len() * dim);
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(256) {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let v = pooled_features(&model, &mut tape, &p, &ds.batch(chunk))?;
            out.extend_from_slice(tape.value(v).data());
        }
        Ok(Tensor::new(vec![ds.len(), dim], out)?)
    };
    let cached = match cfg.mode {
        ProbeMode::LinearProbe => Some((frozen(train)?, frozen(test)?)),
        ProbeMode::Full => None,
    };
    let row_slice = |t: &Tensor<f32>, idx: &[usize]| -> Tensor<f32> {
        let mut d = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            d.extend_from_slice(&t.data()[i * dim..(i + 1) * dim]);
        }
        Tensor::new(vec![idx.len(), dim], d).expect("feature rows")
    };

    let augment = Augment { flip: cfg.augment_flip, crop_pad: cfg.augment_crop_pad };
    let loader = Loader::new(train, cfg.batch_size, cfg.seed).with_augment(augment);
    let per_epoch = loader.batches_per_epoch().max(1);
    let mut report = ProbeReport { mode: cfg.mode, epochs: Vec::new(), test_accuracy: 0.0 };
    let evaluate = |store: &ParamStore<f32>, ds: &Dataset, cache: Option<&Tensor<f32>>| -> Result<f64, TrainError> {
        let labels: Vec<usize> = ds.labels.as_ref().expect("checked").iter().map(|&l| l as usize).collect();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let mut correct = 0;
        for chunk in idx.chunks(256) {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let pooled = match cache {
                Some(c) => tape.constant(row_slice(c, chunk)),
                None => pooled_features(&model, &mut tape, &p, &ds.batch(chunk))?,
            };
            let logits = head.forward(&mut tape, &p, pooled)?;
            let chunk_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            correct += accuracy(tape.value(logits), &chunk_labels);
        }
        Ok(correct as f64 / ds.len().max(1) as f64)
    };

    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut seen, mut correct) = (0.0, 0usize, 0usize);
        for (b, batch) in loader.epoch::<f32>(epoch).enumerate() {
            let lr = cosine_warmup_lr(
                epoch as f64 + b as f64 / per_epoch as f64,
                cfg.lr,
                optim.warmup_epochs,
                optim.total_epochs,
            );
            let labels = batch.labels.clone().expect("labeled dataset");
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let pooled = match &cached {
                Some((train_feats, _)) => tape.constant(row_slice(train_feats, &batch.indices)),
                None => pooled_features(&model, &mut tape, &p, &batch.images)?,
            };
            let logits = head.forward(&mut tape, &p, pooled)?;
            let loss = tape.cross_entropy(logits, Arc::new(labels.clone()))?;
            let lv = tape.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(OptimError::NonFiniteLoss { loss: lv, step: opt.steps_taken() + 1 }.into());
            }
            correct += accuracy(tape.value(logits), &labels);
            tape.backward(loss)?;
            let mut grads = store.grads(&tape, &p);
            for (g, &t) in grads.iter_mut().zip(&trainable) {
                if !t {
                    g.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
            opt.step(&mut store, &grads, lr)?;
            loss_sum += lv * labels.len() as f64;
            seen += labels.len();
        }
        let test_accuracy = evaluate(&store, test, cached.as_ref().map(|c| &c.1))?;
        report.epochs.push(EpochAccuracy {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            test_accuracy,
        });
        report.test_accuracy = test_accuracy;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_seeds_differ_across_images_and_epochs() {
        let a = mask_seed(0, 0, 0);
        assert_ne!(a, mask_seed(0, 0, 1));
        assert_ne!(a, mask_seed(0, 1, 0));
        assert_ne!(a, mask_seed(1, 0, 0));
        assert_eq!(a, mask_seed(0, 0, 0));
    }

    #[test]
    fn digest_tracks_plans() {
        let p1 = vec![MaskPlan::new(16, 0.75, 0.25, 1).unwrap()];
        let p2 = vec![MaskPlan::new(16, 0.75, 0.25, 2).unwrap()];
        assert_eq!(plans_digest(&p1), plans_digest(&p1.clone()));
        assert_ne!(plans_digest(&p1), plans_digest(&p2));
    }
}
