//! Reconstruction targets and loss, learning-rate rules and AdamW.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::{self, Scalar, Tape, Tensor, TensorError, Var};

pub const PATCH_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {name} at step {step}")]
    NonFiniteGrad { name: String, step: u64 },
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { loss: f64, step: u64 },
    #[error("{got} gradients supplied for {expected} parameters")]
    GradCount { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-row mean and `sqrt(var + eps)` of the target patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standardizes every row (last axis) of `targets`.
pub fn patch_normalize<T: Scalar>(targets: &Tensor<T>) -> (Tensor<T>, PatchStats) {
    let width = targets.shape().last().copied().unwrap_or(1).max(1);
    let rows = targets.numel() / width;
    let mut out = Vec::with_capacity(targets.numel());
    let mut stats = PatchStats { mean: Vec::with_capacity(rows), std: Vec::with_capacity(rows) };
    for row in targets.data().chunks(width) {
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / width as f64;
        let std = (var + PATCH_NORM_EPS).sqrt();
        out.extend(row.iter().map(|v| T::from_f64((v.to_f64() - mean) / std)));
        stats.mean.push(mean);
        stats.std.push(std);
    }
    (Tensor::new(targets.shape().to_vec(), out).expect("same shape"), stats)
}

/// Inverse of [`patch_normalize`].
pub fn patch_denormalize<T: Scalar>(normalized: &Tensor<T>, stats: &PatchStats) -> tensor::Result<Tensor<T>> {
    let width = normalized.shape().last().copied().unwrap_or(1).max(1);
    let rows = normalized.numel() / width;
    if rows != stats.mean.len() {
        return Err(TensorError::ShapeMismatch {
            op: "patch_denormalize",
            lhs: normalized.shape().to_vec(),
            rhs: vec![stats.mean.len(), width],
        });
    }
    let data = normalized
        .data()
        .chunks(width)
        .zip(stats.mean.iter().zip(&stats.std))
        .flat_map(|(row, (&m, &s))| row.iter().map(move |v| T::from_f64(v.to_f64() * s + m)))
        .collect();
    Tensor::new(normalized.shape().to_vec(), data)
}

/// Mean squared error between predicted rows and their targets. The caller
/// aligns `target` with the predicted indices; any shape disagreement is an
/// alignment error.
pub fn masked_mse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> tensor::Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "masked_mse_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Loss restricted to `subset` of a fixed per-token squared-error field.
pub fn subset_loss(token_errors: &[f64], subset: &[usize]) -> f64 {
    subset.iter().map(|&i| token_errors[i]).sum::<f64>() / subset.len() as f64
}

/// Rounds to 15 significant digits, so decimal hyperparameters combine
/// into the decimal value they denote.
fn snap_decimal(v: f64) -> f64 {
    format!("{v:.14e}").parse().unwrap_or(v)
}

/// `γ · base_lr · batch / (256 · p)`.
pub fn scaled_lr(base_lr: f64, batch_size: usize, mask_ratio: f64, prediction_ratio: f64) -> f64 {
    snap_decimal(prediction_ratio * base_lr * batch_size as f64 / (256.0 * mask_ratio))
}

/// Linear warmup to `peak` over `warmup` epochs, then half-cosine decay to
/// zero at `total`. `epoch` may be fractional.
pub fn cosine_warmup_lr(epoch: f64, peak: f64, warmup: f64, total: f64) -> f64 {
    if epoch < warmup {
        return peak * epoch / warmup;
    }
    if epoch >= total {
        return 0.0;
    }
    let progress = (epoch - warmup) / (total - warmup);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1.5e-4,
            batch_size: 256,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            eps: 1e-8,
            warmup_epochs: 1.0,
            total_epochs: 10.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [self.base_lr, self.eps, self.total_epochs];
        if positive.iter().any(|v| !(*v > 0.0)) || self.batch_size == 0 {
            return Err("learning rate, eps, batch size and epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if self.weight_decay < 0.0 || self.warmup_epochs < 0.0 || self.warmup_epochs > self.total_epochs {
            return Err("weight decay must be non-negative and warmup must not exceed total epochs".into());
        }
        Ok(())
    }
}

/// Whether a parameter receives weight decay: matrices do; biases, norm
/// gains and the class/mask tokens do not.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() > 1 && !name.ends_with("cls_token") && !name.ends_with("mask_token") && !name.contains("pos")
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    decay: Vec<bool>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, cfg: &OptimConfig) -> Self {
        let zeros = || params.values().iter().map(|v| Tensor::zeros(v.shape())).collect::<Vec<_>>();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            first: zeros(),
            second: zeros(),
            decay: params.iter().map(|(n, v)| decays(n, v.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Overrides the decay mask (one flag per parameter).
    pub fn set_decay_mask(&mut self, mask: Vec<bool>) {
        self.decay = mask;
    }

    /// One update. Gradients are checked for finiteness before anything is
    /// modified; a non-finite entry leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<(), OptimError> {
        if grads.len() != params.len() {
            return Err(OptimError::GradCount { expected: params.len(), got: grads.len() });
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw",
                    lhs: params.get(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                }
                .into());
            }
            if !g.all_finite() {
                return Err(OptimError::NonFiniteGrad { name: params.name(id).to_string(), step: self.step + 1 });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (c1, c2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let bias1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bias2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        for (i, value) in params.values_mut().iter_mut().enumerate() {
            let shrink = if self.decay[i] && self.weight_decay != 0.0 {
                Some(T::from_f64(1.0 - lr * self.weight_decay))
            } else {
                None
            };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let g = grads[i].data();
            for (j, w) in value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + c1 * g[j];
                v[j] = b2 * v[j] + c2 * g[j] * g[j];
                if let Some(s) = shrink {
                    *w *= s;
                }
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Sums weighted micro-batch gradients into one effective-batch gradient.
#[derive(Debug, Clone, Default)]
pub struct GradAccumulator<T> {
    sum: Option<Vec<Tensor<T>>>,
    pieces: usize,
}

impl<T: Scalar> GradAccumulator<T> {
    pub fn new() -> Self {
        GradAccumulator { sum: None, pieces: 0 }
    }

    /// Adds `weight · grads`; weights are usually micro/effective batch sizes.
    pub fn add(&mut self, grads: Vec<Tensor<T>>, weight: f64) -> tensor::Result<()> {
        let w = T::from_f64(weight);
        let scaled: Vec<Tensor<T>> = grads.into_iter().map(|g| g.map(|v| v * w)).collect();
        match &mut self.sum {
            None => self.sum = Some(scaled),
            Some(sum) => {
                for (s, g) in sum.iter_mut().zip(&scaled) {
                    s.add_assign(g)?;
                }
            }
        }
        self.pieces += 1;
        Ok(())
    }

    pub fn pieces(&self) -> usize {
        self.pieces
    }

    pub fn take(&mut self) -> Option<Vec<Tensor<T>>> {
        self.pieces = 0;
        self.sum.take()
    }
}

/// One row of the training metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub variant: String,
    pub p: f64,
    pub gamma: f64,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "epoch,step,lr,loss,variant,p,gamma,seed";

/// Append-only CSV metrics file; the header is written once, when the file
/// is empty.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let empty = file.metadata()?.len() == 0;
        let mut out = BufWriter::new(file);
        if empty {
            writeln!(out, "{METRICS_HEADER}")?;
        }
        Ok(MetricsLog { out })
    }

    pub fn append(&mut self, row: &MetricsRow) -> io::Result<()> {
        writeln!(
            self.out,
            "{},{},{:e},{:.8},{},{},{},{}",
            row.epoch, row.step, row.lr, row.loss, row.variant, row.p, row.gamma, row.seed
        )?;
        self.out.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_constant_patch_is_zero() {
        let t = Tensor::new(vec![1, 4], vec![0.3f64; 4]).unwrap();
        let (n, _) = patch_normalize(&t);
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_rows_are_standard() {
        let data: Vec<f64> = (0..48).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let t = Tensor::new(vec![4, 12], data).unwrap();
        let (n, stats) = patch_normalize(&t);
        for row in n.data().chunks(12) {
            let mean = row.iter().sum::<f64>() / 12.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        let back = patch_denormalize(&n, &stats).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-6);
    }

    #[test]
    fn loss_on_exact_and_offset_predictions() {
        let target = Tensor::new(vec![1, 2, 3], vec![0.1f64, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(target.clone(), true);
        let l = masked_mse_loss(&mut tape, p, &target).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let q = tape.leaf(target.map(|v| v + 1.0), true);
        let l = masked_mse_loss(&mut tape, q, &target).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);
        let short = tape.leaf(Tensor::zeros(&[1, 1, 3]), true);
        assert!(masked_mse_loss(&mut tape, short, &target).is_err());
    }

    #[test]
    fn lr_rule() {
        assert_eq!(scaled_lr(1.5e-4, 4096, 0.75, 0.25), 8.0e-4);
        assert_eq!(scaled_lr(1.5e-4, 4096, 0.75, 0.75), 2.4e-3);
        assert_eq!(scaled_lr(1.5e-4, 256, 0.75, 0.75), 1.5e-4);
        assert_eq!(scaled_lr(1.5e-4, 512, 0.75, 0.25), 2.0 * scaled_lr(1.5e-4, 256, 0.75, 0.25));
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_warmup_lr(0.0, 1e-3, 2.0, 10.0), 0.0);
        assert_eq!(cosine_warmup_lr(2.0, 1e-3, 2.0, 10.0), 1e-3);
        assert!(cosine_warmup_lr(10.0, 1e-3, 2.0, 10.0) <= 1e-11);
        assert!(cosine_warmup_lr(9.999, 1e-3, 2.0, 10.0) < 1e-9);
        assert!(cosine_warmup_lr(6.0, 1e-3, 2.0, 10.0) < 1e-3);
        assert_eq!(cosine_warmup_lr(0.0, 1e-3, 0.0, 10.0), 1e-3);
    }

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![1, 1], vec![x]).unwrap()).unwrap();
        s
    }

    #[test]
    fn single_step_moves_by_lr() {
        let mut store = scalar_store(1.0);
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, &[Tensor::new(vec![1, 1], vec![1.0]).unwrap()], 0.1).unwrap();
        let w = store.values()[0].data()[0];
        // m̂ = 1, v̂ = 1, so the update is lr / (1 + eps)
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_grads_zero_decay_leave_params() {
        let mut store = scalar_store(0.7);
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut opt = AdamW::new(&store, &cfg);
        for _ in 0..5 {
            opt.step(&mut store, &[Tensor::zeros(&[1, 1])], 0.1).unwrap();
        }
        assert_eq!(store.values()[0].data()[0], 0.7);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut store = scalar_store(5.0);
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut opt = AdamW::new(&store, &cfg);
        for step in 0..500 {
            let x = store.values()[0].data()[0];
            let lr = cosine_warmup_lr(step as f64, 0.1, 0.0, 500.0);
            opt.step(&mut store, &[Tensor::new(vec![1, 1], vec![2.0 * x]).unwrap()], lr).unwrap();
        }
        assert!(store.values()[0].data()[0].abs() < 1e-2, "{}", store.values()[0].data()[0]);
    }

    #[test]
    fn non_finite_gradient_halts() {
        let mut store = scalar_store(1.0);
        let mut opt = AdamW::new(&store, &OptimConfig::default());
        let err = opt.step(&mut store, &[Tensor::new(vec![1, 1], vec![f64::NAN]).unwrap()], 0.1);
        assert!(matches!(err, Err(OptimError::NonFiniteGrad { .. })));
        assert_eq!(store.values()[0].data()[0], 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn decay_exclusions() {
        assert!(decays("encoder.blocks.0.attn.q.weight", &[8, 8]));
        assert!(!decays("encoder.blocks.0.attn.q.bias", &[8]));
        assert!(!decays("encoder.norm.gain", &[8]));
        assert!(!decays("encoder.cls_token", &[1, 8]));
        assert!(!decays("decoder.mask_token", &[1, 8]));
    }

    #[test]
    fn metrics_header_written_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let row = MetricsRow { epoch: 1, step: 2, lr: 1e-3, loss: 0.5, variant: "cross".into(), p: 0.75, gamma: 0.25, seed: 0 };
        MetricsLog::open(&path).unwrap().append(&row).unwrap();
        MetricsLog::open(&path).unwrap().append(&row).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some(METRICS_HEADER));
        assert_eq!(text.lines().count(), 3);
    }
}
