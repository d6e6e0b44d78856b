//! Encoder + decoder assembly, reconstruction targets and the training loss.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::decoder::{CrossDecoder, DecoderConfig, DecoderOutput, DecoderVariant, SelfDecoder};
use crate::masking::MaskPlan;
use crate::objective::{masked_mse_loss, patch_normalize, PatchStats};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};
use crate::vit::{gather_rows, patchify, Encoder, EncoderConfig, EncoderFeatures};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Apply the encoder's final layer norm before decoding. The MAE
    /// baseline does; the cross decoders normalize after fusion instead.
    pub encoder_output_norm: bool,
    /// Regress per-patch standardized pixels instead of raw pixels.
    pub norm_pix: bool,
}

impl ModelConfig {
    /// Geometry with the conventional normalization placement for `variant`.
    pub fn new(encoder: EncoderConfig, decoder: DecoderConfig) -> Self {
        let encoder_output_norm = !decoder.variant.is_cross();
        ModelConfig { encoder, decoder, encoder_output_norm, norm_pix: true }
    }

    /// 32×32 RGB, patch 4, encoder 64×4, decoder 32×4.
    pub fn tiny(variant: DecoderVariant) -> Self {
        let encoder = EncoderConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
        };
        let decoder = DecoderConfig {
            variant,
            dim: 32,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            fused_maps: encoder.depth + 1,
        };
        Self::new(encoder, decoder)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(&self.encoder)
    }
}

#[derive(Debug, Clone)]
pub enum Decoder {
    SelfAttn(SelfDecoder),
    Cross(CrossDecoder),
}

/// Everything one training/analysis pass produces.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub loss: Var,
    /// Predictions for the supervised rows, `[B, |predicted|, patch_dim]`.
    pub pred: Var,
    /// Targets aligned with `pred` (standardized when `norm_pix`).
    pub target: Tensor<T>,
    /// Per-row statistics of the raw targets.
    pub stats: PatchStats,
    pub features: EncoderFeatures,
    pub decoder: DecoderOutput,
}

#[derive(Debug, Clone)]
pub struct MaskedAutoencoder {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl MaskedAutoencoder {
    /// Builds the model and its freshly initialized parameters.
    pub fn new<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::build(cfg, &mut store, &mut Init::new(seed))?;
        Ok((model, store))
    }

    pub fn build<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(&cfg.encoder, store, init)?;
        let decoder = match cfg.decoder.variant {
            DecoderVariant::SelfAttn => Decoder::SelfAttn(SelfDecoder::new(&cfg.decoder, &cfg.encoder, store, init)?),
            _ => Decoder::Cross(CrossDecoder::new(&cfg.decoder, &cfg.encoder, store, init)?),
        };
        Ok(MaskedAutoencoder { cfg: cfg.clone(), encoder, decoder })
    }

    pub fn variant(&self) -> DecoderVariant {
        self.cfg.decoder.variant
    }

    fn check_plans(&self, plans: &[MaskPlan]) -> Result<()> {
        let first = plans.first().ok_or_else(|| TensorError::Invalid("empty batch".into()))?;
        let n = self.cfg.encoder.num_patches();
        for pl in plans {
            if pl.num_tokens != n
                || pl.visible.len() != first.visible.len()
                || pl.predicted.len() != first.predicted.len()
            {
                return Err(TensorError::Invalid(format!(
                    "mask plans in a batch must share geometry over {n} patches"
                )));
            }
        }
        Ok(())
    }

    /// Decodes the predicted rows of every plan, `[B, |predicted|, patch_dim]`.
    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        features: &EncoderFeatures,
        plans: &[MaskPlan],
        record: bool,
    ) -> Result<(Var, DecoderOutput)> {
        let predicted: Arc<Vec<Vec<usize>>> = Arc::new(plans.iter().map(|pl| pl.predicted.clone()).collect());
        match &self.decoder {
            Decoder::Cross(dec) => {
                let features = if self.cfg.encoder_output_norm {
                    let mut f = features.clone();
                    let last = f.maps.len() - 1;
                    f.maps[last] = self.encoder.norm.forward(tape, p, f.maps[last])?;
                    f
                } else {
                    features.clone()
                };
                let out = dec.forward(tape, p, &features, predicted, record)?;
                Ok((out.pred, out))
            }
            Decoder::SelfAttn(dec) => {
                let latent = if self.cfg.encoder_output_norm {
                    self.encoder.norm.forward(tape, p, features.last())?
                } else {
                    features.last()
                };
                let out = dec.forward(tape, p, latent, plans, record)?;
                let pred = tape.gather(out.pred, predicted)?;
                Ok((pred, out))
            }
        }
    }

    /// Pixel targets for the predicted rows of `images: [B, H, W, C]`.
    pub fn targets<T: Scalar>(&self, images: &Tensor<T>, plans: &[MaskPlan]) -> Result<(Tensor<T>, PatchStats)> {
        let patches = patchify(images, self.cfg.encoder.patch_size)?;
        let index: Vec<Vec<usize>> = plans.iter().map(|pl| pl.predicted.clone()).collect();
        let raw = gather_rows(&patches, &index)?;
        let (norm, stats) = patch_normalize(&raw);
        Ok((if self.cfg.norm_pix { norm } else { raw }, stats))
    }

    /// Encode, decode and score one batch.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        images: &Tensor<T>,
        plans: &[MaskPlan],
        record: bool,
    ) -> Result<ForwardPass<T>> {
        self.check_plans(plans)?;
        let features = self.encoder.encode(tape, p, images, plans)?;
        let (pred, decoder) = self.decode(tape, p, &features, plans, record)?;
        let (target, stats) = self.targets(images, plans)?;
        let loss = masked_mse_loss(tape, pred, &target)?;
        Ok(ForwardPass { loss, pred, target, stats, features, decoder })
    }

    /// Predictions in pixel space (denormalized when `norm_pix`), aligned with
    /// each plan's predicted indices.
    pub fn predict_pixels<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        images: &Tensor<T>,
        plans: &[MaskPlan],
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let pass = self.forward(&mut tape, &p, images, plans, false)?;
        let pred = tape.value(pass.pred).clone();
        if self.cfg.norm_pix {
            crate::objective::patch_denormalize(&pred, &pass.stats)
        } else {
            Ok(pred)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_images(b: usize, seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..b * 32 * 32 * 3)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        Tensor::new(vec![b, 32, 32, 3], data).unwrap()
    }

    #[test]
    fn every_variant_produces_finite_loss() {
        for variant in [DecoderVariant::SelfAttn, DecoderVariant::CrossAttn, DecoderVariant::CrossPlusSelf] {
            let cfg = ModelConfig::tiny(variant);
            let (model, store) = MaskedAutoencoder::new::<f64>(&cfg, 0).unwrap();
            let images = tiny_images(2, 1);
            let plans: Vec<_> = (0..2).map(|s| MaskPlan::new(64, 0.75, 0.25, s).unwrap()).collect();
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let pass = model.forward(&mut tape, &p, &images, &plans, false).unwrap();
            assert_eq!(tape.shape(pass.pred), &[2, 16, 48]);
            let loss = tape.value(pass.loss).item();
            assert!(loss.is_finite() && loss > 0.0, "{variant:?}: {loss}");
            tape.backward(pass.loss).unwrap();
        }
    }

    #[test]
    fn rejects_mismatched_plans() {
        let cfg = ModelConfig::tiny(DecoderVariant::CrossAttn);
        let (model, store) = MaskedAutoencoder::new::<f64>(&cfg, 0).unwrap();
        let plans = vec![MaskPlan::new(64, 0.75, 0.25, 0).unwrap(), MaskPlan::new(64, 0.5, 0.25, 1).unwrap()];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        assert!(model.forward(&mut tape, &p, &tiny_images(2, 0), &plans, false).is_err());
        let wrong = vec![MaskPlan::new(49, 0.75, 0.25, 0).unwrap()];
        assert!(model.forward(&mut tape, &p, &tiny_images(1, 0), &wrong, false).is_err());
    }
}
