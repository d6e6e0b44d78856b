//! Trains a cross-attention autoencoder briefly and writes original, masked
//! and reconstructed images side by side.

use crossmae::data::{gen_synthetic, write_ppm};
use crossmae::decoder::DecoderVariant;
use crossmae::masking::MaskPlan;
use crossmae::model::{MaskedAutoencoder, ModelConfig};
use crossmae::objective::OptimConfig;
use crossmae::tensor::Tensor;
use crossmae::train::{pretrain, PretrainConfig};
use crossmae::vit::{patchify, unpatchify};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("crossmae-reconstruct");
    std::fs::create_dir_all(&out)?;
    let data = gen_synthetic(2048, 32, 32, 3, 2, false);
    let mut model_cfg = ModelConfig::tiny(DecoderVariant::CrossAttn);
    model_cfg.decoder.depth = 4;
    let (model, mut params) = MaskedAutoencoder::new::<f32>(&model_cfg, 0)?;
    let cfg = PretrainConfig {
        model: model_cfg.clone(),
        optim: OptimConfig { base_lr: 2.4e-3, batch_size: 128, total_epochs: 6.0, ..OptimConfig::default() },
        mask_ratio: 0.75,
        prediction_ratio: 0.75,
        accum_steps: 1,
        seed: 0,
        augment_flip: false,
        augment_crop_pad: 0,
        max_steps: None,
    };
    let report = pretrain(&cfg, &model, &mut params, &data, |_| {})?;
    println!("trained {} steps, final loss {:.4}", report.steps, report.step_losses.last().unwrap_or(&f64::NAN));

    let (enc, count) = (&model_cfg.encoder, 4);
    let (n, pd) = (enc.num_patches(), enc.patch_dim());
    let indices: Vec<usize> = (0..count).collect();
    let plans = (0..count as u64).map(|s| MaskPlan::new(n, 0.75, 0.75, 100 + s)).collect::<Result<Vec<_>, _>>()?;
    let images = data.batch::<f32>(&indices);
    let pred = model.predict_pixels(&params, &images, &plans)?;
    let patches = patchify(&images.cast::<f64>(), enc.patch_size)?;
    for (b, plan) in plans.iter().enumerate() {
        let original = patches.data()[b * n * pd..(b + 1) * n * pd].to_vec();
        let mut masked = original.clone();
        for &t in &plan.masked {
            masked[t * pd..(t + 1) * pd].fill(0.5);
        }
        let mut filled = masked.clone();
        for (r, &t) in plan.predicted.iter().enumerate() {
            let at = (b * plan.predicted.len() + r) * pd;
            for (dst, &src) in filled[t * pd..(t + 1) * pd].iter_mut().zip(&pred.data()[at..at + pd]) {
                *dst = src as f64;
            }
        }
        // original | masked | reconstruction, side by side
        let panels = [original, masked, filled]
            .map(|p| unpatchify(&Tensor::new(vec![1, n, pd], p).expect("patches"), enc.patch_size, enc.channels));
        let (s, c) = (enc.image_size, enc.channels);
        let mut strip = Vec::with_capacity(s * 3 * s * c);
        for y in 0..s {
            for panel in &panels {
                let panel = panel.as_ref().map_err(|e| e.to_string())?;
                strip.extend_from_slice(&panel.data()[y * s * c..(y + 1) * s * c]);
            }
        }
        let path = out.join(format!("{b}.ppm"));
        write_ppm(&Tensor::new(vec![s, 3 * s, c], strip)?, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
