//! Short masked-image pretraining of a self-attention decoder and a
//! cross-attention decoder on the same images. Saves both checkpoints.

use crossmae::data::gen_synthetic;
use crossmae::decoder::DecoderVariant;
use crossmae::model::{MaskedAutoencoder, ModelConfig};
use crossmae::objective::OptimConfig;
use crossmae::tensor::save_checkpoint;
use crossmae::train::{pretrain, PretrainConfig, TrainEvent};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("crossmae-pretrain");
    std::fs::create_dir_all(&out)?;
    let data = gen_synthetic(2048, 32, 32, 3, 1, false);
    for (variant, gamma) in [(DecoderVariant::SelfAttn, 0.75), (DecoderVariant::CrossAttn, 0.25)] {
        let mut model_cfg = ModelConfig::tiny(variant);
        model_cfg.decoder.depth = 4;
        let (model, mut params) = MaskedAutoencoder::new::<f32>(&model_cfg, 0)?;
        let cfg = PretrainConfig {
            model: model_cfg,
            optim: OptimConfig { base_lr: 2.4e-3, batch_size: 128, total_epochs: 4.0, ..OptimConfig::default() },
            mask_ratio: 0.75,
            prediction_ratio: gamma,
            accum_steps: 1,
            seed: 0,
            augment_flip: true,
            augment_crop_pad: 0,
            max_steps: None,
        };
        println!("{} decoder, gamma {gamma}, peak lr {:.2e}", variant.label(), cfg.peak_lr());
        let report = pretrain(&cfg, &model, &mut params, &data, |event| {
            if let TrainEvent::Epoch { epoch, mean_loss } = event {
                println!("  epoch {epoch}: loss {mean_loss:.4}");
            }
        })?;
        let path = out.join(format!("{}.ckpt", variant.label()));
        save_checkpoint(&path, &params.entries())?;
        println!("  {} steps, checkpoint {}", report.steps, path.display());
    }
    Ok(())
}
