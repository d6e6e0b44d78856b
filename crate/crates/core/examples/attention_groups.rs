//! How much mask tokens of a self-attention decoder attend to other mask
//! tokens versus visible tokens, before and after a short pretraining.

use crossmae::analysis::{attention_stats, AttentionReport};
use crossmae::data::gen_synthetic;
use crossmae::decoder::DecoderVariant;
use crossmae::model::{MaskedAutoencoder, ModelConfig};
use crossmae::objective::OptimConfig;
use crossmae::train::{pretrain, PretrainConfig};

fn show(label: &str, r: &AttentionReport) {
    let s = r.per_pair_times_seqlen;
    println!("{label:>9}: mask->visible {:.3}  mask->mask {:.3}", s.mean_mask_to_visible, s.mean_mask_to_mask);
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = gen_synthetic(2048, 32, 32, 3, 3, false);
    let mut model_cfg = ModelConfig::tiny(DecoderVariant::SelfAttn);
    model_cfg.decoder.depth = 4;
    let (model, mut params) = MaskedAutoencoder::new::<f32>(&model_cfg, 0)?;
    let probe = data.batch::<f32>(&(0..128).collect::<Vec<_>>());
    let seeds: Vec<u64> = (0..128).collect();
    show("random", &attention_stats(&model, &params, &probe, 0.75, &seeds, 32)?);

    let cfg = PretrainConfig {
        model: model_cfg,
        optim: OptimConfig { base_lr: 2.4e-3, batch_size: 128, total_epochs: 6.0, ..OptimConfig::default() },
        mask_ratio: 0.75,
        prediction_ratio: 0.75,
        accum_steps: 1,
        seed: 0,
        augment_flip: false,
        augment_crop_pad: 0,
        max_steps: None,
    };
    pretrain(&cfg, &model, &mut params, &data, |_| {})?;
    show("trained", &attention_stats(&model, &params, &probe, 0.75, &seeds, 32)?);
    println!("(per-pair means times sequence length; uniform attention reads 1)");
    Ok(())
}
