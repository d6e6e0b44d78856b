use std::time::Instant;

use crossmae::data::gen_synthetic;
use crossmae::decoder::DecoderVariant;
use crossmae::model::{MaskedAutoencoder, ModelConfig};
use crossmae::objective::OptimConfig;
use crossmae::train::{pretrain, PretrainConfig};

fn main() {
    let ds = gen_synthetic(std::env::var("N").map(|v| v.parse().unwrap()).unwrap_or(1024), 32, 32, 3, 0, false);
    for variant in [DecoderVariant::SelfAttn, DecoderVariant::CrossAttn] {
        let model_cfg = ModelConfig::tiny(variant);
        let (model, mut params) = MaskedAutoencoder::new::<f32>(&model_cfg, 0).unwrap();
        let cfg = PretrainConfig {
            model: model_cfg,
            optim: OptimConfig { batch_size: std::env::var("BATCH").map(|v| v.parse().unwrap()).unwrap_or(256), total_epochs: 1.0, warmup_epochs: 0.0, ..OptimConfig::default() },
            mask_ratio: 0.75,
            prediction_ratio: 0.75,
            accum_steps: 1,
            seed: 0,
            augment_flip: false,
            augment_crop_pad: 0,
            max_steps: None,
        };
        let t = Instant::now();
        let r = pretrain(&cfg, &model, &mut params, &ds, |_| {}).unwrap();
        let secs = t.elapsed().as_secs_f64();
        println!("{variant:?}: {} steps, {:.1} img/s, losses {:?}", r.steps, ds.len() as f64 / secs, r.step_losses);
    }
}
