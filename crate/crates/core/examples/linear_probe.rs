//! Linear probe of a briefly pretrained encoder on the 4-class shape task,
//! compared with a probe of a randomly initialized encoder.

use crossmae::data::gen_synthetic;
use crossmae::decoder::DecoderVariant;
use crossmae::model::{MaskedAutoencoder, ModelConfig};
use crossmae::objective::OptimConfig;
use crossmae::train::{finetune, pretrain, PretrainConfig, ProbeConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let train = gen_synthetic(4096, 32, 32, 3, 5, true);
    let test = gen_synthetic(1000, 32, 32, 3, 6, true);
    let mut model_cfg = ModelConfig::tiny(DecoderVariant::CrossAttn);
    model_cfg.decoder.depth = 4;
    let (model, mut params) = MaskedAutoencoder::new::<f32>(&model_cfg, 0)?;
    let probe_cfg = ProbeConfig { epochs: 10, ..ProbeConfig::linear_probe(0) };

    let random = finetune(&model_cfg, &params, &train, &test, &probe_cfg)?;
    println!("random encoder:     test accuracy {:.1}%", random.test_accuracy * 100.0);

    let cfg = PretrainConfig {
        model: model_cfg.clone(),
        optim: OptimConfig { base_lr: 2.4e-3, batch_size: 128, total_epochs: 5.0, ..OptimConfig::default() },
        mask_ratio: 0.75,
        prediction_ratio: 0.25,
        accum_steps: 1,
        seed: 0,
        augment_flip: true,
        augment_crop_pad: 0,
        max_steps: None,
    };
    pretrain(&cfg, &model, &mut params, &train, |_| {})?;
    let trained = finetune(&model_cfg, &params, &train, &test, &probe_cfg)?;
    println!("pretrained encoder: test accuracy {:.1}%", trained.test_accuracy * 100.0);
    print!("{}", trained.to_csv());
    Ok(())
}
