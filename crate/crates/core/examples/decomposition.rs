//! Splits a reconstruction into per-decoder-block contributions, renders the
//! running sum after every block and prints the inter-block weight map.

use crossmae::analysis::{high_pass_energy, interblock_weight_map, per_block_decomposition, save_image};
use crossmae::data::gen_synthetic;
use crossmae::decoder::DecoderVariant;
use crossmae::masking::MaskPlan;
use crossmae::model::{MaskedAutoencoder, ModelConfig};
use crossmae::objective::{patch_normalize, OptimConfig};
use crossmae::train::{pretrain, PretrainConfig};
use crossmae::vit::{gather_rows, patchify};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("crossmae-decomposition");
    std::fs::create_dir_all(&out)?;
    let data = gen_synthetic(2048, 32, 32, 3, 4, false);
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
    pretrain(&cfg, &model, &mut params, &data, |_| {})?;

    let enc = &model_cfg.encoder;
    let image = data.batch::<f32>(&[0]);
    let plan = MaskPlan::new(enc.num_patches(), 0.75, 0.75, 5)?;
    let stack = per_block_decomposition(&model, &params, &image, std::slice::from_ref(&plan))?.remove(0);
    println!("identity error {:.2e}; naive split error {:.2e}", stack.identity_error(), stack.naive_gap);

    let patches = patchify(&image.cast::<f64>(), enc.patch_size)?;
    let (_, stats) = patch_normalize(&gather_rows(&patches, &[stack.rows.clone()])?);
    let mut running = stack.base.clone();
    save_image(&stack.render(&running, enc, Some(&stats), true, 0.5)?, &out.join("block0.ppm"))?;
    for (i, term) in stack.contributions.iter().enumerate() {
        running.iter_mut().zip(term).for_each(|(r, t)| *r += t);
        let energy = high_pass_energy(&stack.render(term, enc, None, false, 0.0)?);
        println!("block {}: high-pass energy of its contribution {energy:.4}", i + 1);
        save_image(&stack.render(&running, enc, Some(&stats), true, 0.5)?, &out.join(format!("block{}.ppm", i + 1)))?;
    }

    let map = interblock_weight_map(&model, &params, true)?;
    map.write_csv(std::io::stdout())?;
    println!("rendered running sums to {}", out.display());
    Ok(())
}
