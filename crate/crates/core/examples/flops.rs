//! Analytical decoder compute of a self-attention decoder against
//! cross-attention decoders at ViT-B geometry.

use crossmae::analysis::count_flops;
use crossmae::decoder::{DecoderConfig, DecoderVariant};
use crossmae::vit::EncoderConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let enc = EncoderConfig { image_size: 224, patch_size: 16, channels: 3, dim: 768, depth: 12, heads: 12, mlp_ratio: 4.0 };
    let dec = |variant, depth| DecoderConfig { variant, dim: 512, depth, heads: 16, mlp_ratio: 4.0, fused_maps: enc.depth + 1 };

    let baseline = count_flops(&enc, &dec(DecoderVariant::SelfAttn, 8), 0.75, 0.75)?;
    baseline.write_text(std::io::stdout())?;
    println!();
    println!("{:>8} {:>6} {:>16} {:>8}", "depth", "gamma", "decoder GFLOPs", "ratio");
    for depth in [8, 12] {
        for gamma in [0.15, 0.25, 0.5, 0.75] {
            let r = count_flops(&enc, &dec(DecoderVariant::CrossAttn, depth), 0.75, gamma)?;
            println!(
                "{depth:>8} {gamma:>6.2} {:>16.2} {:>8.2}",
                r.decoder_total as f64 / 1e9,
                baseline.decoder_total as f64 / r.decoder_total as f64
            );
        }
    }
    Ok(())
}
