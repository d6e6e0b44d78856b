mod common;

use crossmae::analysis::{
    count_flops, group_means, high_pass_energy, interblock_weight_map, per_block_decomposition, spearman,
};
use crossmae::decoder::{DecoderConfig, DecoderVariant};
use crossmae::masking::MaskPlan;
use crossmae::model::{MaskedAutoencoder, ModelConfig};
use crossmae::objective::{AdamW, OptimConfig};
use crossmae::tensor::{Tape, Tensor};
use crossmae::vit::EncoderConfig;

use common::random_tensor;

fn vit_b() -> EncoderConfig {
    EncoderConfig { image_size: 224, patch_size: 16, channels: 3, dim: 768, depth: 12, heads: 12, mlp_ratio: 4.0 }
}

fn decoder(variant: DecoderVariant, depth: usize, fused_maps: usize) -> DecoderConfig {
    DecoderConfig { variant, dim: 512, depth, heads: 16, mlp_ratio: 4.0, fused_maps }
}

/// Written out term by term for ViT-B/16 with 49 visible patches.
#[test]
fn cross_decoder_flops_match_hand_count() {
    let report = count_flops(&vit_b(), &decoder(DecoderVariant::CrossAttn, 12, 13), 0.75, 0.25).unwrap();
    let (q, kv, d, e, hid, pd) = (49u64, 50u64, 512u64, 768u64, 2048u64, 768u64);
    let q_and_out = 2 * 2 * q * d * d;
    let k_and_v = 2 * 2 * kv * e * d;
    let scores_and_mix = 2 * 2 * q * kv * d;
    let mlp = 2 * 2 * q * d * hid;
    let per_block = q_and_out + k_and_v + scores_and_mix + mlp;
    let fusion = 2 * 13 * 12 * kv * e;
    let head = 2 * q * d * pd;
    assert_eq!(report.queries, 49);
    assert_eq!(report.decoder_total, 12 * per_block + fusion + head);
}

#[test]
fn self_decoder_flops_match_hand_count() {
    let report = count_flops(&vit_b(), &decoder(DecoderVariant::SelfAttn, 8, 13), 0.75, 0.75).unwrap();
    let (l, d, e, hid, pd) = (197u64, 512u64, 768u64, 2048u64, 768u64);
    let embed = 2 * 50 * e * d;
    let per_block = 2 * 4 * l * d * d + 2 * 2 * l * l * d + 2 * 2 * l * d * hid;
    let head = 2 * l * d * pd;
    assert_eq!(report.decoder_total, embed + 8 * per_block + head);
}

#[test]
fn flops_shrink_with_prediction_ratio() {
    let enc = vit_b();
    let dec = decoder(DecoderVariant::CrossAttn, 12, 13);
    let small = count_flops(&enc, &dec, 0.75, 0.15).unwrap().decoder_total;
    let large = count_flops(&enc, &dec, 0.75, 0.75).unwrap().decoder_total;
    assert!(small < large);
    assert!(count_flops(&enc, &dec, 0.75, 0.9).is_err());
}

#[test]
fn group_means_by_hand() {
    // 3 patches, patches 1 and 2 masked; row/column 0 is the class token.
    let mask = [0u8, 1, 1];
    #[rustfmt::skip]
    let probs = [
        0.25, 0.25, 0.25, 0.25,
        0.25, 0.25, 0.25, 0.25,
        0.1, 0.2, 0.3, 0.4,
        0.4, 0.3, 0.2, 0.1,
    ];
    let (mm, mv) = group_means(&probs, &mask);
    // masked rows 2 and 3; m·mᵀ keeps the diagonal.
    assert!((mm - (0.3 + 0.4 + 0.2 + 0.1) / 4.0).abs() < 1e-15);
    assert!((mv - (0.1 + 0.2 + 0.4 + 0.3) / 4.0).abs() < 1e-15);
}

fn small_model(variant: DecoderVariant, depth: usize) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(variant);
    cfg.decoder.depth = depth;
    cfg
}

#[test]
fn decomposition_identity_random_weights() {
    for variant in [DecoderVariant::SelfAttn, DecoderVariant::CrossAttn, DecoderVariant::CrossPlusSelf] {
        for depth in [1, 4, 8, 12] {
            let (model, params) = MaskedAutoencoder::new::<f32>(&small_model(variant, depth), depth as u64).unwrap();
            let images: Tensor<f32> = random_tensor(&[2, 32, 32, 3], 3).cast();
            let plans: Vec<MaskPlan> = (0..2).map(|i| MaskPlan::new(64, 0.75, 0.5, i).unwrap()).collect();
            let stacks = per_block_decomposition(&model, &params, &images, &plans).unwrap();
            for s in &stacks {
                assert_eq!(s.contributions.len(), depth);
                let err = s.identity_error();
                assert!(err < 1e-5, "{variant:?} D={depth}: {err:.3e}");
            }
        }
    }
}

#[test]
fn decomposition_identity_after_updates() {
    for variant in [DecoderVariant::SelfAttn, DecoderVariant::CrossAttn] {
        let cfg = small_model(variant, 4);
        let (model, mut params) = MaskedAutoencoder::new::<f32>(&cfg, 1).unwrap();
        let images: Tensor<f32> = random_tensor(&[4, 32, 32, 3], 9).cast();
        let plans: Vec<MaskPlan> = (0..4).map(|i| MaskPlan::new(64, 0.75, 0.75, 10 + i).unwrap()).collect();
        let mut opt = AdamW::new(&params, &OptimConfig::default());
        for _ in 0..5 {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, true);
            let pass = model.forward(&mut tape, &p, &images, &plans, false).unwrap();
            tape.backward(pass.loss).unwrap();
            let grads = params.grads(&tape, &p);
            opt.step(&mut params, &grads, 1e-2).unwrap();
        }
        for s in per_block_decomposition(&model, &params, &images, &plans).unwrap() {
            assert!(s.identity_error() < 1e-5);
            assert!(s.naive_gap > s.identity_error());
        }
    }
}

#[test]
fn weight_map_shape_and_rows() {
    let cfg = small_model(DecoderVariant::CrossAttn, 3);
    let (model, params) = MaskedAutoencoder::new::<f32>(&cfg, 0).unwrap();
    let map = interblock_weight_map(&model, &params, true).unwrap();
    assert_eq!((map.rows, map.cols), (3, 5));
    assert_eq!(map.sources, vec![0, 1, 2, 3, 4]);
    for row in map.values.chunks(map.cols) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let mut csv = Vec::new();
    map.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "decoder_block,map0,map1,map2,map3,map4");
    assert_eq!(text.lines().count(), 4);

    let (self_model, self_params) = MaskedAutoencoder::new::<f32>(&small_model(DecoderVariant::SelfAttn, 2), 0).unwrap();
    assert!(interblock_weight_map(&self_model, &self_params, true).is_err());
}

#[test]
fn spearman_and_energy_basics() {
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    let flat = Tensor::new(vec![4, 4, 1], vec![0.5; 16]).unwrap();
    assert!(high_pass_energy(&flat) < 1e-24);
    let checker = Tensor::new(vec![4, 4, 1], (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect()).unwrap();
    assert!(high_pass_energy(&checker) > 1.0);
}
