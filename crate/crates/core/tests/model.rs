mod common;

use crossmae::decoder::{DecoderConfig, DecoderVariant};
use crossmae::masking::MaskPlan;
use crossmae::model::{MaskedAutoencoder, ModelConfig};
use crossmae::params::ParamStore;
use crossmae::tensor::{Tape, Tensor};
use crossmae::vit::EncoderConfig;

use common::{random_tensor, rel_err};

fn micro_config(variant: DecoderVariant) -> ModelConfig {
    let encoder = EncoderConfig { image_size: 8, patch_size: 4, channels: 2, dim: 8, depth: 2, heads: 2, mlp_ratio: 2.0 };
    let decoder = DecoderConfig { variant, dim: 8, depth: 2, heads: 2, mlp_ratio: 2.0, fused_maps: 2 };
    ModelConfig::new(encoder, decoder)
}

fn plans(n: usize, b: usize, p: f64, gamma: f64, seed: u64) -> Vec<MaskPlan> {
    (0..b).map(|i| MaskPlan::new(n, p, gamma, seed * 1000 + i as u64).unwrap()).collect()
}

fn loss_at(model: &MaskedAutoencoder, params: &ParamStore<f64>, images: &Tensor<f64>, plans: &[MaskPlan]) -> f64 {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let pass = model.forward(&mut tape, &p, images, plans, false).unwrap();
    tape.value(pass.loss).item()
}

/// Worst relative error between the analytic parameter gradient and central
/// differences, over every scalar of every parameter.
fn full_model_fd(variant: DecoderVariant) -> f64 {
    let cfg = micro_config(variant);
    let (model, mut params) = MaskedAutoencoder::new::<f64>(&cfg, 3).unwrap();
    // Perturb away from the init so norms and the mask token carry signal.
    for (i, v) in params.values_mut().iter_mut().enumerate() {
        let noise = random_tensor(v.shape(), 100 + i as u64);
        for (x, n) in v.data_mut().iter_mut().zip(noise.data()) {
            *x += 0.1 * n;
        }
    }
    let images = random_tensor(&[2, 8, 8, 2], 7);
    let plans = plans(4, 2, 0.5, 0.5, 1);

    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let pass = model.forward(&mut tape, &p, &images, &plans, false).unwrap();
    tape.backward(pass.loss).unwrap();
    let grads = params.grads(&tape, &p);

    let h = common::FD_STEP;
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        for j in 0..g.numel() {
            let orig = params.values()[k].data()[j];
            params.values_mut()[k].data_mut()[j] = orig + h;
            let up = loss_at(&model, &params, &images, &plans);
            params.values_mut()[k].data_mut()[j] = orig - h;
            let down = loss_at(&model, &params, &images, &plans);
            params.values_mut()[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[j], numeric));
        }
    }
    worst
}

#[test]
fn full_loss_gradient_matches_finite_differences_all_variants() {
    for variant in [DecoderVariant::SelfAttn, DecoderVariant::CrossAttn, DecoderVariant::CrossPlusSelf] {
        let err = full_model_fd(variant);
        assert!(err < 1e-3, "{variant:?}: worst relative error {err:.3e}");
    }
}

/// Decodes `plans` with the given predicted subsets and returns rows keyed by patch index.
fn decoded_rows(
    model: &MaskedAutoencoder,
    params: &ParamStore<f64>,
    images: &Tensor<f64>,
    plans: &[MaskPlan],
) -> Vec<Vec<(usize, Vec<f64>)>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let pass = model.forward(&mut tape, &p, images, plans, false).unwrap();
    let pred = tape.value(pass.pred);
    let width = pred.shape()[2];
    let rows = pred.shape()[1];
    plans
        .iter()
        .enumerate()
        .map(|(b, pl)| {
            pl.predicted
                .iter()
                .enumerate()
                .map(|(r, &idx)| (idx, pred.data()[(b * rows + r) * width..(b * rows + r + 1) * width].to_vec()))
                .collect()
        })
        .collect()
}

#[test]
fn cross_decoding_is_conditionally_independent_across_queries() {
    let cfg = ModelConfig::tiny(DecoderVariant::CrossAttn);
    let (model, params) = MaskedAutoencoder::new::<f64>(&cfg, 11).unwrap();
    let images = random_tensor(&[1, 32, 32, 3], 5);
    let full = MaskPlan::new(64, 0.75, 0.75, 9).unwrap();
    let full_rows = decoded_rows(&model, &params, &images, std::slice::from_ref(&full));
    let subset: Vec<usize> = full.masked.iter().copied().step_by(5).collect();
    let partial = full.with_predicted(&subset).unwrap();
    let part_rows = decoded_rows(&model, &params, &images, std::slice::from_ref(&partial));
    for (idx, row) in &part_rows[0] {
        let reference = &full_rows[0].iter().find(|(i, _)| i == idx).unwrap().1;
        assert_eq!(row, reference, "row {idx} changed with the query set");
    }
}

#[test]
fn query_self_attention_couples_decoded_rows() {
    let cfg = ModelConfig::tiny(DecoderVariant::CrossPlusSelf);
    let (model, params) = MaskedAutoencoder::new::<f64>(&cfg, 11).unwrap();
    let images = random_tensor(&[1, 32, 32, 3], 5);
    let full = MaskPlan::new(64, 0.75, 0.75, 9).unwrap();
    let full_rows = decoded_rows(&model, &params, &images, std::slice::from_ref(&full));
    let subset: Vec<usize> = full.masked.iter().copied().step_by(5).collect();
    let partial = full.with_predicted(&subset).unwrap();
    let part_rows = decoded_rows(&model, &params, &images, std::slice::from_ref(&partial));
    let differing = part_rows[0]
        .iter()
        .filter(|(idx, row)| &full_rows[0].iter().find(|(i, _)| i == idx).unwrap().1 != row)
        .count();
    assert_eq!(differing, subset.len());
}

#[test]
fn masked_pixels_never_reach_the_encoder() {
    for variant in [DecoderVariant::SelfAttn, DecoderVariant::CrossAttn] {
        let cfg = ModelConfig::tiny(variant);
        let (model, params) = MaskedAutoencoder::new::<f64>(&cfg, 2).unwrap();
        let plan = MaskPlan::new(64, 0.75, 0.5, 4).unwrap();
        let images = random_tensor(&[1, 32, 32, 3], 1);
        let mut scrambled = images.clone();
        // Overwrite every masked patch with unrelated values.
        let noise = random_tensor(&[1, 32, 32, 3], 99);
        for &m in &plan.masked {
            let (gy, gx) = (m / 8, m % 8);
            for y in gy * 4..gy * 4 + 4 {
                for x in gx * 4..gx * 4 + 4 {
                    for c in 0..3 {
                        let i = (y * 32 + x) * 3 + c;
                        scrambled.data_mut()[i] = noise.data()[i] * 10.0;
                    }
                }
            }
        }
        let run = |imgs: &Tensor<f64>| {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, false);
            let feats = model.encoder.encode(&mut tape, &p, imgs, std::slice::from_ref(&plan)).unwrap();
            let (pred, _) = model.decode(&mut tape, &p, &feats, std::slice::from_ref(&plan), false).unwrap();
            let maps: Vec<Tensor<f64>> = feats.maps.iter().map(|v| tape.value(*v).clone()).collect();
            (maps, tape.value(pred).clone())
        };
        let (maps_a, pred_a) = run(&images);
        let (maps_b, pred_b) = run(&scrambled);
        assert_eq!(maps_a, maps_b, "{variant:?}");
        assert_eq!(pred_a, pred_b, "{variant:?}");
    }
}

#[test]
fn batch_rows_are_independent_of_batch_neighbours() {
    let cfg = ModelConfig::tiny(DecoderVariant::CrossAttn);
    let (model, params) = MaskedAutoencoder::new::<f64>(&cfg, 2).unwrap();
    let images = random_tensor(&[2, 32, 32, 3], 8);
    let pl = plans(64, 2, 0.75, 0.25, 3);
    let both = model.predict_pixels(&params, &images, &pl).unwrap();
    let first = Tensor::new(vec![1, 32, 32, 3], images.data()[..32 * 32 * 3].to_vec()).unwrap();
    let alone = model.predict_pixels(&params, &first, &pl[..1]).unwrap();
    let rows = alone.numel();
    for (a, b) in alone.data().iter().zip(&both.data()[..rows]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn all_variants_train_in_f32_without_nan() {
    for variant in [DecoderVariant::SelfAttn, DecoderVariant::CrossAttn, DecoderVariant::CrossPlusSelf] {
        let cfg = ModelConfig::tiny(variant);
        let (model, params) = MaskedAutoencoder::new::<f32>(&cfg, 0).unwrap();
        let images: Tensor<f32> = random_tensor(&[2, 32, 32, 3], 4).cast();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, true);
        let pass = model.forward(&mut tape, &p, &images, &plans(64, 2, 0.75, 0.5, 2), false).unwrap();
        tape.backward(pass.loss).unwrap();
        let loss = tape.value(pass.loss).item();
        assert!(loss.is_finite() && loss > 0.0);
        assert!(params.grads(&tape, &p).iter().all(Tensor::all_finite));
    }
}
