//! Mask plans, attention-group matrices and the partial-reconstruction loss.

use crossmae::masking::{group_matrices, MaskPlan};
use crossmae::objective::subset_loss;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let plan = MaskPlan::new(16, 0.75, 0.25, 42)?;
    println!("visible   {:?}", plan.visible);
    println!("masked    {:?}", plan.masked);
    println!("predicted {:?}", plan.predicted);

    let groups = group_matrices(&plan);
    println!(
        "mask->mask pairs {}, mask->visible pairs {}",
        groups.mask_to_mask_count(),
        groups.mask_to_visible_count()
    );

    // On a fixed per-token error field the partial loss is an unbiased but
    // noisier estimate of the loss over every masked token.
    let errors: Vec<f64> = (0..16).map(|i| 1.0 + (i as f64 * 0.7).sin()).collect();
    let full = subset_loss(&errors, &plan.masked);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = 5000;
    let losses: Vec<f64> = (0..draws)
        .map(|_| {
            let subset: Vec<usize> = plan.masked.choose_multiple(&mut rng, plan.predicted.len()).copied().collect();
            subset_loss(&errors, &plan.with_predicted(&subset).expect("subset of masked").predicted)
        })
        .collect();
    let mean = losses.iter().sum::<f64>() / draws as f64;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    println!("full masked loss {full:.4}; partial loss mean {mean:.4}, variance {var:.5} over {draws} subsets");
    Ok(())
}
