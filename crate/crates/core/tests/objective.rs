use crossmae::masking::MaskPlan;
use crossmae::objective::{cosine_warmup_lr, scaled_lr, subset_loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 64;
const P: f64 = 0.75;

/// Frozen per-token squared errors: exponential-ish positive field.
fn error_field(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..N).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect()
}

/// Partial losses for `draws` seeded plans sharing one masked set.
fn partial_losses(errors: &[f64], gamma: f64, draws: usize) -> (f64, Vec<f64>) {
    let base = MaskPlan::new(N, P, P, 17).unwrap();
    let full = subset_loss(errors, &base.masked);
    let k = (gamma * N as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let losses = (0..draws)
        .map(|_| {
            let mut pool = base.masked.clone();
            for i in 0..k {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            subset_loss(errors, &pool[..k])
        })
        .collect();
    (full, losses)
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var)
}

#[test]
fn partial_loss_is_unbiased() {
    let errors = error_field(1);
    for gamma in [0.15, 0.25, 0.45] {
        let (full, losses) = partial_losses(&errors, gamma, 10_000);
        let (m, _) = mean_var(&losses);
        assert!((m - full).abs() / full < 0.01, "γ={gamma}: {m} vs {full}");
    }
}

/// Sampling k of the M masked tokens without replacement gives
/// Var = σ²/k · (M − k)/(M − 1).
#[test]
fn partial_loss_variance_follows_finite_population_law() {
    let errors = error_field(2);
    let masked = MaskPlan::new(N, P, P, 17).unwrap().masked;
    let m = masked.len() as f64;
    let vals: Vec<f64> = masked.iter().map(|&i| errors[i]).collect();
    let mu = vals.iter().sum::<f64>() / m;
    let sigma2 = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m;
    let law = |k: f64| sigma2 / k * (m - k) / (m - 1.0);
    let (_, small) = partial_losses(&errors, 0.15, 10_000);
    let (_, large) = partial_losses(&errors, 0.45, 10_000);
    let (_, v1) = mean_var(&small);
    let (_, v2) = mean_var(&large);
    let (k1, k2) = ((0.15 * N as f64).floor(), (0.45 * N as f64).floor());
    assert!((v1 / law(k1) - 1.0).abs() < 0.15, "{v1} vs {}", law(k1));
    assert!((v2 / law(k2) - 1.0).abs() < 0.15, "{v2} vs {}", law(k2));
    let expected_ratio = law(k1) / law(k2);
    assert!(((v1 / v2) / expected_ratio - 1.0).abs() < 0.15);
}

#[test]
fn lr_rule() {
    assert_eq!(scaled_lr(1.5e-4, 4096, 0.75, 0.25), 8.0e-4);
    assert_eq!(scaled_lr(1.5e-4, 256, 0.75, 0.75), 1.5e-4);
    assert_eq!(scaled_lr(1e-3, 512, 0.5, 0.25), 1e-3);
}

#[test]
fn schedule_shape() {
    let peak = 1e-3;
    assert_eq!(cosine_warmup_lr(0.0, peak, 2.0, 10.0), 0.0);
    assert_eq!(cosine_warmup_lr(1.0, peak, 2.0, 10.0), peak / 2.0);
    assert_eq!(cosine_warmup_lr(2.0, peak, 2.0, 10.0), peak);
    assert!((cosine_warmup_lr(6.0, peak, 2.0, 10.0) - peak / 2.0).abs() < 1e-15);
    assert_eq!(cosine_warmup_lr(10.0, peak, 2.0, 10.0), 0.0);
    let mut prev = peak;
    for e in 1..=40 {
        let lr = cosine_warmup_lr(2.0 + e as f64 * 0.2, peak, 2.0, 10.0);
        assert!(lr <= prev);
        prev = lr;
    }
}
