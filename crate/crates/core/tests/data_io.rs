mod common;

use crossmae::decoder::DecoderVariant;
use crossmae::data::{gen_synthetic, ppm_bytes, quantize, DataError, Dataset, Loader};
use crossmae::model::{MaskedAutoencoder, ModelConfig};
use crossmae::objective::{patch_denormalize, patch_normalize};
use crossmae::params::ParamStore;
use crossmae::tensor::{load_checkpoint, save_checkpoint, Tensor};
use crossmae::vit::{patchify, unpatchify};

use common::random_tensor;

#[test]
fn dataset_file_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    for labeled in [false, true] {
        let ds = gen_synthetic(37, 32, 32, 3, 5, labeled);
        let path = dir.path().join(format!("d{labeled}.cmae"));
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.digest(), ds.digest());
        assert_eq!(std::fs::read(&path).unwrap(), ds.to_bytes());
    }
}

#[test]
fn generator_is_seed_deterministic_and_prefix_stable() {
    let a = gen_synthetic(20, 32, 32, 3, 9, true);
    let b = gen_synthetic(20, 32, 32, 3, 9, true);
    assert_eq!(a.digest(), b.digest());
    let longer = gen_synthetic(25, 32, 32, 3, 9, true);
    assert_eq!(longer.subset(&(0..20).collect::<Vec<_>>()), a);
    assert_ne!(gen_synthetic(20, 32, 32, 3, 10, true).digest(), a.digest());
}

#[test]
fn generator_balances_the_four_classes() {
    let ds = gen_synthetic(2000, 32, 32, 3, 1, true);
    let mut counts = [0usize; 4];
    for &l in ds.labels.as_ref().unwrap() {
        counts[l as usize] += 1;
    }
    for c in counts {
        assert!((400..=600).contains(&c), "{counts:?}");
    }
}

#[test]
fn corrupt_dataset_files_are_rejected_with_offsets() {
    let bytes = gen_synthetic(3, 8, 8, 3, 0, true).to_bytes();
    match Dataset::from_bytes(&bytes[..bytes.len() - 1]) {
        Err(DataError::Truncated { what, needed, available, .. }) => {
            assert_eq!((what, needed, available), ("labels", 3, 2));
        }
        other => panic!("{other:?}"),
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Dataset::from_bytes(&bad), Err(DataError::BadMagic { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Dataset::from_bytes(&long), Err(DataError::Trailing { extra: 1, .. })));
}

#[test]
fn loader_draws_distinct_images_per_epoch() {
    let ds = gen_synthetic(50, 8, 8, 3, 0, false);
    let mut loader = Loader::new(&ds, 16, 3);
    let mut seen: Vec<usize> = loader.epoch::<f32>(0).flat_map(|b| b.indices).collect();
    assert_eq!(seen.len(), 48);
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 48);
    assert_ne!(loader.epoch_order(0), loader.epoch_order(1));

    loader.drop_last = false;
    let mut all: Vec<usize> = loader.epoch::<f32>(0).flat_map(|b| b.indices).collect();
    all.sort_unstable();
    assert_eq!(all, (0..50).collect::<Vec<_>>());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (_, params) = MaskedAutoencoder::new::<f32>(&ModelConfig::tiny(DecoderVariant::CrossAttn), 4).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &params.entries()).unwrap();
    let entries = load_checkpoint::<f32>(&path).unwrap();
    let mut restored: ParamStore<f32> = MaskedAutoencoder::new::<f32>(&ModelConfig::tiny(DecoderVariant::CrossAttn), 99).unwrap().1;
    assert_eq!(restored.load_entries(&entries).unwrap(), params.len());
    assert_eq!(restored.values(), params.values());
}

#[test]
fn patchify_round_trip_is_exact() {
    for (size, patch, channels) in [(32, 4, 3), (8, 2, 1), (12, 6, 2)] {
        let images = random_tensor(&[3, size, size, channels], size as u64);
        let patches = patchify(&images, patch).unwrap();
        let grid = size / patch;
        assert_eq!(patches.shape(), &[3, grid * grid, patch * patch * channels]);
        assert_eq!(unpatchify(&patches, patch, channels).unwrap(), images);
    }
}

#[test]
fn patchify_orders_rows_and_pixels_row_major() {
    // 4×4 single-channel image holding its own pixel index.
    let img = Tensor::new(vec![1, 4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
    let p = patchify(&img, 2).unwrap();
    assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(&p.data()[12..16], &[10.0, 11.0, 14.0, 15.0]);
}

#[test]
fn patch_normalization_round_trip() {
    let x = random_tensor(&[2, 5, 12], 3);
    let (norm, stats) = patch_normalize(&x);
    for row in norm.data().chunks(12) {
        let mean: f64 = row.iter().sum::<f64>() / 12.0;
        assert!(mean.abs() < 1e-12);
    }
    let back = patch_denormalize(&norm, &stats).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-6);
}

#[test]
fn u8_images_survive_batch_and_quantize() {
    let ds = gen_synthetic(4, 16, 16, 3, 2, false);
    let batch: Tensor<f64> = ds.batch(&[0, 1, 2, 3]);
    let bytes: Vec<u8> = batch.data().iter().map(|&v| quantize(v)).collect();
    assert_eq!(bytes, ds.pixels);
}

#[test]
fn ppm_layout() {
    let img = Tensor::new(vec![2, 3, 3], vec![0.0, 0.5, 1.0].repeat(6)).unwrap();
    let bytes = ppm_bytes(&img).unwrap();
    let header = b"P6\n3 2\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(&bytes[header.len()..header.len() + 3], &[0, 128, 255]);
    assert_eq!(bytes.len(), header.len() + 18);
    assert!(ppm_bytes(&Tensor::new(vec![2, 2, 1], vec![0.0; 4]).unwrap()).is_err());
}
