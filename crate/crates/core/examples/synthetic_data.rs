//! Generates a labeled shape dataset, round-trips it through the binary
//! format and writes the first few images as PPM files.

use crossmae::data::{gen_synthetic, write_ppm, Dataset, CLASS_NAMES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("crossmae-synthetic");
    std::fs::create_dir_all(&out)?;
    let ds = gen_synthetic(1000, 32, 32, 3, 7, true);
    let path = out.join("shapes.cmae");
    ds.save(&path)?;
    let back = Dataset::load(&path)?;
    assert_eq!(back.digest(), ds.digest());
    println!("{} images, sha256 {}", back.len(), back.digest());

    let mut counts = [0usize; 4];
    for &l in back.labels.as_deref().unwrap_or_default() {
        counts[l as usize] += 1;
    }
    for (name, c) in CLASS_NAMES.iter().zip(counts) {
        println!("{name:>13}: {c}");
    }
    for i in 0..8 {
        let img = back.batch::<f64>(&[i]).reshaped(&[32, 32, 3])?;
        write_ppm(&img, &out.join(format!("{i}_{}.ppm", CLASS_NAMES[back.label(i).unwrap_or(0) as usize])))?;
    }
    println!("wrote samples to {}", out.display());
    Ok(())
}
