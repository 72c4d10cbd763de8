//! Generates ultrasound-like samples and writes a small dataset to disk.
//!
//! cargo run --example synthetic_data -- [out_dir]

use fusionseg::synth::{generate_sample, make_split, Dataset, SynthConfig};

fn main() -> fusionseg::Result<()> {
    let cfg = SynthConfig::default();
    for seed in 0..5 {
        let s = generate_sample(seed, &cfg)?;
        let area = s.mask.sum() / s.mask.len() as f64;
        let mean = s.image.sum() / s.image.len() as f64;
        println!("seed {seed}: target covers {:.1}% of the frame, mean intensity {mean:.3}", 100.0 * area);
    }

    // Noise off and full contrast: the image is exactly two levels.
    let clean = SynthConfig {
        speckle_strength: 0.0,
        shadow_prob: 0.0,
        contrast: 1.0,
        ..cfg
    };
    let s = generate_sample(0, &clean)?;
    let mut levels: Vec<f64> = s.image.data().to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    println!("clean sample intensity levels: {levels:?}");

    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic_out".into());
    let ds = Dataset::generate(cfg, make_split(20, (0.7, 0.1, 0.2), 42)?)?;
    let manifest = ds.write_dir(out.as_ref())?;
    println!("wrote {} samples (PGM + manifest.json) to {out}", manifest.samples.len());
    Ok(())
}
