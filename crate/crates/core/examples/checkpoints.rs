//! Short training run, checkpoint round trip, and evaluation under tight
//! and loose box prompts.
//!
//! cargo run --release --example checkpoints

use fusionseg::checkpoint::{load_checkpoint, save_checkpoint};
use fusionseg::synth::SplitName;
use fusionseg::train::{evaluate_with_jitter, train, TrainConfig};

fn main() -> fusionseg::Result<()> {
    let mut cfg = TrainConfig::default();
    cfg.epochs = 4;
    cfg.data.n_train = 96;
    cfg.data.n_val = 16;
    cfg.data.n_test = 32;
    let ds = cfg.data.generate()?;
    let out = train(&cfg, &ds)?;

    let path = std::env::temp_dir().join("fusionseg_example.ckpt");
    save_checkpoint(&out.checkpoint, &path)?;
    let back = load_checkpoint(&path)?;
    println!(
        "saved {} tensors to {}; reload is bit-identical: {}",
        back.tensors.len(),
        path.display(),
        back.bit_eq(&out.checkpoint)
    );

    for jitter in [0.0, 0.2, 0.4] {
        let r = evaluate_with_jitter(&back, &ds, SplitName::Test, jitter)?;
        println!("test dice at jitter {jitter}: {:.2}%", 100.0 * r.mean_dice);
    }
    Ok(())
}
