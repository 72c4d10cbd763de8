//! Trains the full model on generated data and reports test metrics.
//!
//! cargo run --release --example train_synthetic -- [epochs] [n_train]

use std::time::Instant;

use fusionseg::synth::SplitName;
use fusionseg::train::{evaluate, train_with, TrainConfig};

fn main() -> fusionseg::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut cfg = TrainConfig::default();
    if let Some(&e) = args.first() {
        cfg.epochs = e;
    }
    if let Some(&n) = args.get(1) {
        cfg.data.n_train = n;
    }
    let ds = cfg.data.generate()?;
    let start = Instant::now();
    let out = train_with(&cfg, &ds, |log| {
        println!(
            "epoch {:>3}  lr {:.1e}  loss {:.4} (bce {:.4} dice {:.4})  val dice {:.4}  [{:.0}s]",
            log.epoch,
            log.lr,
            log.loss.total,
            log.loss.bce,
            log.loss.dice,
            log.val_dice,
            start.elapsed().as_secs_f64()
        );
    })?;
    let test = evaluate(&out.checkpoint, &ds, SplitName::Test)?;
    println!(
        "best epoch {}  test dice {:.2}%  mean HD {:?} px  ({} missing)",
        out.checkpoint.meta.epoch,
        100.0 * test.mean_dice,
        test.mean_hd,
        test.hd_missing
    );
    Ok(())
}
