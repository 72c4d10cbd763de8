//! Trains every combination of the three component toggles and prints the
//! comparison table.
//!
//! cargo run --release --example ablation_grid -- [epochs] [n_train]

use fusionseg::train::{ablate, ablation_csv, TrainConfig};

fn main() -> fusionseg::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut cfg = TrainConfig::default();
    cfg.epochs = args.first().copied().unwrap_or(3);
    cfg.data.n_train = args.get(1).copied().unwrap_or(64);
    cfg.data.n_val = 16;
    cfg.data.n_test = 32;
    let ds = cfg.data.generate()?;
    let rows = ablate(&cfg, &ds, |a, log| {
        eprintln!("{a:?} epoch {} val dice {:.3}", log.epoch, log.val_dice);
    })?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
