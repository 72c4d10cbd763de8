//! Parameter-efficient adaptation: the frozen backbones, their trainable
//! adapters, and the identity property of fresh adapters.
//!
//! cargo run --release --example adapters

use fusionseg::autodiff::Tape;
use fusionseg::model::{Ablation, Model, ModelConfig};
use fusionseg::synth::{generate_sample, SynthConfig};

fn main() -> fusionseg::Result<()> {
    let model = Model::new(ModelConfig::default(), Ablation::ALL_ON, 1)?;
    let (trainable, frozen) = model.store.counts();
    println!(
        "{trainable} trainable / {frozen} frozen values ({:.1}% trainable)",
        100.0 * trainable as f64 / (trainable + frozen) as f64
    );
    for (_, p) in model.store.iter().filter(|(_, p)| p.trainable && p.name.starts_with("vit.")) {
        println!("  {:<24} {:?}", p.name, p.value.shape());
    }

    let s = generate_sample(0, &SynthConfig::default())?;
    let mut tape = Tape::new();
    let x = tape.constant(s.image);
    let adapted = model.vit.forward(&mut tape, &model.store, x)?;
    let plain = model.vit.forward_backbone_only(&mut tape, &model.store, x)?;
    println!(
        "fresh adapters change the ViT feature by {:.1e}",
        tape.value(adapted).max_abs_diff(tape.value(plain))
    );
    Ok(())
}
