//! Dice and Hausdorff distance on a pair of shifted ellipses.
//!
//! cargo run --example segmentation_metrics

use fusionseg::metrics::{boundary, dice_score, hausdorff_distance};
use fusionseg::synth::Ellipse;

fn main() -> fusionseg::Result<()> {
    let truth = Ellipse { cx: 32.0, cy: 32.0, a: 14.0, b: 9.0, theta: 0.3 };
    let t = truth.rasterize(64, 64);
    for shift in [0.0, 1.0, 3.0, 6.0] {
        let p = Ellipse { cx: truth.cx + shift, ..truth }.rasterize(64, 64);
        println!(
            "shift {shift:>3} px: dice {:.3}  HD {:.3} px",
            dice_score(&p, &t)?,
            hausdorff_distance(&p, &t)?
        );
    }
    let edge = boundary(&t).iter().filter(|&&b| b).count();
    println!("ground truth: {} pixels, {edge} on the boundary", t.sum());

    // Distance is undefined when a mask is empty.
    let empty = fusionseg::autodiff::Tensor::zeros(&[64, 64]);
    println!("empty prediction: dice {:.3}, HD {:?}", dice_score(&empty, &t)?, hausdorff_distance(&empty, &t).err());
    Ok(())
}
