//! Finite-difference verification of the autodiff engine: every op on 100
//! random instances, then the whole network on a two-sample batch.
//!
//! cargo run --release --example gradient_check

use std::time::Instant;

use fusionseg::gradsuite::{op_suite, pipeline_check};
use fusionseg::model::Ablation;

fn main() -> fusionseg::Result<()> {
    let t = Instant::now();
    for r in op_suite(100)? {
        println!(
            "{:<18} {:>6} entries  max rel err {:.2e}",
            r.op, r.checked, r.max_rel_error
        );
    }
    println!("op suite: {:.1}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let ablation = match std::env::args().nth(1).as_deref() {
        Some("off") => Ablation::ALL_OFF,
        _ => Ablation::ALL_ON,
    };
    let report = pipeline_check(ablation, Some(8))?;
    for p in &report.params {
        println!("{:<32} {:>3} entries  max rel err {:.2e}", p.name, p.checked, p.max_rel_error);
    }
    println!(
        "pipeline: {} entries, max rel err {:.2e}, {:.1}s",
        report.checked(),
        report.max_rel_error(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
