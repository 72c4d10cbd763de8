//! Builds a small expression on a tape, backpropagates, and checks the
//! result against central differences.
//!
//! cargo run --example autodiff_basics

use fusionseg::autodiff::{finite_diff_check, Tape, Tensor};
use fusionseg::rng::Rng;

fn main() -> fusionseg::Result<()> {
    let mut rng = Rng::new(1);
    let w = Tensor::randn(&[3, 2], 1.0, &mut rng);
    let x = Tensor::randn(&[4, 3], 1.0, &mut rng);

    // loss = mean(gelu(x·w)²)
    let f = |tape: &mut Tape, v: &[fusionseg::autodiff::Var]| {
        let y = tape.matmul(v[1], v[0])?;
        let y = tape.gelu(y);
        let y = tape.square(y);
        Ok(tape.mean(y))
    };

    let mut tape = Tape::new();
    let wv = tape.leaf(w.clone(), true);
    let xv = tape.constant(x.clone());
    let loss = f(&mut tape, &[wv, xv])?;
    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).item());
    println!("dloss/dw = {:?}", grads.wrt(wv).map(|g| g.data().to_vec()));
    println!("x is a constant, so it has no gradient: {}", grads.wrt(xv).is_none());

    let report = finite_diff_check(f, &[w, x], 1e-5)?;
    println!("finite differences agree to {:.2e}", report.max_rel_error());
    Ok(())
}
