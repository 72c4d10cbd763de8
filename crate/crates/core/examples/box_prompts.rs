//! Box prompts from masks, jitter as a prompt-quality knob, and the text
//! template a detector front end would consume.
//!
//! cargo run --example box_prompts -- [target]

use fusionseg::prompt::{point_from_mask, prompt_from_mask, render_text_prompt, tight_box};
use fusionseg::rng::Rng;
use fusionseg::synth::{generate_sample, SynthConfig};

fn main() -> fusionseg::Result<()> {
    let s = generate_sample(7, &SynthConfig::default())?;
    println!("tight box: {:?}", tight_box(&s.mask)?);
    let mut rng = Rng::new(0);
    for jitter in [0.0, 0.1, 0.4] {
        let b = prompt_from_mask(&s.mask, jitter, &mut rng)?;
        println!("jitter {jitter}: {b:?}");
    }
    println!("point prompt: {:?}", point_from_mask(&s.mask, &mut rng)?);

    let target = std::env::args().nth(1).unwrap_or_else(|| "thyroid nodule".into());
    println!("\n{}", render_text_prompt(&target));
    Ok(())
}
