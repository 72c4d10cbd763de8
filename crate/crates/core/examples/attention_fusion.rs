//! Uncertainty-aware fusion of two branch features: Gaussian latents,
//! sampled attention logits and the KL regularizers.
//!
//! cargo run --example attention_fusion

use fusionseg::autodiff::{ParamStore, Tape, Tensor};
use fusionseg::fusion::{fusion_forward, FusionParams, Modality, Mode};
use fusionseg::losses::{attention_kl, gaussian_kl};
use fusionseg::rng::Rng;

fn main() -> fusionseg::Result<()> {
    let (d_in, d_h) = (32, 16);
    let mut store = ParamStore::new();
    let mut rng = Rng::new(3);
    let params = FusionParams::new(
        &mut store,
        &[(Modality::Vit, d_in), (Modality::Cnn, d_in)],
        d_h,
        true,
        &mut rng,
    );

    let s_v = Tensor::randn(&[d_in], 1.0, &mut rng);
    let s_c = Tensor::randn(&[d_in], 1.0, &mut rng);
    for mode in [Mode::Eval, Mode::Train, Mode::Train] {
        let mut tape = Tape::new();
        let feats = [
            (Modality::Vit, tape.constant(s_v.clone())),
            (Modality::Cnn, tape.constant(s_c.clone())),
        ];
        let out = fusion_forward(&mut tape, &store, &params, &feats, mode, &mut rng)?;
        let w = tape.value(out.attention.weights).data().to_vec();
        let kl: f64 = out
            .latents
            .iter()
            .map(|(_, g)| gaussian_kl(&mut tape, g).map(|k| tape.value(k).item()))
            .sum::<fusionseg::Result<f64>>()?;
        let kl_a = attention_kl(&mut tape, &out.attention)?;
        println!(
            "{mode:?}: weights (vit {:.3}, cnn {:.3})  latent KL {kl:.3}  attention KL {:.3}  |h| {:.3}",
            w[0],
            w[1],
            tape.value(kl_a).item(),
            tape.value(out.h).data().iter().map(|x| x * x).sum::<f64>().sqrt()
        );
    }
    Ok(())
}
