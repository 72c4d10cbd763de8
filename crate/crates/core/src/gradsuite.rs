//! Finite-difference checks over every differentiable operation with
//! randomized shapes, and over the composite loss of the whole network.

use crate::autodiff::{
    finite_diff_check_store, finite_diff_check_with, Activation, GradCheckOptions,
    GradCheckReport, Tape, Tensor, Var,
};
use crate::encoders::{feature_adapter_apply, position_adapter};
use crate::error::Result;
use crate::fusion::{fuse, reparameterize, AttentionState, GaussianLatent, Mode};
use crate::losses::{attention_kl, bce_loss, dice_loss, gaussian_kl, Lambdas};
use crate::model::{Ablation, Model, ModelConfig};
use crate::prompt::prompt_from_mask;
use crate::rng::Rng;
use crate::synth::{generate_sample, SynthConfig};

/// Largest accepted relative error between tape and finite-difference
/// gradients.
pub const TOLERANCE: f64 = 1e-4;

/// Inputs of one randomized case: tensors to differentiate and a builder
/// of the scalar output.
type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    f: Builder,
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub seeds: usize,
    pub checked: usize,
    pub max_rel_error: f64,
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Entries at least 0.05 away from zero.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    randn(shape, rng).map(|x| if x >= 0.0 { x + 0.05 } else { x - 0.05 })
}

/// Distinct, well-separated values so max-pooling's argmax is stable under
/// tiny perturbations.
fn separated(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut ranks);
    let data = ranks.iter().map(|&r| r as f64 * 0.01 - 0.005 * n as f64).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Reduces `y` to a scalar with fixed random weights so no gradient is
/// trivially uniform.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(tape.shape(y), 1.0, &mut Rng::new(seed));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn case(op: &str, rng: &mut Rng) -> Case {
    let seed = rng.next_u64();
    let (m, n, k) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
    macro_rules! unary {
        ($input:expr, |$t:ident, $x:ident| $body:expr) => {
            Case {
                inputs: vec![$input],
                f: Box::new(move |$t: &mut Tape, v: &[Var]| {
                    let $x = v[0];
                    let y = $body;
                    project($t, y, seed)
                }),
            }
        };
    }
    macro_rules! binary {
        ($a:expr, $b:expr, |$t:ident, $x:ident, $y:ident| $body:expr) => {
            Case {
                inputs: vec![$a, $b],
                f: Box::new(move |$t: &mut Tape, v: &[Var]| {
                    let ($x, $y) = (v[0], v[1]);
                    let out = $body;
                    project($t, out, seed)
                }),
            }
        };
    }
    match op {
        "add" => binary!(randn(&[m, n], rng), randn(&[m, n], rng), |t, a, b| t.add(a, b)?),
        "sub" => binary!(randn(&[m, n], rng), randn(&[m, n], rng), |t, a, b| t.sub(a, b)?),
        "mul" => binary!(randn(&[m, n], rng), randn(&[m, n], rng), |t, a, b| t.mul(a, b)?),
        "div" => binary!(randn(&[m, n], rng), away_from_zero(&[m, n], rng).map(|x| x + x.signum()), |t, a, b| t.div(a, b)?),
        "add_bias" => binary!(randn(&[m, n], rng), randn(&[n], rng), |t, a, b| t.add_bias(a, b)?),
        "channel_bias" => binary!(randn(&[m, n, k], rng), randn(&[m], rng), |t, a, b| t.channel_bias(a, b)?),
        "scale" => {
            let c = rng.normal();
            unary!(randn(&[m, n], rng), |t, x| t.scale(x, c))
        }
        "add_scalar" => {
            let c = rng.normal();
            unary!(randn(&[m, n], rng), |t, x| t.add_scalar(x, c))
        }
        "scale_by" => binary!(randn(&[m, n], rng), randn(&[1], rng), |t, a, s| t.scale_by(a, s)?),
        "matmul" => binary!(randn(&[m, k], rng), randn(&[k, n], rng), |t, a, b| t.matmul(a, b)?),
        "transpose" => unary!(randn(&[m, n], rng), |t, x| t.transpose(x)?),
        "reshape" => unary!(randn(&[m, n], rng), |t, x| t.reshape(x, &[n * m])?),
        "conv2d" => {
            let (c, f) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let ks = dim(rng, 1, 3);
            let stride = dim(rng, 1, 2);
            let padding = rng.below(2);
            let (h, w) = (dim(rng, ks, 6), dim(rng, ks, 6));
            binary!(randn(&[c, h, w], rng), randn(&[f, c, ks, ks], rng), |t, x, kern| {
                t.conv2d(x, kern, stride, padding)?
            })
        }
        "maxpool2d" => {
            let win = dim(rng, 1, 3);
            let stride = dim(rng, 1, 3);
            let (h, w) = (dim(rng, win, 7), dim(rng, win, 7));
            unary!(separated(&[dim(rng, 1, 3), h, w], rng), |t, x| t.maxpool2d(x, win, stride)?)
        }
        "upsample2x" => unary!(randn(&[m, n, k], rng), |t, x| t.upsample2x(x)?),
        "gelu" => unary!(randn(&[m, n], rng).map(|x| 2.0 * x), |t, x| t.gelu(x)),
        "leaky_relu" => unary!(away_from_zero(&[m, n], rng), |t, x| t.activation(x, Activation::LeakyRelu(0.01))),
        "softplus" => unary!(randn(&[m, n], rng).map(|x| 3.0 * x), |t, x| t.activation(x, Activation::Softplus)),
        "sigmoid" => unary!(randn(&[m, n], rng).map(|x| 3.0 * x), |t, x| t.activation(x, Activation::Sigmoid)),
        "ln" => unary!(randn(&[m, n], rng).map(|x| x.abs() + 0.5), |t, x| t.ln(x)),
        "exp" => unary!(randn(&[m, n], rng), |t, x| t.exp(x)),
        "square" => unary!(randn(&[m, n], rng), |t, x| t.square(x)),
        "softmax" => {
            let axis = rng.below(3);
            unary!(randn(&[m, n, k], rng), |t, x| t.softmax(x, axis)?)
        }
        "layer_norm" => {
            let d = dim(rng, 2, 8);
            unary!(randn(&[m, d], rng), |t, x| t.layer_norm(x, 1e-5)?)
        }
        "sum" => unary!(randn(&[m, n], rng), |t, x| t.sum(x)),
        "mean" => unary!(randn(&[m, n], rng), |t, x| t.mean(x)),
        "mean_rows" => unary!(randn(&[m, n], rng), |t, x| t.mean_rows(x)?),
        "concat" => binary!(randn(&[m], rng), randn(&[n, k], rng), |t, a, b| t.concat(&[a, b])),
        "slice" => {
            let len = m * n;
            let start = rng.below(len);
            let take = 1 + rng.below(len - start);
            unary!(randn(&[len], rng), |t, x| t.slice(x, start, take)?)
        }
        "feature_adapter" => {
            let d = 4 * dim(rng, 1, 3);
            let rows = dim(rng, 1, 5);
            Case {
                inputs: vec![randn(&[rows, d], rng), randn(&[d, d / 4], rng), randn(&[d / 4, d], rng)],
                f: Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = feature_adapter_apply(t, v[0], v[1], v[2])?;
                    project(t, y, seed)
                }),
            }
        }
        "position_adapter" => {
            let d = dim(rng, 1, 3);
            let target = dim(rng, 1, 3);
            let factor = dim(rng, 1, 3);
            let g = target * factor;
            Case {
                inputs: vec![separated(&[g, g, d], rng), randn(&[d, d, 3, 3], rng)],
                f: Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = position_adapter(t, v[0], v[1], (target, target))?;
                    project(t, y, seed)
                }),
            }
        }
        "reparameterize" => {
            let eta = randn(&[n], rng);
            Case {
                inputs: vec![randn(&[n], rng), randn(&[n], rng).map(|x| x.abs() + 0.1)],
                f: Box::new(move |t: &mut Tape, v: &[Var]| {
                    let z = reparameterize(t, GaussianLatent { mu: v[0], sigma: v[1] }, &eta)?;
                    project(t, z, seed)
                }),
            }
        }
        "fuse" => {
            let kmods = dim(rng, 1, 3);
            let mut inputs: Vec<Tensor> = (0..kmods).map(|_| randn(&[n], rng)).collect();
            inputs.push(randn(&[kmods], rng));
            inputs.push(randn(&[n, n], rng));
            Case {
                inputs,
                f: Box::new(move |t: &mut Tape, v: &[Var]| {
                    let zs = &v[..kmods];
                    let logits = v[kmods];
                    let weights = t.softmax(logits, 0)?;
                    let att = AttentionState {
                        mu_a: Vec::new(),
                        sigma_a: Vec::new(),
                        logits,
                        weights,
                    };
                    let h = fuse(t, zs, &att, v[kmods + 1])?;
                    project(t, h, seed)
                }),
            }
        }
        "bce_loss" => binary!(randn(&[m, n], rng).map(|x| 3.0 * x), Tensor::uniform(&[m, n], 0.0, 1.0, rng), |t, l, y| bce_loss(t, l, y)?),
        "dice_loss" => binary!(randn(&[m, n], rng), Tensor::uniform(&[m, n], 0.0, 1.0, rng), |t, l, y| dice_loss(t, l, y)?),
        "gaussian_kl" => binary!(randn(&[n], rng), randn(&[n], rng).map(|x| x.abs() + 0.2), |t, mu, sigma| {
            gaussian_kl(t, &GaussianLatent { mu, sigma })?
        }),
        "attention_kl" => {
            let kmods = dim(rng, 1, 3);
            let mut inputs: Vec<Tensor> = (0..kmods).map(|_| randn(&[1], rng)).collect();
            inputs.extend((0..kmods).map(|_| randn(&[1], rng).map(|x| x.abs() + 0.2)));
            Case {
                inputs,
                f: Box::new(move |t: &mut Tape, v: &[Var]| {
                    let logits = t.concat(&v[..kmods]);
                    let weights = t.softmax(logits, 0)?;
                    let att = AttentionState {
                        mu_a: v[..kmods].to_vec(),
                        sigma_a: v[kmods..].to_vec(),
                        logits,
                        weights,
                    };
                    attention_kl(t, &att)
                }),
            }
        }
        other => unreachable!("unknown op {other}"),
    }
}

/// Every operation the suite covers.
pub const OPS: &[&str] = &[
    "add", "sub", "mul", "div", "add_bias", "channel_bias", "scale", "add_scalar", "scale_by",
    "matmul", "transpose", "reshape", "conv2d", "maxpool2d", "upsample2x", "gelu", "leaky_relu",
    "softplus", "sigmoid", "ln", "exp", "square", "softmax", "layer_norm", "sum", "mean",
    "mean_rows", "concat", "slice", "feature_adapter", "position_adapter", "reparameterize",
    "fuse", "bce_loss", "dice_loss", "gaussian_kl", "attention_kl",
];

/// Checks every op on `seeds` random instances each.
pub fn op_suite(seeds: u64) -> Result<Vec<OpReport>> {
    let opts = GradCheckOptions::default();
    OPS.iter()
        .map(|&op| {
            let mut worst: f64 = 0.0;
            let mut checked = 0;
            for seed in 0..seeds {
                let mut rng = Rng::derived(seed, &[op.len() as u64, op.as_bytes()[0] as u64]);
                let c = case(op, &mut rng);
                let r = finite_diff_check_with(&c.f, &c.inputs, &opts)?;
                worst = worst.max(r.max_rel_error());
                checked += r.checked();
            }
            Ok(OpReport {
                op,
                seeds: seeds as usize,
                checked,
                max_rel_error: worst,
            })
        })
        .collect()
}

/// Gradient check of the mean composite loss over a two-sample batch
/// through the complete network in train mode, with every random draw
/// pinned. At most `max_entries` entries per trainable tensor are
/// perturbed.
pub fn pipeline_check(ablation: Ablation, max_entries: Option<usize>) -> Result<GradCheckReport> {
    let model = Model::new(ModelConfig::default(), ablation, 11)?;
    let synth = SynthConfig::default();
    let samples = [generate_sample(101, &synth)?, generate_sample(202, &synth)?];
    let mut prepared = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let prompt = prompt_from_mask(&s.mask, 0.1, &mut Rng::new(i as u64))?;
        prepared.push((s, prompt, model.cnn_features(&s.image)?));
    }
    let lambdas = Lambdas::default();
    let f = |tape: &mut Tape, store: &crate::autodiff::ParamStore| -> Result<Var> {
        let m = Model {
            store: store.clone(),
            ..model.clone()
        };
        let mut total: Option<Var> = None;
        for (i, (s, prompt, feats)) in prepared.iter().enumerate() {
            let mut rng = Rng::derived(5, &[i as u64]);
            let pass = m.forward(tape, &s.image, feats.as_ref(), prompt, Mode::Train, &mut rng)?;
            let (loss, _) = m.loss(tape, &pass, &s.mask, &lambdas)?;
            let loss = tape.scale(loss, 0.5);
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
        }
        Ok(total.expect("two samples"))
    };
    // The loss sums thousands of pixel terms, so summation roundoff
    // swamps a 1e-5 step; a larger step keeps truncation error smaller.
    let opts = GradCheckOptions {
        eps: 1e-4,
        max_entries,
        seed: 3,
        ..Default::default()
    };
    finite_diff_check_store(f, &model.store, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_a_few_seeds() {
        for r in op_suite(3).unwrap() {
            assert!(r.max_rel_error < TOLERANCE, "{r:?}");
            assert!(r.checked > 0, "{r:?}");
        }
    }
}
