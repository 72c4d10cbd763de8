//! Segmentation losses and the Gaussian regularizers of the training
//! objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{AttentionState, GaussianLatent};

pub const DICE_SMOOTH: f64 = 1.0;

/// Mean over pixels of `softplus(l) − t·l`, the stable form of
/// `−[t·log σ(l) + (1−t)·log(1−σ(l))]`.
pub fn bce_loss(tape: &mut Tape, logits: Var, target: Var) -> Result<Var> {
    if tape.shape(logits) != tape.shape(target) {
        return Err(Error::dim("bce_loss", tape.shape(logits), tape.shape(target)));
    }
    let sp = tape.activation(logits, Activation::Softplus);
    let tl = tape.mul(target, logits)?;
    let per_pixel = tape.sub(sp, tl)?;
    Ok(tape.mean(per_pixel))
}

/// `1 − (2·Σpt + ε)/(Σp + Σt + ε)` with `p = σ(logits)`, `ε = 1`.
pub fn dice_loss(tape: &mut Tape, logits: Var, target: Var) -> Result<Var> {
    dice_loss_with(tape, logits, target, DICE_SMOOTH)
}

pub fn dice_loss_with(tape: &mut Tape, logits: Var, target: Var, smooth: f64) -> Result<Var> {
    if tape.shape(logits) != tape.shape(target) {
        return Err(Error::dim("dice_loss", tape.shape(logits), tape.shape(target)));
    }
    let p = tape.activation(logits, Activation::Sigmoid);
    let pt = tape.mul(p, target)?;
    let inter = tape.sum(pt);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, smooth);
    let sp = tape.sum(p);
    let st = tape.sum(target);
    let den = tape.add(sp, st)?;
    let den = tape.add_scalar(den, smooth);
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Sum over entries of `−½(1 + log σ² − μ² − σ²)`: the KL divergence of
/// `N(μ, σ²)` from `N(0, 1)`, per dimension, summed.
pub fn gaussian_kl_terms(tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
    if tape.shape(mu) != tape.shape(sigma) {
        return Err(Error::dim("gaussian_kl", tape.shape(mu), tape.shape(sigma)));
    }
    if let Some(bad) = tape.value(sigma).data().iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::contract(format!("sigma must be positive, got {bad}")));
    }
    let log_sigma = tape.ln(sigma);
    let log_var = tape.scale(log_sigma, 2.0);
    let mu2 = tape.square(mu);
    let var = tape.square(sigma);
    let inner = tape.add_scalar(log_var, 1.0);
    let inner = tape.sub(inner, mu2)?;
    let inner = tape.sub(inner, var)?;
    let total = tape.sum(inner);
    Ok(tape.scale(total, -0.5))
}

pub fn gaussian_kl(tape: &mut Tape, g: &GaussianLatent) -> Result<Var> {
    gaussian_kl_terms(tape, g.mu, g.sigma)
}

/// KL of every modality's attention-logit Gaussian from `N(0, 1)`, summed.
pub fn attention_kl(tape: &mut Tape, att: &AttentionState) -> Result<Var> {
    if att.sigma_a.is_empty() || att.sigma_a.len() != att.mu_a.len() {
        return Err(Error::contract(
            "attention KL needs a scale for every modality logit",
        ));
    }
    let mu = tape.concat(&att.mu_a);
    let sigma = tape.concat(&att.sigma_a);
    gaussian_kl_terms(tape, mu, sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lambdas {
    pub c: f64,
    pub v: f64,
    pub a: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            c: 0.01,
            v: 0.01,
            a: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub kl_c: f64,
    pub kl_v: f64,
    pub kl_a: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombines the parts with the same operation order as
    /// [`total_loss`].
    pub fn recombine(&self, l: &Lambdas) -> f64 {
        self.bce + self.dice + l.c * self.kl_c + l.v * self.kl_v + l.a * self.kl_a
    }

    pub fn scaled(&self, s: f64) -> Self {
        LossBreakdown {
            bce: self.bce * s,
            dice: self.dice * s,
            kl_c: self.kl_c * s,
            kl_v: self.kl_v * s,
            kl_a: self.kl_a * s,
            total: self.total * s,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        LossBreakdown {
            bce: self.bce + o.bce,
            dice: self.dice + o.dice,
            kl_c: self.kl_c + o.kl_c,
            kl_v: self.kl_v + o.kl_v,
            kl_a: self.kl_a + o.kl_a,
            total: self.total + o.total,
        }
    }
}

/// Inputs to the regularizers. Absent parts contribute zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct Regularized<'a> {
    pub g_v: Option<&'a GaussianLatent>,
    pub g_c: Option<&'a GaussianLatent>,
    pub attention: Option<&'a AttentionState>,
}

/// `L = L_BCE + L_D + λ_c·L_c + λ_v·L_v + λ_a·L_a`, as a tape scalar plus
/// its parts.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    target: Var,
    parts: Regularized<'_>,
    lambdas: &Lambdas,
) -> Result<(Var, LossBreakdown)> {
    let bce = bce_loss(tape, logits, target)?;
    let dice = dice_loss(tape, logits, target)?;
    let mut total = tape.add(bce, dice)?;
    let mut out = LossBreakdown {
        bce: tape.value(bce).item(),
        dice: tape.value(dice).item(),
        ..Default::default()
    };

    let kl_c = parts.g_c.map(|g| gaussian_kl(tape, g)).transpose()?;
    let kl_v = parts.g_v.map(|g| gaussian_kl(tape, g)).transpose()?;
    let kl_a = match parts.attention {
        Some(att) if !att.sigma_a.is_empty() => Some(attention_kl(tape, att)?),
        _ => None,
    };
    for (kl, lambda, slot) in [
        (kl_c, lambdas.c, &mut out.kl_c),
        (kl_v, lambdas.v, &mut out.kl_v),
        (kl_a, lambdas.a, &mut out.kl_a),
    ] {
        let value = kl.map(|v| tape.value(v).item()).unwrap_or(0.0);
        *slot = value;
        let term = match kl {
            Some(v) => tape.scale(v, lambda),
            None => tape.constant(crate::autodiff::Tensor::scalar(0.0)),
        };
        total = tape.add(total, term)?;
    }
    out.total = tape.value(total).item();
    Ok((total, out))
}
