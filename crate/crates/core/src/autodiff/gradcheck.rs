//! Central-difference verification of reverse-mode gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
    /// Check at most this many entries per tensor, picked at random.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `f` at `params` with central differences
/// using step `eps`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(
        f,
        params,
        &GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
}

pub fn finite_diff_check_with<F>(
    f: F,
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let base = scalar_of(&tape, loss)?;
    let grads = tape.backward(loss)?;
    drop(tape);
    ensure_deterministic(base, eval(params)?)?;

    let mut rng = Rng::new(opts.seed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport::default();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        let entries = pick_entries(params[pi].len(), opts.max_entries, &mut rng);
        let mut worst: f64 = 0.0;
        for &e in &entries {
            let numeric = central_difference(&mut work, pi, e, opts.eps, &eval)?;
            worst = worst.max(relative_error(analytic.data()[e], numeric, opts.floor));
        }
        report.params.push(ParamReport {
            name: format!("param{pi}"),
            checked: entries.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// Gradient check over the trainable tensors of a [`ParamStore`]. `f`
/// builds the loss from scratch on the given tape, reading parameters from
/// the given store.
pub fn finite_diff_check_store<F>(
    f: F,
    store: &ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        scalar_of(&tape, out)
    };
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base = scalar_of(&tape, loss)?;
    let grads = tape.backward(loss)?;
    drop(tape);
    ensure_deterministic(base, eval(store)?)?;

    let mut rng = Rng::new(opts.seed);
    let mut work = store.clone();
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    let mut report = GradCheckReport::default();
    for id in ids {
        let n = store.value(id).len();
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let entries = pick_entries(n, opts.max_entries, &mut rng);
        let mut worst: f64 = 0.0;
        for &e in &entries {
            let orig = work.value(id).data()[e];
            work.value_mut(id).data_mut()[e] = orig + opts.eps;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[e] = orig - opts.eps;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            worst = worst.max(relative_error(analytic.data()[e], numeric, opts.floor));
        }
        report.params.push(ParamReport {
            name: store.get(id).name.clone(),
            checked: entries.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

fn central_difference(
    work: &mut [Tensor],
    pi: usize,
    e: usize,
    eps: f64,
    eval: &impl Fn(&[Tensor]) -> Result<f64>,
) -> Result<f64> {
    let orig = work[pi].data()[e];
    work[pi].data_mut()[e] = orig + eps;
    let up = eval(work)?;
    work[pi].data_mut()[e] = orig - eps;
    let down = eval(work)?;
    work[pi].data_mut()[e] = orig;
    Ok((up - down) / (2.0 * eps))
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

fn ensure_deterministic(first: f64, second: f64) -> Result<()> {
    if first.to_bits() != second.to_bits() {
        return Err(Error::contract(format!(
            "function is not deterministic: {first} then {second}"
        )));
    }
    Ok(())
}

fn pick_entries(n: usize, max: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    match max {
        Some(m) if m < n => {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            idx.truncate(m);
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}
