//! Uncertainty-aware latents and variational attention fusion.
//!
//! Each branch feature is encoded to a shared latent width, mapped to a
//! diagonal Gaussian, and sampled with injected noise. A shared affine map
//! scores each modality; in the variational form that score is itself a
//! sampled Gaussian. Softmax over modalities gives the weights that mix
//! the modality latents through one shared output matrix.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Added to every softplus scale so it stays strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-6;
pub const DROPOUT_P: f64 = 0.5;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Vit,
    Cnn,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Vit => "v",
            Modality::Cnn => "c",
        }
    }
}

/// Diagonal Gaussian over the latent space; both fields live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GaussianLatent {
    pub mu: Var,
    pub sigma: Var,
}

/// Per-modality attention logit distribution and the realized weights, in
/// modality order.
#[derive(Clone, Debug)]
pub struct AttentionState {
    pub mu_a: Vec<Var>,
    /// Empty for point-estimate attention.
    pub sigma_a: Vec<Var>,
    pub logits: Var,
    pub weights: Var,
}

#[derive(Clone, Debug)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

impl Affine {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        Affine {
            w: store.trainable(format!("{name}.weight"), Tensor::randn(&[d_in, d_out], std, rng)),
            b: store.trainable(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Affine {
            w: store.trainable(format!("{name}.weight"), Tensor::zeros(&[d_in, d_out])),
            b: store.trainable(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        linear(tape, x, w, Some(b))
    }
}

/// `x[d_in]·w[d_in, d_out] + b[d_out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let d_in = tape.value(x).len();
    let ws = tape.shape(w);
    if ws.len() != 2 || ws[0] != d_in {
        return Err(Error::dim("linear", tape.shape(x), ws));
    }
    let d_out = ws[1];
    let row = tape.reshape(x, &[1, d_in])?;
    let y = tape.matmul(row, w)?;
    let y = tape.reshape(y, &[d_out])?;
    match b {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

#[derive(Clone, Debug)]
struct ModalityParams {
    enc1: Affine,
    enc2: Affine,
    mu_head: Affine,
    sigma_head: Affine,
}

/// All trainable fusion weights.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub d_h: usize,
    modalities: Vec<(Modality, usize, ModalityParams)>,
    att_mu: Affine,
    att_sigma: Option<Affine>,
    pub w_h: ParamId,
}

impl FusionParams {
    /// `inputs` lists each present modality with its branch width. Without
    /// `variational`, no attention scale head is created.
    pub fn new(
        store: &mut ParamStore,
        inputs: &[(Modality, usize)],
        d_h: usize,
        variational: bool,
        rng: &mut Rng,
    ) -> Self {
        let modalities = inputs
            .iter()
            .map(|&(m, d_in)| {
                let t = m.tag();
                let p = ModalityParams {
                    enc1: Affine::new(store, &format!("fusion.enc_{t}.fc1"), d_in, d_h, rng),
                    enc2: Affine::new(store, &format!("fusion.enc_{t}.fc2"), d_h, d_h, rng),
                    mu_head: Affine::new(store, &format!("fusion.mu_{t}"), d_h, d_h, rng),
                    sigma_head: Affine::zeroed(store, &format!("fusion.sigma_{t}"), d_h, d_h),
                };
                (m, d_in, p)
            })
            .collect();
        let att_mu = Affine::new(store, "fusion.att_mu", d_h, 1, rng);
        let att_sigma =
            variational.then(|| Affine::zeroed(store, "fusion.att_sigma", d_h, 1));
        let w_h = store.trainable("fusion.w_h", Tensor::identity(d_h));
        FusionParams {
            d_h,
            modalities,
            att_mu,
            att_sigma,
            w_h,
        }
    }

    pub fn modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        self.modalities.iter().map(|(m, _, _)| *m)
    }

    pub fn is_variational(&self) -> bool {
        self.att_sigma.is_some()
    }

    fn of(&self, which: Modality) -> Result<(usize, &ModalityParams)> {
        self.modalities
            .iter()
            .find(|(m, _, _)| *m == which)
            .map(|(_, d, p)| (*d, p))
            .ok_or_else(|| Error::contract(format!("modality {which:?} is not configured")))
    }

    /// Ids of the mean/scale head weights for `which`, as
    /// `(mu_w, mu_b, sigma_w, sigma_b)`.
    pub fn head_ids(&self, which: Modality) -> Result<[ParamId; 4]> {
        let (_, p) = self.of(which)?;
        Ok([p.mu_head.w, p.mu_head.b, p.sigma_head.w, p.sigma_head.b])
    }

    /// Ids of the attention maps `(W_m, b_m, W_s, b_s)`.
    pub fn attention_ids(&self) -> (ParamId, ParamId, Option<(ParamId, ParamId)>) {
        (
            self.att_mu.w,
            self.att_mu.b,
            self.att_sigma.as_ref().map(|a| (a.w, a.b)),
        )
    }
}

/// Branch feature → latent: fc → leaky-relu → dropout (train only) → fc.
pub fn latent_encode(
    tape: &mut Tape,
    store: &ParamStore,
    params: &FusionParams,
    s: Var,
    which: Modality,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let (d_in, p) = params.of(which)?;
    if tape.shape(s) != [d_in] {
        return Err(Error::dim("latent_encode", tape.shape(s), &[d_in]));
    }
    let h = p.enc1.apply(tape, store, s)?;
    let h = tape.activation(h, Activation::LeakyRelu(LEAKY_SLOPE));
    let h = match mode {
        Mode::Eval => h,
        Mode::Train => {
            let keep = 1.0 / (1.0 - DROPOUT_P);
            let mask: Vec<f64> = (0..params.d_h)
                .map(|_| if rng.bernoulli(DROPOUT_P) { 0.0 } else { keep })
                .collect();
            let mask = tape.constant(Tensor::vector(mask));
            tape.mul(h, mask)?
        }
    };
    p.enc2.apply(tape, store, h)
}

/// Latent → `(μ, softplus(·) + floor)`.
pub fn gaussian_head(
    tape: &mut Tape,
    store: &ParamStore,
    params: &FusionParams,
    latent: Var,
    which: Modality,
) -> Result<GaussianLatent> {
    let (_, p) = params.of(which)?;
    let mu = p.mu_head.apply(tape, store, latent)?;
    let raw = p.sigma_head.apply(tape, store, latent)?;
    let sp = tape.activation(raw, Activation::Softplus);
    let sigma = tape.add_scalar(sp, SIGMA_FLOOR);
    Ok(GaussianLatent { mu, sigma })
}

/// `z = μ + η ⊙ σ` with externally drawn `η`.
pub fn reparameterize(tape: &mut Tape, g: GaussianLatent, eta: &Tensor) -> Result<Var> {
    if tape.shape(g.mu) != eta.shape() || tape.shape(g.sigma) != eta.shape() {
        return Err(Error::dim("reparameterize", tape.shape(g.mu), eta.shape()));
    }
    let e = tape.constant(eta.clone());
    let noise = tape.mul(e, g.sigma)?;
    tape.add(g.mu, noise)
}

/// Attention logit Gaussian for one modality latent: `μ_a = W_m·z + b_m`,
/// `σ_a = softplus(W_s·z + b_s) + floor`. `σ_a` is `None` for
/// point-estimate attention.
pub fn attention_distribution(
    tape: &mut Tape,
    store: &ParamStore,
    params: &FusionParams,
    z: Var,
) -> Result<(Var, Option<Var>)> {
    let mu = params.att_mu.apply(tape, store, z)?;
    let sigma = match &params.att_sigma {
        Some(head) => {
            let raw = head.apply(tape, store, z)?;
            let sp = tape.activation(raw, Activation::Softplus);
            Some(tape.add_scalar(sp, SIGMA_FLOOR))
        }
        None => None,
    };
    Ok((mu, sigma))
}

/// Scores every modality latent and softmax-normalizes. In train mode with
/// a variational head, logit `k` is `μ_a^k + η_a^k·σ_a^k`; otherwise it is
/// `μ_a^k`.
pub fn variational_attention(
    tape: &mut Tape,
    store: &ParamStore,
    params: &FusionParams,
    zs: &[Var],
    eta_a: &[f64],
    mode: Mode,
) -> Result<AttentionState> {
    if zs.is_empty() {
        return Err(Error::contract("attention needs at least one modality"));
    }
    let mut mu_a = Vec::with_capacity(zs.len());
    let mut sigma_a = Vec::with_capacity(zs.len());
    let mut logits = Vec::with_capacity(zs.len());
    for (k, &z) in zs.iter().enumerate() {
        let (mu, sigma) = attention_distribution(tape, store, params, z)?;
        mu_a.push(mu);
        let logit = match (sigma, mode) {
            (Some(s), Mode::Train) => {
                let eta = *eta_a.get(k).ok_or_else(|| {
                    Error::contract(format!("missing attention noise for modality {k}"))
                })?;
                let e = tape.constant(Tensor::scalar(eta));
                let noise = tape.mul(e, s)?;
                tape.add(mu, noise)?
            }
            _ => mu,
        };
        if let Some(s) = sigma {
            sigma_a.push(s);
        }
        logits.push(logit);
    }
    let logits = tape.concat(&logits);
    let weights = tape.softmax(logits, 0)?;
    Ok(AttentionState {
        mu_a,
        sigma_a,
        logits,
        weights,
    })
}

/// `h = Σ_k a^k · (z^k · W_h)`.
pub fn fuse(tape: &mut Tape, zs: &[Var], att: &AttentionState, w_h: Var) -> Result<Var> {
    let k = tape.value(att.weights).len();
    if k != zs.len() {
        return Err(Error::dim("fuse", &[zs.len()], &[k]));
    }
    let mut h: Option<Var> = None;
    for (i, &z) in zs.iter().enumerate() {
        let proj = linear(tape, z, w_h, None)?;
        let a = tape.slice(att.weights, i, 1)?;
        let term = tape.scale_by(proj, a)?;
        h = Some(match h {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(h.expect("at least one modality"))
}

/// Full fusion path for one sample: encode, Gaussian heads, sample,
/// attend, fuse.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub latents: Vec<(Modality, GaussianLatent)>,
    pub zs: Vec<Var>,
    pub attention: AttentionState,
    pub h: Var,
}

pub fn fusion_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &FusionParams,
    features: &[(Modality, Var)],
    mode: Mode,
    rng: &mut Rng,
) -> Result<FusionOutput> {
    let mut latents = Vec::with_capacity(features.len());
    let mut zs = Vec::with_capacity(features.len());
    for &(which, s) in features {
        let latent = latent_encode(tape, store, params, s, which, mode, rng)?;
        let g = gaussian_head(tape, store, params, latent, which)?;
        let z = match mode {
            Mode::Train => {
                let eta = Tensor::vector(rng.normals(params.d_h));
                reparameterize(tape, g, &eta)?
            }
            Mode::Eval => g.mu,
        };
        latents.push((which, g));
        zs.push(z);
    }
    let eta_a = match mode {
        Mode::Train => rng.normals(zs.len()),
        Mode::Eval => Vec::new(),
    };
    let attention = variational_attention(tape, store, params, &zs, &eta_a, mode)?;
    let w_h = tape.param(store, params.w_h);
    let h = fuse(tape, &zs, &attention, w_h)?;
    Ok(FusionOutput {
        latents,
        zs,
        attention,
        h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BOTH: [(Modality, usize); 2] = [(Modality::Vit, 8), (Modality::Cnn, 8)];

    fn setup(d_h: usize, seed: u64) -> (ParamStore, FusionParams) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let p = FusionParams::new(&mut store, &BOTH, d_h, true, &mut rng);
        (store, p)
    }

    #[test]
    fn eval_encoding_is_deterministic() {
        let (store, p) = setup(8, 1);
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::randn(&[8], 1.0, &mut Rng::new(2)));
        let a = latent_encode(&mut tape, &store, &p, s, Modality::Vit, Mode::Eval, &mut Rng::new(3))
            .unwrap();
        let b = latent_encode(&mut tape, &store, &p, s, Modality::Vit, Mode::Eval, &mut Rng::new(4))
            .unwrap();
        assert!(tape.value(a).bit_eq(tape.value(b)));

        let bad = tape.constant(Tensor::zeros(&[5]));
        assert!(matches!(
            latent_encode(&mut tape, &store, &p, bad, Modality::Vit, Mode::Eval, &mut Rng::new(0)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn dropout_zeroes_about_half() {
        // 10⁴ units: width-100 layer, 100 draws.
        let mut store = ParamStore::new();
        let mut rng = Rng::new(9);
        let p = FusionParams::new(&mut store, &[(Modality::Vit, 4)], 100, true, &mut rng);
        let (_, mp) = p.of(Modality::Vit).unwrap();
        // Force the pre-dropout activation strictly positive.
        store.assign(&store.get(mp.enc1.w).name.clone(), Tensor::zeros(&[4, 100])).unwrap();
        store
            .assign(&store.get(mp.enc1.b).name.clone(), Tensor::ones(&[100]))
            .unwrap();
        store
            .assign(&store.get(mp.enc2.w).name.clone(), Tensor::identity(100))
            .unwrap();
        let mut zeros = 0;
        for _ in 0..100 {
            let mut tape = Tape::new();
            let s = tape.constant(Tensor::ones(&[4]));
            let out = latent_encode(&mut tape, &store, &p, s, Modality::Vit, Mode::Train, &mut rng)
                .unwrap();
            zeros += tape.value(out).data().iter().filter(|&&v| v == 0.0).count();
        }
        let frac = zeros as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.1, "dropped fraction {frac}");
    }

    #[test]
    fn zero_scale_head_gives_ln2_sigma() {
        let (store, p) = setup(8, 5);
        let mut rng = Rng::new(6);
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::randn(&[8], 3.0, &mut rng));
        let g = gaussian_head(&mut tape, &store, &p, l, Modality::Cnn).unwrap();
        for &s in tape.value(g.sigma).data() {
            assert!((s - (std::f64::consts::LN_2 + 1e-6)).abs() < 1e-15);
        }
    }

    #[test]
    fn sigma_positive_and_mu_unbounded() {
        let (mut store, p) = setup(8, 7);
        let [mu_w, _, sw, _] = p.head_ids(Modality::Vit).unwrap();
        let mut rng = Rng::new(8);
        store.assign("fusion.sigma_v.weight", Tensor::randn(&[8, 8], 5.0, &mut rng)).unwrap();
        for _ in 0..1000 {
            let mut tape = Tape::new();
            let l = tape.constant(Tensor::randn(&[8], 20.0, &mut rng));
            let g = gaussian_head(&mut tape, &store, &p, l, Modality::Vit).unwrap();
            assert!(tape.value(g.sigma).data().iter().all(|&s| s > 0.0));
        }
        assert_eq!(store.get(sw).name, "fusion.sigma_v.weight");

        store.assign(&store.get(mu_w).name.clone(), Tensor::ones(&[8, 8])).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::full(&[8], 1e6));
        let g = gaussian_head(&mut tape, &store, &p, l, Modality::Vit).unwrap();
        assert!(tape.value(g.mu).data().iter().all(|&m| m > 1e6));
    }

    #[test]
    fn reparameterize_cases_and_gradient_coefficients() {
        let mut tape = Tape::new();
        let mu = tape.leaf(Tensor::vector(vec![1.0, -2.0]), true);
        let sigma = tape.leaf(Tensor::vector(vec![0.5, 3.0]), true);
        let g = GaussianLatent { mu, sigma };
        let z = reparameterize(&mut tape, g, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(tape.value(z).data(), &[1.0, -2.0]);

        let eta = Tensor::vector(vec![0.3, -1.7]);
        let z = reparameterize(&mut tape, g, &eta).unwrap();
        let loss = tape.sum(z);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(mu).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.wrt(sigma).unwrap().data(), eta.data());

        let mut tape = Tape::new();
        let g = GaussianLatent {
            mu: tape.constant(Tensor::zeros(&[3])),
            sigma: tape.constant(Tensor::ones(&[3])),
        };
        let e = Tensor::vector(vec![0.1, 2.0, -0.4]);
        let z = reparameterize(&mut tape, g, &e).unwrap();
        assert_eq!(tape.value(z), &e);
        assert!(reparameterize(&mut tape, g, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn attention_distribution_examples() {
        let (mut store, p) = setup(8, 10);
        store.assign("fusion.att_mu.weight", Tensor::zeros(&[8, 1])).unwrap();
        store.assign("fusion.att_mu.bias", Tensor::scalar(3.0)).unwrap();
        let mut rng = Rng::new(11);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::randn(&[8], 1.0, &mut rng));
        let (mu, sigma) = attention_distribution(&mut tape, &store, &p, z).unwrap();
        assert_eq!(tape.value(mu).item(), 3.0);
        assert!(tape.value(sigma.unwrap()).item() > 0.0);

        // Independent affine + softplus evaluation.
        let (store, p) = setup(8, 12);
        let mut tape = Tape::new();
        let zt = Tensor::randn(&[8], 1.0, &mut rng);
        let mut st = store.clone();
        let ws = Tensor::randn(&[8, 1], 1.0, &mut rng);
        st.assign("fusion.att_sigma.weight", ws.clone()).unwrap();
        st.assign("fusion.att_sigma.bias", Tensor::scalar(-0.2)).unwrap();
        let z = tape.constant(zt.clone());
        let (mu, sigma) = attention_distribution(&mut tape, &st, &p, z).unwrap();
        let wm = store.value(store.id("fusion.att_mu.weight").unwrap()).data();
        let bm = store.value(store.id("fusion.att_mu.bias").unwrap()).item();
        let want_mu: f64 = zt.data().iter().zip(wm).map(|(a, b)| a * b).sum::<f64>() + bm;
        let pre: f64 = zt.data().iter().zip(ws.data()).map(|(a, b)| a * b).sum::<f64>() - 0.2;
        let want_sigma = (1.0 + pre.exp()).ln() + 1e-6;
        assert!((tape.value(mu).item() - want_mu).abs() < 1e-12);
        assert!((tape.value(sigma.unwrap()).item() - want_sigma).abs() < 1e-12);
    }

    #[test]
    fn attention_weights_symmetry_and_ln2_case() {
        let (store, p) = setup(8, 13);
        let mut rng = Rng::new(14);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::randn(&[8], 1.0, &mut rng));
        let att = variational_attention(&mut tape, &store, &p, &[z, z], &[0.4, 0.4], Mode::Train)
            .unwrap();
        assert_eq!(tape.value(att.weights).data(), &[0.5, 0.5]);

        // W_m = e₀, b_m = 0: μ_a^v = ln 2, μ_a^c = 0.
        let (mut store, p) = setup(8, 15);
        let mut tape = Tape::new();
        let mut w = Tensor::zeros(&[8, 1]);
        w.data_mut()[0] = 1.0;
        store.assign("fusion.att_mu.weight", w).unwrap();
        let mut zv = Tensor::zeros(&[8]);
        zv.data_mut()[0] = std::f64::consts::LN_2;
        let zv = tape.constant(zv);
        let zc = tape.constant(Tensor::zeros(&[8]));
        let att = variational_attention(&mut tape, &store, &p, &[zv, zc], &[], Mode::Eval).unwrap();
        let w = tape.value(att.weights).data().to_vec();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 1.0 / 3.0).abs() < 1e-12);
        let again =
            variational_attention(&mut tape, &store, &p, &[zv, zc], &[], Mode::Eval).unwrap();
        assert!(tape.value(again.weights).bit_eq(tape.value(att.weights)));
    }

    #[test]
    fn fuse_examples() {
        let mut rng = Rng::new(16);
        let mut tape = Tape::new();
        let zv_t = Tensor::randn(&[8], 1.0, &mut rng);
        let zc_t = Tensor::randn(&[8], 1.0, &mut rng);
        let zv = tape.constant(zv_t.clone());
        let zc = tape.constant(zc_t.clone());
        let eye = tape.constant(Tensor::identity(8));

        let state = |tape: &mut Tape, w: Vec<f64>| {
            let weights = tape.constant(Tensor::vector(w));
            AttentionState {
                mu_a: vec![],
                sigma_a: vec![],
                logits: weights,
                weights,
            }
        };
        let one_hot = state(&mut tape, vec![1.0, 0.0]);
        let h = fuse(&mut tape, &[zv, zc], &one_hot, eye).unwrap();
        assert!(tape.value(h).bit_eq(&zv_t));

        let half = state(&mut tape, vec![0.5, 0.5]);
        let h = fuse(&mut tape, &[zv, zc], &half, eye).unwrap();
        for i in 0..8 {
            let want = (zv_t.data()[i] + zc_t.data()[i]) / 2.0;
            assert!((tape.value(h).data()[i] - want).abs() < 1e-15);
        }

        let wh_t = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let wh = tape.constant(wh_t.clone());
        let mixed = state(&mut tape, vec![0.3, 0.7]);
        let h = fuse(&mut tape, &[zv, zc], &mixed, wh).unwrap();
        for j in 0..8 {
            let pv: f64 = (0..8).map(|i| zv_t.data()[i] * wh_t.data()[i * 8 + j]).sum();
            let pc: f64 = (0..8).map(|i| zc_t.data()[i] * wh_t.data()[i * 8 + j]).sum();
            assert!((tape.value(h).data()[j] - (0.3 * pv + 0.7 * pc)).abs() < 1e-12);
        }

        let bad = tape.constant(Tensor::identity(5));
        assert!(matches!(
            fuse(&mut tape, &[zv, zc], &mixed, bad),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn eval_fusion_is_deterministic_in_features() {
        let (store, p) = setup(8, 17);
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let sv = tape.constant(Tensor::full(&[8], 0.3));
            let sc = tape.constant(Tensor::full(&[8], -0.1));
            let out = fusion_forward(
                &mut tape,
                &store,
                &p,
                &[(Modality::Vit, sv), (Modality::Cnn, sc)],
                Mode::Eval,
                &mut Rng::new(seed),
            )
            .unwrap();
            tape.value(out.h).clone()
        };
        assert!(run(1).bit_eq(&run(2)));
    }
}
