//! Frozen feature branches and the trainable adapters grafted onto them.
//!
//! The attention branch embeds overlapping patches, adds positional
//! embeddings resized by the position adapter, and runs a stack of frozen
//! attention blocks, each followed by a residual bottleneck adapter. The
//! convolutional branch is a frozen conv/pool stack whose flattened output
//! feeds one trainable fully-connected layer.

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-5;

/// Residual bottleneck adapter: `x + gelu(x·M_d)·M_u`.
#[derive(Clone, Debug)]
pub struct FeatureAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub dim: usize,
}

impl FeatureAdapter {
    /// `M_d` gets a scaled Gaussian init and `M_u` starts at zero, so a new
    /// adapter is the identity.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || dim % 4 != 0 {
            return Err(Error::contract(format!(
                "adapter width {dim} must be a positive multiple of 4"
            )));
        }
        let bottleneck = dim / 4;
        let down = store.trainable(
            format!("{name}.down"),
            Tensor::randn(&[dim, bottleneck], (1.0 / dim as f64).sqrt(), rng),
        );
        let up = store.trainable(format!("{name}.up"), Tensor::zeros(&[bottleneck, dim]));
        Ok(FeatureAdapter { down, up, dim })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let down = tape.param(store, self.down);
        let up = tape.param(store, self.up);
        feature_adapter_apply(tape, x, down, up)
    }
}

/// `x[n, d] + gelu(x·M_d)·M_u` with `M_d[d, d/4]`, `M_u[d/4, d]`.
pub fn feature_adapter_apply(tape: &mut Tape, x: Var, down: Var, up: Var) -> Result<Var> {
    let (xs, ds, us) = (tape.shape(x), tape.shape(down), tape.shape(up));
    if xs.len() != 2 || ds.len() != 2 || xs[1] != ds[0] {
        return Err(Error::dim("feature_adapter", xs, ds));
    }
    if us.len() != 2 || us[0] != ds[1] || us[1] != ds[0] {
        return Err(Error::dim("feature_adapter", ds, us));
    }
    let h = tape.matmul(x, down)?;
    let h = tape.gelu(h);
    let delta = tape.matmul(h, up)?;
    tape.add(x, delta)
}

/// Resizes `pos_emb[H_p, W_p, d]` to `[H_t, W_t, d]`: max-pooling with
/// window and stride equal to the integer downsampling factor, then a 3×3
/// same-padded convolution across the embedding channels.
pub fn position_adapter(
    tape: &mut Tape,
    pos_emb: Var,
    conv: Var,
    target: (usize, usize),
) -> Result<Var> {
    let s = tape.shape(pos_emb).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("position_adapter", &s, &[target.0, target.1]));
    }
    let (hp, wp, d) = (s[0], s[1], s[2]);
    let (ht, wt) = target;
    if ht == 0 || wt == 0 || hp % ht != 0 || wp % wt != 0 || hp / ht != wp / wt {
        return Err(Error::contract(format!(
            "position embedding {hp}×{wp} cannot be pooled to {ht}×{wt} by one integer factor"
        )));
    }
    let ks = tape.shape(conv);
    if ks != [d, d, 3, 3] {
        return Err(Error::dim("position_adapter", &s, ks));
    }
    let factor = hp / ht;
    let flat = tape.reshape(pos_emb, &[hp * wp, d])?;
    let chw = tape.transpose(flat)?;
    let chw = tape.reshape(chw, &[d, hp, wp])?;
    let pooled = tape.maxpool2d(chw, factor, factor)?;
    let refined = tape.conv2d(pooled, conv, 1, 1)?;
    let flat = tape.reshape(refined, &[d, ht * wt])?;
    let hwc = tape.transpose(flat)?;
    tape.reshape(hwc, &[ht, wt, d])
}

/// Max-pooled `pos_emb[G, G, d]` as `[d, grid, grid]`, with the same
/// values as the pooling stage of [`position_adapter`].
fn pool_positions(pos_emb: &Tensor, grid: usize) -> Tensor {
    let (g, d) = (pos_emb.shape()[0], pos_emb.shape()[2]);
    let f = g / grid;
    let src = pos_emb.data();
    let mut out = vec![f64::NEG_INFINITY; d * grid * grid];
    for y in 0..g {
        for x in 0..g {
            let cell = (y / f) * grid + x / f;
            let row = &src[(y * g + x) * d..(y * g + x + 1) * d];
            for (c, &v) in row.iter().enumerate() {
                let o = &mut out[c * grid * grid + cell];
                if v > *o {
                    *o = v;
                }
            }
        }
    }
    Tensor::new(&[d, grid, grid], out).expect("shape matches data")
}

/// Identity 3×3 kernel over `d` channels (centre tap only).
pub fn identity_conv3(d: usize) -> Tensor {
    let mut k = Tensor::zeros(&[d, d, 3, 3]);
    for c in 0..d {
        k.data_mut()[((c * d + c) * 3 + 1) * 3 + 1] = 1.0;
    }
    k
}

#[derive(Clone, Debug)]
pub struct VitConfig {
    pub image_size: usize,
    pub dim: usize,
    pub blocks: usize,
    pub patch: usize,
    pub stride: usize,
    pub mlp_hidden: usize,
    /// Side of the stored positional-embedding grid; a multiple of the token
    /// grid side.
    pub pos_grid: usize,
}

impl VitConfig {
    pub fn token_grid(&self) -> usize {
        (self.image_size - self.patch) / self.stride + 1
    }
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    w1: ParamId,
    w2: ParamId,
}

/// Attention branch: frozen overlapping-patch embedding and attention
/// blocks, a trainable position adapter, one feature adapter per block.
#[derive(Clone, Debug)]
pub struct VitBranch {
    pub cfg: VitConfig,
    patch_kernel: ParamId,
    pos_emb: ParamId,
    pub pos_conv: ParamId,
    blocks: Vec<AttentionBlock>,
    pub adapters: Vec<FeatureAdapter>,
}

impl VitBranch {
    /// Frozen weights come from `backbone_seed`; trainable ones from `rng`.
    pub fn new(
        store: &mut ParamStore,
        cfg: VitConfig,
        backbone_seed: u64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let grid = cfg.token_grid();
        if cfg.pos_grid % grid != 0 {
            return Err(Error::contract(format!(
                "positional grid {} is not a multiple of token grid {grid}",
                cfg.pos_grid
            )));
        }
        let mut frozen = Rng::derived(backbone_seed, &[1]);
        let d = cfg.dim;
        let patch_kernel = store.frozen(
            "vit.patch_embed",
            Tensor::randn(&[d, 1, cfg.patch, cfg.patch], 1.0 / cfg.patch as f64, &mut frozen),
        );
        let pos_emb = store.frozen(
            "vit.pos_embed",
            Tensor::randn(&[cfg.pos_grid, cfg.pos_grid, d], 0.5, &mut frozen),
        );
        let pos_conv = store.trainable("vit.pos_adapter.conv", identity_conv3(d));
        let std_d = (1.0 / d as f64).sqrt();
        let std_h = (1.0 / cfg.mlp_hidden as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.blocks);
        let mut adapters = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let mut w = |name: &str, shape: &[usize], std: f64| {
                store.frozen(format!("vit.block{b}.{name}"), Tensor::randn(shape, std, &mut frozen))
            };
            blocks.push(AttentionBlock {
                wq: w("wq", &[d, d], std_d),
                wk: w("wk", &[d, d], std_d),
                wv: w("wv", &[d, d], std_d),
                wo: w("wo", &[d, d], std_d),
                w1: w("mlp1", &[d, cfg.mlp_hidden], std_d),
                w2: w("mlp2", &[cfg.mlp_hidden, d], std_h),
            });
            adapters.push(FeatureAdapter::new(
                store,
                &format!("vit.adapter{b}"),
                d,
                rng,
            )?);
        }
        Ok(VitBranch {
            cfg,
            patch_kernel,
            pos_emb,
            pos_conv,
            blocks,
            adapters,
        })
    }

    /// `image[1, H, W]` → `s_v[d]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<Var> {
        self.forward_inner(tape, store, image, true)
    }

    /// The same network with every feature adapter removed.
    pub fn forward_backbone_only(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: Var,
    ) -> Result<Var> {
        self.forward_inner(tape, store, image, false)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: Var,
        adapters: bool,
    ) -> Result<Var> {
        let n = self.cfg.image_size;
        if tape.shape(image) != [1, n, n] {
            return Err(Error::dim("vit_branch", tape.shape(image), &[1, n, n]));
        }
        let d = self.cfg.dim;
        let grid = self.cfg.token_grid();
        let tokens = grid * grid;

        let kernel = tape.param(store, self.patch_kernel);
        let patches = tape.conv2d(image, kernel, self.cfg.stride, 0)?;
        let patches = tape.reshape(patches, &[d, tokens])?;
        let patches = tape.transpose(patches)?;

        let conv = tape.param(store, self.pos_conv);
        let pos = if store.get(self.pos_emb).trainable {
            let pos = tape.param(store, self.pos_emb);
            position_adapter(tape, pos, conv, (grid, grid))?
        } else {
            // Frozen table: pool outside the tape, skipping its copies.
            let pooled = pool_positions(store.value(self.pos_emb), grid);
            let pooled = tape.constant(pooled);
            let refined = tape.conv2d(pooled, conv, 1, 1)?;
            let flat = tape.reshape(refined, &[d, tokens])?;
            tape.transpose(flat)?
        };
        let pos = tape.reshape(pos, &[tokens, d])?;
        let mut x = tape.add(patches, pos)?;

        let scale = 1.0 / (d as f64).sqrt();
        for (block, adapter) in self.blocks.iter().zip(&self.adapters) {
            let h = tape.layer_norm(x, LN_EPS)?;
            let wq = tape.param(store, block.wq);
            let wk = tape.param(store, block.wk);
            let wv = tape.param(store, block.wv);
            let wo = tape.param(store, block.wo);
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 1)?;
            let mixed = tape.matmul(attn, v)?;
            let out = tape.matmul(mixed, wo)?;
            x = tape.add(x, out)?;

            let h = tape.layer_norm(x, LN_EPS)?;
            let w1 = tape.param(store, block.w1);
            let w2 = tape.param(store, block.w2);
            let h = tape.matmul(h, w1)?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, w2)?;
            x = tape.add(x, h)?;

            if adapters {
                x = adapter.apply(tape, store, x)?;
            }
        }
        let x = tape.layer_norm(x, LN_EPS)?;
        tape.mean_rows(x)
    }
}

#[derive(Clone, Debug)]
pub struct CnnConfig {
    pub image_size: usize,
    pub channels: [usize; 3],
    pub pools: [usize; 3],
    pub out_dim: usize,
}

impl CnnConfig {
    pub fn flat_len(&self) -> usize {
        let side = self.pools.iter().fold(self.image_size, |s, p| s / p);
        self.channels[2] * side * side
    }
}

/// Convolutional branch: three frozen bias-free conv + gelu + max-pool
/// stages, flattened into one trainable fully-connected layer.
#[derive(Clone, Debug)]
pub struct CnnBranch {
    pub cfg: CnnConfig,
    convs: Vec<ParamId>,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
}

impl CnnBranch {
    pub fn new(
        store: &mut ParamStore,
        cfg: CnnConfig,
        backbone_seed: u64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut side = cfg.image_size;
        for &p in &cfg.pools {
            if p == 0 || side % p != 0 {
                return Err(Error::contract(format!(
                    "pool factor {p} does not divide feature side {side}"
                )));
            }
            side /= p;
        }
        let mut frozen = Rng::derived(backbone_seed, &[2]);
        let mut convs = Vec::with_capacity(3);
        let mut c_in = 1;
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            let std = (2.0 / (9 * c_in) as f64).sqrt();
            convs.push(store.frozen(
                format!("cnn.conv{i}"),
                Tensor::randn(&[c_out, c_in, 3, 3], std, &mut frozen),
            ));
            c_in = c_out;
        }
        let flat = cfg.flat_len();
        let fc_weight = store.trainable(
            "cnn.fc.weight",
            Tensor::randn(&[flat, cfg.out_dim], (1.0 / flat as f64).sqrt(), rng),
        );
        let fc_bias = store.trainable("cnn.fc.bias", Tensor::zeros(&[cfg.out_dim]));
        Ok(CnnBranch {
            cfg,
            convs,
            fc_weight,
            fc_bias,
        })
    }

    /// Output of the frozen stack, flattened to `[1, flat]`.
    pub fn frozen_features(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<Var> {
        let n = self.cfg.image_size;
        if tape.shape(image) != [1, n, n] {
            return Err(Error::dim("cnn_branch", tape.shape(image), &[1, n, n]));
        }
        let mut x = image;
        for (conv, &pool) in self.convs.iter().zip(&self.cfg.pools) {
            let k = tape.param(store, *conv);
            x = tape.conv2d(x, k, 1, 1)?;
            x = tape.gelu(x);
            x = tape.maxpool2d(x, pool, pool)?;
        }
        tape.reshape(x, &[1, self.cfg.flat_len()])
    }

    /// `image[1, H, W]` → `s_c[d_c]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<Var> {
        let feats = self.frozen_features(tape, store, image)?;
        self.head(tape, store, feats)
    }

    /// Trainable layer alone, applied to `[1, flat]` frozen features.
    pub fn head(&self, tape: &mut Tape, store: &ParamStore, feats: Var) -> Result<Var> {
        let w = tape.param(store, self.fc_weight);
        let b = tape.param(store, self.fc_bias);
        let y = tape.matmul(feats, w)?;
        let y = tape.reshape(y, &[self.cfg.out_dim])?;
        tape.add_bias(y, b)
    }
}
