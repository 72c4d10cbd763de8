//! The full segmentation network: both encoder branches, uncertainty-aware
//! fusion, prompt encoder and mask decoder, behind three ablation toggles.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::encoders::{CnnBranch, CnnConfig, VitBranch, VitConfig};
use crate::error::{Error, Result};
use crate::fusion::{fusion_forward, FusionOutput, FusionParams, Modality, Mode};
use crate::losses::{total_loss, Lambdas, LossBreakdown, Regularized};
use crate::prompt::{
    point_from_mask, prompt_from_mask, BoxPrompt, DecoderConfig, MaskDecoder, PromptEncoder,
};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub d_v: usize,
    pub d_c: usize,
    /// Set from the training configuration; not part of the JSON form.
    #[serde(skip)]
    pub d_h: usize,
    pub d_p: usize,
    pub vit_blocks: usize,
    pub vit_patch: usize,
    pub vit_stride: usize,
    pub vit_mlp_hidden: usize,
    pub pos_grid: usize,
    pub cnn_channels: [usize; 3],
    pub cnn_pools: [usize; 3],
    pub prompt_octaves: usize,
    pub decoder_coarse_channels: usize,
    pub decoder_mid_channels: usize,
    /// Seed of the frozen backbone weights.
    pub backbone_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            d_v: 32,
            d_c: 32,
            d_h: 32,
            d_p: 32,
            vit_blocks: 5,
            vit_patch: 8,
            vit_stride: 4,
            vit_mlp_hidden: 64,
            pos_grid: 105,
            cnn_channels: [32, 64, 64],
            cnn_pools: [2, 4, 4],
            prompt_octaves: 6,
            decoder_coarse_channels: 8,
            decoder_mid_channels: 16,
            backbone_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn vit(&self) -> VitConfig {
        VitConfig {
            image_size: self.image_size,
            dim: self.d_v,
            blocks: self.vit_blocks,
            patch: self.vit_patch,
            stride: self.vit_stride,
            mlp_hidden: self.vit_mlp_hidden,
            pos_grid: self.pos_grid,
        }
    }

    pub fn cnn(&self) -> CnnConfig {
        CnnConfig {
            image_size: self.image_size,
            channels: self.cnn_channels,
            pools: self.cnn_pools,
            out_dim: self.d_c,
        }
    }
}

/// Component toggles of the ablation grid. All on is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Off: no convolutional branch; fusion sees the attention branch only.
    pub frozen_cnn_adapter: bool,
    /// Off: point-estimate attention and no attention KL term.
    pub vaf: bool,
    /// Off: a single positive point replaces the box.
    pub box_prompt: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::ALL_ON
    }
}

impl Ablation {
    pub const ALL_ON: Self = Self {
        frozen_cnn_adapter: true,
        vaf: true,
        box_prompt: true,
    };
    pub const ALL_OFF: Self = Self {
        frozen_cnn_adapter: false,
        vaf: false,
        box_prompt: false,
    };

    /// The 8 toggle combinations, all-off first and all-on last.
    pub fn grid() -> [Self; 8] {
        std::array::from_fn(|i| Self {
            frozen_cnn_adapter: i & 4 != 0,
            vaf: i & 2 != 0,
            box_prompt: i & 1 != 0,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub ablation: Ablation,
    pub store: ParamStore,
    pub vit: VitBranch,
    pub cnn: Option<CnnBranch>,
    pub fusion: FusionParams,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub fusion: FusionOutput,
}

impl Model {
    /// Frozen weights depend only on `cfg.backbone_seed`; trainable ones on
    /// `init_seed`.
    pub fn new(cfg: ModelConfig, ablation: Ablation, init_seed: u64) -> Result<Self> {
        if cfg.d_v % 4 != 0 {
            return Err(Error::contract("d_v must be divisible by 4"));
        }
        let mut store = ParamStore::new();
        let mut rng = Rng::derived(init_seed, &[0x1417]);
        let vit = VitBranch::new(&mut store, cfg.vit(), cfg.backbone_seed, &mut rng)?;
        let cnn = if ablation.frozen_cnn_adapter {
            Some(CnnBranch::new(&mut store, cfg.cnn(), cfg.backbone_seed, &mut rng)?)
        } else {
            None
        };
        let mut inputs = vec![(Modality::Vit, cfg.d_v)];
        if cnn.is_some() {
            inputs.push((Modality::Cnn, cfg.d_c));
        }
        let fusion = FusionParams::new(&mut store, &inputs, cfg.d_h, ablation.vaf, &mut rng);
        let prompt = PromptEncoder::new(&mut store, cfg.prompt_octaves, cfg.d_p, &mut rng);
        let decoder = MaskDecoder::new(
            &mut store,
            DecoderConfig {
                out_size: cfg.image_size,
                coarse_channels: cfg.decoder_coarse_channels,
                mid_channels: cfg.decoder_mid_channels,
            },
            cfg.d_h + cfg.d_p,
            &mut rng,
        )?;
        Ok(Model {
            cfg,
            ablation,
            store,
            vit,
            cnn,
            fusion,
            prompt,
            decoder,
        })
    }

    /// Output of the frozen convolutional stack for one image, or `None`
    /// without that branch. It never changes during training, so callers
    /// may compute it once per image.
    pub fn cnn_features(&self, image: &Tensor) -> Result<Option<Tensor>> {
        let Some(cnn) = &self.cnn else {
            return Ok(None);
        };
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let f = cnn.frozen_features(&mut tape, &self.store, x)?;
        Ok(Some(tape.value(f).clone()))
    }

    /// Box or point prompt for `mask`, according to the ablation toggle.
    pub fn make_prompt(&self, mask: &Tensor, jitter: f64, rng: &mut Rng) -> Result<BoxPrompt> {
        if self.ablation.box_prompt {
            prompt_from_mask(mask, jitter, rng)
        } else {
            point_from_mask(mask, rng)
        }
    }

    /// One image through the network. `cnn_feats` must come from
    /// [`Model::cnn_features`] when the convolutional branch is present.
    pub fn forward(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        cnn_feats: Option<&Tensor>,
        prompt: &BoxPrompt,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ForwardPass> {
        let x = tape.constant(image.clone());
        let s_v = self.vit.forward(tape, &self.store, x)?;
        let mut features = vec![(Modality::Vit, s_v)];
        if let Some(cnn) = &self.cnn {
            let owned;
            let feats = match cnn_feats {
                Some(f) => f,
                None => {
                    owned = self.cnn_features(image)?.expect("branch present");
                    &owned
                }
            };
            let f = tape.constant(feats.clone());
            features.push((Modality::Cnn, cnn.head(tape, &self.store, f)?));
        }
        let fusion = fusion_forward(tape, &self.store, &self.fusion, &features, mode, rng)?;
        let n = self.cfg.image_size;
        let p = self.prompt.encode(tape, &self.store, prompt, (n, n))?;
        let logits = self.decoder.decode(tape, &self.store, fusion.h, p, (n, n))?;
        Ok(ForwardPass { logits, fusion })
    }

    /// Composite loss of a forward pass against `mask`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        pass: &ForwardPass,
        mask: &Tensor,
        lambdas: &Lambdas,
    ) -> Result<(Var, LossBreakdown)> {
        let target = tape.constant(mask.clone());
        let latent = |m: Modality| {
            pass.fusion
                .latents
                .iter()
                .find(|(k, _)| *k == m)
                .map(|(_, g)| g)
        };
        let parts = Regularized {
            g_v: latent(Modality::Vit),
            g_c: latent(Modality::Cnn),
            attention: Some(&pass.fusion.attention),
        };
        total_loss(tape, pass.logits, target, parts, lambdas)
    }

    /// Binary mask from eval-mode logits (threshold at logit 0).
    pub fn predict(
        &self,
        image: &Tensor,
        cnn_feats: Option<&Tensor>,
        prompt: &BoxPrompt,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let pass = self.forward(&mut tape, image, cnn_feats, prompt, Mode::Eval, &mut rng)?;
        Ok(tape.value(pass.logits).map(|l| (l > 0.0) as u8 as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sample, SynthConfig};

    #[test]
    fn trainable_share_is_small() {
        let m = Model::new(ModelConfig::default(), Ablation::ALL_ON, 1).unwrap();
        let (t, f) = m.store.counts();
        let share = t as f64 / (t + f) as f64;
        assert!(share < 0.15, "trainable {t}, frozen {f}, share {share}");
        println!("trainable share {share:.4}");
    }

    #[test]
    fn grid_covers_power_set() {
        let g = Ablation::grid();
        assert_eq!(g[0], Ablation::ALL_OFF);
        assert_eq!(g[7], Ablation::ALL_ON);
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(g[i], g[j]);
            }
        }
    }

    #[test]
    fn cached_features_match_inline() {
        let m = Model::new(ModelConfig::default(), Ablation::ALL_ON, 1).unwrap();
        let s = generate_sample(3, &SynthConfig::default()).unwrap();
        let b = prompt_from_mask(&s.mask, 0.0, &mut Rng::new(0)).unwrap();
        let feats = m.cnn_features(&s.image).unwrap();
        let a = m.predict(&s.image, feats.as_ref(), &b).unwrap();
        let c = m.predict(&s.image, None, &b).unwrap();
        assert!(a.bit_eq(&c));
        assert_eq!(a.shape(), &[64, 64]);
    }

    #[test]
    fn ablation_removes_components() {
        let m = Model::new(ModelConfig::default(), Ablation::ALL_OFF, 1).unwrap();
        assert!(m.cnn.is_none());
        assert!(!m.fusion.is_variational());
        assert!(m.store.id("cnn.fc.weight").is_none());
        assert!(m.store.id("fusion.att_sigma.weight").is_none());
    }
}
