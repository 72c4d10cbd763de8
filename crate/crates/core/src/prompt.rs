//! Box prompts, their encoding, and the mask decoder head.
//!
//! Boxes come from the ground-truth mask with a jitter knob that stands in
//! for detector quality. A point prompt is encoded as a one-pixel box.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::linear;
use crate::rng::Rng;

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxPrompt {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.x0 < self.x1 && self.x1 <= width && self.y0 < self.y1 && self.y1 <= height {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "box {self:?} is not inside a {height}×{width} image"
            )))
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

fn mask_dims(mask: &Tensor) -> Result<(usize, usize)> {
    match mask.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::dim("mask", s, &[])),
    }
}

/// Tight bounding box of the positive pixels of `mask[H, W]`.
pub fn tight_box(mask: &Tensor) -> Result<BoxPrompt> {
    let (h, w) = mask_dims(mask)?;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] > 0.5 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::EmptyTarget);
    }
    Ok(BoxPrompt { x0, y0, x1, y1 })
}

/// Tight box with every side moved independently by up to
/// `jitter × side length`, clamped into the image with non-empty extent.
pub fn prompt_from_mask(mask: &Tensor, jitter: f64, rng: &mut Rng) -> Result<BoxPrompt> {
    if !(0.0..1.0).contains(&jitter) {
        return Err(Error::contract(format!("jitter {jitter} outside [0, 1)")));
    }
    let (h, w) = mask_dims(mask)?;
    let tight = tight_box(mask)?;
    if jitter == 0.0 {
        return Ok(tight);
    }
    let (bw, bh) = (tight.width() as f64, tight.height() as f64);
    let mut side = |v: usize, len: f64| v as f64 + rng.uniform_in(-jitter, jitter) * len;
    let x0 = side(tight.x0, bw);
    let y0 = side(tight.y0, bh);
    let x1 = side(tight.x1, bw);
    let y1 = side(tight.y1, bh);
    let (x0, x1) = clamp_span(x0, x1, w);
    let (y0, y1) = clamp_span(y0, y1, h);
    Ok(BoxPrompt { x0, y0, x1, y1 })
}

fn clamp_span(lo: f64, hi: f64, extent: usize) -> (usize, usize) {
    let lo = (lo.round().max(0.0) as usize).min(extent - 1);
    let hi = (hi.round().max(0.0) as usize).min(extent);
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1)
    }
}

/// One positive pixel chosen uniformly, as a one-pixel box.
pub fn point_from_mask(mask: &Tensor, rng: &mut Rng) -> Result<BoxPrompt> {
    let (_, w) = mask_dims(mask)?;
    let positives: Vec<usize> = mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.5)
        .map(|(i, _)| i)
        .collect();
    if positives.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let i = positives[rng.below(positives.len())];
    let (x, y) = (i % w, i / w);
    Ok(BoxPrompt {
        x0: x,
        y0: y,
        x1: x + 1,
        y1: y + 1,
    })
}

/// Fixed sinusoidal features of the normalized corners: for each of
/// `x0/W, y0/H, x1/W, y1/H` and each octave `k`, `sin(2ᵏπc), cos(2ᵏπc)`.
pub fn box_features(b: &BoxPrompt, image_size: (usize, usize), octaves: usize) -> Tensor {
    let (h, w) = image_size;
    let coords = [
        b.x0 as f64 / w as f64,
        b.y0 as f64 / h as f64,
        b.x1 as f64 / w as f64,
        b.y1 as f64 / h as f64,
    ];
    let mut out = Vec::with_capacity(coords.len() * octaves * 2);
    for c in coords {
        for k in 0..octaves {
            let arg = (1u64 << k) as f64 * std::f64::consts::PI * c;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    Tensor::vector(out)
}

#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub octaves: usize,
    pub dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PromptEncoder {
    pub fn new(store: &mut ParamStore, octaves: usize, dim: usize, rng: &mut Rng) -> Self {
        let d_in = 8 * octaves;
        PromptEncoder {
            octaves,
            dim,
            weight: store.trainable(
                "prompt.proj.weight",
                Tensor::randn(&[d_in, dim], (1.0 / d_in as f64).sqrt(), rng),
            ),
            bias: store.trainable("prompt.proj.bias", Tensor::zeros(&[dim])),
        }
    }

    /// Box → `[d_p]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        b: &BoxPrompt,
        image_size: (usize, usize),
    ) -> Result<Var> {
        b.validate(image_size.0, image_size.1)?;
        let feats = tape.constant(box_features(b, image_size, self.octaves));
        let w = tape.param(store, self.weight);
        let bias = tape.param(store, self.bias);
        linear(tape, feats, w, Some(bias))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub out_size: usize,
    pub coarse_channels: usize,
    pub mid_channels: usize,
}

/// `[h, prompt]` → linear onto an `(H/8)×(W/8)` grid → two stages of 2×
/// upsampling + 3×3 conv + gelu → 2× upsampling + 1×1 conv.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub cfg: DecoderConfig,
    pub input_dim: usize,
    pub coarse_w: ParamId,
    pub coarse_b: ParamId,
    pub conv1: ParamId,
    pub conv1_b: ParamId,
    pub conv2: ParamId,
    pub conv2_b: ParamId,
    pub head: ParamId,
    pub head_b: ParamId,
}

impl MaskDecoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: DecoderConfig,
        input_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.out_size == 0 || cfg.out_size % 8 != 0 {
            return Err(Error::contract(format!(
                "decoder output size {} is not a multiple of 8",
                cfg.out_size
            )));
        }
        let g = cfg.out_size / 8;
        let (c0, c1) = (cfg.coarse_channels, cfg.mid_channels);
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let coarse_w = store.trainable(
            "decoder.coarse.weight",
            Tensor::randn(&[input_dim, c0 * g * g], (1.0 / input_dim as f64).sqrt(), rng),
        );
        let coarse_b = store.trainable("decoder.coarse.bias", Tensor::zeros(&[c0 * g * g]));
        let conv1 = store.trainable(
            "decoder.conv1.weight",
            Tensor::randn(&[c1, c0, 3, 3], he(9 * c0), rng),
        );
        let conv1_b = store.trainable("decoder.conv1.bias", Tensor::zeros(&[c1]));
        let conv2 = store.trainable(
            "decoder.conv2.weight",
            Tensor::randn(&[c1, c1, 3, 3], he(9 * c1), rng),
        );
        let conv2_b = store.trainable("decoder.conv2.bias", Tensor::zeros(&[c1]));
        let head = store.trainable(
            "decoder.head.weight",
            Tensor::randn(&[1, c1, 1, 1], (1.0 / c1 as f64).sqrt(), rng),
        );
        let head_b = store.trainable("decoder.head.bias", Tensor::zeros(&[1]));
        Ok(MaskDecoder {
            cfg,
            input_dim,
            coarse_w,
            coarse_b,
            conv1,
            conv1_b,
            conv2,
            conv2_b,
            head,
            head_b,
        })
    }

    /// Logits `[H, W]` for fused feature `h` and prompt embedding `prompt`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        prompt: Var,
        out_size: (usize, usize),
    ) -> Result<Var> {
        let (oh, ow) = out_size;
        if oh % 8 != 0 || ow % 8 != 0 {
            return Err(Error::contract(format!(
                "output size {oh}×{ow} is not divisible by 8"
            )));
        }
        if oh != self.cfg.out_size || ow != self.cfg.out_size {
            return Err(Error::dim(
                "decode_mask",
                &[oh, ow],
                &[self.cfg.out_size, self.cfg.out_size],
            ));
        }
        let g = oh / 8;
        let x = tape.concat(&[h, prompt]);
        if tape.value(x).len() != self.input_dim {
            return Err(Error::dim("decode_mask", tape.shape(x), &[self.input_dim]));
        }
        let w = tape.param(store, self.coarse_w);
        let b = tape.param(store, self.coarse_b);
        let x = linear(tape, x, w, Some(b))?;
        let mut x = tape.reshape(x, &[self.cfg.coarse_channels, g, g])?;
        for (k, kb) in [(self.conv1, self.conv1_b), (self.conv2, self.conv2_b)] {
            x = tape.upsample2x(x)?;
            let k = tape.param(store, k);
            let kb = tape.param(store, kb);
            x = tape.conv2d(x, k, 1, 1)?;
            x = tape.channel_bias(x, kb)?;
            x = tape.gelu(x);
        }
        let x = tape.upsample2x(x)?;
        let head = tape.param(store, self.head);
        let head_b = tape.param(store, self.head_b);
        let x = tape.conv2d(x, head, 1, 0)?;
        let x = tape.channel_bias(x, head_b)?;
        tape.reshape(x, &[oh, ow])
    }
}

/// Text-prompt template for a detector front end. `[target]` stands for
/// the structure to segment.
pub const TEXT_PROMPT_TEMPLATE: &str = include_str!("../assets/prompt_template.txt");

pub fn render_text_prompt(target: &str) -> String {
    TEXT_PROMPT_TEMPLATE.replace("[target]", target)
}
