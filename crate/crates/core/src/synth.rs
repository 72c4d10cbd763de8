//! Procedural ultrasound-like samples: one dark elliptical target on a
//! brighter background, an optional vertical shadow band, and
//! multiplicative speckle.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::pgm::{read_pgm, write_pgm};
use crate::rng::{derive_seed, Rng};

const BACKGROUND: f64 = 0.6;
const MIN_AREA: f64 = 0.01;
const MAX_AREA: f64 = 0.30;
const MIN_ASPECT: f64 = 0.4;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub speckle_strength: f64,
    pub shadow_prob: f64,
    /// Target darkening in units of 0.4 intensity; 1 gives levels 0.6/0.2.
    pub contrast: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            speckle_strength: 0.25,
            shadow_prob: 0.3,
            contrast: 0.6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::contract(format!(
                "image must be at least 32x32, got {}x{}",
                self.height, self.width
            )));
        }
        if 0.1 * (self.height.min(self.width) as f64) < 2.0 {
            return Err(Error::contract("ellipse axes would be below 2 px"));
        }
        if !(self.speckle_strength >= 0.0 && self.speckle_strength.is_finite()) {
            return Err(Error::contract("speckle_strength must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.shadow_prob) {
            return Err(Error::contract("shadow_prob must lie in [0, 1]"));
        }
        if !(0.0..=1.5).contains(&self.contrast) {
            return Err(Error::contract("contrast must lie in [0, 1.5]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationSample {
    /// `[1, H, W]`, values in [0, 1].
    pub image: Tensor,
    /// `[H, W]`, values in {0, 1}.
    pub mask: Tensor,
    pub id: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    /// Rasterised at pixel centres.
    pub fn rasterize(&self, h: usize, w: usize) -> Tensor {
        let mut m = Tensor::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    m.data_mut()[y * w + x] = 1.0;
                }
            }
        }
        m
    }
}

fn sample_ellipse(cfg: &SynthConfig, rng: &mut Rng) -> Result<(Ellipse, Tensor)> {
    let (h, w) = (cfg.height, cfg.width);
    let side = h.min(w) as f64;
    let pixels = (h * w) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let a = rng.uniform_in(0.1, 0.4) * side;
        let b = rng.uniform_in(0.1, 0.4) * side;
        let theta = rng.uniform_in(0.0, std::f64::consts::PI);
        if a.min(b) / a.max(b) < MIN_ASPECT {
            continue;
        }
        let (s, c) = theta.sin_cos();
        let ex = (a * a * c * c + b * b * s * s).sqrt();
        let ey = (a * a * s * s + b * b * c * c).sqrt();
        if 2.0 * ex + 2.0 > w as f64 || 2.0 * ey + 2.0 > h as f64 {
            continue;
        }
        let cx = rng.uniform_in(ex + 1.0, w as f64 - ex - 1.0);
        let cy = rng.uniform_in(ey + 1.0, h as f64 - ey - 1.0);
        let e = Ellipse { cx, cy, a, b, theta };
        let mask = e.rasterize(h, w);
        let frac = mask.sum() / pixels;
        if (MIN_AREA..=MAX_AREA).contains(&frac) {
            return Ok((e, mask));
        }
    }
    Err(Error::contract("could not place a target within the area bounds"))
}

/// Pure function of `(seed, cfg)`.
pub fn generate_sample(seed: u64, cfg: &SynthConfig) -> Result<SegmentationSample> {
    generate_with_id(seed, seed, cfg)
}

fn generate_with_id(id: u64, seed: u64, cfg: &SynthConfig) -> Result<SegmentationSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = Rng::new(seed);
    let (_, mask) = sample_ellipse(cfg, &mut rng)?;
    let fg = BACKGROUND - 0.4 * cfg.contrast;
    let mut img: Vec<f64> = mask
        .data()
        .iter()
        .map(|&m| if m > 0.5 { fg } else { BACKGROUND })
        .collect();

    if rng.bernoulli(cfg.shadow_prob) {
        let band = rng.uniform_in(0.1, 0.25) * w as f64;
        let x0 = rng.uniform_in(0.0, w as f64 - band);
        let atten = rng.uniform_in(0.5, 0.8);
        for y in 0..h {
            for x in 0..w {
                let xc = x as f64 + 0.5;
                if xc >= x0 && xc < x0 + band {
                    img[y * w + x] *= atten;
                }
            }
        }
    }

    if cfg.speckle_strength > 0.0 {
        for v in img.iter_mut() {
            let n = rng.normal();
            *v = (*v * (1.0 + cfg.speckle_strength * n)).clamp(0.0, 1.0);
        }
    }

    Ok(SegmentationSample {
        image: Tensor::new(&[1, h, w], img)?,
        mask,
        id,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl DatasetSplit {
    /// Per-sample generator seed for a sample id.
    pub fn sample_seed(&self, id: u64) -> u64 {
        sample_seed(self.seed, id)
    }

    pub fn ids(&self, which: SplitName) -> &[u64] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn sample_seed(master: u64, id: u64) -> u64 {
    derive_seed(master, &[0x5eed, id])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

/// Shuffle ids `0..n` with `seed` and cut them by `ratios`. The first two
/// sizes are rounded to nearest; test takes the remainder.
pub fn make_split(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    if n < 3 {
        return Err(Error::contract(format!("need at least 3 samples, got {n}")));
    }
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::contract("ratios must be positive and sum to 1"));
    }
    let n_train = ((n as f64 * a).round() as usize).clamp(1, n - 2);
    let n_val = ((n as f64 * b).round() as usize).clamp(1, n - 1 - n_train);
    let mut ids: Vec<u64> = (0..n as u64).collect();
    Rng::derived(seed, &[0x5b1_7]).shuffle(&mut ids);
    Ok(DatasetSplit {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
        ratios,
        seed,
    })
}

/// Split with exact subset sizes; ratios are recorded from the counts.
pub fn make_split_counts(counts: (usize, usize, usize), seed: u64) -> Result<DatasetSplit> {
    let n = counts.0 + counts.1 + counts.2;
    if counts.0 == 0 || counts.1 == 0 || counts.2 == 0 {
        return Err(Error::contract("every subset needs at least one sample"));
    }
    let nf = n as f64;
    let ratios = (counts.0 as f64 / nf, counts.1 as f64 / nf, counts.2 as f64 / nf);
    let mut ids: Vec<u64> = (0..n as u64).collect();
    Rng::derived(seed, &[0x5b1_7]).shuffle(&mut ids);
    Ok(DatasetSplit {
        train: ids[..counts.0].to_vec(),
        val: ids[counts.0..counts.0 + counts.1].to_vec(),
        test: ids[counts.0 + counts.1..].to_vec(),
        ratios,
        seed,
    })
}

/// Generated samples of one dataset, addressed by split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SynthConfig,
    pub split: DatasetSplit,
    samples: Vec<SegmentationSample>,
}

impl Dataset {
    pub fn generate(config: SynthConfig, split: DatasetSplit) -> Result<Self> {
        let samples = (0..split.len() as u64)
            .map(|id| generate_with_id(id, split.sample_seed(id), &config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, split, samples })
    }

    pub fn sample(&self, id: u64) -> &SegmentationSample {
        &self.samples[id as usize]
    }

    pub fn subset(&self, which: SplitName) -> Vec<&SegmentationSample> {
        self.split.ids(which).iter().map(|&i| self.sample(i)).collect()
    }

    pub fn samples(&self) -> &[SegmentationSample] {
        &self.samples
    }

    /// Writes `img_<id>.pgm`, `mask_<id>.pgm` and `manifest.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let image = format!("img_{:05}.pgm", s.id);
            let mask = format!("mask_{:05}.pgm", s.id);
            let (h, w) = (self.config.height, self.config.width);
            write_pgm(&s.image.clone().reshape(&[h, w])?, &dir.join(&image))?;
            write_pgm(&s.mask, &dir.join(&mask))?;
            let split = [SplitName::Train, SplitName::Val, SplitName::Test]
                .into_iter()
                .find(|&n| self.split.ids(n).contains(&s.id))
                .expect("every id is in exactly one split");
            entries.push(ManifestEntry {
                id: s.id,
                seed: s.seed,
                split,
                image: PathBuf::from(image),
                mask: PathBuf::from(mask),
            });
        }
        let manifest = Manifest {
            config: self.config,
            split: self.split.clone(),
            samples: entries,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub seed: u64,
    pub split: SplitName,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub split: DatasetSplit,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads the images and masks listed in a manifest (paths relative to
    /// the manifest's directory).
    pub fn load_samples(&self, dir: &Path) -> Result<Vec<SegmentationSample>> {
        let (h, w) = (self.config.height, self.config.width);
        self.samples
            .iter()
            .map(|e| {
                let image = read_pgm(&dir.join(&e.image))?;
                let mask = read_pgm(&dir.join(&e.mask))?;
                if image.shape() != [h, w] || mask.shape() != [h, w] {
                    return Err(Error::dim("manifest sample", image.shape(), &[h, w]));
                }
                Ok(SegmentationSample {
                    image: image.reshape(&[1, h, w])?,
                    mask,
                    id: e.id,
                    seed: e.seed,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let cfg = SynthConfig::default();
        let a = generate_sample(17, &cfg).unwrap();
        let b = generate_sample(17, &cfg).unwrap();
        assert!(a.image.bit_eq(&b.image));
        assert!(a.mask.bit_eq(&b.mask));
        let c = generate_sample(18, &cfg).unwrap();
        assert!(!a.image.bit_eq(&c.image));
    }

    #[test]
    fn clean_case_is_two_level() {
        let cfg = SynthConfig {
            speckle_strength: 0.0,
            shadow_prob: 0.0,
            contrast: 1.0,
            ..SynthConfig::default()
        };
        for seed in 0..20 {
            let s = generate_sample(seed, &cfg).unwrap();
            for (&v, &m) in s.image.data().iter().zip(s.mask.data()) {
                let expect = if m > 0.5 { BACKGROUND - 0.4 } else { BACKGROUND };
                assert_eq!(v, expect);
            }
            // Thresholding the image recovers the mask exactly.
            let thr = s.image.map(|v| (v < 0.4) as u8 as f64).reshape(&[64, 64]).unwrap();
            assert!(thr.bit_eq(&s.mask));
        }
    }

    #[test]
    fn values_in_unit_interval_and_mask_nonempty() {
        let cfg = SynthConfig { speckle_strength: 0.8, shadow_prob: 1.0, ..Default::default() };
        for seed in 0..50 {
            let s = generate_sample(seed, &cfg).unwrap();
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.mask.sum() > 0.0);
        }
    }

    #[test]
    fn small_images_rejected() {
        let cfg = SynthConfig { height: 31, ..Default::default() };
        assert!(matches!(generate_sample(0, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn split_sizes() {
        let s = make_split(10, (0.7, 0.1, 0.2), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        assert_eq!(s, make_split(10, (0.7, 0.1, 0.2), 3).unwrap());
        let mut all: Vec<u64> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(make_split(2, (0.7, 0.1, 0.2), 3).is_err());
        assert!(make_split(10, (0.7, 0.2, 0.2), 3).is_err());
    }

    #[test]
    fn count_split() {
        let s = make_split_counts((512, 64, 128), 42).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (512, 64, 128));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = make_split(6, (0.5, 0.25, 0.25), 1).unwrap();
        let ds = Dataset::generate(SynthConfig::default(), split).unwrap();
        let m = ds.write_dir(dir.path()).unwrap();
        let back = Manifest::read(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m, back);
        let loaded = back.load_samples(dir.path()).unwrap();
        for (a, b) in loaded.iter().zip(ds.samples()) {
            assert!(a.mask.bit_eq(&b.mask));
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
        }
    }
}
