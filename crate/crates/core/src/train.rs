//! Optimizer, learning-rate schedule, training loop, evaluation and the
//! ablation grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, ParamId, ParamStore, Tape, Tensor};
use crate::checkpoint::{CheckpointMeta, ModelCheckpoint};
use crate::error::{Error, Result};
use crate::fusion::Mode;
use crate::losses::{Lambdas, LossBreakdown};
use crate::metrics::{dice_score, hausdorff_distance};
use crate::model::{Ablation, ForwardPass, Model, ModelConfig};
use crate::rng::Rng;
use crate::synth::{make_split_counts, Dataset, SplitName, SynthConfig};

const ADAM_PREFIX_M: &str = "adam.m.";
const ADAM_PREFIX_V: &str = "adam.v.";

// Stream tags for derived RNGs.
const TAG_SHUFFLE: u64 = 1;
const TAG_PROMPT: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_EVAL_PROMPT: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    /// Multiplier applied once per period.
    pub factor: f64,
    pub period: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            factor: 0.1,
            period: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synth: SynthConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            n_train: 512,
            n_val: 64,
            n_test: 128,
            seed: 42,
        }
    }
}

impl DataConfig {
    pub fn generate(&self) -> Result<Dataset> {
        let split = make_split_counts((self.n_train, self.n_val, self.n_test), self.seed)?;
        Dataset::generate(self.synth, split)
    }
}

/// Everything that determines a training run. Missing JSON keys take the
/// defaults below; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambdas: Lambdas,
    pub d_h: usize,
    /// Box jitter during training.
    pub jitter: f64,
    /// Box jitter for validation and evaluation.
    pub eval_jitter: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub data: DataConfig,
    /// Architecture; its `d_h` is taken from the field above.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.005,
            schedule: Schedule::default(),
            epochs: 60,
            batch_size: 32,
            lambdas: Lambdas::default(),
            d_h: 32,
            jitter: 0.1,
            eval_jitter: 0.1,
            seed: 42,
            ablation: Ablation::ALL_ON,
            data: DataConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_h: self.d_h,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive and finite");
        }
        if !(self.schedule.factor > 0.0 && self.schedule.factor <= 1.0) {
            return bad("schedule.factor must lie in (0, 1]");
        }
        if self.schedule.period == 0 {
            return bad("schedule.period must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.d_h == 0 {
            return bad("d_h must be at least 1");
        }
        for j in [self.jitter, self.eval_jitter] {
            if !(0.0..1.0).contains(&j) {
                return bad("jitter must lie in [0, 1)");
            }
        }
        let l = self.lambdas;
        if ![l.c, l.v, l.a].iter().all(|x| *x >= 0.0 && x.is_finite()) {
            return bad("lambdas must be finite and non-negative");
        }
        if self.data.n_train == 0 || self.data.n_val == 0 || self.data.n_test == 0 {
            return bad("every data split needs at least one sample");
        }
        self.data
            .synth
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

/// `lr0 · factor^⌊epoch / period⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let mut lr = cfg.lr0;
    for _ in 0..epoch / cfg.schedule.period {
        lr *= cfg.schedule.factor;
    }
    lr
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per trainable parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: BTreeMap<ParamId, Tensor>,
    pub v: BTreeMap<ParamId, Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let mut s = Self::default();
        for id in store.trainable_ids() {
            let shape = store.value(id).shape().to_vec();
            s.m.insert(id, Tensor::zeros(&shape));
            s.v.insert(id, Tensor::zeros(&shape));
        }
        s
    }
}

/// One bias-corrected Adam update of every trainable parameter. Frozen
/// parameters are never touched.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &GradientMap,
    state: &mut AdamState,
    hyper: AdamHyper,
) -> Result<()> {
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for &id in &ids {
        let g = grads.get(id).ok_or_else(|| {
            Error::contract(format!("no gradient for trainable {}", store.get(id).name))
        })?;
        if g.shape() != store.value(id).shape() {
            return Err(Error::dim("adam_step", g.shape(), store.value(id).shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for id in ids {
        let g = grads.get(id).expect("checked above");
        let shape = g.shape().to_vec();
        let m = state.m.entry(id).or_insert_with(|| Tensor::zeros(&shape));
        let v = state.v.entry(id).or_insert_with(|| Tensor::zeros(&shape));
        let p = store.value_mut(id);
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= hyper.lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: u64,
    pub dice: f64,
    /// `None` when the prediction is empty.
    pub hd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's training samples.
    pub loss: LossBreakdown,
    pub val_dice: f64,
    pub val_hd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: SplitName,
    pub samples: Vec<SampleMetrics>,
    /// Fraction in [0, 1]; reports print it as a percentage.
    pub mean_dice: f64,
    /// Mean over samples with a defined distance.
    pub mean_hd: Option<f64>,
    pub hd_missing: usize,
    pub history: Vec<EpochLog>,
}

impl MetricsReport {
    fn from_samples(split: SplitName, samples: Vec<SampleMetrics>) -> Self {
        let mean_dice = samples.iter().map(|s| s.dice).sum::<f64>() / samples.len() as f64;
        let hds: Vec<f64> = samples.iter().filter_map(|s| s.hd).collect();
        let mean_hd = (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64);
        MetricsReport {
            split,
            hd_missing: samples.len() - hds.len(),
            samples,
            mean_dice,
            mean_hd,
            history: Vec::new(),
        }
    }

    /// `id,dice_pct,hd_px,hd_missing`, one row per sample and a final
    /// `mean` row. Missing distances are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dice_pct,hd_px,hd_missing\n");
        let hd = |h: Option<f64>| h.map(|h| format!("{h:.4}")).unwrap_or_default();
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{:.4},{},{}",
                s.id,
                100.0 * s.dice,
                hd(s.hd),
                s.hd.is_none() as u8
            );
        }
        let _ = writeln!(
            out,
            "mean,{:.4},{},{}",
            100.0 * self.mean_dice,
            hd(self.mean_hd),
            self.hd_missing
        );
        out
    }
}

/// A sample ready for the network, with its frozen convolutional features
/// precomputed.
struct Prepared<'a> {
    id: u64,
    image: &'a Tensor,
    mask: &'a Tensor,
    cnn: Option<Tensor>,
}

fn prepare<'a>(model: &Model, ds: &'a Dataset, which: SplitName) -> Result<Vec<Prepared<'a>>> {
    ds.subset(which)
        .into_iter()
        .map(|s| {
            Ok(Prepared {
                id: s.id,
                image: &s.image,
                mask: &s.mask,
                cnn: model.cnn_features(&s.image)?,
            })
        })
        .collect()
}

fn eval_prepared(
    model: &Model,
    samples: &[Prepared<'_>],
    split: SplitName,
    jitter: f64,
    seed: u64,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let mut rng = Rng::derived(seed, &[TAG_EVAL_PROMPT, s.id]);
        let prompt = model.make_prompt(s.mask, jitter, &mut rng)?;
        let pred = model.predict(s.image, s.cnn.as_ref(), &prompt)?;
        let dice = dice_score(&pred, s.mask)?;
        let hd = match hausdorff_distance(&pred, s.mask) {
            Ok(d) => Some(d),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        rows.push(SampleMetrics { id: s.id, dice, hd });
    }
    Ok(MetricsReport::from_samples(split, rows))
}

impl Model {
    /// Parameters and optimizer moments as named tensors.
    fn snapshot(&self, adam: &AdamState) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        for (prefix, moments) in [(ADAM_PREFIX_M, &adam.m), (ADAM_PREFIX_V, &adam.v)] {
            for (id, t) in moments {
                out.push((format!("{prefix}{}", self.store.get(*id).name), t.clone()));
            }
        }
        out
    }

    /// Rebuilds the network a checkpoint was taken from.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<(Model, AdamState)> {
        let cfg = &ckpt.meta.config;
        let mut model = Model::new(cfg.model_config(), cfg.ablation, cfg.seed)?;
        let mut adam = AdamState::new(&model.store);
        adam.step = ckpt.meta.step;
        let mut seen = 0;
        for (name, t) in &ckpt.tensors {
            if let Some(p) = name.strip_prefix(ADAM_PREFIX_M) {
                let id = model.store.id(p).ok_or_else(|| unknown(name))?;
                check_shape(&adam.m[&id], t)?;
                adam.m.insert(id, t.clone());
            } else if let Some(p) = name.strip_prefix(ADAM_PREFIX_V) {
                let id = model.store.id(p).ok_or_else(|| unknown(name))?;
                check_shape(&adam.v[&id], t)?;
                adam.v.insert(id, t.clone());
            } else {
                model.store.assign(name, t.clone())?;
                seen += 1;
            }
        }
        if seen != model.store.len() {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "checkpoint holds {seen} parameters, model has {}",
                    model.store.len()
                ),
            });
        }
        Ok((model, adam))
    }
}

fn unknown(name: &str) -> Error {
    Error::Format {
        offset: 0,
        msg: format!("optimizer state for unknown parameter {name}"),
    }
}

fn check_shape(expect: &Tensor, got: &Tensor) -> Result<()> {
    if expect.shape() != got.shape() {
        return Err(Error::dim("checkpoint tensor", got.shape(), expect.shape()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot after the epoch with the best validation Dice.
    pub checkpoint: ModelCheckpoint,
    /// Validation metrics of that snapshot plus the full epoch history.
    pub report: MetricsReport,
    /// Parameters after the final epoch.
    pub final_model: Model,
}

pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, ds, |_| {})
}

/// Whether every value the loss reads is finite. A NaN scale would
/// otherwise surface as a contract error inside the KL terms.
fn pass_is_finite(tape: &Tape, pass: &ForwardPass) -> bool {
    let f = &pass.fusion;
    let mut vars = vec![pass.logits, f.attention.weights];
    vars.extend(f.latents.iter().flat_map(|(_, g)| [g.mu, g.sigma]));
    vars.extend(f.attention.mu_a.iter().chain(&f.attention.sigma_a));
    vars.into_iter().all(|v| tape.value(v).all_finite())
}

/// Like [`train`], calling `on_epoch` after each epoch.
pub fn train_with(
    cfg: &TrainConfig,
    ds: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model_config(), cfg.ablation, cfg.seed)?;
    let train_set = prepare(&model, ds, SplitName::Train)?;
    let val_set = prepare(&model, ds, SplitName::Val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::contract("training needs non-empty train and val splits"));
    }
    let mut adam = AdamState::new(&model.store);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ModelCheckpoint, MetricsReport)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::derived(cfg.seed, &[TAG_SHUFFLE, epoch as u64]).shuffle(&mut order);
        let mut epoch_loss = LossBreakdown::default();
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / chunk.len() as f64;
            let mut grads = GradientMap::default();
            for &i in chunk {
                let s = &train_set[i];
                let key = [epoch as u64, s.id];
                let mut prng = Rng::derived(cfg.seed, &[TAG_PROMPT, key[0], key[1]]);
                let mut nrng = Rng::derived(cfg.seed, &[TAG_NOISE, key[0], key[1]]);
                let prompt = model.make_prompt(s.mask, cfg.jitter, &mut prng)?;
                let mut tape = Tape::new();
                let pass = model.forward(
                    &mut tape,
                    s.image,
                    s.cnn.as_ref(),
                    &prompt,
                    Mode::Train,
                    &mut nrng,
                )?;
                if !pass_is_finite(&tape, &pass) {
                    return Err(Error::Divergence { epoch, batch });
                }
                let (loss, parts) = model.loss(&mut tape, &pass, s.mask, &cfg.lambdas)?;
                if !parts.total.is_finite() {
                    return Err(Error::Divergence { epoch, batch });
                }
                grads.accumulate(&tape.backward(loss)?, scale);
                epoch_loss = epoch_loss.add(&parts);
            }
            adam_step(&mut model.store, &grads, &mut adam, AdamHyper::with_lr(lr))?;
        }
        let val = eval_prepared(&model, &val_set, SplitName::Val, cfg.eval_jitter, cfg.seed)?;
        let log = EpochLog {
            epoch,
            lr,
            loss: epoch_loss.scaled(1.0 / train_set.len() as f64),
            val_dice: val.mean_dice,
            val_hd: val.mean_hd,
        };
        on_epoch(&log);
        history.push(log);
        if best.as_ref().is_none_or(|(d, _, _)| val.mean_dice > *d) {
            let ckpt = ModelCheckpoint {
                tensors: model.snapshot(&adam),
                meta: CheckpointMeta {
                    config: cfg.clone(),
                    step: adam.step,
                    epoch,
                    val_dice: val.mean_dice,
                    rng: Rng::derived(cfg.seed, &[TAG_SHUFFLE, epoch as u64 + 1]),
                },
            };
            best = Some((val.mean_dice, ckpt, val));
        }
    }
    let (_, checkpoint, mut report) = best.expect("at least one epoch");
    report.history = history;
    Ok(TrainOutcome {
        checkpoint,
        report,
        final_model: model,
    })
}

/// Eval-mode metrics of `model` on one split, with box jitter `jitter`.
pub fn evaluate_model(
    model: &Model,
    ds: &Dataset,
    split: SplitName,
    jitter: f64,
    seed: u64,
) -> Result<MetricsReport> {
    let samples = prepare(model, ds, split)?;
    eval_prepared(model, &samples, split, jitter, seed)
}

/// Restores a checkpoint and evaluates it on `split` with the
/// checkpoint's evaluation jitter.
pub fn evaluate(ckpt: &ModelCheckpoint, ds: &Dataset, split: SplitName) -> Result<MetricsReport> {
    let cfg = &ckpt.meta.config;
    evaluate_with_jitter(ckpt, ds, split, cfg.eval_jitter)
}

pub fn evaluate_with_jitter(
    ckpt: &ModelCheckpoint,
    ds: &Dataset,
    split: SplitName,
    jitter: f64,
) -> Result<MetricsReport> {
    let (model, _) = Model::from_checkpoint(ckpt)?;
    evaluate_model(&model, ds, split, jitter, ckpt.meta.config.seed)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub report: MetricsReport,
    pub checkpoint: ModelCheckpoint,
}

/// Trains every toggle combination on the same data and reports test
/// metrics, all-off first.
pub fn ablate(
    base: &TrainConfig,
    ds: &Dataset,
    mut on_epoch: impl FnMut(Ablation, &EpochLog),
) -> Result<Vec<AblationRow>> {
    Ablation::grid()
        .into_iter()
        .map(|ablation| {
            let cfg = TrainConfig {
                ablation,
                ..base.clone()
            };
            let out = train_with(&cfg, ds, |log| on_epoch(ablation, log))?;
            let mut report = evaluate(&out.checkpoint, ds, SplitName::Test)?;
            report.history = out.report.history;
            Ok(AblationRow {
                ablation,
                report,
                checkpoint: out.checkpoint,
            })
        })
        .collect()
}

/// Column order: toggles, then Dice (%), HD (px) and missing-HD count on
/// the synthetic test split.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "frozen_cnn_adapter,vaf,box_prompt,synthetic_dice_pct,synthetic_hd_px,synthetic_hd_missing\n",
    );
    for r in rows {
        let a = r.ablation;
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{},{}",
            a.frozen_cnn_adapter as u8,
            a.vaf as u8,
            a.box_prompt as u8,
            100.0 * r.report.mean_dice,
            r.report.mean_hd.map(|h| format!("{h:.4}")).unwrap_or_default(),
            r.report.hd_missing
        );
    }
    out
}
