//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Runs two full default trainings, so expect
//! roughly 20 minutes on one core.

use std::process::ExitCode;
use std::time::Instant;

use fusionseg::autodiff::{ParamStore, Tape, Tensor};
use fusionseg::checkpoint::{load_checkpoint, save_checkpoint};
use fusionseg::fusion::{reparameterize, variational_attention, FusionParams, GaussianLatent, Modality, Mode};
use fusionseg::gradsuite::{op_suite, pipeline_check, TOLERANCE};
use fusionseg::losses::gaussian_kl_terms;
use fusionseg::metrics::{dice_score, hausdorff_distance};
use fusionseg::model::{Ablation, Model};
use fusionseg::pgm::{decode_pgm, encode_pgm};
use fusionseg::rng::Rng;
use fusionseg::synth::{Ellipse, SplitName};
use fusionseg::train::{
    evaluate, evaluate_model, evaluate_with_jitter, lr_at, train, Schedule, TrainConfig,
    TrainOutcome,
};
use fusionseg::synth::Dataset;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(id: usize, name: &str, o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("{tag} [{id:>2}] {name}: {}", o.detail);
}

// 1
fn gradients() -> Outcome {
    let t = Instant::now();
    let ops = op_suite(100).expect("op suite");
    let (worst_op, op_err) = ops
        .iter()
        .map(|r| (r.op, r.max_rel_error))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let on = pipeline_check(Ablation::ALL_ON, Some(8)).expect("pipeline");
    let off = pipeline_check(Ablation::ALL_OFF, Some(8)).expect("pipeline");
    let net_err = on.max_rel_error().max(off.max_rel_error());
    let secs = t.elapsed().as_secs_f64();
    outcome(
        op_err < TOLERANCE && net_err < TOLERANCE && secs < 120.0,
        format!(
            "{} ops x 100 seeds worst {op_err:.2e} ({worst_op}); network {net_err:.2e} over {} entries; {secs:.1}s (< 1e-4, < 120s)",
            ops.len(),
            on.checked() + off.checked()
        ),
    )
}

fn kl_value(mu: &[f64], sigma: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::vector(mu.to_vec()));
    let s = tape.constant(Tensor::vector(sigma.to_vec()));
    let kl = gaussian_kl_terms(&mut tape, m, s).expect("kl");
    tape.value(kl).item()
}

// 2
fn kl_closed_form() -> Outcome {
    let n = 100_000;
    let mut rng = Rng::new(2024);
    let mut worst_z: f64 = 0.0;
    for _ in 0..10 {
        let d = 1 + rng.below(4);
        let mu: Vec<f64> = (0..d).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let sigma: Vec<f64> = (0..d).map(|_| rng.uniform_in(0.3, 2.0)).collect();
        let closed = kl_value(&mu, &sigma);
        // log q(z) − log p(z) for z ~ q, summed over dimensions.
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let mut x = 0.0;
            for k in 0..d {
                let e = rng.normal();
                let z = mu[k] + sigma[k] * e;
                x += -sigma[k].ln() - 0.5 * e * e + 0.5 * z * z;
            }
            sum += x;
            sum2 += x * x;
        }
        let mean = sum / n as f64;
        let var = (sum2 / n as f64 - mean * mean) * n as f64 / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        worst_z = worst_z.max((mean - closed).abs() / se);
    }
    let zero = kl_value(&[0.0; 4], &[1.0; 4]).abs();
    outcome(
        worst_z < 3.0 && zero < 1e-12,
        format!("worst |MC - closed| = {worst_z:.2} SE (< 3); KL(N(0,1)) = {zero:.1e} (< 1e-12)"),
    )
}

// 3
fn reparameterization() -> Outcome {
    let n = 100_000;
    let mut rng = Rng::new(77);
    let (mut worst_mean, mut worst_var): (f64, f64) = (0.0, 0.0);
    for _ in 0..10 {
        let mu = rng.uniform_in(-3.0, 3.0);
        let sigma = rng.uniform_in(0.1, 3.0);
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::full(&[n], mu));
        let s = tape.constant(Tensor::full(&[n], sigma));
        let eta = Tensor::vector(rng.normals(n));
        let z = reparameterize(&mut tape, GaussianLatent { mu: m, sigma: s }, &eta).expect("z");
        let z = tape.value(z).data();
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        worst_mean = worst_mean.max((mean - mu).abs() / (4.0 * sigma / (n as f64).sqrt()));
        worst_var = worst_var.max((var - sigma * sigma).abs() / (0.05 * sigma * sigma));
    }
    outcome(
        worst_mean < 1.0 && worst_var < 1.0,
        format!(
            "worst mean error {worst_mean:.2} of 4 sigma/sqrt(n); worst variance error {worst_var:.2} of 5%"
        ),
    )
}

// 4
fn attention_contract() -> Outcome {
    let d = 16;
    let mut store = ParamStore::new();
    let mut rng = Rng::new(4);
    let params = FusionParams::new(&mut store, &[(Modality::Vit, d), (Modality::Cnn, d)], d, true, &mut rng);
    let w_h_id = params.w_h;
    let run = |store: &ParamStore, zs: &[Tensor], mode: Mode, eta: &[f64]| {
        let mut tape = Tape::new();
        let vars: Vec<_> = zs.iter().map(|z| tape.constant(z.clone())).collect();
        let att = variational_attention(&mut tape, store, &params, &vars, eta, mode).expect("att");
        let w_h = tape.param(store, w_h_id);
        let h = fusionseg::fusion::fuse(&mut tape, &vars, &att, w_h).expect("fuse");
        (tape.value(att.weights).clone(), tape.value(h).clone())
    };
    let mut sum_err: f64 = 0.0;
    let mut shift_err: f64 = 0.0;
    let (_, b_m, _) = params.attention_ids();
    for _ in 0..20 {
        let zs = [Tensor::randn(&[d], 2.0, &mut rng), Tensor::randn(&[d], 2.0, &mut rng)];
        let eta = rng.normals(2);
        for mode in [Mode::Train, Mode::Eval] {
            let (w, h) = run(&store, &zs, mode, &eta);
            sum_err = sum_err.max((w.sum() - 1.0).abs());
            // The attention bias is shared, so shifting it shifts every logit.
            let mut shifted = store.clone();
            shifted.value_mut(b_m).data_mut()[0] += rng.uniform_in(-5.0, 5.0);
            let (w2, h2) = run(&shifted, &zs, mode, &eta);
            shift_err = shift_err.max(w.max_abs_diff(&w2)).max(h.max_abs_diff(&h2));
        }
    }
    let z = Tensor::randn(&[d], 1.0, &mut rng);
    let (w, _) = run(&store, &[z.clone(), z], Mode::Eval, &[]);
    let sym = w.data().iter().map(|a| (a - 0.5).abs()).fold(0.0, f64::max);
    outcome(
        sum_err < 1e-12 && sym < 1e-12 && shift_err < 1e-12,
        format!("sum error {sum_err:.1e}; symmetric error {sym:.1e}; shift change {shift_err:.1e} (all < 1e-12)"),
    )
}

fn boundary_oracle(m: &Tensor) -> Vec<(i64, i64)> {
    let (h, w) = (m.shape()[0] as i64, m.shape()[1] as i64);
    let on = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.data()[(y * w + x) as usize] > 0.5;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

fn hausdorff_oracle(a: &Tensor, b: &Tensor) -> Option<f64> {
    let (pa, pb) = (boundary_oracle(a), boundary_oracle(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |p: &[(i64, i64)], q: &[(i64, i64)]| {
        p.iter()
            .map(|&(y, x)| q.iter().map(|&(v, u)| (y - v).pow(2) + (x - u).pow(2)).min().unwrap())
            .max()
            .unwrap()
    };
    Some((directed(&pa, &pb).max(directed(&pb, &pa)) as f64).sqrt())
}

fn dice_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let count = |m: &Tensor| m.data().iter().filter(|&&v| v > 0.5).count();
    let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x > 0.5 && **y > 0.5).count();
    let total = count(a) + count(b);
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Number of pairs on which the library disagrees with the oracles.
fn metric_mismatches(a: &Tensor, b: &Tensor) -> usize {
    let dice_ok = dice_score(a, b).expect("dice") == dice_oracle(a, b);
    let hd_ok = match (hausdorff_distance(a, b), hausdorff_oracle(a, b)) {
        (Ok(x), Some(y)) => x == y,
        (Err(_), None) => true,
        _ => false,
    };
    (!dice_ok) as usize + (!hd_ok) as usize
}

fn mask_from_bits(bits: u32, h: usize, w: usize) -> Tensor {
    let data = (0..h * w).map(|i| ((bits >> i) & 1) as f64).collect();
    Tensor::new(&[h, w], data).unwrap()
}

fn rect(y0: usize, y1: usize, x0: usize, x1: usize, n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for y in y0..y1 {
        for x in x0..x1 {
            m.data_mut()[y * n + x] = 1.0;
        }
    }
    m
}

fn random_mask(rng: &mut Rng, n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for _ in 0..1 + rng.below(3) {
        let e = Ellipse {
            cx: rng.uniform_in(0.0, n as f64),
            cy: rng.uniform_in(0.0, n as f64),
            a: rng.uniform_in(1.0, n as f64 / 2.0),
            b: rng.uniform_in(1.0, n as f64 / 2.0),
            theta: rng.uniform_in(0.0, std::f64::consts::PI),
        };
        let r = e.rasterize(n, n);
        for (d, s) in m.data_mut().iter_mut().zip(r.data()) {
            *d = d.max(*s);
        }
    }
    // Salt-and-pepper flips break up smooth boundaries.
    let p = rng.uniform_in(0.0, 0.1);
    for v in m.data_mut() {
        if rng.bernoulli(p) {
            *v = 1.0 - *v;
        }
    }
    m
}

// 5
fn metric_oracles() -> Outcome {
    let mut bad = 0;
    let mut pairs = 0;
    let small: Vec<Tensor> = (0..1u32 << 9).map(|b| mask_from_bits(b, 3, 3)).collect();
    for a in &small {
        for b in &small {
            bad += metric_mismatches(a, b);
            pairs += 1;
        }
    }
    let n = 8;
    let mut rects = vec![Tensor::zeros(&[n, n])];
    for y0 in 0..n {
        for y1 in y0 + 1..=n {
            for x0 in 0..n {
                for x1 in x0 + 1..=n {
                    rects.push(rect(y0, y1, x0, x1, n));
                }
            }
        }
    }
    for a in &rects {
        for b in &rects {
            bad += metric_mismatches(a, b);
            pairs += 1;
        }
    }
    let mut rng = Rng::new(5);
    for _ in 0..1000 {
        let (a, b) = (random_mask(&mut rng, 32), random_mask(&mut rng, 32));
        bad += metric_mismatches(&a, &b);
        pairs += 1;
    }
    outcome(
        bad == 0,
        format!("{pairs} pairs (all 3x3 pairs, all 8x8 rectangle pairs, 1000 random 32x32): {bad} mismatches"),
    )
}

// 6
fn freeze_and_identity(cfg: &TrainConfig, run: &TrainOutcome, ds: &Dataset) -> Outcome {
    let fresh = Model::new(cfg.model_config(), cfg.ablation, cfg.seed).expect("model");
    let mut frozen = 0;
    let mut changed = 0;
    for (_, p) in fresh.store.iter().filter(|(_, p)| !p.trainable) {
        frozen += 1;
        let id = run.final_model.store.id(&p.name).expect("same layout");
        if !run.final_model.store.value(id).bit_eq(&p.value) {
            changed += 1;
        }
    }
    let mut worst: f64 = 0.0;
    for s in ds.subset(SplitName::Test).into_iter().take(8) {
        let mut tape = Tape::new();
        let x = tape.constant(s.image.clone());
        let a = fresh.vit.forward(&mut tape, &fresh.store, x).expect("vit");
        let b = fresh.vit.forward_backbone_only(&mut tape, &fresh.store, x).expect("vit");
        worst = worst.max(tape.value(a).max_abs_diff(tape.value(b)));
    }
    outcome(
        changed == 0 && worst <= 1e-12,
        format!(
            "{changed} of {frozen} frozen tensors changed after {} epochs; adapted vs backbone-only at init {worst:.1e} (<= 1e-12)",
            cfg.epochs
        ),
    )
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

// 7
fn learning(cfg: &TrainConfig, run: &TrainOutcome, ds: &Dataset, secs: f64) -> Outcome {
    let test = evaluate(&run.checkpoint, ds, SplitName::Test).expect("eval");
    let untrained = Model::new(cfg.model_config(), cfg.ablation, cfg.seed).expect("model");
    let base = evaluate_model(&untrained, ds, SplitName::Test, cfg.eval_jitter, cfg.seed).expect("eval");

    let off_cfg = TrainConfig {
        ablation: Ablation::ALL_OFF,
        ..cfg.clone()
    };
    let off = train(&off_cfg, ds).expect("all-off run");
    let off_test = evaluate(&off.checkpoint, ds, SplitName::Test).expect("eval");

    let hd = test.mean_hd.unwrap_or(f64::INFINITY);
    let pass = test.mean_dice > 0.85
        && hd < 8.0
        && base.mean_dice < 0.4
        && secs < 900.0
        && test.mean_dice >= off_test.mean_dice;
    outcome(
        pass,
        format!(
            "test dice {} (> 85%), HD {hd:.2} px (< 8, {} missing), untrained {} (< 40%), all-off {} (<= all-on), {:.0}s (< 900s)",
            pct(test.mean_dice),
            test.hd_missing,
            pct(base.mean_dice),
            pct(off_test.mean_dice),
            secs
        ),
    )
}

// 8
fn prompt_quality(run: &TrainOutcome, ds: &Dataset) -> Outcome {
    let tight = evaluate_with_jitter(&run.checkpoint, ds, SplitName::Test, 0.0).expect("eval");
    let loose = evaluate_with_jitter(&run.checkpoint, ds, SplitName::Test, 0.4).expect("eval");
    outcome(
        tight.mean_dice >= loose.mean_dice,
        format!("dice at jitter 0: {}; at jitter 0.4: {}", pct(tight.mean_dice), pct(loose.mean_dice)),
    )
}

// 9
fn determinism(run: &TrainOutcome) -> Outcome {
    let mut cfg = TrainConfig::default();
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.data.n_train = 24;
    cfg.data.n_val = 4;
    cfg.data.n_test = 4;
    let ds = cfg.data.generate().expect("data");
    let a = train(&cfg, &ds).expect("run a");
    let b = train(&cfg, &ds).expect("run b");
    let same_runs = a.checkpoint.bit_eq(&b.checkpoint) && a.report == b.report;

    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("best.ckpt");
    save_checkpoint(&run.checkpoint, &path).expect("save");
    let round_trip = load_checkpoint(&path).expect("load").bit_eq(&run.checkpoint);

    let mut rng = Rng::new(9);
    let mut pgm_err: f64 = 0.0;
    let mut masks_exact = true;
    for _ in 0..100 {
        let (h, w) = (1 + rng.below(40), 1 + rng.below(40));
        let img = Tensor::uniform(&[h, w], 0.0, 1.0, &mut rng);
        let back = decode_pgm(&encode_pgm(&img).expect("encode")).expect("decode");
        pgm_err = pgm_err.max(back.max_abs_diff(&img));
        let mask = img.map(|v| (v > 0.5) as u8 as f64);
        masks_exact &= decode_pgm(&encode_pgm(&mask).expect("encode")).expect("decode").bit_eq(&mask);
    }
    outcome(
        same_runs && round_trip && pgm_err <= 1.0 / 255.0 && masks_exact,
        format!(
            "repeat runs identical: {same_runs}; checkpoint round trip exact: {round_trip}; PGM max error {pgm_err:.2e} (<= 1/255), masks exact: {masks_exact}"
        ),
    )
}

// 10
fn schedule() -> Outcome {
    let cfg = TrainConfig {
        lr0: 0.01,
        schedule: Schedule {
            factor: 0.1,
            period: 50,
        },
        ..TrainConfig::default()
    };
    let want = [(0, 0.01), (49, 0.01), (50, 0.001), (100, 0.0001), (199, 1e-5)];
    let got: Vec<f64> = want.iter().map(|&(e, _)| lr_at(e, &cfg)).collect();
    let pass = want.iter().zip(&got).all(|(&(_, w), &g)| g == w);
    outcome(pass, format!("epochs 0/49/50/100/199 -> {got:?}"))
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut step = |id: usize, name: &'static str, o: Outcome| {
        report(id, name, &o);
        results.push((id, name, o));
    };
    step(10, "lr schedule", schedule());
    step(2, "KL closed form", kl_closed_form());
    step(3, "reparameterization moments", reparameterization());
    step(4, "attention contract", attention_contract());
    step(5, "metric oracles", metric_oracles());
    step(1, "gradient correctness", gradients());

    let cfg = TrainConfig::default();
    let ds = cfg.data.generate().expect("data");
    let t = Instant::now();
    let run = train(&cfg, &ds).expect("default run");
    let secs = t.elapsed().as_secs_f64();
    step(6, "freeze and adapter identity", freeze_and_identity(&cfg, &run, &ds));
    step(8, "prompt quality", prompt_quality(&run, &ds));
    step(9, "determinism and serialization", determinism(&run));
    step(7, "desk-scale learning", learning(&cfg, &run, &ds, secs));

    results.sort_by_key(|r| r.0);
    println!("\nsummary");
    for (id, name, o) in &results {
        report(*id, name, o);
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
