use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fusionseg::checkpoint::{load_checkpoint, save_checkpoint};
use fusionseg::gradsuite::{op_suite, pipeline_check, TOLERANCE};
use fusionseg::model::Ablation;
use fusionseg::prompt::render_text_prompt;
use fusionseg::synth::{make_split, Dataset, SplitName, SynthConfig};
use fusionseg::train::{ablate, ablation_csv, evaluate_with_jitter, train_with, TrainConfig};
use fusionseg::{Error, Result};

#[derive(Parser)]
#[command(version, about = "Box-prompted segmentation with variational attention fusion")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset as PGM files plus manifest.json (7:1:2 split).
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a JSON config and save the best-validation checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write a per-sample CSV report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        report: PathBuf,
        /// Box jitter; defaults to the checkpoint's evaluation jitter.
        #[arg(long)]
        jitter: Option<f64>,
    },
    /// Train all 8 component combinations and write ablation.csv.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare tape gradients with finite differences.
    Gradcheck {
        /// Also check the whole network's loss on a two-sample batch.
        #[arg(long)]
        full: bool,
    },
    /// Print the text-prompt template with [target] substituted.
    PromptTemplate {
        #[arg(long)]
        target: String,
    },
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    TrainConfig::from_json(&text)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn summary(dice: f64, hd: Option<f64>, missing: usize) -> String {
    let hd = hd.map_or("n/a".to_string(), |h| format!("{h:.3}"));
    format!("dice {:.2}%  hd {hd} px  ({missing} missing)", 100.0 * dice)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { n, seed, out } => {
            let split = make_split(n, (0.7, 0.1, 0.2), seed)?;
            let ds = Dataset::generate(SynthConfig::default(), split)?;
            let manifest = ds.write_dir(&out)?;
            println!("wrote {} samples to {}", manifest.samples.len(), out.display());
        }
        Cmd::Train { config, out } => {
            let cfg = read_config(config.as_deref())?;
            let ds = cfg.data.generate()?;
            let outcome = train_with(&cfg, &ds, |log| {
                eprintln!(
                    "epoch {:>3}  lr {:.1e}  loss {:.4}  val dice {:.4}",
                    log.epoch, log.lr, log.loss.total, log.val_dice
                );
            })?;
            save_checkpoint(&outcome.checkpoint, &out)?;
            let r = &outcome.report;
            println!(
                "best epoch {}  val {}",
                outcome.checkpoint.meta.epoch,
                summary(r.mean_dice, r.mean_hd, r.hd_missing)
            );
        }
        Cmd::Eval {
            ckpt,
            split,
            report,
            jitter,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let cfg = &ckpt.meta.config;
            let ds = cfg.data.generate()?;
            let r = evaluate_with_jitter(&ckpt, &ds, split, jitter.unwrap_or(cfg.eval_jitter))?;
            write(&report, &r.to_csv())?;
            println!("{split}: {}", summary(r.mean_dice, r.mean_hd, r.hd_missing));
        }
        Cmd::Ablate { config, out } => {
            let cfg = read_config(config.as_deref())?;
            let ds = cfg.data.generate()?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let rows = ablate(&cfg, &ds, |a, log| {
                eprintln!(
                    "[cnn {} vaf {} box {}] epoch {:>3}  loss {:.4}  val dice {:.4}",
                    a.frozen_cnn_adapter as u8, a.vaf as u8, a.box_prompt as u8,
                    log.epoch, log.loss.total, log.val_dice
                );
            })?;
            for row in &rows {
                let a = row.ablation;
                let name = format!(
                    "cnn{}_vaf{}_box{}.ckpt",
                    a.frozen_cnn_adapter as u8, a.vaf as u8, a.box_prompt as u8
                );
                save_checkpoint(&row.checkpoint, &out.join(name))?;
            }
            let csv = ablation_csv(&rows);
            write(&out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Cmd::Gradcheck { full } => {
            let mut worst: f64 = 0.0;
            for r in op_suite(100)? {
                println!("{:<18} {:>6} entries  max rel err {:.2e}", r.op, r.checked, r.max_rel_error);
                worst = worst.max(r.max_rel_error);
            }
            if full {
                for a in [Ablation::ALL_ON, Ablation::ALL_OFF] {
                    let r = pipeline_check(a, Some(8))?;
                    println!(
                        "network (cnn {} vaf {} box {}) {:>4} entries  max rel err {:.2e}",
                        a.frozen_cnn_adapter as u8, a.vaf as u8, a.box_prompt as u8,
                        r.checked(),
                        r.max_rel_error()
                    );
                    worst = worst.max(r.max_rel_error());
                }
            }
            if worst >= TOLERANCE {
                return Err(Error::Contract(format!(
                    "gradient check failed: max relative error {worst:.2e} >= {TOLERANCE:.0e}"
                )));
            }
            println!("ok: max relative error {worst:.2e}");
        }
        Cmd::PromptTemplate { target } => println!("{}", render_text_prompt(&target)),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
