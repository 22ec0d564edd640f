use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use satrack::data::{generate_dataset, load_dataset, load_sequence, write_dataset, GenSpec};
use satrack::harness::{
    build_vocab, evaluate_ope, inspect_sample, load_model, model_gradcheck, parse_variants, run_ablation,
    track_sequence, write_boxes, TrainConfig, Trainer,
};
use satrack::tensor::{op_gradchecks, FdOptions};

/// Environment variable setting the worker thread count.
const THREADS_ENV: &str = "SATRACK_THREADS";

#[derive(Parser)]
#[command(name = "satrack", version, about = "Vision-language single object tracker")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset of moving colored shapes.
    GenerateData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Index of the first sequence; datasets with disjoint ranges share no sequence.
        #[arg(long, default_value_t = 0)]
        first: usize,
        #[arg(long, default_value_t = 64)]
        frame_size: usize,
        #[arg(long, default_value_t = 32)]
        length: usize,
        #[arg(long, default_value_t = 2)]
        distractors: usize,
        #[arg(long, default_value_t = 0)]
        occluders: usize,
    },
    /// Train a model; checkpoints and `losses.csv` go to `--out`.
    Train {
        /// JSON training config, or `desk` / `full` for the presets.
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint`.
        #[arg(long)]
        resume: bool,
    },
    /// Track every sequence and write per-sequence metrics as CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Track one sequence and write `frame,x_tl,y_tl,x_br,y_br` lines.
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every op, or of the whole model.
    Gradcheck {
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        full_model: bool,
        /// Entries sampled per parameter tensor in the full-model check.
        #[arg(long, default_value_t = 4)]
        entries: usize,
    },
    /// Train and evaluate several architecture variants from one seed.
    Ablate {
        /// Comma-separated variant names.
        #[arg(long, default_value = "baseline,w_tem,wo_dm,full")]
        variants: String,
        #[arg(long, default_value = "desk")]
        config: String,
        /// Training sequences.
        #[arg(long)]
        data: PathBuf,
        /// Evaluation sequences; defaults to the last fifth of `--data`.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Print a preset training config as JSON, as a starting point for `--config`.
    PrintConfig {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Dump attention maps, gates and score maps for one frame.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Sequence directory.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long, default_value_t = 1)]
        frame: usize,
        #[arg(long)]
        dump_dir: PathBuf,
    },
}

fn load_config(arg: &str) -> Result<TrainConfig> {
    let cfg = match arg {
        "desk" => TrainConfig::desk(),
        "full" => TrainConfig::full(),
        path => TrainConfig::from_json_file(Path::new(path)).with_context(|| format!("loading config {path}"))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenerateData {
            seed,
            count,
            out,
            first,
            frame_size,
            length,
            distractors,
            occluders,
        } => {
            let spec = GenSpec {
                frame_size,
                length,
                distractors,
                occluders,
                ..GenSpec::default()
            };
            let seqs = generate_dataset(seed, first, count, &spec)?;
            write_dataset(&out, &seqs)?;
            println!("wrote {count} sequences to {}", out.display());
        }
        Cmd::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = load_config(&config)?;
            let seqs = load_dataset(&data)?;
            let mut trainer = if resume {
                Trainer::resume(&out.join("checkpoint"), Some(cfg))?
            } else {
                Trainer::new(cfg, build_vocab(&seqs))?
            };
            let start = Instant::now();
            trainer.fit(&seqs, Some(&out))?;
            println!(
                "trained {} epochs in {:.1}s; checkpoint at {}",
                trainer.epoch,
                start.elapsed().as_secs_f64(),
                out.join("checkpoint").display()
            );
        }
        Cmd::Eval { ckpt, data, report } => {
            let (model, cfg) = load_model(&ckpt)?;
            let seqs = load_dataset(&data)?;
            let r = evaluate_ope(&model, &seqs, &cfg.crop)?;
            r.write_csv(&report)?;
            println!(
                "success {:.4}  precision {:.4}  norm precision {:.4}",
                r.success, r.precision, r.norm_precision
            );
        }
        Cmd::Track { ckpt, sequence, out } => {
            let (model, cfg) = load_model(&ckpt)?;
            let seq = load_sequence(&sequence)?;
            let boxes = track_sequence(&model, &seq, &cfg.crop)?;
            write_boxes(&out, &boxes)?;
            println!("wrote {} boxes to {}", boxes.len(), out.display());
        }
        Cmd::Gradcheck {
            config,
            full_model,
            entries,
        } => {
            if full_model {
                let cfg = load_config(&config)?;
                let opts = FdOptions {
                    max_entries_per_param: Some(entries),
                    ..FdOptions::default()
                };
                let r = model_gradcheck(&cfg, 2, &opts)?;
                println!(
                    "full model: {} entries, max relative error {:.3e}",
                    r.entries_checked, r.max_rel_error
                );
                if r.max_rel_error >= 1e-4 {
                    bail!("full-model gradient check failed");
                }
            } else {
                let mut worst: f64 = 0.0;
                for (op, r) in op_gradchecks(0)? {
                    println!("{op:<22} {:.3e}", r.max_rel_error);
                    worst = worst.max(r.max_rel_error);
                }
                if worst >= 1e-6 {
                    bail!("op gradient check failed (max {worst:.3e})");
                }
            }
        }
        Cmd::Ablate {
            variants,
            config,
            data,
            eval_data,
            out,
        } => {
            let cfg = load_config(&config)?;
            let variants = parse_variants(&variants)?;
            let mut train = load_dataset(&data)?;
            let eval = match eval_data {
                Some(p) => load_dataset(&p)?,
                None => {
                    let keep = train.len() - train.len() / 5;
                    train.split_off(keep)
                }
            };
            let rows = run_ablation(&variants, &cfg, &train, &eval, Some(&out))?;
            println!("{:<14} {:>8} {:>10} {:>10}", "variant", "success", "precision", "norm_prec");
            for r in rows {
                println!(
                    "{:<14} {:>8.4} {:>10.4} {:>10.4}",
                    r.variant, r.success, r.precision, r.norm_precision
                );
            }
        }
        Cmd::PrintConfig { preset } => {
            let cfg = match preset.as_str() {
                "desk" => TrainConfig::desk(),
                "full" => TrainConfig::full(),
                other => return Err(satrack::Error::Config(format!("unknown preset `{other}` (desk, full)")).into()),
            };
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
        Cmd::Inspect {
            ckpt,
            sample,
            frame,
            dump_dir,
        } => {
            let (model, cfg) = load_model(&ckpt)?;
            let seq = load_sequence(&sample)?;
            let written = inspect_sample(&model, &seq, frame, &cfg.crop, &cfg.loss, &dump_dir)?;
            println!("wrote {} maps to {}", written.len(), dump_dir.display());
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| satrack::Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<satrack::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match init_threads().and_then(|_| run(cli.cmd)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
