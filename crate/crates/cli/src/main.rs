use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gsaflow_cli::{
    cmd_eval, cmd_gen_data, cmd_grad_check, cmd_sample, cmd_train_stage1, cmd_train_stage2, load_config,
    EvalMode, NumericalFailure, Split,
};

#[derive(Parser)]
#[command(name = "gsaflow", version, about = "Group-shared attention flow model: data, training, sampling, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (`key = value` lines). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic story dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// `train` identities or the unseen `eval` identities.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train the consistency adapter.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Control run: every forward without references.
        #[arg(long)]
        no_gsa: bool,
    },
    /// Train the preference adapter on synthetic preference pools.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Generate latents for captions, conditioned on one identity's frames.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        identity: usize,
        /// Comma-separated `id:scene:style` triples; defaults to the identity's remaining frames.
        #[arg(long)]
        captions: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        drop_refs_in_uncond: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Consistency scores on a held-out dataset, appended as a CSV row.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "with-gsa")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the training losses on a tiny model.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common, out, split } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            print!("{}", cmd_gen_data(&cfg, Split::parse(&split)?, &out)?);
        }
        Command::TrainStage1 { common, input, out, metrics, no_gsa } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            cmd_train_stage1(&cfg, &input, &out, metrics.as_deref(), !no_gsa)?;
            println!("wrote {}", out.display());
        }
        Command::TrainStage2 { common, input, stage1, out, metrics } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let s = cmd_train_stage2(&cfg, &input, &stage1, &out, metrics.as_deref())?;
            println!("wrote {}", out.display());
            println!("final loss {} mean accuracy {:.4}", s.final_loss, s.mean_accuracy);
            println!("base frozen {} phi_c frozen {}", s.base_hash.0 == s.base_hash.1, s.phi_c_hash.0 == s.phi_c_hash.1);
        }
        Command::Sample {
            common,
            checkpoint,
            input,
            identity,
            captions,
            steps,
            cfg_scale,
            drop_refs_in_uncond,
            out,
        } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let mut sampler = cfg.sampler.clone();
            if let Some(s) = steps {
                sampler.steps = s;
            }
            if let Some(s) = cfg_scale {
                sampler.cfg_scale = s;
            }
            sampler.drop_refs_in_uncond |= drop_refs_in_uncond;
            for p in cmd_sample(&checkpoint, &input, identity, captions.as_deref(), &sampler, cfg.seed, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Eval { common, checkpoint, input, mode, out } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let row = cmd_eval(&checkpoint, &input, EvalMode::parse(&mode)?, cfg.seed, out.as_deref())?;
            println!("{}", gsaflow_cli::EVAL_HEADER);
            println!("{}", row.csv());
        }
        Command::GradCheck { common } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let lines = cmd_grad_check(&cfg)?;
            for l in lines {
                println!("{} coords {} max rel err {:.3e} ok", l.name, l.coordinates, l.max_relative_error);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<NumericalFailure>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
