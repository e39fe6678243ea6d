use std::path::PathBuf;
use std::process::ExitCode;

use abd_core::data::{synth_generate, Split, SynthConfig};
use abd_train::checkpoint;
use abd_train::dump::displace_dump;
use abd_train::trainer::evaluate_checkpoint;
use abd_train::{TrainConfig, TrainError, Trainer};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "abd", version, about = "Semi-supervised segmentation with bidirectional patch displacement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic segmentation corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 20)]
        n_val: usize,
        #[arg(long, default_value_t = 40)]
        n_test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train both networks.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value`, applied after the file and ABD_SEED. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from `<out_dir>/last` if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the first network of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Corpus location, if it moved since training.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Also write the result as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write displaced samples and their plans.
    DisplaceDump {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Use the networks of this checkpoint instead of fresh ones.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), TrainError> {
    match cli.command {
        Command::Synth { out, n_train, n_val, n_test, size, classes, seed } => {
            let cfg = SynthConfig { n_train, n_val, n_test, size, num_classes: classes, seed };
            let manifest = synth_generate(&cfg, &out)?;
            println!("wrote {} samples to {}", manifest.entries.len(), out.display());
        }
        Command::Train { config, overrides, resume } => {
            let cfg = TrainConfig::load(config.as_deref(), &overrides)?;
            let out = cfg.out_dir.clone();
            let mut trainer = Trainer::from_config(cfg)?;
            let summary = trainer.fit(resume)?;
            match summary.best {
                Some(b) => println!(
                    "trained {} iterations; best val mean foreground dsc {:.4} at iteration {} ({})",
                    summary.iterations,
                    b.mean_fg_dsc,
                    b.iteration,
                    out.display()
                ),
                None => println!("trained {} iterations ({})", summary.iterations, out.display()),
            }
        }
        Command::Eval { ckpt, split, data_dir, json } => {
            let split: Split = split.parse()?;
            let result = evaluate_checkpoint(&ckpt, split, data_dir)?;
            print!("{}", result.table());
            if let Some(p) = json {
                let text = serde_json::to_string_pretty(&result).expect("serializable result");
                std::fs::write(&p, text).map_err(|source| TrainError::Io { path: p, source })?;
            }
        }
        Command::DisplaceDump { config, overrides, n, out, ckpt } => {
            let cfg = TrainConfig::load(config.as_deref(), &overrides)?;
            let mut trainer = Trainer::from_config(cfg)?;
            if let Some(dir) = ckpt {
                let (net1, net2) = trainer.nets_mut();
                checkpoint::read_weights(&dir.join(checkpoint::MODEL_FILES[0]), net1)?;
                checkpoint::read_weights(&dir.join(checkpoint::MODEL_FILES[1]), net2)?;
            }
            let records = displace_dump(&trainer, n, &out)?;
            println!("wrote {} displaced pairs to {}", records.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
