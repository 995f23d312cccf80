use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spargan::runner::{cmd_gen_data, cmd_pretrain, cmd_run};

/// Self-paced adversarial training on a synthetic multimodal benchmark.
#[derive(Parser)]
#[command(name = "spargan", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset from a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the world seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Representation learning: train the GAN on base classes.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the training seed (default: first config seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Ablation grid, evolution logs and chunk analysis.
    Run {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace the config seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, seed } => {
            cmd_gen_data(&config, &out, seed).map(|path| {
                println!("dataset written to {}", path.display());
            })
        }
        Command::Pretrain {
            data,
            config,
            out,
            resume,
            seed,
        } => cmd_pretrain(&data, &config, &out, resume.as_deref(), seed).map(|path| {
            println!("checkpoint written to {}", path.display());
        }),
        Command::Run {
            data,
            checkpoint,
            config,
            out,
            seed,
        } => cmd_run(&data, &checkpoint, &config, &out, seed).map(|artifacts| {
            println!("ablation written to {}", artifacts.ablation_path.display());
            for path in &artifacts.evolution_paths {
                println!("evolution written to {}", path.display());
            }
            if let Some(path) = &artifacts.chunk_path {
                println!("chunk report written to {}", path.display());
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // single line, machine-parsable: error: <stage>: <detail>
            let detail = err.to_string().replace('\n', " ");
            eprintln!("error: {detail}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
