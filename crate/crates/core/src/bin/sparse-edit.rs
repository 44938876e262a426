use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparse_edit_core::bench::{cmd_edit, cmd_generate, cmd_sweep, EditArgs, GenerateArgs, SweepArgs};
use sparse_edit_core::Error;

#[derive(Parser)]
#[command(name = "sparse-edit", version, about = "Cached sparse re-generation for a toy diffusion U-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dense generation; writes the final latent, step latents, cache spill and manifest.
    Generate {
        /// U-Net configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated token ids.
        #[arg(long, value_delimiter = ',', required = true)]
        prompt: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Edit a cached generation; writes the edited latent, mask.pgm and report.json.
    Edit {
        /// Session JSON.
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// PGM or FT4 mask replacing detection.
        #[arg(long)]
        user_mask: Option<PathBuf>,
        /// Hot-tier budget in bytes.
        #[arg(long)]
        hot_budget: Option<u64>,
        /// Regenerate the new prompt densely instead (baseline).
        #[arg(long)]
        no_sparse: bool,
    },
    /// Time user-mask edits over square masks of the given edit sizes.
    Sweep {
        #[arg(long)]
        session: PathBuf,
        /// Comma-separated fractions of the latent, e.g. 0.05,0.15,0.3.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        sizes: Vec<f64>,
        /// Output CSV; the JSON report is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { config, prompt, out } => {
            let m = cmd_generate(&GenerateArgs { config, prompt, out: out.clone() })?;
            println!("final latent {} (sha256 {})", out.join(&m.final_latent).display(), m.final_latent_sha256);
            println!("cache: {} entries, {} bytes", m.cache_entries, m.cache_bytes);
        }
        Command::Edit {
            session,
            out,
            user_mask,
            hot_budget,
            no_sparse,
        } => {
            let s = cmd_edit(&EditArgs {
                session,
                out: out.clone(),
                user_mask,
                hot_budget,
                no_sparse,
            })?;
            println!(
                "status {:?}, edit size {:.4}, phase-2 MACs {}, latent sha256 {}",
                s.status, s.edit_size, s.phase2_macs, s.latent_sha256
            );
            println!("outputs in {}", out.display());
        }
        Command::Sweep {
            session,
            sizes,
            out,
            repeats,
            warmup,
        } => {
            let r = cmd_sweep(&SweepArgs {
                session,
                sizes,
                out: out.clone(),
                repeats,
                warmup,
            })?;
            for rec in &r.records {
                println!(
                    "size {:.4}: macs ratio {:.3}, speedup {:.3}",
                    rec.edit_size,
                    rec.macs_ratio.unwrap_or(f64::NAN),
                    rec.speedup.unwrap_or(f64::NAN)
                );
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
