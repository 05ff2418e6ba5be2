use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cyclereward::config::RunConfig;
use cyclereward::{run, Error};

#[derive(Parser)]
#[command(version, about = "Reward fine-tuning for a toy conditional diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    GenData(Common),
    /// Train the denoiser on the diffusion loss.
    Pretrain(Common),
    /// Fine-tune the control branch with the configured strategy.
    Finetune(Common),
    /// Write condition / sample / extraction strips as PGM.
    Sample(Common),
    /// Score controllability of a checkpoint.
    Eval(Common),
    /// Record gradient-tape cost per strategy.
    BenchTape(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config; omitted means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Schedule(_) => 2,
        Error::MissingFile(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn execute(command: Command) -> Result<(), Error> {
    let (Command::GenData(c)
    | Command::Pretrain(c)
    | Command::Finetune(c)
    | Command::Sample(c)
    | Command::Eval(c)
    | Command::BenchTape(c)) = &command;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    println!("{}", cfg.to_json());
    let out = &c.out;
    match command {
        Command::GenData(_) => {
            let m = run::gen_data(&cfg, out)?;
            print!("{}", m.render());
        }
        Command::Pretrain(_) => {
            let s = run::pretrain(&cfg, out)?;
            if let (Some(a), Some(b)) = (s.first_loss, s.last_loss) {
                println!("loss {a:.6} -> {b:.6}");
            }
            println!("validation loss {:.6}", s.validation_loss);
        }
        Command::Finetune(_) => {
            let s = run::finetune(&cfg, out)?;
            println!("{}: {} steps, validation loss {:.6}", s.strategy, s.steps, s.validation_loss);
        }
        Command::Sample(_) => {
            let n = run::sample(&cfg, out)?;
            println!("wrote {n} strips to {}", out.join(run::SAMPLE_DIR).display());
        }
        Command::Eval(_) => {
            let r = run::eval(&cfg, out)?;
            println!("{} {} = {:.6} over {} samples", r.kind.name(), r.metric, r.value, r.n_samples);
        }
        Command::BenchTape(_) => {
            let s = run::bench_tape(&cfg, out)?;
            for r in &s.records {
                println!("{:<18} T={:<5} k={:<2} nodes={:<6} {:.4}s", r.strategy, r.schedule_steps, r.sampling_steps, r.tape_nodes, r.wall_time);
            }
            println!(
                "nodes = {:.3}*k + {:.3} (R^2 {:.6}), ratio at {} = {:.3}",
                s.slope, s.intercept, s.r2, cfg.bench.extrapolate_to, s.ratio
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
