use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use pase_cli::{load_run_config, run, Mode, Overrides};

#[derive(Debug, Parser)]
#[command(name = "pase", about = "Augmented subspace eigensolver experiments")]
struct Cli {
    /// configuration file
    #[arg(long)]
    config: PathBuf,
    /// run this mode instead of the file's
    #[arg(long)]
    mode: Option<Mode>,
    /// worker threads (default: all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("warning: cannot size the thread pool: {e}");
        }
    }
    let ov = Overrides {
        mode: cli.mode,
        out: cli.out,
        seed: cli.seed,
    };
    let code = match load_run_config(&cli.config, &ov) {
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Ok((cfg, warnings)) => {
            for w in &warnings {
                eprintln!("warning: line {}: {}: {}", w.line, w.key, w.message);
            }
            match run(&cfg, &warnings) {
                Ok(out) => {
                    let s = &out.summary;
                    let done = s.converged.iter().filter(|&&c| c).count();
                    println!(
                        "{}: {} of {} pairs converged (fine dofs {}), reports in {}",
                        s.mode,
                        done,
                        s.converged.len(),
                        s.ndofs_fine,
                        out.output.display()
                    );
                    out.exit_code()
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
    };
    ExitCode::from(code as u8)
}
