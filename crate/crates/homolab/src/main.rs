use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use homolab::runner::{self, Kind, RunOptions};
use homolab::Error;

/// Numerical experiments on two-scale expansions in random media.
#[derive(Parser, Debug)]
#[command(name = "homolab", version)]
struct Cli {
    /// Experiment kind (homogenize, expand, elliptic, decay, decorr, clt, conv-lemma, periodic-suite).
    kind: String,
    /// INI configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides run.out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Added to every seed in the config.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("homolab: {e}");
    ExitCode::from(runner::exit_code(e) as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if Kind::parse(&cli.kind).is_none() {
        return fail(&Error::Validation(vec![format!(
            "unknown experiment kind `{}` (allowed: {})",
            cli.kind,
            Kind::ALL.join(", ")
        )]));
    }
    if let Some(n) = cli.workers {
        if n == 0 {
            return fail(&Error::Validation(vec!["--workers: must be positive".into()]));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("homolab: cannot size the worker pool: {e}");
            return ExitCode::from(3);
        }
    }
    let text = match std::fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => return fail(&Error::Validation(vec![format!("--config {}: {e}", cli.config.display())])),
    };
    let cfg = match runner::load(&text) {
        Err(e) => return fail(&e),
        Ok(Err(problems)) => return fail(&Error::Validation(problems)),
        Ok(Ok(cfg)) => cfg,
    };
    if cfg.kind.name() != cli.kind {
        return fail(&Error::Validation(vec![format!(
            "run.kind: config says `{}` but the command line asks for `{}`",
            cfg.kind.name(),
            cli.kind
        )]));
    }
    let opts = RunOptions {
        out: cli.out,
        seed_offset: cli.seed_offset,
    };
    match runner::run(&cfg, &opts) {
        Ok(s) => {
            println!("{} -> {} ({:.1} s)", cfg.kind.name(), s.out.display(), s.manifest.wall_time_s);
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
