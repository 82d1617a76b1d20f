use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "resonant-nf", version, about = "Resonance graphs, block normal forms and a truncated KAM iteration for the resonant NLS on T^d")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Path to the JSON session config
    #[arg(long, global = true, default_value = "config.json")]
    config: PathBuf,
    /// Output directory for report.json / summary.txt
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (falls back to RESONANT_NF_WORKERS, then all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Seed override (otherwise taken from the config)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Tolerance overrides NAME=VALUE (repeatable)
    #[arg(long = "tol", global = true, value_parser = parse_tol)]
    tolerances: Vec<(String, f64)>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the resonance graph, components and genericity report
    Graph,
    /// Eigenvalue catalog, final graph and normal-form assembly
    NormalForm,
    /// Melnikov verification and resonant-set scans
    Melnikov,
    /// Lattice stratification by cuts
    Stratify,
    /// Truncated KAM iteration on the assembled normal form
    Kam,
    /// The whole pipeline
    All,
}

fn parse_tol(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got {s}"))?;
    let val: f64 = v.parse().map_err(|e| format!("bad value in {s}: {e}"))?;
    Ok((k.to_string(), val))
}

fn main() {
    let cli = Cli::parse();
    let workers = cli.workers.or_else(|| {
        std::env::var("RESONANT_NF_WORKERS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(w) = workers {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let sub = match cli.command {
        Command::Graph => "graph",
        Command::NormalForm => "normal-form",
        Command::Melnikov => "melnikov",
        Command::Stratify => "stratify",
        Command::Kam => "kam",
        Command::All => "all",
    };
    let code = resonant_nf_cli::run(sub, &cli.config, &cli.out, cli.seed, &cli.tolerances);
    std::process::exit(code);
}
