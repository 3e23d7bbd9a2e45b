use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lighten_core::pipeline::{self, PipelineConfig, PipelineError};

/// Low-rank plus structured-sparse compression for photonic accelerators.
///
/// Any config field can be overridden with a flag of its dotted name, for
/// example `--targets.alpha 0.4` or `--decomposition.iters=30`.
#[derive(Debug, Parser)]
#[command(name = "lighten", version)]
struct Cli {
    /// JSON pipeline config; defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded toy ViT and a labelled dataset.
    GenToy,
    /// Record per-layer calibration activations.
    Calibrate,
    /// Allocate ranks, decompose and adapt every layer.
    Compress,
    /// Estimate energy, latency and EDP.
    Simulate {
        /// Plan to simulate [default: <out>/plan.json].
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Simulate the dense model on the dense-only baseline.
        #[arg(long)]
        baseline: bool,
        /// Also simulate the baseline and write a comparison.
        #[arg(long)]
        compare: bool,
    },
    /// Re-check compressed artifacts against the plan and the original model.
    Verify {
        /// Compressed model [default: <out>/compressed.lten].
        #[arg(long)]
        compressed: Option<PathBuf>,
        /// Plan to check against [default: <out>/plan.json].
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Summarize the artifacts in the output directory.
    Report,
    /// Print the effective config as JSON.
    ShowConfig,
}

/// Split `--a.b value` / `--a.b=value` overrides from the arguments clap sees.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let (mut plain, mut overrides) = (Vec::new(), Vec::new());
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let dotted = arg
            .strip_prefix("--")
            .map(|f| f.split('=').next().unwrap_or("").contains('.'))
            .unwrap_or(false);
        if !dotted {
            plain.push(arg);
            continue;
        }
        let has_value = arg.contains('=');
        overrides.push(arg);
        if !has_value {
            if let Some(v) = it.next() {
                overrides.push(v);
            }
        }
    }
    (plain, overrides)
}

fn effective_config(cli: &Cli, overrides: &[String]) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.output = o.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &PipelineConfig) -> Result<bool, PipelineError> {
    match &cli.command {
        Command::GenToy => {
            let o = pipeline::gen_toy(cfg)?;
            println!("wrote {} ({} layers)", o.model_path.display(), o.layers);
            println!("wrote {}", o.data_path.display());
        }
        Command::Calibrate => {
            let o = pipeline::calibrate(cfg)?;
            println!(
                "wrote {} ({} layers, {} tokens)",
                o.path.display(),
                o.layers,
                o.tokens
            );
        }
        Command::Compress => print!("{}", pipeline::compress(cfg)?.summary()),
        Command::Simulate {
            plan,
            baseline,
            compare,
        } => print!(
            "{}",
            pipeline::simulate_cmd(cfg, plan.as_deref(), *baseline, *compare)?.summary()
        ),
        Command::Verify { compressed, plan } => {
            let v = pipeline::verify(cfg, compressed.as_deref(), plan.as_deref())?;
            print!("{}", v.summary());
            return Ok(v.passed());
        }
        Command::Report => print!("{}", pipeline::report(cfg)?),
        Command::ShowConfig => println!("{}", cfg.to_json()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let (plain, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(plain);
    let result = effective_config(&cli, &overrides).and_then(|cfg| run(&cli, &cfg));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
