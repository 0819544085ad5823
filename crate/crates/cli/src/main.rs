use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use blemish_cli::config::RunConfig;
use blemish_cli::error::{CliError, CliResult};
use blemish_cli::stages::Pipeline;
use blemish_cli::store::Store;
use blemish_cli::sweep::run_sweep;
use blemish_core::eval::render_table;
use blemish_core::rectify::Variant;

#[derive(Parser)]
#[command(name = "blemish", version, about = "Artifact-robust subject-driven generation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML (or JSON) run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment root; overrides `root` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate the config and print the stage plan without running anything.
    #[arg(long)]
    dry_run: bool,
    /// Parallel sweep runs.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Build the paired blemished training dataset.
    Augment(Common),
    /// Train the base text-conditioned denoiser.
    Pretrain(Common),
    /// Invert every blemished training subset into the embedding bank.
    Invert(Common),
    /// Fine-tune one or all configured variants on the bank.
    Rectify {
        #[command(flatten)]
        common: Common,
        /// Only this variant (full, phi_only, query_phi, kv_only).
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Invert the test cases and write generated images for every method.
    Generate(Common),
    /// Score every method on the test cases.
    Evaluate(Common),
    /// Every stage in order, then the benchmark.
    Run(Common),
    /// One pipeline run per value of the `[sweep]` axis.
    Sweep(Common),
    /// Serve one external-embedder request with the oracle embedder.
    Embed {
        manifest: PathBuf,
        output: PathBuf,
    },
}

fn load(common: &Common) -> CliResult<(RunConfig, Store)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.experiment.seed = s;
        cfg.validate()?;
    }
    if common.workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    let root = common.out.clone().or_else(|| cfg.root.clone()).unwrap_or_else(|| PathBuf::from("blemish-runs"));
    Ok((cfg, Store::new(root)))
}

fn execute(command: Command) -> CliResult<()> {
    let common = match &command {
        Command::Embed { manifest, output } => return blemish_cli::oracle_exchange(manifest, output),
        Command::Augment(c) | Command::Pretrain(c) | Command::Invert(c) | Command::Generate(c) | Command::Evaluate(c) | Command::Run(c) | Command::Sweep(c) => c,
        Command::Rectify { common, .. } => common,
    }
    .clone();
    let (cfg, store) = load(&common)?;
    if let (Command::Sweep(_), None) = (&command, &cfg.sweep) {
        return Err(CliError::Config("the config has no [sweep] section".into()));
    }
    if let Command::Rectify { variant: Some(v), .. } = &command {
        if !cfg.experiment.variants.contains(v) {
            return Err(CliError::Config(format!("variant {v} is not listed in experiment.variants")));
        }
    }
    let pipeline = Pipeline::new(&cfg, &store);
    if common.dry_run {
        print!("{}", pipeline.describe());
        return Ok(());
    }
    let done = |label: &str, key: &str| println!("{}", serde_json::json!({"stage": label, "key": key, "dir": store.root().join("store").join(label).join(key)}));
    match command {
        Command::Augment(_) => pipeline.augment().map(|r| done(&r.stage, &r.key)),
        Command::Pretrain(_) => pipeline.pretrain().map(|r| done(&r.stage, &r.key)),
        Command::Invert(_) => pipeline.invert().map(|r| done(&r.stage, &r.key)),
        Command::Rectify { variant, .. } => {
            let variants: Vec<Variant> = variant.map_or_else(|| cfg.experiment.variants.clone(), |v| vec![v]);
            for v in variants {
                let r = pipeline.rectify(v)?;
                done(&r.stage, &r.key);
            }
            Ok(())
        }
        Command::Generate(_) => pipeline.generate().map(|r| done(&r.stage, &r.key)),
        Command::Evaluate(_) | Command::Run(_) => {
            let (r, reports) = if matches!(command, Command::Run(_)) { pipeline.run_all()? } else { pipeline.evaluate()? };
            eprint!("{}", render_table(&reports));
            done(&r.stage, &r.key);
            Ok(())
        }
        Command::Sweep(_) => {
            let report = run_sweep(&cfg, &store, common.workers)?;
            eprint!("{}", report.table());
            println!("{}", serde_json::to_string(&report)?);
            match report.failures() {
                0 => Ok(()),
                n => Err(CliError::Stage(format!("{n} of {} sweep values failed", report.rows.len()))),
            }
        }
        Command::Embed { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().json().with_writer(std::io::stderr).with_target(false).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = %e, code = e.exit_code(), "exiting");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
