use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use partleak::harness::{commands, make_report, ExperimentConfig};
use partleak::partmodel::Mode;
use partleak::{Error, Exec, Result};

#[derive(Parser)]
#[command(name = "partleak", version, about = "Intra-object leakage benchmarks and two-stage part models on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed instead of every configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Dataset directory written by `gen-data`; otherwise data is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run sequentially instead of on the thread pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it to `--out`.
    GenData(Common),
    /// Pretrain the leaky toy backbone.
    Pretrain(Common),
    /// Late/early probing with ground-truth masks.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Backbone checkpoint (default: `<out>/seed_<s>/pretrain/backbone.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a part model.
    Train {
        #[command(flatten)]
        common: Common,
        /// single | soft | hard | ste
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Aggregate every run under `--out` into `<out>/report/`.
    Report {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(dir) = &c.data {
        cfg.data_dir = Some(dir.clone());
    }
    if c.sequential {
        cfg.exec = Exec::Sequential;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn for_seeds(c: &Common, checkpoint: Option<&Path>, run: impl Fn(&ExperimentConfig, &partleak::synth::Dataset, u64, Option<&Path>) -> Result<()>) -> Result<()> {
    let cfg = load_config(c)?;
    if checkpoint.is_some() && cfg.seeds.len() > 1 {
        return Err(Error::Config("--checkpoint needs a single --seed".into()));
    }
    let ds = cfg.load_dataset()?;
    for &seed in &cfg.seeds {
        run(&cfg, &ds, seed, checkpoint)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            commands::gen_data(&cfg, &c.out)?;
        }
        Command::Pretrain(c) => for_seeds(&c, None, |cfg, ds, seed, _| commands::pretrain(cfg, ds, &c.out, seed).map(drop))?,
        Command::Benchmark { common, checkpoint } => {
            for_seeds(&common, checkpoint.as_deref(), |cfg, ds, seed, ck| commands::benchmark(cfg, ds, &common.out, seed, ck))?
        }
        Command::Train { common, variant, checkpoint } => {
            let variant: Option<Mode> = variant.as_deref().map(str::parse).transpose()?;
            for_seeds(&common, checkpoint.as_deref(), |cfg, ds, seed, ck| {
                let mut cfg = cfg.clone();
                if let Some(v) = variant {
                    cfg.variant = v;
                }
                commands::train(&cfg, ds, &common.out, seed, ck)
            })?
        }
        Command::Report { out } => {
            let rows = make_report(&out)?;
            println!("{} summary rows written to {}", rows.len(), out.join(partleak::harness::REPORT_DIR).display());
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
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
