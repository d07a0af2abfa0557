//! `dmuq`: generate data, train, evaluate and draw one frame.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmuq::config::{RunConfig, Split};
use dmuq::detector::CollabMode;
use dmuq::doublem::UqMethod;
use dmuq::pipeline;
use dmuq::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "dmuq", version, about = "Uncertainty quantification for collaborative BEV detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory; defaults to `paths.data` of the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train/val/test datasets.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frames per scene for every split.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train one method for one collaboration mode.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: UqMethod,
        #[arg(long)]
        mode: CollabMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the configured grid and write the report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Restrict the grid to these methods.
        #[arg(long, value_delimiter = ',')]
        method: Vec<UqMethod>,
        /// Restrict the grid to these modes.
        #[arg(long, value_delimiter = ',')]
        mode: Vec<CollabMode>,
    },
    /// Render one frame with its detections as SVG.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "doublem")]
        method: UqMethod,
        #[arg(long, default_value = "inter")]
        mode: CollabMode,
        #[arg(long, default_value = "test")]
        split: Split,
    },
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Common {
    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let cfg = RunConfig::load(&self.config)?;
        let data = self.data.clone().unwrap_or_else(|| cfg.paths.data.clone());
        Ok((cfg, data))
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen { config, out, frames } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(n) = frames {
                for s in [&mut cfg.splits.train, &mut cfg.splits.val, &mut cfg.splits.test] {
                    s.frames = n;
                }
                cfg.validate()?;
            }
            for (split, n) in pipeline::write_splits(&cfg, &out)? {
                println!("{split}\t{n} frames\t{}", pipeline::dataset_path(&out, split).display());
            }
        }
        Cmd::Train { common, method, mode, out } => {
            let (cfg, data) = common.load()?;
            let train = pipeline::load_split(&data, Split::Train)?;
            let val = pipeline::load_split(&data, Split::Val)?;
            for cell in pipeline::train_methods(&cfg, &[method], mode, &train, &val, &out)? {
                println!("checkpoint\t{}\tsha256:{}", cell.checkpoint.display(), sha256_hex(&cell.checkpoint)?);
                if let Some(s) = cell.uqstats {
                    println!("uqstats\t{}\tsha256:{}", s.display(), sha256_hex(&s)?);
                }
            }
        }
        Cmd::Eval { common, artifacts, report, split, method, mode } => {
            let (mut cfg, data) = common.load()?;
            if !method.is_empty() {
                cfg.eval.methods = method;
            }
            if !mode.is_empty() {
                cfg.eval.modes = mode;
            }
            let set = pipeline::load_split(&data, split)?;
            let r = pipeline::evaluate(&cfg, &artifacts, &set)?;
            let jsonl = pipeline::write_report(&report, &r)?;
            print!("{}", r.to_text());
            log::info!("wrote {} and {}", report.display(), jsonl.display());
        }
        Cmd::Viz { common, frame, artifacts, out, method, mode, split } => {
            let (cfg, data) = common.load()?;
            let set = pipeline::load_split(&data, split)?;
            let svg = pipeline::render_frame(&cfg, &artifacts, method, mode, &set, frame)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, svg)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DMUQ_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(match e {
                Error::Usage(_) | Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
