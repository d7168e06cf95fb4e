use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cst_core::pipeline::{self, NoiseMode, RunConfig, SynthSpec};
use cst_core::synth::SparsityProfile;
use cst_core::{CstError, Result};

#[derive(Parser)]
#[command(
    name = "cst",
    version,
    about = "Coarse-to-fine sparse Transformer for CASSI reconstruction"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config: a JSON file or a preset name (`desk`, `full`).
    #[arg(long, global = true, default_value = "desk")]
    config: String,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config precision.
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Noise {
    None,
    Shot11,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate CASSI measurements of scene rasters or synthetic scenes.
    Simulate {
        /// Scene rasters (H x W x bands).
        scenes: Vec<PathBuf>,
        /// Synthesize scenes instead, e.g. `--synth H=64 W=64 bands=8 d=2 count=4`.
        #[arg(long, num_args = 0.., value_name = "KEY=VALUE")]
        synth: Option<Vec<String>>,
        #[arg(long)]
        mask_seed: Option<u64>,
        #[arg(long, value_enum)]
        noise: Option<Noise>,
    },
    /// Train a model on a directory of scene rasters.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on a directory of scene rasters.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Count FLOPs and params and time forwards over a sparsity sweep.
    Bench {
        /// Scene side; defaults to the config crop.
        #[arg(long)]
        size: Option<usize>,
        /// Timed forwards per row; 0 skips timing.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Write the predicted, reference and selected masks of one scene.
    InspectMask {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Sparsity ratio for the selection; defaults to the checkpoint's.
        #[arg(long)]
        sigma: Option<f64>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(p) = &c.precision {
        cfg.precision = p.parse().expect("validated by clap");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_synth(items: &[String], cfg: &RunConfig) -> Result<SynthSpec> {
    let mut s = SynthSpec {
        count: 4,
        height: cfg.crop,
        width: cfg.crop,
        bands: cfg.model.bands,
        shift: cfg.model.shift,
        profile: SparsityProfile::default(),
    };
    for item in items.iter().flat_map(|i| i.split(',')).filter(|i| !i.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CstError::Config(format!("expected KEY=VALUE, got {item:?}")))?;
        let bad = |e: &dyn std::fmt::Display| CstError::Config(format!("bad value for {k}: {e}"));
        let int = || v.parse::<usize>().map_err(|e| bad(&e));
        match k {
            "H" | "height" => s.height = int()?,
            "W" | "width" => s.width = int()?,
            "bands" => s.bands = int()?,
            "d" | "shift" => s.shift = int()?,
            "count" => s.count = int()?,
            "blobs" => s.profile.blobs = int()?,
            "coverage" => s.profile.coverage = v.parse().map_err(|e| bad(&e))?,
            _ => return Err(CstError::Config(format!("unknown synth key {k:?}"))),
        }
    }
    Ok(s)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    match cli.command {
        Command::Simulate {
            scenes,
            synth,
            mask_seed,
            noise,
        } => {
            if let Some(s) = mask_seed {
                cfg.mask_seed = s;
            }
            if let Some(n) = noise {
                cfg.noise = match n {
                    Noise::None => NoiseMode::None,
                    Noise::Shot11 => NoiseMode::Shot11,
                };
            }
            let spec = synth.as_deref().map(|s| parse_synth(s, &cfg)).transpose()?;
            let rep = pipeline::run_simulate(&cfg, spec, &scenes, out)?;
            let [h, w, b] = rep.scene_dims;
            println!(
                "scene {h}x{w}x{b} -> measurement {}x{} ({} scenes) in {}",
                rep.measurement_dims[0],
                rep.measurement_dims[1],
                rep.scenes.len(),
                out.display()
            );
        }
        Command::Train { data } => {
            let t = pipeline::run_train(&cfg, &data, out)?;
            let (first, last) = (t.log.first().expect("steps"), t.log.last().expect("steps"));
            println!(
                "{} steps: total loss {:.6} -> {:.6}, checkpoint {}",
                t.log.len(),
                first.total,
                last.total,
                out.join("checkpoint.ckpt").display()
            );
        }
        Command::Eval { checkpoint, data } => {
            let report = pipeline::run_eval(&cfg, &checkpoint, &data, out)?;
            print!("{}", report.to_csv());
        }
        Command::Bench { size, repeats } => {
            let rows = pipeline::bench(&cfg, size.unwrap_or(cfg.crop), repeats)?;
            let csv = pipeline::bench_csv(&rows);
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("bench.csv"), &csv)?;
            print!("{csv}");
        }
        Command::InspectMask {
            checkpoint,
            scene,
            sigma,
        } => {
            let ins = pipeline::run_inspect_mask(&cfg, &checkpoint, &scene, sigma, out)?;
            println!("k = {} ({} patches selected)", ins.k, ins.selection.selected());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
