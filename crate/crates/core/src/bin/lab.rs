use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gsopt::harness::output::{compare, run_preset, write_moments_csv, write_outputs};
use gsopt::harness::presets::PRESETS;
use gsopt::{LabError, Result};

#[derive(Parser)]
#[command(name = "lab", about = "Optimizer ablations on a synthetic 2D splatting scene")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every arm of a preset and write per-arm logs under DIR.
    Run {
        #[arg(long, help = preset_help())]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Key-value file applied to every arm before the overrides.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// `section.key=value`, repeatable.
        #[arg(long = "override", value_name = "K=V")]
        overrides: Vec<String>,
    },
    /// Tabulate the final rows of finished runs.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Run a preset with a tap enabled and print the tapped series.
    Trace {
        #[arg(long, value_enum)]
        tap: Tap,
        #[arg(long, default_value = "gs-adamwgs")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write `<arm>/moments.csv` files here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "override", value_name = "K=V")]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Tap {
    Moments,
}

fn preset_help() -> String {
    format!(
        "one of: {}. StSS lo suits scenes with few primitives, hi suits many",
        PRESETS.join(", ")
    )
}

fn init_threads() {
    let Some(n) = std::env::var("LAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) else {
        return;
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
        eprintln!("warning: LAB_THREADS ignored: {e}");
    }
}

fn read(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { preset, seed, out, scene, overrides } => {
            let scene_kv = scene.as_ref().map(read).transpose()?;
            let (scene, runs) = run_preset(&preset, seed, scene_kv.as_deref(), &overrides)?;
            write_outputs(&out, &preset, seed, &scene, &runs)?;
            print!("{}", compare(&[out])?);
        }
        Cmd::Compare { dirs } => print!("{}", compare(&dirs)?),
        Cmd::Trace { tap: Tap::Moments, preset, seed, out, mut overrides } => {
            overrides.push("run.tap_moments=true".into());
            let (_, runs) = run_preset(&preset, seed, None, &overrides)?;
            println!("arm,iter,attr,mean_sqrt_v,max_sqrt_v,mean_ratio,max_ratio");
            for r in &runs {
                for row in &r.result.moments {
                    let s = &row.stats;
                    println!(
                        "{},{},{},{},{},{},{}",
                        r.arm.name,
                        row.iter,
                        row.attr.name(),
                        s.mean_sqrt_v,
                        s.max_sqrt_v,
                        s.mean_ratio,
                        s.max_ratio
                    );
                }
                if let Some(dir) = &out {
                    let arm_dir = dir.join(&r.arm.name);
                    std::fs::create_dir_all(&arm_dir).map_err(|e| LabError::io(&arm_dir, e))?;
                    write_moments_csv(&arm_dir.join("moments.csv"), &r.result.moments)?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_threads();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
