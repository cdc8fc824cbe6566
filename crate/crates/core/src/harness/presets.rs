//! Ablation presets. Each preset is a list of arms that differ from a shared
//! family base only in the settings the corresponding ablation row varies.

use super::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::optimizer::OptimizerMode;
use crate::pipeline::Strategy;

pub const PRESETS: [&str; 10] = [
    "gs-adam",
    "gs-sparse",
    "gs-half",
    "gs-rsr-only",
    "gs-adamwgs",
    "mc-adam",
    "mc-sparse",
    "mc-aiu",
    "mc-rsr-l1",
    "mc-adamwgs",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    /// Ablation row tag, e.g. `GS1`.
    pub name: String,
    pub description: String,
    pub baseline: bool,
    pub config: ExperimentConfig,
}

fn arm(name: &str, description: &str, config: ExperimentConfig) -> Arm {
    Arm {
        name: name.into(),
        description: description.into(),
        baseline: false,
        config,
    }
}

fn baseline(mut a: Arm) -> Arm {
    a.baseline = true;
    a
}

fn modes(cfg: &mut ExperimentConfig, densify: OptimizerMode, refine: OptimizerMode) {
    cfg.opt.mode_densify = densify;
    cfg.opt.mode_refine = refine;
}

/// Vanilla densification with synchronous Adam and no attribute penalties.
fn gs1() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn gs2() -> ExperimentConfig {
    let mut c = gs1();
    modes(&mut c, OptimizerMode::SparseAdam, OptimizerMode::SparseAdam);
    c
}

fn gs3() -> ExperimentConfig {
    let mut c = gs1();
    modes(&mut c, OptimizerMode::CoupledAdam, OptimizerMode::SparseAdam);
    c
}

fn gs0() -> ExperimentConfig {
    let mut c = gs2();
    c.rsr.enabled = true;
    c.rsr.stss = "lo".into();
    c
}

fn with_adamwgs(c: &mut ExperimentConfig, stss: &str) {
    modes(c, OptimizerMode::AdamwGs, OptimizerMode::AdamwGs);
    c.reg.lambda_o = 0.001;
    c.reg.lambda_s = 1e-5;
    c.reg.clip_o = 10.0;
    c.reg.clip_s = 10.0;
    c.rsr.enabled = true;
    c.rsr.stss = stss.into();
}

fn gs8() -> ExperimentConfig {
    let mut c = gs1();
    with_adamwgs(&mut c, "hi");
    c.noise.enabled = true;
    c.densify.clone_correction = true;
    c
}

fn gs7() -> ExperimentConfig {
    let mut c = gs8();
    c.densify.opacity_reset = false;
    c
}

/// Fixed-count relocation with coupled L1 penalties and position noise.
fn mc1() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.densify.strategy = Strategy::Mcmc;
    c.densify.opacity_reset = false;
    c.densify.max_primitives = c.scene.initial_count();
    c.reg.lambda_o = 0.01;
    c.reg.lambda_s = 0.01;
    c.noise.enabled = true;
    c
}

fn mc2() -> ExperimentConfig {
    let mut c = mc1();
    modes(&mut c, OptimizerMode::SparseAdam, OptimizerMode::SparseAdam);
    c
}

fn mc3() -> ExperimentConfig {
    let mut c = mc2();
    c.aiu.enabled = true;
    c.aiu.start = 10;
    c.aiu.end = c.stage.total_iters;
    c.aiu.prob = "0.1".into();
    c.aiu.step_scale = "0.1".into();
    c
}

fn mc4() -> ExperimentConfig {
    let mut c = mc3();
    c.aiu.start = 300;
    c.rsr.enabled = true;
    c.rsr.stss = "lo".into();
    c
}

fn mc_rsr(stss: &str) -> ExperimentConfig {
    let mut c = mc2();
    c.rsr.enabled = true;
    c.rsr.stss = stss.into();
    c
}

fn mc_adamwgs(stss: &str) -> ExperimentConfig {
    let mut c = mc2();
    with_adamwgs(&mut c, stss);
    c
}

/// Arms of a preset, each with `run.seed = seed`.
pub fn preset(name: &str, seed: u64) -> Result<Vec<Arm>> {
    let mut arms = match name {
        "gs-adam" => vec![baseline(arm("GS1", "vanilla densification, synchronous Adam", gs1()))],
        "gs-sparse" => vec![
            baseline(arm("GS1", "synchronous Adam", gs1())),
            arm("GS2", "sparse Adam in every stage", gs2()),
        ],
        "gs-half" => vec![
            baseline(arm("GS1", "synchronous Adam", gs1())),
            arm("GS3", "Adam while densifying, sparse Adam afterwards", gs3()),
        ],
        "gs-rsr-only" => vec![
            baseline(arm("GS1", "synchronous Adam", gs1())),
            arm("GS0", "sparse Adam with re-state regularization only (lo schedule)", gs0()),
        ],
        "gs-adamwgs" => vec![
            baseline(arm("GS1", "synchronous Adam", gs1())),
            arm("GS8", "AdamW-GS (hi schedule), noise, opacity reset", gs8()),
            arm("GS7", "AdamW-GS (hi schedule), noise, no opacity reset", gs7()),
        ],
        "mc-adam" => vec![baseline(arm("MC1", "relocation, synchronous Adam, coupled L1", mc1()))],
        "mc-sparse" => vec![
            baseline(arm("MC1", "synchronous Adam, coupled L1", mc1())),
            arm("MC2", "sparse Adam, coupled L1", mc2()),
        ],
        "mc-aiu" => vec![
            baseline(arm("MC2", "sparse Adam, coupled L1", mc2())),
            arm("MC3", "implicit updates (p 0.1, step 0.1) from iteration 10", mc3()),
            arm("MC4", "implicit updates from iteration 300 plus re-state (lo)", mc4()),
        ],
        "mc-rsr-l1" => vec![
            baseline(arm("MC2", "sparse Adam, coupled L1", mc2())),
            arm("MC19", "re-state (lo) with coupled L1", mc_rsr("lo")),
            arm("MC20", "re-state (mid) with coupled L1", mc_rsr("mid")),
        ],
        "mc-adamwgs" => vec![
            baseline(arm("MC2", "sparse Adam, coupled L1", mc2())),
            arm("MC17", "AdamW-GS, lo schedule", mc_adamwgs("lo")),
            arm("MC8", "AdamW-GS, hi schedule", mc_adamwgs("hi")),
            arm("MC21", "AdamW-GS, mid schedule", mc_adamwgs("mid")),
        ],
        _ => {
            return Err(LabError::UnknownPreset {
                name: name.into(),
                available: PRESETS.join(", "),
            })
        }
    };
    for a in &mut arms {
        a.config.run.seed = seed;
    }
    Ok(arms)
}
