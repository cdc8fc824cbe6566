//! Training orchestration: stages, density control, relocation and the
//! per-iteration optimizer dispatch.

mod densify;
mod relocate;

pub use densify::{
    clone_opacity, densify_adc, opacity_reset, DensifyConfig, DensifyOutcome, DensifyStats, Strategy,
};
pub use relocate::{mcmc_relocate, shared_opacity, RelocateOutcome};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::harness::metrics::{compute_metrics, MetricsRecord};
use crate::image::Image;
use crate::loss::{coupled_reg_grad, photometric_loss};
use crate::optimizer::{
    adam_step_sync, adamw_const_step, aiu_apply, apply_position_noise, dar_step, moment_stats, noise_perturb,
    rsr_apply, sparse_adam_step, stss_sample, AiuConfig, MomentState, MomentStats, NoiseConfig, OptimizerConfig,
    OptimizerMode, RegActivity, RsrConfig,
};
use crate::primitives::{Attr, PrimitiveSet};
use crate::renderer::{render_backward, render_forward, Viewpoint};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub warmup_end: u64,
    pub densify_end: u64,
    pub total_iters: u64,
    pub densify_interval: u64,
    pub reset_interval: u64,
    /// Mode during warm-up and densification.
    pub densify_mode: OptimizerMode,
    /// Mode during pure optimization.
    pub refine_mode: OptimizerMode,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            warmup_end: 50,
            densify_end: 1500,
            total_iters: 3000,
            densify_interval: 10,
            reset_interval: 300,
            densify_mode: OptimizerMode::CoupledAdam,
            refine_mode: OptimizerMode::CoupledAdam,
        }
    }
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_end <= self.densify_end && self.densify_end <= self.total_iters) {
            return Err(LabError::Config(format!(
                "stage boundaries {} <= {} <= {} violated",
                self.warmup_end, self.densify_end, self.total_iters
            )));
        }
        if self.densify_interval == 0 || self.reset_interval == 0 {
            return Err(LabError::Config("stage intervals must be positive".into()));
        }
        Ok(())
    }

    /// Iterations in `(warmup_end, densify_end]`.
    pub fn in_densification(&self, iter: u64) -> bool {
        iter > self.warmup_end && iter <= self.densify_end
    }

    pub fn mode_at(&self, iter: u64) -> OptimizerMode {
        if iter <= self.densify_end {
            self.densify_mode
        } else {
            self.refine_mode
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub plan: StagePlan,
    pub densify: DensifyConfig,
    /// `mode` is overwritten per stage from the plan; `lr.position` is the
    /// initial position rate.
    pub optimizer: OptimizerConfig,
    pub lr_position_final: f64,
    /// DSSIM weight.
    pub lambda1: f64,
    /// First iteration at which the decoupled opacity penalty may act.
    pub dar_opacity_start: u64,
    pub rsr: Option<RsrConfig>,
    pub aiu: Option<AiuConfig>,
    pub noise: Option<NoiseConfig>,
    pub log_interval: u64,
    pub tap_moments: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let optimizer = OptimizerConfig {
            lr: crate::optimizer::LearningRates::with_extent(128.0),
            ..Default::default()
        };
        Self {
            plan: StagePlan::default(),
            densify: DensifyConfig::default(),
            lr_position_final: optimizer.lr.position * 0.01,
            optimizer,
            lambda1: 0.2,
            dar_opacity_start: 300,
            rsr: None,
            aiu: None,
            noise: None,
            log_interval: 100,
            tap_moments: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.densify.validate()?;
        self.optimizer.validate()?;
        if !(0.0..=1.0).contains(&self.lambda1) {
            return Err(LabError::Config(format!("lambda1 {} outside [0, 1]", self.lambda1)));
        }
        if self.log_interval == 0 {
            return Err(LabError::Config("log interval must be positive".into()));
        }
        if let Some(r) = &self.rsr {
            r.validate()?;
        }
        if let Some(a) = &self.aiu {
            a.validate()?;
        }
        Ok(())
    }

    /// Exponential decay from the initial to the final position rate.
    pub fn position_lr(&self, iter: u64) -> f64 {
        let total = self.plan.total_iters.max(1) as f64;
        let r = (iter as f64 / total).clamp(0.0, 1.0);
        let (a, b) = (self.optimizer.lr.position, self.lr_position_final);
        if a <= 0.0 || b <= 0.0 {
            return a;
        }
        (a.ln() * (1.0 - r) + b.ln() * r).exp()
    }
}

/// Viewpoints and their target images.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub views: Vec<Viewpoint>,
    pub targets: Vec<Image>,
}

/// One structural or optimizer event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub iter: u64,
    pub kind: String,
    pub count: usize,
    pub affected_ids_hash: String,
}

impl Event {
    pub fn new(iter: u64, kind: &str, ids: &[usize]) -> Self {
        Self {
            iter,
            kind: kind.to_string(),
            count: ids.len(),
            affected_ids_hash: format!("{:016x}", fnv1a(ids)),
        }
    }
}

/// FNV-1a over the ids as little-endian u64.
pub fn fnv1a(ids: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &id in ids {
        for b in (id as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentRow {
    pub iter: u64,
    pub attr: Attr,
    pub stats: MomentStats,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub set: PrimitiveSet,
    pub state: MomentState,
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<Event>,
    pub moments: Vec<MomentRow>,
}

impl TrainResult {
    /// Total count of events of one kind.
    pub fn event_total(&self, kind: &str) -> usize {
        self.events.iter().filter(|e| e.kind == kind).map(|e| e.count).sum()
    }
}

fn nan_diagnostic(set: &PrimitiveSet, view: usize, loss: f64) -> String {
    let bad: Vec<usize> = (0..set.len())
        .filter(|&i| Attr::ALL.iter().any(|&a| set.params.row(a, i).iter().any(|x| !x.is_finite())))
        .collect();
    let first = bad
        .first()
        .and_then(|&i| serde_json::to_string(&set.get(i)).ok())
        .unwrap_or_else(|| "none".into());
    format!(
        "loss {loss} on view {view}; {} primitives, {} with non-finite parameters; first offender {first}",
        set.len(),
        bad.len()
    )
}

fn audit(set: &PrimitiveSet, state: &MomentState, stats: &DensifyStats, iter: u64) -> Result<()> {
    if !set.is_consistent() || !state.is_aligned_with(set) || stats.len() != set.len() {
        return Err(LabError::Contract(format!("row alignment lost at iteration {iter}")));
    }
    Ok(())
}

/// Runs one training configuration from `initial` against `data`.
pub fn run_training(cfg: &TrainConfig, initial: &PrimitiveSet, data: &TrainingData) -> Result<TrainResult> {
    cfg.validate()?;
    if data.views.is_empty() || data.views.len() != data.targets.len() {
        return Err(LabError::Contract("training needs matching views and targets".into()));
    }
    let plan = &cfg.plan;
    let mut set = initial.clone();
    let mut state = MomentState::new(set.len());
    let mut stats = DensifyStats::new(set.len());
    let mut metrics = Vec::new();
    let mut events = Vec::new();
    let mut moments = Vec::new();

    let mut view_rng = stream(cfg.seed, Stream::ViewOrder);
    let mut densify_rng = stream(cfg.seed, Stream::Densify);
    let mut relocate_rng = stream(cfg.seed, Stream::Relocate);
    let mut stss_rng = stream(cfg.seed, Stream::StateSampling);
    let mut aiu_rng = stream(cfg.seed, Stream::ImplicitUpdate);
    let mut noise_rng = stream(cfg.seed, Stream::PositionNoise);
    let mut order: Vec<usize> = Vec::new();

    for iter in 1..=plan.total_iters {
        if order.is_empty() {
            order = (0..data.views.len()).collect();
            order.shuffle(&mut view_rng);
            order.reverse();
        }
        let v = order.pop().unwrap();
        let (vp, target) = (&data.views[v], &data.targets[v]);

        let mut ocfg = cfg.optimizer;
        ocfg.mode = plan.mode_at(iter);
        ocfg.lr.position = cfg.position_lr(iter);
        let densifying = plan.in_densification(iter);

        let out = render_forward(&set, vp)?;
        let (loss, dl_dc) = photometric_loss(&out.image, target, cfg.lambda1)?;
        if !loss.is_finite() {
            return Err(LabError::NanLoss {
                iteration: iter,
                diagnostic: nan_diagnostic(&set, v, loss),
            });
        }
        let mut grads = render_backward(&out.record, &set, vp, &dl_dc)?;
        if cfg.densify.strategy == Strategy::Vanilla && iter <= plan.densify_end {
            stats.record(&grads, &out.visibility, vp);
        }

        let active = RegActivity {
            opacity: densifying && iter >= cfg.dar_opacity_start,
            scale: densifying,
        };
        match ocfg.mode {
            OptimizerMode::CoupledAdam | OptimizerMode::SparseAdam => {
                let reg = coupled_reg_grad(
                    &set,
                    &out.visibility,
                    ocfg.mode == OptimizerMode::CoupledAdam,
                    ocfg.lambda_opacity,
                    ocfg.lambda_scale,
                );
                for (g, r) in grads.opacity.iter_mut().zip(&reg.grads.opacity) {
                    *g += r;
                }
                for (g, r) in grads.scale.iter_mut().zip(&reg.grads.scale) {
                    *g += r;
                }
                if ocfg.mode == OptimizerMode::CoupledAdam {
                    adam_step_sync(&mut state, &mut set, &grads, &ocfg)?;
                } else {
                    sparse_adam_step(&mut state, &mut set, &grads, &out.visibility, &ocfg)?;
                }
            }
            OptimizerMode::AdamwConst | OptimizerMode::AdamwConstClip => {
                let clip = ocfg.mode == OptimizerMode::AdamwConstClip;
                adamw_const_step(&mut state, &mut set, &grads, &out.visibility, &ocfg, clip, active)?;
            }
            OptimizerMode::AdamwGs => {
                dar_step(&mut state, &mut set, &grads, &out.visibility, &ocfg, vp.pixel_count(), active)?;
            }
        }

        if let Some(noise) = &cfg.noise {
            let delta = noise_perturb(&set, ocfg.lr.position, noise, &mut noise_rng)?;
            apply_position_noise(&mut set, &delta);
        }

        if let Some(aiu) = &cfg.aiu {
            if aiu.active_at(iter) {
                let n = aiu_apply(&state, &mut set, &out.visibility, aiu, &ocfg, &mut aiu_rng, iter)?;
                if n > 0 {
                    events.push(Event {
                        iter,
                        kind: "aiu".into(),
                        count: n,
                        affected_ids_hash: format!("{:016x}", fnv1a(&[])),
                    });
                }
            }
        }

        if let Some(rsr) = &cfg.rsr {
            if densifying && rsr.schedule.fires_at(iter) {
                let idx = stss_sample(&rsr.schedule, iter, set.len(), &mut stss_rng);
                rsr_apply(&mut state, &idx, rsr.alpha1, rsr.alpha2)?;
                if !idx.is_empty() {
                    events.push(Event::new(iter, "rsr", &idx));
                }
            }
        }

        if densifying && iter % plan.densify_interval == 0 {
            match cfg.densify.strategy {
                Strategy::Vanilla => {
                    let o = densify_adc(&mut set, &mut state, &mut stats, &cfg.densify, &mut densify_rng)?;
                    for (kind, ids) in [("clone", &o.cloned), ("split", &o.split), ("prune", &o.pruned)] {
                        if !ids.is_empty() {
                            events.push(Event::new(iter, kind, ids));
                        }
                    }
                    if o.capped {
                        events.push(Event::new(iter, "densify-capped", &[]));
                    }
                }
                Strategy::Mcmc => {
                    let o = mcmc_relocate(&mut set, &mut state, &mut relocate_rng)?;
                    if !o.relocated.is_empty() {
                        events.push(Event::new(iter, "relocate", &o.relocated));
                    }
                }
            }
            audit(&set, &state, &stats, iter)?;
        }
        if densifying
            && cfg.densify.strategy == Strategy::Vanilla
            && cfg.densify.opacity_reset
            && iter % plan.reset_interval == 0
        {
            let ids = opacity_reset(&mut set, cfg.densify.reset_floor);
            state.clear_group_moments(Attr::Opacity);
            events.push(Event::new(iter, "reset", &ids));
        }

        if iter % cfg.log_interval == 0 || iter == plan.total_iters {
            metrics.push(compute_metrics(iter, &set, &data.views, &data.targets, Some(&state), None)?);
            if cfg.tap_moments {
                for attr in Attr::ALL {
                    moments.push(MomentRow { iter, attr, stats: moment_stats(&state, &set, attr) });
                }
            }
        }
    }

    Ok(TrainResult { set, state, metrics, events, moments })
}
