use rand::Rng;

use super::restate::Schedule;
use super::{bias_correction, MomentState, OptimizerConfig};
use crate::error::{LabError, Result};
use crate::primitives::{Attr, PrimitiveSet};
use crate::renderer::VisibilityMask;

/// Extra updates for a random subset of invisible primitives, driven by their
/// frozen moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AiuConfig {
    pub start: u64,
    pub end: u64,
    pub probability: Schedule,
    pub step_scale: Schedule,
}

impl AiuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.start > self.end {
            return Err(LabError::Config(format!("AIU range [{}, {}] is empty", self.start, self.end)));
        }
        self.probability.validate("AIU probability", 0.0, 1.0)?;
        self.step_scale.validate("AIU step scale", 0.0, f64::MAX)
    }

    pub fn active_at(&self, iteration: u64) -> bool {
        (self.start..=self.end).contains(&iteration)
    }
}

/// Returns the number of primitives that received an implicit update. The
/// state is only read; rows with a zero clock have no direction and are skipped.
pub fn aiu_apply<R: Rng + ?Sized>(
    state: &MomentState,
    set: &mut PrimitiveSet,
    visibility: &VisibilityMask,
    aiu: &AiuConfig,
    cfg: &OptimizerConfig,
    rng: &mut R,
    iteration: u64,
) -> Result<usize> {
    if !state.is_aligned_with(set) || visibility.len() != set.len() {
        return Err(LabError::Contract("AIU inputs are not row-aligned".into()));
    }
    if !aiu.active_at(iteration) {
        return Ok(0);
    }
    let p = aiu.probability.value_at(iteration);
    let scale = aiu.step_scale.value_at(iteration);
    if p <= 0.0 {
        return Ok(0);
    }
    let mut updated = 0;
    for i in 0..set.len() {
        if visibility.get(i) || !set.alive[i] {
            continue;
        }
        if rng.random::<f64>() >= p {
            continue;
        }
        updated += 1;
        for attr in Attr::ALL {
            let t = state.steps(attr)[i];
            if t == 0 {
                continue;
            }
            let lr = cfg.lr.get(attr) * scale;
            let c1 = bias_correction(cfg.beta1, t);
            let c2 = bias_correction(cfg.beta2, t);
            let m = state.m.row(attr, i);
            let v = state.v.row(attr, i);
            for (k, theta) in set.params.row_mut(attr, i).iter_mut().enumerate() {
                *theta -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
            }
        }
    }
    Ok(updated)
}
