//! Adam-family optimizers over primitive attribute groups.
//!
//! Every mode shares [`MomentState`]: first and second moments shaped like the
//! parameters, plus one step counter per primitive and attribute group. The
//! synchronous mode additionally keeps a single global clock used for bias
//! correction.

mod adam;
mod decoupled;
mod implicit;
mod noise;
mod restate;
mod tap;

pub use adam::{adam_step_sync, sparse_adam_step};
pub use decoupled::{adamw_const_step, dar_step, dar_term, rounded_pixel_count, RegActivity, StepReport};
pub use implicit::{aiu_apply, AiuConfig};
pub use noise::{apply_position_noise, noise_gate, noise_perturb, NoiseConfig};
pub use restate::{rsr_apply, stss_sample, RsrConfig, Schedule, StssSchedule};
pub use tap::{moment_stats, MomentStats};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::primitives::{Attr, AttrArrays, PrimitiveSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerMode {
    /// Synchronous Adam; regularization gradients are mixed into the moments.
    CoupledAdam,
    /// Adam that freezes invisible rows entirely.
    SparseAdam,
    /// Sparse Adam, photometric-only moments, constant decoupled penalty.
    AdamwConst,
    /// As `AdamwConst` with the penalty clamped at `C_t`.
    AdamwConstClip,
    /// Sparse Adam, photometric-only moments, decoupled attribute
    /// regularization scaled by the second moment and clipped.
    AdamwGs,
}

impl OptimizerMode {
    pub const ALL: [OptimizerMode; 5] = [
        OptimizerMode::CoupledAdam,
        OptimizerMode::SparseAdam,
        OptimizerMode::AdamwConst,
        OptimizerMode::AdamwConstClip,
        OptimizerMode::AdamwGs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerMode::CoupledAdam => "coupled-adam",
            OptimizerMode::SparseAdam => "sparse-adam",
            OptimizerMode::AdamwConst => "adamw-const",
            OptimizerMode::AdamwConstClip => "adamw-const-clip",
            OptimizerMode::AdamwGs => "adamw-gs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| LabError::Config(format!("unknown optimizer mode {s:?}")))
    }

    /// Regularization enters the shared gradient (and therefore the moments).
    pub fn is_coupled(self) -> bool {
        matches!(self, OptimizerMode::CoupledAdam | OptimizerMode::SparseAdam)
    }

    pub fn is_sparse(self) -> bool {
        !matches!(self, OptimizerMode::CoupledAdam)
    }
}

/// Per attribute-group learning rates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl LearningRates {
    /// Baseline rates; position is relative to the scene extent.
    pub fn with_extent(extent: f64) -> Self {
        Self {
            position: 1.6e-4 * extent,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 0.05,
            color: 2.5e-3,
        }
    }

    pub fn uniform(lr: f64) -> Self {
        Self {
            position: lr,
            scale: lr,
            rotation: lr,
            opacity: lr,
            color: lr,
        }
    }

    pub fn get(&self, attr: Attr) -> f64 {
        match attr {
            Attr::Position => self.position,
            Attr::Scale => self.scale,
            Attr::Rotation => self.rotation,
            Attr::Opacity => self.opacity,
            Attr::Color => self.color,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub mode: OptimizerMode,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: LearningRates,
    pub lambda_opacity: f64,
    pub lambda_scale: f64,
    /// `C_t` for the opacity penalty.
    pub clip_opacity: f64,
    /// `C_t` for the scale penalty.
    pub clip_scale: f64,
    /// Keep only the leading digit of the pixel count, then divide by ten.
    pub round_pixel_count: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            mode: OptimizerMode::CoupledAdam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr: LearningRates::with_extent(1.0),
            lambda_opacity: 0.0,
            lambda_scale: 0.0,
            clip_opacity: 10.0,
            clip_scale: 10.0,
            round_pixel_count: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(LabError::Config(format!("{name} = {b} must lie in [0, 1)")));
            }
        }
        // Written negated so NaN is rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.eps > 0.0) {
            return Err(LabError::Config(format!("eps = {} must be positive", self.eps)));
        }
        if !(self.clip_opacity > 0.0 && self.clip_scale > 0.0) {
            return Err(LabError::Config(format!(
                "clip bounds ({}, {}) must be positive",
                self.clip_opacity, self.clip_scale
            )));
        }
        if self.lambda_opacity < 0.0 || self.lambda_scale < 0.0 {
            return Err(LabError::Config("regularization weights must be non-negative".into()));
        }
        for attr in Attr::ALL {
            let lr = self.lr.get(attr);
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(LabError::Config(format!("learning rate for {} is {lr}", attr.name())));
            }
        }
        Ok(())
    }
}

/// Optimizer moments and clocks, row-aligned with a [`PrimitiveSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub m: AttrArrays,
    pub v: AttrArrays,
    /// Step count per primitive, one vector per attribute group in
    /// [`Attr::ALL`] order.
    pub steps: [Vec<u64>; 5],
    /// Clock of the synchronous mode.
    pub global_step: u64,
}

fn attr_slot(attr: Attr) -> usize {
    Attr::ALL.iter().position(|&a| a == attr).unwrap()
}

impl MomentState {
    pub fn new(n: usize) -> Self {
        Self {
            m: AttrArrays::zeros(n),
            v: AttrArrays::zeros(n),
            steps: std::array::from_fn(|_| vec![0; n]),
            global_step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self, attr: Attr) -> &[u64] {
        &self.steps[attr_slot(attr)]
    }

    pub fn steps_mut(&mut self, attr: Attr) -> &mut Vec<u64> {
        &mut self.steps[attr_slot(attr)]
    }

    /// Appends `n` fresh rows (zero moments, zero clocks).
    pub fn push_fresh(&mut self, n: usize) {
        self.m.push_zero_rows(n);
        self.v.push_zero_rows(n);
        for s in self.steps.iter_mut() {
            s.resize(s.len() + n, 0);
        }
    }

    pub fn retain(&mut self, keep: &[bool]) {
        self.m.retain_rows(keep);
        self.v.retain_rows(keep);
        for s in self.steps.iter_mut() {
            let mut it = keep.iter();
            s.retain(|_| *it.next().unwrap());
        }
    }

    /// Zeroes moments and clocks of the given rows.
    pub fn reset_rows(&mut self, indices: &[usize]) {
        for &i in indices {
            for attr in Attr::ALL {
                self.m.row_mut(attr, i).fill(0.0);
                self.v.row_mut(attr, i).fill(0.0);
                self.steps_mut(attr)[i] = 0;
            }
        }
    }

    /// Zeroes one attribute group's moments for every row, keeping clocks.
    pub fn clear_group_moments(&mut self, attr: Attr) {
        self.m.get_mut(attr).fill(0.0);
        self.v.get_mut(attr).fill(0.0);
    }

    pub fn is_aligned_with(&self, set: &PrimitiveSet) -> bool {
        self.m.is_consistent()
            && self.v.is_consistent()
            && self.m.len() == set.len()
            && self.v.len() == set.len()
            && self.steps.iter().all(|s| s.len() == set.len())
    }
}

/// `m / (1 - beta^t)`-style bias correction factor.
#[inline]
pub(crate) fn bias_correction(beta: f64, t: u64) -> f64 {
    1.0 - beta.powi(t.min(i32::MAX as u64) as i32)
}

pub(crate) fn check_shapes(state: &MomentState, set: &PrimitiveSet, grads: &AttrArrays) -> Result<()> {
    if !state.is_aligned_with(set) {
        return Err(LabError::Contract(format!(
            "optimizer state has {} rows, primitive set {}",
            state.len(),
            set.len()
        )));
    }
    if grads.len() != set.len() || !grads.is_consistent() {
        return Err(LabError::Contract(format!(
            "gradient has {} rows, primitive set {}",
            grads.len(),
            set.len()
        )));
    }
    Ok(())
}

pub(crate) fn check_finite(grads: &AttrArrays) -> Result<()> {
    for attr in Attr::ALL {
        let d = attr.dim();
        if let Some(k) = grads.get(attr).iter().position(|g| !g.is_finite()) {
            return Err(LabError::NonFiniteGradient {
                attr: attr.name(),
                index: k / d,
            });
        }
    }
    Ok(())
}
