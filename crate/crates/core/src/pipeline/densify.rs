use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::optimizer::MomentState;
use crate::primitives::{logit, sigmoid, AttrArrays, PrimitiveSet};
use crate::renderer::{pixel_position_grad_norm, Viewpoint, VisibilityMask};

/// Accumulated view-space positional gradient norms since the last
/// densification event.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self { grad_sum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }

    pub fn record(&mut self, grads: &AttrArrays, visibility: &VisibilityMask, vp: &Viewpoint) {
        for i in (0..self.len()).filter(|&i| visibility.get(i)) {
            self.grad_sum[i] += pixel_position_grad_norm(grads, vp, i);
            self.count[i] += 1;
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        match self.count[i] {
            0 => 0.0,
            c => self.grad_sum[i] / c as f64,
        }
    }

    pub fn reset(&mut self) {
        self.grad_sum.fill(0.0);
        self.count.fill(0);
    }

    pub fn push(&mut self, n: usize) {
        self.grad_sum.resize(self.len() + n, 0.0);
        self.count.resize(self.count.len() + n, 0);
    }

    pub fn retain(&mut self, keep: &[bool]) {
        let mut k = keep.iter();
        self.grad_sum.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.count.retain(|_| *k.next().unwrap());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Clone, split and prune driven by gradient statistics.
    Vanilla,
    /// Fixed primitive count; dead primitives are relocated.
    Mcmc,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Mcmc => "mcmc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Strategy::Vanilla),
            "mcmc" => Ok(Strategy::Mcmc),
            _ => Err(LabError::Config(format!("unknown densification strategy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensifyConfig {
    pub strategy: Strategy,
    /// Mean pixel-space positional gradient norm that triggers growth.
    pub grad_threshold: f64,
    pub prune_threshold: f64,
    /// Clone when the largest scale is at most `percent_dense * extent`.
    pub percent_dense: f64,
    pub extent: f64,
    pub split_factor: f64,
    pub max_primitives: usize,
    pub opacity_reset: bool,
    pub reset_floor: f64,
    /// Give parent and clone `1 - sqrt(1 - o)` so their blend reproduces `o`.
    pub clone_opacity_correction: bool,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Vanilla,
            grad_threshold: 2e-4,
            prune_threshold: 0.005,
            percent_dense: 0.02,
            extent: 128.0,
            split_factor: 1.6,
            max_primitives: 2000,
            opacity_reset: true,
            reset_floor: 0.01,
            clone_opacity_correction: false,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_threshold >= 0.0 && self.prune_threshold >= 0.0 && self.prune_threshold < 1.0) {
            return Err(LabError::Config("densification thresholds out of range".into()));
        }
        if !(self.reset_floor > 0.0 && self.reset_floor < 1.0) {
            return Err(LabError::Config(format!("reset floor {} outside (0, 1)", self.reset_floor)));
        }
        if !(self.split_factor > 1.0 && self.extent > 0.0 && self.percent_dense > 0.0) {
            return Err(LabError::Config("split factor, extent and percent_dense must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DensifyOutcome {
    /// Parents, indexed before the event.
    pub cloned: Vec<usize>,
    pub split: Vec<usize>,
    /// Indexed after growth, before removal.
    pub pruned: Vec<usize>,
    /// Growth was skipped because it would exceed the cap.
    pub capped: bool,
}

/// Opacity that two stacked copies need to reproduce `o`.
pub fn clone_opacity(o: f64) -> f64 {
    1.0 - (1.0 - o).sqrt()
}

/// Parent-local offset with Mahalanobis radius at most 2.
fn sample_in_footprint<R: Rng + ?Sized>(set: &PrimitiveSet, i: usize, rng: &mut R) -> [f64; 2] {
    let z = loop {
        let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        if z[0] * z[0] + z[1] * z[1] <= 4.0 {
            break z;
        }
    };
    let s = set.scale(i);
    let (sin, cos) = set.params.rotation[i].sin_cos();
    let (a, b) = (s[0] * z[0], s[1] * z[1]);
    let p = set.position(i);
    [p[0] + cos * a - sin * b, p[1] + sin * a + cos * b]
}

/// Adaptive density control: clone or split primitives with large positional
/// gradients, then prune transparent ones. New rows start with fresh moments.
pub fn densify_adc<R: Rng + ?Sized>(
    set: &mut PrimitiveSet,
    state: &mut MomentState,
    stats: &mut DensifyStats,
    cfg: &DensifyConfig,
    rng: &mut R,
) -> Result<DensifyOutcome> {
    if !state.is_aligned_with(set) || stats.len() != set.len() {
        return Err(LabError::Contract("densification inputs are not row-aligned".into()));
    }
    let mut out = DensifyOutcome::default();
    let n0 = set.len();
    for i in 0..n0 {
        if !set.alive[i] || stats.count[i] == 0 || stats.mean(i) < cfg.grad_threshold {
            continue;
        }
        let s = set.scale(i);
        if s[0].max(s[1]) <= cfg.percent_dense * cfg.extent {
            out.cloned.push(i);
        } else {
            out.split.push(i);
        }
    }
    let growth = out.cloned.len() + out.split.len();
    if n0 + growth > cfg.max_primitives {
        out.capped = true;
        out.cloned.clear();
        out.split.clear();
    }

    for &i in &out.cloned {
        if cfg.clone_opacity_correction {
            let o = set.opacity(i);
            set.set_opacity(i, clone_opacity(o));
        }
        set.push(set.get(i));
    }
    let shrink = cfg.split_factor.ln();
    let mut fresh = Vec::with_capacity(out.split.len());
    for &i in &out.split {
        let a = sample_in_footprint(set, i, rng);
        let b = sample_in_footprint(set, i, rng);
        let mut child = set.get(i);
        child.log_scale = [child.log_scale[0] - shrink, child.log_scale[1] - shrink];
        child.position = b;
        set.push(child);
        child.position = a;
        set.set(i, child);
        fresh.push(i);
    }
    state.push_fresh(set.len() - n0);
    stats.push(set.len() - n0);
    state.reset_rows(&fresh);

    let keep: Vec<bool> = (0..set.len())
        .map(|i| !(set.alive[i] && set.opacity(i) < cfg.prune_threshold))
        .collect();
    out.pruned = keep.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i).collect();
    if !out.pruned.is_empty() {
        set.retain(&keep);
        state.retain(&keep);
        stats.retain(&keep);
    }
    stats.reset();
    Ok(out)
}

/// Caps every alive opacity at `floor`; returns the rows that changed.
pub fn opacity_reset(set: &mut PrimitiveSet, floor: f64) -> Vec<usize> {
    let cap = logit(floor);
    let mut changed = Vec::new();
    for i in 0..set.len() {
        if set.alive[i] && set.params.opacity[i] > cap {
            set.params.opacity[i] = cap;
            changed.push(i);
        }
    }
    debug_assert!(changed.iter().all(|&i| (sigmoid(set.params.opacity[i]) - floor).abs() < 1e-12));
    changed
}
