use super::adam::moment_update;
use super::{bias_correction, check_finite, check_shapes, MomentState, OptimizerConfig};
use crate::error::{LabError, Result};
use crate::primitives::{sigmoid, Attr, AttrArrays, PrimitiveSet};
use crate::renderer::VisibilityMask;

/// Which attribute penalties are switched on for this step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RegActivity {
    pub opacity: bool,
    pub scale: bool,
}

impl RegActivity {
    pub const NONE: RegActivity = RegActivity { opacity: false, scale: false };
    pub const BOTH: RegActivity = RegActivity { opacity: true, scale: true };
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    /// Parameters that received a non-zero penalty term.
    pub penalized: usize,
    pub max_extra: f64,
}

/// Pixel-count normalizer. With `round`, only the leading digit survives and
/// the result is divided by ten (4096 -> 400, 1024 -> 100). Never below 1.
pub fn rounded_pixel_count(n: usize, round: bool) -> f64 {
    if !round {
        return (n as f64).max(1.0);
    }
    let mut lead = n;
    let mut mag = 1usize;
    while lead >= 10 {
        lead /= 10;
        mag *= 10;
    }
    ((lead * mag) as f64 / 10.0).max(1.0)
}

/// `min(lambda * (g / n) / (sqrt_vhat + eps), clip)`; lies in `[0, clip]` for
/// non-negative inputs.
#[inline]
pub fn dar_term(lambda: f64, reg_grad: f64, n: f64, sqrt_vhat: f64, eps: f64, clip: f64) -> f64 {
    (lambda * (reg_grad / n) / (sqrt_vhat + eps)).min(clip)
}

fn reg_gradient(attr: Attr, theta: f64) -> f64 {
    match attr {
        Attr::Opacity => {
            let o = sigmoid(theta);
            o * (1.0 - o)
        }
        Attr::Scale => theta.exp(),
        _ => 0.0,
    }
}

fn check_clip(cfg: &OptimizerConfig) -> Result<()> {
    if !(cfg.clip_opacity > 0.0 && cfg.clip_scale > 0.0) {
        return Err(LabError::Config(format!(
            "clip bounds ({}, {}) must be positive",
            cfg.clip_opacity, cfg.clip_scale
        )));
    }
    Ok(())
}

/// Sparse step on photometric-only moments plus an attribute penalty
/// `extra(attr, theta, sqrt_vhat)` added to the normalized direction.
fn decoupled_step<F>(
    state: &mut MomentState,
    set: &mut PrimitiveSet,
    grads: &AttrArrays,
    visibility: &VisibilityMask,
    cfg: &OptimizerConfig,
    extra: F,
) -> Result<StepReport>
where
    F: Fn(Attr, f64, f64) -> f64,
{
    check_shapes(state, set, grads)?;
    check_finite(grads)?;
    check_clip(cfg)?;
    let mut report = StepReport::default();
    for attr in Attr::ALL {
        let d = attr.dim();
        let lr = cfg.lr.get(attr);
        for i in (0..set.len()).filter(|&i| visibility.get(i)) {
            let t = state.steps(attr)[i] + 1;
            state.steps_mut(attr)[i] = t;
            for k in i * d..(i + 1) * d {
                let m = &mut state.m.get_mut(attr)[k];
                let v = &mut state.v.get_mut(attr)[k];
                let dir = moment_update(m, v, grads.get(attr)[k], t, cfg);
                let sqrt_vhat = (*v / bias_correction(cfg.beta2, t)).sqrt();
                let theta = &mut set.params.get_mut(attr)[k];
                let e = extra(attr, *theta, sqrt_vhat);
                if e > 0.0 {
                    report.penalized += 1;
                    report.max_extra = report.max_extra.max(e);
                }
                *theta -= lr * (dir + e);
            }
        }
    }
    Ok(report)
}

/// Decoupled attribute regularization: the opacity and scale penalties are
/// normalized by the rounded pixel count and the second moment, then clipped.
/// Position noise is applied separately by the caller.
pub fn dar_step(
    state: &mut MomentState,
    set: &mut PrimitiveSet,
    photometric_grads: &AttrArrays,
    visibility: &VisibilityMask,
    cfg: &OptimizerConfig,
    pixel_count: usize,
    active: RegActivity,
) -> Result<StepReport> {
    let n = rounded_pixel_count(pixel_count, cfg.round_pixel_count);
    decoupled_step(state, set, photometric_grads, visibility, cfg, |attr, theta, sv| match attr {
        Attr::Opacity if active.opacity => dar_term(
            cfg.lambda_opacity,
            reg_gradient(attr, theta),
            n,
            sv,
            cfg.eps,
            cfg.clip_opacity,
        ),
        Attr::Scale if active.scale => dar_term(
            cfg.lambda_scale,
            reg_gradient(attr, theta),
            n,
            sv,
            cfg.eps,
            cfg.clip_scale,
        ),
        _ => 0.0,
    })
}

/// AdamW-style constant penalty `lambda * grad R`, optionally clamped at the
/// per-attribute `C_t` when `clip` is set.
pub fn adamw_const_step(
    state: &mut MomentState,
    set: &mut PrimitiveSet,
    photometric_grads: &AttrArrays,
    visibility: &VisibilityMask,
    cfg: &OptimizerConfig,
    clip: bool,
    active: RegActivity,
) -> Result<StepReport> {
    decoupled_step(state, set, photometric_grads, visibility, cfg, |attr, theta, _| {
        let (on, lambda, c) = match attr {
            Attr::Opacity => (active.opacity, cfg.lambda_opacity, cfg.clip_opacity),
            Attr::Scale => (active.scale, cfg.lambda_scale, cfg.clip_scale),
            _ => return 0.0,
        };
        if !on {
            return 0.0;
        }
        let term = lambda * reg_gradient(attr, theta);
        if clip {
            term.min(c)
        } else {
            term
        }
    })
}
