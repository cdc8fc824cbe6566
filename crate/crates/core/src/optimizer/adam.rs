use super::{bias_correction, check_finite, check_shapes, MomentState, OptimizerConfig};
use crate::error::Result;
use crate::primitives::{Attr, AttrArrays, PrimitiveSet};
use crate::renderer::VisibilityMask;

/// Updates `m, v` in place and returns the bias-corrected direction
/// `m_hat / (sqrt(v_hat) + eps)`.
#[inline]
pub(super) fn moment_update(m: &mut f64, v: &mut f64, g: f64, t: u64, cfg: &OptimizerConfig) -> f64 {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let m_hat = *m / bias_correction(cfg.beta1, t);
    let v_hat = *v / bias_correction(cfg.beta2, t);
    m_hat / (v_hat.sqrt() + cfg.eps)
}

/// Synchronous Adam: every row steps on the shared clock, including rows with
/// zero gradient, whose decaying moments keep moving the parameters.
pub fn adam_step_sync(
    state: &mut MomentState,
    set: &mut PrimitiveSet,
    grads: &AttrArrays,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_shapes(state, set, grads)?;
    check_finite(grads)?;
    state.global_step += 1;
    let t = state.global_step;
    for attr in Attr::ALL {
        let lr = cfg.lr.get(attr);
        let g = grads.get(attr);
        let m = state.m.get_mut(attr);
        let v = state.v.get_mut(attr);
        let theta = set.params.get_mut(attr);
        for k in 0..g.len() {
            theta[k] -= lr * moment_update(&mut m[k], &mut v[k], g[k], t, cfg);
        }
        state.steps_mut(attr).iter_mut().for_each(|s| *s += 1);
    }
    Ok(())
}

/// Sparse Adam: visible rows take a standard step on their own clock;
/// invisible rows keep parameters, moments and clock untouched.
pub fn sparse_adam_step(
    state: &mut MomentState,
    set: &mut PrimitiveSet,
    grads: &AttrArrays,
    visibility: &VisibilityMask,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_shapes(state, set, grads)?;
    check_finite(grads)?;
    for attr in Attr::ALL {
        let d = attr.dim();
        let lr = cfg.lr.get(attr);
        for i in (0..set.len()).filter(|&i| visibility.get(i)) {
            let t = state.steps(attr)[i] + 1;
            state.steps_mut(attr)[i] = t;
            for k in i * d..(i + 1) * d {
                let g = grads.get(attr)[k];
                let dir = moment_update(
                    &mut state.m.get_mut(attr)[k],
                    &mut state.v.get_mut(attr)[k],
                    g,
                    t,
                    cfg,
                );
                set.params.get_mut(attr)[k] -= lr * dir;
            }
        }
    }
    Ok(())
}
