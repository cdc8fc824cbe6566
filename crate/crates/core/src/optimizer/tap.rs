use super::MomentState;
use crate::primitives::{Attr, PrimitiveSet};

/// Summary of one attribute group's moments over alive rows.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MomentStats {
    pub mean_sqrt_v: f64,
    pub max_sqrt_v: f64,
    /// `|m| / sqrt(v)` over entries with `v > 0`.
    pub mean_ratio: f64,
    pub max_ratio: f64,
}

pub fn moment_stats(state: &MomentState, set: &PrimitiveSet, attr: Attr) -> MomentStats {
    let d = attr.dim();
    let (m, v) = (state.m.get(attr), state.v.get(attr));
    let mut out = MomentStats::default();
    let (mut n_v, mut n_r) = (0usize, 0usize);
    for i in (0..set.len()).filter(|&i| set.alive[i]) {
        for k in i * d..(i + 1) * d {
            let s = v[k].sqrt();
            out.mean_sqrt_v += s;
            out.max_sqrt_v = out.max_sqrt_v.max(s);
            n_v += 1;
            if v[k] > 0.0 {
                let r = m[k].abs() / s;
                out.mean_ratio += r;
                out.max_ratio = out.max_ratio.max(r);
                n_r += 1;
            }
        }
    }
    if n_v > 0 {
        out.mean_sqrt_v /= n_v as f64;
    }
    if n_r > 0 {
        out.mean_ratio /= n_r as f64;
    }
    out
}
