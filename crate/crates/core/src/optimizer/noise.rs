use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::primitives::{build_covariance, sigmoid, PrimitiveSet};

/// Opacity-gated, covariance-shaped position noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    /// Multiplier on the position learning rate.
    pub lr: f64,
    /// Gate steepness `lambda_mu`.
    pub sharpness: f64,
    /// Gate center `lambda_t`.
    pub center: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { lr: 1.0, sharpness: 100.0, center: 0.005 }
    }
}

/// `sigmoid(-lambda_mu (o - lambda_t))`.
pub fn noise_gate(opacity: f64, cfg: &NoiseConfig) -> f64 {
    sigmoid(-cfg.sharpness * (opacity - cfg.center))
}

/// Draws `lr * lr_position * gate(o) * Sigma * gamma` for every alive row;
/// dead rows get zero and consume no randomness.
pub fn noise_perturb<R: Rng + ?Sized>(
    set: &PrimitiveSet,
    lr_position: f64,
    cfg: &NoiseConfig,
    rng: &mut R,
) -> Result<Vec<[f64; 2]>> {
    let mut out = vec![[0.0; 2]; set.len()];
    for (i, d) in out.iter_mut().enumerate() {
        if !set.alive[i] {
            continue;
        }
        let cov = build_covariance(set.scale(i), set.params.rotation[i])?;
        let gamma: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let g = cfg.lr * lr_position * noise_gate(set.opacity(i), cfg);
        let s = cov.apply(gamma);
        *d = [g * s[0], g * s[1]];
    }
    Ok(out)
}

pub fn apply_position_noise(set: &mut PrimitiveSet, delta: &[[f64; 2]]) {
    for (i, d) in delta.iter().enumerate() {
        set.params.position[2 * i] += d[0];
        set.params.position[2 * i + 1] += d[1];
    }
}
