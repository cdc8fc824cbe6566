use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{LabError, Result};
use crate::optimizer::MomentState;
use crate::primitives::{PrimitiveSet, DEAD_OPACITY};

const MIN_RELOCATED_OPACITY: f64 = 0.005;
const MAX_RELOCATED_OPACITY: f64 = 1.0 - 1e-6;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RelocateOutcome {
    /// Dead rows that were respawned.
    pub relocated: Vec<usize>,
    /// Target chosen for each respawned row.
    pub targets: Vec<usize>,
}

/// Opacity each of `k + 1` stacked copies needs to reproduce `o`.
pub fn shared_opacity(o: f64, copies: usize) -> f64 {
    (1.0 - (1.0 - o).powf(1.0 / copies as f64)).clamp(MIN_RELOCATED_OPACITY, MAX_RELOCATED_OPACITY)
}

/// Respawns every dead primitive on top of an alive one drawn with
/// probability proportional to opacity. The target and its copies share its
/// opacity so the stacked blend is preserved; respawned rows get fresh moments.
pub fn mcmc_relocate<R: Rng + ?Sized>(
    set: &mut PrimitiveSet,
    state: &mut MomentState,
    rng: &mut R,
) -> Result<RelocateOutcome> {
    if !state.is_aligned_with(set) {
        return Err(LabError::Contract("relocation inputs are not row-aligned".into()));
    }
    let (dead, sources): (Vec<usize>, Vec<usize>) = (0..set.len())
        .filter(|&i| set.alive[i])
        .partition(|&i| set.opacity(i) <= DEAD_OPACITY);
    if dead.is_empty() {
        return Ok(RelocateOutcome::default());
    }
    if sources.is_empty() {
        return Err(LabError::SceneCollapse);
    }
    let weights = WeightedIndex::new(sources.iter().map(|&i| set.opacity(i)))
        .map_err(|e| LabError::Contract(format!("relocation weights: {e}")))?;
    let targets: Vec<usize> = dead.iter().map(|_| sources[weights.sample(rng)]).collect();

    let mut picks = vec![0usize; set.len()];
    for &t in &targets {
        picks[t] += 1;
    }
    for (t, &k) in picks.iter().enumerate() {
        if k > 0 {
            let o = set.opacity(t);
            set.set_opacity(t, shared_opacity(o, k + 1));
        }
    }
    for (&d, &t) in dead.iter().zip(&targets) {
        set.set(d, set.get(t));
    }
    state.reset_rows(&dead);
    Ok(RelocateOutcome { relocated: dead, targets })
}
