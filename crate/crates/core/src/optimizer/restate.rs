use rand::Rng;

use super::MomentState;
use crate::error::{LabError, Result};
use crate::primitives::Attr;

/// Piecewise-constant schedule: the value of the last point at or before the
/// queried iteration, zero before the first point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Schedule {
    pub points: Vec<(u64, f64)>,
}

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Self { points: vec![(0, value)] }
    }

    pub fn value_at(&self, iteration: u64) -> f64 {
        self.points
            .iter()
            .take_while(|(it, _)| *it <= iteration)
            .last()
            .map_or(0.0, |&(_, v)| v)
    }

    pub fn validate(&self, name: &str, lo: f64, hi: f64) -> Result<()> {
        if self.points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(LabError::Config(format!("{name}: milestones must be strictly increasing")));
        }
        if let Some(&(_, v)) = self.points.iter().find(|(_, v)| !(lo..=hi).contains(v)) {
            return Err(LabError::Config(format!("{name}: value {v} outside [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// When and how many primitives re-state regularization touches.
#[derive(Clone, Debug, PartialEq)]
pub struct StssSchedule {
    /// (milestone, sampling ratio) pairs.
    pub ratios: Schedule,
    pub interval: u64,
    /// Last iteration at which sampling may fire.
    pub end: u64,
}

impl StssSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(LabError::Config("state sampling interval must be positive".into()));
        }
        self.ratios.validate("state sampling ratios", 0.0, 1.0)
    }

    pub fn start(&self) -> Option<u64> {
        self.ratios.points.first().map(|p| p.0)
    }

    pub fn fires_at(&self, iteration: u64) -> bool {
        match self.start() {
            Some(s) => iteration.is_multiple_of(self.interval) && iteration >= s && iteration <= self.end,
            None => false,
        }
    }
}

/// `floor(ratio * n)` distinct uniform row indices, ascending; empty when the
/// schedule does not fire at `iteration`.
pub fn stss_sample<R: Rng + ?Sized>(schedule: &StssSchedule, iteration: u64, n: usize, rng: &mut R) -> Vec<usize> {
    if !schedule.fires_at(iteration) {
        return Vec::new();
    }
    let k = ((schedule.ratios.value_at(iteration) * n as f64).floor() as usize).min(n);
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct RsrConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub schedule: StssSchedule,
    /// Require `alpha2 == alpha1^2`.
    pub enforce_square: bool,
}

impl RsrConfig {
    pub fn validate(&self) -> Result<()> {
        check_alphas(self.alpha1, self.alpha2)?;
        if self.enforce_square && (self.alpha2 - self.alpha1 * self.alpha1).abs() > 1e-12 {
            return Err(LabError::Config(format!(
                "alpha2 = {} must equal alpha1^2 = {}",
                self.alpha2,
                self.alpha1 * self.alpha1
            )));
        }
        self.schedule.validate()
    }
}

fn check_alphas(a1: f64, a2: f64) -> Result<()> {
    for (name, a) in [("alpha1", a1), ("alpha2", a2)] {
        if !(0.0..1.0).contains(&a) {
            return Err(LabError::Config(format!("{name} = {a} must lie in [0, 1)")));
        }
    }
    Ok(())
}

/// Scales first moments by `alpha1` and second moments by `alpha2` on the
/// selected rows. Clocks are untouched.
pub fn rsr_apply(state: &mut MomentState, indices: &[usize], alpha1: f64, alpha2: f64) -> Result<()> {
    check_alphas(alpha1, alpha2)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= state.len()) {
        return Err(LabError::Contract(format!("row {bad} out of range for {} rows", state.len())));
    }
    for &i in indices {
        for attr in Attr::ALL {
            state.m.row_mut(attr, i).iter_mut().for_each(|m| *m *= alpha1);
            state.v.row_mut(attr, i).iter_mut().for_each(|v| *v *= alpha2);
        }
    }
    Ok(())
}
