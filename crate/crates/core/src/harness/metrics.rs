use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::image::Image;
use crate::loss::ssim;
use crate::optimizer::{moment_stats, MomentState};
use crate::primitives::{classify_active, Attr, PrimitiveSet, DEAD_OPACITY};
use crate::renderer::{render_forward, Viewpoint};

pub const PSNR_CAP: f64 = 99.0;

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub np: usize,
    pub na: usize,
    pub nd: usize,
    /// Percent change of `na` against the baseline arm at the same iteration.
    pub delta_na: Option<f64>,
    /// Mean and max of `|m| / sqrt(v)` on the opacity group.
    pub mean_mv: f64,
    pub max_mv: f64,
}

/// `10 log10(1 / mse)`, capped for (near-)identical images.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(LabError::Contract("images differ in shape".into()));
    }
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// `(N_x - N_x^base) / N_x^base` in percent.
pub fn delta_percent(value: usize, baseline: usize) -> Option<f64> {
    (baseline > 0).then(|| 100.0 * (value as f64 - baseline as f64) / baseline as f64)
}

/// Renders every view and averages PSNR and SSIM over them. Renders are
/// clamped to `[0, 1]` before scoring.
pub fn compute_metrics(
    iter: u64,
    set: &PrimitiveSet,
    views: &[Viewpoint],
    targets: &[Image],
    state: Option<&MomentState>,
    baseline_na: Option<usize>,
) -> Result<MetricsRecord> {
    if views.len() != targets.len() || views.is_empty() {
        return Err(LabError::Contract(format!(
            "{} views but {} targets",
            views.len(),
            targets.len()
        )));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for (vp, target) in views.iter().zip(targets) {
        let mut img = render_forward(set, vp)?.image;
        img.data.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
        p += psnr_from_mse(mse(&img, target)?);
        s += ssim(&img, target)?;
    }
    let k = views.len() as f64;
    let active = classify_active(set, DEAD_OPACITY);
    let (mean_mv, max_mv) = match state {
        Some(st) => {
            let m = moment_stats(st, set, Attr::Opacity);
            (m.mean_ratio, m.max_ratio)
        }
        None => (0.0, 0.0),
    };
    Ok(MetricsRecord {
        iter,
        psnr: p / k,
        ssim: s / k,
        np: set.len(),
        na: active.active,
        nd: active.dead,
        delta_na: baseline_na.and_then(|b| delta_percent(active.active, b)),
        mean_mv,
        max_mv,
    })
}
