//! Differentiable front-to-back alpha blending of 2D Gaussians.
//!
//! For every pixel, primitives are visited in ascending depth-key order:
//!
//! ```text
//! alpha_i = o_i * exp(-0.5 * d^T Sigma_i^-1 d)
//! C       = sum_i c_i * alpha_i * T_i + bg * T_end,   T_{i+1} = T_i * (1 - alpha_i)
//! ```
//!
//! A primitive contributes at a pixel only inside its 3-sigma ellipse and
//! when `alpha > 1/255`. Blending stops once `T` drops below
//! [`EARLY_STOP_TRANSMITTANCE`]; the contributions actually used are kept in a
//! [`BlendRecord`] so the backward pass replays the same decisions.

use crate::error::{LabError, Result};
use crate::image::Image;
use crate::primitives::{AttrArrays, PrimitiveSet, Sym2, DEAD_OPACITY};

pub const EARLY_STOP_TRANSMITTANCE: f64 = 1e-4;

/// Squared Mahalanobis radius of the support ellipse (3 sigma).
const SUPPORT_RADIUS_SQ: f64 = 9.0;

/// A rectangular crop of the global canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewpoint {
    /// Crop origin on the canvas, in pixels.
    pub origin: [usize; 2],
    pub width: usize,
    pub height: usize,
    /// Scene-to-crop-pixel transform: `pixel = scale * x + offset`.
    pub scale: f64,
    pub offset: [f64; 2],
    pub background: [f64; 3],
}

impl Viewpoint {
    /// Unit-scale crop where scene units are canvas pixels.
    pub fn crop(x0: usize, y0: usize, width: usize, height: usize) -> Self {
        Self {
            origin: [x0, y0],
            width,
            height,
            scale: 1.0,
            offset: [-(x0 as f64), -(y0 as f64)],
            background: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(LabError::Contract(format!(
                "viewpoint size {}x{} must be at least 1x1",
                self.width, self.height
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(LabError::Contract(format!(
                "viewpoint scale {} must be finite and positive",
                self.scale
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn to_pixel(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.scale * p[0] + self.offset[0],
            self.scale * p[1] + self.offset[1],
        ]
    }
}

/// Per-primitive flag: did it contribute to at least one pixel of a view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityMask(pub Vec<bool>);

impl VisibilityMask {
    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn none(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendEntry {
    pub primitive: u32,
    pub alpha: f64,
    /// Transmittance in front of this primitive.
    pub transmittance: f64,
}

/// Per-pixel ordered contributions captured by the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendRecord {
    pub width: usize,
    pub height: usize,
    pub primitive_count: usize,
    pub entries: Vec<BlendEntry>,
    /// `entries[offsets[p]..offsets[p + 1]]` belong to pixel `p`.
    pub offsets: Vec<usize>,
    /// Transmittance left for the background at each pixel.
    pub final_transmittance: Vec<f64>,
}

impl BlendRecord {
    pub fn pixel(&self, p: usize) -> &[BlendEntry] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }
}

pub struct RenderOutput {
    pub image: Image,
    pub record: BlendRecord,
    pub visibility: VisibilityMask,
    /// Primitives dropped because their covariance could not be inverted.
    pub skipped_singular: usize,
}

/// Screen-space data for one primitive that may touch the crop.
struct Splat {
    index: usize,
    mean: [f64; 2],
    conic: Sym2,
    /// Pixel-space standard deviations along the local axes.
    sigma: [f64; 2],
    cos: f64,
    sin: f64,
    opacity: f64,
    color: [f64; 3],
    /// Inclusive pixel bounds `[x0, x1, y0, y1]`.
    bbox: [usize; 4],
}

fn project(set: &PrimitiveSet, vp: &Viewpoint, skipped: &mut usize) -> Vec<Splat> {
    let mut splats = Vec::new();
    for i in 0..set.len() {
        if !set.alive[i] {
            continue;
        }
        let opacity = set.opacity(i);
        if opacity <= DEAD_OPACITY {
            continue;
        }
        let ls = set.log_scale(i);
        let sigma = [vp.scale * ls[0].exp(), vp.scale * ls[1].exp()];
        let rot = set.params.rotation[i];
        let (sin, cos) = rot.sin_cos();
        let (a, b) = (sigma[0] * sigma[0], sigma[1] * sigma[1]);
        let cov = Sym2 {
            xx: cos * cos * a + sin * sin * b,
            xy: cos * sin * (a - b),
            yy: sin * sin * a + cos * cos * b,
        };
        let Some(conic) = cov.inverse().filter(|c| c.xx.is_finite() && c.yy.is_finite()) else {
            *skipped += 1;
            continue;
        };
        let mean = vp.to_pixel(set.position(i));
        // Past this radius alpha is below the contribution floor anyway.
        let r2 = SUPPORT_RADIUS_SQ.min(2.0 * (opacity / DEAD_OPACITY).ln());
        if r2 <= 0.0 {
            continue;
        }
        let hx = (r2 * cov.xx).sqrt();
        let hy = (r2 * cov.yy).sqrt();
        let x0 = (mean[0] - hx - 0.5).ceil().max(0.0);
        let x1 = (mean[0] + hx - 0.5).floor().min(vp.width as f64 - 1.0);
        let y0 = (mean[1] - hy - 0.5).ceil().max(0.0);
        let y1 = (mean[1] + hy - 0.5).floor().min(vp.height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            continue;
        }
        let c = set.color(i);
        splats.push(Splat {
            index: i,
            mean,
            conic,
            sigma,
            cos,
            sin,
            opacity,
            color: [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)],
            bbox: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
        });
    }
    splats.sort_by(|p, q| {
        set.depth[p.index]
            .total_cmp(&set.depth[q.index])
            .then(p.index.cmp(&q.index))
    });
    splats
}

#[inline]
fn splat_alpha(s: &Splat, px: f64, py: f64) -> Option<(f64, [f64; 2])> {
    let d = [px - s.mean[0], py - s.mean[1]];
    let q = s.conic.quad(d);
    if q > SUPPORT_RADIUS_SQ {
        return None;
    }
    let alpha = s.opacity * (-0.5 * q).exp();
    (alpha > DEAD_OPACITY).then_some((alpha, d))
}

/// Walks the blending recurrence for every pixel, calling `visit` with each
/// accepted contribution.
fn blend<F: FnMut(usize, &Splat, f64, f64)>(
    splats: &[Splat],
    vp: &Viewpoint,
    n_primitives: usize,
    mut visit: F,
) -> BlendRecord {
    let npix = vp.pixel_count();
    let mut entries = Vec::new();
    let mut offsets = Vec::with_capacity(npix + 1);
    let mut final_t = Vec::with_capacity(npix);
    offsets.push(0);
    for py in 0..vp.height {
        for px in 0..vp.width {
            let p = py * vp.width + px;
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut t = 1.0;
            for s in splats {
                if px < s.bbox[0] || px > s.bbox[1] || py < s.bbox[2] || py > s.bbox[3] {
                    continue;
                }
                let Some((alpha, _)) = splat_alpha(s, cx, cy) else {
                    continue;
                };
                visit(p, s, alpha, t);
                entries.push(BlendEntry {
                    primitive: s.index as u32,
                    alpha,
                    transmittance: t,
                });
                t *= 1.0 - alpha;
                if t < EARLY_STOP_TRANSMITTANCE {
                    break;
                }
            }
            final_t.push(t);
            offsets.push(entries.len());
        }
    }
    BlendRecord {
        width: vp.width,
        height: vp.height,
        primitive_count: n_primitives,
        entries,
        offsets,
        final_transmittance: final_t,
    }
}

fn visibility_from(record: &BlendRecord) -> VisibilityMask {
    let mut mask = vec![false; record.primitive_count];
    for e in &record.entries {
        mask[e.primitive as usize] = true;
    }
    VisibilityMask(mask)
}

/// Renders the crop and captures what the backward pass needs.
pub fn render_forward(set: &PrimitiveSet, vp: &Viewpoint) -> Result<RenderOutput> {
    vp.validate()?;
    let mut skipped = 0;
    let splats = project(set, vp, &mut skipped);
    let mut image = Image::rgb(vp.width, vp.height);
    let record = blend(&splats, vp, set.len(), |p, s, alpha, t| {
        let w = alpha * t;
        let px = &mut image.data[3 * p..3 * p + 3];
        px[0] += w * s.color[0];
        px[1] += w * s.color[1];
        px[2] += w * s.color[2];
    });
    if vp.background != [0.0; 3] {
        for (p, &t) in record.final_transmittance.iter().enumerate() {
            for c in 0..3 {
                image.data[3 * p + c] += t * vp.background[c];
            }
        }
    }
    let visibility = visibility_from(&record);
    Ok(RenderOutput {
        image,
        record,
        visibility,
        skipped_singular: skipped,
    })
}

/// Which primitives contribute at least one above-floor alpha to the crop.
pub fn compute_visibility(set: &PrimitiveSet, vp: &Viewpoint) -> Result<VisibilityMask> {
    vp.validate()?;
    let mut skipped = 0;
    let splats = project(set, vp, &mut skipped);
    let record = blend(&splats, vp, set.len(), |_, _, _, _| {});
    Ok(visibility_from(&record))
}

/// Alpha-weighted depth-key image: `D(p) = sum_i depth_i * alpha_i * T_i`.
pub fn render_depth(set: &PrimitiveSet, vp: &Viewpoint) -> Result<Image> {
    vp.validate()?;
    let mut skipped = 0;
    let splats = project(set, vp, &mut skipped);
    let mut depth = Image::new(vp.width, vp.height, 1);
    blend(&splats, vp, set.len(), |p, s, alpha, t| {
        depth.data[p] += set.depth[s.index] * alpha * t;
    });
    Ok(depth)
}

/// Adjoint of [`render_forward`]: raw-parameter gradients given `dL/dC`.
///
/// Primitives absent from `record` receive exactly zero gradient.
pub fn render_backward(
    record: &BlendRecord,
    set: &PrimitiveSet,
    vp: &Viewpoint,
    dl_dc: &Image,
) -> Result<AttrArrays> {
    vp.validate()?;
    if record.primitive_count != set.len() {
        return Err(LabError::Contract(format!(
            "blend record covers {} primitives, set has {}",
            record.primitive_count,
            set.len()
        )));
    }
    if record.width != vp.width || record.height != vp.height {
        return Err(LabError::Contract("blend record does not match viewpoint".into()));
    }
    if dl_dc.width != vp.width || dl_dc.height != vp.height || dl_dc.channels != 3 {
        return Err(LabError::Contract("image gradient does not match viewpoint".into()));
    }
    let mut skipped = 0;
    let splats = project(set, vp, &mut skipped);
    let mut slot = vec![usize::MAX; set.len()];
    for (k, s) in splats.iter().enumerate() {
        slot[s.index] = k;
    }

    let mut grads = AttrArrays::zeros(set.len());
    for py in 0..vp.height {
        for px in 0..vp.width {
            let p = py * vp.width + px;
            let entries = record.pixel(p);
            if entries.is_empty() {
                continue;
            }
            let g = &dl_dc.data[3 * p..3 * p + 3];
            if g == [0.0, 0.0, 0.0] {
                continue;
            }
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            // Normalized color seen behind the current entry.
            let mut behind = vp.background;
            for e in entries.iter().rev() {
                let i = e.primitive as usize;
                let s = &splats[slot[i]];
                let (alpha, t) = (e.alpha, e.transmittance);
                let raw_color = set.color(i);
                let mut dl_dalpha = 0.0;
                for c in 0..3 {
                    dl_dalpha += g[c] * t * (s.color[c] - behind[c]);
                    if (0.0..=1.0).contains(&raw_color[c]) {
                        grads.color[3 * i + c] += g[c] * alpha * t;
                    }
                    behind[c] = s.color[c] * alpha + (1.0 - alpha) * behind[c];
                }

                // alpha = o * exp(-q / 2)
                let d = [cx - s.mean[0], cy - s.mean[1]];
                grads.opacity[i] += dl_dalpha * alpha * (1.0 - s.opacity);

                let local = [s.cos * d[0] + s.sin * d[1], -s.sin * d[0] + s.cos * d[1]];
                let inv_var = [
                    1.0 / (s.sigma[0] * s.sigma[0]),
                    1.0 / (s.sigma[1] * s.sigma[1]),
                ];
                grads.scale[2 * i] += dl_dalpha * alpha * local[0] * local[0] * inv_var[0];
                grads.scale[2 * i + 1] += dl_dalpha * alpha * local[1] * local[1] * inv_var[1];
                grads.rotation[i] +=
                    -dl_dalpha * alpha * local[0] * local[1] * (inv_var[0] - inv_var[1]);

                let sd = s.conic.apply(d);
                grads.position[2 * i] += dl_dalpha * alpha * sd[0] * vp.scale;
                grads.position[2 * i + 1] += dl_dalpha * alpha * sd[1] * vp.scale;
            }
        }
    }
    Ok(grads)
}

/// Positional gradient norm in crop-pixel units, used by densification.
pub fn pixel_position_grad_norm(grads: &AttrArrays, vp: &Viewpoint, i: usize) -> f64 {
    let gx = grads.position[2 * i] / vp.scale;
    let gy = grads.position[2 * i + 1] / vp.scale;
    gx.hypot(gy)
}

/// Final transmittance recomputed as a plain product, for auditing records.
pub fn product_transmittance(entries: &[BlendEntry]) -> f64 {
    entries.iter().map(|e| 1.0 - e.alpha).product()
}
