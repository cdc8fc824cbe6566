//! Photometric loss (L1 + DSSIM) with analytic image gradients, and the
//! coupled L1 attribute-regularization gradients used by the baseline modes.

use crate::error::{LabError, Result};
use crate::image::Image;
use crate::primitives::{sigmoid, AttrArrays, PrimitiveSet};
use crate::renderer::VisibilityMask;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, x) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *x = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Separable "valid" filtering: output is `(w - 10) x (h - 10)`.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (wv, hv) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; wv * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..wv {
            tmp[y * wv + x] = k.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; wv * hv];
    for y in 0..hv {
        for x in 0..wv {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                acc += kj * tmp[(y + j) * wv + x];
            }
            out[y * wv + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(valid: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (wv, hv) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; wv * h];
    for y in 0..hv {
        for x in 0..wv {
            let v = valid[y * wv + x];
            for (j, kj) in k.iter().enumerate() {
                tmp[(y + j) * wv + x] += kj * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..wv {
            let v = tmp[y * wv + x];
            for (i, ki) in k.iter().enumerate() {
                out[y * w + x + i] += ki * v;
            }
        }
    }
    out
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(LabError::Contract(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// Mean SSIM over all valid windows and channels, optionally with the
/// gradient of that mean with respect to `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check_pair(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(LabError::Domain(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    let k = gaussian_window();
    let (w, h, nc) = (a.width, a.height, a.channels);
    let nvalid = (w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW);
    let norm = 1.0 / (nvalid * nc) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, nc));

    for c in 0..nc {
        let pa = a.channel(c);
        let pb = b.channel(c);
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let e_aa = filter_valid(&sq(&pa, &pa), w, h, &k);
        let e_bb = filter_valid(&sq(&pb, &pb), w, h, &k);
        let e_ab = filter_valid(&sq(&pa, &pb), w, h, &k);

        let mut d_mu = vec![0.0; nvalid];
        let mut d_eaa = vec![0.0; nvalid];
        let mut d_eab = vec![0.0; nvalid];
        for p in 0..nvalid {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let var_a = e_aa[p] - ma * ma;
            let var_b = e_bb[p] - mb * mb;
            let cov = e_ab[p] - ma * mb;
            let n1 = 2.0 * ma * mb + SSIM_C1;
            let n2 = 2.0 * cov + SSIM_C2;
            let d1 = ma * ma + mb * mb + SSIM_C1;
            let d2 = var_a + var_b + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                d_mu[p] = norm * s * (2.0 * mb / n1 - 2.0 * mb / n2 - 2.0 * ma / d1 + 2.0 * ma / d2);
                d_eaa[p] = -norm * s / d2;
                d_eab[p] = norm * 2.0 * s / n2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let g_mu = filter_valid_adjoint(&d_mu, w, h, &k);
            let g_aa = filter_valid_adjoint(&d_eaa, w, h, &k);
            let g_ab = filter_valid_adjoint(&d_eab, w, h, &k);
            for q in 0..w * h {
                g.data[q * nc + c] = g_mu[q] + 2.0 * pa[q] * g_aa[q] + pb[q] * g_ab[q];
            }
        }
    }
    Ok((total * norm, grad))
}

/// Mean structural similarity (11x11 Gaussian window, sigma 1.5, valid
/// windows only).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// `1 - SSIM(a, b)` and its gradient with respect to `a`.
pub fn dssim(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (s, g) = ssim_impl(a, b, true)?;
    let mut g = g.expect("gradient requested");
    g.data.iter_mut().for_each(|x| *x = -*x);
    Ok((1.0 - s, g))
}

/// `(1 - lambda1) * L1 + lambda1 * DSSIM` and `dL/d render`.
pub fn photometric_loss(render: &Image, target: &Image, lambda1: f64) -> Result<(f64, Image)> {
    check_pair(render, target)?;
    if !(0.0..=1.0).contains(&lambda1) {
        return Err(LabError::Domain(format!("lambda1 {lambda1} outside [0, 1]")));
    }
    let n = render.data.len() as f64;
    let mut grad = Image::new(render.width, render.height, render.channels);
    let mut l1 = 0.0;
    for ((g, r), t) in grad.data.iter_mut().zip(&render.data).zip(&target.data) {
        let d = r - t;
        l1 += d.abs();
        *g = if d > 0.0 {
            (1.0 - lambda1) / n
        } else if d < 0.0 {
            -(1.0 - lambda1) / n
        } else {
            0.0
        };
    }
    let mut value = (1.0 - lambda1) * l1 / n;
    if lambda1 > 0.0 {
        let (d, dg) = dssim(render, target)?;
        value += lambda1 * d;
        for (g, x) in grad.data.iter_mut().zip(&dg.data) {
            *g += lambda1 * x;
        }
    }
    Ok((value, grad))
}

/// Gradients and value of `lambda_o |o|_1 + lambda_s |s|_1` routed through the
/// shared gradient, normalized by the number of visible primitives.
pub struct CoupledReg {
    pub value: f64,
    pub grads: AttrArrays,
    pub visible_count: usize,
}

/// Coupled L1 regularization on opacity and scale.
///
/// The per-primitive gradients are `lambda_o * o (1 - o) / N_v` on the opacity
/// logit and `lambda_s * exp(kappa) / N_v` on each log-scale. With
/// `all_alive` the term reaches every alive primitive (synchronous mode);
/// otherwise only visible ones. Skipped entirely when nothing is visible.
pub fn coupled_reg_grad(
    set: &PrimitiveSet,
    visibility: &VisibilityMask,
    all_alive: bool,
    lambda_o: f64,
    lambda_s: f64,
) -> CoupledReg {
    let n = set.len();
    let mut grads = AttrArrays::zeros(n);
    let visible_count = visibility.count();
    if visible_count == 0 || (lambda_o == 0.0 && lambda_s == 0.0) {
        return CoupledReg {
            value: 0.0,
            grads,
            visible_count,
        };
    }
    let inv_nv = 1.0 / visible_count as f64;
    let mut value = 0.0;
    for i in 0..n {
        if !set.alive[i] || !(all_alive || visibility.get(i)) {
            continue;
        }
        let o = sigmoid(set.params.opacity[i]);
        let s = set.scale(i);
        value += lambda_o * o + lambda_s * (s[0] + s[1]);
        grads.opacity[i] = lambda_o * o * (1.0 - o) * inv_nv;
        grads.scale[2 * i] = lambda_s * s[0] * inv_nv;
        grads.scale[2 * i + 1] = lambda_s * s[1] * inv_nv;
    }
    CoupledReg {
        value,
        grads,
        visible_count,
    }
}
