#![allow(dead_code)]

use std::time::{Duration, Instant};

use gsopt::harness::config::ExperimentConfig;
use gsopt::harness::output::{run_arms, write_outputs, ArmRun};
use gsopt::harness::presets::{preset, Arm};
use gsopt::harness::scene::gen_scene;
use gsopt::optimizer::{
    adam_step_sync, adamw_const_step, dar_step, dar_term, rounded_pixel_count, rsr_apply, sparse_adam_step,
    LearningRates, MomentState, OptimizerConfig, OptimizerMode, RegActivity,
};
use gsopt::primitives::{Attr, AttrArrays, PrimitiveSet, RawPrimitive};
use gsopt::renderer::{render_backward, render_forward, BlendRecord, Viewpoint, VisibilityMask};
use gsopt::rng::{stream, Stream};
use rand::Rng;
use rand_distr::{Distribution, Normal};

// ---------------------------------------------------------------------------
// Scalar reference optimizers. One parameter, one loop iteration per step.

#[derive(Clone, Copy, Debug, Default)]
pub struct Scalar {
    pub theta: f64,
    pub m: f64,
    pub v: f64,
    pub t: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct Hyper {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

/// Which penalty the decoupled reference adds.
#[derive(Clone, Copy, Debug)]
pub enum Penalty {
    None,
    /// `min(lambda * R'(theta) / n / (sqrt(v_hat) + eps), clip)`
    Dar { lambda: f64, n: f64, clip: f64, opacity: bool },
    /// `lambda * R'(theta)`, clamped at `clip` when given.
    Const { lambda: f64, clip: Option<f64>, opacity: bool },
}

fn reg_grad(theta: f64, opacity: bool) -> f64 {
    if opacity {
        let s = 1.0 / (1.0 + (-theta).exp());
        s * (1.0 - s)
    } else {
        theta.exp()
    }
}

/// One Adam step with an optional decoupled penalty, evaluated at the
/// pre-step parameter.
pub fn ref_step(p: &mut Scalar, g: f64, h: Hyper, pen: Penalty) {
    p.t += 1;
    p.m = h.b1 * p.m + (1.0 - h.b1) * g;
    p.v = h.b2 * p.v + (1.0 - h.b2) * g * g;
    let m_hat = p.m / (1.0 - h.b1.powi(p.t as i32));
    let v_hat = p.v / (1.0 - h.b2.powi(p.t as i32));
    let extra = match pen {
        Penalty::None => 0.0,
        Penalty::Dar { lambda, n, clip, opacity } => {
            (lambda * reg_grad(p.theta, opacity) / n / (v_hat.sqrt() + h.eps)).min(clip)
        }
        Penalty::Const { lambda, clip, opacity } => {
            let e = lambda * reg_grad(p.theta, opacity);
            clip.map_or(e, |c| e.min(c))
        }
    };
    p.theta -= h.lr * (m_hat / (v_hat.sqrt() + h.eps) + extra);
}

// ---------------------------------------------------------------------------
// Random traces against the library.

pub const TRACE_ROWS: usize = 6;

pub fn random_set(rng: &mut impl Rng, n: usize) -> PrimitiveSet {
    let prims: Vec<RawPrimitive> = (0..n)
        .map(|_| RawPrimitive {
            position: [rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)],
            log_scale: [rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0)],
            rotation: rng.random_range(-3.0..3.0),
            opacity_logit: rng.random_range(-4.0..4.0),
            color: [rng.random(), rng.random(), rng.random()],
            depth: rng.random_range(1.0..10.0),
        })
        .collect();
    PrimitiveSet::from_raw(&prims)
}

/// Gradients spanning several orders of magnitude, with exact zeros mixed in.
pub fn random_grads(rng: &mut impl Rng, n: usize) -> AttrArrays {
    let mut g = AttrArrays::zeros(n);
    for attr in Attr::ALL {
        for x in g.get_mut(attr) {
            *x = if rng.random_bool(0.1) {
                0.0
            } else {
                let mag = 10f64.powf(rng.random_range(-6.0..0.0));
                mag * Normal::new(0.0, 1.0).unwrap().sample(rng)
            };
        }
    }
    g
}

pub fn trace_config(mode: OptimizerMode) -> OptimizerConfig {
    OptimizerConfig {
        mode,
        lr: LearningRates { position: 0.02, scale: 5e-3, rotation: 1e-3, opacity: 0.05, color: 2.5e-3 },
        lambda_opacity: 0.001,
        lambda_scale: 1e-5,
        clip_opacity: 10.0,
        clip_scale: 10.0,
        ..Default::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TraceKind {
    Sync,
    Sparse,
    Dar,
    Const,
    ConstClip,
}

/// Runs `steps` library steps and the scalar reference side by side; returns
/// the largest parameter deviation.
pub fn trace_deviation(kind: TraceKind, seed: u64, steps: usize) -> f64 {
    let mut rng = stream(seed, Stream::Test);
    let mode = match kind {
        TraceKind::Sync => OptimizerMode::CoupledAdam,
        TraceKind::Sparse => OptimizerMode::SparseAdam,
        TraceKind::Dar => OptimizerMode::AdamwGs,
        TraceKind::Const => OptimizerMode::AdamwConst,
        TraceKind::ConstClip => OptimizerMode::AdamwConstClip,
    };
    let cfg = trace_config(mode);
    let n = TRACE_ROWS;
    let pixels = 4096;
    let mut set = random_set(&mut rng, n);
    let mut state = MomentState::new(n);
    let mut refs: Vec<Vec<Scalar>> = Attr::ALL
        .iter()
        .map(|&a| set.params.get(a).iter().map(|&theta| Scalar { theta, ..Default::default() }).collect())
        .collect();
    for _ in 0..steps {
        let grads = random_grads(&mut rng, n);
        let vis = if kind == TraceKind::Sync {
            VisibilityMask::all(n)
        } else {
            VisibilityMask((0..n).map(|_| rng.random_bool(0.6)).collect())
        };
        match kind {
            TraceKind::Sync => adam_step_sync(&mut state, &mut set, &grads, &cfg).unwrap(),
            TraceKind::Sparse => sparse_adam_step(&mut state, &mut set, &grads, &vis, &cfg).unwrap(),
            TraceKind::Dar => {
                dar_step(&mut state, &mut set, &grads, &vis, &cfg, pixels, RegActivity::BOTH).unwrap();
            }
            TraceKind::Const | TraceKind::ConstClip => {
                let clip = kind == TraceKind::ConstClip;
                adamw_const_step(&mut state, &mut set, &grads, &vis, &cfg, clip, RegActivity::BOTH).unwrap();
            }
        }
        for (a_idx, &attr) in Attr::ALL.iter().enumerate() {
            let d = attr.dim();
            let h = Hyper { lr: cfg.lr.get(attr), b1: cfg.beta1, b2: cfg.beta2, eps: cfg.eps };
            let (lambda, clip, opacity) = match attr {
                Attr::Opacity => (cfg.lambda_opacity, cfg.clip_opacity, true),
                Attr::Scale => (cfg.lambda_scale, cfg.clip_scale, false),
                _ => (0.0, 0.0, false),
            };
            let pen = match kind {
                _ if lambda == 0.0 => Penalty::None,
                TraceKind::Sync | TraceKind::Sparse => Penalty::None,
                TraceKind::Dar => Penalty::Dar { lambda, n: 400.0, clip, opacity },
                TraceKind::Const => Penalty::Const { lambda, clip: None, opacity },
                TraceKind::ConstClip => Penalty::Const { lambda, clip: Some(clip), opacity },
            };
            for (k, r) in refs[a_idx].iter_mut().enumerate().take(n * d) {
                if vis.get(k / d) {
                    ref_step(r, grads.get(attr)[k], h, pen);
                }
            }
        }
    }
    let mut worst: f64 = 0.0;
    for (a_idx, &attr) in Attr::ALL.iter().enumerate() {
        for (k, &theta) in set.params.get(attr).iter().enumerate() {
            worst = worst.max((theta - refs[a_idx][k].theta).abs());
        }
    }
    worst
}

/// Sparse Adam under full visibility against synchronous Adam.
pub fn full_visibility_deviation(seed: u64, steps: usize) -> f64 {
    let mut rng = stream(seed, Stream::Test);
    let n = TRACE_ROWS;
    let init = random_set(&mut rng, n);
    let (mut a, mut b) = (init.clone(), init);
    let (mut sa, mut sb) = (MomentState::new(n), MomentState::new(n));
    let cfg = trace_config(OptimizerMode::CoupledAdam);
    let all = VisibilityMask::all(n);
    for _ in 0..steps {
        let g = random_grads(&mut rng, n);
        adam_step_sync(&mut sa, &mut a, &g, &cfg).unwrap();
        sparse_adam_step(&mut sb, &mut b, &g, &all, &cfg).unwrap();
    }
    Attr::ALL
        .iter()
        .flat_map(|&attr| a.params.get(attr).iter().zip(b.params.get(attr)).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// `beta^k * x` carried in double-double arithmetic, rounded once at the end.
pub fn exact_decay(beta: f64, k: u32, x: f64) -> f64 {
    let (mut hi, mut lo) = (1.0f64, 0.0f64);
    for _ in 0..k {
        let p = hi * beta;
        let l = lo * beta + hi.mul_add(beta, -p);
        let s = p + l;
        lo = l - (s - p);
        hi = s;
    }
    let p = hi * x;
    p + (hi.mul_add(x, -p) + lo * x)
}

pub struct DecayReport {
    /// Against the scalar loop `m <- beta * m`, `k` times.
    pub worst_m_rel: f64,
    pub worst_v_rel: f64,
    /// Against the exactly rounded closed form `beta^k * m0`.
    pub worst_closed_rel: f64,
    pub min_drift: f64,
}

fn loop_decay(beta: f64, k: u32, x: f64) -> f64 {
    let mut y = x;
    for _ in 0..k {
        y *= beta;
    }
    y
}

/// Synchronous Adam with a warm state and `k` zero-gradient steps.
pub fn zero_gradient_decay(seed: u64, k: u32) -> DecayReport {
    let mut rng = stream(seed, Stream::Test);
    let n = TRACE_ROWS;
    let mut set = random_set(&mut rng, n);
    let mut state = MomentState::new(n);
    let cfg = trace_config(OptimizerMode::CoupledAdam);
    for _ in 0..20 {
        let mut g = random_grads(&mut rng, n);
        for attr in Attr::ALL {
            for x in g.get_mut(attr) {
                if *x == 0.0 {
                    *x = 1e-3;
                }
            }
        }
        adam_step_sync(&mut state, &mut set, &g, &cfg).unwrap();
    }
    let (m0, v0, p0) = (state.m.clone(), state.v.clone(), set.params.clone());
    let zero = AttrArrays::zeros(n);
    for _ in 0..k {
        adam_step_sync(&mut state, &mut set, &zero, &cfg).unwrap();
    }
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    let mut r = DecayReport { worst_m_rel: 0.0, worst_v_rel: 0.0, worst_closed_rel: 0.0, min_drift: f64::INFINITY };
    for attr in Attr::ALL {
        for i in 0..m0.get(attr).len() {
            let (m, v) = (state.m.get(attr)[i], state.v.get(attr)[i]);
            r.worst_m_rel = r.worst_m_rel.max(rel(m, loop_decay(cfg.beta1, k, m0.get(attr)[i])));
            r.worst_v_rel = r.worst_v_rel.max(rel(v, loop_decay(cfg.beta2, k, v0.get(attr)[i])));
            r.worst_closed_rel = r
                .worst_closed_rel
                .max(rel(m, exact_decay(cfg.beta1, k, m0.get(attr)[i])))
                .max(rel(v, exact_decay(cfg.beta2, k, v0.get(attr)[i])));
            r.min_drift = r.min_drift.min((set.params.get(attr)[i] - p0.get(attr)[i]).abs());
        }
    }
    r
}

pub struct RsrReport {
    pub scaled_exact: bool,
    pub worst_ratio_dev: f64,
    pub zero_equals_reset: bool,
}

pub fn rsr_contract(seed: u64) -> RsrReport {
    let mut rng = stream(seed, Stream::Test);
    let n = 12;
    let mut set = random_set(&mut rng, n);
    let mut state = MomentState::new(n);
    let cfg = trace_config(OptimizerMode::SparseAdam);
    for _ in 0..30 {
        let g = random_grads(&mut rng, n);
        sparse_adam_step(&mut state, &mut set, &g, &VisibilityMask::all(n), &cfg).unwrap();
    }
    let idx: Vec<usize> = (0..n).filter(|i| i % 3 != 1).collect();
    let (a1, a2) = (rng.random_range(0.01..1.0), rng.random_range(0.01..1.0));
    let mut scaled = state.clone();
    rsr_apply(&mut scaled, &idx, a1, a2).unwrap();
    let mut exact = true;
    for attr in Attr::ALL {
        let d = attr.dim();
        for k in 0..n * d {
            let hit = idx.contains(&(k / d));
            let (fm, fv) = if hit { (a1, a2) } else { (1.0, 1.0) };
            exact &= scaled.m.get(attr)[k] == fm * state.m.get(attr)[k];
            exact &= scaled.v.get(attr)[k] == fv * state.v.get(attr)[k];
        }
        exact &= scaled.steps(attr) == state.steps(attr);
    }
    let a = rng.random_range(0.01..1.0);
    let mut sq = state.clone();
    rsr_apply(&mut sq, &idx, a, a * a).unwrap();
    let mut worst: f64 = 0.0;
    for attr in Attr::ALL {
        for (k, (&m, &v)) in state.m.get(attr).iter().zip(state.v.get(attr)).enumerate() {
            if v > 0.0 {
                let after = sq.m.get(attr)[k] / sq.v.get(attr)[k].sqrt();
                worst = worst.max((after - m / v.sqrt()).abs());
            }
        }
    }
    let mut zeroed = state.clone();
    rsr_apply(&mut zeroed, &idx, 0.0, 0.0).unwrap();
    let mut reset = state.clone();
    reset.reset_rows(&idx);
    let zero_equals_reset = zeroed.m == reset.m && zeroed.v == reset.v;
    RsrReport { scaled_exact: exact, worst_ratio_dev: worst, zero_equals_reset }
}

pub struct DarReport {
    pub cases: usize,
    pub term_out_of_range: usize,
    pub moments_touched: usize,
    pub opacity_not_decreased: usize,
}

/// Random states: the DAR term stays in `[0, C_t]`, and with zero photometric
/// gradient the decoupled moments stay zero while opacity strictly falls.
pub fn dar_properties(seed: u64, cases: usize) -> DarReport {
    let mut rng = stream(seed, Stream::Test);
    let mut r = DarReport { cases, term_out_of_range: 0, moments_touched: 0, opacity_not_decreased: 0 };
    for _ in 0..cases {
        let lambda = 10f64.powf(rng.random_range(-8.0..1.0));
        let clip = rng.random_range(0.1..20.0);
        let g = if rng.random_bool(0.5) { rng.random_range(0.0..0.25) } else { rng.random_range(0.0..1e3) };
        let n = rounded_pixel_count(rng.random_range(1..100_000), rng.random_bool(0.5));
        let sv = if rng.random_bool(0.2) { 0.0 } else { 10f64.powf(rng.random_range(-12.0..0.0)) };
        let e = dar_term(lambda, g, n, sv, 1e-8, clip);
        if !(0.0..=clip).contains(&e) {
            r.term_out_of_range += 1;
        }

        let rows = rng.random_range(1..4);
        let mut set = random_set(&mut rng, rows);
        for x in &mut set.params.opacity {
            *x = rng.random_range(-15.0..15.0);
        }
        let mut state = MomentState::new(rows);
        let mut cfg = trace_config(OptimizerMode::AdamwGs);
        cfg.lambda_opacity = rng.random_range(1e-4..1.0);
        cfg.clip_opacity = clip;
        let before = set.params.opacity.clone();
        let steps = rng.random_range(1..4);
        for _ in 0..steps {
            dar_step(
                &mut state,
                &mut set,
                &AttrArrays::zeros(rows),
                &VisibilityMask::all(rows),
                &cfg,
                rng.random_range(1..10_000),
                RegActivity::BOTH,
            )
            .unwrap();
        }
        let touched = Attr::ALL
            .iter()
            .any(|&a| state.m.get(a).iter().chain(state.v.get(a)).any(|&x| x != 0.0));
        if touched {
            r.moments_touched += 1;
        }
        if set.params.opacity.iter().zip(&before).any(|(a, b)| a >= b) {
            r.opacity_not_decreased += 1;
        }
    }
    r
}

// ---------------------------------------------------------------------------
// Renderer finite differences.

pub struct FdReport {
    pub compared: usize,
    pub excluded: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub largest_partial: f64,
}

fn same_structure(a: &BlendRecord, b: &BlendRecord) -> bool {
    a.offsets == b.offsets
        && a.entries.iter().zip(&b.entries).all(|(x, y)| x.primitive == y.primitive)
}

fn fd_scene(rng: &mut impl Rng) -> PrimitiveSet {
    let n = rng.random_range(1..=10);
    let mut depths: Vec<f64> = (0..n).map(|k| 1.0 + k as f64).collect();
    for k in (1..n).rev() {
        depths.swap(k, rng.random_range(0..=k));
    }
    let prims: Vec<RawPrimitive> = (0..n)
        .map(|k| RawPrimitive {
            position: [rng.random_range(2.0..14.0), rng.random_range(2.0..14.0)],
            log_scale: [rng.random_range(0.0..1.4), rng.random_range(0.0..1.4)],
            rotation: rng.random_range(0.0..std::f64::consts::PI),
            opacity_logit: rng.random_range(-2.0..1.5),
            color: [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)],
            depth: depths[k],
        })
        .collect();
    PrimitiveSet::from_raw(&prims)
}

/// Analytic partials against central differences on random scenes with a
/// random linear loss over the rendered pixels. Partials whose perturbation
/// changes the blend structure sit on a support or cutoff boundary, where the
/// forward map is not differentiable; they are counted and skipped.
pub fn renderer_fd(seed: u64, scenes: usize) -> FdReport {
    let mut rng = stream(seed, Stream::Test);
    let vp = Viewpoint::crop(0, 0, 16, 16);
    let mut rep = FdReport {
        compared: 0,
        excluded: 0,
        failures: Vec::new(),
        worst_rel: 0.0,
        worst_abs: 0.0,
        largest_partial: 0.0,
    };
    let h = 1e-5;
    for s in 0..scenes {
        let set = fd_scene(&mut rng);
        let out = render_forward(&set, &vp).unwrap();
        let mut w = out.image.clone();
        for x in &mut w.data {
            *x = rng.random_range(-1.0..1.0);
        }
        let loss = |img: &gsopt::image::Image| img.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>();
        let grads = render_backward(&out.record, &set, &vp, &w).unwrap();
        for attr in Attr::ALL {
            for k in 0..set.params.get(attr).len() {
                let eval = |delta: f64| {
                    let mut p = set.clone();
                    p.params.get_mut(attr)[k] += delta;
                    let o = render_forward(&p, &vp).unwrap();
                    (loss(&o.image), o.record)
                };
                let (lp, rp) = eval(h);
                let (lm, rm) = eval(-h);
                if !same_structure(&rp, &out.record) || !same_structure(&rm, &out.record) {
                    rep.excluded += 1;
                    continue;
                }
                rep.compared += 1;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.get(attr)[k];
                let abs = (fd - an).abs();
                let rel = abs / fd.abs().max(an.abs());
                rep.worst_abs = rep.worst_abs.max(abs);
                rep.largest_partial = rep.largest_partial.max(an.abs());
                if abs > 1e-8 {
                    rep.worst_rel = rep.worst_rel.max(rel);
                }
                if abs > 1e-8 && rel >= 1e-4 {
                    rep.failures.push(format!("scene {s} {} [{k}]: fd {fd:e} analytic {an:e}", attr.name()));
                }
            }
        }
    }
    rep
}

// ---------------------------------------------------------------------------
// Desk-scale experiments.

pub fn arm_of(preset_name: &str, arm: &str, seed: u64) -> Arm {
    preset(preset_name, seed)
        .unwrap()
        .into_iter()
        .find(|a| a.name == arm)
        .unwrap_or_else(|| panic!("{preset_name} has no arm {arm}"))
}

pub fn baseline(mut a: Arm) -> Arm {
    a.baseline = true;
    a
}

pub fn run(arms: Vec<Arm>) -> Vec<ArmRun> {
    run_arms(arms).unwrap()
}

pub fn final_of(runs: &[ArmRun], name: &str) -> gsopt::harness::metrics::MetricsRecord {
    runs.iter().find(|r| r.arm.name == name).unwrap().result.metrics.last().unwrap().clone()
}

/// Mean relocations per relocation window for one arm.
pub fn relocations_per_window(run: &ArmRun) -> f64 {
    let cfg: &ExperimentConfig = &run.arm.config;
    let windows = (cfg.stage.warmup_end + 1..=cfg.stage.densify_end)
        .filter(|i| i % cfg.stage.densify_interval == 0)
        .count();
    run.result.event_total("relocate") as f64 / windows.max(1) as f64
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Writes a preset run to `dir` and returns `(metrics.csv, events.jsonl)` bytes
/// of every arm, in arm order.
pub fn preset_bytes(name: &str, seed: u64, dir: &std::path::Path) -> Vec<(Vec<u8>, Vec<u8>)> {
    let arms = preset(name, seed).unwrap();
    let scene = gen_scene(&arms[0].config.scene, seed).unwrap();
    let runs = run_arms(arms).unwrap();
    write_outputs(dir, name, seed, &scene, &runs).unwrap();
    runs.iter()
        .map(|r| {
            let d = dir.join(&r.arm.name);
            (std::fs::read(d.join("metrics.csv")).unwrap(), std::fs::read(d.join("events.jsonl")).unwrap())
        })
        .collect()
}

pub fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}
