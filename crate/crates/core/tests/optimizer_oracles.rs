mod common;

use common::*;
use gsopt::optimizer::{dar_term, rsr_apply, sparse_adam_step, MomentState, OptimizerMode};
use gsopt::primitives::Attr;
use gsopt::renderer::VisibilityMask;
use gsopt::rng::{stream, Stream};
use proptest::prelude::*;

#[test]
fn reference_adam_matches_closed_form_first_step() {
    let h = Hyper { lr: 0.1, b1: 0.9, b2: 0.999, eps: 0.0 };
    let mut p = Scalar { theta: 1.0, ..Default::default() };
    ref_step(&mut p, -3.0, h, Penalty::None);
    // First bias-corrected step is lr * sign(g).
    assert!((p.theta - 1.1).abs() < 1e-15);
}

#[test]
fn sync_adam_matches_reference() {
    for seed in 0..3 {
        let d = trace_deviation(TraceKind::Sync, seed, 1000);
        assert!(d < 1e-12, "seed {seed}: {d:e}");
    }
}

#[test]
fn sparse_adam_matches_reference() {
    for seed in 0..3 {
        let d = trace_deviation(TraceKind::Sparse, seed, 1000);
        assert!(d < 1e-12, "seed {seed}: {d:e}");
    }
}

#[test]
fn dar_matches_reference() {
    for seed in 0..3 {
        let d = trace_deviation(TraceKind::Dar, seed, 1000);
        assert!(d < 1e-12, "seed {seed}: {d:e}");
    }
}

#[test]
fn adamw_const_matches_reference() {
    for kind in [TraceKind::Const, TraceKind::ConstClip] {
        let d = trace_deviation(kind, 4, 1000);
        assert!(d < 1e-12, "{kind:?}: {d:e}");
    }
}

#[test]
fn sparse_under_full_visibility_is_adam() {
    let d = full_visibility_deviation(11, 1000);
    assert!(d < 1e-12, "{d:e}");
}

#[test]
fn zero_gradient_rescales_moments() {
    let r = zero_gradient_decay(5, 500);
    assert!(r.worst_m_rel < 1e-15 && r.worst_v_rel < 1e-15, "{:e} {:e}", r.worst_m_rel, r.worst_v_rel);
    // k roundings of relative size at most 2^-53 separate the iterate from the
    // exactly rounded closed form.
    assert!(r.worst_closed_rel <= 500.0 * f64::EPSILON / 2.0, "{:e}", r.worst_closed_rel);
    assert!(r.min_drift > 0.0);
}

#[test]
fn rsr_contract_holds() {
    for seed in 0..5 {
        let r = rsr_contract(seed);
        assert!(r.scaled_exact);
        assert!(r.worst_ratio_dev < 1e-12, "{:e}", r.worst_ratio_dev);
        assert!(r.zero_equals_reset);
    }
}

#[test]
fn dar_decoupling_over_random_states() {
    let r = dar_properties(17, 10_000);
    assert_eq!(r.term_out_of_range, 0);
    assert_eq!(r.moments_touched, 0);
    assert_eq!(r.opacity_not_decreased, 0);
}

#[test]
fn invisible_rows_stay_bitwise_frozen() {
    let mut rng = stream(2, Stream::Test);
    let n = 8;
    let mut set = random_set(&mut rng, n);
    let mut state = MomentState::new(n);
    let cfg = trace_config(OptimizerMode::SparseAdam);
    let vis = VisibilityMask((0..n).map(|i| i % 2 == 0).collect());
    let (p0, s0) = (set.clone(), state.clone());
    for _ in 0..50 {
        let g = random_grads(&mut rng, n);
        sparse_adam_step(&mut state, &mut set, &g, &vis, &cfg).unwrap();
    }
    for attr in Attr::ALL {
        let d = attr.dim();
        for k in (0..n * d).filter(|k| (k / d) % 2 == 1) {
            assert_eq!(set.params.get(attr)[k].to_bits(), p0.params.get(attr)[k].to_bits());
            assert_eq!(state.m.get(attr)[k], s0.m.get(attr)[k]);
        }
        for i in (0..n).filter(|i| i % 2 == 1) {
            assert_eq!(state.steps(attr)[i], 0);
        }
    }
}

proptest! {
    #[test]
    fn dar_term_is_clipped(
        lambda in 0.0f64..10.0,
        g in 0.0f64..1e6,
        n in 1.0f64..1e6,
        sv in 0.0f64..1.0,
        clip in 1e-3f64..100.0,
    ) {
        let e = dar_term(lambda, g, n, sv, 1e-8, clip);
        prop_assert!((0.0..=clip).contains(&e));
    }

    #[test]
    fn rsr_scales_exactly(a1 in 0.0f64..=1.0, a2 in 0.0f64..=1.0, seed in 0u64..1000) {
        let mut rng = stream(seed, Stream::Test);
        let n = 4;
        let mut set = random_set(&mut rng, n);
        let mut state = MomentState::new(n);
        let cfg = trace_config(OptimizerMode::SparseAdam);
        sparse_adam_step(&mut state, &mut set, &random_grads(&mut rng, n), &VisibilityMask::all(n), &cfg).unwrap();
        let before = state.clone();
        rsr_apply(&mut state, &[0, 2], a1, a2).unwrap();
        for attr in Attr::ALL {
            let d = attr.dim();
            for k in 0..n * d {
                let (fm, fv) = if (k / d) % 2 == 0 { (a1, a2) } else { (1.0, 1.0) };
                prop_assert_eq!(state.m.get(attr)[k], fm * before.m.get(attr)[k]);
                prop_assert_eq!(state.v.get(attr)[k], fv * before.v.get(attr)[k]);
            }
        }
    }

    #[test]
    fn short_random_traces_match_reference(seed in 0u64..10_000) {
        for kind in [TraceKind::Sync, TraceKind::Sparse, TraceKind::Dar, TraceKind::ConstClip] {
            prop_assert!(trace_deviation(kind, seed, 40) < 1e-12);
        }
    }
}
