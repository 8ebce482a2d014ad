use moelora::grad::matrix_backward;
use moelora::layer::{GateOutput, InitScales};
use moelora::optim::{
    clip_grad_norm, linear_lr, AdamWConfig, Optimizer, OptimizerKind, ParamGroup, Schedule,
};
use moelora::precond::PrecondConfig;
use moelora::{ForwardMode, LayerShape, Matrix, MoeLoraLayer, RngStream};
use proptest::prelude::*;

proptest! {
    #[test]
    fn linear_lr_is_nonincreasing(lr0 in 1e-8f64..1.0, max in 1usize..5000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (s1, s2) = ((a * max as f64) as usize, (b * max as f64) as usize);
        let (lo, hi) = (s1.min(s2), s1.max(s2));
        let l_lo = linear_lr(lr0, lo, max).unwrap();
        let l_hi = linear_lr(lr0, hi, max).unwrap();
        prop_assert!(l_hi <= l_lo);
        prop_assert_eq!(linear_lr(lr0, 0, max).unwrap(), lr0);
        prop_assert_eq!(linear_lr(lr0, max, max).unwrap(), 0.0);
    }

    #[test]
    fn clipping_caps_norm_and_keeps_direction(v in proptest::collection::vec(-10.0f64..10.0, 1..12), cap in 0.01f64..5.0) {
        let mut g = Matrix::from_vec(1, v.len(), v.clone()).unwrap();
        let before = g.frobenius_norm();
        let reported = clip_grad_norm(&mut [&mut g], cap).unwrap();
        prop_assert_eq!(reported, before);
        prop_assert!(g.frobenius_norm() <= cap * (1.0 + 1e-12) || before <= cap);
        if before <= cap {
            prop_assert_eq!(g.data(), &v[..]);
        } else {
            let s = cap / before;
            for (x, y) in g.data().iter().zip(&v) {
                prop_assert!((x - y * s).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn step_touches_only_selected_experts_and_never_base(seed in 0u64..500, adam in any::<bool>(), precond in any::<bool>()) {
        let shape = LayerShape::new(6, 5, 5, 2, 2, 4.0).unwrap();
        let scales = InitScales { expert_sigma: 0.3, router_sigma: 1.0, base_sigma: None };
        let mut layer = MoeLoraLayer::init(shape, &RngStream::new(seed), scales).unwrap();
        let before = layer.clone();
        let probe = RngStream::new(seed + 1).gaussian_vec(5, 1.0);
        let gate = layer.route_token(&probe).unwrap();
        let gx = RngStream::new(seed + 2).gaussian_matrix(6, 5, 1.0);
        let bundle = matrix_backward(&layer, &gate, &gx, ForwardMode::Standard, Some(&probe)).unwrap();
        let kind = if adam { OptimizerKind::AdamW(AdamWConfig::default()) } else { OptimizerKind::Sgd };
        let pc = if precond { PrecondConfig::riemannian() } else { PrecondConfig::default() };
        let mut opt = Optimizer::new(&layer, kind, ParamGroup::experts_default(), ParamGroup::router_default(), pc, 10);
        opt.step(&mut layer, &bundle, 0).unwrap();
        prop_assert_eq!(layer.base(), before.base());
        for i in 0..5 {
            let selected = gate.selected.contains(&i);
            prop_assert_eq!(layer.experts[i] == before.experts[i], !selected);
            prop_assert_eq!(opt.expert_steps(i), u64::from(selected && adam));
        }
    }
}

#[test]
fn zero_learning_rate_is_identity() {
    let shape = LayerShape::new(4, 4, 3, 2, 2, 4.0).unwrap();
    let mut layer = MoeLoraLayer::init(shape, &RngStream::new(9), InitScales::default()).unwrap();
    let before = layer.clone();
    let g = GateOutput::fixed(&[0.5, 0.5, 0.0]).unwrap();
    let gx = RngStream::new(10).gaussian_matrix(4, 4, 1.0);
    let bundle = matrix_backward(&layer, &g, &gx, ForwardMode::Standard, None).unwrap();
    let zero = |g: ParamGroup| ParamGroup {
        lr0: 0.0,
        schedule: Schedule::Constant,
        ..g
    };
    let mut opt = Optimizer::new(
        &layer,
        OptimizerKind::Sgd,
        zero(ParamGroup::experts_default()),
        zero(ParamGroup::router_default()),
        PrecondConfig::riemannian(),
        1,
    );
    opt.step(&mut layer, &bundle, 0).unwrap();
    assert_eq!(layer, before);
}

#[test]
fn step_beyond_schedule_is_error() {
    assert!(linear_lr(1.0, 11, 10).is_err());
}
