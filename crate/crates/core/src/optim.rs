//! SGD and AdamW with two parameter groups (experts, router).
//!
//! One [`Optimizer::step`] runs, in this order:
//! 1. Riemannian preconditioning of expert gradients (raw gradients, before
//!    any AdamW moment update),
//! 2. global-norm clipping of the router gradient at the router group's cap,
//! 3. per-group learning rate from the schedule,
//! 4. the SGD or AdamW update.
//!
//! Experts with no gradient this step are skipped entirely, including their
//! AdamW moments and step counters.

use std::fmt;
use std::str::FromStr;

use crate::error::{mismatch, Error, Result};
use crate::grad::GradBundle;
use crate::layer::MoeLoraLayer;
use crate::precond::{precondition_bundle, PrecondConfig};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    LinearDecay,
    Constant,
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::LinearDecay => "linear",
            Schedule::Constant => "constant",
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Schedule::LinearDecay),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::Config(format!("unknown schedule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupId {
    Experts,
    Router,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamGroup {
    pub id: GroupId,
    pub lr0: f64,
    pub schedule: Schedule,
    pub max_grad_norm: Option<f64>,
}

impl ParamGroup {
    pub fn experts_default() -> Self {
        Self {
            id: GroupId::Experts,
            lr0: 3e-5,
            schedule: Schedule::LinearDecay,
            max_grad_norm: None,
        }
    }

    pub fn router_default() -> Self {
        Self {
            id: GroupId::Router,
            lr0: 3e-8,
            schedule: Schedule::LinearDecay,
            max_grad_norm: Some(1.0),
        }
    }

    /// Learning rate at 0-based `step` of a `max_steps` run, after
    /// `warmup` linear warm-up steps.
    pub fn lr_at(&self, step: usize, max_steps: usize, warmup: usize) -> Result<f64> {
        if step < warmup {
            return Ok(self.lr0 * (step + 1) as f64 / warmup as f64);
        }
        match self.schedule {
            Schedule::Constant => Ok(self.lr0),
            Schedule::LinearDecay => linear_lr(self.lr0, step, max_steps),
        }
    }
}

/// `lr0 · (1 − step / max_steps)`.
pub fn linear_lr(lr0: f64, step: usize, max_steps: usize) -> Result<f64> {
    if step > max_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule length {max_steps}"
        )));
    }
    if max_steps == 0 {
        return Ok(lr0);
    }
    Ok(lr0 * (1.0 - step as f64 / max_steps as f64))
}

/// Scales all matrices by `cap / norm` when their joint Frobenius norm
/// exceeds `cap`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut Matrix], cap: f64) -> Result<f64> {
    if cap.is_nan() || cap <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "clip cap must be > 0, got {cap}"
        )));
    }
    let norm = grads.iter().map(|g| g.sum_of_squares()).sum::<f64>().sqrt();
    if norm > cap {
        let c = cap / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(c);
        }
    }
    Ok(norm)
}

/// `θ ← θ − lr·g`.
pub fn sgd_step(param: &mut Matrix, grad: &Matrix, lr: f64) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NonFinite("sgd_step"));
    }
    if param.shape() != grad.shape() {
        return Err(mismatch(
            "sgd_step",
            format!("{:?} vs {:?}", param.shape(), grad.shape()),
        ));
    }
    param.add_scaled(-lr, grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Matrix,
    pub v: Matrix,
    pub t: u64,
}

impl AdamWState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
        }
    }
}

/// Bias-corrected Adam update followed by decoupled decay `θ ← θ·(1 − lr·λ)`.
pub fn adamw_step(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NonFinite("adamw_step"));
    }
    if param.shape() != grad.shape() || state.m.shape() != grad.shape() {
        return Err(mismatch(
            "adamw_step",
            "parameter, gradient and state shapes differ",
        ));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let g = grad.data();
    let m = state.m.data_mut();
    for (mi, gi) in m.iter_mut().zip(g) {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
    }
    let v = state.v.data_mut();
    for (vi, gi) in v.iter_mut().zip(g) {
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
    }
    let (m, v) = (state.m.data(), state.v.data());
    for ((p, mi), vi) in param.data_mut().iter_mut().zip(m).zip(v) {
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    if cfg.weight_decay != 0.0 {
        let factor = 1.0 - lr * cfg.weight_decay;
        for p in param.data_mut() {
            *p *= factor;
        }
    }
    if !param.is_finite() {
        return Err(Error::NonFinite("adamw_step"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    AdamW(AdamWConfig),
}

impl OptimizerKind {
    pub fn family(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdamW(_) => "adamw",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.family())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ExpertState {
    a: AdamWState,
    b: AdamWState,
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub lr_experts: f64,
    pub lr_router: f64,
    /// Raw expert gradient norm (before preconditioning).
    pub grad_norm_experts: f64,
    /// Router gradient norm before clipping.
    pub grad_norm_router: f64,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub experts: ParamGroup,
    pub router: ParamGroup,
    pub precond: PrecondConfig,
    pub max_steps: usize,
    pub warmup: usize,
    expert_states: Vec<ExpertState>,
    router_state: AdamWState,
}

impl Optimizer {
    pub fn new(
        layer: &MoeLoraLayer,
        kind: OptimizerKind,
        experts: ParamGroup,
        router: ParamGroup,
        precond: PrecondConfig,
        max_steps: usize,
    ) -> Self {
        let sh = layer.shape();
        let expert_states = (0..sh.num_experts)
            .map(|_| ExpertState {
                a: AdamWState::new(sh.rank, sh.n),
                b: AdamWState::new(sh.m, sh.rank),
            })
            .collect();
        Self {
            kind,
            experts,
            router,
            precond,
            max_steps,
            warmup: 0,
            expert_states,
            router_state: AdamWState::new(sh.num_experts, sh.n),
        }
    }

    /// Step counter of expert `i`'s AdamW state for `A`.
    pub fn expert_steps(&self, i: usize) -> u64 {
        self.expert_states[i].a.t
    }

    pub fn router_state(&self) -> &AdamWState {
        &self.router_state
    }

    /// Applies one update at 0-based `step`. The frozen base is never touched.
    pub fn step(
        &mut self,
        layer: &mut MoeLoraLayer,
        bundle: &GradBundle,
        step: usize,
    ) -> Result<StepReport> {
        if bundle.experts.len() != layer.experts.len() {
            return Err(mismatch("optimizer_step", "bundle/layer expert count"));
        }
        let grad_norm_experts = bundle.expert_norm();
        let mut pre = precondition_bundle(layer, bundle, &self.precond)?;
        let grad_norm_router = match self.router.max_grad_norm {
            Some(cap) => clip_grad_norm(&mut [&mut pre.router], cap)?,
            None => pre.router_norm(),
        };
        let lr_experts = self.experts.lr_at(step, self.max_steps, self.warmup)?;
        let lr_router = self.router.lr_at(step, self.max_steps, self.warmup)?;

        for (i, slot) in pre.experts.iter().enumerate() {
            let Some(g) = slot else { continue };
            let expert = &mut layer.experts[i];
            match &self.kind {
                OptimizerKind::Sgd => {
                    sgd_step(&mut expert.a, &g.a, lr_experts)?;
                    sgd_step(&mut expert.b, &g.b, lr_experts)?;
                }
                OptimizerKind::AdamW(cfg) => {
                    let st = &mut self.expert_states[i];
                    adamw_step(&mut expert.a, &g.a, &mut st.a, cfg, lr_experts)?;
                    adamw_step(&mut expert.b, &g.b, &mut st.b, cfg, lr_experts)?;
                }
            }
        }
        match &self.kind {
            OptimizerKind::Sgd => sgd_step(&mut layer.router, &pre.router, lr_router)?,
            OptimizerKind::AdamW(cfg) => adamw_step(
                &mut layer.router,
                &pre.router,
                &mut self.router_state,
                cfg,
                lr_router,
            )?,
        }
        Ok(StepReport {
            lr_experts,
            lr_router,
            grad_norm_experts,
            grad_norm_router,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::matrix_backward;
    use crate::layer::{ForwardMode, GateOutput, InitScales, LayerShape};
    use crate::tensor::RngStream;

    #[test]
    fn linear_lr_cases() {
        assert_eq!(linear_lr(3e-5, 0, 2000).unwrap(), 3e-5);
        assert_eq!(linear_lr(3e-5, 2000, 2000).unwrap(), 0.0);
        assert!((linear_lr(3e-5, 500, 2000).unwrap() - 2.25e-5).abs() < 1e-20);
        assert!(linear_lr(1.0, 3, 2).is_err());
    }

    #[test]
    fn warmup_ramps_then_decays() {
        let g = ParamGroup {
            lr0: 1.0,
            ..ParamGroup::experts_default()
        };
        assert_eq!(g.lr_at(0, 10, 2).unwrap(), 0.5);
        assert_eq!(g.lr_at(1, 10, 2).unwrap(), 1.0);
        assert_eq!(g.lr_at(5, 10, 2).unwrap(), 0.5);
    }

    #[test]
    fn clip_cases() {
        let mut a = Matrix::from_rows(&[[0.3, 0.4]]);
        let n = clip_grad_norm(&mut [&mut a], 1.0).unwrap();
        assert_eq!(n, 0.5);
        assert_eq!(a, Matrix::from_rows(&[[0.3, 0.4]]));

        let mut a = Matrix::from_rows(&[[3.0, 4.0]]);
        clip_grad_norm(&mut [&mut a], 1.0).unwrap();
        assert!((a[(0, 0)] - 0.6).abs() < 1e-15 && (a[(0, 1)] - 0.8).abs() < 1e-15);

        let mut z = Matrix::zeros(2, 2);
        assert_eq!(clip_grad_norm(&mut [&mut z], 1.0).unwrap(), 0.0);
        assert_eq!(z, Matrix::zeros(2, 2));
        assert!(clip_grad_norm(&mut [&mut z], 0.0).is_err());
    }

    #[test]
    fn sgd_cases() {
        let mut p = Matrix::from_rows(&[[1.0]]);
        sgd_step(&mut p, &Matrix::from_rows(&[[2.0]]), 0.0).unwrap();
        assert_eq!(p[(0, 0)], 1.0);
        sgd_step(&mut p, &Matrix::from_rows(&[[0.0]]), 0.1).unwrap();
        assert_eq!(p[(0, 0)], 1.0);
        sgd_step(&mut p, &Matrix::from_rows(&[[2.0]]), 0.1).unwrap();
        assert!((p[(0, 0)] - 0.8).abs() < 1e-15);
        let mut bad = Matrix::zeros(1, 1);
        bad.data_mut()[0] = f64::NAN;
        assert!(sgd_step(&mut p, &bad, 0.1).is_err());
    }

    /// Scalar AdamW written straight from the update rule.
    fn scalar_adamw(
        theta: f64,
        grads: &[f64],
        lr: f64,
        b1: f64,
        b2: f64,
        eps: f64,
        wd: f64,
    ) -> f64 {
        let (mut th, mut m, mut v) = (theta, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            th -= lr * mh / (vh.sqrt() + eps);
            th -= lr * wd * th;
        }
        th
    }

    #[test]
    fn adamw_matches_scalar_reference() {
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let grads = [0.5, -1.5, 2.0, 0.25, 3.0];
        let mut p = Matrix::from_rows(&[[0.7]]);
        let mut st = AdamWState::new(1, 1);
        for g in grads {
            adamw_step(&mut p, &Matrix::from_rows(&[[g]]), &mut st, &cfg, 1e-2).unwrap();
        }
        let want = scalar_adamw(0.7, &grads, 1e-2, 0.9, 0.999, 1e-6, 0.01);
        assert!((p[(0, 0)] - want).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_is_near_sign() {
        let mut p = Matrix::from_rows(&[[0.0]]);
        let mut st = AdamWState::new(1, 1);
        adamw_step(
            &mut p,
            &Matrix::from_rows(&[[4.0]]),
            &mut st,
            &AdamWConfig::default(),
            0.1,
        )
        .unwrap();
        // m̂ = c, v̂ = c², update = lr·c/(|c| + ε)
        assert!((p[(0, 0)] + 0.1 * 4.0 / (4.0 + 1e-6)).abs() < 1e-16);
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_fixed_point() {
        let mut p = Matrix::from_rows(&[[1.5, -2.0]]);
        let mut st = AdamWState::new(1, 2);
        for _ in 0..5 {
            adamw_step(
                &mut p,
                &Matrix::zeros(1, 2),
                &mut st,
                &AdamWConfig::default(),
                0.1,
            )
            .unwrap();
        }
        assert_eq!(p, Matrix::from_rows(&[[1.5, -2.0]]));
    }

    #[test]
    fn adamw_decay_only_contracts_exactly() {
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let lr = 0.1;
        let mut p = Matrix::from_rows(&[[2.0]]);
        let mut st = AdamWState::new(1, 1);
        let mut expect = 2.0;
        for _ in 0..4 {
            adamw_step(&mut p, &Matrix::zeros(1, 1), &mut st, &cfg, lr).unwrap();
            expect *= 1.0 - lr * 0.01;
            assert_eq!(p[(0, 0)], expect);
        }
    }

    fn small_layer() -> MoeLoraLayer {
        let shape = LayerShape::new(5, 4, 3, 2, 2, 2.0).unwrap();
        let scales = InitScales {
            expert_sigma: 0.5,
            router_sigma: 1.0,
            base_sigma: Some(1.0),
        };
        MoeLoraLayer::init(shape, &RngStream::new(31), scales).unwrap()
    }

    #[test]
    fn step_skips_unselected_and_keeps_base() {
        let mut layer = small_layer();
        let before = layer.clone();
        let gate = GateOutput::fixed(&[0.4, 0.6, 0.0]).unwrap();
        let gx = RngStream::new(32).gaussian_matrix(5, 4, 1.0);
        let bundle = matrix_backward(&layer, &gate, &gx, ForwardMode::Standard, None).unwrap();
        let mut opt = Optimizer::new(
            &layer,
            OptimizerKind::AdamW(AdamWConfig::default()),
            ParamGroup {
                lr0: 1e-2,
                ..ParamGroup::experts_default()
            },
            ParamGroup::router_default(),
            PrecondConfig::riemannian(),
            10,
        );
        opt.step(&mut layer, &bundle, 0).unwrap();
        assert_eq!(layer.base(), before.base());
        assert_eq!(layer.experts[2], before.experts[2]);
        assert_ne!(layer.experts[0], before.experts[0]);
        assert_eq!(opt.expert_steps(2), 0);
        assert_eq!(opt.expert_steps(0), 1);
    }

    #[test]
    fn router_clip_preserves_direction() {
        let mut layer = small_layer();
        let before = layer.router.clone();
        let mut bundle = GradBundle::zeros(&layer);
        let g = RngStream::new(33).gaussian_matrix(3, 4, 1.0);
        let g = g.scale(5.0 / g.frobenius_norm());
        bundle.router = g.clone();
        let mut opt = Optimizer::new(
            &layer,
            OptimizerKind::Sgd,
            ParamGroup::experts_default(),
            ParamGroup {
                lr0: 0.1,
                schedule: Schedule::Constant,
                ..ParamGroup::router_default()
            },
            PrecondConfig::default(),
            10,
        );
        let rep = opt.step(&mut layer, &bundle, 0).unwrap();
        assert!((rep.grad_norm_router - 5.0).abs() < 1e-12);
        let delta = layer.router.sub(&before).unwrap();
        // delta = −0.1 · g/5
        assert!(delta.sub(&g.scale(-0.1 / 5.0)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn step_is_deterministic() {
        let layer0 = small_layer();
        let gate = GateOutput::fixed(&[0.4, 0.6, 0.0]).unwrap();
        let gx = RngStream::new(34).gaussian_matrix(5, 4, 1.0);
        let bundle = matrix_backward(&layer0, &gate, &gx, ForwardMode::SqrtDetach, None).unwrap();
        let run = || {
            let mut l = layer0.clone();
            let mut opt = Optimizer::new(
                &l,
                OptimizerKind::Sgd,
                ParamGroup {
                    lr0: 1e-2,
                    ..ParamGroup::experts_default()
                },
                ParamGroup::router_default(),
                PrecondConfig::riemannian(),
                10,
            );
            opt.step(&mut l, &bundle, 3).unwrap();
            l
        };
        assert_eq!(run(), run());
    }
}
