//! Independent numerical oracles for the projection identities and the
//! backward pass.
//!
//! For fixed gates and the matrix loss `½‖X − T‖²` (so `∇_X L = X − T`),
//! one preconditioned SGD step moves the effective weight, to first order in
//! the learning rate `η`, by
//!
//! ```text
//! conventional: −η s² Σᵢ gᵢ² (P_col(Bᵢ)·∇ + ∇·P_row(Aᵢ))
//! rescaled:     −η s² Σᵢ gᵢ  (P_col(Bᵢ)·∇ + ∇·P_row(Aᵢ))
//! ```
//!
//! The predictions here are built from explicit projection matrices and
//! share no code with the preconditioner beyond the matrix substrate.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grad::{backward, loss_and_grad, matrix_backward, LossKind, Target};
use crate::layer::{
    ForwardCache, ForwardMode, GateOutput, InitScales, LayerShape, LoraExpert, MoeLoraLayer,
    Routing,
};
use crate::optim::{Optimizer, OptimizerKind, ParamGroup, Schedule};
use crate::precond::{precondition_bundle, PrecondConfig};
use crate::tensor::{Matrix, RngStream};

/// `‖X − T‖_F · s²` used by the identity fixtures.
pub const FIXTURE_GRAD_NORM: f64 = 0.1;
/// Largest learning rate of the two-η scaling test.
pub const ETA_HI: f64 = 1e-4;
/// Smallest learning rate of the two-η scaling test.
pub const ETA_LO: f64 = 1e-5;
/// Required `residual(ETA_HI) / residual(ETA_LO)`.
pub const MIN_SCALING_RATIO: f64 = 90.0;
/// Relative part of the first-order bound at `ETA_LO`.
pub const FIRST_ORDER_REL_TOL: f64 = 1e-8;
/// Absolute part of the first-order bound at `ETA_LO`.
pub const FIRST_ORDER_ABS_TOL: f64 = 1e-12;
/// Gradient check tolerance.
pub const GRADCHECK_TOL: f64 = 1e-6;
/// Entries below this magnitude are compared absolutely at `GRADCHECK_TOL · GRADCHECK_FLOOR`.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    /// `B(BᵀB)⁻¹Bᵀ`, m×m.
    pub col_b: Matrix,
    /// `Aᵀ(AAᵀ)⁻¹A`, n×n.
    pub row_a: Matrix,
}

/// Exact (undamped) projections onto `col(B)` and `row(A)`.
pub fn projection_matrices(expert: &LoraExpert) -> Result<ProjectionPair> {
    let b = &expert.b;
    let a = &expert.a;
    let btb_inv = b.transpose().mat_mul(b)?.small_inverse(0.0)?;
    let aat_inv = a.mat_mul(&a.transpose())?.small_inverse(0.0)?;
    Ok(ProjectionPair {
        col_b: b.mat_mul(&btb_inv)?.mat_mul(&b.transpose())?,
        row_a: a.transpose().mat_mul(&aat_inv)?.mat_mul(a)?,
    })
}

/// Largest violation among symmetry, idempotence and range conditions.
pub fn projection_violation(expert: &LoraExpert, p: &ProjectionPair) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for m in [&p.col_b, &p.row_a] {
        worst = worst.max(m.sub(&m.transpose())?.max_abs());
        worst = worst.max(m.mat_mul(m)?.sub(m)?.max_abs());
    }
    worst = worst.max(p.col_b.mat_mul(&expert.b)?.sub(&expert.b)?.max_abs());
    worst = worst.max(expert.a.mat_mul(&p.row_a)?.sub(&expert.a)?.max_abs());
    Ok(worst)
}

fn predicted_with_power(
    layer: &MoeLoraLayer,
    gates: &[f64],
    grad_x: &Matrix,
    eta: f64,
    power: i32,
) -> Result<Matrix> {
    let s = layer.scaling();
    let mut out = Matrix::zeros(grad_x.rows(), grad_x.cols());
    for (expert, &g) in layer.experts.iter().zip(gates) {
        if g == 0.0 {
            continue;
        }
        let p = projection_matrices(expert)?;
        let mut term = p.col_b.mat_mul(grad_x)?;
        term.add_scaled(1.0, &grad_x.mat_mul(&p.row_a)?)?;
        out.add_scaled(-eta * s * s * g.powi(power), &term)?;
    }
    Ok(out)
}

/// Squared-gate ensemble `−η s² Σ gᵢ²(P_B∇ + ∇P_A)`.
pub fn predicted_update_conventional(
    layer: &MoeLoraLayer,
    gates: &[f64],
    grad_x: &Matrix,
    eta: f64,
) -> Result<Matrix> {
    predicted_with_power(layer, gates, grad_x, eta, 2)
}

/// Linear-gate ensemble `−η s² Σ gᵢ(P_B∇ + ∇P_A)`.
pub fn predicted_update_rescaled(
    layer: &MoeLoraLayer,
    gates: &[f64],
    grad_x: &Matrix,
    eta: f64,
) -> Result<Matrix> {
    predicted_with_power(layer, gates, grad_x, eta, 1)
}

/// Un-preconditioned first-order update `−η s² Σ gᵢ²(BᵢBᵢᵀ∇ + ∇AᵢᵀAᵢ)`.
pub fn predicted_update_plain(
    layer: &MoeLoraLayer,
    gates: &[f64],
    grad_x: &Matrix,
    eta: f64,
) -> Result<Matrix> {
    let s = layer.scaling();
    let mut out = Matrix::zeros(grad_x.rows(), grad_x.cols());
    for (e, &g) in layer.experts.iter().zip(gates) {
        if g == 0.0 {
            continue;
        }
        let mut term = e.b.mat_mul(&e.b.transpose())?.mat_mul(grad_x)?;
        term.add_scaled(1.0, &grad_x.mat_mul(&e.a.transpose())?.mat_mul(&e.a)?)?;
        out.add_scaled(-eta * s * s * g * g, &term)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    /// `effective_weight(after) − effective_weight(before)`.
    pub observed: Matrix,
    pub predicted: Matrix,
    /// `‖observed − predicted‖_F`.
    pub first_order_residual: f64,
    pub eta: f64,
    /// Change of the trainable path `Σ cᵢ s BᵢAᵢ`, with `cᵢ` the gradient-path
    /// gate coefficient (`gᵢ`, or `√gᵢ` under sqrt-detach).
    pub trainable_path: Matrix,
    /// `‖trainable_path − predicted‖_F`.
    pub trainable_path_residual: f64,
}

/// Which first-order law a configuration is paired with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    Plain,
    Conventional,
    Rescaled,
}

impl Prediction {
    pub fn for_config(mode: ForwardMode, precond: &PrecondConfig) -> Self {
        if !precond.enabled {
            Prediction::Plain
        } else if mode == ForwardMode::SqrtDetach || precond.ideal_gate_rescale {
            Prediction::Rescaled
        } else {
            Prediction::Conventional
        }
    }

    pub fn evaluate(
        self,
        layer: &MoeLoraLayer,
        gates: &[f64],
        grad_x: &Matrix,
        eta: f64,
    ) -> Result<Matrix> {
        match self {
            Prediction::Plain => predicted_update_plain(layer, gates, grad_x, eta),
            Prediction::Conventional => predicted_update_conventional(layer, gates, grad_x, eta),
            Prediction::Rescaled => predicted_update_rescaled(layer, gates, grad_x, eta),
        }
    }
}

/// Fixed gates plus a matrix target: the constant-gate setting of the
/// first-order identities.
#[derive(Debug, Clone)]
pub struct IdentityFixture {
    pub layer: MoeLoraLayer,
    pub gates: Vec<f64>,
    pub target: Matrix,
}

impl IdentityFixture {
    /// Well-conditioned experts (`B ~ N(0, 1/m)`, `A ~ N(0, 1/n)`), gates from
    /// a top-k softmax of standard-normal logits, and a target at distance
    /// [`FIXTURE_GRAD_NORM`]` / s²` from the current effective weight.
    pub fn random(shape: LayerShape, seed: u64) -> Result<Self> {
        let rng = RngStream::new(seed);
        let mut layer = MoeLoraLayer::init(
            shape,
            &rng,
            InitScales {
                expert_sigma: 1.0,
                router_sigma: 1.0,
                base_sigma: Some(1.0),
            },
        )?;
        let mut er = rng.derive(100);
        for e in &mut layer.experts {
            e.b = er.gaussian_matrix(shape.m, shape.rank, 1.0 / (shape.m as f64).sqrt());
            e.a = er.gaussian_matrix(shape.rank, shape.n, 1.0 / (shape.n as f64).sqrt());
        }
        let logits = rng.derive(101).gaussian_vec(shape.num_experts, 1.0);
        let gates = GateOutput::from_logits(logits, shape.top_k)?.gates;
        Self::with_gates(layer, gates, seed)
    }

    /// `k` identical experts in slots `0..k` with uniform gates `1/k`.
    pub fn balanced(shape: LayerShape, k: usize, seed: u64) -> Result<Self> {
        let mut fx = Self::random(shape, seed)?;
        if k == 0 || k > shape.num_experts {
            return Err(Error::InvalidArgument(format!("k = {k} out of range")));
        }
        let shared = fx.layer.experts[0].clone();
        for e in fx.layer.experts.iter_mut().take(k) {
            *e = shared.clone();
        }
        let mut gates = vec![0.0; shape.num_experts];
        gates.iter_mut().take(k).for_each(|g| *g = 1.0 / k as f64);
        Self::with_gates(fx.layer, gates, seed)
    }

    pub fn with_gates(layer: MoeLoraLayer, gates: Vec<f64>, seed: u64) -> Result<Self> {
        let sh = *layer.shape();
        let x = layer.effective_weight(&gates)?;
        let dir = RngStream::new(seed)
            .derive(102)
            .gaussian_matrix(sh.m, sh.n, 1.0);
        let s2 = layer.scaling() * layer.scaling();
        let dir = dir.scale(FIXTURE_GRAD_NORM / (s2 * dir.frobenius_norm()));
        let target = x.sub(&dir)?;
        Ok(Self {
            layer,
            gates,
            target,
        })
    }

    pub fn grad_x(&self) -> Result<Matrix> {
        let x = self.layer.effective_weight(&self.gates)?;
        Ok(loss_and_grad(LossKind::MseMatrix, &x, Target::Dense(&self.target))?.1)
    }
}

/// One forward/backward/precondition/SGD step at fixed gates, compared with
/// the first-order law that matches `mode` and `precond`.
pub fn measure_one_step(
    fixture: &IdentityFixture,
    mode: ForwardMode,
    precond: &PrecondConfig,
    eta: f64,
) -> Result<UpdateReport> {
    let before = &fixture.layer;
    let gates = &fixture.gates;
    let gate = GateOutput::fixed(gates)?;
    let grad_x = fixture.grad_x()?;
    let bundle = matrix_backward(before, &gate, &grad_x, mode, None)?;

    let mut after = before.clone();
    let mut opt = Optimizer::new(
        before,
        OptimizerKind::Sgd,
        ParamGroup {
            lr0: eta,
            schedule: Schedule::Constant,
            ..ParamGroup::experts_default()
        },
        ParamGroup {
            lr0: 0.0,
            schedule: Schedule::Constant,
            ..ParamGroup::router_default()
        },
        *precond,
        1,
    );
    opt.step(&mut after, &bundle, 0)?;

    // W is bit-identical on both sides and cancels exactly.
    let observed = before.adapter_delta(&after, gates)?;
    let path_coefs: Vec<f64> = gates.iter().map(|&g| mode.path_coefficient(g)).collect();
    let trainable_path = before.adapter_delta(&after, &path_coefs)?;
    let predicted = Prediction::for_config(mode, precond).evaluate(before, gates, &grad_x, eta)?;
    Ok(UpdateReport {
        first_order_residual: observed.sub(&predicted)?.frobenius_norm(),
        trainable_path_residual: trainable_path.sub(&predicted)?.frobenius_norm(),
        observed,
        predicted,
        eta,
        trainable_path,
    })
}

/// Residuals at two learning rates and the first-order criteria on them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingCheck {
    pub residual_hi: f64,
    pub residual_lo: f64,
    pub predicted_norm_lo: f64,
}

impl ScalingCheck {
    pub fn ratio(&self) -> f64 {
        if self.residual_lo == 0.0 {
            f64::INFINITY
        } else {
            self.residual_hi / self.residual_lo
        }
    }

    pub fn bound_lo(&self) -> f64 {
        FIRST_ORDER_REL_TOL * self.predicted_norm_lo + FIRST_ORDER_ABS_TOL
    }

    pub fn second_order_ok(&self) -> bool {
        self.ratio() >= MIN_SCALING_RATIO
    }

    pub fn first_order_ok(&self) -> bool {
        self.residual_lo <= self.bound_lo()
    }

    pub fn pass(&self) -> bool {
        self.second_order_ok() && self.first_order_ok()
    }
}

/// Which displacement a scaling check measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measured {
    EffectiveWeight,
    TrainablePath,
}

pub fn scaling_check(
    fixture: &IdentityFixture,
    mode: ForwardMode,
    precond: &PrecondConfig,
    measured: Measured,
) -> Result<ScalingCheck> {
    let hi = measure_one_step(fixture, mode, precond, ETA_HI)?;
    let lo = measure_one_step(fixture, mode, precond, ETA_LO)?;
    let pick = |r: &UpdateReport| match measured {
        Measured::EffectiveWeight => r.first_order_residual,
        Measured::TrainablePath => r.trainable_path_residual,
    };
    Ok(ScalingCheck {
        residual_hi: pick(&hi),
        residual_lo: pick(&lo),
        predicted_norm_lo: lo.predicted.frobenius_norm(),
    })
}

/// `‖ΔX_rescaled‖ / ‖ΔX_conventional‖` for a balanced fixture (see
/// [`IdentityFixture::balanced`]); first-order value is `k`.
pub fn balanced_gate_ratio(fixture: &IdentityFixture, eta: f64) -> Result<f64> {
    let conventional =
        measure_one_step(fixture, ForwardMode::Standard, &PrecondConfig::exact(), eta)?;
    let rescaled = measure_one_step(
        fixture,
        ForwardMode::Standard,
        &PrecondConfig::exact().with_ideal_rescale(true),
        eta,
    )?;
    Ok(rescaled.observed.frobenius_norm() / conventional.observed.frobenius_norm())
}

/// First-order effective-weight update direction `Σ gᵢ s (Bᵢ·pAᵢ + pBᵢ·Aᵢ)`
/// (without the `−η`), from preconditioned matrix-mode gradients.
pub fn first_order_direction(
    layer: &MoeLoraLayer,
    gates: &[f64],
    grad_x: &Matrix,
    mode: ForwardMode,
    precond: &PrecondConfig,
) -> Result<Matrix> {
    let gate = GateOutput::fixed(gates)?;
    let bundle = matrix_backward(layer, &gate, grad_x, mode, None)?;
    let pre = precondition_bundle(layer, &bundle, precond)?;
    let s = layer.scaling();
    let mut out = Matrix::zeros(grad_x.rows(), grad_x.cols());
    for (i, slot) in pre.experts.iter().enumerate() {
        let Some(p) = slot else { continue };
        let e = &layer.experts[i];
        let mut term = e.b.mat_mul(&p.a)?;
        term.add_scaled(1.0, &p.b.mat_mul(&e.a)?)?;
        out.add_scaled(gates[i] * s, &term)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// finite differences

#[derive(Debug, Clone)]
pub enum GradTarget {
    Dense(Matrix),
    Labels(Vec<usize>),
}

impl GradTarget {
    fn as_target(&self) -> Target<'_> {
        match self {
            GradTarget::Dense(m) => Target::Dense(m),
            GradTarget::Labels(l) => Target::Labels(l),
        }
    }
}

/// A layer, an input batch and a loss.
#[derive(Debug, Clone)]
pub struct GradcheckSetup {
    pub layer: MoeLoraLayer,
    pub input: Matrix,
    pub loss: LossKind,
    pub target: GradTarget,
    /// Matrix-mode routing probe; `None` routes per token.
    pub probe: Option<Vec<f64>>,
}

impl GradcheckSetup {
    /// Random O(1)-scaled layer. `MseMatrix` uses the matrix-mode objective
    /// (`X_in = I`, one probe-routed gate vector); the other losses route
    /// each of `tokens` random columns.
    pub fn random(shape: LayerShape, loss: LossKind, tokens: usize, seed: u64) -> Result<Self> {
        let rng = RngStream::new(seed);
        let layer = MoeLoraLayer::init(
            shape,
            &rng,
            InitScales {
                expert_sigma: 0.5,
                router_sigma: 1.0,
                base_sigma: Some(0.5),
            },
        )?;
        let mut dr = rng.derive(200);
        let (input, probe) = match loss {
            LossKind::MseMatrix => (
                Matrix::identity(shape.n),
                Some(dr.gaussian_vec(shape.n, 1.0)),
            ),
            _ => (dr.gaussian_matrix(shape.n, tokens, 1.0), None),
        };
        let target = match loss {
            LossKind::SoftmaxXent => {
                GradTarget::Labels((0..input.cols()).map(|_| dr.below(shape.m)).collect())
            }
            _ => GradTarget::Dense(dr.gaussian_matrix(shape.m, input.cols(), 1.0)),
        };
        Ok(Self {
            layer,
            input,
            loss,
            target,
            probe,
        })
    }

    fn routing(&self) -> Routing<'_> {
        match &self.probe {
            Some(p) => Routing::Probe(p),
            None => Routing::PerToken,
        }
    }

    fn loss_of(&self, prediction: &Matrix) -> Result<f64> {
        Ok(loss_and_grad(self.loss, prediction, self.target.as_target())?.0)
    }

    /// Replaces the target with the layer's own output, so the loss is zero.
    pub fn at_zero_loss(mut self) -> Result<Self> {
        let (y, _) = self.layer.forward_standard(&self.input, self.routing())?;
        self.target = GradTarget::Dense(y);
        if self.loss == LossKind::SoftmaxXent {
            return Err(Error::InvalidArgument(
                "cross-entropy has no zero-loss point".into(),
            ));
        }
        Ok(self)
    }
}

/// Forward value of the objective whose gradient the sqrt-detach backward
/// computes: with `ĝ`, `ê` frozen at `frozen`, each selected expert
/// contributes `√ĝ·e(θ) + (g(θ) − √ĝ)·ê`.
fn detached_forward(
    layer: &MoeLoraLayer,
    setup: &GradcheckSetup,
    frozen: &ForwardCache,
) -> Result<Matrix> {
    let (_, cache) = layer.forward_standard(&setup.input, setup.routing())?;
    let mut y = layer.base().mat_mul(&setup.input)?;
    for (t, (tok, old)) in cache.tokens.iter().zip(&frozen.tokens).enumerate() {
        let mut col = y.column(t);
        for (slot, &i) in tok.gate.selected.iter().enumerate() {
            let g = tok.gate.gates[i];
            let e = &tok.expert_out[slot];
            match old.gate.selected.iter().position(|&j| j == i) {
                Some(old_slot) => {
                    let g_hat = old.gate.gates[i];
                    let sq = g_hat.sqrt();
                    let e_hat = &old.expert_out[old_slot];
                    for ((c, ev), eh) in col.iter_mut().zip(e).zip(e_hat) {
                        *c += sq * ev + (g - sq) * eh;
                    }
                }
                None => {
                    for (c, ev) in col.iter_mut().zip(e) {
                        *c += g * ev;
                    }
                }
            }
        }
        y.set_column(t, &col);
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    A,
    B,
    Router,
}

impl ParamClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamClass::A => "A",
            ParamClass::B => "B",
            ParamClass::Router => "router",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassResult {
    pub class: ParamClass,
    pub checked: usize,
    pub skipped_flips: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub mode: ForwardMode,
    pub loss: LossKind,
    pub classes: Vec<ClassResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.classes.iter().fold(0.0, |m, c| m.max(c.max_rel_error))
    }

    pub fn pass(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

fn param_mut(layer: &mut MoeLoraLayer, class: ParamClass, expert: usize) -> &mut Matrix {
    match class {
        ParamClass::A => &mut layer.experts[expert].a,
        ParamClass::B => &mut layer.experts[expert].b,
        ParamClass::Router => &mut layer.router,
    }
}

/// Compares the analytic gradient in `mode` with central differences at
/// `samples` random coordinates per parameter class. Expert coordinates are
/// drawn from experts that at least one token selected. Router coordinates
/// whose ±h perturbation changes any top-k selection are skipped and counted.
pub fn gradcheck_suite(
    setup: &GradcheckSetup,
    mode: ForwardMode,
    samples: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let layer = &setup.layer;
    let (y, cache) = layer.forward_in_mode(&setup.input, setup.routing(), mode)?;
    let (_, dy) = loss_and_grad(setup.loss, &y, setup.target.as_target())?;
    let bundle = backward(layer, &cache, &dy)?;
    let base_sel = cache.selections();

    let active: Vec<usize> = (0..layer.experts.len())
        .filter(|&i| bundle.experts[i].is_some())
        .collect();
    let mut rng = RngStream::new(seed).derive(300);
    let sh = *layer.shape();

    let objective = |l: &MoeLoraLayer| -> Result<(f64, Vec<Vec<usize>>)> {
        match mode {
            ForwardMode::Standard => {
                let (y, c) = l.forward_standard(&setup.input, setup.routing())?;
                Ok((setup.loss_of(&y)?, c.selections()))
            }
            ForwardMode::SqrtDetach => {
                let y = detached_forward(l, setup, &cache)?;
                let (_, c) = l.forward_standard(&setup.input, setup.routing())?;
                Ok((setup.loss_of(&y)?, c.selections()))
            }
        }
    };

    let mut classes = Vec::new();
    for class in [ParamClass::A, ParamClass::B, ParamClass::Router] {
        let mut result = ClassResult {
            class,
            checked: 0,
            skipped_flips: 0,
            max_rel_error: 0.0,
        };
        for _ in 0..samples {
            let (expert, rows, cols) = match class {
                ParamClass::A | ParamClass::B if active.is_empty() => break,
                ParamClass::A => (active[rng.below(active.len())], sh.rank, sh.n),
                ParamClass::B => (active[rng.below(active.len())], sh.m, sh.rank),
                ParamClass::Router => (0, sh.num_experts, sh.n),
            };
            let (i, j) = (rng.below(rows), rng.below(cols));
            let analytic = match class {
                ParamClass::A => bundle.experts[expert].as_ref().map_or(0.0, |g| g.a[(i, j)]),
                ParamClass::B => bundle.experts[expert].as_ref().map_or(0.0, |g| g.b[(i, j)]),
                ParamClass::Router => bundle.router[(i, j)],
            };
            let theta = param_mut(&mut layer.clone(), class, expert)[(i, j)];
            let h = 1e-5 * theta.abs().max(1.0);
            let mut plus = layer.clone();
            param_mut(&mut plus, class, expert)[(i, j)] = theta + h;
            let mut minus = layer.clone();
            param_mut(&mut minus, class, expert)[(i, j)] = theta - h;
            let (lp, sp) = objective(&plus)?;
            let (lm, sm) = objective(&minus)?;
            if sp != base_sel || sm != base_sel {
                result.skipped_flips += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            result.max_rel_error = result.max_rel_error.max(relative_error(analytic, numeric));
            result.checked += 1;
        }
        classes.push(result);
    }
    Ok(GradcheckReport {
        mode,
        loss: setup.loss,
        classes,
        tolerance: GRADCHECK_TOL,
    })
}

// ---------------------------------------------------------------------------
// reports

/// One line of a verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub suite: String,
    pub config_id: String,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    /// A row that passes when `residual <= tolerance`.
    pub fn at_most(
        suite: &str,
        config_id: impl Into<String>,
        residual: f64,
        tolerance: f64,
    ) -> Self {
        Self {
            suite: suite.to_string(),
            config_id: config_id.into(),
            residual,
            tolerance,
            pass: residual <= tolerance,
        }
    }
}

pub fn format_report(rows: &[CheckRow]) -> String {
    let mut out = String::new();
    let width = rows.iter().map(|r| r.suite.len()).max().unwrap_or(5).max(5);
    let cfg_width = rows
        .iter()
        .map(|r| r.config_id.len())
        .max()
        .unwrap_or(6)
        .max(6);
    let _ = writeln!(
        out,
        "{:<width$}  {:<cfg_width$}  {:>12}  {:>12}  result",
        "suite", "config", "residual", "tolerance"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:<cfg_width$}  {:>12.4e}  {:>12.4e}  {}",
            r.suite,
            r.config_id,
            r.residual,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    let _ = writeln!(out, "{} checks, {} failed", rows.len(), failed);
    out
}

pub fn write_report_csv(path: &Path, rows: &[CheckRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "suite,config_id,residual,tolerance,pass")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{:.16e},{:.16e},{}",
            r.suite, r.config_id, r.residual, r.tolerance, r.pass
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Shapes covered by the identity suites: N ∈ {1,2,5,20}, k ∈ {1,2,10} with
/// k ≤ N, r ∈ {1,2,4}, on 16×16 weights with `α = r`.
pub fn identity_grid() -> Vec<LayerShape> {
    let mut out = Vec::new();
    for n_exp in [1, 2, 5, 20] {
        for k in [1, 2, 10] {
            if k > n_exp {
                continue;
            }
            for r in [1, 2, 4] {
                out.push(LayerShape {
                    m: 16,
                    n: 16,
                    num_experts: n_exp,
                    top_k: k,
                    rank: r,
                    alpha: r as f64,
                });
            }
        }
    }
    out
}

fn shape_id(sh: &LayerShape, seed: u64) -> String {
    format!(
        "N{}-k{}-r{}-a{}-s{}",
        sh.num_experts, sh.top_k, sh.rank, sh.alpha, seed
    )
}

fn push_scaling_rows(rows: &mut Vec<CheckRow>, suite: &str, id: &str, chk: &ScalingCheck) {
    rows.push(CheckRow::at_most(
        &format!("{suite}/second-order"),
        id,
        1.0 / chk.ratio(),
        1.0 / MIN_SCALING_RATIO,
    ));
    rows.push(CheckRow::at_most(
        &format!("{suite}/first-order"),
        id,
        chk.residual_lo,
        chk.bound_lo(),
    ));
}

/// Squared-gate law for standard mode with Riemannian preconditioning.
pub fn conventional_suite(shapes: &[LayerShape], seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for sh in shapes {
        let fx = IdentityFixture::random(*sh, seed)?;
        let chk = scaling_check(
            &fx,
            ForwardMode::Standard,
            &PrecondConfig::exact(),
            Measured::EffectiveWeight,
        )?;
        push_scaling_rows(&mut rows, "squared-gate", &shape_id(sh, seed), &chk);
    }
    Ok(rows)
}

/// Linear-gate law via the ideal rescale and via sqrt-detach, plus the
/// cross-route comparison. The sqrt-detach route is reported both on the
/// effective weight and on its trainable path.
pub fn rescaled_suite(shapes: &[LayerShape], seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let ideal = PrecondConfig::exact().with_ideal_rescale(true);
    for sh in shapes {
        let fx = IdentityFixture::random(*sh, seed)?;
        let id = shape_id(sh, seed);
        let chk = scaling_check(
            &fx,
            ForwardMode::Standard,
            &ideal,
            Measured::EffectiveWeight,
        )?;
        push_scaling_rows(&mut rows, "linear-gate/ideal-rescale", &id, &chk);
        let chk = scaling_check(
            &fx,
            ForwardMode::SqrtDetach,
            &PrecondConfig::exact(),
            Measured::EffectiveWeight,
        )?;
        push_scaling_rows(&mut rows, "linear-gate/sqrt-detach", &id, &chk);
        let chk = scaling_check(
            &fx,
            ForwardMode::SqrtDetach,
            &PrecondConfig::exact(),
            Measured::TrainablePath,
        )?;
        push_scaling_rows(
            &mut rows,
            "linear-gate/sqrt-detach-trainable-path",
            &id,
            &chk,
        );

        let a = measure_one_step(&fx, ForwardMode::Standard, &ideal, ETA_LO)?;
        let b = measure_one_step(
            &fx,
            ForwardMode::SqrtDetach,
            &PrecondConfig::exact(),
            ETA_LO,
        )?;
        let scale = a.observed.frobenius_norm().max(f64::MIN_POSITIVE);
        rows.push(CheckRow::at_most(
            "linear-gate/cross-route",
            id,
            a.observed.sub(&b.observed)?.frobenius_norm() / scale,
            1e-9,
        ));
    }
    Ok(rows)
}

/// `balanced_gate_ratio = k` for each k.
pub fn balanced_suite(ks: &[usize], eta: f64, tol: f64, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for &k in ks {
        let shape = LayerShape::new(16, 16, k.max(2), k, 4, 4.0)?;
        let fx = IdentityFixture::balanced(shape, k, seed)?;
        let ratio = balanced_gate_ratio(&fx, eta)?;
        rows.push(CheckRow::at_most(
            "balanced-ratio",
            format!("k{k}-ratio{ratio:.9}"),
            (ratio - k as f64).abs() / k as f64,
            tol,
        ));
    }
    Ok(rows)
}

/// Projection invariants over `count` random experts.
pub fn projection_suite(count: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = RngStream::new(seed).derive(400);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let r = 1 + rng.below(4);
        let expert = LoraExpert {
            b: rng.gaussian_matrix(12, r, 1.0),
            a: rng.gaussian_matrix(r, 10, 1.0),
        };
        let p = projection_matrices(&expert)?;
        worst = worst.max(projection_violation(&expert, &p)?);
    }
    Ok(vec![CheckRow::at_most(
        "projection-invariants",
        format!("{count}-experts"),
        worst,
        1e-9,
    )])
}

/// Everything `verify-projection` runs.
pub fn verify_projection_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let grid = identity_grid();
    let mut rows = projection_suite(50, seed)?;
    rows.extend(conventional_suite(&grid, seed)?);
    rows.extend(rescaled_suite(&grid, seed)?);
    // s ≠ 1: the s² factor enters both sides
    let sh = LayerShape::new(16, 16, 5, 2, 4, 16.0)?;
    rows.extend(conventional_suite(&[sh], seed)?);
    rows.extend(balanced_suite(&[1, 2, 5, 10], 1e-6, 1e-3, seed)?);
    Ok(rows)
}

/// Gradient checks for both forward modes over the given losses.
pub fn gradcheck_rows(
    losses: &[LossKind],
    samples: usize,
    seed: u64,
) -> Result<(Vec<CheckRow>, Vec<GradcheckReport>)> {
    let shape = LayerShape::new(6, 5, 5, 2, 2, 4.0)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &loss in losses {
        let setup = GradcheckSetup::random(shape, loss, 7, seed)?;
        for mode in [ForwardMode::Standard, ForwardMode::SqrtDetach] {
            let rep = gradcheck_suite(&setup, mode, samples, seed)?;
            for c in &rep.classes {
                rows.push(CheckRow::at_most(
                    &format!("gradcheck/{}/{}", mode, loss),
                    format!(
                        "{}-n{}-skipped{}",
                        c.class.as_str(),
                        c.checked,
                        c.skipped_flips
                    ),
                    c.max_rel_error,
                    rep.tolerance,
                ));
            }
            reports.push(rep);
        }
    }
    Ok((rows, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(n_exp: usize, k: usize, r: usize) -> LayerShape {
        LayerShape::new(8, 7, n_exp, k, r, r as f64).unwrap()
    }

    #[test]
    fn coordinate_projection() {
        let mut b = Matrix::zeros(5, 2);
        b[(0, 0)] = 1.0;
        b[(1, 1)] = 1.0;
        let expert = LoraExpert {
            b,
            a: RngStream::new(1).gaussian_matrix(2, 4, 1.0),
        };
        let p = projection_matrices(&expert).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j && i < 2 { 1.0 } else { 0.0 };
                assert!((p.col_b[(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn full_rank_projection_is_identity() {
        let mut rng = RngStream::new(2);
        let expert = LoraExpert {
            b: rng.gaussian_matrix(3, 3, 1.0),
            a: rng.gaussian_matrix(3, 5, 1.0),
        };
        let p = projection_matrices(&expert).unwrap();
        assert!(p.col_b.sub(&Matrix::identity(3)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn random_projection_idempotent() {
        let rows = projection_suite(10, 3).unwrap();
        assert!(rows[0].pass, "{:?}", rows[0]);
    }

    #[test]
    fn singular_factor_is_error() {
        let expert = LoraExpert {
            b: Matrix::zeros(4, 2),
            a: RngStream::new(4).gaussian_matrix(2, 3, 1.0),
        };
        assert!(projection_matrices(&expert).is_err());
    }

    #[test]
    fn single_expert_predictions_coincide() {
        let fx = IdentityFixture::random(shape(1, 1, 2), 5).unwrap();
        let gx = fx.grad_x().unwrap();
        let c = predicted_update_conventional(&fx.layer, &fx.gates, &gx, 0.1).unwrap();
        let r = predicted_update_rescaled(&fx.layer, &fx.gates, &gx, 0.1).unwrap();
        assert_eq!(c, r);
        let p = projection_matrices(&fx.layer.experts[0]).unwrap();
        let mut want = p.col_b.mat_mul(&gx).unwrap();
        want.add_scaled(1.0, &gx.mat_mul(&p.row_a).unwrap())
            .unwrap();
        assert!(c.sub(&want.scale(-0.1)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn identical_half_gates() {
        let fx = IdentityFixture::balanced(shape(2, 2, 2), 2, 6).unwrap();
        let gx = fx.grad_x().unwrap();
        let single = IdentityFixture::with_gates(fx.layer.clone(), vec![1.0, 0.0], 6).unwrap();
        let one = predicted_update_conventional(&single.layer, &single.gates, &gx, 1.0).unwrap();
        let conv = predicted_update_conventional(&fx.layer, &fx.gates, &gx, 1.0).unwrap();
        let resc = predicted_update_rescaled(&fx.layer, &fx.gates, &gx, 1.0).unwrap();
        assert!(conv.sub(&one.scale(0.5)).unwrap().max_abs() < 1e-14);
        assert!(resc.sub(&conv.scale(2.0)).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn predictions_match_per_expert_loop() {
        let fx = IdentityFixture::random(shape(3, 3, 2), 7).unwrap();
        let gx = fx.grad_x().unwrap();
        let mut conv = Matrix::zeros(8, 7);
        let mut resc = Matrix::zeros(8, 7);
        for (e, g) in fx.layer.experts.iter().zip(&fx.gates) {
            // P_B ∇ + ∇ P_A written with explicit inverses
            let bt = e.b.transpose();
            let pb =
                e.b.mat_mul(&bt.mat_mul(&e.b).unwrap().small_inverse(0.0).unwrap())
                    .unwrap();
            let left = pb.mat_mul(&bt.mat_mul(&gx).unwrap()).unwrap();
            let at = e.a.transpose();
            let right = gx
                .mat_mul(&at)
                .unwrap()
                .mat_mul(&e.a.mat_mul(&at).unwrap().small_inverse(0.0).unwrap())
                .unwrap()
                .mat_mul(&e.a)
                .unwrap();
            let term = left.add(&right).unwrap();
            conv.add_scaled(-0.5 * g * g, &term).unwrap();
            resc.add_scaled(-0.5 * g, &term).unwrap();
        }
        let c = predicted_update_conventional(&fx.layer, &fx.gates, &gx, 0.5).unwrap();
        let r = predicted_update_rescaled(&fx.layer, &fx.gates, &gx, 0.5).unwrap();
        assert!(c.sub(&conv).unwrap().max_abs() < 1e-13);
        assert!(r.sub(&resc).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn zero_eta_zero_update() {
        let fx = IdentityFixture::random(shape(3, 2, 2), 8).unwrap();
        let rep =
            measure_one_step(&fx, ForwardMode::Standard, &PrecondConfig::exact(), 0.0).unwrap();
        assert_eq!(rep.observed.max_abs(), 0.0);
        assert_eq!(rep.first_order_residual, 0.0);
    }

    #[test]
    fn conventional_law_scales_quadratically() {
        let fx =
            IdentityFixture::random(LayerShape::new(16, 16, 5, 2, 2, 2.0).unwrap(), 9).unwrap();
        let chk = scaling_check(
            &fx,
            ForwardMode::Standard,
            &PrecondConfig::exact(),
            Measured::EffectiveWeight,
        )
        .unwrap();
        assert!(chk.pass(), "{chk:?}");
    }

    #[test]
    fn unpreconditioned_law() {
        let fx =
            IdentityFixture::random(LayerShape::new(16, 16, 5, 2, 2, 2.0).unwrap(), 10).unwrap();
        let chk = scaling_check(
            &fx,
            ForwardMode::Standard,
            &PrecondConfig::default(),
            Measured::EffectiveWeight,
        )
        .unwrap();
        assert!(chk.second_order_ok(), "{chk:?}");
        assert!(chk.residual_lo <= 1e-6 * chk.predicted_norm_lo, "{chk:?}");
    }

    #[test]
    fn sqrt_detach_effective_weight_follows_three_halves_power() {
        // Forward value keeps gᵢ while parameter gradients carry √gᵢ, so the
        // effective weight moves by −η s² Σ gᵢ^{3/2}(P_B∇ + ∇P_A).
        let fx =
            IdentityFixture::random(LayerShape::new(16, 16, 5, 3, 2, 2.0).unwrap(), 11).unwrap();
        let eta = 1e-6;
        let rep =
            measure_one_step(&fx, ForwardMode::SqrtDetach, &PrecondConfig::exact(), eta).unwrap();
        let gx = fx.grad_x().unwrap();
        let mut want = Matrix::zeros(16, 16);
        for (e, &g) in fx.layer.experts.iter().zip(&fx.gates) {
            if g == 0.0 {
                continue;
            }
            let p = projection_matrices(e).unwrap();
            let term = p
                .col_b
                .mat_mul(&gx)
                .unwrap()
                .add(&gx.mat_mul(&p.row_a).unwrap())
                .unwrap();
            want.add_scaled(-eta * g.powf(1.5), &term).unwrap();
        }
        let rel = rep.observed.sub(&want).unwrap().frobenius_norm() / want.frobenius_norm();
        assert!(rel < 1e-6, "{rel}");
        assert!(rep.trainable_path_residual <= 1e-6 * rep.predicted.frobenius_norm());
    }

    #[test]
    fn scaling_factor_enters_both_sides() {
        let sh = LayerShape::new(16, 16, 5, 2, 4, 16.0).unwrap();
        let rows = conventional_suite(&[sh], 12).unwrap();
        assert!(rows.iter().all(|r| r.pass), "{rows:?}");
    }

    #[test]
    fn balanced_ratio_small_k() {
        let rows = balanced_suite(&[1, 2, 10], 1e-6, 1e-4, 13).unwrap();
        assert!(rows.iter().all(|r| r.pass), "{rows:?}");
    }

    #[test]
    fn gradcheck_token_modes() {
        let shape = LayerShape::new(6, 5, 5, 2, 2, 4.0).unwrap();
        for loss in [
            LossKind::MseToken,
            LossKind::SoftmaxXent,
            LossKind::MseMatrix,
        ] {
            let setup = GradcheckSetup::random(shape, loss, 5, 14).unwrap();
            for mode in [ForwardMode::Standard, ForwardMode::SqrtDetach] {
                let rep = gradcheck_suite(&setup, mode, 40, 14).unwrap();
                assert!(rep.pass(), "{rep:?}");
                assert!(rep.classes.iter().all(|c| c.checked > 0), "{rep:?}");
            }
        }
    }

    #[test]
    fn gradcheck_zero_loss_point() {
        let shape = LayerShape::new(6, 5, 4, 2, 2, 2.0).unwrap();
        let setup = GradcheckSetup::random(shape, LossKind::MseToken, 4, 15)
            .unwrap()
            .at_zero_loss()
            .unwrap();
        let (y, cache) = setup
            .layer
            .forward_standard(&setup.input, Routing::PerToken)
            .unwrap();
        let (l, dy) = loss_and_grad(LossKind::MseToken, &y, setup.target.as_target()).unwrap();
        assert_eq!(l, 0.0);
        let b = backward(&setup.layer, &cache, &dy).unwrap();
        assert_eq!(b.expert_norm(), 0.0);
        let rep = gradcheck_suite(&setup, ForwardMode::Standard, 30, 15).unwrap();
        assert!(rep.pass(), "{rep:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Sanity check on the checker: sqrt-detach gradients are not the
        // derivative of the plain objective.
        let shape = LayerShape::new(6, 5, 5, 3, 2, 4.0).unwrap();
        let setup = GradcheckSetup::random(shape, LossKind::MseToken, 5, 16).unwrap();
        let (y, cache) = setup
            .layer
            .forward_sqrt_detach(&setup.input, Routing::PerToken)
            .unwrap();
        let (_, dy) = loss_and_grad(LossKind::MseToken, &y, setup.target.as_target()).unwrap();
        let sqrt_grads = backward(&setup.layer, &cache, &dy).unwrap();
        let std = gradcheck_suite(&setup, ForwardMode::Standard, 20, 16).unwrap();
        assert!(std.pass());
        let (_, cache) = setup
            .layer
            .forward_standard(&setup.input, Routing::PerToken)
            .unwrap();
        let std_grads = backward(&setup.layer, &cache, &dy).unwrap();
        assert_ne!(sqrt_grads.experts, std_grads.experts);
    }

    #[test]
    fn report_formats() {
        let rows = vec![
            CheckRow::at_most("a", "x", 1e-10, 1e-9),
            CheckRow::at_most("b", "y", 1.0, 1e-9),
        ];
        let text = format_report(&rows);
        assert!(text.contains("PASS") && text.contains("FAIL"));
        assert!(text.contains("2 checks, 1 failed"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_report_csv(&p, &rows).unwrap();
        let s = std::fs::read_to_string(p).unwrap();
        assert!(s.starts_with("suite,config_id,residual,tolerance,pass\n"));
        assert_eq!(s.lines().count(), 3);
    }
}
