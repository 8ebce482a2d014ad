//! Hand-derived backward passes.
//!
//! Expert gradients for token `t` with gate `gᵢₜ`, upstream `δₜ = dY[:, t]`:
//!
//! ```text
//! ∇B_i += c · s · δₜ (Aᵢxₜ)ᵀ        ∇A_i += c · s · (Bᵢᵀδₜ) xₜᵀ
//! ```
//!
//! with `c = gᵢₜ` in standard mode and `c = √gᵢₜ` in sqrt-detach mode.
//! The router sees `∂L/∂gᵢ = δₜᵀeᵢ` in both modes and backpropagates it
//! through the softmax restricted to the selected set. The top-k mask is
//! treated as constant.

use std::fmt;
use std::str::FromStr;

use crate::error::{mismatch, Error, Result};
use crate::layer::{ForwardCache, ForwardMode, GateOutput, MoeLoraLayer, RouteRecord};
use crate::tensor::{dot, softmax, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGrad {
    /// r×n
    pub a: Matrix,
    /// m×r
    pub b: Matrix,
}

/// Gradients for one step. Experts that no token selected hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub experts: Vec<Option<ExpertGrad>>,
    /// N×n
    pub router: Matrix,
    /// Full-matrix gradient `∇_X L`, matrix-mode only.
    pub grad_x: Option<Matrix>,
    /// The single gate vector of a matrix-mode step.
    pub matrix_gates: Option<Vec<f64>>,
}

impl GradBundle {
    pub fn zeros(layer: &MoeLoraLayer) -> Self {
        let sh = layer.shape();
        Self {
            experts: vec![None; sh.num_experts],
            router: Matrix::zeros(sh.num_experts, sh.n),
            grad_x: None,
            matrix_gates: None,
        }
    }

    pub fn expert_norm(&self) -> f64 {
        self.experts
            .iter()
            .flatten()
            .map(|g| g.a.sum_of_squares() + g.b.sum_of_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn router_norm(&self) -> f64 {
        self.router.frobenius_norm()
    }

    pub fn is_finite(&self) -> bool {
        self.router.is_finite()
            && self
                .experts
                .iter()
                .flatten()
                .all(|g| g.a.is_finite() && g.b.is_finite())
    }

    fn expert_slot(&mut self, i: usize, m: usize, n: usize, r: usize) -> &mut ExpertGrad {
        self.experts[i].get_or_insert_with(|| ExpertGrad {
            a: Matrix::zeros(r, n),
            b: Matrix::zeros(m, r),
        })
    }
}

fn check_tokens(cache: &ForwardCache, dy: &Matrix, m: usize) -> Result<()> {
    if dy.cols() != cache.num_tokens() || dy.rows() != m {
        return Err(mismatch(
            "backward",
            format!(
                "dY is {}x{}, cache has {} tokens of width {m}",
                dy.rows(),
                dy.cols(),
                cache.num_tokens()
            ),
        ));
    }
    Ok(())
}

/// Expert part of the backward pass, accumulated over tokens in column order.
pub fn backward_expert(
    layer: &MoeLoraLayer,
    cache: &ForwardCache,
    dy: &Matrix,
    mode: ForwardMode,
) -> Result<GradBundle> {
    let sh = *layer.shape();
    check_tokens(cache, dy, sh.m)?;
    let s = layer.scaling();
    let mut bundle = GradBundle::zeros(layer);
    for (t, tok) in cache.tokens.iter().enumerate() {
        let delta = dy.column(t);
        let x = cache.input.column(t);
        for (slot, &i) in tok.gate.selected.iter().enumerate() {
            let c = mode.path_coefficient(tok.gate.gates[i]) * s;
            let expert = &layer.experts[i];
            let bt_delta = expert.b.t_mat_vec(&delta)?;
            let g = bundle.expert_slot(i, sh.m, sh.n, sh.rank);
            g.b.add_outer(c, &delta, &tok.low_rank[slot]);
            g.a.add_outer(c, &bt_delta, &x);
        }
    }
    Ok(bundle)
}

/// `dL/dl` for the restricted softmax: `dlⱼ = gⱼ(cⱼ − Σᵢ gᵢcᵢ)` on the
/// selected set, zero elsewhere.
pub fn softmax_backward(gate: &GateOutput, dgate: &[f64]) -> Vec<f64> {
    let mean: f64 = gate
        .selected
        .iter()
        .map(|&i| gate.gates[i] * dgate[i])
        .sum();
    let mut dl = vec![0.0; gate.gates.len()];
    for &j in &gate.selected {
        dl[j] = gate.gates[j] * (dgate[j] - mean);
    }
    dl
}

/// Router gradient. Identical in both modes: the sqrt-detach gate path
/// `(g − √ĝ)·ê` has derivative `ê` in `g`, same as the standard path.
pub fn backward_router(
    layer: &MoeLoraLayer,
    cache: &ForwardCache,
    dy: &Matrix,
    _mode: ForwardMode,
) -> Result<Matrix> {
    let sh = *layer.shape();
    check_tokens(cache, dy, sh.m)?;
    let mut grad = Matrix::zeros(sh.num_experts, sh.n);
    match &cache.route {
        RouteRecord::Fixed => {}
        RouteRecord::PerToken => {
            for (t, tok) in cache.tokens.iter().enumerate() {
                let delta = dy.column(t);
                let dgate = gate_grad(tok, &delta, sh.num_experts);
                let dl = softmax_backward(&tok.gate, &dgate);
                grad.add_outer(1.0, &dl, &cache.input.column(t));
            }
        }
        RouteRecord::Shared(router_input) => {
            let mut dgate = vec![0.0; sh.num_experts];
            for (t, tok) in cache.tokens.iter().enumerate() {
                let delta = dy.column(t);
                for (d, v) in dgate.iter_mut().zip(gate_grad(tok, &delta, sh.num_experts)) {
                    *d += v;
                }
            }
            if let Some(first) = cache.tokens.first() {
                let dl = softmax_backward(&first.gate, &dgate);
                grad.add_outer(1.0, &dl, router_input);
            }
        }
    }
    Ok(grad)
}

fn gate_grad(tok: &crate::layer::TokenCache, delta: &[f64], num_experts: usize) -> Vec<f64> {
    let mut dgate = vec![0.0; num_experts];
    for (slot, &i) in tok.gate.selected.iter().enumerate() {
        dgate[i] = dot(delta, &tok.expert_out[slot]);
    }
    dgate
}

/// Full backward pass: experts plus router.
pub fn backward(layer: &MoeLoraLayer, cache: &ForwardCache, dy: &Matrix) -> Result<GradBundle> {
    let mut bundle = backward_expert(layer, cache, dy, cache.mode)?;
    bundle.router = backward_router(layer, cache, dy, cache.mode)?;
    if let RouteRecord::Shared(_) | RouteRecord::Fixed = cache.route {
        bundle.matrix_gates = cache.tokens.first().map(|t| t.gate.gates.clone());
    }
    if !bundle.is_finite() {
        return Err(Error::NonFinite("backward"));
    }
    Ok(bundle)
}

/// Matrix-mode backward for an objective `L(X)` of the effective weight
/// `X = W + Σ gᵢ s BᵢAᵢ`, given `∇_X L`. When `router_input` is set the
/// gates came from routing that vector and the router gradient is filled.
pub fn matrix_backward(
    layer: &MoeLoraLayer,
    gate: &GateOutput,
    grad_x: &Matrix,
    mode: ForwardMode,
    router_input: Option<&[f64]>,
) -> Result<GradBundle> {
    let sh = *layer.shape();
    if grad_x.shape() != (sh.m, sh.n) {
        return Err(mismatch(
            "matrix_backward",
            format!("grad_x {:?}", grad_x.shape()),
        ));
    }
    let s = layer.scaling();
    let mut bundle = GradBundle::zeros(layer);
    let mut dgate = vec![0.0; sh.num_experts];
    for &i in &gate.selected {
        let expert = &layer.experts[i];
        let c = mode.path_coefficient(gate.gates[i]) * s;
        let bt_grad = expert.b.transpose().mat_mul(grad_x)?;
        let grad_at = grad_x.mat_mul(&expert.a.transpose())?;
        dgate[i] = s * bt_grad.dot(&expert.a);
        bundle.experts[i] = Some(ExpertGrad {
            a: bt_grad.scale(c),
            b: grad_at.scale(c),
        });
    }
    if let Some(input) = router_input {
        let dl = softmax_backward(gate, &dgate);
        bundle.router.add_outer(1.0, &dl, input);
    }
    bundle.grad_x = Some(grad_x.clone());
    bundle.matrix_gates = Some(gate.gates.clone());
    if !bundle.is_finite() {
        return Err(Error::NonFinite("matrix_backward"));
    }
    Ok(bundle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `½‖P − T‖²_F`.
    MseMatrix,
    /// Mean over token columns of `½‖pₜ − tₜ‖²`.
    MseToken,
    /// Mean softmax cross-entropy over token columns; rows are classes.
    SoftmaxXent,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::MseMatrix => "mse-matrix",
            LossKind::MseToken => "mse-token",
            LossKind::SoftmaxXent => "softmax-xent",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse-matrix" => Ok(LossKind::MseMatrix),
            "mse-token" => Ok(LossKind::MseToken),
            "softmax-xent" => Ok(LossKind::SoftmaxXent),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Dense(&'a Matrix),
    Labels(&'a [usize]),
}

/// Loss value and `dL/dPrediction`.
pub fn loss_and_grad(
    kind: LossKind,
    prediction: &Matrix,
    target: Target<'_>,
) -> Result<(f64, Matrix)> {
    match (kind, target) {
        (LossKind::MseMatrix | LossKind::MseToken, Target::Dense(t)) => {
            if t.shape() != prediction.shape() {
                return Err(mismatch(
                    "loss_and_grad",
                    format!(
                        "prediction {:?} vs target {:?}",
                        prediction.shape(),
                        t.shape()
                    ),
                ));
            }
            let diff = prediction.sub(t)?;
            let half_sq = 0.5 * diff.sum_of_squares();
            if kind == LossKind::MseMatrix {
                Ok((half_sq, diff))
            } else {
                let tokens = prediction.cols() as f64;
                Ok((half_sq / tokens, diff.scale(1.0 / tokens)))
            }
        }
        (LossKind::SoftmaxXent, Target::Labels(labels)) => {
            if labels.len() != prediction.cols() {
                return Err(mismatch(
                    "loss_and_grad",
                    format!("{} labels for {} tokens", labels.len(), prediction.cols()),
                ));
            }
            let classes = prediction.rows();
            let tokens = prediction.cols() as f64;
            let mut grad = Matrix::zeros(classes, prediction.cols());
            let mut loss = 0.0;
            for (t, &label) in labels.iter().enumerate() {
                if label >= classes {
                    return Err(Error::InvalidArgument(format!(
                        "label {label} out of range for {classes} classes"
                    )));
                }
                let logits = prediction.column(t);
                let probs = softmax(&logits);
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                loss += lse - logits[label];
                let mut col = probs;
                col[label] -= 1.0;
                col.iter_mut().for_each(|v| *v /= tokens);
                grad.set_column(t, &col);
            }
            Ok((loss / tokens, grad))
        }
        (kind, _) => Err(Error::InvalidArgument(format!(
            "target type does not match loss kind {kind}"
        ))),
    }
}

/// `∇_X L` for a matrix-mode step. For a loss on `Y = X·X_in` this is
/// `dY · X_inᵀ`; with `X_in = I` it is `dY` itself.
pub fn full_matrix_grad(cache: &ForwardCache, dy: &Matrix) -> Result<Matrix> {
    if cache.route == RouteRecord::PerToken {
        return Err(Error::InvalidArgument(
            "full-matrix gradient is undefined for per-token routing".into(),
        ));
    }
    if dy.cols() != cache.input.cols() {
        return Err(mismatch(
            "full_matrix_grad",
            "dY and input token counts differ",
        ));
    }
    dy.mat_mul(&cache.input.transpose())
}
