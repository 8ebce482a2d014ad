//! Riemannian preconditioning of expert gradients.
//!
//! Each expert's raw gradients are rescaled by the inverse Gram matrices of
//! its factors:
//!
//! ```text
//! pA = (BᵀB + δ_B I)⁻¹ ∇A        pB = ∇B (AAᵀ + δ_A I)⁻¹
//! ```
//!
//! so that the first-order update `B·pA + pB·A` is the projection of the
//! full-matrix gradient onto `col(B)` and `row(A)`. In matrix mode the
//! preconditioned pair may additionally be divided by the expert's gate.

use crate::error::{Error, Result};
use crate::grad::{ExpertGrad, GradBundle};
use crate::layer::{LoraExpert, MoeLoraLayer};
use crate::tensor::Matrix;

pub const DEFAULT_DAMPING_REL: f64 = 1e-6;
pub const DEFAULT_GATE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecondConfig {
    pub enabled: bool,
    /// δ = damping_rel · max(1, trace(M)/r).
    pub damping_rel: f64,
    /// Divide by the gate after preconditioning (matrix mode only).
    pub ideal_gate_rescale: bool,
    pub gate_floor: f64,
}

impl Default for PrecondConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            damping_rel: DEFAULT_DAMPING_REL,
            ideal_gate_rescale: false,
            gate_floor: DEFAULT_GATE_FLOOR,
        }
    }
}

impl PrecondConfig {
    pub fn riemannian() -> Self {
        Self {
            enabled: true,
            ..Self::default()
        }
    }

    /// Undamped, for identity checks on well-conditioned factors.
    pub fn exact() -> Self {
        Self {
            enabled: true,
            damping_rel: 0.0,
            ..Self::default()
        }
    }

    pub fn with_ideal_rescale(mut self, on: bool) -> Self {
        self.ideal_gate_rescale = on;
        self
    }
}

pub fn relative_damping(gram: &Matrix, damping_rel: f64) -> f64 {
    let r = gram.rows().max(1) as f64;
    damping_rel * (gram.trace() / r).max(1.0)
}

/// `(pA, pB)` for one expert.
pub fn precondition_pair(
    expert: &LoraExpert,
    grad_a: &Matrix,
    grad_b: &Matrix,
    cfg: &PrecondConfig,
) -> Result<(Matrix, Matrix)> {
    let btb = expert.b.transpose().mat_mul(&expert.b)?;
    let aat = expert.a.mat_mul(&expert.a.transpose())?;
    let inv_b = btb.small_inverse(relative_damping(&btb, cfg.damping_rel))?;
    let inv_a = aat.small_inverse(relative_damping(&aat, cfg.damping_rel))?;
    Ok((inv_b.mat_mul(grad_a)?, grad_b.mat_mul(&inv_a)?))
}

/// Divides both preconditioned gradients by `max(gate, floor)`.
pub fn ideal_gate_rescale(
    p_a: &Matrix,
    p_b: &Matrix,
    gate: f64,
    floor: f64,
) -> Result<(Matrix, Matrix)> {
    if gate.is_nan() || gate <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gate rescaling needs a positive gate, got {gate}"
        )));
    }
    let c = 1.0 / gate.max(floor);
    Ok((p_a.scale(c), p_b.scale(c)))
}

/// Preconditions every expert gradient in the bundle. The router gradient
/// passes through untouched.
pub fn precondition_bundle(
    layer: &MoeLoraLayer,
    bundle: &GradBundle,
    cfg: &PrecondConfig,
) -> Result<GradBundle> {
    if !cfg.enabled {
        return Ok(bundle.clone());
    }
    let gates = if cfg.ideal_gate_rescale {
        Some(bundle.matrix_gates.as_ref().ok_or_else(|| {
            Error::InvalidArgument(
                "ideal gate rescaling is only defined for matrix-mode steps".into(),
            )
        })?)
    } else {
        None
    };
    let mut out = bundle.clone();
    for (i, slot) in out.experts.iter_mut().enumerate() {
        let Some(g) = slot.as_ref() else { continue };
        let (mut p_a, mut p_b) = precondition_pair(&layer.experts[i], &g.a, &g.b, cfg)?;
        if let Some(gates) = gates {
            (p_a, p_b) = ideal_gate_rescale(&p_a, &p_b, gates[i], cfg.gate_floor)?;
        }
        *slot = Some(ExpertGrad { a: p_a, b: p_b });
    }
    Ok(out)
}
