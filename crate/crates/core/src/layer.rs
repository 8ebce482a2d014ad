//! The mixture-of-LoRA-experts layer.
//!
//! A layer holds a frozen base weight `W` (m×n), `N` low-rank experts
//! `(Bᵢ: m×r, Aᵢ: r×n)` and a linear router `Wg` (N×n). For an input token
//! `x` the router picks the top-k logits `Wg·x`, softmaxes over the picked
//! set only, and the output is
//!
//! ```text
//! y = W·x + Σ_{i ∈ selected} gᵢ · s · Bᵢ(Aᵢ x),    s = α / r
//! ```
//!
//! [`ForwardMode::SqrtDetach`] writes each expert term as
//! `√ĝᵢ·eᵢ + (gᵢ − √ĝᵢ)·êᵢ`, where hatted values are constants for
//! differentiation. The output value is the same; only the backward pass
//! (see [`crate::grad`]) differs.

use std::fmt;
use std::str::FromStr;

use crate::error::{mismatch, Error, Result};
use crate::tensor::{softmax, top_k_select, Matrix, RngStream};

/// Default std-dev for expert `A` and `B` entries.
pub const DEFAULT_EXPERT_SIGMA: f64 = 1e-3;
/// Default std-dev for router entries.
pub const DEFAULT_ROUTER_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForwardMode {
    #[default]
    Standard,
    SqrtDetach,
}

impl ForwardMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ForwardMode::Standard => "standard",
            ForwardMode::SqrtDetach => "sqrt-detach",
        }
    }

    /// Coefficient on the parameter-gradient path for a gate value `g`.
    pub fn path_coefficient(self, g: f64) -> f64 {
        match self {
            ForwardMode::Standard => g,
            ForwardMode::SqrtDetach => g.sqrt(),
        }
    }
}

impl fmt::Display for ForwardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ForwardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ForwardMode::Standard),
            "sqrt-detach" => Ok(ForwardMode::SqrtDetach),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected standard | sqrt-detach)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerShape {
    /// Output dimension.
    pub m: usize,
    /// Input dimension.
    pub n: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub rank: usize,
    pub alpha: f64,
}

impl LayerShape {
    pub fn new(
        m: usize,
        n: usize,
        num_experts: usize,
        top_k: usize,
        rank: usize,
        alpha: f64,
    ) -> Result<Self> {
        let shape = Self {
            m,
            n,
            num_experts,
            top_k,
            rank,
            alpha,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::InvalidShape("m and n must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::InvalidShape(format!(
                "need 1 <= k <= N, got k = {}, N = {}",
                self.top_k, self.num_experts
            )));
        }
        if self.rank == 0 || self.rank > self.m.min(self.n) {
            return Err(Error::InvalidShape(format!(
                "need 1 <= r <= min(m, n), got r = {}",
                self.rank
            )));
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 || self.alpha.is_infinite() {
            return Err(Error::InvalidShape(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// `s = α / r`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraExpert {
    /// m×r
    pub b: Matrix,
    /// r×n
    pub a: Matrix,
}

impl LoraExpert {
    pub fn product(&self) -> Result<Matrix> {
        self.b.mat_mul(&self.a)
    }
}

/// Gate values for one routed token (or one shared routing decision).
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    /// Selected expert indices, highest logit first.
    pub selected: Vec<usize>,
    /// Length-N gate vector, zero off the selected set.
    pub gates: Vec<f64>,
    /// Length-N router logits; `None` when gates were supplied directly.
    pub logits: Option<Vec<f64>>,
}

impl GateOutput {
    /// Routes a logit vector: top-k, then softmax over the selected logits.
    pub fn from_logits(logits: Vec<f64>, k: usize) -> Result<Self> {
        let selected = top_k_select(&logits, k)?;
        let picked: Vec<f64> = selected.iter().map(|&i| logits[i]).collect();
        let probs = softmax(&picked);
        let mut gates = vec![0.0; logits.len()];
        for (&i, p) in selected.iter().zip(probs) {
            gates[i] = p;
        }
        Ok(Self {
            selected,
            gates,
            logits: Some(logits),
        })
    }

    /// Caller-supplied gates on the simplex. Selected = nonzero entries.
    pub fn fixed(gates: &[f64]) -> Result<Self> {
        if gates.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::InvalidArgument(
                "gates must be finite and >= 0".into(),
            ));
        }
        let sum: f64 = gates.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "gates must sum to 1, got {sum}"
            )));
        }
        let selected = (0..gates.len()).filter(|&i| gates[i] > 0.0).collect();
        Ok(Self {
            selected,
            gates: gates.to_vec(),
            logits: None,
        })
    }
}

/// How gate values are obtained for a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Routing<'a> {
    /// Each token column is routed independently.
    PerToken,
    /// One decision for the whole batch, from the mean of the input columns.
    Pooled,
    /// One decision for the whole batch, from the given probe vector.
    Probe(&'a [f64]),
    /// One caller-supplied gate vector; the router is bypassed.
    Fixed(&'a [f64]),
}

/// Routing bookkeeping kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum RouteRecord {
    PerToken,
    /// Shared decision made from this router input.
    Shared(Vec<f64>),
    Fixed,
}

/// Per-token values needed by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCache {
    pub gate: GateOutput,
    /// `Aᵢx` for each selected expert, in `gate.selected` order.
    pub low_rank: Vec<Vec<f64>>,
    /// `eᵢ = s·Bᵢ(Aᵢx)` for each selected expert, in `gate.selected` order.
    pub expert_out: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub mode: ForwardMode,
    pub route: RouteRecord,
    pub input: Matrix,
    pub tokens: Vec<TokenCache>,
}

impl ForwardCache {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Selected sets per token, used to detect routing flips.
    pub fn selections(&self) -> Vec<Vec<usize>> {
        self.tokens
            .iter()
            .map(|t| t.gate.selected.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitScales {
    pub expert_sigma: f64,
    pub router_sigma: f64,
    /// `None` means `1/√n`.
    pub base_sigma: Option<f64>,
}

impl Default for InitScales {
    fn default() -> Self {
        Self {
            expert_sigma: DEFAULT_EXPERT_SIGMA,
            router_sigma: DEFAULT_ROUTER_SIGMA,
            base_sigma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLoraLayer {
    base: Matrix,
    pub experts: Vec<LoraExpert>,
    /// N×n router weights.
    pub router: Matrix,
    shape: LayerShape,
    pub mode: ForwardMode,
}

// stream tags for initialization
const TAG_BASE: u64 = 1;
const TAG_ROUTER: u64 = 2;
const TAG_EXPERTS: u64 = 3;

impl MoeLoraLayer {
    /// Assembles a layer from parts, checking every dimension.
    pub fn from_parts(
        shape: LayerShape,
        base: Matrix,
        experts: Vec<LoraExpert>,
        router: Matrix,
        mode: ForwardMode,
    ) -> Result<Self> {
        shape.validate()?;
        let (m, n, r) = (shape.m, shape.n, shape.rank);
        if base.shape() != (m, n) {
            return Err(mismatch(
                "layer",
                format!("base {:?} vs ({m}, {n})", base.shape()),
            ));
        }
        if router.shape() != (shape.num_experts, n) {
            return Err(mismatch("layer", format!("router {:?}", router.shape())));
        }
        if experts.len() != shape.num_experts {
            return Err(mismatch(
                "layer",
                format!(
                    "{} experts, shape says {}",
                    experts.len(),
                    shape.num_experts
                ),
            ));
        }
        for (i, e) in experts.iter().enumerate() {
            if e.b.shape() != (m, r) || e.a.shape() != (r, n) {
                return Err(mismatch(
                    "layer",
                    format!("expert {i}: B {:?}, A {:?}", e.b.shape(), e.a.shape()),
                ));
            }
        }
        Ok(Self {
            base,
            experts,
            router,
            shape,
            mode,
        })
    }

    /// Random layer: `W`, router, and all experts drawn from streams derived
    /// from `rng`'s seed.
    pub fn init(shape: LayerShape, rng: &RngStream, scales: InitScales) -> Result<Self> {
        shape.validate()?;
        let base_sigma = scales.base_sigma.unwrap_or(1.0 / (shape.n as f64).sqrt());
        let base = rng
            .derive(TAG_BASE)
            .gaussian_matrix(shape.m, shape.n, base_sigma);
        Self::init_with_base(shape, base, rng, scales)
    }

    /// Like [`init`](Self::init) but with a given frozen base.
    pub fn init_with_base(
        shape: LayerShape,
        base: Matrix,
        rng: &RngStream,
        scales: InitScales,
    ) -> Result<Self> {
        let router =
            rng.derive(TAG_ROUTER)
                .gaussian_matrix(shape.num_experts, shape.n, scales.router_sigma);
        let mut expert_rng = rng.derive(TAG_EXPERTS);
        let experts = (0..shape.num_experts)
            .map(|_| LoraExpert {
                b: expert_rng.gaussian_matrix(shape.m, shape.rank, scales.expert_sigma),
                a: expert_rng.gaussian_matrix(shape.rank, shape.n, scales.expert_sigma),
            })
            .collect();
        Self::from_parts(shape, base, experts, router, ForwardMode::Standard)
    }

    pub fn shape(&self) -> &LayerShape {
        &self.shape
    }

    /// Frozen base weight. There is no mutable accessor.
    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn scaling(&self) -> f64 {
        self.shape.scaling()
    }

    /// True when some expert has a zero column in `B` or zero row in `A`,
    /// so `BᵀB` or `AAᵀ` cannot be inverted without damping.
    pub fn requires_damping(&self) -> bool {
        self.experts.iter().any(|e| {
            let btb = e.b.transpose().mat_mul(&e.b);
            let aat = e.a.mat_mul(&e.a.transpose());
            match (btb, aat) {
                (Ok(btb), Ok(aat)) => {
                    (0..self.shape.rank).any(|i| btb[(i, i)] <= 0.0 || aat[(i, i)] <= 0.0)
                }
                _ => true,
            }
        })
    }

    pub fn route_token(&self, x: &[f64]) -> Result<GateOutput> {
        let logits = self.router.mat_vec(x)?;
        GateOutput::from_logits(logits, self.shape.top_k)
    }

    /// Forward pass in the layer's own mode.
    pub fn forward(&self, input: &Matrix, routing: Routing<'_>) -> Result<(Matrix, ForwardCache)> {
        self.forward_in_mode(input, routing, self.mode)
    }

    pub fn forward_standard(
        &self,
        input: &Matrix,
        routing: Routing<'_>,
    ) -> Result<(Matrix, ForwardCache)> {
        self.forward_in_mode(input, routing, ForwardMode::Standard)
    }

    pub fn forward_sqrt_detach(
        &self,
        input: &Matrix,
        routing: Routing<'_>,
    ) -> Result<(Matrix, ForwardCache)> {
        self.forward_in_mode(input, routing, ForwardMode::SqrtDetach)
    }

    pub fn forward_in_mode(
        &self,
        input: &Matrix,
        routing: Routing<'_>,
        mode: ForwardMode,
    ) -> Result<(Matrix, ForwardCache)> {
        let (m, n) = (self.shape.m, self.shape.n);
        if input.rows() != n {
            return Err(mismatch(
                "forward",
                format!("input has {} rows, layer expects n = {n}", input.rows()),
            ));
        }
        let num_tokens = input.cols();
        if num_tokens == 0 {
            return Err(mismatch("forward", "no input tokens"));
        }
        let (shared, route) = match routing {
            Routing::PerToken => (None, RouteRecord::PerToken),
            Routing::Pooled => {
                let mut pooled = vec![0.0; n];
                for t in 0..num_tokens {
                    for (p, v) in pooled.iter_mut().zip(input.column(t)) {
                        *p += v;
                    }
                }
                pooled.iter_mut().for_each(|p| *p /= num_tokens as f64);
                (
                    Some(self.route_token(&pooled)?),
                    RouteRecord::Shared(pooled),
                )
            }
            Routing::Probe(probe) => {
                if probe.len() != n {
                    return Err(mismatch("forward", "probe length != n"));
                }
                (
                    Some(self.route_token(probe)?),
                    RouteRecord::Shared(probe.to_vec()),
                )
            }
            Routing::Fixed(gates) => {
                if gates.len() != self.shape.num_experts {
                    return Err(mismatch("forward", "fixed gate vector length != N"));
                }
                (Some(GateOutput::fixed(gates)?), RouteRecord::Fixed)
            }
        };

        let s = self.scaling();
        let mut out = Matrix::zeros(m, num_tokens);
        let mut tokens = Vec::with_capacity(num_tokens);
        for t in 0..num_tokens {
            let x = input.column(t);
            let gate = match &shared {
                Some(g) => g.clone(),
                None => self.route_token(&x)?,
            };
            let mut y = self.base.mat_vec(&x)?;
            let mut low_rank = Vec::with_capacity(gate.selected.len());
            let mut expert_out = Vec::with_capacity(gate.selected.len());
            for &i in &gate.selected {
                let expert = &self.experts[i];
                let u = expert.a.mat_vec(&x)?;
                let mut e = expert.b.mat_vec(&u)?;
                e.iter_mut().for_each(|v| *v *= s);
                let g = gate.gates[i];
                match mode {
                    ForwardMode::Standard => {
                        for (yv, ev) in y.iter_mut().zip(&e) {
                            *yv += g * ev;
                        }
                    }
                    ForwardMode::SqrtDetach => {
                        let sq = g.sqrt();
                        let rest = g - sq;
                        for (yv, ev) in y.iter_mut().zip(&e) {
                            *yv += sq * ev + rest * ev;
                        }
                    }
                }
                low_rank.push(u);
                expert_out.push(e);
            }
            out.set_column(t, &y);
            tokens.push(TokenCache {
                gate,
                low_rank,
                expert_out,
            });
        }
        let out = out.ensure_finite("forward")?;
        Ok((
            out,
            ForwardCache {
                mode,
                route,
                input: input.clone(),
                tokens,
            },
        ))
    }

    /// `W + Σᵢ gatesᵢ · s · BᵢAᵢ`.
    pub fn effective_weight(&self, gates: &[f64]) -> Result<Matrix> {
        let mut x = self.base.clone();
        x.add_scaled(1.0, &self.adapter_weight(gates)?)?;
        Ok(x)
    }

    /// `Σᵢ gatesᵢ · s · BᵢAᵢ` without the base.
    pub fn adapter_weight(&self, gates: &[f64]) -> Result<Matrix> {
        if gates.len() != self.shape.num_experts {
            return Err(mismatch("effective_weight", "gate vector length != N"));
        }
        let s = self.scaling();
        let mut x = Matrix::zeros(self.shape.m, self.shape.n);
        for (expert, &g) in self.experts.iter().zip(gates) {
            if g == 0.0 {
                continue;
            }
            x.add_scaled(g * s, &expert.product()?)?;
        }
        Ok(x)
    }

    /// Change in `Σᵢ coefᵢ · s · BᵢAᵢ` between `self` (before) and `after`,
    /// expanded as `ΔB·A + B·ΔA + ΔB·ΔA` from exact parameter differences.
    /// Both layers must share the frozen base, so it cancels exactly.
    pub fn adapter_delta(&self, after: &MoeLoraLayer, coefs: &[f64]) -> Result<Matrix> {
        if after.base != self.base {
            return Err(Error::InvalidArgument(
                "layers differ in the frozen base".into(),
            ));
        }
        let s = self.scaling();
        let mut d = Matrix::zeros(self.shape.m, self.shape.n);
        for ((before, after), &c) in self.experts.iter().zip(&after.experts).zip(coefs) {
            if c == 0.0 {
                continue;
            }
            let db = after.b.sub(&before.b)?;
            let da = after.a.sub(&before.a)?;
            let mut term = db.mat_mul(&before.a)?;
            term.add_scaled(1.0, &before.b.mat_mul(&da)?)?;
            term.add_scaled(1.0, &db.mat_mul(&da)?)?;
            d.add_scaled(c * s, &term)?;
        }
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(n_exp: usize, k: usize, r: usize) -> LayerShape {
        LayerShape::new(6, 5, n_exp, k, r, r as f64).unwrap()
    }

    fn unit_layer(seed: u64, n_exp: usize, k: usize, r: usize) -> MoeLoraLayer {
        let scales = InitScales {
            expert_sigma: 0.5,
            router_sigma: 1.0,
            base_sigma: Some(1.0),
        };
        MoeLoraLayer::init(shape(n_exp, k, r), &RngStream::new(seed), scales).unwrap()
    }

    #[test]
    fn shape_constraints() {
        assert!(LayerShape::new(4, 4, 3, 4, 1, 1.0).is_err());
        assert!(LayerShape::new(4, 4, 3, 0, 1, 1.0).is_err());
        assert!(LayerShape::new(4, 4, 3, 2, 5, 1.0).is_err());
        assert!(LayerShape::new(4, 4, 3, 2, 2, 0.0).is_err());
        let s = LayerShape::new(64, 64, 20, 10, 4, 16.0).unwrap();
        assert_eq!(s.scaling(), 4.0);
    }

    #[test]
    fn zero_sigma_needs_damping() {
        let scales = InitScales {
            expert_sigma: 0.0,
            ..InitScales::default()
        };
        let layer = MoeLoraLayer::init(shape(3, 2, 2), &RngStream::new(1), scales).unwrap();
        assert!(layer.requires_damping());
        let layer =
            MoeLoraLayer::init(shape(3, 2, 2), &RngStream::new(1), InitScales::default()).unwrap();
        assert!(!layer.requires_damping());
    }

    #[test]
    fn init_is_deterministic() {
        let a =
            MoeLoraLayer::init(shape(4, 2, 2), &RngStream::new(8), InitScales::default()).unwrap();
        let b =
            MoeLoraLayer::init(shape(4, 2, 2), &RngStream::new(8), InitScales::default()).unwrap();
        assert_eq!(a, b);
        let c =
            MoeLoraLayer::init(shape(4, 2, 2), &RngStream::new(9), InitScales::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn b_norm_follows_chi_distribution() {
        // ‖B‖_F / σ ~ chi with m·r degrees of freedom; sd of chi_k ≈ 1/√2.
        let shape = LayerShape::new(64, 64, 8, 2, 4, 16.0).unwrap();
        let sigma = 1e-3;
        let scales = InitScales {
            expert_sigma: sigma,
            ..InitScales::default()
        };
        let layer = MoeLoraLayer::init(shape, &RngStream::new(21), scales).unwrap();
        let expected = sigma * ((64 * 4) as f64).sqrt();
        let sd = sigma * std::f64::consts::FRAC_1_SQRT_2;
        for e in &layer.experts {
            let norm = e.b.frobenius_norm();
            assert!((norm - expected).abs() <= 3.0 * sd, "{norm} vs {expected}");
        }
    }

    #[test]
    fn route_equal_logits_k_equals_n() {
        let g = GateOutput::from_logits(vec![0.3; 4], 4).unwrap();
        for v in &g.gates {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn route_k1_single_gate() {
        let g = GateOutput::from_logits(vec![0.1, 2.0, -1.0], 1).unwrap();
        assert_eq!(g.selected, vec![1]);
        assert_eq!(g.gates, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn route_hand_softmax() {
        let g = GateOutput::from_logits(vec![2f64.ln(), 0.0, 0.0], 2).unwrap();
        assert_eq!(g.selected, vec![0, 1]);
        assert!((g.gates[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.gates[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(g.gates[2], 0.0);
    }

    #[test]
    fn zero_adapter_forward_is_base() {
        let mut layer = unit_layer(2, 3, 2, 2);
        for e in &mut layer.experts {
            e.b = Matrix::zeros(6, 2);
        }
        let x = RngStream::new(5).gaussian_matrix(5, 4, 1.0);
        let (y, _) = layer.forward_standard(&x, Routing::PerToken).unwrap();
        assert_eq!(y, layer.base().mat_mul(&x).unwrap());
    }

    #[test]
    fn single_expert_reduces_to_plain_lora() {
        let layer = unit_layer(3, 1, 1, 2);
        let x = RngStream::new(6).gaussian_matrix(5, 3, 1.0);
        let (y, _) = layer.forward_standard(&x, Routing::PerToken).unwrap();
        let e = &layer.experts[0];
        let mut want = layer.base().mat_mul(&x).unwrap();
        want.add_scaled(1.0, &e.b.mat_mul(&e.a.mat_mul(&x).unwrap()).unwrap())
            .unwrap();
        assert!(y.sub(&want).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn per_token_forward_matches_effective_weight() {
        let layer = unit_layer(4, 5, 2, 2);
        let x = RngStream::new(7).gaussian_matrix(5, 3, 1.0);
        let (y, cache) = layer.forward_standard(&x, Routing::PerToken).unwrap();
        for t in 0..3 {
            let w = layer.effective_weight(&cache.tokens[t].gate.gates).unwrap();
            let want = w.mat_vec(&x.column(t)).unwrap();
            for (a, b) in y.column(t).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_modes_agree() {
        let layer = unit_layer(5, 6, 3, 2);
        let x = RngStream::new(8).gaussian_matrix(5, 7, 1.0);
        let (a, _) = layer.forward_standard(&x, Routing::PerToken).unwrap();
        let (b, _) = layer.forward_sqrt_detach(&x, Routing::PerToken).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn effective_weight_cases() {
        let layer = unit_layer(6, 2, 1, 2);
        let w = layer.effective_weight(&[0.0, 1.0]).unwrap();
        let mut want = layer.base().clone();
        want.add_scaled(layer.scaling(), &layer.experts[1].product().unwrap())
            .unwrap();
        assert_eq!(w, want);

        // entrywise accumulation oracle
        let g = [0.3, 0.7];
        let w = layer.effective_weight(&g).unwrap();
        let s = layer.scaling();
        for i in 0..6 {
            for j in 0..5 {
                let mut acc = layer.base()[(i, j)];
                for (e, gi) in layer.experts.iter().zip(g) {
                    for q in 0..2 {
                        acc += gi * s * e.b[(i, q)] * e.a[(q, j)];
                    }
                }
                assert!((w[(i, j)] - acc).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn zero_b_zero_gates_is_base() {
        let mut layer = unit_layer(6, 2, 1, 2);
        for e in &mut layer.experts {
            e.b = Matrix::zeros(6, 2);
        }
        assert_eq!(&layer.effective_weight(&[0.0, 0.0]).unwrap(), layer.base());
    }

    #[test]
    fn fixed_gates_validate() {
        assert!(GateOutput::fixed(&[0.5, 0.6]).is_err());
        assert!(GateOutput::fixed(&[-0.5, 1.5]).is_err());
        let g = GateOutput::fixed(&[0.0, 0.25, 0.75]).unwrap();
        assert_eq!(g.selected, vec![1, 2]);
    }

    #[test]
    fn forward_dimension_errors() {
        let layer = unit_layer(1, 3, 2, 2);
        assert!(layer
            .forward_standard(&Matrix::zeros(4, 2), Routing::PerToken)
            .is_err());
        assert!(layer
            .forward_standard(&Matrix::zeros(5, 0), Routing::PerToken)
            .is_err());
    }

    #[test]
    fn adapter_delta_matches_difference() {
        let before = unit_layer(9, 3, 2, 2);
        let mut after = before.clone();
        for e in &mut after.experts {
            e.a.data_mut().iter_mut().for_each(|v| *v += 0.01);
            e.b.data_mut().iter_mut().for_each(|v| *v -= 0.02);
        }
        let g = [0.2, 0.3, 0.5];
        let d = before.adapter_delta(&after, &g).unwrap();
        let direct = after
            .effective_weight(&g)
            .unwrap()
            .sub(&before.effective_weight(&g).unwrap())
            .unwrap();
        assert!(d.sub(&direct).unwrap().max_abs() < 1e-13);
    }
}
