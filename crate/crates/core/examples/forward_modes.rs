//! Routes a few tokens through a small layer and shows that the standard and
//! sqrt-detach forwards produce the same values.
//!
//! cargo run --example forward_modes

use moelora::layer::InitScales;
use moelora::{ForwardMode, LayerShape, MoeLoraLayer, RngStream, Routing};

fn main() -> moelora::Result<()> {
    let shape = LayerShape::new(6, 5, 4, 2, 2, 16.0)?;
    let scales = InitScales {
        expert_sigma: 0.3,
        router_sigma: 1.0,
        base_sigma: None,
    };
    let layer = MoeLoraLayer::init(shape, &RngStream::new(7), scales)?;
    let x = RngStream::new(8).gaussian_matrix(5, 3, 1.0);

    let (y_std, cache) = layer.forward_in_mode(&x, Routing::PerToken, ForwardMode::Standard)?;
    let (y_sqrt, _) = layer.forward_in_mode(&x, Routing::PerToken, ForwardMode::SqrtDetach)?;

    println!("scaling s = alpha / r = {}", layer.scaling());
    for (t, tok) in cache.tokens.iter().enumerate() {
        let gates: Vec<String> = tok
            .gate
            .selected
            .iter()
            .map(|&i| format!("expert {i}: g = {:.4}", tok.gate.gates[i]))
            .collect();
        println!("token {t}: {}", gates.join(", "));
    }
    let diff = y_std.sub(&y_sqrt)?.max_abs();
    println!("max |standard - sqrt-detach| = {diff:.3e}");
    println!("output norm = {:.6}", y_std.frobenius_norm());
    Ok(())
}
