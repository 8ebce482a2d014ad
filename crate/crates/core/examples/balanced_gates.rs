//! With k identical experts and uniform gates 1/k, the squared-gate update is
//! k times smaller than the linear-gate update.
//!
//! cargo run --release --example balanced_gates

use moelora::oracle::{balanced_gate_ratio, IdentityFixture};
use moelora::LayerShape;

fn main() -> moelora::Result<()> {
    println!("{:>3}  {:>14}", "k", "ratio");
    for k in [1, 2, 3, 5, 10, 20] {
        let shape = LayerShape::new(16, 16, k.max(2), k, 4, 4.0)?;
        let fixture = IdentityFixture::balanced(shape, k, 1)?;
        let ratio = balanced_gate_ratio(&fixture, 1e-6)?;
        println!("{k:>3}  {ratio:>14.9}");
    }
    Ok(())
}
