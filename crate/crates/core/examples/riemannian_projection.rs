//! One preconditioned SGD step at fixed gates, compared with the first-order
//! projection laws. Standard mode follows the squared-gate law and the ideal
//! gate rescale the linear-gate law. Sqrt-detach follows the linear-gate
//! law on its trainable path while the effective weight moves with g^{3/2}.
//!
//! cargo run --release --example riemannian_projection

use moelora::oracle::{scaling_check, IdentityFixture, Measured, ETA_HI, ETA_LO};
use moelora::precond::PrecondConfig;
use moelora::{ForwardMode, LayerShape};

fn main() -> moelora::Result<()> {
    let shape = LayerShape::new(16, 16, 5, 2, 2, 2.0)?;
    let fixture = IdentityFixture::random(shape, 0)?;
    println!("gates: {:?}", fixture.gates);
    println!("residual at eta = {ETA_HI:e} and {ETA_LO:e}\n");

    let exact = PrecondConfig::exact();
    let routes = [
        (
            "standard, squared-gate law",
            ForwardMode::Standard,
            exact,
            Measured::EffectiveWeight,
        ),
        (
            "ideal rescale, linear-gate law",
            ForwardMode::Standard,
            exact.with_ideal_rescale(true),
            Measured::EffectiveWeight,
        ),
        (
            "sqrt-detach trainable path",
            ForwardMode::SqrtDetach,
            exact,
            Measured::TrainablePath,
        ),
        (
            "sqrt-detach effective weight",
            ForwardMode::SqrtDetach,
            exact,
            Measured::EffectiveWeight,
        ),
        (
            "no preconditioning",
            ForwardMode::Standard,
            PrecondConfig::default(),
            Measured::EffectiveWeight,
        ),
    ];
    for (name, mode, cfg, measured) in routes {
        let chk = scaling_check(&fixture, mode, &cfg, measured)?;
        println!(
            "{name:<32} {:.3e}  {:.3e}  ratio {:>12.1}  first-order bound {:.3e}  {}",
            chk.residual_hi,
            chk.residual_lo,
            chk.ratio(),
            chk.bound_lo(),
            if chk.pass() { "PASS" } else { "FAIL" }
        );
    }
    Ok(())
}
