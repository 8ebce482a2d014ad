//! Recovers a planted rank-8 correction with RSGD and gRSGD and prints the
//! training curves of one seed.
//!
//! cargo run --release --example lowrank_recover

use moelora::bench::{train_loop, Task};
use moelora::config::TrainConfig;

fn main() -> moelora::Result<()> {
    let base = TrainConfig::parse(
        "task = lowrank-recover\nprecond = riemannian\nmax_steps = 500\n# m, n, experts, top_k, rank, alpha keep their defaults",
    )?;
    let seed = 0;
    let task = Task::from_config(&base, seed)?;
    let mut curves = Vec::new();
    for mode in ["standard", "sqrt-detach"] {
        let mut cfg = base.clone();
        cfg.set("mode", mode)?;
        let out = train_loop(&task, &cfg, seed)?;
        curves.push(out.record);
    }
    println!(
        "{:>5}  {:>12}  {:>12}",
        "step", curves[0].arm, curves[1].arm
    );
    for step in [1, 25, 50, 100, 200, 300, 400, 500] {
        let a = curves[0].at_step(step).expect("step in range");
        let b = curves[1].at_step(step).expect("step in range");
        println!(
            "{step:>5}  {:>12.4e}  {:>12.4e}",
            a.train_loss, b.train_loss
        );
    }
    Ok(())
}
