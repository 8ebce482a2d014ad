//! Token-level regression against a planted teacher layer, comparing RAdamW
//! and gRAdamW on held-out tokens.
//!
//! cargo run --release --example teacher_student

use moelora::bench::{mean_router_entropy, run_many, Task};
use moelora::config::TrainConfig;

fn main() -> moelora::Result<()> {
    let base = TrainConfig::parse(
        "task = teacher-student\nm = 32\nn = 32\nexperts = 8\ntop_k = 2\n\
         optimizer = adamw\nprecond = riemannian\ninit_sigma = 0.02\n\
         lr_experts = 3e-3\nlr_router = 3e-6\nmax_steps = 400\neval_every = 100",
    )?;
    if let Task::Teacher(t) = Task::from_config(&base, 0)? {
        let h = mean_router_entropy(&t.teacher, &t.train_x)?;
        println!(
            "teacher router entropy {h:.3} nats (uniform: {:.3})\n",
            (base.experts as f64).ln()
        );
    }
    let mut jobs = Vec::new();
    for mode in ["standard", "sqrt-detach"] {
        let mut cfg = base.clone();
        cfg.set("mode", mode)?;
        for seed in 0..3 {
            jobs.push((cfg.clone(), seed));
        }
    }
    for out in run_many(&jobs)? {
        let r = &out.record;
        let evals: Vec<String> = [1, 100, 200, 300, 400]
            .iter()
            .filter_map(|&s| r.at_step(s))
            .map(|row| format!("{:.4e}", row.eval_loss))
            .collect();
        println!("{:<8} seed {}  eval: {}", r.arm, r.seed, evals.join("  "));
    }
    Ok(())
}
