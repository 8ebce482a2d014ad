//! Trains briefly, writes a checkpoint, reads it back and checks that the
//! restored layer reproduces the outputs bit for bit.
//!
//! cargo run --example checkpoint

use moelora::bench::{train_loop, Task};
use moelora::checkpoint;
use moelora::config::TrainConfig;
use moelora::{RngStream, Routing};

fn main() -> moelora::Result<()> {
    let cfg = TrainConfig::parse("m = 16\nn = 16\nexperts = 4\ntop_k = 2\nprecond = riemannian\nmode = sqrt-detach\nmax_steps = 50")?;
    let task = Task::from_config(&cfg, 3)?;
    let trained = train_loop(&task, &cfg, 3)?.trained;

    let path = std::env::temp_dir().join("moelora_example.ckpt");
    checkpoint::save(&trained, &path)?;
    let restored = checkpoint::load(&path)?;
    println!(
        "wrote {} ({} bytes)",
        path.display(),
        std::fs::metadata(&path)?.len()
    );

    let x = RngStream::new(4).gaussian_matrix(16, 8, 1.0);
    let (a, _) = trained.forward(&x, Routing::PerToken)?;
    let (b, _) = restored.forward(&x, Routing::PerToken)?;
    println!("restored == trained: {}", restored == trained);
    println!("outputs identical: {}", a == b);
    std::fs::remove_file(&path)?;
    Ok(())
}
