//! Four-arm ablation (SGD, sqrt-SGD, RSGD, gRSGD) over ten paired seeds on
//! the low-rank task, tabulated at steps 100 and 500.
//!
//! cargo run --release --example ablation

use moelora::bench::{compare_runs, run_many};
use moelora::config::TrainConfig;

fn main() -> moelora::Result<()> {
    let cfg = TrainConfig::default();
    let jobs: Vec<_> = cfg
        .four_arms()
        .into_iter()
        .flat_map(|arm| cfg.seed_list().into_iter().map(move |s| (arm.clone(), s)))
        .collect();
    let records: Vec<_> = run_many(&jobs)?.into_iter().map(|o| o.record).collect();
    for step in [100, 500] {
        let table = compare_runs(&records, step)?;
        println!("{}", table.to_text());
        println!(
            "gRSGD below RSGD on {}/{} seeds; improvement of gRSGD over RSGD {:.4e}, of sqrt-SGD over SGD {:.4e}\n",
            table.paired_wins("gRSGD", "RSGD"),
            cfg.seeds,
            table.improvement("RSGD", "gRSGD").unwrap_or(f64::NAN),
            table.improvement("SGD", "sqrt-SGD").unwrap_or(f64::NAN),
        );
    }
    Ok(())
}
