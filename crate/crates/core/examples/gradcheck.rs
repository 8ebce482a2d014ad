//! Compares hand-written gradients against central differences for both
//! forward modes and all three losses.
//!
//! cargo run --release --example gradcheck

use moelora::grad::LossKind;
use moelora::oracle::{format_report, gradcheck_rows};

fn main() -> moelora::Result<()> {
    let losses = [
        LossKind::MseToken,
        LossKind::SoftmaxXent,
        LossKind::MseMatrix,
    ];
    let (rows, reports) = gradcheck_rows(&losses, 200, 0)?;
    print!("{}", format_report(&rows));
    let skipped: usize = reports
        .iter()
        .flat_map(|r| r.classes.iter())
        .map(|c| c.skipped_flips)
        .sum();
    println!("coordinates skipped for changing the top-k selection: {skipped}");
    Ok(())
}
