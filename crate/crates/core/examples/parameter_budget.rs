//! What each continual-learning strategy costs in parameters and storage.
//!
//! Reports the 12-layer, 768-wide model over three tasks (35, 50 and 28
//! classes) for every accounting mode, then the per-task checkpoint of the
//! adapter strategy against a full-model checkpoint.
//!
//! ```bash
//! cargo run --example parameter_budget
//! ```

use ftacl::accounting::{param_report, reference_task_classes, AccountingMode};
use ftacl::encoder::ModelConfig;

fn main() -> ftacl::Result<()> {
    let cfg = ModelConfig::paper_full();
    let classes = reference_task_classes(3);
    println!("{:<12} {:>12} {:>12} {:>9}", "mode", "total", "trainable", "fraction");
    for mode in [
        AccountingMode::FullFinetune,
        AccountingMode::LinearProbe,
        AccountingMode::ModelSequential,
        AccountingMode::ModelIncremental,
        AccountingMode::AdapterIncremental,
    ] {
        let r = param_report(&cfg, mode, &classes)?;
        println!(
            "{:<12} {:>12} {:>12} {:>8.2}%",
            mode.to_string(),
            r.total,
            r.trainable,
            100.0 * r.trainable_fraction()
        );
    }

    let ai = param_report(&cfg, AccountingMode::AdapterIncremental, &classes)?;
    let full = param_report(&cfg, AccountingMode::FullFinetune, &classes)?;
    println!("\n{ai}\n");
    for (i, (a, f)) in ai.task_checkpoint_bytes.iter().zip(&full.task_checkpoint_bytes).enumerate() {
        println!(
            "task {i}: adapter checkpoint {:.1} MB vs full model {:.1} MB ({:.1}%)",
            *a as f64 / 1e6,
            *f as f64 / 1e6,
            100.0 * *a as f64 / *f as f64
        );
    }
    Ok(())
}
