//! A task-incremental run over three synthetic tasks.
//!
//! Trains the reference desk-scale model (d = 32, two layers) on three
//! class-disjoint tasks in the chosen mode and prints the accuracy matrix.
//! Adapter-incremental and model-incremental runs cannot forget; the
//! sequential baseline does.
//!
//! ```bash
//! cargo run --release --example ticl_sequence -- adapter-inc
//! cargo run --release --example ticl_sequence -- model-seq "epochs=10"
//! ```

use std::time::Instant;

use ftacl::ticl::{make_synthetic_tasks, parse_kv, RunConfig, TiclRun, TrainMode};

fn main() -> ftacl::Result<()> {
    let mut args = std::env::args().skip(1);
    let mode: TrainMode = args.next().as_deref().unwrap_or("adapter-inc").parse()?;
    let mut cfg = RunConfig::reference(mode, 7);
    // optional overrides as "key=value;key=value"
    if let Some(kv) = args.next() {
        cfg.apply(&parse_kv(&kv.replace(';', "\n"))?)?;
    }

    let start = Instant::now();
    let mut run = TiclRun::new(cfg.clone())?;
    let before = run.backbone_checksum();
    for spec in make_synthetic_tasks(&cfg.data, cfg.tasks)? {
        let (id, name) = (spec.id, spec.name.clone());
        let train = run.register_task(spec)?;
        let log = run.train_task(id, &train, &cfg.train)?;
        println!(
            "task {id} ({name}): loss {:.3} -> {:.3}, train accuracy {:.3} [{:.1?}]",
            log.epoch_losses[0],
            log.epoch_losses.last().copied().unwrap_or(f64::NAN),
            log.train_accuracy,
            start.elapsed()
        );
    }
    println!("\n{}", run.evaluate_matrix()?);
    println!("shared trunk unchanged: {}", run.backbone_checksum() == before);
    Ok(())
}
