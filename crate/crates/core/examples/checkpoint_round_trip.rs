//! Saving a run directory and serving predictions from the reloaded copy.
//!
//! Trains a small adapter-incremental run, writes it to a temporary
//! directory (one shared trunk file plus one small file per task), reloads
//! it and checks that every task's predictions are bit-for-bit the same.
//!
//! ```bash
//! cargo run --example checkpoint_round_trip
//! ```

use ftacl::ticl::{make_synthetic_tasks, parse_kv, RunConfig, TiclRun, TrainMode};

fn main() -> ftacl::Result<()> {
    let mut cfg = RunConfig::reference(TrainMode::AdapterIncremental, 11);
    cfg.apply(&parse_kv("embed_dim=16\nlayers=1\nheads=2\nbottleneck=4\nepochs=3\ntrain_per_class=10\ntest_per_class=5")?)?;
    let mut run = TiclRun::new(cfg.clone())?;
    for spec in make_synthetic_tasks(&cfg.data, cfg.tasks)? {
        let id = spec.id;
        let train = run.register_task(spec)?;
        run.train_task(id, &train, &cfg.train)?;
    }

    let dir = tempfile::tempdir()?;
    run.save(dir.path())?;
    let mut files: Vec<_> = std::fs::read_dir(dir.path())?.collect::<Result<_, _>>()?;
    files.sort_by_key(|e| e.file_name());
    for entry in files {
        println!("{:>24} {:>8} bytes", entry.file_name().to_string_lossy(), entry.metadata()?.len());
    }

    let back = TiclRun::load(dir.path())?;
    for task in run.tasks() {
        let want = run.predict_all(&task.test, task.id)?;
        let got = back.predict_all(&task.test, task.id)?;
        let same = want.iter().zip(&got).all(|(a, b)| a.bitwise_eq(b));
        println!("task {} ({}): {} predictions, bitwise equal after reload: {same}", task.id, task.name, got.len());
    }
    Ok(())
}
