//! Validation accuracy as the number of training identities grows; the
//! validation identities stay fixed.
//!
//!     cargo run --release --example identity_sweep -- [out-dir]

use deepid2::experiment::{run_experiment, ExperimentConfig, ExperimentKind, ExperimentOutcome, RunOptions};

fn main() -> deepid2::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/identity_sweep".into());
    let mut cfg = ExperimentConfig::new(ExperimentKind::IdentitySweep);
    cfg.sweep.identities = vec![4, 8, 16, 32];
    let ExperimentOutcome::Sweep(sweep) = run_experiment(&cfg, out.as_ref(), RunOptions { workers: 0, force: true })? else {
        unreachable!()
    };
    for row in &sweep.summary {
        println!("{:>3} identities: accuracy {:.4}", row.point, row.mean_accuracy);
    }
    Ok(())
}
