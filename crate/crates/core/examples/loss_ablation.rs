//! Compares verification losses: the full contrastive L2 loss, its
//! same-pair and different-pair halves, L1, cosine and none.
//!
//!     cargo run --release --example loss_ablation -- [out-dir]

use deepid2::experiment::{run_experiment, ExperimentConfig, ExperimentKind, ExperimentOutcome, RunOptions};
use deepid2::trainer::Lambda;

fn main() -> deepid2::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/loss_ablation".into());
    let mut cfg = ExperimentConfig::new(ExperimentKind::LossAblation);
    cfg.train.lambda = Lambda::Finite(0.03);
    let ExperimentOutcome::Sweep(sweep) = run_experiment(&cfg, out.as_ref(), RunOptions { workers: 0, force: true })? else {
        unreachable!()
    };
    for row in &sweep.summary {
        println!("{:<8} accuracy {:.4}", row.point, row.mean_accuracy);
    }
    Ok(())
}
