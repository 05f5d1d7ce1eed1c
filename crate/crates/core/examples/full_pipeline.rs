//! Aligns faces, trains one network per patch, selects patch groups,
//! fits PCA and a Joint Bayesian model per group, fuses the group scores
//! and reports accuracy on unseen identities.
//!
//!     cargo run --release --example full_pipeline -- [out-dir] [pool-size]

use deepid2::experiment::{default_pool, run_experiment, ExperimentConfig, ExperimentKind, ExperimentOutcome, RunOptions};
use deepid2::pipeline::CanonicalFrame;

fn main() -> deepid2::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "out/full_pipeline".into());
    let pool_size: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);

    let mut cfg = ExperimentConfig::new(ExperimentKind::FullPipeline);
    cfg.synthetic.identities = 96;
    let frame = CanonicalFrame {
        height: cfg.synthetic.height,
        width: cfg.synthetic.width,
        landmarks: cfg.synthetic.landmark_template(),
    };
    let order = ["global", "upper", "lower", "center-0.5"];
    let mut pool = default_pool(&frame);
    pool.sort_by_key(|p| order.iter().position(|n| *n == p.name).unwrap_or(order.len()));
    cfg.pipeline.pool = pool.into_iter().take(pool_size).collect();
    cfg.pipeline.budget = 1;
    cfg.pipeline.groups = 2;

    let ExperimentOutcome::Pipeline(runs) = run_experiment(&cfg, out.as_ref(), RunOptions { workers: 0, force: true })? else {
        unreachable!()
    };
    let run = &runs[0];
    for p in &run.patches {
        println!("{:<12} network {:.3}  joint bayes {:.3}", p.name, p.network_accuracy, p.test_accuracy);
    }
    for g in &run.groups {
        println!("group {} [{}]: {:.3}", g.group, g.patches, g.test_accuracy);
    }
    println!("fused {:.4} vs best single patch {:.4}", run.fused_test_accuracy, run.best_single_patch_accuracy());
    Ok(())
}
