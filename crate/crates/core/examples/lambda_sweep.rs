//! Trains the desk network with identification only (λ = 0), the joint
//! signal, and verification only (λ = ∞), and reports validation
//! accuracy and variance spectra.
//!
//!     cargo run --release --example lambda_sweep -- [out-dir] [seeds]

use deepid2::experiment::{run_experiment, ExperimentConfig, ExperimentKind, ExperimentOutcome, RunOptions};

fn main() -> deepid2::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "out/lambda_sweep".into());
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);

    let mut cfg = ExperimentConfig::new(ExperimentKind::LambdaSweep);
    cfg.seeds = (0..seeds).collect();
    let ExperimentOutcome::Sweep(sweep) = run_experiment(&cfg, out.as_ref(), RunOptions { workers: 0, force: true })? else {
        unreachable!()
    };
    for row in &sweep.summary {
        println!("lambda {:>5}: accuracy {:.4}", row.point, row.mean_accuracy);
    }
    for s in &sweep.spectrum_stats {
        println!(
            "lambda {:>5} seed {}: intra tail mass {:.3}, inter top share {:.3}",
            s.point, s.seed, s.intra_tail_mass, s.inter_top_share
        );
    }
    Ok(())
}
