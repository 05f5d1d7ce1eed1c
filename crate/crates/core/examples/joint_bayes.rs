//! Fits a Joint Bayesian model by EM to features with planted identity and
//! within-identity covariances, then scores held-out pairs and reports the
//! ROC.
//!
//!     cargo run --release --example joint_bayes

use deepid2::analysis::verification_metrics;
use deepid2::jointbayes::{fit_em, EmConfig, IdentityGroupedFeatures};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn sample_identities(rng: &mut ChaCha8Rng, ids: usize, per: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    let identity = Normal::new(0.0, 1.0).unwrap();
    let within = Normal::new(0.0, 0.7).unwrap();
    (0..ids)
        .map(|_| {
            let mu: Vec<f64> = (0..d).map(|_| identity.sample(rng)).collect();
            (0..per).map(|_| mu.iter().map(|m| m + within.sample(rng)).collect()).collect()
        })
        .collect()
}

fn main() -> deepid2::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 6;
    let train = IdentityGroupedFeatures::new(sample_identities(&mut rng, 300, 4, d))?;
    let (model, report) = fit_em(&train, EmConfig::default())?;
    println!(
        "EM: {} iterations, converged {}, log-likelihood {:.2} → {:.2}",
        report.iterations,
        report.converged,
        report.objective[0],
        report.objective[report.objective.len() - 1]
    );
    println!("S_mu diagonal  {:?}", model.s_mu().diag().iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());
    println!("S_eps diagonal {:?}", model.s_eps().diag().iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());

    let test = sample_identities(&mut rng, 100, 2, d);
    let (mut scores, mut same) = (Vec::new(), Vec::new());
    for i in 0..test.len() {
        scores.push(model.score(&test[i][0], &test[i][1])?);
        same.push(true);
        let j = (i + rng.gen_range(1..test.len())) % test.len();
        scores.push(model.score(&test[i][0], &test[j][1])?);
        same.push(false);
    }
    let roc = verification_metrics(&scores, &same)?;
    println!("held-out accuracy {:.3} at log-ratio {:.3}, AUC {:.3}", roc.accuracy, roc.threshold, roc.auc());
    Ok(())
}
