//! Trains one network with and one without the verification signal and
//! prints the normalized inter- and intra-personal eigenvalue spectra of
//! their validation features, plus a 2-D PCA export.
//!
//!     cargo run --release --example spectrum -- [out-dir]

use std::fs;
use std::path::PathBuf;

use deepid2::analysis::{compute_scatter, pca2_export, spectrum, tail_mass, top_share, write_pca2_csv};
use deepid2::experiment::{prepare_split, ExperimentConfig, ExperimentKind};
use deepid2::trainer::{extract_features, train, Lambda};

fn main() -> deepid2::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/spectrum".into()));
    fs::create_dir_all(&out)?;
    let cfg = ExperimentConfig::new(ExperimentKind::LambdaSweep);
    let data = prepare_split(&cfg, 0)?;
    let net = cfg.network_for(data.train.image_shape());
    for lambda in [Lambda::Finite(0.0), Lambda::Finite(0.03)] {
        let mut tc = cfg.train.clone();
        tc.lambda = lambda;
        let trained = train(&data.train, &data.val, &net, &tc)?;
        let feats = extract_features(&data.val, &trained.params.conv, &net)?;
        let labels = data.val.labels();
        let sp = spectrum(&compute_scatter(&feats, &labels)?)?;
        let head = |v: &[f64]| v.iter().take(8).map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
        println!("lambda {lambda}: accuracy {:.4}", trained.report.best_val_accuracy);
        println!("  inter {}  (top share {:.3})", head(&sp.inter), top_share(&sp.inter));
        println!("  intra {}  (tail mass {:.3})", head(&sp.intra), tail_mass(&sp.intra, 0.1));
        write_pca2_csv(&out.join(format!("pca2_{lambda}.csv")), &pca2_export(&feats, &labels, 6)?)?;
    }
    Ok(())
}
