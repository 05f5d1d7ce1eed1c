//! Aligns a face to the canonical landmark template with a similarity
//! transform and cuts landmark-anchored patches from it.
//!
//!     cargo run --release --example alignment -- [out-dir]

use std::fs;
use std::path::PathBuf;

use deepid2::dataset::{generate_dataset, SyntheticSpec};
use deepid2::experiment::default_pool;
use deepid2::imageio::write_pnm;
use deepid2::pipeline::{estimate_similarity, extract_patch, CanonicalFrame};

fn main() -> deepid2::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/alignment".into()));
    fs::create_dir_all(&out)?;
    let spec = SyntheticSpec {
        identities: 1,
        samples_per_identity: 3,
        shift: 3,
        landmarks: true,
        ..Default::default()
    };
    let ds = generate_dataset(&spec)?;
    let frame = CanonicalFrame {
        height: spec.height,
        width: spec.width,
        landmarks: spec.landmark_template(),
    };
    let pool = default_pool(&frame);
    for s in ds.samples() {
        let lm = s.landmarks.as_ref().expect("generated with landmarks");
        let fit = estimate_similarity(lm, &frame.landmarks)?;
        let t = fit.transform;
        println!(
            "{}: scale {:.3}, angle {:.4} rad, translation ({:.2}, {:.2}), residual {:.2e}",
            s.name, t.scale, t.angle, t.translation[0], t.translation[1], fit.residual
        );
        for p in pool.iter().filter(|p| ["global", "left-eye", "mouth-right"].contains(&p.name.as_str())) {
            write_pnm(&out.join(format!("{}_{}.pgm", s.name, p.name)), &extract_patch(&s.image, p, &t, &frame)?)?;
        }
    }
    println!("patches written to {}", out.display());
    Ok(())
}
