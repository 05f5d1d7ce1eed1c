//! Generates a synthetic face-like dataset, writes it as PGM files with a
//! manifest, ingests it back and compares inter- and intra-identity
//! pixel distances.
//!
//!     cargo run --release --example synthetic_data -- /tmp/faces

use std::path::PathBuf;

use deepid2::dataset::{generate_dataset, ingest_dataset, write_dataset, SyntheticSpec};
use deepid2::supervision::l2_distance;

fn main() -> deepid2::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("deepid2-faces"));
    let spec = SyntheticSpec {
        landmarks: true,
        ..Default::default()
    };
    let ds = generate_dataset(&spec)?;
    write_dataset(&ds, &dir)?;
    let back = ingest_dataset(&dir, &dir.join("manifest.tsv"))?;
    println!("{} samples, {} identities written to {}", back.len(), back.num_identities(), dir.display());

    let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0, 0.0, 0);
    let s = back.samples();
    for i in (0..s.len()).step_by(3) {
        for j in (i + 1..s.len()).step_by(7) {
            let d = l2_distance(s[i].image.data(), s[j].image.data());
            if s[i].label == s[j].label {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                ne += 1;
            }
        }
    }
    println!("mean pixel distance: same identity {:.3}, different {:.3}", intra / ni as f64, inter / ne as f64);
    Ok(())
}
