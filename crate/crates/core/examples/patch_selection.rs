//! Greedy forward-backward patch selection against the exhaustive optimum
//! on a small pool of synthetic feature blocks with overlapping identity
//! information.
//!
//!     cargo run --release --example patch_selection

use deepid2::dataset::Pair;
use deepid2::pipeline::{exhaustive_best, l2_subset_accuracy, select_groups, select_patches, SelectionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> deepid2::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (ids, per, dim, pool) = (30, 5, 4, 8);
    let code = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..ids).map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect()).collect() };
    let shared = code(&mut rng);
    let mut blocks = Vec::new();
    for p in 0..pool {
        let own = code(&mut rng);
        let (ws, wo) = (0.3 + 0.1 * p as f64, rng.gen_range(0.0..0.8));
        let mut block = Vec::new();
        for id in 0..ids {
            for _ in 0..per {
                block.push(
                    (0..dim)
                        .map(|k| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            ws * shared[id][k] + wo * own[id][k] + e
                        })
                        .collect::<Vec<f64>>(),
                );
            }
        }
        blocks.push(block);
    }
    let pairs: Vec<Pair> = (0..800)
        .map(|k| {
            let a = rng.gen_range(0..ids * per);
            let b = if k % 2 == 0 {
                (a / per) * per + (a % per + rng.gen_range(1..per)) % per
            } else {
                ((a / per + rng.gen_range(1..ids)) % ids) * per + rng.gen_range(0..per)
            };
            Pair { a, b, same: k % 2 == 0 }
        })
        .collect();
    let eval = |s: &[usize]| l2_subset_accuracy(&blocks, s, &pairs);

    let state = select_patches(pool, 4, &[], &SelectionConfig::default(), eval).map_err(deepid2::Error::from)?;
    for step in &state.steps {
        println!("{:?} patch {} → accuracy {:.4}", step.kind, step.patch, step.accuracy);
    }
    let (best, acc) = exhaustive_best(pool, 4, eval)?;
    println!("greedy {:?} {:.4}; exhaustive {:?} {:.4}", state.selected, state.accuracy, best, acc);
    for (g, s) in select_groups(pool, 3, 2, &SelectionConfig::default(), eval)?.iter().enumerate() {
        println!("group {g}: {:?} accuracy {:.4}", s.selected, s.accuracy);
    }
    Ok(())
}
