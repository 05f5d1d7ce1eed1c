//! Finite-difference check of the joint identification-verification
//! gradient on a tiny network, for every verification loss.
//!
//!     cargo run --release --example gradient_check

use deepid2::convnet::{init_params, LayerSpec, NetworkConfig};
use deepid2::dataset::{generate_dataset, Pair, SyntheticSpec};
use deepid2::gradcheck;
use deepid2::supervision::VerifKind;
use deepid2::trainer::{assign_trainable, flatten_trainable, pair_gradients, pair_objective, Lambda, PairInput};

fn main() -> deepid2::Result<()> {
    let net = NetworkConfig {
        input: [1, 8, 7],
        layers: vec![
            LayerSpec::conv(1, 3, [3, 2]),
            LayerSpec::relu(3),
            LayerSpec::max_pool(3, [2, 2], 2),
            LayerSpec::conv(3, 4, [2, 2]),
            LayerSpec::relu(4),
        ],
        deepid_dim: 6,
        multi_scale: true,
        input_center: 0.5,
    };
    let ds = generate_dataset(&SyntheticSpec {
        identities: 3,
        samples_per_identity: 3,
        height: 8,
        width: 7,
        ..Default::default()
    })?;
    let mut params = init_params(&net, 3, 1)?;
    params.conv.for_each_tensor_mut(|name, t| {
        if name.ends_with("bias") {
            t.fill(0.1);
        }
    });
    let theta = flatten_trainable(&params);
    println!("{} trainable values", theta.len());

    let pair = PairInput::from_pair(&ds, Pair { a: ds.identity(0)[0], b: ds.identity(1)[0], same: false });
    for lambda in [Lambda::Finite(0.0), Lambda::Finite(0.05), Lambda::Finite(1.0), Lambda::Infinite] {
        for kind in VerifKind::ALL {
            let analytic = pair_gradients(&params, &net, pair, lambda, kind)?.grads.flatten();
            let report = gradcheck::check(&theta, &analytic, 1e-5, |v| {
                let mut p = params.clone();
                assign_trainable(&mut p, v).unwrap();
                pair_objective(&p, &net, pair, lambda, kind).unwrap()
            });
            println!("lambda {lambda:>4}  {kind:<8} max relative error {:.2e}", report.max_rel_error);
        }
    }
    Ok(())
}
