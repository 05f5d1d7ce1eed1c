use super::*;
use crate::convnet::LayerSpec;
use crate::dataset::{generate_dataset, Sample, SyntheticSpec};
use crate::gradcheck;

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
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
    }
}

fn tiny_data(identities: usize, seed: u64) -> LabeledDataset {
    generate_dataset(&SyntheticSpec {
        identities,
        samples_per_identity: 4,
        height: 8,
        width: 7,
        shift: 1,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn jittered_params(net: &NetworkConfig, classes: usize, seed: u64) -> NetworkParams {
    let mut p = init_params(net, classes, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    p.conv.for_each_tensor_mut(|name, t| {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.05..0.3));
        }
    });
    p.verif = crate::convnet::VerifParams {
        margin: 3.0,
        scale: 1.7,
        shift: -0.3,
    };
    p
}

#[test]
fn lambda_parsing_and_serde() {
    assert_eq!("inf".parse::<Lambda>().unwrap(), Lambda::Infinite);
    assert_eq!("0.05".parse::<Lambda>().unwrap(), Lambda::Finite(0.05));
    assert!("-1".parse::<Lambda>().is_err());
    assert!("nan".parse::<Lambda>().is_err());
    #[derive(Deserialize)]
    struct W {
        l: Lambda,
    }
    assert_eq!(toml::from_str::<W>("l = 0").unwrap().l, Lambda::Finite(0.0));
    assert_eq!(toml::from_str::<W>("l = 0.5").unwrap().l, Lambda::Finite(0.5));
    assert_eq!(toml::from_str::<W>("l = \"inf\"").unwrap().l, Lambda::Infinite);
    assert!(toml::from_str::<W>("l = \"big\"").is_err());
    assert_eq!(Lambda::Infinite.to_string(), "inf");
    assert!(!Lambda::Finite(0.0).verif_active(VerifKind::L2));
    assert!(!Lambda::Infinite.verif_active(VerifKind::None));
    assert!(!Lambda::Infinite.ident_active());
}

#[test]
fn config_defaults_and_validation() {
    let c = TrainConfig::default();
    assert_eq!(c.lambda, Lambda::Finite(0.05));
    assert_eq!(c.batch_size, 16);
    assert_eq!(c.lr.rate(0), 0.05);
    assert_eq!(c.lr.rate(5), 0.025);
    assert_eq!(c.lr.rate(10), 0.0125);
    assert_eq!(c.patience, 5);
    c.validate().unwrap();
    assert!(TrainConfig { positive_fraction: 1.0, ..c.clone() }.validate().is_err());
    assert!(TrainConfig { lr: LrSchedule { initial: 0.0, ..c.lr }, ..c.clone() }.validate().is_err());
    assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    let parsed: TrainConfig = toml::from_str("lambda = \"inf\"\nverif = \"cosine\"\n[lr]\ninitial = 0.1").unwrap();
    assert_eq!(parsed.lambda, Lambda::Infinite);
    assert_eq!(parsed.verif, VerifKind::Cosine);
    assert_eq!(parsed.lr.initial, 0.1);
    assert_eq!(parsed.lr.decay, 0.5);
}

#[test]
fn sample_pair_extremes() {
    let ds = tiny_data(2, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let p = sample_pair(&ds, 1.0, &mut rng).unwrap().pair;
        assert!(p.same && p.a != p.b);
        assert_eq!(ds.sample(p.a).label, ds.sample(p.b).label);
        let q = sample_pair(&ds, 0.0, &mut rng).unwrap().pair;
        assert!(!q.same);
        assert_ne!(ds.sample(q.a).label, ds.sample(q.b).label);
    }
}

#[test]
fn sample_pair_fraction_within_three_sigma() {
    let ds = tiny_data(5, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 10_000;
    let mut pos = 0;
    for _ in 0..n {
        let p = sample_pair(&ds, 0.5, &mut rng).unwrap().pair;
        // Label convention: same iff the identities agree.
        assert_eq!(p.same, ds.sample(p.a).label == ds.sample(p.b).label);
        assert_eq!(
            PairInput::from_pair(&ds, p).label(),
            if p.same { PairLabel::Same } else { PairLabel::Different }
        );
        pos += usize::from(p.same);
    }
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((pos as f64 - n as f64 * 0.5).abs() < 3.0 * sigma, "{pos}");
}

#[test]
fn sample_pair_singletons_fall_back_to_negative() {
    let full = tiny_data(3, 0);
    let samples: Vec<Sample> = (0..3).map(|id| full.sample(full.identity(id)[0]).clone()).collect();
    let ds = LabeledDataset::new(samples, full.label_names().to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = sample_pair(&ds, 1.0, &mut rng).unwrap();
    assert!(d.fell_back && !d.pair.same);
    let one = full.select_identities(&[0]).unwrap();
    assert!(sample_pair(&one, 0.5, &mut rng).is_err());
}

#[test]
fn balanced_pairs_alternate() {
    let ds = tiny_data(4, 0);
    let pairs = balanced_pairs(&ds, 10, 3).unwrap();
    assert!(pairs.iter().enumerate().all(|(k, p)| p.same == (k % 2 == 0)));
    assert_eq!(pairs, balanced_pairs(&ds, 10, 3).unwrap());
}

fn pair_of(ds: &LabeledDataset, same: bool) -> PairInput<'_> {
    let a = ds.identity(0)[0];
    let b = if same { ds.identity(0)[1] } else { ds.identity(1)[0] };
    PairInput::from_pair(ds, Pair { a, b, same })
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let net = tiny_net();
    let ds = tiny_data(3, 4);
    let base = jittered_params(&net, 3, 9);
    for lambda in [Lambda::Finite(0.0), Lambda::Finite(0.05), Lambda::Finite(1.0), Lambda::Infinite] {
        for kind in VerifKind::ALL {
            for same in [true, false] {
                let pair = pair_of(&ds, same);
                let g = pair_gradients(&base, &net, pair, lambda, kind).unwrap();
                let x = flatten_trainable(&base);
                let r = gradcheck::check(&x, &g.grads.flatten(), 1e-5, |v| {
                    let mut p = base.clone();
                    assign_trainable(&mut p, v).unwrap();
                    pair_objective(&p, &net, pair, lambda, kind).unwrap()
                });
                assert!(r.passes(1e-4), "{lambda} {kind} same={same}: {r:?}");
            }
        }
    }
}

#[test]
fn lambda_zero_equals_pure_softmax_step() {
    let net = tiny_net();
    let ds = tiny_data(3, 4);
    let p = jittered_params(&net, 3, 1);
    let pair = pair_of(&ds, false);
    let a = pair_gradients(&p, &net, pair, Lambda::Finite(0.0), VerifKind::L2).unwrap();
    let b = pair_gradients(&p, &net, pair, Lambda::Finite(0.7), VerifKind::None).unwrap();
    // Independent composition: backprop of the two identification gradients.
    let (fi, ti) = convnet::forward(pair.x_i, &p.conv, &net).unwrap();
    let (fj, tj) = convnet::forward(pair.x_j, &p.conv, &net).unwrap();
    let oi = ident_loss(&fi, pair.l_i, &p.ident).unwrap();
    let oj = ident_loss(&fj, pair.l_j, &p.ident).unwrap();
    let (mut gc, _) = convnet::backward(&oi.df, &ti, &p.conv, &net).unwrap();
    gc.axpy(1.0, &convnet::backward(&oj.df, &tj, &p.conv, &net).unwrap().0).unwrap();
    assert_eq!(a.grads.conv, gc);
    assert_eq!(a.grads.flatten(), b.grads.flatten());
    assert_eq!(a.grads.verif_scale, 0.0);
    assert_eq!(a.losses.total, oi.loss + oj.loss);
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let net = tiny_net();
    let ds = tiny_data(3, 4);
    let cfg = TrainConfig::default();
    let mut st = TrainerState::new(jittered_params(&net, 3, 2), &cfg);
    let before = st.params.clone();
    let batch = [pair_of(&ds, true), pair_of(&ds, false)];
    train_step(&mut st, &net, &cfg, &batch, 0.0).unwrap();
    assert_eq!(st.params.conv, before.conv);
    assert_eq!(st.params.ident, before.ident);
}

#[test]
fn loss_decreases_on_fixed_batch_with_small_step() {
    let net = tiny_net();
    let ds = tiny_data(3, 4);
    let cfg = TrainConfig {
        lambda: Lambda::Finite(0.5),
        ..Default::default()
    };
    let mut st = TrainerState::new(jittered_params(&net, 3, 3), &cfg);
    let batch: Vec<PairInput> = (0..6).map(|k| pair_of(&ds, k % 2 == 0)).collect();
    let first = train_step(&mut st, &net, &cfg, &batch, 0.01).unwrap().total;
    let mut last = first;
    for _ in 0..5 {
        let l = train_step(&mut st, &net, &cfg, &batch, 0.01).unwrap().total;
        assert!(l <= last + 1e-12, "{l} > {last}");
        last = l;
    }
    assert!(last < first);
}

#[test]
fn divergence_is_reported() {
    let net = tiny_net();
    let ds = tiny_data(3, 4);
    let cfg = TrainConfig::default();
    let mut p = jittered_params(&net, 3, 3);
    p.conv.deepid.weight.data_mut().iter_mut().for_each(|w| *w = 1e200);
    let mut st = TrainerState::new(p, &cfg);
    let err = train_step(&mut st, &net, &cfg, &[pair_of(&ds, true)], 0.1);
    assert!(matches!(err, Err(Error::Diverged { step: 0, .. })), "{err:?}");
}

#[test]
fn margin_buffer_drives_the_margin() {
    let net = tiny_net();
    let ds = tiny_data(4, 4);
    let cfg = TrainConfig {
        margin_capacity: 20,
        margin_interval: 10,
        ..Default::default()
    };
    let mut st = TrainerState::new(jittered_params(&net, 4, 3), &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut batch_of = |n: usize| -> Vec<Pair> { (0..n).map(|_| sample_pair(&ds, 0.5, &mut rng).unwrap().pair).collect() };
    let b = batch_of(15);
    let inputs: Vec<PairInput> = b.iter().map(|&p| PairInput::from_pair(&ds, p)).collect();
    train_step(&mut st, &net, &cfg, &inputs, 0.0).unwrap();
    assert_eq!(st.params.verif.margin, cfg.initial_margin);
    let b = batch_of(5);
    let inputs: Vec<PairInput> = b.iter().map(|&p| PairInput::from_pair(&ds, p)).collect();
    train_step(&mut st, &net, &cfg, &inputs, 0.0).unwrap();
    assert!(st.margin.is_full());
    let m = st.params.verif.margin;
    let best = (0..400).map(|k| st.margin.errors_at(k as f64 * 0.05)).min().unwrap();
    assert!(st.margin.errors_at(m) <= best);
}

fn small_train_setup() -> (LabeledDataset, LabeledDataset, NetworkConfig) {
    let spec = SyntheticSpec {
        identities: 12,
        samples_per_identity: 6,
        height: 8,
        width: 7,
        shift: 1,
        seed: 11,
        ..Default::default()
    };
    let all = generate_dataset(&spec).unwrap();
    let (tr, va) = all.split_identities(8).unwrap();
    (tr, va, tiny_net())
}

#[test]
fn training_is_deterministic_and_none_matches_lambda_zero() {
    let (tr, va, net) = small_train_setup();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        validation_pairs: 40,
        lambda: Lambda::Finite(0.0),
        ..Default::default()
    };
    let a = train(&tr, &va, &net, &cfg).unwrap();
    let b = train(&tr, &va, &net, &cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.params, b.params);
    let none = TrainConfig {
        lambda: Lambda::Finite(0.3),
        verif: VerifKind::None,
        ..cfg.clone()
    };
    let c = train(&tr, &va, &net, &none).unwrap();
    assert_eq!(c.params, a.params);
    assert_eq!(c.report, a.report);
    assert_eq!(a.report.records.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.csv");
    a.report.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,ident_loss,verif_loss,val_accuracy,margin");
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn training_rejects_bad_inputs() {
    let (tr, va, net) = small_train_setup();
    let cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let wrong = net.clone().with_input([1, 9, 7]);
    assert!(train(&tr, &va, &wrong, &cfg).is_err());
    let one = tr.select_identities(&[0]).unwrap();
    assert!(train(&one, &va, &net, &cfg).is_err());
}

#[test]
fn separable_eight_identities_reach_high_validation_accuracy() {
    let spec = SyntheticSpec {
        identities: 16,
        samples_per_identity: 10,
        noise: 0.01,
        shift: 0,
        brightness: 0.02,
        nuisance_strength: 0.02,
        seed: 3,
        ..Default::default()
    };
    let all = generate_dataset(&spec).unwrap();
    let (tr, va) = all.split_identities(8).unwrap();
    let net = NetworkConfig::desk_sized(1, [6, 8, 12, 16], 32);
    let cfg = TrainConfig {
        epochs: 20,
        lambda: Lambda::Finite(0.05),
        validation_pairs: 400,
        ..Default::default()
    };
    let out = train(&tr, &va, &net, &cfg).unwrap();
    assert!(out.report.best_val_accuracy > 0.95, "{:?}", out.report);
}
