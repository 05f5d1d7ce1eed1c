//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any criterion fails.

use std::time::Instant;

use deepid2::analysis::compute_scatter;
use deepid2::convnet::{init_params, LayerSpec, NetworkConfig, NetworkParams, VerifParams};
use deepid2::dataset::{generate_dataset, Pair, SyntheticSpec};
use deepid2::experiment::{default_pool, run_pipeline, run_sweep, sweep_points, ExperimentConfig, ExperimentKind, SweepOutcome};
use deepid2::gradcheck;
use deepid2::jointbayes::{fit_em, EmConfig, IdentityGroupedFeatures, JointBayesModel};
use deepid2::pipeline::{exhaustive_best, l2_subset_accuracy, select_patches, CanonicalFrame, SelectionConfig};
use deepid2::supervision::{MarginState, VerifKind};
use deepid2::tensor::Matrix;
use deepid2::trainer::{assign_trainable, flatten_trainable, pair_gradients, pair_objective, Lambda, PairInput};
use nalgebra::{DMatrix, DVector};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const MID_LAMBDA: f64 = 0.03;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
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
        shift: 1,
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let mut base: NetworkParams = init_params(&net, 3, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Positive biases keep ReLUs away from their kinks.
    base.conv.for_each_tensor_mut(|name, t| {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.05..0.3));
        }
    });
    base.verif = VerifParams {
        margin: 3.0,
        scale: 1.4,
        shift: -0.2,
    };
    let x = flatten_trainable(&base);
    let params = x.len() - 2;
    let mut worst: f64 = 0.0;
    for lambda in [0.0, 0.05, 1.0] {
        for kind in VerifKind::ALL {
            for (a, b, same) in [(ds.identity(0)[0], ds.identity(0)[1], true), (ds.identity(1)[0], ds.identity(2)[2], false)] {
                let pair = PairInput::from_pair(&ds, Pair { a, b, same });
                let g = pair_gradients(&base, &net, pair, Lambda::Finite(lambda), kind).unwrap();
                let r = gradcheck::check(&x, &g.grads.flatten(), 1e-5, |v| {
                    let mut p = base.clone();
                    assign_trainable(&mut p, v).unwrap();
                    pair_objective(&p, &net, pair, Lambda::Finite(lambda), kind).unwrap()
                });
                worst = worst.max(r.max_rel_error);
            }
        }
    }
    outcome(
        worst <= 1e-4 && params <= 2000,
        format!("{params} parameters, worst relative error {worst:.2e} (tol 1e-4)"),
    )
}

// ---------------------------------------------------------------------------

fn base_config(kind: ExperimentKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(kind);
    cfg.seeds = SEEDS.to_vec();
    cfg.train.lambda = Lambda::Finite(MID_LAMBDA);
    cfg
}

fn lambda_sweep() -> SweepOutcome {
    let mut cfg = base_config(ExperimentKind::LambdaSweep);
    cfg.sweep.lambdas = vec![Lambda::Finite(0.0), Lambda::Finite(MID_LAMBDA), Lambda::Infinite];
    run_sweep(&cfg, &sweep_points(&cfg)).unwrap()
}

fn lambda_interior_optimum(sweep: &SweepOutcome) -> Outcome {
    let mid = sweep.mean_accuracy(&MID_LAMBDA.to_string()).unwrap();
    let zero = sweep.mean_accuracy("0").unwrap();
    let inf = sweep.mean_accuracy("inf").unwrap();
    outcome(
        mid - zero >= 0.02 && mid - inf >= 0.02,
        format!("mean accuracy λ=0 {zero:.4}, λ={MID_LAMBDA} {mid:.4}, λ=∞ {inf:.4} (need mid ≥ both + 0.02)"),
    )
}

fn ablation_ordering(sweep: &SweepOutcome) -> Outcome {
    let mut cfg = base_config(ExperimentKind::LossAblation);
    cfg.sweep.kinds = vec![VerifKind::L2Plus, VerifKind::L2Minus, VerifKind::None];
    let abl = run_sweep(&cfg, &sweep_points(&cfg)).unwrap();
    // The L2 point is the λ-sweep's midrange run: same data, seeds and config.
    let l2 = sweep.mean_accuracy(&MID_LAMBDA.to_string()).unwrap();
    let acc = |k: VerifKind| abl.mean_accuracy(&k.to_string()).unwrap();
    let (plus, minus, none) = (acc(VerifKind::L2Plus), acc(VerifKind::L2Minus), acc(VerifKind::None));
    outcome(
        l2 >= plus && (minus - none).abs() <= 0.01,
        format!("L2 {l2:.4}, L2+ {plus:.4}, L2- {minus:.4}, none {none:.4} (need L2 ≥ L2+, |L2- − none| ≤ 0.01)"),
    )
}

fn identity_trend() -> Outcome {
    let mut cfg = base_config(ExperimentKind::IdentitySweep);
    cfg.sweep.identities = vec![4, 8, 16, 32];
    let sw = run_sweep(&cfg, &sweep_points(&cfg)).unwrap();
    let accs: Vec<f64> = cfg.sweep.identities.iter().map(|k| sw.mean_accuracy(&k.to_string()).unwrap()).collect();
    let ok = accs.windows(2).all(|w| w[1] >= w[0] - 0.01);
    let shown: Vec<String> = cfg.sweep.identities.iter().zip(&accs).map(|(k, a)| format!("{k}:{a:.4}")).collect();
    outcome(ok, format!("mean accuracy by identity count {} (band 0.01)", shown.join(" ")))
}

fn spectrum_behavior(sweep: &SweepOutcome) -> Outcome {
    let mean = |point: &str, f: &dyn Fn(&deepid2::experiment::SpectrumStats) -> f64| {
        let s = sweep.stats(point);
        s.iter().map(|x| f(x)).sum::<f64>() / s.len() as f64
    };
    let mid = MID_LAMBDA.to_string();
    let tail0 = mean("0", &|s| s.intra_tail_mass);
    let tail_mid = mean(&mid, &|s| s.intra_tail_mass);
    let top0 = mean("0", &|s| s.inter_top_share);
    let top_mid = mean(&mid, &|s| s.inter_top_share);
    let reduction = 1.0 - tail_mid / tail0;
    outcome(
        reduction >= 0.2 && top_mid >= top0,
        format!(
            "intra tail mass λ=0 {tail0:.4} → {tail_mid:.4} ({:.1}% reduction, need ≥ 20%); inter top share {top0:.4} → {top_mid:.4}",
            100.0 * reduction
        ),
    )
}

// ---------------------------------------------------------------------------

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j))
}

fn gaussian_log_density(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance is positive definite");
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = x.dot(&chol.solve(x));
    -0.5 * (quad + logdet + x.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let a = Matrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    let mut m = a.matmul(&a.transpose()).unwrap();
    m.add_diag(rng.gen_range(0.1..1.0));
    m.symmetrize();
    m
}

fn joint_bayes_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.gen_range(1..6);
        let (s_mu, s_eps) = (random_spd(d, &mut rng), random_spd(d, &mut rng));
        let mean: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let model = JointBayesModel::from_covariances(mean.clone(), s_mu.clone(), s_eps.clone()).unwrap();
        let f1: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f2: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (mu, eps) = (to_na(&s_mu), to_na(&s_eps));
        let tot = &mu + &eps;
        let mut intra = DMatrix::zeros(2 * d, 2 * d);
        let mut extra = DMatrix::zeros(2 * d, 2 * d);
        for (blk, m) in [((0, 0), &tot), ((d, d), &tot), ((0, d), &mu), ((d, 0), &mu)] {
            intra.view_mut(blk, (d, d)).copy_from(m);
        }
        for blk in [(0, 0), (d, d)] {
            extra.view_mut(blk, (d, d)).copy_from(&tot);
        }
        let x = DVector::from_iterator(2 * d, f1.iter().chain(&f2).zip(mean.iter().chain(&mean)).map(|(v, m)| v - m));
        let oracle = gaussian_log_density(&x, &intra) - gaussian_log_density(&x, &extra);
        let score = model.score(&f1, &f2).unwrap();
        worst = worst.max((score - oracle).abs());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let groups = (0..200)
        .map(|_| {
            let mu: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            (0..5)
                .map(|_| {
                    mu.iter()
                        .map(|m| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            m + e
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let data = IdentityGroupedFeatures::new(groups).unwrap();
    let (m, _) = fit_em(&data, EmConfig::default()).unwrap();
    let eye = DMatrix::<f64>::identity(2, 2);
    let rel = |a: &Matrix| (to_na(a) - &eye).norm() / eye.norm();
    let (e_mu, e_eps) = (rel(m.s_mu()), rel(m.s_eps()));
    outcome(
        worst <= 1e-8 && e_mu <= 0.15 && e_eps <= 0.15,
        format!("max |score − oracle| {worst:.2e} (tol 1e-8); EM recovery error S_μ {e_mu:.3}, S_ε {e_eps:.3} (tol 0.15)"),
    )
}

// ---------------------------------------------------------------------------

fn margin_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for case in 0..1000 {
        let n = rng.gen_range(1..200);
        let mut state = MarginState::new(n, 1.0);
        // Coarse rounding on some buffers forces tied distances.
        let coarse = case % 3 == 0;
        for _ in 0..n {
            let same = rng.gen_bool(0.5);
            let mut d: f64 = if same { rng.gen_range(0.0..2.0) } else { rng.gen_range(0.5..3.0) };
            if coarse {
                d = (d * 4.0).round() / 4.0;
            }
            state.record(d, same);
        }
        let obs: Vec<(f64, bool)> = state.observations().copied().collect();
        let mut cands: Vec<f64> = obs.iter().map(|o| o.0).collect();
        cands.sort_by(f64::total_cmp);
        let mut scan = vec![cands[0] - 1.0, cands[cands.len() - 1] + 1.0];
        scan.extend(cands.iter().copied());
        scan.extend(cands.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        let best = scan
            .iter()
            .map(|&m| obs.iter().filter(|&&(d, s)| (d < m) != s).count())
            .min()
            .unwrap();
        let m = state.update_margin().unwrap();
        if state.errors_at(m) != best {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} of 1000 buffers above the exhaustive minimum"))
}

// ---------------------------------------------------------------------------

/// Feature blocks for a small patch pool: each patch mixes a shared
/// identity code, a patch-private identity code and noise, so patches
/// differ in both strength and redundancy.
fn selection_instance(seed: u64) -> (Vec<Vec<Vec<f64>>>, Vec<Pair>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ids, per, dim, pool) = (20, 6, 4, 5);
    let shared: Vec<Vec<f64>> = (0..ids).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let mut blocks = Vec::new();
    for _ in 0..pool {
        let (ws, wp, noise) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.5..1.5));
        let private: Vec<Vec<f64>> = (0..ids).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let mut block = Vec::new();
        for id in 0..ids {
            for _ in 0..per {
                block.push(
                    (0..dim)
                        .map(|k| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            ws * shared[id][k] + wp * private[id][k] + noise * e
                        })
                        .collect(),
                );
            }
        }
        blocks.push(block);
    }
    let mut pairs = Vec::new();
    for k in 0..600 {
        let a_id = rng.gen_range(0..ids);
        let a = a_id * per + rng.gen_range(0..per);
        let same = k % 2 == 0;
        let b = if same {
            let mut b = a;
            while b == a {
                b = a_id * per + rng.gen_range(0..per);
            }
            b
        } else {
            let others: Vec<usize> = (0..ids).filter(|&i| i != a_id).collect();
            others.choose(&mut rng).unwrap() * per + rng.gen_range(0..per)
        };
        pairs.push(Pair { a, b, same });
    }
    (blocks, pairs)
}

fn selection_optimality() -> Outcome {
    let mut worst_gap: f64 = 0.0;
    for seed in 0..10 {
        let (blocks, pairs) = selection_instance(seed);
        let eval = |s: &[usize]| l2_subset_accuracy(&blocks, s, &pairs);
        let greedy = select_patches(5, 3, &[], &SelectionConfig::default(), eval).unwrap();
        let (_, best) = exhaustive_best(5, 3, eval).unwrap();
        worst_gap = worst_gap.max(best - greedy.accuracy);
    }
    outcome(
        worst_gap <= 0.005,
        format!("largest gap to the exhaustive best ≤3-subset {:.2} points (tol 0.5)", 100.0 * worst_gap),
    )
}

// ---------------------------------------------------------------------------

fn scatter_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.gen_range(1..8);
        let n = rng.gen_range(2..60);
        let c = rng.gen_range(2..=n.min(8));
        let shift = rng.gen_range(-100.0..100.0);
        let features: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| shift + rng.gen_range(-3.0..3.0)).collect()).collect();
        // Every identity gets at least one sample.
        let mut labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { rng.gen_range(0..c) }).collect();
        labels.shuffle(&mut rng);
        let sp = compute_scatter(&features, &labels).unwrap();
        let xs = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = xs.row_mean();
        let centered = DMatrix::from_fn(n, d, |i, j| xs[(i, j)] - mean[j]);
        let total = centered.transpose() * &centered;
        let sum = to_na(&sp.inter) + to_na(&sp.intra);
        worst = worst.max((sum - &total).norm() / total.norm().max(f64::MIN_POSITIVE));
    }
    outcome(worst <= 1e-8, format!("max relative Frobenius error {worst:.2e} (tol 1e-8)"))
}

// ---------------------------------------------------------------------------

fn pipeline_end_to_end() -> Outcome {
    let mut cfg = ExperimentConfig::new(ExperimentKind::FullPipeline);
    cfg.synthetic.identities = 96;
    let frame = CanonicalFrame {
        height: cfg.synthetic.height,
        width: cfg.synthetic.width,
        landmarks: cfg.synthetic.landmark_template(),
    };
    let keep = ["global", "upper", "lower", "center-0.5"];
    cfg.pipeline.pool = default_pool(&frame).into_iter().filter(|p| keep.contains(&p.name.as_str())).collect();
    cfg.pipeline.budget = 1;
    cfg.pipeline.groups = 2;
    let out = run_pipeline(&cfg, 0).unwrap();
    let fused = out.fused_test_accuracy;
    let single = out.best_single_patch_accuracy();
    let chosen: Vec<&str> = out.groups.iter().map(|g| g.patches.as_str()).collect();
    outcome(
        fused >= 0.9 && fused > single,
        format!(
            "fused test accuracy {fused:.4} over groups [{}], best single patch {single:.4} (need ≥ 0.90 and > single)",
            chosen.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let suite_start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "criterion {id:>2} {} {name}: {} [{secs:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o, secs));
    };

    run(1, "gradient correctness", &mut gradient_correctness);
    let t = Instant::now();
    let sweep = lambda_sweep();
    let sweep_secs = t.elapsed().as_secs_f64();
    println!("(λ sweep: 9 training runs in {sweep_secs:.1}s, shared by criteria 2, 3 and 5)");
    run(2, "lambda interior optimum", &mut || lambda_interior_optimum(&sweep));
    run(3, "ablation ordering", &mut || ablation_ordering(&sweep));
    run(4, "identity-count trend", &mut identity_trend);
    run(5, "spectrum behavior", &mut || spectrum_behavior(&sweep));
    run(6, "joint bayesian exactness", &mut joint_bayes_exactness);
    run(7, "margin-update optimality", &mut margin_optimality);
    run(8, "selection optimality", &mut selection_optimality);
    run(9, "scatter identity", &mut scatter_identity);
    run(10, "pipeline end-to-end", &mut pipeline_end_to_end);

    let mut limits_ok = true;
    for (id, limit) in [(1, 60.0), (2, 900.0), (10, 1800.0)] {
        let secs = results.iter().find(|r| r.0 == id).map(|r| r.3).unwrap_or(0.0) + if id == 2 { sweep_secs } else { 0.0 };
        if secs > limit {
            println!("criterion {id:>2} FAIL runtime {secs:.1}s exceeds {limit:.0}s");
            limits_ok = false;
        }
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        suite_start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() || !limits_ok {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
