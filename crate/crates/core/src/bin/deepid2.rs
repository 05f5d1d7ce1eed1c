use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use deepid2::analysis::{compute_scatter, pca2_export, spectrum, verification_metrics, write_pca2_csv, write_spectrum_csv};
use deepid2::convnet::NetworkParams;
use deepid2::dataset::{generate_dataset, ingest_dataset, write_dataset, SyntheticSpec};
use deepid2::experiment::{
    prepare_output, prepare_split, run_experiment, with_workers, ExperimentConfig, ExperimentKind, ExperimentOutcome, RunOptions,
};
use deepid2::supervision::l2_distance;
use deepid2::trainer::{balanced_pairs, extract_features, train};
use deepid2::{Error, Result};

#[derive(Parser)]
#[command(name = "deepid2", version, about = "Joint identification-verification face features at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Replicate seed; replaces the `seeds` list of the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Worker threads (0 = one per core).
    #[arg(long, value_name = "N", default_value_t = 0)]
    workers: usize,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (config: synthetic spec TOML).
    Generate(Common),
    /// Validate an image directory with a manifest and copy it, densified,
    /// into --out.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        root: PathBuf,
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
    },
    /// Train one network (config: experiment TOML).
    Train(Common),
    /// Verification accuracy and ROC of a trained network on the
    /// validation identities.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
    /// Run a sweep or pipeline experiment (config: experiment TOML).
    Sweep(Common),
    /// Run the patch-selection pipeline (config: experiment TOML).
    Select(Common),
    /// Scatter spectra and 2-D PCA of a trained network's validation
    /// features.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
}

fn experiment_config(common: &Common, fallback: ExperimentKind) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(fallback),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<(deepid2::convnet::NetworkConfig, NetworkParams)> {
    NetworkParams::load(path).map_err(|e| Error::stage(format!("load model {}", path.display()), e))
}

#[derive(Serialize)]
struct Metrics {
    accuracy: f64,
    threshold: f64,
    auc: f64,
    pairs: usize,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let mut spec: SyntheticSpec = match &c.config {
                Some(p) => toml::from_str(&fs::read_to_string(p)?)?,
                None => SyntheticSpec::default(),
            };
            if let Some(s) = c.seed {
                spec.seed = s;
            }
            prepare_output(&c.out, c.force)?;
            let ds = generate_dataset(&spec).map_err(|e| Error::stage("generate", e))?;
            write_dataset(&ds, &c.out).map_err(|e| Error::stage("write dataset", e))?;
            fs::write(c.out.join("spec.toml"), toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?)?;
            println!("{} samples of {} identities in {}", ds.len(), ds.num_identities(), c.out.display());
        }
        Command::Ingest { common: c, root, manifest } => {
            let ds = ingest_dataset(&root, &manifest).map_err(|e| Error::stage("ingest", e))?;
            prepare_output(&c.out, c.force)?;
            write_dataset(&ds, &c.out).map_err(|e| Error::stage("write dataset", e))?;
            let shape = ds.image_shape();
            println!(
                "{} samples of {} identities, images {}x{}x{}",
                ds.len(),
                ds.num_identities(),
                shape[0],
                shape[1],
                shape[2]
            );
        }
        Command::Train(c) => {
            let cfg = experiment_config(&c, ExperimentKind::LambdaSweep)?;
            prepare_output(&c.out, c.force)?;
            let seed = cfg.seeds[0];
            let data = prepare_split(&cfg, seed).map_err(|e| Error::stage("data", e))?;
            let net = cfg.network_for(data.train.image_shape());
            let mut tc = cfg.train.clone();
            tc.seed = tc.seed.wrapping_add(seed);
            let out = with_workers(c.workers, || train(&data.train, &data.val, &net, &tc))?.map_err(|e| Error::stage("train", e))?;
            out.params.save(&net, c.out.join("network.dtc"))?;
            out.report.write_csv(&c.out.join("curve.csv"))?;
            fs::write(c.out.join("config.toml"), toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?)?;
            println!(
                "best validation accuracy {:.4} at epoch {}",
                out.report.best_val_accuracy, out.report.best_epoch
            );
        }
        Command::Evaluate { common: c, model } => {
            let cfg = experiment_config(&c, ExperimentKind::LambdaSweep)?;
            let (net, params) = load_model(&model)?;
            prepare_output(&c.out, c.force)?;
            let seed = cfg.seeds[0];
            let data = prepare_split(&cfg, seed).map_err(|e| Error::stage("data", e))?;
            let feats = with_workers(c.workers, || extract_features(&data.val, &params.conv, &net))?
                .map_err(|e| Error::stage("extract features", e))?;
            let pairs = balanced_pairs(&data.val, cfg.train.validation_pairs, seed)?;
            // Negated distance so that higher means "same".
            let scores: Vec<f64> = pairs.iter().map(|p| -l2_distance(&feats[p.a], &feats[p.b])).collect();
            let same: Vec<bool> = pairs.iter().map(|p| p.same).collect();
            let roc = verification_metrics(&scores, &same).map_err(|e| Error::stage("evaluate", e))?;
            roc.write_csv(&c.out.join("roc.csv"))?;
            let m = Metrics {
                accuracy: roc.accuracy,
                threshold: -roc.threshold,
                auc: roc.auc(),
                pairs: pairs.len(),
            };
            fs::write(c.out.join("metrics.json"), serde_json::to_string_pretty(&m)?)?;
            println!("accuracy {:.4}, AUC {:.4} on {} pairs", m.accuracy, m.auc, m.pairs);
        }
        Command::Sweep(c) => {
            let cfg = experiment_config(&c, ExperimentKind::LambdaSweep)?;
            let outcome = run_experiment(
                &cfg,
                &c.out,
                RunOptions {
                    workers: c.workers,
                    force: c.force,
                },
            )?;
            report(&outcome);
        }
        Command::Select(c) => {
            let mut cfg = experiment_config(&c, ExperimentKind::FullPipeline)?;
            if !matches!(cfg.kind, ExperimentKind::FullPipeline | ExperimentKind::PatchCurve) {
                return Err(Error::Config(format!("select needs a full_pipeline or patch_curve config, got {}", cfg.kind.as_str())));
            }
            cfg.kind = ExperimentKind::FullPipeline;
            let outcome = run_experiment(
                &cfg,
                &c.out,
                RunOptions {
                    workers: c.workers,
                    force: c.force,
                },
            )?;
            report(&outcome);
        }
        Command::Analyze { common: c, model } => {
            let cfg = experiment_config(&c, ExperimentKind::LambdaSweep)?;
            let (net, params) = load_model(&model)?;
            prepare_output(&c.out, c.force)?;
            let data = prepare_split(&cfg, cfg.seeds[0]).map_err(|e| Error::stage("data", e))?;
            let feats = with_workers(c.workers, || extract_features(&data.val, &params.conv, &net))?
                .map_err(|e| Error::stage("extract features", e))?;
            let labels = data.val.labels();
            let scatter = compute_scatter(&feats, &labels).map_err(|e| Error::stage("analyze", e))?;
            let sp = spectrum(&scatter)?;
            write_spectrum_csv(&c.out.join("spectrum.csv"), &[(model.display().to_string(), sp)])?;
            write_pca2_csv(&c.out.join("pca2.csv"), &pca2_export(&feats, &labels, cfg.pca2_identities)?)?;
            println!("wrote spectrum.csv and pca2.csv to {}", c.out.display());
        }
    }
    Ok(())
}

fn report(outcome: &ExperimentOutcome) {
    match outcome {
        ExperimentOutcome::Sweep(s) => {
            for r in &s.summary {
                println!("{:>10}  {:.4} ± {:.4}  ({} runs)", r.point, r.mean_accuracy, r.std_accuracy, r.runs);
            }
        }
        ExperimentOutcome::Pipeline(runs) => {
            for o in runs {
                println!(
                    "seed {}: fused accuracy {:.4}, best single patch {:.4}",
                    o.seed,
                    o.fused_test_accuracy,
                    o.best_single_patch_accuracy()
                );
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
