//! Experiment orchestration: λ and identity-count sweeps, loss ablation,
//! and the patch-ensemble verification pipeline, with CSV reports.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{compute_scatter, pca2_export, spectrum, tail_mass, top_share, write_pca2_csv, write_spectrum_csv, SpectrumReport};
use crate::convnet::NetworkConfig;
use crate::dataset::{generate_dataset, ingest_dataset, LabeledDataset, Pair, Sample, SyntheticSpec};
use crate::error::{Error, Result};
use crate::jointbayes::{fit_em, EmConfig, IdentityGroupedFeatures, JointBayesModel};
use crate::pipeline::{
    estimate_similarity, extract_patch, fit_fusion, fit_pca, l2_subset_accuracy, select_groups, Anchor, CanonicalFrame, FusionConfig,
    PatchNetwork, PatchSpec, Pca, SelectionConfig, SelectionState, SimilarityTransform,
};
use crate::supervision::VerifKind;
use crate::threshold::{best_threshold, errors_at, SameSide};
use crate::trainer::{balanced_pairs, extract_features, train, Lambda, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    LambdaSweep,
    IdentitySweep,
    LossAblation,
    PatchCurve,
    FullPipeline,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::LambdaSweep => "lambda_sweep",
            Self::IdentitySweep => "identity_sweep",
            Self::LossAblation => "loss_ablation",
            Self::PatchCurve => "patch_curve",
            Self::FullPipeline => "full_pipeline",
        }
    }
}

/// An ingested image directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub root: PathBuf,
    pub manifest: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lambdas: Vec<Lambda>,
    pub identities: Vec<usize>,
    pub kinds: Vec<VerifKind>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![Lambda::Finite(0.0), Lambda::Finite(0.03), Lambda::Infinite],
            identities: vec![4, 8, 16, 32],
            kinds: VerifKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Candidate patches; empty means the built-in pool for the image size.
    pub pool: Vec<PatchSpec>,
    pub budget: usize,
    pub groups: usize,
    /// Identities held out for patch selection, PCA, Joint Bayesian and
    /// fusion fitting.
    pub dev_identities: usize,
    /// Identities held out for the final accuracy.
    pub test_identities: usize,
    pub pca_dim: usize,
    /// Balanced pairs drawn from each of the dev and test identities.
    pub pairs: usize,
    pub selection: SelectionConfig,
    pub fusion: FusionConfig,
    pub em_iters: usize,
    pub em_tol: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pool: Vec::new(),
            budget: 5,
            groups: 3,
            dev_identities: 48,
            test_identities: 32,
            pca_dim: 16,
            pairs: 1000,
            selection: SelectionConfig::default(),
            fusion: FusionConfig::default(),
            em_iters: EmConfig::default().iters,
            em_tol: EmConfig::default().tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Replicate offsets added to both the data seed and the training seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Synthetic training identities come from this spec; used unless
    /// `dataset` is given.
    #[serde(default)]
    pub synthetic: SyntheticSpec,
    #[serde(default)]
    pub dataset: Option<DatasetPaths>,
    /// Identities held out for validation of the sweeps and for early
    /// stopping. For synthetic data they are generated in addition to
    /// `synthetic.identities`; for a directory they are the last ones.
    #[serde(default = "default_validation_identities")]
    pub validation_identities: usize,
    #[serde(default)]
    pub train: TrainConfig,
    /// Defaults to the desk-scale layout for the image size.
    #[serde(default)]
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    /// Identities in each 2-D PCA export.
    #[serde(default = "default_pca2_identities")]
    pub pca2_identities: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_validation_identities() -> usize {
    16
}

fn default_pca2_identities() -> usize {
    6
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        toml::from_str(&format!("kind = \"{}\"", kind.as_str())).expect("defaults deserialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        self.train.validate()?;
        self.synthetic.validate()?;
        match self.kind {
            ExperimentKind::LambdaSweep if self.sweep.lambdas.is_empty() => return bad("sweep.lambdas is empty"),
            ExperimentKind::IdentitySweep if self.sweep.identities.is_empty() => return bad("sweep.identities is empty"),
            ExperimentKind::LossAblation if self.sweep.kinds.is_empty() => return bad("sweep.kinds is empty"),
            _ => {}
        }
        if self.validation_identities < 2 {
            return bad("validation_identities must be at least 2");
        }
        if let Some(d) = &self.dataset {
            for p in [&d.root, &d.manifest] {
                if !p.exists() {
                    return Err(Error::Config(format!("{} does not exist", p.display())));
                }
            }
        }
        if matches!(self.kind, ExperimentKind::PatchCurve | ExperimentKind::FullPipeline) {
            let p = &self.pipeline;
            if p.budget == 0 || p.groups == 0 || p.pca_dim == 0 {
                return bad("pipeline budget, groups and pca_dim must be positive");
            }
            if p.dev_identities < 2 || p.test_identities < 2 {
                return bad("pipeline needs at least 2 dev and 2 test identities");
            }
        }
        Ok(())
    }

    /// The configured network, or the desk-scale layout, for `input`.
    pub fn network_for(&self, input: [usize; 3]) -> NetworkConfig {
        match &self.network {
            Some(n) => n.clone().with_input(input),
            None => NetworkConfig::desk(input[0]).with_input(input),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    pub force: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { workers: 0, force: false }
    }
}

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Runs `f` on a pool with `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Training and validation sets of one replicate.
pub struct SplitData {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
}

/// Builds the training/validation split for replicate `seed`.
pub fn prepare_split(cfg: &ExperimentConfig, seed: u64) -> Result<SplitData> {
    let all = match &cfg.dataset {
        Some(d) => ingest_dataset(&d.root, &d.manifest)?,
        None => {
            let mut spec = cfg.synthetic.clone();
            spec.identities += cfg.validation_identities;
            spec.seed = spec.seed.wrapping_add(seed);
            generate_dataset(&spec)?
        }
    };
    let n = all.num_identities();
    if n <= cfg.validation_identities + 1 {
        return Err(Error::InvalidArgument(format!(
            "{n} identities cannot leave {} for validation",
            cfg.validation_identities
        )));
    }
    let (train, val) = all.split_identities(n - cfg.validation_identities)?;
    Ok(SplitData { train, val })
}

/// One training run of a sweep.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub point: String,
    pub seed: u64,
    pub report: TrainReport,
    /// Validation features from the returned parameters.
    pub val_features: Vec<Vec<f64>>,
    pub val_labels: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRow {
    pub point: String,
    pub seed: u64,
    pub accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub zero_norm_skips: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub point: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumStats {
    pub point: String,
    pub seed: u64,
    /// Normalized intra-personal eigenvalue mass beyond the top 10% ranks.
    pub intra_tail_mass: f64,
    /// Largest inter-personal eigenvalue over the spectrum total.
    pub inter_top_share: f64,
}

/// Outcome of a sweep-type experiment.
#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
    pub spectra: Vec<(String, u64, SpectrumReport)>,
    pub spectrum_stats: Vec<SpectrumStats>,
}

impl SweepOutcome {
    pub fn mean_accuracy(&self, point: &str) -> Option<f64> {
        self.summary.iter().find(|r| r.point == point).map(|r| r.mean_accuracy)
    }

    pub fn stats(&self, point: &str) -> Vec<&SpectrumStats> {
        self.spectrum_stats.iter().filter(|s| s.point == point).collect()
    }
}

/// A sweep point: its label and how it changes the base training config.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub label: String,
    pub train: TrainConfig,
}

pub fn sweep_points(cfg: &ExperimentConfig) -> Vec<SweepPoint> {
    let base = &cfg.train;
    match cfg.kind {
        ExperimentKind::LambdaSweep => cfg
            .sweep
            .lambdas
            .iter()
            .map(|&l| SweepPoint {
                label: l.to_string(),
                train: TrainConfig { lambda: l, ..base.clone() },
            })
            .collect(),
        ExperimentKind::IdentitySweep => cfg
            .sweep
            .identities
            .iter()
            .map(|&k| SweepPoint {
                label: k.to_string(),
                train: TrainConfig {
                    identity_subset: Some(k),
                    ..base.clone()
                },
            })
            .collect(),
        ExperimentKind::LossAblation => cfg
            .sweep
            .kinds
            .iter()
            .map(|&v| SweepPoint {
                label: v.to_string(),
                train: TrainConfig { verif: v, ..base.clone() },
            })
            .collect(),
        _ => Vec::new(),
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Trains every (point, seed) combination, in parallel over jobs, and
/// collects accuracies and validation spectra.
pub fn run_sweep(cfg: &ExperimentConfig, points: &[SweepPoint]) -> Result<SweepOutcome> {
    cfg.validate()?;
    let splits: Vec<(u64, SplitData)> = cfg
        .seeds
        .par_iter()
        .map(|&s| prepare_split(cfg, s).map(|d| (s, d)).map_err(|e| Error::stage(format!("data seed={s}"), e)))
        .collect::<Result<_>>()?;
    let jobs: Vec<(&SweepPoint, u64, &SplitData)> = points
        .iter()
        .flat_map(|p| splits.iter().map(move |(s, d)| (p, *s, d)))
        .collect();
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(point, seed, data)| {
            let stage = format!("train {}={} seed={seed}", cfg.kind.as_str(), point.label);
            let run = || -> Result<RunResult> {
                let net = cfg.network_for(data.train.image_shape());
                let tc = TrainConfig {
                    seed: point.train.seed.wrapping_add(seed),
                    ..point.train.clone()
                };
                let out = train(&data.train, &data.val, &net, &tc)?;
                log::info!("{stage}: accuracy {:.4}", out.report.best_val_accuracy);
                Ok(RunResult {
                    point: point.label.clone(),
                    seed,
                    val_features: extract_features(&data.val, &out.params.conv, &net)?,
                    val_labels: data.val.labels(),
                    report: out.report,
                })
            };
            run().map_err(|e| Error::stage(stage.clone(), e))
        })
        .collect::<Result<_>>()?;

    let summary = points
        .iter()
        .map(|p| {
            let accs: Vec<f64> = runs.iter().filter(|r| r.point == p.label).map(|r| r.report.best_val_accuracy).collect();
            let (m, s) = mean_std(&accs);
            SummaryRow {
                point: p.label.clone(),
                mean_accuracy: m,
                std_accuracy: s,
                runs: accs.len(),
            }
        })
        .collect();
    let mut spectra = Vec::new();
    let mut spectrum_stats = Vec::new();
    for r in &runs {
        let scatter = compute_scatter(&r.val_features, &r.val_labels).map_err(|e| Error::stage("analysis", e))?;
        let sp = spectrum(&scatter).map_err(|e| Error::stage("analysis", e))?;
        spectrum_stats.push(SpectrumStats {
            point: r.point.clone(),
            seed: r.seed,
            intra_tail_mass: tail_mass(&sp.intra, 0.1),
            inter_top_share: top_share(&sp.inter),
        });
        spectra.push((r.point.clone(), r.seed, sp));
    }
    Ok(SweepOutcome {
        runs,
        summary,
        spectra,
        spectrum_stats,
    })
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CurveRow {
    seed: u64,
    epoch: usize,
    ident_loss: f64,
    verif_loss: f64,
    val_accuracy: f64,
    margin: f64,
}

fn file_label(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

/// Writes `point_<label>.csv` training curves, `runs.csv`, `summary.csv`,
/// `spectrum.csv`, `spectrum_summary.csv` and, for the first seed,
/// `pca2_<label>.csv`.
pub fn write_sweep_reports(out: &Path, cfg: &ExperimentConfig, outcome: &SweepOutcome) -> Result<()> {
    let mut by_point: BTreeMap<&str, Vec<&RunResult>> = BTreeMap::new();
    for r in &outcome.runs {
        by_point.entry(&r.point).or_default().push(r);
    }
    for (point, runs) in &by_point {
        let rows: Vec<CurveRow> = runs
            .iter()
            .flat_map(|r| r.report.records.iter().map(move |rec| CurveRow {
                seed: r.seed,
                epoch: rec.epoch,
                ident_loss: rec.ident_loss,
                verif_loss: rec.verif_loss,
                val_accuracy: rec.val_accuracy,
                margin: rec.margin,
            }))
            .collect();
        write_rows(&out.join(format!("point_{}.csv", file_label(point))), rows)?;
        if let Some(first) = runs.iter().find(|r| r.seed == cfg.seeds[0]) {
            let pca = pca2_export(&first.val_features, &first.val_labels, cfg.pca2_identities)?;
            write_pca2_csv(&out.join(format!("pca2_{}.csv", file_label(point))), &pca)?;
        }
    }
    write_rows(
        &out.join("runs.csv"),
        outcome.runs.iter().map(|r| RunRow {
            point: r.point.clone(),
            seed: r.seed,
            accuracy: r.report.best_val_accuracy,
            best_epoch: r.report.best_epoch,
            epochs_run: r.report.records.len(),
            zero_norm_skips: r.report.zero_norm_skips,
        }),
    )?;
    write_rows(&out.join("summary.csv"), &outcome.summary)?;
    let labeled: Vec<(String, SpectrumReport)> = outcome
        .spectra
        .iter()
        .map(|(p, s, r)| (format!("{p}/{s}"), r.clone()))
        .collect();
    write_spectrum_csv(&out.join("spectrum.csv"), &labeled)?;
    write_rows(&out.join("spectrum_summary.csv"), &outcome.spectrum_stats)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Patch-ensemble pipeline

/// Twelve patches over a face with the five-point landmark layout of the
/// synthetic generator: two global scales, one crop per landmark, four half
/// faces and a tight center crop. Every patch is resampled to the full
/// image size.
pub fn default_pool(frame: &CanonicalFrame) -> Vec<PatchSpec> {
    let (w, h) = (frame.width as f64, frame.height as f64);
    let base = PatchSpec::full_frame("global", frame);
    let mut pool = vec![
        base.clone(),
        PatchSpec {
            name: "global-0.75".into(),
            network: "global-0.75".into(),
            scale: 0.75,
            ..base.clone()
        },
    ];
    let names = ["left-eye", "right-eye", "nose", "mouth-left", "mouth-right"];
    for (i, name) in names.iter().enumerate().take(frame.landmarks.len()) {
        pool.push(PatchSpec {
            name: (*name).into(),
            network: (*name).into(),
            anchor: Anchor::Landmark(i),
            extent: [w * 0.5, h * 0.5],
            ..base.clone()
        });
    }
    for (name, offset, extent) in [
        ("upper", [0.0, -h * 0.25], [w, h * 0.5]),
        ("lower", [0.0, h * 0.25], [w, h * 0.5]),
        ("left", [-w * 0.25, 0.0], [w * 0.5, h]),
        ("right", [w * 0.25, 0.0], [w * 0.5, h]),
    ] {
        pool.push(PatchSpec {
            name: name.into(),
            network: name.into(),
            offset,
            extent,
            ..base.clone()
        });
    }
    pool.push(PatchSpec {
        name: "center-0.5".into(),
        network: "center-0.5".into(),
        scale: 0.5,
        ..base
    });
    pool
}

/// Verification accuracy of `scores` (higher = same) at `threshold`.
fn accuracy_at(scores: &[f64], same: &[bool], threshold: f64) -> f64 {
    1.0 - errors_at(scores, same, SameSide::Above, threshold) as f64 / scores.len() as f64
}

/// PCA plus Joint Bayesian model for one set of concatenated features.
pub struct GroupModel {
    pub pca: Pca,
    pub joint_bayes: JointBayesModel,
}

impl GroupModel {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], pca_dim: usize, em: EmConfig) -> Result<Self> {
        let dim = pca_dim.min(features[0].len()).min(features.len() - 1);
        let pca = fit_pca(features, dim)?;
        let projected: Vec<Vec<f64>> = features.iter().map(|f| pca.project(f)).collect::<Result<_>>()?;
        let groups = IdentityGroupedFeatures::from_labeled(&projected, labels)?;
        let (joint_bayes, rep) = fit_em(&groups, em)?;
        log::debug!("joint bayes: {} EM iterations, converged {}", rep.iterations, rep.converged);
        Ok(Self { pca, joint_bayes })
    }

    pub fn scores(&self, features: &[Vec<f64>], pairs: &[Pair]) -> Result<Vec<f64>> {
        let projected: Vec<Vec<f64>> = features.iter().map(|f| self.pca.project(f)).collect::<Result<_>>()?;
        pairs.iter().map(|p| self.joint_bayes.score(&projected[p.a], &projected[p.b])).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PatchRow {
    pub seed: u64,
    pub patch: usize,
    pub name: String,
    pub network_accuracy: f64,
    pub dev_l2_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupRow {
    pub seed: u64,
    pub group: usize,
    pub patches: String,
    pub dev_l2_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CurveRowOut {
    pub seed: u64,
    pub patches: usize,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
struct SelectionRow {
    seed: u64,
    group: usize,
    step: usize,
    kind: crate::pipeline::StepKind,
    patch: usize,
    name: String,
    accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub seed: u64,
    pub pool: Vec<PatchSpec>,
    pub patches: Vec<PatchRow>,
    pub selections: Vec<SelectionState>,
    pub groups: Vec<GroupRow>,
    /// Test accuracy using the first `n` patches of the first group.
    pub curve: Vec<CurveRowOut>,
    pub fused_test_accuracy: f64,
}

impl PipelineOutcome {
    pub fn best_single_patch_accuracy(&self) -> f64 {
        self.patches.iter().map(|p| p.test_accuracy).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-split patch features: `blocks[p][i]` is the DeepID2 vector of
/// sample `i` under pool patch `p`.
struct SplitFeatures {
    blocks: Vec<Vec<Vec<f64>>>,
    labels: Vec<usize>,
}

fn concat(blocks: &[Vec<Vec<f64>>], subset: &[usize]) -> Vec<Vec<f64>> {
    let n = blocks[0].len();
    (0..n).map(|i| subset.iter().flat_map(|&p| blocks[p][i].iter().copied()).collect()).collect()
}

fn aligned_patches(ds: &LabeledDataset, spec: &PatchSpec, transforms: &[SimilarityTransform], frame: &CanonicalFrame) -> Result<LabeledDataset> {
    let samples: Vec<Sample> = ds
        .samples()
        .par_iter()
        .zip(transforms)
        .map(|(s, t)| {
            Ok(Sample {
                image: extract_patch(&s.image, spec, t, frame)?,
                landmarks: None,
                ..s.clone()
            })
        })
        .collect::<Result<_>>()?;
    LabeledDataset::new(samples, ds.label_names().to_vec())
}

fn alignments(ds: &LabeledDataset, frame: &CanonicalFrame) -> Result<Vec<SimilarityTransform>> {
    ds.samples()
        .iter()
        .map(|s| match &s.landmarks {
            Some(l) => Ok(estimate_similarity(l, &frame.landmarks)?.transform),
            None => {
                if frame.landmarks.is_empty() {
                    Ok(SimilarityTransform::identity())
                } else {
                    Err(Error::InvalidArgument(format!("sample `{}` has no landmarks", s.name)))
                }
            }
        })
        .collect()
}

/// Trains one network per pool patch, selects `groups` patch groups on dev
/// pairs, fits PCA and Joint Bayesian per group on dev identities, fuses
/// group scores, and reports test accuracy on unseen identities.
pub fn run_pipeline(cfg: &ExperimentConfig, seed: u64) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let pc = &cfg.pipeline;
    let (all, frame) = match &cfg.dataset {
        Some(d) => {
            let ds = ingest_dataset(&d.root, &d.manifest).map_err(|e| Error::stage("ingest", e))?;
            let [_, h, w] = ds.image_shape();
            let landmarks = mean_landmarks(&ds);
            (ds, CanonicalFrame { height: h, width: w, landmarks })
        }
        None => {
            let mut spec = cfg.synthetic.clone();
            spec.landmarks = true;
            spec.identities += cfg.validation_identities + pc.dev_identities + pc.test_identities;
            spec.seed = spec.seed.wrapping_add(seed);
            let frame = CanonicalFrame {
                height: spec.height,
                width: spec.width,
                landmarks: spec.landmark_template(),
            };
            (generate_dataset(&spec).map_err(|e| Error::stage("generate", e))?, frame)
        }
    };
    let n = all.num_identities();
    let held = cfg.validation_identities + pc.dev_identities + pc.test_identities;
    if n < held + 2 {
        return Err(Error::stage(
            "split",
            Error::InvalidArgument(format!("{n} identities cannot cover {held} held-out identities plus training")),
        ));
    }
    let (train_ds, rest) = all.split_identities(n - held)?;
    let (val_ds, rest) = rest.split_identities(cfg.validation_identities)?;
    let (dev_ds, test_ds) = rest.split_identities(pc.dev_identities)?;

    let pool = if pc.pool.is_empty() { default_pool(&frame) } else { pc.pool.clone() };
    let align = |ds: &LabeledDataset| alignments(ds, &frame).map_err(|e| Error::stage("align", e));
    let (t_train, t_val, t_dev, t_test) = (align(&train_ds)?, align(&val_ds)?, align(&dev_ds)?, align(&test_ds)?);

    // One network per distinct key, trained on the first spec using it.
    let mut keys: Vec<(&str, &PatchSpec)> = Vec::new();
    for s in &pool {
        if !keys.iter().any(|(k, _)| *k == s.network) {
            keys.push((&s.network, s));
        }
    }
    let trained: Vec<(String, PatchNetwork, f64)> = keys
        .par_iter()
        .enumerate()
        .map(|(i, (key, spec))| {
            let stage = format!("train network `{key}`");
            let run = || -> Result<(String, PatchNetwork, f64)> {
                let tr = aligned_patches(&train_ds, spec, &t_train, &frame)?;
                let va = aligned_patches(&val_ds, spec, &t_val, &frame)?;
                let net = cfg.network_for(tr.image_shape());
                let tc = TrainConfig {
                    seed: cfg.train.seed.wrapping_add(seed).wrapping_add(1000 * i as u64),
                    ..cfg.train.clone()
                };
                let out = train(&tr, &va, &net, &tc)?;
                log::info!("{stage}: validation accuracy {:.4}", out.report.best_val_accuracy);
                Ok((
                    key.to_string(),
                    PatchNetwork {
                        config: net,
                        params: out.params,
                    },
                    out.report.best_val_accuracy,
                ))
            };
            run().map_err(|e| Error::stage(stage.clone(), e))
        })
        .collect::<Result<_>>()?;
    let net_acc: HashMap<String, f64> = trained.iter().map(|(k, _, a)| (k.clone(), *a)).collect();
    let networks: HashMap<String, PatchNetwork> = trained.into_iter().map(|(k, n, _)| (k, n)).collect();

    let features = |ds: &LabeledDataset, ts: &[SimilarityTransform]| -> Result<SplitFeatures> {
        let blocks = pool
            .iter()
            .map(|spec| {
                let patches = aligned_patches(ds, spec, ts, &frame)?;
                let net = &networks[&spec.network];
                extract_features(&patches, &net.params.conv, &net.config)
            })
            .collect::<Result<_>>()?;
        Ok(SplitFeatures {
            blocks,
            labels: ds.labels(),
        })
    };
    let dev = features(&dev_ds, &t_dev).map_err(|e| Error::stage("extract dev features", e))?;
    let test = features(&test_ds, &t_test).map_err(|e| Error::stage("extract test features", e))?;
    let dev_pairs = balanced_pairs(&dev_ds, pc.pairs, seed ^ 0xde7)?;
    let test_pairs = balanced_pairs(&test_ds, pc.pairs, seed ^ 0x7e57)?;
    let dev_same: Vec<bool> = dev_pairs.iter().map(|p| p.same).collect();
    let test_same: Vec<bool> = test_pairs.iter().map(|p| p.same).collect();
    let em = EmConfig {
        iters: pc.em_iters,
        tol: pc.em_tol,
    };

    // Joint Bayesian on a patch subset: threshold from dev, accuracy on test.
    let evaluate_subset = |subset: &[usize]| -> Result<(GroupModel, Vec<f64>, Vec<f64>, f64)> {
        let model = GroupModel::fit(&concat(&dev.blocks, subset), &dev.labels, pc.pca_dim, em)?;
        let dev_scores = model.scores(&concat(&dev.blocks, subset), &dev_pairs)?;
        let test_scores = model.scores(&concat(&test.blocks, subset), &test_pairs)?;
        let t = best_threshold(&dev_scores, &dev_same, SameSide::Above)?.threshold;
        let acc = accuracy_at(&test_scores, &test_same, t);
        Ok((model, dev_scores, test_scores, acc))
    };

    let mut patches = Vec::with_capacity(pool.len());
    for (p, spec) in pool.iter().enumerate() {
        let (_, _, _, acc) = evaluate_subset(&[p]).map_err(|e| Error::stage(format!("joint bayes patch `{}`", spec.name), e))?;
        patches.push(PatchRow {
            seed,
            patch: p,
            name: spec.name.clone(),
            network_accuracy: net_acc[&spec.network],
            dev_l2_accuracy: l2_subset_accuracy(&dev.blocks, &[p], &dev_pairs)?,
            test_accuracy: acc,
        });
    }

    let selections = select_groups(pool.len(), pc.budget.min(pool.len()), pc.groups, &pc.selection, |s| {
        l2_subset_accuracy(&dev.blocks, s, &dev_pairs)
    })
    .map_err(|e| Error::stage("select", e))?;

    let mut groups = Vec::new();
    let mut dev_group_scores: Vec<Vec<f64>> = vec![Vec::new(); dev_pairs.len()];
    let mut test_group_scores: Vec<Vec<f64>> = vec![Vec::new(); test_pairs.len()];
    for (g, sel) in selections.iter().enumerate() {
        if sel.selected.is_empty() {
            continue;
        }
        let (_, ds, ts, acc) = evaluate_subset(&sel.selected).map_err(|e| Error::stage(format!("joint bayes group {g}"), e))?;
        for (row, s) in dev_group_scores.iter_mut().zip(ds) {
            row.push(s);
        }
        for (row, s) in test_group_scores.iter_mut().zip(ts) {
            row.push(s);
        }
        groups.push(GroupRow {
            seed,
            group: g,
            patches: sel.selected.iter().map(|&p| pool[p].name.as_str()).collect::<Vec<_>>().join("+"),
            dev_l2_accuracy: sel.accuracy,
            test_accuracy: acc,
        });
    }
    if groups.is_empty() {
        return Err(Error::stage("select", Error::InvalidArgument("no patch group was selected".into())));
    }

    let fusion = fit_fusion(&dev_group_scores, &dev_same, &pc.fusion).map_err(|e| Error::stage("fuse", e))?;
    let fused_dev: Vec<f64> = dev_group_scores.iter().map(|s| fusion.fuse(s)).collect::<Result<_>>()?;
    let fused_test: Vec<f64> = test_group_scores.iter().map(|s| fusion.fuse(s)).collect::<Result<_>>()?;
    let t = best_threshold(&fused_dev, &dev_same, SameSide::Above)?.threshold;
    let fused_test_accuracy = accuracy_at(&fused_test, &test_same, t);

    let mut curve = Vec::new();
    if let Some(first) = selections.first() {
        for k in 1..=first.selected.len() {
            let (_, _, _, acc) = evaluate_subset(&first.selected[..k]).map_err(|e| Error::stage("patch curve", e))?;
            curve.push(CurveRowOut {
                seed,
                patches: k,
                test_accuracy: acc,
            });
        }
    }

    Ok(PipelineOutcome {
        seed,
        pool,
        patches,
        selections,
        groups,
        curve,
        fused_test_accuracy,
    })
}

fn mean_landmarks(ds: &LabeledDataset) -> Vec<crate::dataset::Point> {
    let with: Vec<&Vec<crate::dataset::Point>> = ds.samples().iter().filter_map(|s| s.landmarks.as_ref()).collect();
    let Some(first) = with.first() else { return Vec::new() };
    let n = with.len() as f64;
    (0..first.len())
        .map(|k| {
            let (x, y) = with.iter().fold((0.0, 0.0), |(x, y), l| (x + l[k][0], y + l[k][1]));
            [x / n, y / n]
        })
        .collect()
}

#[derive(Serialize)]
struct PipelineSummaryRow {
    seed: u64,
    fused_test_accuracy: f64,
    best_single_patch_accuracy: f64,
    groups: usize,
}

pub fn write_pipeline_reports(out: &Path, outcomes: &[PipelineOutcome]) -> Result<()> {
    write_rows(&out.join("patches.csv"), outcomes.iter().flat_map(|o| &o.patches))?;
    write_rows(&out.join("groups.csv"), outcomes.iter().flat_map(|o| &o.groups))?;
    write_rows(&out.join("curve.csv"), outcomes.iter().flat_map(|o| &o.curve))?;
    let mut sel = Vec::new();
    for o in outcomes {
        for (g, s) in o.selections.iter().enumerate() {
            for (i, st) in s.steps.iter().enumerate() {
                sel.push(SelectionRow {
                    seed: o.seed,
                    group: g,
                    step: i,
                    kind: st.kind,
                    patch: st.patch,
                    name: o.pool[st.patch].name.clone(),
                    accuracy: st.accuracy,
                });
            }
        }
    }
    write_rows(&out.join("selection.csv"), &sel)?;
    write_rows(
        &out.join("summary.csv"),
        outcomes.iter().map(|o| PipelineSummaryRow {
            seed: o.seed,
            fused_test_accuracy: o.fused_test_accuracy,
            best_single_patch_accuracy: o.best_single_patch_accuracy(),
            groups: o.groups.len(),
        }),
    )?;
    let pool = outcomes.first().map(|o| o.pool.clone()).unwrap_or_default();
    #[derive(Serialize)]
    struct PoolFile {
        pool: Vec<PatchSpec>,
    }
    fs::write(out.join("pool.toml"), toml::to_string(&PoolFile { pool }).map_err(|e| Error::Config(e.to_string()))?)?;
    Ok(())
}

/// What a finished experiment produced.
#[derive(Clone, Debug)]
pub enum ExperimentOutcome {
    Sweep(SweepOutcome),
    Pipeline(Vec<PipelineOutcome>),
}

/// Runs `cfg` and writes its reports and a copy of the config into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, opts: RunOptions) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    prepare_output(out, opts.force)?;
    fs::write(out.join("config.toml"), toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?)?;
    with_workers(opts.workers, || -> Result<ExperimentOutcome> {
        match cfg.kind {
            ExperimentKind::PatchCurve | ExperimentKind::FullPipeline => {
                let outcomes: Vec<PipelineOutcome> = cfg.seeds.iter().map(|&s| run_pipeline(cfg, s)).collect::<Result<_>>()?;
                write_pipeline_reports(out, &outcomes).map_err(|e| Error::stage("report", e))?;
                Ok(ExperimentOutcome::Pipeline(outcomes))
            }
            _ => {
                let outcome = run_sweep(cfg, &sweep_points(cfg))?;
                write_sweep_reports(out, cfg, &outcome).map_err(|e| Error::stage("report", e))?;
                Ok(ExperimentOutcome::Sweep(outcome))
            }
        }
    })?
}
