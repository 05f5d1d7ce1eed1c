//! Joint identification-verification training.
//!
//! Each step samples pairs, runs both members through the network, adds
//! the identification gradients of both members to the λ-weighted
//! verification gradients at the features, backpropagates and takes one
//! SGD step on all parameters.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::convnet::{self, init_params, ConvParams, LayerParams, NetworkConfig, NetworkParams};
use crate::dataset::{LabeledDataset, Pair};
use crate::error::{Error, Result};
use crate::supervision::{
    ident_loss, margin_distance, verif_loss, MarginState, PairLabel, VerifKind, VerifOutput,
};
use crate::tensor::Tensor;
use crate::threshold::{best_threshold, SameSide};

/// Weight of the verification signal. `Infinite` trains on the
/// verification signal alone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lambda {
    Finite(f64),
    Infinite,
}

impl Lambda {
    pub fn ident_active(&self) -> bool {
        matches!(self, Lambda::Finite(_))
    }

    /// Multiplier applied to the verification loss and its gradients.
    pub fn verif_weight(&self) -> f64 {
        match *self {
            Lambda::Finite(l) => l,
            Lambda::Infinite => 1.0,
        }
    }

    /// Whether verification is computed at all for `kind`.
    pub fn verif_active(&self, kind: VerifKind) -> bool {
        kind != VerifKind::None && self.verif_weight() != 0.0
    }

    /// Value usable on a numeric axis; `Infinite` maps to `f64::INFINITY`.
    pub fn as_f64(&self) -> f64 {
        match *self {
            Lambda::Finite(l) => l,
            Lambda::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lambda::Finite(l) => write!(f, "{l}"),
            Lambda::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Lambda {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if ["inf", "infinity", "+inf", "∞"].iter().any(|k| t.eq_ignore_ascii_case(k)) {
            return Ok(Lambda::Infinite);
        }
        match t.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => Ok(Lambda::Finite(v)),
            _ => Err(Error::InvalidArgument(format!("lambda must be a non-negative number or `inf`, got `{s}`"))),
        }
    }
}

impl Serialize for Lambda {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Lambda::Finite(l) => s.serialize_f64(l),
            Lambda::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Lambda {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Text(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Num(v) => Lambda::from_str(&v.to_string()),
            Raw::Int(v) => Lambda::from_str(&v.to_string()),
            Raw::Text(t) => Lambda::from_str(&t),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// Step decay: `initial · decay^(epoch / interval)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    #[serde(default = "default_lr")]
    pub initial: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_decay_interval")]
    pub interval: usize,
}

fn default_lr() -> f64 {
    0.05
}
fn default_decay() -> f64 {
    0.5
}
fn default_decay_interval() -> usize {
    5
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: default_lr(),
            decay: default_decay(),
            interval: default_decay_interval(),
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        self.initial * self.decay.powi((epoch / self.interval.max(1)) as i32)
    }
}

fn default_lambda() -> Lambda {
    Lambda::Finite(0.05)
}
fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    16
}
fn default_positive_fraction() -> f64 {
    0.5
}
fn default_verif() -> VerifKind {
    VerifKind::L2
}
fn default_patience() -> usize {
    5
}
fn default_margin_capacity() -> usize {
    crate::supervision::DEFAULT_MARGIN_CAPACITY
}
fn default_margin_interval() -> usize {
    100
}
fn default_validation_pairs() -> usize {
    1000
}
fn default_initial_margin() -> f64 {
    crate::supervision::INITIAL_MARGIN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lambda")]
    pub lambda: Lambda,
    #[serde(default)]
    pub lr: LrSchedule,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Pairs per SGD step; gradients are averaged over the batch.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Pairs drawn per epoch; defaults to the training-set size.
    #[serde(default)]
    pub pairs_per_epoch: Option<usize>,
    #[serde(default = "default_positive_fraction")]
    pub positive_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_verif")]
    pub verif: VerifKind,
    /// Train on only the first k identities.
    #[serde(default)]
    pub identity_subset: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_margin_capacity")]
    pub margin_capacity: usize,
    /// Training pairs between margin updates.
    #[serde(default = "default_margin_interval")]
    pub margin_interval: usize,
    #[serde(default = "default_initial_margin")]
    pub initial_margin: f64,
    /// Balanced validation pairs drawn from the validation set.
    #[serde(default = "default_validation_pairs")]
    pub validation_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train config: {m}")));
        if let Lambda::Finite(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("lambda {l} must be finite and non-negative"));
            }
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad(format!("positive_fraction {} must lie in (0, 1)", self.positive_fraction));
        }
        if !(self.lr.initial > 0.0 && self.lr.initial.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr.initial));
        }
        if !(self.lr.decay > 0.0 && self.lr.decay.is_finite()) {
            return bad(format!("learning-rate decay {} must be positive", self.lr.decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.margin_capacity == 0 || self.margin_interval == 0 {
            return bad("margin_capacity and margin_interval must be positive".into());
        }
        if !(self.initial_margin >= 0.0 && self.initial_margin.is_finite()) {
            return bad("initial_margin must be non-negative".into());
        }
        if self.validation_pairs < 2 {
            return bad("validation_pairs must be at least 2".into());
        }
        if self.identity_subset == Some(0) {
            return bad("identity_subset must be positive".into());
        }
        Ok(())
    }
}

/// Result of [`sample_pair`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairDraw {
    pub pair: Pair,
    /// A positive pair was requested but every identity is a singleton.
    pub fell_back: bool,
}

/// Draws a same-identity pair with probability `positive_fraction`,
/// otherwise a pair from two distinct identities chosen uniformly.
pub fn sample_pair(ds: &LabeledDataset, positive_fraction: f64, rng: &mut impl Rng) -> Result<PairDraw> {
    let n = ds.num_identities();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("pair sampling needs at least 2 identities, have {n}")));
    }
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(Error::InvalidArgument(format!("positive fraction {positive_fraction} outside [0, 1]")));
    }
    let mut fell_back = false;
    if rng.gen_bool(positive_fraction) {
        let multi: Vec<usize> = (0..n).filter(|&id| ds.identity(id).len() >= 2).collect();
        if multi.is_empty() {
            fell_back = true;
        } else {
            let id = multi[rng.gen_range(0..multi.len())];
            let members = ds.identity(id);
            let mut picked = members.choose_multiple(rng, 2);
            let a = *picked.next().expect("two members");
            let b = *picked.next().expect("two members");
            return Ok(PairDraw {
                pair: Pair { a, b, same: true },
                fell_back,
            });
        }
    }
    let i = rng.gen_range(0..n);
    let mut j = rng.gen_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    let a = *ds.identity(i).choose(rng).expect("non-empty identity");
    let b = *ds.identity(j).choose(rng).expect("non-empty identity");
    Ok(PairDraw {
        pair: Pair { a, b, same: false },
        fell_back,
    })
}

/// `count` pairs alternating positive and negative, deterministic per seed.
pub fn balanced_pairs(ds: &LabeledDataset, count: usize, seed: u64) -> Result<Vec<Pair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let fraction = if k % 2 == 0 { 1.0 } else { 0.0 };
            sample_pair(ds, fraction, &mut rng).map(|d| d.pair)
        })
        .collect()
}

/// One labeled training pair.
#[derive(Clone, Copy, Debug)]
pub struct PairInput<'a> {
    pub x_i: &'a Tensor,
    pub l_i: usize,
    pub x_j: &'a Tensor,
    pub l_j: usize,
}

impl<'a> PairInput<'a> {
    pub fn from_pair(ds: &'a LabeledDataset, p: Pair) -> Self {
        let (a, b) = (ds.sample(p.a), ds.sample(p.b));
        Self {
            x_i: &a.image,
            l_i: a.label,
            x_j: &b.image,
            l_j: b.label,
        }
    }

    pub fn label(&self) -> PairLabel {
        PairLabel::from_identities(self.l_i, self.l_j)
    }
}

/// Gradients of the pair objective with respect to every trainable value.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub conv: ConvParams,
    pub ident: LayerParams,
    pub verif_scale: f64,
    pub verif_shift: f64,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            conv: params.conv.zeros_like(),
            ident: params.ident.zeros_like(),
            verif_scale: 0.0,
            verif_shift: 0.0,
        }
    }

    fn add(&mut self, other: &Gradients) -> Result<()> {
        self.conv.axpy(1.0, &other.conv)?;
        self.ident.weight.axpy(1.0, &other.ident.weight)?;
        self.ident.bias.axpy(1.0, &other.ident.bias)?;
        self.verif_scale += other.verif_scale;
        self.verif_shift += other.verif_shift;
        Ok(())
    }

    fn scale(&mut self, alpha: f64) {
        self.conv.scale(alpha);
        self.ident.weight.scale(alpha);
        self.ident.bias.scale(alpha);
        self.verif_scale *= alpha;
        self.verif_shift *= alpha;
    }

    /// Every value in the order of [`flatten_trainable`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.conv.flatten();
        v.extend_from_slice(self.ident.weight.data());
        v.extend_from_slice(self.ident.bias.data());
        v.push(self.verif_scale);
        v.push(self.verif_shift);
        v
    }

    fn first_non_finite(&self) -> Option<String> {
        if let Some(name) = self.conv.first_non_finite() {
            return Some(name);
        }
        if self.ident.weight.first_non_finite().is_some() || self.ident.bias.first_non_finite().is_some() {
            return Some("ident".into());
        }
        if !(self.verif_scale.is_finite() && self.verif_shift.is_finite()) {
            return Some("verif".into());
        }
        None
    }
}

/// All trainable values: θ_c, θ_id, then the cosine scale and shift.
pub fn flatten_trainable(params: &NetworkParams) -> Vec<f64> {
    let mut v = params.conv.flatten();
    v.extend_from_slice(params.ident.weight.data());
    v.extend_from_slice(params.ident.bias.data());
    v.push(params.verif.scale);
    v.push(params.verif.shift);
    v
}

/// Inverse of [`flatten_trainable`].
pub fn assign_trainable(params: &mut NetworkParams, values: &[f64]) -> Result<()> {
    let nc = params.conv.num_values();
    let nw = params.ident.weight.len();
    let nb = params.ident.bias.len();
    if values.len() != nc + nw + nb + 2 {
        return Err(Error::Shape {
            op: "assign_trainable",
            left: vec![values.len()],
            right: vec![nc + nw + nb + 2],
        });
    }
    params.conv.assign_flat(&values[..nc])?;
    params.ident.weight.data_mut().copy_from_slice(&values[nc..nc + nw]);
    params.ident.bias.data_mut().copy_from_slice(&values[nc + nw..nc + nw + nb]);
    params.verif.scale = values[nc + nw + nb];
    params.verif.shift = values[nc + nw + nb + 1];
    Ok(())
}

/// Losses of one pair or the mean over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    /// Identification loss summed over both pair members.
    pub ident: f64,
    /// Unweighted verification loss.
    pub verif: f64,
    pub total: f64,
    /// Pairs whose cosine loss was skipped because a feature was zero.
    pub zero_norm_skips: usize,
}

/// Output of [`pair_gradients`].
#[derive(Clone, Debug)]
pub struct PairGradient {
    pub losses: StepLosses,
    pub grads: Gradients,
    /// Feature distance in the margin's metric, when verification is active.
    pub distance: Option<f64>,
}

fn pair_verif(kind: VerifKind, fi: &[f64], fj: &[f64], y: PairLabel, params: &NetworkParams) -> Result<Option<VerifOutput>> {
    match verif_loss(kind, fi, fj, y, &params.verif) {
        Ok(out) => Ok(Some(out)),
        Err(Error::ZeroNorm) => Ok(None),
        Err(e) => Err(e),
    }
}

/// `Ident(f_i) + Ident(f_j) + λ·Verif(f_i, f_j)`, or `Verif` alone when λ
/// is infinite. A cosine pair with a zero feature contributes no
/// verification term.
pub fn pair_objective(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    pair: PairInput<'_>,
    lambda: Lambda,
    kind: VerifKind,
) -> Result<f64> {
    let fi = convnet::extract(pair.x_i, &params.conv, cfg)?;
    let fj = convnet::extract(pair.x_j, &params.conv, cfg)?;
    let mut total = 0.0;
    if lambda.ident_active() {
        total += ident_loss(&fi, pair.l_i, &params.ident)?.loss;
        total += ident_loss(&fj, pair.l_j, &params.ident)?.loss;
    }
    if lambda.verif_active(kind) {
        if let Some(v) = pair_verif(kind, &fi, &fj, pair.label(), params)? {
            total += lambda.verif_weight() * v.loss;
        }
    }
    Ok(total)
}

/// Analytic gradient of [`pair_objective`].
pub fn pair_gradients(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    pair: PairInput<'_>,
    lambda: Lambda,
    kind: VerifKind,
) -> Result<PairGradient> {
    let (fi, ti) = convnet::forward(pair.x_i, &params.conv, cfg)?;
    let (fj, tj) = convnet::forward(pair.x_j, &params.conv, cfg)?;
    let d = fi.len();
    let mut grads = Gradients::zeros_like(params);
    let mut losses = StepLosses::default();
    let mut df_i = vec![0.0; d];
    let mut df_j = vec![0.0; d];

    if lambda.ident_active() {
        for (f, l, df) in [(&fi, pair.l_i, &mut df_i), (&fj, pair.l_j, &mut df_j)] {
            let out = ident_loss(f, l, &params.ident)?;
            losses.ident += out.loss;
            for (a, b) in df.iter_mut().zip(&out.df) {
                *a += b;
            }
            grads.ident.weight.axpy(1.0, &out.grad.weight)?;
            grads.ident.bias.axpy(1.0, &out.grad.bias)?;
        }
    }

    let mut distance = None;
    if lambda.verif_active(kind) {
        let w = lambda.verif_weight();
        distance = Some(margin_distance(kind, &fi, &fj));
        match pair_verif(kind, &fi, &fj, pair.label(), params)? {
            Some(v) => {
                losses.verif = v.loss;
                for k in 0..d {
                    df_i[k] += w * v.df_i[k];
                    df_j[k] += w * v.df_j[k];
                }
                grads.verif_scale = w * v.d_scale;
                grads.verif_shift = w * v.d_shift;
            }
            None => losses.zero_norm_skips = 1,
        }
    }
    losses.total = losses.ident + lambda.verif_weight() * losses.verif;

    let (gi, _) = convnet::backward(&df_i, &ti, &params.conv, cfg)?;
    let (gj, _) = convnet::backward(&df_j, &tj, &params.conv, cfg)?;
    grads.conv = gi;
    grads.conv.axpy(1.0, &gj)?;
    Ok(PairGradient { losses, grads, distance })
}

/// Mutable training state: parameters, margin buffer and counters.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub params: NetworkParams,
    pub margin: MarginState,
    margin_fitted: bool,
    pairs_seen: usize,
    pub steps: usize,
    pub zero_norm_skips: usize,
}

impl TrainerState {
    pub fn new(params: NetworkParams, cfg: &TrainConfig) -> Self {
        let mut params = params;
        params.verif.margin = cfg.initial_margin;
        Self {
            params,
            margin: MarginState::new(cfg.margin_capacity, cfg.initial_margin),
            margin_fitted: false,
            pairs_seen: 0,
            steps: 0,
            zero_norm_skips: 0,
        }
    }

    pub fn pairs_seen(&self) -> usize {
        self.pairs_seen
    }
}

/// One SGD step on a batch: averages the pair gradients, applies
/// `θ ← θ − η·∇θ` to every parameter at once, then feeds the pair
/// distances to the margin buffer.
pub fn train_step(
    state: &mut TrainerState,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    batch: &[PairInput<'_>],
    eta: f64,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let params = &state.params;
    let per_pair: Vec<PairGradient> = batch
        .par_iter()
        .map(|p| pair_gradients(params, net, *p, cfg.lambda, cfg.verif))
        .collect::<Result<_>>()?;

    let mut grads = Gradients::zeros_like(params);
    let mut mean = StepLosses::default();
    for g in &per_pair {
        grads.add(&g.grads)?;
        mean.ident += g.losses.ident;
        mean.verif += g.losses.verif;
        mean.total += g.losses.total;
        mean.zero_norm_skips += g.losses.zero_norm_skips;
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    mean.ident *= inv;
    mean.verif *= inv;
    mean.total *= inv;

    if !mean.total.is_finite() {
        return Err(Error::Diverged {
            step: state.steps,
            what: format!("loss is {} (ident {}, verif {})", mean.total, mean.ident, mean.verif),
        });
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Diverged {
            step: state.steps,
            what: format!("non-finite gradient in {name}"),
        });
    }

    // Build the updated parameters aside and swap them in whole.
    let mut next = state.params.clone();
    next.conv.axpy(-eta, &grads.conv)?;
    next.ident.weight.axpy(-eta, &grads.ident.weight)?;
    next.ident.bias.axpy(-eta, &grads.ident.bias)?;
    next.verif.scale -= eta * grads.verif_scale;
    next.verif.shift -= eta * grads.verif_shift;
    state.params = next;
    state.steps += 1;
    state.zero_norm_skips += mean.zero_norm_skips;

    for (g, p) in per_pair.iter().zip(batch) {
        state.pairs_seen += 1;
        if let (Some(d), true) = (g.distance, cfg.verif.uses_margin()) {
            state.margin.record(d, p.label().is_same());
            let due = !state.margin_fitted || state.pairs_seen % cfg.margin_interval == 0;
            if state.margin.is_full() && due {
                if let Some(m) = state.margin.update_margin() {
                    state.params.verif.margin = m;
                    state.margin_fitted = true;
                }
            }
        }
    }
    Ok(mean)
}

/// DeepID2 features of every sample, in dataset order.
pub fn extract_features(ds: &LabeledDataset, params: &ConvParams, net: &NetworkConfig) -> Result<Vec<Vec<f64>>> {
    ds.samples()
        .par_iter()
        .map(|s| convnet::extract(&s.image, params, net))
        .collect()
}

/// Verification accuracy of thresholded L2 feature distance at the
/// error-minimizing threshold.
pub fn l2_verification_accuracy(features: &[Vec<f64>], pairs: &[Pair]) -> Result<f64> {
    let d: Vec<f64> = pairs
        .iter()
        .map(|p| crate::supervision::l2_distance(&features[p.a], &features[p.b]))
        .collect();
    let same: Vec<bool> = pairs.iter().map(|p| p.same).collect();
    Ok(best_threshold(&d, &same, SameSide::Below)?.accuracy())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ident_loss: f64,
    pub verif_loss: f64,
    pub val_accuracy: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub zero_norm_skips: usize,
    pub positive_fallbacks: usize,
}

impl TrainReport {
    /// CSV with columns `epoch, ident_loss, verif_loss, val_accuracy, margin`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub report: TrainReport,
}

/// Trains from a fresh initialization and returns the parameters of the
/// epoch with the best validation accuracy.
pub fn train(ds: &LabeledDataset, val: &LabeledDataset, net: &NetworkConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset("training or validation set".into()));
    }
    let subset;
    let ds = match cfg.identity_subset {
        Some(k) if k < ds.num_identities() => {
            subset = ds.select_identities(&(0..k).collect::<Vec<_>>())?;
            &subset
        }
        _ => ds,
    };
    if ds.num_identities() < 2 {
        return Err(Error::InvalidArgument("training needs at least 2 identities".into()));
    }
    if ds.image_shape() != net.input || val.image_shape() != net.input {
        return Err(Error::Shape {
            op: "train input",
            left: ds.image_shape().to_vec(),
            right: net.input.to_vec(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_params(net, ds.num_identities(), cfg.seed)?;
    let val_pairs = balanced_pairs(val, cfg.validation_pairs, cfg.seed ^ 0x5eed_0f_7a11)?;
    let mut state = TrainerState::new(params, cfg);
    let pairs_per_epoch = cfg.pairs_per_epoch.unwrap_or(ds.len()).max(1);
    let steps = pairs_per_epoch.div_ceil(cfg.batch_size);

    let mut report = TrainReport::default();
    let mut best: Option<(f64, NetworkParams, usize)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let eta = cfg.lr.rate(epoch);
        let (mut ident, mut verif) = (0.0, 0.0);
        for s in 0..steps {
            let n = cfg.batch_size.min(pairs_per_epoch - s * cfg.batch_size);
            let mut batch = Vec::with_capacity(n);
            for _ in 0..n {
                let draw = sample_pair(ds, cfg.positive_fraction, &mut rng)?;
                report.positive_fallbacks += usize::from(draw.fell_back);
                batch.push(PairInput::from_pair(ds, draw.pair));
            }
            let l = train_step(&mut state, net, cfg, &batch, eta)?;
            ident += l.ident * n as f64;
            verif += l.verif * n as f64;
        }
        let feats = extract_features(val, &state.params.conv, net)?;
        let acc = l2_verification_accuracy(&feats, &val_pairs)?;
        report.records.push(EpochRecord {
            epoch,
            ident_loss: ident / pairs_per_epoch as f64,
            verif_loss: verif / pairs_per_epoch as f64,
            val_accuracy: acc,
            margin: state.params.verif.margin,
        });
        log::debug!("epoch {epoch}: ident {:.4} verif {:.4} val {acc:.4}", ident / pairs_per_epoch as f64, verif / pairs_per_epoch as f64);
        if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
            best = Some((acc, state.params.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (acc, params, epoch) = best.expect("at least one epoch");
    report.best_epoch = epoch;
    report.best_val_accuracy = acc;
    report.zero_norm_skips = state.zero_norm_skips;
    Ok(TrainOutcome { params, report })
}

#[cfg(test)]
mod tests;
