//! Supervisory signals: the softmax identification loss, the contrastive
//! verification losses (L2 with its positive-only and negative-only
//! restrictions, L1, cosine) and the adaptive contrastive margin.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::convnet::{LayerParams, VerifParams};
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};
use crate::threshold::{best_threshold, SameSide};

/// Which verification signal is active during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerifKind {
    #[serde(rename = "l2")]
    L2,
    /// L2 restricted to same-identity pairs.
    #[serde(rename = "l2plus")]
    L2Plus,
    /// L2 restricted to different-identity pairs.
    #[serde(rename = "l2minus")]
    L2Minus,
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "cosine")]
    Cosine,
    #[serde(rename = "none")]
    None,
}

impl VerifKind {
    pub const ALL: [VerifKind; 6] = [
        VerifKind::L2,
        VerifKind::L2Plus,
        VerifKind::L2Minus,
        VerifKind::L1,
        VerifKind::Cosine,
        VerifKind::None,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VerifKind::L2 => "l2",
            VerifKind::L2Plus => "l2plus",
            VerifKind::L2Minus => "l2minus",
            VerifKind::L1 => "l1",
            VerifKind::Cosine => "cosine",
            VerifKind::None => "none",
        }
    }

    /// Whether the loss has a contrastive margin that must be tracked.
    pub fn uses_margin(&self) -> bool {
        matches!(self, VerifKind::L2 | VerifKind::L2Minus | VerifKind::L1)
    }
}

impl fmt::Display for VerifKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VerifKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VerifKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown verification kind `{s}`")))
    }
}

/// `y_ij`: +1 when both samples share an identity, −1 otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairLabel {
    Same,
    Different,
}

impl PairLabel {
    pub fn from_identities(li: usize, lj: usize) -> Self {
        if li == lj {
            PairLabel::Same
        } else {
            PairLabel::Different
        }
    }

    pub fn sign(&self) -> f64 {
        match self {
            PairLabel::Same => 1.0,
            PairLabel::Different => -1.0,
        }
    }

    pub fn is_same(&self) -> bool {
        *self == PairLabel::Same
    }
}

#[derive(Clone, Debug)]
pub struct IdentOutput {
    pub loss: f64,
    pub df: Vec<f64>,
    /// Gradient for the softmax head, same layout as the head.
    pub grad: LayerParams,
}

/// Softmax cross-entropy `−log p̂_t` with logits `W f + b`.
pub fn ident_loss(f: &[f64], target: usize, head: &LayerParams) -> Result<IdentOutput> {
    let n = head.bias.len();
    if target >= n {
        return Err(Error::InvalidArgument(format!("target class {target} out of range 0..{n}")));
    }
    if head.weight.shape() != [n, f.len()] {
        return Err(Error::Shape {
            op: "ident_loss",
            left: head.weight.shape().to_vec(),
            right: vec![n, f.len()],
        });
    }
    let logits = head.affine(f);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[target];

    let mut delta: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    delta[target] -= 1.0;

    let d = f.len();
    let w = head.weight.data();
    let mut df = vec![0.0; d];
    let mut dw = vec![0.0; n * d];
    for (c, &g) in delta.iter().enumerate() {
        let row = &w[c * d..(c + 1) * d];
        for k in 0..d {
            df[k] += g * row[k];
            dw[c * d + k] = g * f[k];
        }
    }
    Ok(IdentOutput {
        loss: loss.max(0.0),
        df,
        grad: LayerParams {
            weight: Tensor::from_raw(vec![n, d], dw),
            bias: Tensor::from_raw(vec![n], delta),
        },
    })
}

/// Value and gradients of a verification loss.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifOutput {
    pub loss: f64,
    pub df_i: Vec<f64>,
    pub df_j: Vec<f64>,
    /// Gradient w.r.t. the cosine scale `w` (zero for the other kinds).
    pub d_scale: f64,
    /// Gradient w.r.t. the cosine shift `b` (zero for the other kinds).
    pub d_shift: f64,
}

impl VerifOutput {
    fn zero(dim: usize) -> Self {
        Self {
            loss: 0.0,
            df_i: vec![0.0; dim],
            df_j: vec![0.0; dim],
            d_scale: 0.0,
            d_shift: 0.0,
        }
    }
}

fn check_dims(fi: &[f64], fj: &[f64]) -> Result<()> {
    if fi.len() != fj.len() {
        return Err(Error::Shape {
            op: "verification loss",
            left: vec![fi.len()],
            right: vec![fj.len()],
        });
    }
    Ok(())
}

pub fn l2_distance(fi: &[f64], fj: &[f64]) -> f64 {
    fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

pub fn l1_distance(fi: &[f64], fj: &[f64]) -> f64 {
    fi.iter().zip(fj).map(|(a, b)| (a - b).abs()).sum()
}

/// Contrastive L2 loss: `½‖fi − fj‖²` for same pairs,
/// `½ max(0, m − ‖fi − fj‖)²` for different pairs.
pub fn verif_loss_l2(fi: &[f64], fj: &[f64], y: PairLabel, margin: f64) -> Result<VerifOutput> {
    check_dims(fi, fj)?;
    if !(margin >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative margin {margin}")));
    }
    let diff: Vec<f64> = fi.iter().zip(fj).map(|(a, b)| a - b).collect();
    let mut out = VerifOutput::zero(fi.len());
    match y {
        PairLabel::Same => {
            out.loss = 0.5 * dot(&diff, &diff);
            out.df_i = diff.clone();
        }
        PairLabel::Different => {
            let dist = dot(&diff, &diff).sqrt();
            if dist < margin {
                let gap = margin - dist;
                out.loss = 0.5 * gap * gap;
                if dist > 0.0 {
                    out.df_i = diff.iter().map(|d| -gap * d / dist).collect();
                }
            }
        }
    }
    out.df_j = out.df_i.iter().map(|g| -g).collect();
    Ok(out)
}

/// Contrastive L1 loss: `‖fi − fj‖₁` for same pairs,
/// `max(0, m − ‖fi − fj‖₁)` for different pairs; subgradient 0 at kinks.
pub fn verif_loss_l1(fi: &[f64], fj: &[f64], y: PairLabel, margin: f64) -> Result<VerifOutput> {
    check_dims(fi, fj)?;
    if !(margin >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative margin {margin}")));
    }
    let sign = |d: f64| {
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let diff: Vec<f64> = fi.iter().zip(fj).map(|(a, b)| a - b).collect();
    let dist: f64 = diff.iter().map(|d| d.abs()).sum();
    let mut out = VerifOutput::zero(fi.len());
    match y {
        PairLabel::Same => {
            out.loss = dist;
            out.df_i = diff.iter().map(|&d| sign(d)).collect();
        }
        PairLabel::Different => {
            if dist < margin {
                out.loss = margin - dist;
                out.df_i = diff.iter().map(|&d| -sign(d)).collect();
            }
        }
    }
    out.df_j = out.df_i.iter().map(|g| -g).collect();
    Ok(out)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cosine verification loss `½(t − σ(w·cos(fi, fj) + b))²`, with target
/// `t = 1` for same pairs and `t = 0` for different pairs.
pub fn verif_loss_cosine(fi: &[f64], fj: &[f64], y: PairLabel, scale: f64, shift: f64) -> Result<VerifOutput> {
    check_dims(fi, fj)?;
    let ni = dot(fi, fi).sqrt();
    let nj = dot(fj, fj).sqrt();
    if ni == 0.0 || nj == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let target = if y.is_same() { 1.0 } else { 0.0 };
    let cos = dot(fi, fj) / (ni * nj);
    let s = sigmoid(scale * cos + shift);
    let loss = 0.5 * (target - s) * (target - s);
    let dz = -(target - s) * s * (1.0 - s);
    let dcos = dz * scale;
    let df_i = fi
        .iter()
        .zip(fj)
        .map(|(&a, &b)| dcos * (b / (ni * nj) - cos * a / (ni * ni)))
        .collect();
    let df_j = fi
        .iter()
        .zip(fj)
        .map(|(&a, &b)| dcos * (a / (ni * nj) - cos * b / (nj * nj)))
        .collect();
    Ok(VerifOutput {
        loss,
        df_i,
        df_j,
        d_scale: dz * cos,
        d_shift: dz,
    })
}

/// Dispatches to the loss selected by `kind`. The restricted kinds
/// contribute nothing on the pairs they ignore.
pub fn verif_loss(kind: VerifKind, fi: &[f64], fj: &[f64], y: PairLabel, theta: &VerifParams) -> Result<VerifOutput> {
    check_dims(fi, fj)?;
    match (kind, y) {
        (VerifKind::None, _) | (VerifKind::L2Plus, PairLabel::Different) | (VerifKind::L2Minus, PairLabel::Same) => {
            Ok(VerifOutput::zero(fi.len()))
        }
        (VerifKind::L2 | VerifKind::L2Plus | VerifKind::L2Minus, _) => verif_loss_l2(fi, fj, y, theta.margin),
        (VerifKind::L1, _) => verif_loss_l1(fi, fj, y, theta.margin),
        (VerifKind::Cosine, _) => verif_loss_cosine(fi, fj, y, theta.scale, theta.shift),
    }
}

/// Distance in the metric the margin of `kind` is expressed in.
pub fn margin_distance(kind: VerifKind, fi: &[f64], fj: &[f64]) -> f64 {
    match kind {
        VerifKind::L1 => l1_distance(fi, fj),
        _ => l2_distance(fi, fj),
    }
}

/// Recent `(distance, same-identity)` observations used to re-fit the
/// contrastive margin.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginState {
    pub margin: f64,
    buffer: VecDeque<(f64, bool)>,
    capacity: usize,
}

pub const DEFAULT_MARGIN_CAPACITY: usize = 1000;
pub const INITIAL_MARGIN: f64 = 1.0;

impl MarginState {
    pub fn new(capacity: usize, margin: f64) -> Self {
        Self {
            margin,
            buffer: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.buffer.len() == self.capacity
    }

    /// Appends an observation, evicting the oldest when full.
    pub fn record(&mut self, distance: f64, same: bool) {
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back((distance, same));
    }

    pub fn observations(&self) -> impl Iterator<Item = &(f64, bool)> {
        self.buffer.iter()
    }

    /// Sets the margin to the distance threshold with the lowest
    /// verification error on the buffer ("same" iff distance < m). Returns
    /// `None` and keeps the current margin when the buffer is empty.
    pub fn update_margin(&mut self) -> Option<f64> {
        if self.buffer.is_empty() {
            return None;
        }
        let (d, s): (Vec<f64>, Vec<bool>) = self.buffer.iter().copied().unzip();
        let scan = best_threshold(&d, &s, SameSide::Below).ok()?;
        self.margin = scan.threshold.max(0.0);
        Some(self.margin)
    }

    /// Error count of a candidate margin on the current buffer.
    pub fn errors_at(&self, margin: f64) -> usize {
        self.buffer
            .iter()
            .filter(|&&(d, s)| (d < margin) != s)
            .count()
    }
}

impl Default for MarginState {
    fn default() -> Self {
        Self::new(DEFAULT_MARGIN_CAPACITY, INITIAL_MARGIN)
    }
}
