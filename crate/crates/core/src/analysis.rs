//! Inter/intra-personal scatter, eigenvalue spectra, ROC curves and 2-D
//! PCA exports of learned features.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{sym_eigendecompose, Matrix};
use crate::threshold::{best_threshold, SameSide};

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterPair {
    /// `Σ_i n_i (x̄_i − x̄)(x̄_i − x̄)ᵀ`
    pub inter: Matrix,
    /// `Σ_i Σ_{x ∈ D_i} (x − x̄_i)(x − x̄_i)ᵀ`
    pub intra: Matrix,
    pub identities: usize,
    pub counts: Vec<usize>,
}

fn check_features(features: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if features.len() != labels.len() {
        return Err(Error::Shape {
            op: "features/labels",
            left: vec![features.len()],
            right: vec![labels.len()],
        });
    }
    let dim = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::EmptyDataset("no features".into()))?;
    for (k, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(Error::Shape {
                op: "features",
                left: vec![dim],
                right: vec![f.len()],
            });
        }
        if let Some(i) = f.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("feature {k}"),
                index: i,
            });
        }
    }
    Ok(dim)
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        m.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        n += 1;
    }
    m.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    m
}

/// Labels need not be dense; identities are ordered by label value.
pub fn compute_scatter(features: &[Vec<f64>], labels: &[usize]) -> Result<ScatterPair> {
    let dim = check_features(features, labels)?;
    let mut by: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
    for (f, &l) in features.iter().zip(labels) {
        by.entry(l).or_default().push(f);
    }
    if by.len() < 2 {
        log::warn!("scatter over a single identity; inter-personal scatter is zero");
    }
    let grand = mean_of(features.iter(), dim);
    let mut inter = Matrix::zeros(dim, dim);
    let mut intra = Matrix::zeros(dim, dim);
    let mut counts = Vec::with_capacity(by.len());
    for members in by.values() {
        let m = mean_of(members.iter().copied(), dim);
        let dm: Vec<f64> = m.iter().zip(&grand).map(|(a, b)| a - b).collect();
        if by.len() >= 2 {
            inter.add_outer(members.len() as f64, &dm, &dm);
        }
        for x in members {
            let r: Vec<f64> = x.iter().zip(&m).map(|(a, b)| a - b).collect();
            intra.add_outer(1.0, &r, &r);
        }
        counts.push(members.len());
    }
    inter.symmetrize();
    intra.symmetrize();
    Ok(ScatterPair {
        identities: by.len(),
        inter,
        intra,
        counts,
    })
}

/// `Σ (x − x̄)(x − x̄)ᵀ` over all samples.
pub fn total_scatter(features: &[Vec<f64>]) -> Result<Matrix> {
    let dim = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::EmptyDataset("no features".into()))?;
    let grand = mean_of(features.iter(), dim);
    let mut t = Matrix::zeros(dim, dim);
    for x in features {
        let r: Vec<f64> = x.iter().zip(&grand).map(|(a, b)| a - b).collect();
        t.add_outer(1.0, &r, &r);
    }
    Ok(t)
}

/// Descending eigenvalues divided by their mean. An all-zero spectrum stays
/// zero.
pub fn normalized_spectrum(m: &Matrix) -> Result<Vec<f64>> {
    let eig = sym_eigendecompose(m)?;
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    let vals: Vec<f64> = eig
        .values
        .iter()
        .map(|&v| {
            // Round-off can leave tiny negatives on a PSD input.
            if v < 0.0 && v > -1e-10 * scale {
                0.0
            } else {
                v
            }
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    if mean <= 0.0 {
        return Ok(vec![0.0; vals.len()]);
    }
    Ok(vals.iter().map(|v| v / mean).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub inter: Vec<f64>,
    pub intra: Vec<f64>,
}

pub fn spectrum(scatter: &ScatterPair) -> Result<SpectrumReport> {
    Ok(SpectrumReport {
        inter: normalized_spectrum(&scatter.inter)?,
        intra: normalized_spectrum(&scatter.intra)?,
    })
}

/// Sum of the normalized eigenvalues past the leading `ceil(frac·d)` ranks.
pub fn tail_mass(normalized: &[f64], frac: f64) -> f64 {
    let head = (frac * normalized.len() as f64).ceil() as usize;
    normalized.iter().skip(head).sum()
}

/// Fraction of the total spectrum carried by the largest eigenvalue.
pub fn top_share(normalized: &[f64]) -> f64 {
    let total: f64 = normalized.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    normalized.first().copied().unwrap_or(0.0) / total
}

#[derive(Clone, Debug, Serialize)]
struct SpectrumRow<'a> {
    source: &'a str,
    matrix: &'a str,
    rank: usize,
    value: f64,
}

/// Writes `source,matrix,rank,value` rows; `source` labels the run that
/// produced the features (for example the λ value).
pub fn write_spectrum_csv(path: &Path, reports: &[(String, SpectrumReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (source, r) in reports {
        for (matrix, vals) in [("inter", &r.inter), ("intra", &r.intra)] {
            for (k, &value) in vals.iter().enumerate() {
                w.serialize(SpectrumRow {
                    source,
                    matrix,
                    rank: k + 1,
                    value,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(false-positive rate, true-positive rate)` from the highest cut-point
    /// down, starting at `(0, 0)` and ending at `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub accuracy: f64,
    pub threshold: f64,
}

impl RocCurve {
    /// Trapezoid-rule area under the curve.
    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
            .sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["fpr", "tpr"])?;
        for (f, t) in &self.points {
            w.write_record([f.to_string(), t.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Accuracy at the best threshold and the ROC curve, treating higher scores
/// as "same".
pub fn verification_metrics(scores: &[f64], same: &[bool]) -> Result<RocCurve> {
    let pos = same.iter().filter(|&&s| s).count();
    let neg = same.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels("verification needs both same and different pairs".into()));
    }
    let scan = best_threshold(scores, same, SameSide::Above)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if same[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve {
        points,
        accuracy: scan.accuracy(),
        threshold: scan.threshold,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Pca2Row {
    pub dim1: f64,
    pub dim2: f64,
    pub identity: usize,
}

/// Projects the samples of the `top_k` identities with the most samples
/// onto the first two principal axes fit on those samples. Rows keep input
/// order; ties in sample count go to the smaller label.
pub fn pca2_export(features: &[Vec<f64>], labels: &[usize], top_k: usize) -> Result<Vec<Pca2Row>> {
    let dim = check_features(features, labels)?;
    if features.len() < 2 {
        return Err(Error::InvalidArgument("pca2 needs at least 2 samples".into()));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < top_k {
        log::warn!("requested {top_k} identities, only {} available", counts.len());
    }
    let mut ranked: Vec<(usize, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep: Vec<usize> = ranked.iter().take(top_k).map(|r| r.0).collect();
    let chosen: Vec<&Vec<f64>> = features
        .iter()
        .zip(labels)
        .filter(|(_, l)| keep.contains(l))
        .map(|(f, _)| f)
        .collect();
    let mean = mean_of(chosen.iter().copied(), dim);
    let mut cov = Matrix::zeros(dim, dim);
    for x in &chosen {
        let r: Vec<f64> = x.iter().zip(&mean).map(|(a, b)| a - b).collect();
        cov.add_outer(1.0, &r, &r);
    }
    cov.symmetrize();
    let eig = sym_eigendecompose(&cov)?;
    let axis = |k: usize| -> Vec<f64> {
        if k < dim {
            eig.vectors.col(k)
        } else {
            vec![0.0; dim]
        }
    };
    let (a1, a2) = (axis(0), axis(1));
    Ok(features
        .iter()
        .zip(labels)
        .filter(|(_, l)| keep.contains(l))
        .map(|(x, &identity)| {
            let r: Vec<f64> = x.iter().zip(&mean).map(|(a, b)| a - b).collect();
            Pca2Row {
                dim1: crate::tensor::dot(&r, &a1),
                dim2: crate::tensor::dot(&r, &a2),
                identity,
            }
        })
        .collect())
}

pub fn write_pca2_csv(path: &Path, rows: &[Pca2Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
