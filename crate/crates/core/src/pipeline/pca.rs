//! Principal component projection.

use serde_json::json;

use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::tensor::{dot, sym_eigendecompose, Matrix, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `dim × out_dim`, orthonormal columns in decreasing variance order.
    pub basis: Matrix,
    /// Eigenvalues of the sample covariance (divisor `n − 1`), descending,
    /// all of them.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn in_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.basis.cols()
    }

    /// Share of total variance carried by each kept component.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        self.eigenvalues[..self.out_dim()]
            .iter()
            .map(|v| if total > 0.0 { v.max(0.0) / total } else { 0.0 })
            .collect()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape {
                op: "pca project",
                left: vec![x.len()],
                right: vec![self.in_dim()],
            });
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok((0..self.out_dim()).map(|k| dot(&self.basis.col(k), &centered)).collect())
    }

    pub fn back_project(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.basis.matvec(y)?;
        x.iter_mut().zip(&self.mean).for_each(|(a, m)| *a += m);
        Ok(x)
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new(json!({ "kind": "pca" }));
        c.push("mean", Tensor::from_raw(vec![self.mean.len()], self.mean.clone()));
        c.push("basis", self.basis.as_tensor().clone());
        c.push("eigenvalues", Tensor::from_raw(vec![self.eigenvalues.len()], self.eigenvalues.clone()));
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("pca") {
            return Err(Error::Container("not a pca projection".into()));
        }
        Ok(Self {
            mean: c.get("mean")?.data().to_vec(),
            basis: Matrix::try_from(c.get("basis")?.clone())?,
            eigenvalues: c.get("eigenvalues")?.data().to_vec(),
        })
    }
}

/// Top `out_dim` eigenvectors of the sample covariance.
pub fn fit_pca(features: &[Vec<f64>], out_dim: usize) -> Result<Pca> {
    let n = features.len();
    let dim = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::EmptyDataset("no features for pca".into()))?;
    if out_dim == 0 || out_dim > dim || out_dim + 1 > n {
        return Err(Error::InvalidArgument(format!(
            "pca output dimension {out_dim} must be in 1..={} for {n} samples of dimension {dim}",
            dim.min(n.saturating_sub(1))
        )));
    }
    let mut mean = vec![0.0; dim];
    for (i, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(Error::Shape {
                op: "pca features",
                left: vec![dim],
                right: vec![f.len()],
            });
        }
        if let Some(k) = f.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("pca feature {i}"),
                index: k,
            });
        }
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(dim, dim);
    for f in features {
        let r: Vec<f64> = f.iter().zip(&mean).map(|(a, m)| a - m).collect();
        cov.add_outer(1.0 / (n - 1) as f64, &r, &r);
    }
    cov.symmetrize();
    let eig = sym_eigendecompose(&cov)?;
    let basis = Matrix::from_fn(dim, out_dim, |i, k| eig.vectors.get(i, k));
    Ok(Pca {
        mean,
        basis,
        eigenvalues: eig.values,
    })
}
