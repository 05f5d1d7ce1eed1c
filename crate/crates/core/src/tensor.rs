//! Dense row-major `f64` tensors and the small amount of linear algebra the
//! rest of the crate needs: matrix products, a cyclic Jacobi symmetric
//! eigensolver and Cholesky-based SPD solves.

use std::fmt;

use crate::error::{Error, Result};

/// Dense n-dimensional array of finite `f64` values in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
                expected,
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("tensor of shape {shape:?}"),
                index,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Internal constructor for buffers produced by our own kernels, which
    /// are finite whenever their inputs are.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// First flat index holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `self += alpha * other`; shapes must agree.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "axpy",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

/// Rank-2 tensor.
#[derive(Clone, PartialEq, Debug)]
pub struct Matrix(Tensor);

impl TryFrom<Tensor> for Matrix {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "matrix requires rank 2, got shape {:?}",
                t.shape()
            )));
        }
        Ok(Matrix(t))
    }
}

impl From<Matrix> for Tensor {
    fn from(m: Matrix) -> Tensor {
        m.0
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data).map(Matrix)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix(Tensor::zeros(vec![rows, cols]))
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.set(i, i, d);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix(Tensor::from_raw(vec![rows, cols], data))
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.0.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape[1]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows(), self.cols()]
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.data[i * self.cols() + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.0.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.0.data[i * c..(i + 1) * c]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.get(i, j)).collect()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols(), self.rows(), |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols() {
            return Err(Error::Shape {
                op: "matvec",
                left: self.shape().to_vec(),
                right: vec![v.len()],
            });
        }
        Ok((0..self.rows())
            .map(|i| dot(self.row(i), v))
            .collect())
    }

    /// `xᵀ M y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.rows());
        debug_assert_eq!(y.len(), self.cols());
        x.iter()
            .enumerate()
            .map(|(i, xi)| xi * dot(self.row(i), y))
            .sum()
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix(Tensor::from_raw(self.0.shape.clone(), data)))
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        let mut out = self.clone();
        out.0.scale(alpha);
        out
    }

    /// Adds `alpha` to every diagonal entry.
    pub fn add_diag(&mut self, alpha: f64) {
        for i in 0..self.rows().min(self.cols()) {
            let v = self.get(i, i);
            self.set(i, i, v + alpha);
        }
    }

    /// Adds `alpha * x yᵀ` in place.
    pub fn add_outer(&mut self, alpha: f64, x: &[f64], y: &[f64]) {
        let c = self.cols();
        for (i, &xi) in x.iter().enumerate() {
            let s = alpha * xi;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.0.data[i * c..(i + 1) * c];
            for (r, &yj) in row.iter_mut().zip(y) {
                *r += s * yj;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.sum_sq().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows().min(self.cols())).map(|i| self.get(i, i)).sum()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows().min(self.cols())).map(|i| self.get(i, i)).collect()
    }

    /// Largest `|m_ij - m_ji|`.
    pub fn max_asymmetry(&self) -> f64 {
        let n = self.rows();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Replaces the matrix by `(M + Mᵀ) / 2`.
    pub fn symmetrize(&mut self) {
        let n = self.rows();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                self.set(i, j, v);
                self.set(j, i, v);
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.get(i, p);
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in orow.iter_mut().zip(b.row(p)) {
                *o += aip * bpj;
            }
        }
    }
    Ok(Matrix(Tensor::from_raw(vec![n, m], out)))
}

const SYMMETRY_TOL: f64 = 1e-9;
const MAX_JACOBI_SWEEPS: usize = 100;

fn check_symmetric(m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Shape {
            op: "symmetric check",
            left: m.shape().to_vec(),
            right: vec![m.cols(), m.rows()],
        });
    }
    let asym = m.max_asymmetry();
    if asym > SYMMETRY_TOL * m.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Eigenvalues sorted in descending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, in the order of `values`.
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Eigenvalues come back sorted descending; each eigenvector column is
/// sign-normalized so that its largest-magnitude entry is positive.
pub fn sym_eigendecompose(m: &Matrix) -> Result<SymEigen> {
    check_symmetric(m)?;
    let n = m.rows();
    let mut a = m.clone();
    a.symmetrize();
    let mut a = a.0.data;
    let mut v = Matrix::identity(n).0.data;
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let abs_floor = scale * 1e-18;

    let mut converged = n <= 1 || scale == 0.0;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_JACOBI_SWEEPS {
            let off = off_diagonal_norm(&a, n);
            return Err(Error::NoConvergence { sweeps, off });
        }
        sweeps += 1;
        let mut rotations = 0usize;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // Negligible relative to both diagonal entries, or to the
                // matrix as a whole.
                let tiny = 100.0 * apq.abs();
                if apq.abs() <= abs_floor || (app.abs() + tiny == app.abs() && aqq.abs() + tiny == aqq.abs()) {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                rotations += 1;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        converged = rotations == 0;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        let mut best = 0.0f64;
        for k in 0..n {
            let x = v[k * n + old_col];
            if x.abs() > best.abs() {
                best = x;
            }
        }
        let sign = if best < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors.set(k, new_col, sign * v[k * n + old_col]);
        }
    }
    Ok(SymEigen { values, vectors })
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Lower-triangular Cholesky factor `L` with `m = L Lᵀ`.
pub fn cholesky(m: &Matrix) -> Result<Matrix> {
    check_symmetric(m)?;
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { row: i, pivot: s });
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = rhs` given a Cholesky factor.
pub fn cholesky_solve(l: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    let n = l.rows();
    if rhs.rows() != n {
        return Err(Error::Shape {
            op: "solve_spd",
            left: l.shape().to_vec(),
            right: rhs.shape().to_vec(),
        });
    }
    let m = rhs.cols();
    let mut x = rhs.clone();
    for c in 0..m {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in (i + 1)..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    Ok(x)
}

/// Solves `m X = rhs` for symmetric positive definite `m`.
pub fn solve_spd(m: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if rhs.rows() != m.rows() {
        return Err(Error::Shape {
            op: "solve_spd",
            left: m.shape().to_vec(),
            right: rhs.shape().to_vec(),
        });
    }
    let l = cholesky(m)?;
    cholesky_solve(&l, rhs)
}

/// Inverse of an SPD matrix, symmetrized.
pub fn inverse_spd(m: &Matrix) -> Result<Matrix> {
    let mut inv = solve_spd(m, &Matrix::identity(m.rows()))?;
    inv.symmetrize();
    Ok(inv)
}

/// `log det m` for SPD `m`.
pub fn log_det_spd(m: &Matrix) -> Result<f64> {
    let l = cholesky(m)?;
    Ok((0..l.rows()).map(|i| 2.0 * l.get(i, i).ln()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.data()[i * a.cols() + k] * b.data()[k * b.cols() + j];
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_ok());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 3, 4);
        assert_eq!(Matrix::identity(3).matmul(&a).unwrap(), a);

        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 5, 7);
        let b = random_matrix(&mut rng, 7, 3);
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_carries_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        match err {
            Error::Shape { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn eigen_known_cases() {
        let e = sym_eigendecompose(&Matrix::from_diag(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 2.0, 1.0]);
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = sym_eigendecompose(&m).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12);
        assert!((e.values[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eigendecompose(&m), Err(Error::NotSymmetric { .. })));
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let a = random_matrix(rng, n, n);
        let mut s = a.add(&a.transpose()).unwrap();
        s.symmetrize();
        s
    }

    fn reconstruction_error(m: &Matrix, e: &SymEigen) -> f64 {
        let lam = Matrix::from_diag(&e.values);
        let r = e
            .vectors
            .matmul(&lam)
            .unwrap()
            .matmul(&e.vectors.transpose())
            .unwrap();
        r.sub(m).unwrap().frobenius_norm()
    }

    fn orthonormality_error(v: &Matrix) -> f64 {
        v.transpose()
            .matmul(v)
            .unwrap()
            .sub(&Matrix::identity(v.rows()))
            .unwrap()
            .max_abs()
    }

    #[test]
    fn eigen_reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_symmetric(&mut rng, 6);
        let e = sym_eigendecompose(&m).unwrap();
        assert!(reconstruction_error(&m, &e) < 1e-8);
        assert!(orthonormality_error(&e.vectors) < 1e-8);
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        // M v = λ v column by column.
        for k in 0..6 {
            let v = e.vectors.col(k);
            let mv = m.matvec(&v).unwrap();
            for (a, b) in mv.iter().zip(&v) {
                assert!((a - e.values[k] * b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn eigen_handles_rank_deficient_and_zero() {
        let e = sym_eigendecompose(&Matrix::zeros(4, 4)).unwrap();
        assert_eq!(e.values, vec![0.0; 4]);
        let x = [1.0, 2.0, -1.0, 0.5];
        let mut m = Matrix::zeros(4, 4);
        m.add_outer(1.0, &x, &x);
        let e = sym_eigendecompose(&m).unwrap();
        assert!((e.values[0] - 6.25).abs() < 1e-12);
        assert!(e.values[1..].iter().all(|v| v.abs() < 1e-12));
        assert!(reconstruction_error(&m, &e) < 1e-10);
    }

    #[test]
    fn eigen_larger_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_symmetric(&mut rng, 60);
        let e = sym_eigendecompose(&m).unwrap();
        assert!(reconstruction_error(&m, &e) < 1e-8);
        assert!(orthonormality_error(&e.vectors) < 1e-8);
    }

    #[test]
    fn solve_spd_cases() {
        let b = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(solve_spd(&Matrix::identity(2), &b).unwrap(), b);
        let d = Matrix::from_diag(&[2.0, 4.0]);
        let x = solve_spd(&d, &Matrix::column(&[2.0, 4.0]).unwrap()).unwrap();
        assert!(x.data().iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn solve_spd_residual_on_random_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 8, 8);
        let mut m = a.transpose().matmul(&a).unwrap();
        m.add_diag(1.0);
        m.symmetrize();
        let rhs = random_matrix(&mut rng, 8, 3);
        let x = solve_spd(&m, &rhs).unwrap();
        let resid = m.matmul(&x).unwrap().sub(&rhs).unwrap().frobenius_norm();
        assert!(resid / rhs.frobenius_norm() < 1e-8);
    }

    #[test]
    fn solve_spd_rejects_indefinite() {
        let m = Matrix::from_diag(&[1.0, -1.0]);
        assert!(matches!(
            solve_spd(&m, &Matrix::identity(2)),
            Err(Error::NotPositiveDefinite { row: 1, .. })
        ));
        let m = Matrix::from_diag(&[1.0, 0.0]);
        assert!(solve_spd(&m, &Matrix::identity(2)).is_err());
    }

    #[test]
    fn log_det_matches_eigenvalues() {
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert!((log_det_spd(&m).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, k in 1usize..6, p in 1usize..6, q in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, n, k);
            let b = random_matrix(&mut rng, k, p);
            let c = random_matrix(&mut rng, p, q);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let diff = left.sub(&right).unwrap().frobenius_norm();
            prop_assert!(diff <= 1e-9 * left.frobenius_norm().max(1.0));
        }

        #[test]
        fn solve_spd_round_trips(seed in any::<u64>(), n in 1usize..10, m in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, n, n);
            let mut spd = a.transpose().matmul(&a).unwrap();
            spd.add_diag(1.0);
            spd.symmetrize();
            let rhs = random_matrix(&mut rng, n, m);
            let x = solve_spd(&spd, &rhs).unwrap();
            let back = spd.matmul(&x).unwrap();
            prop_assert!(back.sub(&rhs).unwrap().frobenius_norm() <= 1e-8 * rhs.frobenius_norm().max(1e-12));
        }

        #[test]
        fn eigen_reconstruction_and_orthonormality(seed in any::<u64>(), n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_symmetric(&mut rng, n);
            let e = sym_eigendecompose(&m).unwrap();
            prop_assert!(reconstruction_error(&m, &e) < 1e-8);
            prop_assert!(orthonormality_error(&e.vectors) < 1e-8);
            prop_assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
