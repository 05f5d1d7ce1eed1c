//! Joint Bayesian verification.
//!
//! A feature is modeled as `x = μ + ε` with independent zero-mean Gaussians
//! `μ ~ N(0, S_μ)` (identity) and `ε ~ N(0, S_ε)` (within-identity). The
//! covariances are fit by EM over identity-grouped features and pairs are
//! scored by the log-likelihood ratio of the "same" and "different"
//! hypotheses, higher meaning more likely the same identity.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;

use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::tensor::{dot, inverse_spd, log_det_spd, Matrix, Tensor};
use crate::threshold::{best_threshold, SameSide, ThresholdScan};

/// Feature vectors grouped by identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityGroupedFeatures {
    groups: Vec<Vec<Vec<f64>>>,
    dim: usize,
}

impl IdentityGroupedFeatures {
    pub fn new(groups: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if groups.len() < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 identities, got {}", groups.len())));
        }
        let dim = groups
            .iter()
            .flatten()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::EmptyDataset("no features".into()))?;
        if dim == 0 {
            return Err(Error::InvalidArgument("zero-dimensional features".into()));
        }
        for (i, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::InvalidArgument(format!("identity {i} has no features")));
            }
            for f in g {
                if f.len() != dim {
                    return Err(Error::Shape {
                        op: "grouped features",
                        left: vec![dim],
                        right: vec![f.len()],
                    });
                }
                if let Some(k) = f.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("feature of identity {i}"),
                        index: k,
                    });
                }
            }
        }
        Ok(Self { groups, dim })
    }

    /// Groups `features[k]` by `labels[k]`; labels need not be dense.
    pub fn from_labeled(features: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Shape {
                op: "from_labeled",
                left: vec![features.len()],
                right: vec![labels.len()],
            });
        }
        let mut by: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for (f, &l) in features.iter().zip(labels) {
            by.entry(l).or_default().push(f.clone());
        }
        Self::new(by.into_values().collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn groups(&self) -> &[Vec<Vec<f64>>] {
        &self.groups
    }

    pub fn num_samples(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

/// Fitted covariances and the derived scoring matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct JointBayesModel {
    mean: Vec<f64>,
    s_mu: Matrix,
    s_eps: Matrix,
    a: Matrix,
    g: Matrix,
    constant: f64,
}

impl JointBayesModel {
    /// Builds a model from its covariances, deriving
    /// `A = ½(F⁻¹ − P)`, `G = −½F⁻¹S_μP` with `F = S_μ + S_ε` and
    /// `P = (F − S_μF⁻¹S_μ)⁻¹`, and the log-determinant constant.
    pub fn from_covariances(mean: Vec<f64>, s_mu: Matrix, s_eps: Matrix) -> Result<Self> {
        let d = mean.len();
        if s_mu.shape() != [d, d] || s_eps.shape() != [d, d] {
            return Err(Error::Shape {
                op: "joint bayes covariances",
                left: s_mu.shape().to_vec(),
                right: s_eps.shape().to_vec(),
            });
        }
        let f = s_mu.add(&s_eps)?;
        let f_inv = inverse_spd(&f)?;
        let mut schur = f.sub(&s_mu.matmul(&f_inv)?.matmul(&s_mu)?)?;
        schur.symmetrize();
        let p = inverse_spd(&schur)?;
        let mut a = f_inv.sub(&p)?.scaled(0.5);
        a.symmetrize();
        let mut g = f_inv.matmul(&s_mu)?.matmul(&p)?.scaled(-0.5);
        g.symmetrize();
        let constant = 0.5 * (log_det_spd(&f)? - log_det_spd(&schur)?);
        Ok(Self {
            mean,
            s_mu,
            s_eps,
            a,
            g,
            constant,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn s_mu(&self) -> &Matrix {
        &self.s_mu
    }

    pub fn s_eps(&self) -> &Matrix {
        &self.s_eps
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn g(&self) -> &Matrix {
        &self.g
    }

    /// Score of two globally centered features at zero offset.
    pub fn constant(&self) -> f64 {
        self.constant
    }

    /// `log P(f1, f2 | same) − log P(f1, f2 | different)`.
    pub fn score(&self, f1: &[f64], f2: &[f64]) -> Result<f64> {
        let d = self.dim();
        if f1.len() != d || f2.len() != d {
            return Err(Error::Shape {
                op: "joint bayes score",
                left: vec![f1.len(), f2.len()],
                right: vec![d],
            });
        }
        let x1: Vec<f64> = f1.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let x2: Vec<f64> = f2.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let q1 = self.a.bilinear(&x1, &x1);
        let q2 = self.a.bilinear(&x2, &x2);
        let cross = self.g.bilinear(&x1, &x2) + self.g.bilinear(&x2, &x1);
        Ok(q1 + q2 - cross + self.constant)
    }

    pub fn to_container(&self) -> TensorContainer {
        let d = self.dim();
        let mut c = TensorContainer::new(json!({ "kind": "joint-bayes", "dim": d }));
        c.push("mean", Tensor::from_raw(vec![d], self.mean.clone()));
        c.push("s_mu", self.s_mu.as_tensor().clone());
        c.push("s_eps", self.s_eps.as_tensor().clone());
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("joint-bayes") {
            return Err(Error::Container("not a joint-bayes model".into()));
        }
        let mean = c.get("mean")?.data().to_vec();
        let s_mu = Matrix::try_from(c.get("s_mu")?.clone())?;
        let s_eps = Matrix::try_from(c.get("s_eps")?.clone())?;
        Self::from_covariances(mean, s_mu, s_eps)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&TensorContainer::load(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub iters: usize,
    pub tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { iters: 50, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmReport {
    pub iterations: usize,
    pub converged: bool,
    /// Regularization added to the diagonal of `S_ε`.
    pub delta: f64,
    /// Objective after initialization and after every iteration: the
    /// marginal log-likelihood minus the regularization penalty
    /// `½·N·δ·tr(S_ε⁻¹)`. EM never decreases it.
    pub objective: Vec<f64>,
}

/// Per-group-size quantities shared by identities with `m` samples.
struct SizeTerms {
    /// `(m·S_μ + S_ε)⁻¹`
    inv: Matrix,
    log_det: f64,
}

fn size_terms(s_mu: &Matrix, s_eps: &Matrix, sizes: &[usize]) -> Result<BTreeMap<usize, SizeTerms>> {
    let mut out = BTreeMap::new();
    for &m in sizes {
        if out.contains_key(&m) {
            continue;
        }
        let mut k = s_mu.scaled(m as f64).add(s_eps)?;
        k.symmetrize();
        out.insert(
            m,
            SizeTerms {
                inv: inverse_spd(&k)?,
                log_det: log_det_spd(&k)?,
            },
        );
    }
    Ok(out)
}

fn objective(
    groups: &[Vec<Vec<f64>>],
    sums: &[Vec<f64>],
    s_eps: &Matrix,
    terms: &BTreeMap<usize, SizeTerms>,
    delta: f64,
) -> Result<f64> {
    let d = s_eps.rows() as f64;
    let e_inv = inverse_spd(s_eps)?;
    let e_logdet = log_det_spd(s_eps)?;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    let mut n = 0usize;
    for (g, s) in groups.iter().zip(sums) {
        let m = g.len();
        n += m;
        let t = &terms[&m];
        let mut quad: f64 = g.iter().map(|x| e_inv.bilinear(x, x)).sum();
        quad -= e_inv.bilinear(s, s) / m as f64;
        quad += t.inv.bilinear(s, s) / m as f64;
        let logdet = (m as f64 - 1.0) * e_logdet + t.log_det;
        total -= 0.5 * (m as f64 * d * ln2pi + logdet + quad);
    }
    Ok(total - 0.5 * n as f64 * delta * e_inv.trace())
}

/// Fits `S_μ` and `S_ε` by EM with exact posterior moments.
///
/// Starts from the between-identity scatter of identity means and the
/// pooled within-identity scatter. `S_ε` gets `δ·I` added each M-step,
/// with `δ = 1e-6 · trace(total covariance) / dim`. Stops after `iters`
/// iterations or when the relative change of `‖S_μ‖_F + ‖S_ε‖_F` falls
/// below `tol`.
pub fn fit_em(data: &IdentityGroupedFeatures, cfg: EmConfig) -> Result<(JointBayesModel, EmReport)> {
    let d = data.dim();
    let n = data.num_samples();
    let ids = data.groups().len();
    if n <= d {
        log::warn!("joint bayes: {n} samples for {d} dimensions; relying on regularization");
    }

    let mut mean = vec![0.0; d];
    for x in data.groups().iter().flatten() {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let groups: Vec<Vec<Vec<f64>>> = data
        .groups()
        .iter()
        .map(|g| g.iter().map(|x| x.iter().zip(&mean).map(|(a, b)| a - b).collect()).collect())
        .collect();
    let sums: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut s = vec![0.0; d];
            for x in g {
                s.iter_mut().zip(x).for_each(|(a, v)| *a += v);
            }
            s
        })
        .collect();
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();

    // Method-of-moments start.
    let mut s_mu = Matrix::zeros(d, d);
    let mut s_eps = Matrix::zeros(d, d);
    let mut total_trace = 0.0;
    for (g, s) in groups.iter().zip(&sums) {
        let m = g.len() as f64;
        let gm: Vec<f64> = s.iter().map(|v| v / m).collect();
        s_mu.add_outer(1.0 / ids as f64, &gm, &gm);
        for x in g {
            total_trace += dot(x, x);
            let r: Vec<f64> = x.iter().zip(&gm).map(|(a, b)| a - b).collect();
            s_eps.add_outer(1.0 / n as f64, &r, &r);
        }
    }
    let delta = 1e-6 * total_trace / n as f64 / d as f64;
    s_eps.add_diag(delta);
    s_mu.symmetrize();
    s_eps.symmetrize();

    let mut report = EmReport {
        delta,
        ..Default::default()
    };
    let mut terms = size_terms(&s_mu, &s_eps, &sizes)?;
    report.objective.push(objective(&groups, &sums, &s_eps, &terms, delta)?);

    for it in 0..cfg.iters {
        let mut new_mu = Matrix::zeros(d, d);
        let mut new_eps = Matrix::zeros(d, d);
        for (g, s) in groups.iter().zip(&sums) {
            let m = g.len();
            let t = &terms[&m];
            // Posterior mean and covariance of μ for this identity.
            let sk = s_mu.matmul(&t.inv)?;
            let mu_hat = sk.matvec(s)?;
            let mut cov = sk.matmul(&s_eps)?;
            cov.symmetrize();
            new_mu.add_outer(1.0 / ids as f64, &mu_hat, &mu_hat);
            new_mu = new_mu.add(&cov.scaled(1.0 / ids as f64))?;
            for x in g {
                let r: Vec<f64> = x.iter().zip(&mu_hat).map(|(a, b)| a - b).collect();
                new_eps.add_outer(1.0 / n as f64, &r, &r);
            }
            new_eps = new_eps.add(&cov.scaled(m as f64 / n as f64))?;
        }
        new_eps.add_diag(delta);
        new_mu.symmetrize();
        new_eps.symmetrize();

        let before = s_mu.frobenius_norm() + s_eps.frobenius_norm();
        let change = new_mu.sub(&s_mu)?.frobenius_norm() + new_eps.sub(&s_eps)?.frobenius_norm();
        s_mu = new_mu;
        s_eps = new_eps;
        terms = size_terms(&s_mu, &s_eps, &sizes)?;
        report.objective.push(objective(&groups, &sums, &s_eps, &terms, delta)?);
        report.iterations = it + 1;
        if change <= cfg.tol * before.max(f64::MIN_POSITIVE) {
            report.converged = true;
            break;
        }
    }
    let model = JointBayesModel::from_covariances(mean, s_mu, s_eps)?;
    Ok((model, report))
}

/// Threshold on Joint Bayesian scores maximizing accuracy on labeled
/// pairs ("same" above the threshold).
pub fn calibrate_threshold(model: &JointBayesModel, pairs: &[(Vec<f64>, Vec<f64>, bool)]) -> Result<ThresholdScan> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no calibration pairs".into()));
    }
    let positives = pairs.iter().filter(|p| p.2).count();
    if positives == 0 || positives == pairs.len() {
        return Err(Error::DegenerateLabels("calibration pairs must contain both labels".into()));
    }
    let scores: Vec<f64> = pairs
        .iter()
        .map(|(a, b, _)| model.score(a, b))
        .collect::<Result<_>>()?;
    let same: Vec<bool> = pairs.iter().map(|p| p.2).collect();
    best_threshold(&scores, &same, SameSide::Above)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cholesky;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_spd(d: usize, floor: f64, rng: &mut ChaCha8Rng) -> Matrix {
        let b = Matrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let mut m = b.matmul(&b.transpose()).unwrap();
        m.add_diag(floor);
        m.symmetrize();
        m
    }

    /// log N(x; 0, cov) straight from a Cholesky factor.
    fn log_density(x: &[f64], cov: &Matrix) -> f64 {
        let l = cholesky(cov).unwrap();
        let n = x.len();
        // Forward substitution for L z = x.
        let mut z = vec![0.0; n];
        for i in 0..n {
            let mut acc = x[i];
            for k in 0..i {
                acc -= l.get(i, k) * z[k];
            }
            z[i] = acc / l.get(i, i);
        }
        let logdet: f64 = (0..n).map(|i| 2.0 * l.get(i, i).ln()).sum();
        -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + dot(&z, &z))
    }

    fn brute_force_ratio(s_mu: &Matrix, s_eps: &Matrix, x1: &[f64], x2: &[f64]) -> f64 {
        let d = x1.len();
        let f = s_mu.add(s_eps).unwrap();
        let intra = Matrix::from_fn(2 * d, 2 * d, |i, j| {
            if (i < d) == (j < d) {
                f.get(i % d, j % d)
            } else {
                s_mu.get(i % d, j % d)
            }
        });
        let extra = Matrix::from_fn(2 * d, 2 * d, |i, j| if (i < d) == (j < d) { f.get(i % d, j % d) } else { 0.0 });
        let x: Vec<f64> = x1.iter().chain(x2).copied().collect();
        log_density(&x, &intra) - log_density(&x, &extra)
    }

    #[test]
    fn one_dimensional_closed_form() {
        let m = JointBayesModel::from_covariances(vec![0.0], Matrix::identity(1), Matrix::identity(1)).unwrap();
        let s = m.score(&[1.0], &[1.0]).unwrap();
        let expected = 0.5 * (4.0f64 / 3.0).ln() + 1.0 / 6.0;
        assert!((s - expected).abs() < 1e-14);
        assert!((s - 0.3105077).abs() < 1e-7);
    }

    #[test]
    fn score_at_mean_is_the_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mean = vec![0.3, -1.0, 2.0];
        let m = JointBayesModel::from_covariances(mean.clone(), random_spd(3, 0.1, &mut rng), random_spd(3, 0.5, &mut rng)).unwrap();
        assert_eq!(m.score(&mean, &mean).unwrap(), m.constant());
        assert!(m.constant() > 0.0);
        assert!(m.score(&mean, &[1.0]).is_err());
    }

    #[test]
    fn score_matches_brute_force_density_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let d = 1 + trial % 6;
            let s_mu = random_spd(d, 0.05, &mut rng);
            let s_eps = random_spd(d, 0.3, &mut rng);
            let m = JointBayesModel::from_covariances(vec![0.0; d], s_mu.clone(), s_eps.clone()).unwrap();
            let x1: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x2: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = m.score(&x1, &x2).unwrap();
            let want = brute_force_ratio(&s_mu, &s_eps, &x1, &x2);
            assert!((got - want).abs() < 1e-8, "trial {trial}: {got} vs {want}");
            assert_eq!(got, m.score(&x2, &x1).unwrap());
        }
    }

    fn planted(d: usize, ids: usize, per: usize, seed: u64) -> IdentityGroupedFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = (0..ids)
            .map(|_| {
                let mu: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                (0..per)
                    .map(|_| mu.iter().map(|m| { let e: f64 = StandardNormal.sample(&mut rng); m + e }).collect())
                    .collect()
            })
            .collect();
        IdentityGroupedFeatures::new(groups).unwrap()
    }

    #[test]
    fn em_recovers_planted_identity_covariances() {
        let data = planted(2, 200, 5, 0);
        let (m, rep) = fit_em(&data, EmConfig::default()).unwrap();
        let eye = Matrix::identity(2);
        let err_mu = m.s_mu().sub(&eye).unwrap().frobenius_norm() / eye.frobenius_norm();
        let err_eps = m.s_eps().sub(&eye).unwrap().frobenius_norm() / eye.frobenius_norm();
        assert!(err_mu < 0.15 && err_eps < 0.15, "{err_mu} {err_eps}");
        for w in rep.objective.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{:?}", rep.objective);
        }
    }

    #[test]
    fn one_dimensional_balanced_matches_anova_mle() {
        let data = planted(1, 50, 4, 9);
        let (m, rep) = fit_em(&data, EmConfig { iters: 5000, tol: 1e-13 }).unwrap();
        assert!(rep.converged);
        let (n, k) = (50.0, 4.0);
        let all: Vec<f64> = data.groups().iter().flatten().map(|x| x[0]).collect();
        let grand = all.iter().sum::<f64>() / all.len() as f64;
        let (mut ssw, mut ssb) = (0.0, 0.0);
        for g in data.groups() {
            let gm = g.iter().map(|x| x[0]).sum::<f64>() / k;
            ssb += k * (gm - grand).powi(2);
            ssw += g.iter().map(|x| (x[0] - gm).powi(2)).sum::<f64>();
        }
        let var_eps = ssw / (n * (k - 1.0));
        let var_mu = (ssb / n - var_eps) / k;
        assert!(var_mu > 0.0);
        let rel = |a: f64, b: f64| (a - b).abs() / b;
        assert!(rel(m.s_eps().get(0, 0), var_eps) < 1e-4, "{} {var_eps}", m.s_eps().get(0, 0));
        assert!(rel(m.s_mu().get(0, 0), var_mu) < 1e-4, "{} {var_mu}", m.s_mu().get(0, 0));
    }

    #[test]
    fn singleton_identities_collapse_within_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let groups = (0..40).map(|_| vec![vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]]).collect();
        let data = IdentityGroupedFeatures::new(groups).unwrap();
        let (m, rep) = fit_em(&data, EmConfig::default()).unwrap();
        // No within-identity evidence: the moment start puts S_ε at the δ·I
        // floor and the likelihood cannot pull it back up.
        assert!(m.s_eps().max_abs() < 1e-3 * m.s_mu().trace(), "{:?}", m.s_eps().data());
        let (longer, _) = fit_em(&data, EmConfig { iters: 500, tol: 0.0 }).unwrap();
        assert!(longer.s_eps().max_abs() < 1e-3 * longer.s_mu().trace());
        assert!(longer.s_eps().get(0, 0) >= rep.delta);
    }

    #[test]
    fn same_pairs_score_higher_than_different() {
        let data = planted(3, 60, 4, 5);
        let (m, _) = fit_em(&data, EmConfig::default()).unwrap();
        let g = data.groups();
        let (mut same, mut diff) = (0.0, 0.0);
        for i in 0..g.len() {
            same += m.score(&g[i][0], &g[i][1]).unwrap();
            diff += m.score(&g[i][0], &g[(i + 1) % g.len()][1]).unwrap();
        }
        assert!(same > diff);
    }

    #[test]
    fn container_round_trip_preserves_scores() {
        let data = planted(3, 30, 3, 6);
        let (m, _) = fit_em(&data, EmConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("jb.bin");
        m.save(&p).unwrap();
        let back = JointBayesModel::load(&p).unwrap();
        let (a, b) = (&data.groups()[0][0], &data.groups()[1][0]);
        assert_eq!(back.score(a, b).unwrap(), m.score(a, b).unwrap());
    }

    #[test]
    fn calibration_examples() {
        let m = JointBayesModel::from_covariances(vec![0.0], Matrix::identity(1), Matrix::identity(1)).unwrap();
        // Scores as a monotone function of a scalar: pick inputs with known ordering.
        let pairs = vec![
            (vec![1.0], vec![1.0], true),
            (vec![0.8], vec![0.8], true),
            (vec![1.0], vec![-1.0], false),
            (vec![0.9], vec![-0.9], false),
        ];
        let scan = calibrate_threshold(&m, &pairs).unwrap();
        assert_eq!(scan.accuracy(), 1.0);
        let only_same: Vec<_> = pairs.iter().filter(|p| p.2).cloned().collect();
        assert!(matches!(calibrate_threshold(&m, &only_same), Err(Error::DegenerateLabels(_))));
    }

    #[test]
    fn rejects_bad_groups() {
        assert!(IdentityGroupedFeatures::new(vec![vec![vec![1.0]]]).is_err());
        assert!(IdentityGroupedFeatures::new(vec![vec![vec![1.0]], vec![vec![1.0, 2.0]]]).is_err());
        assert!(IdentityGroupedFeatures::new(vec![vec![vec![1.0]], vec![]]).is_err());
        assert!(IdentityGroupedFeatures::from_labeled(&[vec![1.0], vec![2.0]], &[3, 7]).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn em_objective_never_decreases(seed in any::<u64>(), d in 1usize..4, per in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let groups = (0..12).map(|_| {
                let size = 1 + rng.gen_range(0..per);
                (0..size).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
            }).collect();
            let data = IdentityGroupedFeatures::new(groups).unwrap();
            let (m, rep) = fit_em(&data, EmConfig { iters: 30, tol: 0.0 }).unwrap();
            for w in rep.objective.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{:?}", rep.objective);
            }
            let (a, b) = (&data.groups()[0][0], &data.groups()[1][0]);
            prop_assert_eq!(m.score(a, b).unwrap(), m.score(b, a).unwrap());
        }
    }
}
