//! Linear fusion of per-group verification scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// L2 penalty on the weights.
    pub regularization: f64,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            regularization: 1e-3,
            learning_rate: 0.1,
            epochs: 2000,
        }
    }
}

/// `w·z + b` over standardized scores `z = (s − mean) / std`; positive
/// means "same".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FusionModel {
    pub fn fuse(&self, scores: &[f64]) -> Result<f64> {
        if scores.len() != self.weights.len() {
            return Err(Error::Shape {
                op: "fuse",
                left: vec![scores.len()],
                right: vec![self.weights.len()],
            });
        }
        Ok(self.standardize(scores).iter().zip(&self.weights).map(|(z, w)| z * w).sum::<f64>() + self.bias)
    }

    fn standardize(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.mean).zip(&self.std).map(|((v, m), sd)| (v - m) / sd).collect()
    }
}

fn objective(z: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, reg: f64) -> f64 {
    let hinge: f64 = z
        .iter()
        .zip(y)
        .map(|(zi, yi)| (1.0 - yi * (zi.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b)).max(0.0))
        .sum();
    hinge / z.len() as f64 + 0.5 * reg * w.iter().map(|v| v * v).sum::<f64>()
}

/// Minimizes `mean hinge(1 − y·(w·z + b)) + ½·reg·‖w‖²` by full-batch
/// subgradient descent with a `1/√t` step, keeping the best iterate.
pub fn fit_fusion(scores: &[Vec<f64>], same: &[bool], cfg: &FusionConfig) -> Result<FusionModel> {
    if scores.len() != same.len() {
        return Err(Error::Shape {
            op: "fit_fusion",
            left: vec![scores.len()],
            right: vec![same.len()],
        });
    }
    let k = scores
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::EmptyDataset("no fusion training pairs".into()))?;
    if k == 0 {
        return Err(Error::InvalidArgument("fusion needs at least one score group".into()));
    }
    let pos = same.iter().filter(|&&s| s).count();
    if pos == 0 || pos == same.len() {
        return Err(Error::DegenerateLabels("fusion needs both same and different pairs".into()));
    }
    for (i, s) in scores.iter().enumerate() {
        if s.len() != k {
            return Err(Error::Shape {
                op: "fusion scores",
                left: vec![k],
                right: vec![s.len()],
            });
        }
        if let Some(j) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("fusion scores of pair {i}"),
                index: j,
            });
        }
    }
    let n = scores.len() as f64;
    let mean: Vec<f64> = (0..k).map(|j| scores.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..k)
        .map(|j| {
            let v = scores.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut model = FusionModel {
        weights: vec![0.0; k],
        bias: 0.0,
        mean,
        std,
    };
    let z: Vec<Vec<f64>> = scores.iter().map(|s| model.standardize(s)).collect();
    let y: Vec<f64> = same.iter().map(|&s| if s { 1.0 } else { -1.0 }).collect();

    let (mut w, mut b) = (vec![0.0; k], 0.0);
    let mut best = (objective(&z, &y, &w, b, cfg.regularization), w.clone(), b);
    for t in 0..cfg.epochs {
        let mut gw: Vec<f64> = w.iter().map(|v| cfg.regularization * v).collect();
        let mut gb = 0.0;
        for (zi, yi) in z.iter().zip(&y) {
            let margin = yi * (zi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b);
            if margin < 1.0 {
                gw.iter_mut().zip(zi).for_each(|(g, a)| *g -= yi * a / n);
                gb -= yi / n;
            }
        }
        let eta = cfg.learning_rate / ((t + 1) as f64).sqrt();
        w.iter_mut().zip(&gw).for_each(|(v, g)| *v -= eta * g);
        b -= eta * gb;
        let obj = objective(&z, &y, &w, b, cfg.regularization);
        if obj < best.0 {
            best = (obj, w.clone(), b);
        }
    }
    model.weights = best.1;
    model.bias = best.2;
    if model.weights.iter().any(|v| !v.is_finite()) || !model.bias.is_finite() {
        return Err(Error::Diverged {
            step: cfg.epochs,
            what: "fusion weights".into(),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn accuracy(m: &FusionModel, s: &[Vec<f64>], same: &[bool]) -> f64 {
        s.iter().zip(same).filter(|(x, &y)| (m.fuse(x).unwrap() > 0.0) == y).count() as f64 / s.len() as f64
    }

    #[test]
    fn single_group_preserves_score_order() {
        let s: Vec<Vec<f64>> = [3.0, 2.5, 2.0, -1.0, -2.0, 0.5].iter().map(|&v| vec![v]).collect();
        let same = [true, true, true, false, false, false];
        let m = fit_fusion(&s, &same, &FusionConfig::default()).unwrap();
        assert!(m.weights[0] > 0.0);
        assert_eq!(accuracy(&m, &s, &same), 1.0);
    }

    #[test]
    fn predictive_score_dominates_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let same: Vec<bool> = (0..400).map(|i| i % 2 == 0).collect();
        let s: Vec<Vec<f64>> = same
            .iter()
            .map(|&y| {
                let signal = if y { 1.0 } else { -1.0 } + rng.gen_range(-0.8..0.8);
                vec![rng.gen_range(-1.0..1.0), signal, rng.gen_range(-5.0..5.0)]
            })
            .collect();
        let m = fit_fusion(&s, &same, &FusionConfig::default()).unwrap();
        assert!(m.weights[1].abs() > 3.0 * m.weights[0].abs().max(m.weights[2].abs()), "{:?}", m.weights);
        assert_eq!(accuracy(&m, &s, &same), 1.0);
    }

    #[test]
    fn separable_two_group_scores_train_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let same: Vec<bool> = (0..200).map(|i| i % 3 == 0).collect();
        let s: Vec<Vec<f64>> = same
            .iter()
            .map(|&y| {
                let a: f64 = rng.gen_range(-1.0..1.0);
                // Separable only along a + b.
                let side = if y { 0.5 } else { -0.5 };
                vec![a, side - a + rng.gen_range(-0.2..0.2)]
            })
            .collect();
        let m = fit_fusion(&s, &same, &FusionConfig::default()).unwrap();
        assert_eq!(accuracy(&m, &s, &same), 1.0);
    }

    #[test]
    fn rejects_degenerate_input() {
        let s = vec![vec![1.0], vec![2.0]];
        assert!(matches!(fit_fusion(&s, &[true, true], &FusionConfig::default()), Err(Error::DegenerateLabels(_))));
        assert!(fit_fusion(&[vec![], vec![]], &[true, false], &FusionConfig::default()).is_err());
        assert!(fit_fusion(&[vec![f64::NAN], vec![1.0]], &[true, false], &FusionConfig::default()).is_err());
    }
}
