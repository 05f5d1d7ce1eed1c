//! Error-minimizing threshold scans over labeled scalar values.
//!
//! Used for the adaptive contrastive margin (distances, "same" below the
//! threshold), for calibrating Joint Bayesian scores and for verification
//! accuracy ("same" above the threshold).

use crate::error::{Error, Result};

/// Which side of the threshold is predicted "same identity".
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SameSide {
    /// `value < threshold` ⇒ same (distances).
    Below,
    /// `value > threshold` ⇒ same (similarity scores).
    Above,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdScan {
    pub threshold: f64,
    pub errors: usize,
    pub total: usize,
}

impl ThresholdScan {
    pub fn accuracy(&self) -> f64 {
        1.0 - self.errors as f64 / self.total as f64
    }
}

/// Distance of the boundary candidates beyond the extreme values.
fn boundary_offset(extreme: f64) -> f64 {
    1.0f64.max(extreme.abs() * 1e-6)
}

/// Counts misclassified pairs for a given threshold.
pub fn errors_at(values: &[f64], same: &[bool], side: SameSide, threshold: f64) -> usize {
    values
        .iter()
        .zip(same)
        .filter(|(&v, &s)| {
            let predicted = match side {
                SameSide::Below => v < threshold,
                SameSide::Above => v > threshold,
            };
            predicted != s
        })
        .count()
}

/// Finds the threshold with the fewest errors among the midpoints of
/// consecutive distinct sorted values plus one boundary candidate on each
/// side. Ties resolve to the smallest threshold.
pub fn best_threshold(values: &[f64], same: &[bool], side: SameSide) -> Result<ThresholdScan> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("threshold scan over no values".into()));
    }
    if values.len() != same.len() {
        return Err(Error::Shape {
            op: "threshold scan",
            left: vec![values.len()],
            right: vec![same.len()],
        });
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "threshold scan".into(),
            index: i,
        });
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let total_same = same.iter().filter(|&&s| s).count();
    let total_diff = n - total_same;

    // Candidate k splits sorted values into the first k and the rest.
    let errors_for = |same_low: usize, k: usize| -> usize {
        let diff_low = k - same_low;
        match side {
            // First k predicted same.
            SameSide::Below => diff_low + (total_same - same_low),
            // Rest predicted same.
            SameSide::Above => same_low + (total_diff - diff_low),
        }
    };
    let threshold_for = |k: usize| -> f64 {
        if k == 0 {
            match side {
                SameSide::Below => sorted[0],
                SameSide::Above => sorted[0] - boundary_offset(sorted[0]),
            }
        } else if k == n {
            match side {
                SameSide::Below => sorted[n - 1] + boundary_offset(sorted[n - 1]),
                SameSide::Above => sorted[n - 1],
            }
        } else {
            0.5 * (sorted[k - 1] + sorted[k])
        }
    };

    let mut best = ThresholdScan {
        threshold: threshold_for(0),
        errors: errors_for(0, 0),
        total: n,
    };
    let mut same_low = 0;
    for k in 1..=n {
        if same[order[k - 1]] {
            same_low += 1;
        }
        if k < n && sorted[k - 1] == sorted[k] {
            continue;
        }
        let e = errors_for(same_low, k);
        if e < best.errors {
            best = ThresholdScan {
                threshold: threshold_for(k),
                errors: e,
                total: n,
            };
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn separable_distances() {
        let r = best_threshold(&[1.0, 2.0, 3.0, 4.0], &[true, true, false, false], SameSide::Below).unwrap();
        assert_eq!(r.threshold, 2.5);
        assert_eq!(r.errors, 0);
    }

    #[test]
    fn separable_scores() {
        let r = best_threshold(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false], SameSide::Above).unwrap();
        assert_eq!(r.threshold, 0.5);
        assert_eq!(r.accuracy(), 1.0);
    }

    #[test]
    fn all_same_puts_margin_above_max() {
        let r = best_threshold(&[0.5, 1.5, 1.0], &[true; 3], SameSide::Below).unwrap();
        assert_eq!(r.errors, 0);
        assert_eq!(r.threshold, 1.5 + 1.0);
    }

    #[test]
    fn all_equal_values_give_majority_accuracy() {
        let r = best_threshold(&[0.3; 5], &[true, false, false, true, false], SameSide::Above).unwrap();
        assert!((r.accuracy() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn interleaved_labels() {
        // Distances 1..6 with labels + - + - + -.
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let s = [true, false, true, false, true, false];
        let r = best_threshold(&v, &s, SameSide::Below).unwrap();
        assert_eq!(r.errors, errors_at(&v, &s, SameSide::Below, r.threshold));
        assert_eq!(r.errors, 2);
        assert_eq!(r.threshold, 1.5);
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(best_threshold(&[], &[], SameSide::Below).is_err());
        assert!(best_threshold(&[1.0], &[true, false], SameSide::Below).is_err());
    }

    proptest! {
        #[test]
        fn scan_result_is_consistent_and_optimal(
            values in prop::collection::vec(0u8..12, 1..40),
            labels in prop::collection::vec(any::<bool>(), 40),
            above in any::<bool>(),
        ) {
            let v: Vec<f64> = values.iter().map(|&x| x as f64 * 0.5).collect();
            let s = &labels[..v.len()];
            let side = if above { SameSide::Above } else { SameSide::Below };
            let r = best_threshold(&v, s, side).unwrap();
            prop_assert_eq!(r.errors, errors_at(&v, s, side, r.threshold));
            // Dense probe grid covering every region between values.
            for i in -4..=30 {
                let t = i as f64 * 0.25 - 0.125;
                prop_assert!(errors_at(&v, s, side, t) >= r.errors);
            }
        }
    }
}
