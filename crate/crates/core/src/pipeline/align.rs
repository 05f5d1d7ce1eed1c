//! Similarity-transform alignment from landmark correspondences.

use crate::dataset::Point;
use crate::error::{Error, Result};

/// `p ↦ s·R(θ)·p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub angle: f64,
    pub translation: [f64; 2],
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            angle: 0.0,
            translation: [0.0, 0.0],
        }
    }

    fn from_ab(a: f64, b: f64, translation: [f64; 2]) -> Self {
        Self {
            scale: a.hypot(b),
            angle: b.atan2(a),
            translation,
        }
    }

    /// `(s cos θ, s sin θ)`
    fn ab(&self) -> (f64, f64) {
        (self.scale * self.angle.cos(), self.scale * self.angle.sin())
    }

    pub fn apply(&self, p: Point) -> Point {
        let (a, b) = self.ab();
        [
            a * p[0] - b * p[1] + self.translation[0],
            b * p[0] + a * p[1] + self.translation[1],
        ]
    }

    pub fn inverse(&self) -> Result<Self> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidArgument(format!("similarity scale {} is not invertible", self.scale)));
        }
        let inv = Self {
            scale: 1.0 / self.scale,
            angle: -self.angle,
            translation: [0.0, 0.0],
        };
        let t = inv.apply(self.translation);
        Ok(Self {
            translation: [-t[0], -t[1]],
            ..inv
        })
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let (a1, b1) = self.ab();
        let (a2, b2) = other.ab();
        let t = self.apply(other.translation);
        Self::from_ab(a1 * a2 - b1 * b2, a1 * b2 + b1 * a2, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub transform: SimilarityTransform,
    /// Sum of squared distances between mapped source points and targets.
    pub residual: f64,
}

pub fn residual(t: &SimilarityTransform, src: &[Point], dst: &[Point]) -> f64 {
    src.iter()
        .zip(dst)
        .map(|(s, d)| {
            let p = t.apply(*s);
            (p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2)
        })
        .sum()
}

/// Least-squares similarity mapping `src` onto `dst`, in closed form: with
/// both point sets centered, `(s cos θ, s sin θ)` solves a 2×2 linear
/// problem whose matrix is a multiple of the identity.
pub fn estimate_similarity(src: &[Point], dst: &[Point]) -> Result<Alignment> {
    if src.len() != dst.len() {
        return Err(Error::Shape {
            op: "estimate_similarity",
            left: vec![src.len()],
            right: vec![dst.len()],
        });
    }
    if src.len() < 2 {
        return Err(Error::InvalidArgument("alignment needs at least 2 point pairs".into()));
    }
    if let Some(i) = src.iter().chain(dst).position(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::NonFinite {
            context: "landmarks".into(),
            index: i,
        });
    }
    let n = src.len() as f64;
    let mean = |ps: &[Point]| {
        let (sx, sy) = ps.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
        [sx / n, sy / n]
    };
    let (ms, md) = (mean(src), mean(dst));
    let (mut norm, mut a, mut b) = (0.0, 0.0, 0.0);
    for (s, d) in src.iter().zip(dst) {
        let (sx, sy) = (s[0] - ms[0], s[1] - ms[1]);
        let (dx, dy) = (d[0] - md[0], d[1] - md[1]);
        norm += sx * sx + sy * sy;
        a += sx * dx + sy * dy;
        b += sx * dy - sy * dx;
    }
    let spread = src.iter().map(|p| p[0].abs().max(p[1].abs())).fold(1.0, f64::max);
    if norm <= 1e-24 * spread * spread * n {
        return Err(Error::InvalidArgument("source landmarks are coincident".into()));
    }
    let (a, b) = (a / norm, b / norm);
    if a == 0.0 && b == 0.0 {
        return Err(Error::InvalidArgument("degenerate correspondence: zero scale".into()));
    }
    let t = [md[0] - (a * ms[0] - b * ms[1]), md[1] - (b * ms[0] + a * ms[1])];
    let transform = SimilarityTransform::from_ab(a, b, t);
    Ok(Alignment {
        residual: residual(&transform, src, dst),
        transform,
    })
}
