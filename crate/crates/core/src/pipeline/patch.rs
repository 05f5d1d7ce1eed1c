//! Patch cropping in the aligned frame and multi-network feature
//! concatenation.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::align::SimilarityTransform;
use crate::convnet::{forward, NetworkConfig, NetworkParams};
use crate::dataset::Point;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of the aligned face: its extent and the canonical landmark
/// positions that patch anchors refer to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalFrame {
    pub height: usize,
    pub width: usize,
    pub landmarks: Vec<Point>,
}

impl CanonicalFrame {
    pub fn center(&self) -> Point {
        [(self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Center of the canonical frame.
    Global,
    /// Canonical position of a landmark.
    Landmark(usize),
}

/// One face patch: where it sits in the canonical frame, how large it is
/// and how it is resampled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub name: String,
    /// Key of the network that embeds this patch. A patch and its flipped
    /// counterpart share one network.
    pub network: String,
    pub anchor: Anchor,
    #[serde(default)]
    pub offset: [f64; 2],
    /// `[width, height]` of the crop in canonical pixels before `scale`.
    pub extent: [f64; 2],
    #[serde(default = "one")]
    pub scale: f64,
    /// `[height, width]` of the resampled patch.
    pub output: [usize; 2],
    /// Source channels to keep, in order; empty keeps all.
    #[serde(default)]
    pub channels: Vec<usize>,
    #[serde(default)]
    pub flip: bool,
}

fn one() -> f64 {
    1.0
}

impl PatchSpec {
    /// The full canonical frame at its own resolution.
    pub fn full_frame(name: &str, frame: &CanonicalFrame) -> Self {
        Self {
            name: name.into(),
            network: name.into(),
            anchor: Anchor::Global,
            offset: [0.0, 0.0],
            extent: [frame.width as f64, frame.height as f64],
            scale: 1.0,
            output: [frame.height, frame.width],
            channels: Vec::new(),
            flip: false,
        }
    }

    pub fn flipped(&self) -> Self {
        Self {
            name: format!("{}-flip", self.name),
            flip: !self.flip,
            ..self.clone()
        }
    }

    /// Shape of the extracted patch for an image with `channels` channels.
    pub fn output_shape(&self, channels: usize) -> [usize; 3] {
        let c = if self.channels.is_empty() { channels } else { self.channels.len() };
        [c, self.output[0], self.output[1]]
    }

    fn check(&self, channels: usize, frame: &CanonicalFrame) -> Result<Point> {
        let bad = |msg: String| Err(Error::Config(format!("patch `{}`: {msg}", self.name)));
        if self.output[0] == 0 || self.output[1] == 0 {
            return bad("zero output extent".into());
        }
        let (w, h) = (self.extent[0] * self.scale, self.extent[1] * self.scale);
        if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
            return bad(format!("degenerate crop {w}x{h}"));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c >= channels) {
            return bad(format!("channel {c} out of range for {channels} channels"));
        }
        let anchor = match self.anchor {
            Anchor::Global => frame.center(),
            Anchor::Landmark(i) => match frame.landmarks.get(i) {
                Some(p) => *p,
                None => return bad(format!("landmark {i} out of range for {} landmarks", frame.landmarks.len())),
            },
        };
        Ok([anchor[0] + self.offset[0], anchor[1] + self.offset[1]])
    }
}

/// Bilinear sample of channel `c` with edge replication outside the image.
fn sample(data: &[f64], c: usize, h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |yy: usize, xx: usize| data[(c * h + yy) * w + xx];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Crops `spec` from `image`, where `transform` maps image coordinates into
/// the canonical frame. Output pixel `(r, c)` samples the canonical point
/// at the center of its cell in the crop rectangle; the flip is applied
/// last.
pub fn extract_patch(image: &Tensor, spec: &PatchSpec, transform: &SimilarityTransform, frame: &CanonicalFrame) -> Result<Tensor> {
    let &[ch, h, w] = image.shape() else {
        return Err(Error::InvalidArgument(format!("image must be CHW, got {:?}", image.shape())));
    };
    let center = spec.check(ch, frame)?;
    let to_image = transform.inverse()?;
    let [oh, ow] = spec.output;
    let (cw, chh) = (spec.extent[0] * spec.scale, spec.extent[1] * spec.scale);
    let channels: Vec<usize> = if spec.channels.is_empty() { (0..ch).collect() } else { spec.channels.clone() };
    let data = image.data();
    let mut out = vec![0.0; channels.len() * oh * ow];
    for r in 0..oh {
        let cy = center[1] - chh / 2.0 + (r as f64 + 0.5) * chh / oh as f64;
        for c in 0..ow {
            let cx = center[0] - cw / 2.0 + (c as f64 + 0.5) * cw / ow as f64;
            let [sx, sy] = to_image.apply([cx, cy]);
            let col = if spec.flip { ow - 1 - c } else { c };
            for (k, &src_c) in channels.iter().enumerate() {
                out[(k * oh + r) * ow + col] = sample(data, src_c, h, w, sx, sy);
            }
        }
    }
    Tensor::new(vec![channels.len(), oh, ow], out)
}

/// A trained network used to embed patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchNetwork {
    pub config: NetworkConfig,
    pub params: NetworkParams,
}

impl PatchNetwork {
    pub fn embed(&self, patch: &Tensor) -> Result<Vec<f64>> {
        Ok(forward(patch, &self.params.conv, &self.config)?.0)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.deepid_dim
    }
}

/// Concatenated DeepID2 vectors of every spec, in spec order.
pub fn extract_ensemble(
    image: &Tensor,
    transform: &SimilarityTransform,
    frame: &CanonicalFrame,
    specs: &[PatchSpec],
    networks: &HashMap<String, PatchNetwork>,
) -> Result<Vec<f64>> {
    let blocks: Vec<Vec<f64>> = specs
        .par_iter()
        .map(|spec| {
            let net = networks
                .get(&spec.network)
                .ok_or_else(|| Error::Config(format!("no network `{}` for patch `{}`", spec.network, spec.name)))?;
            let patch = extract_patch(image, spec, transform, frame)?;
            net.embed(&patch)
        })
        .collect::<Result<_>>()?;
    Ok(blocks.concat())
}
