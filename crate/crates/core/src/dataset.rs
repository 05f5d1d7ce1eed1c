//! Labeled image datasets: the synthetic prototype-plus-perturbation
//! generator, manifest ingestion and pair files.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

/// 2-D point in image coordinates, `[x, y]`.
pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    /// CHW image with values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub landmarks: Option<Vec<Point>>,
}

/// Images with densely indexed identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
    by_identity: Vec<Vec<usize>>,
    label_names: Vec<String>,
}

impl LabeledDataset {
    /// Checks that labels are dense in `0..label_names.len()`, that every
    /// identity has a sample and that all images share one shape.
    pub fn new(samples: Vec<Sample>, label_names: Vec<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset("no samples".into()));
        }
        let shape = samples[0].image.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::InvalidArgument(format!("images must be CHW, got {shape:?}")));
        }
        let mut by_identity = vec![Vec::new(); label_names.len()];
        for (i, s) in samples.iter().enumerate() {
            if s.image.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "dataset image",
                    left: shape.clone(),
                    right: s.image.shape().to_vec(),
                });
            }
            by_identity
                .get_mut(s.label)
                .ok_or_else(|| Error::InvalidArgument(format!("sample {i} has label {} out of range", s.label)))?
                .push(i);
        }
        if let Some(id) = by_identity.iter().position(|v| v.is_empty()) {
            return Err(Error::InvalidArgument(format!("identity {id} has no samples")));
        }
        Ok(Self {
            samples,
            by_identity,
            label_names,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.by_identity.len()
    }

    pub fn identity(&self, label: usize) -> &[usize] {
        &self.by_identity[label]
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.samples[0].image.shape();
        [s[0], s[1], s[2]]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Keeps the listed identities (in the given order), relabeled densely.
    pub fn select_identities(&self, ids: &[usize]) -> Result<Self> {
        let mut samples = Vec::new();
        let mut names = Vec::with_capacity(ids.len());
        for (new, &old) in ids.iter().enumerate() {
            let members = self
                .by_identity
                .get(old)
                .ok_or_else(|| Error::InvalidArgument(format!("identity {old} out of range")))?;
            names.push(self.label_names[old].clone());
            for &i in members {
                let mut s = self.samples[i].clone();
                s.label = new;
                samples.push(s);
            }
        }
        Self::new(samples, names)
    }

    /// Splits into the first `k` identities and the remainder.
    pub fn split_identities(&self, k: usize) -> Result<(Self, Self)> {
        let n = self.num_identities();
        if k == 0 || k >= n {
            return Err(Error::InvalidArgument(format!("cannot split {n} identities at {k}")));
        }
        let head: Vec<usize> = (0..k).collect();
        let tail: Vec<usize> = (k..n).collect();
        Ok((self.select_identities(&head)?, self.select_identities(&tail)?))
    }
}

fn default_identities() -> usize {
    32
}
fn default_samples() -> usize {
    20
}
fn default_channels() -> usize {
    1
}
fn default_height() -> usize {
    28
}
fn default_width() -> usize {
    24
}
fn default_prototype_std() -> f64 {
    0.15
}
fn default_identity_components() -> usize {
    16
}
fn default_smoothing() -> usize {
    2
}
fn default_noise() -> f64 {
    0.03
}
fn default_shift() -> usize {
    2
}
fn default_brightness() -> f64 {
    0.1
}
fn default_nuisance_patterns() -> usize {
    8
}
fn default_nuisance_strength() -> f64 {
    0.15
}

/// Parameters of the prototype-plus-perturbation generator.
///
/// Every identity is a smoothed random prototype. A sample is the prototype
/// shifted by a random integer offset, plus a brightness offset, plus a
/// random combination of smooth "illumination" patterns shared by all
/// identities, plus white noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_identities")]
    pub identities: usize,
    #[serde(default = "default_samples")]
    pub samples_per_identity: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    /// Pixel standard deviation of each prototype around mid-gray.
    #[serde(default = "default_prototype_std")]
    pub prototype_std: f64,
    /// Prototypes are random combinations of this many shared smooth
    /// patterns; 0 draws each prototype as an independent smooth field.
    #[serde(default = "default_identity_components")]
    pub identity_components: usize,
    /// Number of 3×3 box-blur passes applied to prototypes and patterns.
    #[serde(default = "default_smoothing")]
    pub smoothing: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Maximum absolute integer shift in each direction.
    #[serde(default = "default_shift")]
    pub shift: usize,
    /// Half-width of the uniform additive brightness jitter.
    #[serde(default = "default_brightness")]
    pub brightness: f64,
    #[serde(default = "default_nuisance_patterns")]
    pub nuisance_patterns: usize,
    /// Pixel standard deviation of the illumination term, a random
    /// combination of the shared pattern bank.
    #[serde(default = "default_nuisance_strength")]
    pub nuisance_strength: f64,
    /// Attach landmarks (a fixed template moved with the shift).
    #[serde(default)]
    pub landmarks: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.identities == 0 || self.samples_per_identity == 0 {
            return bad("identities and samples_per_identity must be positive");
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("image extents must be positive");
        }
        for (name, v) in [
            ("prototype_std", self.prototype_std),
            ("noise", self.noise),
            ("brightness", self.brightness),
            ("nuisance_strength", self.nuisance_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// Canonical landmark positions: eye centers, nose tip, mouth corners.
    pub fn landmark_template(&self) -> Vec<Point> {
        let (w, h) = (self.width as f64, self.height as f64);
        [(0.3, 0.35), (0.7, 0.35), (0.5, 0.55), (0.35, 0.75), (0.65, 0.75)]
            .iter()
            .map(|&(x, y)| [x * (w - 1.0), y * (h - 1.0)])
            .collect()
    }
}

fn box_blur(img: &mut [f64], c: usize, h: usize, w: usize) {
    let src = img.to_vec();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += src[base + yy * w + xx];
                    }
                }
                img[base + y * w + x] = acc / 9.0;
            }
        }
    }
}

/// Smoothed white noise rescaled to zero mean and unit pixel std.
fn smooth_field(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, passes: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..c * h * w).map(|_| StandardNormal.sample(rng)).collect();
    for _ in 0..passes {
        box_blur(&mut v, c, h, w);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    let inv = if std > 0.0 { 1.0 / std } else { 0.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) * inv);
    v
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Generates `spec.identities × spec.samples_per_identity` samples. Each
/// identity draws from its own random stream, so the first k identities of
/// a larger dataset equal a k-identity dataset with the same seed.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let [c, h, w] = spec.image_shape();
    let mut bank_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let basis: Vec<Vec<f64>> = (0..spec.identity_components)
        .map(|_| smooth_field(&mut bank_rng, c, h, w, spec.smoothing))
        .collect();
    let bank: Vec<Vec<f64>> = (0..spec.nuisance_patterns)
        .map(|_| smooth_field(&mut bank_rng, c, h, w, spec.smoothing + 2))
        .collect();
    let template = spec.landmark_template();
    let s = spec.shift as i64;
    let n = c * h * w;

    let mut samples = Vec::with_capacity(spec.identities * spec.samples_per_identity);
    let mut names = Vec::with_capacity(spec.identities);
    for id in 0..spec.identities {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(id as u64 + 1);
        let proto: Vec<f64> = if basis.is_empty() {
            smooth_field(&mut rng, c, h, w, spec.smoothing)
                .into_iter()
                .map(|v| 0.5 + spec.prototype_std * v)
                .collect()
        } else {
            let gain = spec.prototype_std / (basis.len() as f64).sqrt();
            let mut p = vec![0.5; n];
            for b in &basis {
                let a: f64 = StandardNormal.sample(&mut rng);
                p.iter_mut().zip(b).for_each(|(v, bv)| *v += gain * a * bv);
            }
            p
        };
        names.push(format!("id{id:04}"));
        for k in 0..spec.samples_per_identity {
            let dy = rng.gen_range(-s..=s);
            let dx = rng.gen_range(-s..=s);
            let bright = if spec.brightness > 0.0 {
                rng.gen_range(-spec.brightness..=spec.brightness)
            } else {
                0.0
            };
            let mut light = vec![0.0; n];
            if !bank.is_empty() {
                let gain = spec.nuisance_strength / (bank.len() as f64).sqrt();
                for b in &bank {
                    let a: f64 = StandardNormal.sample(&mut rng);
                    light.iter_mut().zip(b).for_each(|(v, bv)| *v += gain * a * bv);
                }
            }
            let mut data = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
                    for x in 0..w {
                        let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
                        let i = (ch * h + y) * w + x;
                        let mut v = proto[(ch * h + sy) * w + sx] + bright + light[i];
                        if spec.noise > 0.0 {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            v += spec.noise * z;
                        }
                        data[i] = quantize(v);
                    }
                }
            }
            let landmarks = spec.landmarks.then(|| {
                template
                    .iter()
                    .map(|p| [p[0] + dx as f64, p[1] + dy as f64])
                    .collect()
            });
            samples.push(Sample {
                name: format!("id{id:04}_{k:03}"),
                image: Tensor::new(vec![c, h, w], data)?,
                label: id,
                landmarks,
            });
        }
    }
    LabeledDataset::new(samples, names)
}

fn image_extension(channels: usize) -> &'static str {
    if channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

fn format_landmarks(points: &[Point]) -> String {
    points
        .iter()
        .map(|p| format!("{},{}", p[0], p[1]))
        .collect::<Vec<_>>()
        .join(";")
}

/// Writes `images/<name>.pgm|ppm` and `manifest.tsv` under `dir`.
pub fn write_dataset(ds: &LabeledDataset, dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir)?;
    let ext = image_extension(ds.image_shape()[0]);
    let mut manifest = String::new();
    for s in ds.samples() {
        let rel = format!("images/{}.{ext}", s.name);
        imageio::write_pnm(&dir.join(&rel), &s.image)?;
        manifest.push_str(&rel);
        manifest.push('\t');
        manifest.push_str(&ds.label_names()[s.label]);
        if let Some(lm) = &s.landmarks {
            manifest.push('\t');
            manifest.push_str(&format_landmarks(lm));
        }
        manifest.push('\n');
    }
    fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

fn parse_landmarks(field: &str, record: usize) -> Result<Vec<Point>> {
    let err = |msg: String| Error::Manifest { record, msg };
    field
        .split(';')
        .map(|pt| {
            let (x, y) = pt
                .split_once(',')
                .ok_or_else(|| err(format!("landmark `{pt}` is not `x,y`")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("bad landmark coordinate `{s}`")))
            };
            Ok([parse(x)?, parse(y)?])
        })
        .collect()
}

/// Reads a manifest of `relative-path<TAB>identity[<TAB>x,y;x,y...]`
/// records. Paths resolve against `root`. Labels are densified in order of
/// first appearance; repeated paths keep their first record.
pub fn ingest_dataset(root: &Path, manifest: &Path) -> Result<LabeledDataset> {
    let text = fs::read_to_string(manifest)?;
    let mut samples: Vec<Sample> = Vec::new();
    let mut labels: HashMap<String, usize> = HashMap::new();
    let mut names: Vec<String> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut shape: Option<Vec<usize>> = None;
    for (lineno, line) in text.lines().enumerate() {
        let record = lineno + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(Error::Manifest {
                record,
                msg: format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let (path, label) = (fields[0].trim(), fields[1].trim());
        if path.is_empty() || label.is_empty() {
            return Err(Error::Manifest {
                record,
                msg: "empty path or label".into(),
            });
        }
        if let Some(first) = seen.get(path) {
            log::warn!("manifest record {record}: duplicate image {path} (first listed at record {first}), skipped");
            continue;
        }
        seen.insert(path.to_string(), record);
        let landmarks = fields.get(2).map(|f| parse_landmarks(f, record)).transpose()?;
        let image = imageio::read_pnm(&root.join(path)).map_err(|e| Error::Manifest {
            record,
            msg: e.to_string(),
        })?;
        match &shape {
            None => shape = Some(image.shape().to_vec()),
            Some(s) if s.as_slice() != image.shape() => {
                return Err(Error::Manifest {
                    record,
                    msg: format!("image extents {:?} differ from {:?}", image.shape(), s),
                })
            }
            _ => {}
        }
        if let Some(lm) = &landmarks {
            let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
            if let Some(p) = lm.iter().find(|p| p[0] < 0.0 || p[1] < 0.0 || p[0] > w - 1.0 || p[1] > h - 1.0) {
                return Err(Error::Manifest {
                    record,
                    msg: format!("landmark {p:?} outside the {w}x{h} image"),
                });
            }
        }
        let next = labels.len();
        let id = *labels.entry(label.to_string()).or_insert_with(|| {
            names.push(label.to_string());
            next
        });
        let name = Path::new(path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.to_string());
        samples.push(Sample {
            name,
            image,
            label: id,
            landmarks,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!("manifest {} lists no images", manifest.display())));
    }
    LabeledDataset::new(samples, names)
}

/// One verification pair of sample indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// Writes pairs as `name_a<TAB>name_b<TAB>1|0`.
pub fn write_pairs(path: &Path, ds: &LabeledDataset, pairs: &[Pair]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for p in pairs {
        writeln!(out, "{}\t{}\t{}", ds.sample(p.a).name, ds.sample(p.b).name, u8::from(p.same))?;
    }
    Ok(())
}

/// Reads a pairs file, resolving names against the dataset.
pub fn read_pairs(path: &Path, ds: &LabeledDataset) -> Result<Vec<Pair>> {
    let index: HashMap<&str, usize> = ds.samples().iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let record = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        let err = |msg: String| Error::Manifest { record, msg };
        if f.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", f.len())));
        }
        let look = |n: &str| index.get(n).copied().ok_or_else(|| err(format!("unknown image `{n}`")));
        let same = match f[2].trim() {
            "1" => true,
            "0" => false,
            other => return Err(err(format!("label `{other}` is not 1 or 0"))),
        };
        pairs.push(Pair {
            a: look(f[0].trim())?,
            b: look(f[1].trim())?,
            same,
        });
    }
    Ok(pairs)
}
