//! The feature-extraction ConvNet: stacked convolution / pooling / ReLU
//! layers feeding a fully-connected DeepID2 layer, with an exact manual
//! backward pass.
//!
//! Convolutions are "valid" (no padding). When `multi_scale` is set, the
//! DeepID2 layer is connected both to the final activation and to the input
//! of the last weighted layer (the pooled third-layer maps in the standard
//! configuration).

pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use layers::{ConvGeometry, MapShape, WeightSharing};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    /// Weights shared only within each cell of a `grid` over the output map.
    ConvLocallyShared { grid: [usize; 2] },
    /// Independent weights at every output location.
    LocallyConnected,
    MaxPool,
    Relu,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::ConvLocallyShared { .. } => "conv-locally-shared",
            LayerKind::LocallyConnected => "locally-connected",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Relu => "relu",
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv | LayerKind::ConvLocallyShared { .. } | LayerKind::LocallyConnected
        )
    }

    fn sharing(&self) -> WeightSharing {
        match *self {
            LayerKind::ConvLocallyShared { grid } => WeightSharing::Grid { grid },
            LayerKind::LocallyConnected => WeightSharing::None,
            _ => WeightSharing::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub kernel: [usize; 2],
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: [usize; 2]) -> Self {
        Self {
            kind: LayerKind::Conv,
            kernel,
            stride: 1,
            in_channels,
            out_channels,
        }
    }

    pub fn locally_shared(in_channels: usize, out_channels: usize, kernel: [usize; 2], grid: [usize; 2]) -> Self {
        Self {
            kind: LayerKind::ConvLocallyShared { grid },
            ..Self::conv(in_channels, out_channels, kernel)
        }
    }

    pub fn locally_connected(in_channels: usize, out_channels: usize, kernel: [usize; 2]) -> Self {
        Self {
            kind: LayerKind::LocallyConnected,
            ..Self::conv(in_channels, out_channels, kernel)
        }
    }

    pub fn max_pool(channels: usize, kernel: [usize; 2], stride: usize) -> Self {
        Self {
            kind: LayerKind::MaxPool,
            kernel,
            stride,
            in_channels: channels,
            out_channels: channels,
        }
    }

    pub fn relu(channels: usize) -> Self {
        Self {
            kind: LayerKind::Relu,
            kernel: [1, 1],
            stride: 1,
            in_channels: channels,
            out_channels: channels,
        }
    }

    /// Output map shape for a given input, or an error message.
    pub fn output_shape(&self, input: MapShape) -> std::result::Result<MapShape, String> {
        let [c, h, w] = input;
        if c != self.in_channels {
            return Err(format!("expects {} input channels, got {c}", self.in_channels));
        }
        if self.kind == LayerKind::Relu {
            return Ok(input);
        }
        let [kh, kw] = self.kernel;
        if kh == 0 || kw == 0 || self.stride == 0 {
            return Err("kernel extents and stride must be positive".into());
        }
        if kh > h || kw > w {
            return Err(format!("kernel {kh}x{kw} larger than input {h}x{w}"));
        }
        let oh = (h - kh) / self.stride + 1;
        let ow = (w - kw) / self.stride + 1;
        if self.kind == LayerKind::MaxPool && self.out_channels != c {
            return Err("max-pool cannot change the channel count".into());
        }
        if let LayerKind::ConvLocallyShared { grid } = self.kind {
            if grid[0] == 0 || grid[1] == 0 || oh % grid[0] != 0 || ow % grid[1] != 0 {
                return Err(format!("sharing grid {grid:?} does not divide output {oh}x{ow}"));
            }
        }
        Ok([self.out_channels, oh, ow])
    }
}

/// Architecture of one feature-extraction network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `[channels, height, width]` of the input patch.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    #[serde(default = "default_deepid_dim")]
    pub deepid_dim: usize,
    /// Connect the DeepID2 layer to the last weighted layer's input as well
    /// as to the final activation.
    #[serde(default = "default_true")]
    pub multi_scale: bool,
    /// Subtracted from every input value before the first layer.
    #[serde(default = "default_input_center")]
    pub input_center: f64,
}

fn default_input_center() -> f64 {
    0.5
}

fn default_deepid_dim() -> usize {
    160
}

fn default_true() -> bool {
    true
}

impl NetworkConfig {
    /// Desk-scale network for 28×24 inputs (channel widths roughly a quarter
    /// of the full-size network).
    pub fn desk(channels: usize) -> Self {
        Self::desk_sized(channels, [8, 16, 24, 32], 160)
    }

    /// Desk-scale layout with explicit channel widths and DeepID2 size.
    pub fn desk_sized(channels: usize, widths: [usize; 4], deepid_dim: usize) -> Self {
        let [c1, c2, c3, c4] = widths;
        Self {
            input: [channels, 28, 24],
            layers: vec![
                LayerSpec::conv(channels, c1, [3, 3]),
                LayerSpec::relu(c1),
                LayerSpec::max_pool(c1, [2, 2], 2),
                LayerSpec::conv(c1, c2, [2, 2]),
                LayerSpec::relu(c2),
                LayerSpec::max_pool(c2, [2, 2], 2),
                LayerSpec::locally_shared(c2, c3, [3, 2], [2, 2]),
                LayerSpec::relu(c3),
                LayerSpec::max_pool(c3, [2, 2], 2),
                LayerSpec::locally_connected(c3, c4, [1, 1]),
                LayerSpec::relu(c4),
            ],
            deepid_dim,
            multi_scale: true,
            input_center: default_input_center(),
        }
    }

    /// Full-size layout for 55×47 RGB inputs.
    pub fn full_size() -> Self {
        Self {
            input: [3, 55, 47],
            layers: vec![
                LayerSpec::conv(3, 20, [4, 4]),
                LayerSpec::relu(20),
                LayerSpec::max_pool(20, [2, 2], 2),
                LayerSpec::conv(20, 40, [3, 3]),
                LayerSpec::relu(40),
                LayerSpec::max_pool(40, [2, 2], 2),
                LayerSpec::locally_shared(40, 60, [3, 3], [2, 2]),
                LayerSpec::relu(60),
                LayerSpec::max_pool(60, [2, 2], 2),
                LayerSpec::locally_connected(60, 80, [2, 2]),
                LayerSpec::relu(80),
            ],
            deepid_dim: 160,
            multi_scale: true,
            input_center: default_input_center(),
        }
    }

    /// Same layers with a different input size; map sizes follow.
    pub fn with_input(mut self, input: [usize; 3]) -> Self {
        self.input = input;
        self
    }

    /// Activation shapes: entry 0 is the input, entry `i + 1` the output of
    /// layer `i`.
    pub fn shapes(&self) -> Result<Vec<MapShape>> {
        if !self.input_center.is_finite() {
            return Err(Error::Config(format!("input_center {} is not finite", self.input_center)));
        }
        if self.input.iter().any(|&e| e == 0) {
            return Err(Error::Config(format!("empty input shape {:?}", self.input)));
        }
        if self.deepid_dim == 0 {
            return Err(Error::Config("deepid_dim must be positive".into()));
        }
        let mut shapes = vec![self.input];
        for (i, spec) in self.layers.iter().enumerate() {
            let out = spec
                .output_shape(*shapes.last().unwrap())
                .map_err(|msg| Error::Layer {
                    layer: i,
                    kind: spec.kind.name().into(),
                    msg,
                })?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Activation indices that feed the DeepID2 layer.
    pub fn taps(&self) -> Vec<usize> {
        let last = self.layers.len();
        let mut taps = Vec::new();
        if self.multi_scale {
            if let Some(lw) = self.layers.iter().rposition(|l| l.kind.is_weighted()) {
                if lw != last {
                    taps.push(lw);
                }
            }
        }
        taps.push(last);
        taps
    }

    pub fn deepid_input_len(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        Ok(self.taps().iter().map(|&t| shapes[t].iter().product::<usize>()).sum())
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    fn geometry(&self, layer: usize, shapes: &[MapShape]) -> ConvGeometry {
        let spec = &self.layers[layer];
        ConvGeometry {
            input: shapes[layer],
            output: shapes[layer + 1],
            kernel: spec.kernel,
            stride: spec.stride,
            sharing: spec.kind.sharing(),
        }
    }

    /// `(weight shape, bias shape)` of a weighted layer.
    fn param_shapes(&self, layer: usize, shapes: &[MapShape]) -> (Vec<usize>, Vec<usize>) {
        let spec = &self.layers[layer];
        let [_, oh, ow] = shapes[layer + 1];
        let sets = spec.kind.sharing().sets(oh, ow);
        (
            vec![sets, spec.out_channels, spec.in_channels, spec.kernel[0], spec.kernel[1]],
            vec![sets, spec.out_channels],
        )
    }
}

/// Weight and bias of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape().to_vec()),
            bias: Tensor::zeros(self.bias.shape().to_vec()),
        }
    }

    fn axpy(&mut self, alpha: f64, other: &LayerParams) -> Result<()> {
        self.weight.axpy(alpha, &other.weight)?;
        self.bias.axpy(alpha, &other.bias)
    }

    /// Dense affine map `weight · x + bias` for a rank-2 weight.
    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        let out = self.bias.len();
        let inp = x.len();
        let w = self.weight.data();
        (0..out)
            .map(|o| {
                let row = &w[o * inp..(o + 1) * inp];
                self.bias.data()[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

/// θ_c: all ConvNet parameters up to and including the DeepID2 layer.
/// The same type carries their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub layers: Vec<Option<LayerParams>>,
    pub deepid: LayerParams,
}

impl ConvParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| l.as_ref().map(LayerParams::zeros_like)).collect(),
            deepid: self.deepid.zeros_like(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &ConvParams) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (Some(a), Some(b)) => a.axpy(alpha, b)?,
                (None, None) => {}
                _ => return Err(Error::Config("parameter layout mismatch".into())),
            }
        }
        self.deepid.axpy(alpha, &other.deepid)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.for_each_tensor_mut(|_, t| t.scale(alpha));
    }

    pub fn sum_sq(&self) -> f64 {
        let mut s = 0.0;
        self.for_each_tensor(|_, t| s += t.sum_sq());
        s
    }

    pub fn num_values(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    /// Visits every tensor with a stable name, in a fixed order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(l) = l {
                f(&format!("layer{i}.weight"), &l.weight);
                f(&format!("layer{i}.bias"), &l.bias);
            }
        }
        f("deepid.weight", &self.deepid.weight);
        f("deepid.bias", &self.deepid.bias);
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Some(l) = l {
                f(&format!("layer{i}.weight"), &mut l.weight);
                f(&format!("layer{i}.bias"), &mut l.bias);
            }
        }
        f("deepid.weight", &mut self.deepid.weight);
        f("deepid.bias", &mut self.deepid.bias);
    }

    /// All values concatenated in [`Self::for_each_tensor`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        self.for_each_tensor(|_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Inverse of [`Self::flatten`].
    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::Shape {
                op: "assign_flat",
                left: vec![values.len()],
                right: vec![self.num_values()],
            });
        }
        let mut offset = 0;
        self.for_each_tensor_mut(|_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    pub fn first_non_finite(&self) -> Option<String> {
        let mut bad = None;
        self.for_each_tensor(|name, t| {
            if bad.is_none() && t.first_non_finite().is_some() {
                bad = Some(name.to_string());
            }
        });
        bad
    }
}

/// Parameters of the verification loss (θ_ve): the contrastive margin `m`
/// and the cosine loss scale `w` and shift `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifParams {
    pub margin: f64,
    pub scale: f64,
    pub shift: f64,
}

impl Default for VerifParams {
    fn default() -> Self {
        Self {
            margin: 1.0,
            scale: 1.0,
            shift: 0.0,
        }
    }
}

/// Everything learned during training: θ_c, the softmax head θ_id and θ_ve.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub conv: ConvParams,
    pub ident: LayerParams,
    pub verif: VerifParams,
}

impl NetworkParams {
    pub fn num_classes(&self) -> usize {
        self.ident.bias.len()
    }

    pub fn to_container(&self, cfg: &NetworkConfig) -> TensorContainer {
        let mut c = TensorContainer::new(json!({
            "kind": "deepid2-network",
            "config": cfg,
            "verif": self.verif,
        }));
        self.conv.for_each_tensor(|name, t| c.push(name, t.clone()));
        c.push("ident.weight", self.ident.weight.clone());
        c.push("ident.bias", self.ident.bias.clone());
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<(NetworkConfig, NetworkParams)> {
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("deepid2-network") {
            return Err(Error::Container("not a network parameter file".into()));
        }
        let cfg: NetworkConfig = serde_json::from_value(c.meta["config"].clone())?;
        let verif: VerifParams = serde_json::from_value(c.meta["verif"].clone())?;
        let ident = LayerParams {
            weight: c.get("ident.weight")?.clone(),
            bias: c.get("ident.bias")?.clone(),
        };
        let mut params = init_params(&cfg, ident.bias.len(), 0)?;
        let mut missing = None;
        params.conv.for_each_tensor_mut(|name, t| match c.get(name) {
            Ok(src) if src.shape() == t.shape() => *t = src.clone(),
            _ => {
                if missing.is_none() {
                    missing = Some(name.to_string());
                }
            }
        });
        if let Some(name) = missing {
            return Err(Error::Container(format!("missing or misshapen tensor `{name}`")));
        }
        params.ident = ident;
        params.verif = verif;
        Ok((cfg, params))
    }

    pub fn save(&self, cfg: &NetworkConfig, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container(cfg).save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<(NetworkConfig, NetworkParams)> {
        Self::from_container(&TensorContainer::load(path)?)
    }
}

/// Deterministic initialization: He-normal weights scaled by fan-in, zero
/// biases, margin 1.0, cosine scale 1 and shift 0.
pub fn init_params(cfg: &NetworkConfig, num_classes: usize, seed: u64) -> Result<NetworkParams> {
    let shapes = cfg.shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut he = |shape: Vec<usize>, fan_in: usize| -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("valid std");
        Tensor::from_raw(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
    };
    let mut layers = Vec::with_capacity(cfg.layers.len());
    for (i, spec) in cfg.layers.iter().enumerate() {
        if spec.kind.is_weighted() {
            let (ws, bs) = cfg.param_shapes(i, &shapes);
            let fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1];
            layers.push(Some(LayerParams {
                weight: he(ws, fan_in),
                bias: Tensor::zeros(bs),
            }));
        } else {
            layers.push(None);
        }
    }
    let din = cfg.deepid_input_len()?;
    let deepid = LayerParams {
        weight: he(vec![cfg.deepid_dim, din], din),
        bias: Tensor::zeros(vec![cfg.deepid_dim]),
    };
    // Softmax head: unit-gain scaling keeps initial logits O(1).
    let head_dist = Normal::new(0.0, (1.0 / cfg.deepid_dim as f64).sqrt()).expect("valid std");
    let ident = LayerParams {
        weight: Tensor::from_raw(
            vec![num_classes, cfg.deepid_dim],
            (0..num_classes * cfg.deepid_dim).map(|_| head_dist.sample(&mut rng)).collect(),
        ),
        bias: Tensor::zeros(vec![num_classes]),
    };
    Ok(NetworkParams {
        conv: ConvParams { layers, deepid },
        ident,
        verif: VerifParams::default(),
    })
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[i + 1]` the output of layer `i`.
    pub activations: Vec<Tensor>,
    /// Concatenated tapped activations feeding the DeepID2 layer.
    pub deepid_input: Vec<f64>,
    /// DeepID2 pre-activation.
    pub deepid_pre: Vec<f64>,
}

fn check_param_layout(cfg: &NetworkConfig, shapes: &[MapShape], params: &ConvParams) -> Result<()> {
    if params.layers.len() != cfg.layers.len() {
        return Err(Error::Config(format!(
            "parameters hold {} layers, config has {}",
            params.layers.len(),
            cfg.layers.len()
        )));
    }
    for (i, spec) in cfg.layers.iter().enumerate() {
        let bad = |msg: String| Error::Layer {
            layer: i,
            kind: spec.kind.name().into(),
            msg,
        };
        match (&params.layers[i], spec.kind.is_weighted()) {
            (Some(p), true) => {
                let (ws, bs) = cfg.param_shapes(i, shapes);
                if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                    return Err(bad(format!(
                        "parameter shapes {:?}/{:?}, expected {ws:?}/{bs:?}",
                        p.weight.shape(),
                        p.bias.shape()
                    )));
                }
            }
            (None, false) => {}
            _ => return Err(bad("parameter presence does not match layer kind".into())),
        }
    }
    Ok(())
}

/// `f = Conv(x, θ_c)`: returns the DeepID2 vector and the trace needed by
/// [`backward`].
pub fn forward(x: &Tensor, params: &ConvParams, cfg: &NetworkConfig) -> Result<(Vec<f64>, ForwardTrace)> {
    let shapes = cfg.shapes()?;
    if x.shape() != cfg.input.as_slice() {
        return Err(Error::Layer {
            layer: 0,
            kind: "input".into(),
            msg: format!("input shape {:?}, expected {:?}", x.shape(), cfg.input),
        });
    }
    check_param_layout(cfg, &shapes, params)?;

    let mut activations = Vec::with_capacity(cfg.layers.len() + 1);
    if cfg.input_center == 0.0 {
        activations.push(x.clone());
    } else {
        let centered = x.data().iter().map(|v| v - cfg.input_center).collect();
        activations.push(Tensor::from_raw(x.shape().to_vec(), centered));
    }
    for (i, spec) in cfg.layers.iter().enumerate() {
        let input = activations[i].data();
        let out_shape = shapes[i + 1];
        let mut out = vec![0.0; out_shape.iter().product()];
        match spec.kind {
            LayerKind::Relu => layers::relu_forward(input, &mut out),
            LayerKind::MaxPool => {
                layers::maxpool_forward(shapes[i], out_shape, spec.kernel, spec.stride, input, &mut out)
            }
            _ => {
                let p = params.layers[i].as_ref().expect("checked layout");
                let g = cfg.geometry(i, &shapes);
                layers::conv_forward(&g, input, p.weight.data(), p.bias.data(), &mut out);
            }
        }
        activations.push(Tensor::from_raw(out_shape.to_vec(), out));
    }

    let deepid_input: Vec<f64> = cfg
        .taps()
        .iter()
        .flat_map(|&t| activations[t].data().iter().copied())
        .collect();
    if params.deepid.weight.shape() != [cfg.deepid_dim, deepid_input.len()] {
        return Err(Error::Layer {
            layer: cfg.layers.len(),
            kind: "deepid".into(),
            msg: format!(
                "weight shape {:?}, expected {:?}",
                params.deepid.weight.shape(),
                [cfg.deepid_dim, deepid_input.len()]
            ),
        });
    }
    let deepid_pre = params.deepid.affine(&deepid_input);
    let f = deepid_pre.iter().map(|&z| if z > 0.0 { z } else { 0.0 }).collect();
    Ok((
        f,
        ForwardTrace {
            activations,
            deepid_input,
            deepid_pre,
        },
    ))
}

/// Feature vector only.
pub fn extract(x: &Tensor, params: &ConvParams, cfg: &NetworkConfig) -> Result<Vec<f64>> {
    forward(x, params, cfg).map(|(f, _)| f)
}

/// Backpropagates `df = ∂L/∂f` through the network. Returns parameter
/// gradients and the input gradient.
pub fn backward(df: &[f64], trace: &ForwardTrace, params: &ConvParams, cfg: &NetworkConfig) -> Result<(ConvParams, Tensor)> {
    let shapes = cfg.shapes()?;
    check_param_layout(cfg, &shapes, params)?;
    if trace.activations.len() != cfg.layers.len() + 1
        || trace.activations.iter().zip(&shapes).any(|(a, s)| a.shape() != s.as_slice())
    {
        return Err(Error::Config("trace does not match network configuration".into()));
    }
    if df.len() != cfg.deepid_dim || trace.deepid_pre.len() != cfg.deepid_dim {
        return Err(Error::Shape {
            op: "backward",
            left: vec![df.len()],
            right: vec![cfg.deepid_dim],
        });
    }

    let mut grads = params.zeros_like();
    let dz: Vec<f64> = df
        .iter()
        .zip(&trace.deepid_pre)
        .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
        .collect();
    let din = trace.deepid_input.len();
    let mut d_input = vec![0.0; din];
    {
        let dw = grads.deepid.weight.data_mut();
        let w = params.deepid.weight.data();
        for (o, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &mut dw[o * din..(o + 1) * din];
            for (r, &x) in row.iter_mut().zip(&trace.deepid_input) {
                *r += g * x;
            }
            for (d, &wv) in d_input.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                *d += g * wv;
            }
        }
        grads.deepid.bias.data_mut().copy_from_slice(&dz);
    }

    // Gradients w.r.t. every activation, seeded from the taps.
    let mut dact: Vec<Vec<f64>> = shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect();
    let mut offset = 0;
    for &t in &cfg.taps() {
        let n = dact[t].len();
        for (d, s) in dact[t].iter_mut().zip(&d_input[offset..offset + n]) {
            *d += s;
        }
        offset += n;
    }

    for i in (0..cfg.layers.len()).rev() {
        let spec = &cfg.layers[i];
        let (lower, upper) = dact.split_at_mut(i + 1);
        let dy = &upper[0];
        let dx = &mut lower[i];
        let x = trace.activations[i].data();
        match spec.kind {
            LayerKind::Relu => layers::relu_backward(x, dy, dx),
            LayerKind::MaxPool => layers::maxpool_backward(shapes[i], shapes[i + 1], spec.kernel, spec.stride, x, dy, dx),
            _ => {
                let p = params.layers[i].as_ref().expect("checked layout");
                let gp = grads.layers[i].as_mut().expect("checked layout");
                let g = cfg.geometry(i, &shapes);
                let LayerParams { weight, bias } = gp;
                layers::conv_backward(&g, x, p.weight.data(), dy, weight.data_mut(), bias.data_mut(), Some(dx));
            }
        }
    }
    let dx = Tensor::from_raw(cfg.input.to_vec(), dact.swap_remove(0));
    Ok((grads, dx))
}
