//! Per-kind forward and backward kernels on CHW buffers.
//!
//! The three weighted kinds (plain, locally-shared and locally-connected
//! convolution) share one kernel: they differ only in which weight set an
//! output location reads, see [`WeightSharing`].

use serde::{Deserialize, Serialize};

/// Spatial extent of a feature map: `[channels, height, width]`.
pub type MapShape = [usize; 3];

/// How weight sets are assigned to output locations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSharing {
    /// One weight set for the whole map.
    Full,
    /// One weight set per cell of a `grid[0] × grid[1]` partition of the
    /// output map.
    Grid { grid: [usize; 2] },
    /// One weight set per output location.
    None,
}

impl WeightSharing {
    pub fn sets(&self, out_h: usize, out_w: usize) -> usize {
        match *self {
            WeightSharing::Full => 1,
            WeightSharing::Grid { grid } => grid[0] * grid[1],
            WeightSharing::None => out_h * out_w,
        }
    }

    #[inline]
    pub fn set_of(&self, oy: usize, ox: usize, out_h: usize, out_w: usize) -> usize {
        match *self {
            WeightSharing::Full => 0,
            WeightSharing::Grid { grid } => {
                let cell_h = out_h / grid[0];
                let cell_w = out_w / grid[1];
                (oy / cell_h) * grid[1] + ox / cell_w
            }
            WeightSharing::None => oy * out_w + ox,
        }
    }
}

/// Geometry of one weighted convolution-shaped layer.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub input: MapShape,
    pub output: MapShape,
    pub kernel: [usize; 2],
    pub stride: usize,
    pub sharing: WeightSharing,
}

impl ConvGeometry {
    fn weight_offset(&self, set: usize, oc: usize) -> usize {
        let [ic, _, _] = self.input;
        ((set * self.output[0] + oc) * ic) * self.kernel[0] * self.kernel[1]
    }
}

/// Weight layout `[sets, out_c, in_c, kh, kw]`, bias layout `[sets, out_c]`.
pub fn conv_forward(g: &ConvGeometry, x: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let [ic, h, w] = g.input;
    let [oc, oh, ow] = g.output;
    let [kh, kw] = g.kernel;
    let s = g.stride;
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let set = g.sharing.set_of(oy, ox, oh, ow);
                let wbase = g.weight_offset(set, o);
                let mut acc = bias[set * oc + o];
                for c in 0..ic {
                    for ky in 0..kh {
                        let xrow = c * h * w + (oy * s + ky) * w + ox * s;
                        let wrow = wbase + (c * kh + ky) * kw;
                        let xs = &x[xrow..xrow + kw];
                        let ws = &weight[wrow..wrow + kw];
                        for kx in 0..kw {
                            acc += ws[kx] * xs[kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

/// Accumulates parameter gradients into `dweight`/`dbias` and, when given,
/// the input gradient into `dx`.
pub fn conv_backward(
    g: &ConvGeometry,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let [ic, h, w] = g.input;
    let [oc, oh, ow] = g.output;
    let [kh, kw] = g.kernel;
    let s = g.stride;
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let grad = dy[(o * oh + oy) * ow + ox];
                if grad == 0.0 {
                    continue;
                }
                let set = g.sharing.set_of(oy, ox, oh, ow);
                let wbase = g.weight_offset(set, o);
                dbias[set * oc + o] += grad;
                for c in 0..ic {
                    for ky in 0..kh {
                        let xrow = c * h * w + (oy * s + ky) * w + ox * s;
                        let wrow = wbase + (c * kh + ky) * kw;
                        for kx in 0..kw {
                            dweight[wrow + kx] += grad * x[xrow + kx];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            for kx in 0..kw {
                                dx[xrow + kx] += grad * weight[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling; ties resolve to the first maximum in row-major window order.
pub fn maxpool_forward(input: MapShape, output: MapShape, kernel: [usize; 2], stride: usize, x: &[f64], out: &mut [f64]) {
    let [c, h, w] = input;
    let [_, oh, ow] = output;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (_, best) = window_argmax(x, ch * h * w, w, oy * stride, ox * stride, kernel);
                out[(ch * oh + oy) * ow + ox] = best;
            }
        }
    }
}

/// Routes each output gradient to the argmax position of its window.
pub fn maxpool_backward(
    input: MapShape,
    output: MapShape,
    kernel: [usize; 2],
    stride: usize,
    x: &[f64],
    dy: &[f64],
    dx: &mut [f64],
) {
    let [c, h, w] = input;
    let [_, oh, ow] = output;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (idx, _) = window_argmax(x, ch * h * w, w, oy * stride, ox * stride, kernel);
                dx[idx] += dy[(ch * oh + oy) * ow + ox];
            }
        }
    }
}

#[inline]
fn window_argmax(x: &[f64], base: usize, w: usize, y0: usize, x0: usize, kernel: [usize; 2]) -> (usize, f64) {
    let mut best_idx = base + y0 * w + x0;
    let mut best = x[best_idx];
    for ky in 0..kernel[0] {
        for kx in 0..kernel[1] {
            let idx = base + (y0 + ky) * w + x0 + kx;
            if x[idx] > best {
                best = x[idx];
                best_idx = idx;
            }
        }
    }
    (best_idx, best)
}

pub fn relu_forward(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

/// Subgradient at exactly zero is taken as 0.
pub fn relu_backward(x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for ((d, &v), &g) in dx.iter_mut().zip(x).zip(dy) {
        if v > 0.0 {
            *d += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_routes_to_argmax() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0];
        maxpool_forward([1, 2, 2], [1, 1, 1], [2, 2], 2, &x, &mut out);
        assert_eq!(out, [4.0]);
        let mut dx = [0.0; 4];
        maxpool_backward([1, 2, 2], [1, 1, 1], [2, 2], 2, &x, &[1.0], &mut dx);
        assert_eq!(dx, [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_ties_take_first() {
        let x = [5.0, 5.0, 5.0, 5.0];
        let mut dx = [0.0; 4];
        maxpool_backward([1, 2, 2], [1, 1, 1], [2, 2], 2, &x, &[1.0], &mut dx);
        assert_eq!(dx, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_is_idempotent_and_zero_at_kink() {
        let x = [-1.0, 0.0, 2.5, -0.0];
        let mut once = [0.0; 4];
        relu_forward(&x, &mut once);
        let mut twice = [0.0; 4];
        relu_forward(&once, &mut twice);
        assert_eq!(once, twice);
        let mut dx = [0.0; 4];
        relu_backward(&x, &[1.0; 4], &mut dx);
        assert_eq!(dx, [0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn scalar_conv_gradient_is_df_times_x() {
        let g = ConvGeometry {
            input: [1, 1, 1],
            output: [1, 1, 1],
            kernel: [1, 1],
            stride: 1,
            sharing: WeightSharing::Full,
        };
        let (x, w, df) = ([3.0], [0.7], [2.0]);
        let mut dw = [0.0];
        let mut db = [0.0];
        let mut dx = [0.0];
        conv_backward(&g, &x, &w, &df, &mut dw, &mut db, Some(&mut dx));
        assert_eq!(dw, [6.0]);
        assert_eq!(db, [2.0]);
        assert!((dx[0] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn grid_sets_cover_cells() {
        let s = WeightSharing::Grid { grid: [2, 2] };
        assert_eq!(s.sets(4, 6), 4);
        assert_eq!(s.set_of(0, 0, 4, 6), 0);
        assert_eq!(s.set_of(1, 2, 4, 6), 0);
        assert_eq!(s.set_of(1, 3, 4, 6), 1);
        assert_eq!(s.set_of(2, 0, 4, 6), 2);
        assert_eq!(s.set_of(3, 5, 4, 6), 3);
        assert_eq!(WeightSharing::None.set_of(3, 5, 4, 6), 23);
    }
}
