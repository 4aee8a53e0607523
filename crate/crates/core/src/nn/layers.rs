//! Convolution, resampling and activation kernels with hand-written backward passes.
//!
//! Feature maps are `Array4<f64>` in (batch, channel, height, width) order.
//! Batch items are processed in parallel and per-item parameter gradients are
//! summed in batch order afterwards, so results do not depend on thread count.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::par;

/// A 2D convolution with square kernel and symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// (out, in, k, k)
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
}

/// Parameter gradients of one [`Conv2d`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        ConvGrad {
            weight: Array4::zeros(conv.weight.raw_dim()),
            bias: Array1::zeros(conv.bias.raw_dim()),
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.weight.iter().chain(self.bias.iter()).map(|g| g * g).sum()
    }

    pub fn fill_zero(&mut self) {
        self.weight.fill(0.0);
        self.bias.fill(0.0);
    }
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: Array4::zeros((out_ch, in_ch, kernel, kernel)),
            bias: Array1::zeros(out_ch),
            stride,
            padding,
        }
    }

    /// Weights drawn from N(0, std²), zero bias.
    pub fn normal<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut c = Conv2d::zeros(in_ch, out_ch, kernel, stride, padding);
        let dist = Normal::new(0.0, std).unwrap();
        c.weight.iter_mut().for_each(|w| *w = dist.sample(rng));
        c
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return None;
        }
        Some(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        conv_forward(x, self.weight.view(), self.bias.view(), self.stride, self.padding)
    }

    /// Backward pass for input `x`. Accumulates into `grad` when given and
    /// returns the input gradient when `need_input_grad`.
    pub fn backward(
        &self,
        x: &Array4<f64>,
        grad_out: &Array4<f64>,
        grad: Option<&mut ConvGrad>,
        need_input_grad: bool,
    ) -> Option<Array4<f64>> {
        let (gx, gw, gb) = conv_backward(
            x,
            self.weight.view(),
            grad_out,
            self.stride,
            self.padding,
            grad.is_some(),
            need_input_grad,
        );
        if let Some(g) = grad {
            if let Some(gw) = gw {
                g.weight += &gw;
            }
            if let Some(gb) = gb {
                g.bias += &gb;
            }
        }
        gx
    }
}

fn out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(n + 2 * pad >= k, "input {n} (+2*{pad}) smaller than kernel {k}");
    (n + 2 * pad - k) / stride + 1
}

/// Unfolds one (C, H, W) item into a (C*k*k, Ho*Wo) patch matrix.
fn im2col(x: ArrayView3<f64>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().unwrap();
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = plane.row(iy as usize);
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
/// Folds a patch-matrix gradient back onto a (C, H, W) item (adjoint of im2col).
fn col2im(cols: ArrayView2<f64>, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = out.index_axis_mut(Axis(0), ci);
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = cols.row(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut dst = plane.row_mut(iy as usize);
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[base + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_forward(
    x: &Array4<f64>,
    weight: ArrayView4<f64>,
    bias: ndarray::ArrayView1<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (o, ci, k, _) = weight.dim();
    assert_eq!(c, ci, "conv expects {ci} input channels, got {c}");
    let (ho, wo) = (out_dim(h, k, stride, pad), out_dim(w, k, stride, pad));
    let wmat = weight.to_shape((o, c * k * k)).unwrap();
    let items = par::map_range(n, |b| {
        let cols = im2col(x.index_axis(Axis(0), b), k, stride, pad, ho, wo);
        let mut out = Array2::<f64>::zeros((o, ho * wo));
        for (mut row, &bv) in out.rows_mut().into_iter().zip(bias.iter()) {
            row.fill(bv);
        }
        general_mat_mul(1.0, &wmat, &cols, 1.0, &mut out);
        out
    });
    let mut y = Array4::<f64>::zeros((n, o, ho, wo));
    for (b, item) in items.into_iter().enumerate() {
        y.index_axis_mut(Axis(0), b)
            .assign(&item.into_shape_with_order((o, ho, wo)).unwrap());
    }
    y
}

#[allow(clippy::type_complexity)]
pub(crate) fn conv_backward(
    x: &Array4<f64>,
    weight: ArrayView4<f64>,
    grad_out: &Array4<f64>,
    stride: usize,
    pad: usize,
    need_param_grad: bool,
    need_input_grad: bool,
) -> (Option<Array4<f64>>, Option<Array4<f64>>, Option<Array1<f64>>) {
    let (n, c, h, w) = x.dim();
    let (o, _, k, _) = weight.dim();
    let (ho, wo) = (out_dim(h, k, stride, pad), out_dim(w, k, stride, pad));
    assert_eq!(grad_out.dim(), (n, o, ho, wo), "grad_out shape mismatch");
    let wmat = weight.to_shape((o, c * k * k)).unwrap();
    let wmat_t = wmat.t();
    let items = par::map_range(n, |b| {
        let gout = grad_out.index_axis(Axis(0), b);
        let gout = gout.to_shape((o, ho * wo)).unwrap();
        let mut gw = None;
        let mut gb = None;
        if need_param_grad {
            let cols = im2col(x.index_axis(Axis(0), b), k, stride, pad, ho, wo);
            let mut g = Array2::<f64>::zeros((o, c * k * k));
            general_mat_mul(1.0, &gout, &cols.t(), 0.0, &mut g);
            gw = Some(g);
            gb = Some(gout.sum_axis(Axis(1)));
        }
        let gx = need_input_grad.then(|| {
            let mut gcols = Array2::<f64>::zeros((c * k * k, ho * wo));
            general_mat_mul(1.0, &wmat_t, &gout, 0.0, &mut gcols);
            col2im(gcols.view(), c, h, w, k, stride, pad, ho, wo)
        });
        (gx, gw, gb)
    });
    let mut gx_all = need_input_grad.then(|| Array4::<f64>::zeros((n, c, h, w)));
    let mut gw_all = need_param_grad.then(|| Array2::<f64>::zeros((o, c * k * k)));
    let mut gb_all = need_param_grad.then(|| Array1::<f64>::zeros(o));
    for (b, (gx, gw, gb)) in items.into_iter().enumerate() {
        if let (Some(all), Some(gx)) = (gx_all.as_mut(), gx) {
            all.index_axis_mut(Axis(0), b).assign(&gx);
        }
        if let (Some(all), Some(gw)) = (gw_all.as_mut(), gw) {
            *all += &gw;
        }
        if let (Some(all), Some(gb)) = (gb_all.as_mut(), gb) {
            *all += &gb;
        }
    }
    (
        gx_all,
        gw_all.map(|g| g.into_shape_with_order((o, c, k, k)).unwrap()),
        gb_all,
    )
}

/// Pointwise activation functions used by the networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Mish,
    Celu { alpha: f64 },
    LeakyRelu { slope: f64 },
    Relu,
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Mish => x * softplus(x).tanh(),
            Activation::Celu { alpha } => {
                if x > 0.0 {
                    x
                } else {
                    alpha * ((x / alpha).exp() - 1.0)
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative at pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Mish => {
                let t = softplus(x).tanh();
                t + x * (1.0 - t * t) * sigmoid(x)
            }
            Activation::Celu { alpha } => {
                if x > 0.0 {
                    1.0
                } else {
                    (x / alpha).exp()
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn forward(self, x: &Array4<f64>) -> Array4<f64> {
        x.mapv(|v| self.apply(v))
    }

    /// Gradient through the activation given its pre-activation input.
    pub fn backward(self, pre: &Array4<f64>, grad_out: &Array4<f64>) -> Array4<f64> {
        let mut g = grad_out.clone();
        g.zip_mut_with(pre, |g, &z| *g *= self.derivative(z));
        g
    }
}

pub fn upsample_nearest2x(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(b, ch, i, j)| x[[b, ch, i / 2, j / 2]])
}

/// Adjoint of [`upsample_nearest2x`]: sums each 2x2 block.
pub fn upsample_nearest2x_backward(g: &Array4<f64>) -> Array4<f64> {
    let (n, c, h2, w2) = g.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for ((b, ch, i, j), v) in g.indexed_iter() {
        out[[b, ch, i / 2, j / 2]] += v;
    }
    out
}

/// Channel concatenation of two maps with equal batch and spatial size.
pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("concat: spatial size mismatch")
}

/// Splits a gradient at channel `at` (inverse of [`concat_channels`]).
pub fn split_channels(g: &Array4<f64>, at: usize) -> (Array4<f64>, Array4<f64>) {
    (
        g.slice(s![.., ..at, .., ..]).to_owned(),
        g.slice(s![.., at.., .., ..]).to_owned(),
    )
}

/// 2x2 max pooling, stride 2; odd trailing rows/columns form partial windows.
/// Returns the pooled map and the flat argmax index of each window.
pub fn maxpool2(x: &Array4<f64>) -> (Array4<f64>, Array4<usize>) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array4::<f64>::zeros((n, c, ho, wo));
    let mut arg = Array4::<usize>::zeros((n, c, ho, wo));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let (y, xx) = (2 * i + di, 2 * j + dj);
                            if y < h && xx < w && x[[b, ch, y, xx]] > best {
                                best = x[[b, ch, y, xx]];
                                best_idx = y * w + xx;
                            }
                        }
                    }
                    out[[b, ch, i, j]] = best;
                    arg[[b, ch, i, j]] = best_idx;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(g: &Array4<f64>, arg: &Array4<usize>, h: usize, w: usize) -> Array4<f64> {
    let (n, c, _, _) = g.dim();
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for ((b, ch, i, j), &v) in g.indexed_iter() {
        let idx = arg[[b, ch, i, j]];
        out[[b, ch, idx / w, idx % w]] += v;
    }
    out
}
