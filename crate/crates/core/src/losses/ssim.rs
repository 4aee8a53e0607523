//! Differentiable 2D SSIM with a Gaussian window over valid positions.

use ndarray::{s, Array2, Array4, ArrayView2};

use super::pixel::check_same;
use crate::error::{Error, Result};
use crate::par;

pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian taps of odd length `k`.
pub fn gaussian_window(k: usize, sigma: f64) -> Vec<f64> {
    let c = (k / 2) as f64;
    let w: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable correlation keeping only windows fully inside the image.
pub fn filter_valid(x: ArrayView2<f64>, w: &[f64]) -> Array2<f64> {
    let k = w.len();
    let (h, wd) = x.dim();
    let (ho, wo) = (h + 1 - k, wd + 1 - k);
    let mut rows = Array2::<f64>::zeros((h, wo));
    for i in 0..h {
        for j in 0..wo {
            let mut acc = 0.0;
            for (t, &wt) in w.iter().enumerate() {
                acc += wt * x[[i, j + t]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((ho, wo));
    for i in 0..ho {
        for j in 0..wo {
            let mut acc = 0.0;
            for (t, &wt) in w.iter().enumerate() {
                acc += wt * rows[[i + t, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`] back onto an `h` x `wd` image.
pub fn filter_valid_adjoint(g: ArrayView2<f64>, w: &[f64], h: usize, wd: usize) -> Array2<f64> {
    let (ho, wo) = g.dim();
    let mut rows = Array2::<f64>::zeros((h, wo));
    for i in 0..ho {
        for j in 0..wo {
            for (t, &wt) in w.iter().enumerate() {
                rows[[i + t, j]] += wt * g[[i, j]];
            }
        }
    }
    let mut out = Array2::<f64>::zeros((h, wd));
    for i in 0..h {
        for j in 0..wo {
            for (t, &wt) in w.iter().enumerate() {
                out[[i, j + t]] += wt * rows[[i, j]];
            }
        }
    }
    out
}

struct Stats {
    mx: Array2<f64>,
    mz: Array2<f64>,
    a1: Array2<f64>,
    a2: Array2<f64>,
    b1: Array2<f64>,
    b2: Array2<f64>,
    s: Array2<f64>,
}

fn stats(x: ArrayView2<f64>, z: ArrayView2<f64>, w: &[f64]) -> Stats {
    let mx = filter_valid(x, w);
    let mz = filter_valid(z, w);
    let exx = filter_valid((&x * &x).view(), w);
    let ezz = filter_valid((&z * &z).view(), w);
    let exz = filter_valid((&x * &z).view(), w);
    let a1 = &mx * &mz * 2.0 + C1;
    let a2 = (&exz - &mx * &mz) * 2.0 + C2;
    let b1 = &mx * &mx + &mz * &mz + C1;
    let b2 = (&exx - &mx * &mx) + (&ezz - &mz * &mz) + C2;
    let s = &a1 * &a2 / (&b1 * &b2);
    Stats { mx, mz, a1, a2, b1, b2, s }
}

/// SSIM map of two planes (valid windows).
pub fn ssim_map_2d(x: ArrayView2<f64>, z: ArrayView2<f64>, kernel: usize, sigma: f64) -> Array2<f64> {
    stats(x, z, &gaussian_window(kernel, sigma)).s
}

fn check(yhat: &Array4<f64>, y: &Array4<f64>, kernel: usize) -> Result<()> {
    check_same(yhat, y, "ssim")?;
    if kernel.is_multiple_of(2) {
        return Err(Error::Argument(format!("ssim kernel {kernel} must be odd")));
    }
    let (_, _, h, w) = yhat.dim();
    if h < kernel || w < kernel {
        return Err(Error::Shape(format!(
            "image {h}x{w} smaller than ssim kernel {kernel}"
        )));
    }
    Ok(())
}

/// Mean over all map positions of `1 − SSIM(y, yhat)`.
pub fn ssim_loss(yhat: &Array4<f64>, y: &Array4<f64>, kernel: usize, sigma: f64) -> Result<f64> {
    Ok(ssim_impl(yhat, y, kernel, sigma, false)?.0)
}

pub fn ssim_loss_grad(yhat: &Array4<f64>, y: &Array4<f64>, kernel: usize, sigma: f64) -> Result<(f64, Array4<f64>)> {
    let (v, g) = ssim_impl(yhat, y, kernel, sigma, true)?;
    Ok((v, g.unwrap()))
}

fn ssim_impl(
    yhat: &Array4<f64>,
    y: &Array4<f64>,
    kernel: usize,
    sigma: f64,
    want_grad: bool,
) -> Result<(f64, Option<Array4<f64>>)> {
    check(yhat, y, kernel)?;
    let w = gaussian_window(kernel, sigma);
    let (n, c, h, wd) = yhat.dim();
    let (ho, wo) = (h + 1 - kernel, wd + 1 - kernel);
    let count = (n * c * ho * wo) as f64;
    let planes = par::map_range(n * c, |p| {
        let (b, ch) = (p / c, p % c);
        let x = y.slice(s![b, ch, .., ..]);
        let z = yhat.slice(s![b, ch, .., ..]);
        let st = stats(x, z, &w);
        let loss: f64 = st.s.iter().map(|s| 1.0 - s).sum();
        let grad = want_grad.then(|| {
            // dL/dS = -1/count for every map entry.
            let gs = st.s.mapv(|s| -s / count);
            let g_mz = &gs
                * &((&st.mx * 2.0 / &st.a1) - (&st.mx * 2.0 / &st.a2) - (&st.mz * 2.0 / &st.b1)
                    + (&st.mz * 2.0 / &st.b2));
            let g_ezz = -&gs / &st.b2;
            let g_exz = &gs * 2.0 / &st.a2;
            let mut gz = filter_valid_adjoint(g_mz.view(), &w, h, wd);
            let mut from_ezz = filter_valid_adjoint(g_ezz.view(), &w, h, wd);
            from_ezz *= &z;
            gz.scaled_add(2.0, &from_ezz);
            let mut from_exz = filter_valid_adjoint(g_exz.view(), &w, h, wd);
            from_exz *= &x;
            gz += &from_exz;
            gz
        });
        (loss, grad)
    });
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Array4::<f64>::zeros((n, c, h, wd)));
    for (p, (l, g)) in planes.into_iter().enumerate() {
        total += l;
        if let (Some(all), Some(g)) = (grad.as_mut(), g) {
            all.slice_mut(s![p / c, p % c, .., ..]).assign(&g);
        }
    }
    Ok((total / count, grad))
}
