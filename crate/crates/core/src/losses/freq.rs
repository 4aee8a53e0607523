//! Frequency loss: L1 distance between 2D Fourier magnitudes, split into a
//! low-frequency disk around the (centered) zero frequency and its complement.

use ndarray::{s, Array2, Array4};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::pixel::check_same;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreqLoss {
    pub low: f64,
    pub high: f64,
    pub total: f64,
}

/// Unnormalized forward 2D DFT of a real plane.
pub fn fft2(x: &Array2<f64>) -> Array2<Complex64> {
    let mut c = x.mapv(|v| Complex64::new(v, 0.0));
    fft2_inplace(&mut c);
    c
}

fn fft2_inplace(c: &mut Array2<Complex64>) {
    let (h, w) = c.dim();
    let mut planner = FftPlanner::<f64>::new();
    let fw = planner.plan_fft_forward(w);
    let fh = planner.plan_fft_forward(h);
    let mut buf = vec![Complex64::default(); w.max(h)];
    for i in 0..h {
        let row = &mut buf[..w];
        for j in 0..w {
            row[j] = c[[i, j]];
        }
        fw.process(row);
        for j in 0..w {
            c[[i, j]] = row[j];
        }
    }
    for j in 0..w {
        let col = &mut buf[..h];
        for i in 0..h {
            col[i] = c[[i, j]];
        }
        fh.process(col);
        for i in 0..h {
            c[[i, j]] = col[i];
        }
    }
}

/// Low-frequency disk in unshifted bin order: after moving zero frequency to
/// `(h/2, w/2)`, bins within `radius` of that center.
pub fn low_pass_mask(h: usize, w: usize, radius: f64) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(u, v)| {
        let su = ((u + h / 2) % h) as f64 - (h / 2) as f64;
        let sv = ((v + w / 2) % w) as f64 - (w / 2) as f64;
        su * su + sv * sv <= radius * radius
    })
}

fn check(yhat: &Array4<f64>, y: &Array4<f64>, radius: f64) -> Result<()> {
    check_same(yhat, y, "freq")?;
    if radius < 1.0 {
        return Err(Error::Argument(format!("frequency radius {radius} must be at least 1")));
    }
    Ok(())
}

pub fn freq_loss(yhat: &Array4<f64>, y: &Array4<f64>, radius: f64) -> Result<FreqLoss> {
    Ok(freq_impl(yhat, y, radius, false)?.0)
}

/// Loss components and the gradient of `total` with respect to `yhat`.
pub fn freq_loss_grad(yhat: &Array4<f64>, y: &Array4<f64>, radius: f64) -> Result<(FreqLoss, Array4<f64>)> {
    let (v, g) = freq_impl(yhat, y, radius, true)?;
    Ok((v, g.unwrap()))
}

fn freq_impl(
    yhat: &Array4<f64>,
    y: &Array4<f64>,
    radius: f64,
    want_grad: bool,
) -> Result<(FreqLoss, Option<Array4<f64>>)> {
    check(yhat, y, radius)?;
    let (n, c, h, w) = yhat.dim();
    let mask = low_pass_mask(h, w, radius);
    let denom = (n * c * h * w) as f64;
    let planes = par::map_range(n * c, |p| {
        let (b, ch) = (p / c, p % c);
        let fy = fft2(&y.slice(s![b, ch, .., ..]).to_owned());
        let fz = fft2(&yhat.slice(s![b, ch, .., ..]).to_owned());
        let (mut low, mut high) = (0.0, 0.0);
        for ((a, bz), &m) in fy.iter().zip(fz.iter()).zip(mask.iter()) {
            let d = (a.norm() - bz.norm()).abs();
            if m {
                low += d;
            } else {
                high += d;
            }
        }
        let grad = want_grad.then(|| {
            // d|F_k|/dz_n = Re(conj(F_k)/|F_k| · e^{-iθkn}); summing over k is a forward DFT.
            let mut coef = Array2::from_shape_fn((h, w), |(u, v)| {
                let fk = fz[[u, v]];
                let mag = fk.norm();
                let diff = fy[[u, v]].norm() - mag;
                if mag == 0.0 || diff == 0.0 {
                    Complex64::default()
                } else {
                    -diff.signum() / denom * fk.conj() / mag
                }
            });
            fft2_inplace(&mut coef);
            coef.mapv(|z| z.re)
        });
        (low, high, grad)
    });
    let (mut low, mut high) = (0.0, 0.0);
    let mut grad = want_grad.then(|| Array4::<f64>::zeros((n, c, h, w)));
    for (p, (l, hi, g)) in planes.into_iter().enumerate() {
        low += l;
        high += hi;
        if let (Some(all), Some(g)) = (grad.as_mut(), g) {
            all.slice_mut(s![p / c, p % c, .., ..]).assign(&g);
        }
    }
    let (low, high) = (low / denom, high / denom);
    Ok((
        FreqLoss {
            low,
            high,
            total: low + high,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::tests::random4;

    #[test]
    fn constant_versus_zero() {
        let y = Array4::from_elem((1, 1, 4, 4), 1.0);
        let z = Array4::zeros((1, 1, 4, 4));
        let f = freq_loss(&z, &y, 1.0).unwrap();
        assert!((f.low - 1.0).abs() < 1e-12);
        assert_eq!(f.high, 0.0);
        assert_eq!(f.total, f.low + f.high);
    }

    #[test]
    fn mask_is_centered_disk() {
        let m = low_pass_mask(8, 8, 1.0);
        let count = m.iter().filter(|&&b| b).count();
        assert_eq!(count, 5);
        assert!(m[[0, 0]] && m[[1, 0]] && m[[7, 0]] && m[[0, 1]] && m[[0, 7]]);
        assert!(!m[[1, 1]]);
    }

    #[test]
    fn periodic_shift_invariance() {
        let y = random4((1, 1, 8, 8), 1);
        let z = random4((1, 1, 8, 8), 2);
        let roll = |a: &Array4<f64>| Array4::from_shape_fn(a.dim(), |(b, c, i, j)| a[[b, c, (i + 3) % 8, (j + 5) % 8]]);
        let f0 = freq_loss(&z, &y, 2.0).unwrap();
        let f1 = freq_loss(&roll(&z), &roll(&y), 2.0).unwrap();
        assert!((f0.total - f1.total).abs() < 1e-12);
        assert!(freq_loss(&y, &y, 21.0).unwrap().total == 0.0);
    }
}
