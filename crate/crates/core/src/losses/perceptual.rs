//! Perceptual loss on VGG-19 convolution features.

use ndarray::Array4;

use super::pixel::check_same;
use crate::error::{Error, Result};
use crate::nn::Vgg19;

/// `(1/B) Σ_l Σ (λ_l (φ_l(yhat) − φ_l(y)))²`.
pub fn vgg_loss(yhat: &Array4<f64>, y: &Array4<f64>, vgg: &Vgg19, layers: &[usize], lambdas: &[f64]) -> Result<f64> {
    Ok(vgg_impl(yhat, y, vgg, layers, lambdas, false)?.0)
}

pub fn vgg_loss_grad(
    yhat: &Array4<f64>,
    y: &Array4<f64>,
    vgg: &Vgg19,
    layers: &[usize],
    lambdas: &[f64],
) -> Result<(f64, Array4<f64>)> {
    let (v, g) = vgg_impl(yhat, y, vgg, layers, lambdas, true)?;
    Ok((v, g.unwrap()))
}

fn vgg_impl(
    yhat: &Array4<f64>,
    y: &Array4<f64>,
    vgg: &Vgg19,
    layers: &[usize],
    lambdas: &[f64],
    want_grad: bool,
) -> Result<(f64, Option<Array4<f64>>)> {
    check_same(yhat, y, "vgg")?;
    if layers.len() != lambdas.len() {
        return Err(Error::Argument(format!(
            "{} VGG layers but {} weights",
            layers.len(),
            lambdas.len()
        )));
    }
    let b = yhat.dim().0 as f64;
    let (fz, trace) = vgg.features_trace(yhat, layers)?;
    let fy = vgg.features(y, layers)?;
    let mut loss = 0.0;
    let mut tap_grads = Vec::with_capacity(layers.len());
    for ((a, r), &lam) in fz.iter().zip(&fy).zip(lambdas) {
        let d = a - r;
        loss += d.iter().map(|v| (lam * v) * (lam * v)).sum::<f64>();
        if want_grad {
            tap_grads.push(d * (2.0 * lam * lam / b));
        }
    }
    let grad = want_grad.then(|| vgg.backward(&trace, layers, &tap_grads));
    Ok((loss / b, grad))
}
