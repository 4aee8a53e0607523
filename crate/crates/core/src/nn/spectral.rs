//! Spectral normalization of convolution weights by power iteration.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

use super::layers::Conv2d;

/// A convolution whose effective weight is `weight / sigma(weight)`.
///
/// `u` is the persistent left singular vector estimate, refined by power
/// iteration every time the layer is refreshed.
#[derive(Debug, Clone, PartialEq)]
pub struct SnConv {
    pub conv: Conv2d,
    pub u: Array1<f64>,
}

/// Normalized weight and the vectors used to compute it.
#[derive(Debug, Clone, PartialEq)]
pub struct SnState {
    pub weight: Array4<f64>,
    pub sigma: f64,
    pub u: Array1<f64>,
    pub v: Array1<f64>,
}

fn normalized(mut x: Array1<f64>) -> Array1<f64> {
    let n = x.dot(&x).sqrt();
    x /= n.max(1e-12);
    x
}

pub fn weight_matrix(w: &Array4<f64>) -> Array2<f64> {
    let (o, i, kh, kw) = w.dim();
    w.to_shape((o, i * kh * kw)).unwrap().to_owned()
}

impl SnConv {
    pub fn new<R: Rng>(conv: Conv2d, rng: &mut R) -> Self {
        let u = Array1::from_shape_fn(conv.out_channels(), |_| rng.sample(StandardNormal));
        SnConv { conv, u: normalized(u) }
    }

    /// Runs `iterations` power steps (at least one), stores the new `u` and
    /// returns the normalized weight.
    pub fn refresh(&mut self, iterations: usize) -> SnState {
        let w = weight_matrix(&self.conv.weight);
        let mut u = self.u.clone();
        let mut v = normalized(w.t().dot(&u));
        for step in 0..iterations.max(1) {
            if step > 0 {
                v = normalized(w.t().dot(&u));
            }
            u = normalized(w.dot(&v));
        }
        self.u = u.clone();
        SnState::from_vectors(&self.conv.weight, u, v)
    }
}

impl SnState {
    /// Normalized weight for fixed singular vector estimates.
    pub fn from_vectors(weight: &Array4<f64>, u: Array1<f64>, v: Array1<f64>) -> Self {
        let sigma = u.dot(&weight_matrix(weight).dot(&v));
        SnState {
            weight: weight / sigma,
            sigma,
            u,
            v,
        }
    }

    /// Converts a gradient with respect to the normalized weight into one with
    /// respect to the raw weight, holding `u` and `v` fixed.
    pub fn raw_grad(&self, g: &Array4<f64>) -> Array4<f64> {
        let inner: f64 = g.iter().zip(self.weight.iter()).map(|(a, b)| a * b).sum();
        let (o, i, kh, kw) = g.dim();
        let mut out = g.clone();
        let k = i * kh * kw;
        let flat = out.as_slice_mut().unwrap();
        for r in 0..o {
            for c in 0..k {
                flat[r * k + c] -= inner * self.u[r] * self.v[c];
            }
        }
        out / self.sigma
    }
}
