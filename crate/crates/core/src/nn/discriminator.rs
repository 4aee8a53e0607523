//! Spectrally normalized convolutional patch discriminator.

use ndarray::{Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv_backward, conv_forward, Activation, Conv2d, ConvGrad};
use super::spectral::{SnConv, SnState};
use crate::error::{Error, Result};

const LEAKY: Activation = Activation::LeakyRelu { slope: 0.2 };
pub const KERNEL: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub n_layers: usize,
    pub base_width: usize,
    /// Score (candidate, center input slice) pairs; otherwise the candidate alone.
    pub conditional: bool,
    /// Power steps when the network is built.
    pub init_power_iterations: usize,
    /// Power steps per refresh during training.
    pub power_iterations: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 2,
            n_layers: 5,
            base_width: 64,
            conditional: true,
            init_power_iterations: 64,
            power_iterations: 1,
        }
    }
}

/// Geometry of one discriminator convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub padding: usize,
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        DiscriminatorConfig {
            base_width: 16,
            ..DiscriminatorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::Config("discriminator needs at least 2 layers".into()));
        }
        let want = if self.conditional { 2 } else { 1 };
        if self.in_channels != want {
            return Err(Error::Config(format!(
                "discriminator in_channels must be {want} when conditional = {}",
                self.conditional
            )));
        }
        if self.base_width == 0 {
            return Err(Error::Config("discriminator base_width must be positive".into()));
        }
        Ok(())
    }

    /// All but the last two layers halve the resolution. The last strided
    /// layer pads by 2 so that a 256 input gives a 31 map and 64 gives 7.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let n = self.n_layers;
        (0..n)
            .map(|i| LayerSpec {
                in_ch: if i == 0 {
                    self.in_channels
                } else {
                    self.base_width << (i - 1).min(3)
                },
                out_ch: if i == n - 1 { 1 } else { self.base_width << i.min(3) },
                stride: if i + 2 < n { 2 } else { 1 },
                padding: if n >= 3 && i == n - 3 { 2 } else { 1 },
            })
            .collect()
    }

    /// Score-map size for an `h` x `w` input, or None if some layer would be empty.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let mut hw = (h, w);
        for l in self.layers() {
            let f = |n: usize| -> Option<usize> {
                (n + 2 * l.padding).checked_sub(KERNEL).map(|r| r / l.stride + 1)
            };
            hw = (f(hw.0)?, f(hw.1)?);
        }
        Some(hw)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub layers: Vec<SnConv>,
    /// Normalized weights from the latest refresh.
    pub sn: Vec<SnState>,
}

#[derive(Debug, Clone)]
pub struct DiscTrace {
    inputs: Vec<Array4<f64>>,
    pre: Vec<Array4<f64>>,
}

impl Discriminator {
    pub fn new<R: Rng>(cfg: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let layers: Vec<SnConv> = cfg
            .layers()
            .into_iter()
            .map(|l| {
                let conv = Conv2d::normal(l.in_ch, l.out_ch, KERNEL, l.stride, l.padding, 0.02, rng);
                SnConv::new(conv, rng)
            })
            .collect();
        let mut d = Discriminator { cfg, layers, sn: Vec::new() };
        d.refresh(d.cfg.init_power_iterations);
        Ok(d)
    }

    /// Recomputes the normalized weights, advancing each `u` by `iterations` steps.
    pub fn refresh(&mut self, iterations: usize) {
        self.sn = self.layers.iter_mut().map(|l| l.refresh(iterations)).collect();
    }

    pub fn convs(&self) -> Vec<&Conv2d> {
        self.layers.iter().map(|l| &l.conv).collect()
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        self.layers.iter_mut().map(|l| &mut l.conv).collect()
    }

    pub fn conv_names(&self) -> Vec<String> {
        (0..self.layers.len()).map(|i| format!("disc.{i}")).collect()
    }

    pub fn zero_grads(&self) -> Vec<ConvGrad> {
        self.convs().into_iter().map(ConvGrad::zeros_like).collect()
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        Ok(self.forward_trace(x)?.0)
    }

    pub fn forward_trace(&self, x: &Array4<f64>) -> Result<(Array4<f64>, DiscTrace)> {
        let c = x.len_of(Axis(1));
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if self.cfg.output_size(x.dim().2, x.dim().3).is_none() {
            return Err(Error::Shape(format!(
                "input {}x{} too small for the discriminator",
                x.dim().2,
                x.dim().3
            )));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut cur = x.clone();
        for (i, (layer, st)) in self.layers.iter().zip(&self.sn).enumerate() {
            let z = conv_forward(
                &cur,
                st.weight.view(),
                layer.conv.bias.view(),
                layer.conv.stride,
                layer.conv.padding,
            );
            inputs.push(cur);
            cur = if i + 1 < n { LEAKY.forward(&z) } else { z.clone() };
            pre.push(z);
        }
        Ok((cur, DiscTrace { inputs, pre }))
    }

    /// Returns dL/dx. Parameter gradients (with respect to the raw weights)
    /// are accumulated only when `grads` is given.
    pub fn backward(
        &self,
        trace: &DiscTrace,
        grad_out: &Array4<f64>,
        mut grads: Option<&mut Vec<ConvGrad>>,
    ) -> Array4<f64> {
        let n = self.layers.len();
        let mut g = grad_out.clone();
        for i in (0..n).rev() {
            if i + 1 < n {
                g = LEAKY.backward(&trace.pre[i], &g);
            }
            let layer = &self.layers[i];
            let st = &self.sn[i];
            let (gx, gw, gb) = conv_backward(
                &trace.inputs[i],
                st.weight.view(),
                &g,
                layer.conv.stride,
                layer.conv.padding,
                grads.is_some(),
                true,
            );
            if let Some(gs) = grads.as_deref_mut() {
                gs[i].weight += &st.raw_grad(&gw.unwrap());
                gs[i].bias += &gb.unwrap();
            }
            g = gx.unwrap();
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::tests::random4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_sizes() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.output_size(256, 256), Some((31, 31)));
        assert_eq!(cfg.output_size(64, 64), Some((7, 7)));
        let strides: Vec<usize> = cfg.layers().iter().map(|l| l.stride).collect();
        assert_eq!(strides, vec![2, 2, 2, 1, 1]);
        let widths: Vec<usize> = cfg.layers().iter().map(|l| l.out_ch).collect();
        assert_eq!(widths, vec![64, 128, 256, 512, 1]);
        let d = Discriminator::new(DiscriminatorConfig::desk(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let y = d.forward(&random4((2, 2, 64, 64), 1)).unwrap();
        assert_eq!(y.dim(), (2, 1, 7, 7));
        assert!(matches!(d.forward(&random4((1, 3, 64, 64), 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn unconditional_takes_one_channel() {
        let cfg = DiscriminatorConfig {
            conditional: false,
            in_channels: 1,
            ..DiscriminatorConfig::desk()
        };
        let d = Discriminator::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(d.forward(&random4((1, 1, 32, 32), 1)).unwrap().dim(), (1, 1, 3, 3));
        let bad = DiscriminatorConfig {
            conditional: false,
            ..DiscriminatorConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = DiscriminatorConfig {
            base_width: 2,
            ..DiscriminatorConfig::default()
        };
        let mut d = Discriminator::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        d.refresh(1);
        let x = random4((2, 2, 16, 16), 3);
        let (y, tr) = d.forward_trace(&x).unwrap();
        let r = random4(y.dim(), 4);
        let mut grads = d.zero_grads();
        let gx = d.backward(&tr, &r, Some(&mut grads));
        let h = 1e-6;
        let loss_x = |x: &Array4<f64>| (d.forward(x).unwrap() * &r).sum();
        for idx in [(0, 0, 3, 4), (1, 1, 8, 8), (0, 1, 15, 0)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss_x(&xp) - loss_x(&xm)) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", gx[idx]);
        }
        // Raw-weight gradient with u, v frozen at the refreshed values.
        let loss_w = |d: &Discriminator, li: usize, idx, delta: f64| {
            let mut d2 = d.clone();
            d2.layers[li].conv.weight[idx] += delta;
            let st = &d.sn[li];
            let wm = crate::nn::spectral::weight_matrix(&d2.layers[li].conv.weight);
            let sigma = st.u.dot(&wm.dot(&st.v));
            d2.sn[li].weight = &d2.layers[li].conv.weight / sigma;
            (d2.forward(&x).unwrap() * &r).sum()
        };
        for li in [0, 2, 4] {
            let idx = (0, 1, 2, 3);
            let fd = (loss_w(&d, li, idx, h) - loss_w(&d, li, idx, -h)) / (2.0 * h);
            let an = grads[li].weight[idx];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "layer {li}: {fd} vs {an}");
        }
    }
}
