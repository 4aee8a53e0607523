//! U-Net style generator: strided 3x3 encoder, nearest-upsample decoder with
//! concatenated skips, 1x1 head with CeLU output.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    concat_channels, split_channels, upsample_nearest2x, upsample_nearest2x_backward, Activation,
    Conv2d, ConvGrad,
};
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;
const MISH: Activation = Activation::Mish;
const CELU: Activation = Activation::Celu { alpha: 1.0 };

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_width: usize,
    pub width_cap: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 9,
            out_channels: 1,
            depth: 8,
            base_width: 32,
            width_cap: 512,
        }
    }
}

impl GeneratorConfig {
    /// 64x64 slices, six levels.
    pub fn desk() -> Self {
        GeneratorConfig {
            depth: 6,
            base_width: 16,
            width_cap: 128,
            ..GeneratorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("generator depth must be at least 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("generator channel counts must be positive".into()));
        }
        if self.width_cap < self.base_width {
            return Err(Error::Config("width_cap below base_width".into()));
        }
        Ok(())
    }

    /// Output width of encoder level `i`.
    pub fn width(&self, i: usize) -> usize {
        (self.base_width << i.min(30)).min(self.width_cap)
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Width of decoder output `d_l` (`d_depth` is the bottleneck).
    fn dec_width(&self, l: usize) -> usize {
        if l == 0 {
            self.width(0)
        } else {
            self.width(l - 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    /// `enc[l]` maps level l to level l+1 at half resolution.
    pub enc: Vec<Conv2d>,
    /// `dec[l]` produces decoder output `d_l` from `up(d_{l+1})` and the skip `e_l`.
    pub dec: Vec<Conv2d>,
    pub head: Conv2d,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct GenTrace {
    /// `e[0]` is the input, `e[l]` the output of encoder block l-1.
    enc_out: Vec<Array4<f64>>,
    enc_pre: Vec<Array4<f64>>,
    dec_cat: Vec<Array4<f64>>,
    dec_pre: Vec<Array4<f64>>,
    d0: Array4<f64>,
    head_pre: Array4<f64>,
}

/// Parameter gradients in [`Generator::convs`] order.
pub type GenGrads = Vec<ConvGrad>;

impl Generator {
    pub fn new<R: Rng>(cfg: GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.depth;
        let mut enc = Vec::with_capacity(d);
        for l in 0..d {
            let cin = if l == 0 { cfg.in_channels } else { cfg.width(l - 1) };
            enc.push(Conv2d::normal(cin, cfg.width(l), 3, 2, 1, INIT_STD, rng));
        }
        let mut dec = Vec::with_capacity(d);
        for l in 0..d {
            let skip = if l == 0 { cfg.in_channels } else { cfg.width(l - 1) };
            let cin = cfg.dec_width(l + 1) + skip;
            dec.push(Conv2d::normal(cin, cfg.dec_width(l), 3, 1, 1, INIT_STD, rng));
        }
        let head = Conv2d::normal(cfg.width(0), cfg.out_channels, 1, 1, 0, INIT_STD, rng);
        Ok(Generator { cfg, enc, dec, head })
    }

    pub fn convs(&self) -> Vec<&Conv2d> {
        self.enc.iter().chain(self.dec.iter()).chain(std::iter::once(&self.head)).collect()
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        self.enc
            .iter_mut()
            .chain(self.dec.iter_mut())
            .chain(std::iter::once(&mut self.head))
            .collect()
    }

    /// Tensor names in [`Generator::convs`] order.
    pub fn conv_names(&self) -> Vec<String> {
        (0..self.cfg.depth)
            .map(|l| format!("enc.{l}"))
            .chain((0..self.cfg.depth).map(|l| format!("dec.{l}")))
            .chain(std::iter::once("head".to_string()))
            .collect()
    }

    pub fn zero_grads(&self) -> GenGrads {
        self.convs().into_iter().map(ConvGrad::zeros_like).collect()
    }

    pub fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let m = self.cfg.size_multiple();
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} not divisible by {m}"
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        Ok(self.forward_trace(x)?.0)
    }

    pub fn forward_trace(&self, x: &Array4<f64>) -> Result<(Array4<f64>, GenTrace)> {
        self.check_input(x)?;
        let d = self.cfg.depth;
        let mut enc_out = Vec::with_capacity(d + 1);
        let mut enc_pre = Vec::with_capacity(d);
        enc_out.push(x.clone());
        for l in 0..d {
            let z = self.enc[l].forward(&enc_out[l]);
            enc_out.push(MISH.forward(&z));
            enc_pre.push(z);
        }
        let mut dec_cat = vec![Array4::zeros((0, 0, 0, 0)); d];
        let mut dec_pre = vec![Array4::zeros((0, 0, 0, 0)); d];
        let mut cur = enc_out[d].clone();
        for l in (0..d).rev() {
            let cat = concat_channels(&upsample_nearest2x(&cur), &enc_out[l]);
            let z = self.dec[l].forward(&cat);
            cur = MISH.forward(&z);
            dec_cat[l] = cat;
            dec_pre[l] = z;
        }
        let head_pre = self.head.forward(&cur);
        let y = CELU.forward(&head_pre);
        Ok((
            y,
            GenTrace {
                enc_out,
                enc_pre,
                dec_cat,
                dec_pre,
                d0: cur,
                head_pre,
            },
        ))
    }

    /// Accumulates parameter gradients for `grad_out = dL/dy` into `grads`.
    pub fn backward(&self, trace: &GenTrace, grad_out: &Array4<f64>, grads: &mut GenGrads) {
        let d = self.cfg.depth;
        let (enc_g, rest) = grads.split_at_mut(d);
        let (dec_g, head_g) = rest.split_at_mut(d);
        let g = CELU.backward(&trace.head_pre, grad_out);
        let mut g_d = self
            .head
            .backward(&trace.d0, &g, Some(&mut head_g[0]), true)
            .unwrap();
        let mut g_skip: Vec<Option<Array4<f64>>> = vec![None; d];
        for l in 0..d {
            let gz = MISH.backward(&trace.dec_pre[l], &g_d);
            let gcat = self.dec[l]
                .backward(&trace.dec_cat[l], &gz, Some(&mut dec_g[l]), true)
                .unwrap();
            let up_ch = self.cfg.dec_width(l + 1);
            let (g_up, g_sk) = split_channels(&gcat, up_ch);
            g_skip[l] = Some(g_sk);
            g_d = upsample_nearest2x_backward(&g_up);
        }
        let mut g_e = g_d;
        for l in (0..d).rev() {
            let gz = MISH.backward(&trace.enc_pre[l], &g_e);
            let gin = self.enc[l].backward(&trace.enc_out[l], &gz, Some(&mut enc_g[l]), l > 0);
            if let Some(mut gin) = gin {
                gin += g_skip[l].as_ref().unwrap();
                g_e = gin;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.weight.len() + c.bias.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::tests::random4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            depth: 3,
            base_width: 4,
            width_cap: 8,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn shapes_and_bottleneck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::new(GeneratorConfig::desk(), &mut rng).unwrap();
        let x = random4((1, 9, 64, 64), 2);
        let (y, tr) = g.forward_trace(&x).unwrap();
        assert_eq!(y.dim(), (1, 1, 64, 64));
        assert_eq!(tr.enc_out[6].dim().2, 1);
        assert!(y.iter().all(|v| v.is_finite()));
        assert!(matches!(
            g.forward(&random4((1, 9, 48, 48), 2)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            g.forward(&random4((1, 8, 64, 64), 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn full_size_bottleneck_is_one_pixel() {
        let cfg = GeneratorConfig {
            base_width: 2,
            width_cap: 4,
            ..GeneratorConfig::default()
        };
        let g = Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (y, tr) = g.forward_trace(&Array4::zeros((1, 9, 256, 256))).unwrap();
        assert_eq!(y.dim(), (1, 1, 256, 256));
        assert_eq!(tr.enc_out[8].dim(), (1, 4, 1, 1));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut g = Generator::new(small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        g.head.bias.fill(0.0);
        let y = g.forward(&Array4::zeros((2, 9, 8, 8))).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences_and_reach_every_layer() {
        let mut g = Generator::new(small(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for c in g.convs_mut() {
            c.weight.mapv_inplace(|w| w * 20.0);
        }
        let x = random4((2, 9, 8, 8), 6);
        let r = random4((2, 1, 8, 8), 7);
        let (_, tr) = g.forward_trace(&x).unwrap();
        let mut grads = g.zero_grads();
        g.backward(&tr, &r, &mut grads);
        for (name, gr) in g.conv_names().iter().zip(&grads) {
            assert!(gr.sq_norm() > 0.0, "dead layer {name}");
        }
        let loss = |g: &Generator| (g.forward(&x).unwrap() * &r).sum();
        let h = 1e-6;
        for li in [0, 2, 3, 5, 6] {
            for idx in [(0, 0, 0, 0), (1, 1, 1, 2)] {
                let mut gp = g.clone();
                let mut gm = g.clone();
                let wshape = gp.convs()[li].weight.dim();
                let idx = (idx.0 % wshape.0, idx.1 % wshape.1, idx.2 % wshape.2, idx.3 % wshape.3);
                gp.convs_mut()[li].weight[idx] += h;
                gm.convs_mut()[li].weight[idx] -= h;
                let fd = (loss(&gp) - loss(&gm)) / (2.0 * h);
                let an = grads[li].weight[idx];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "layer {li}: {fd} vs {an}");
            }
        }
    }
}
