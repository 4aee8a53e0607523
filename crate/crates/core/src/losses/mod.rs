//! Training objectives and their weighted combination.
//!
//! Every term has a value-only entry point and a `_grad` variant returning
//! the analytic gradient with respect to the prediction.

pub mod freq;
pub mod perceptual;
pub mod pixel;
pub mod ssim;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

pub use freq::{freq_loss, freq_loss_grad, FreqLoss};
pub use perceptual::{vgg_loss, vgg_loss_grad};
pub use pixel::{
    l1_loss, l1_loss_grad, lsgan_d_loss, lsgan_d_loss_grad, lsgan_g_loss, lsgan_g_loss_grad,
    masked_l1_loss, masked_l1_loss_grad, MaskedL1,
};
pub use ssim::{ssim_loss, ssim_loss_grad};

use crate::error::{Error, Result};
use crate::nn::{Vgg19, VggSource};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub l1_masked: f64,
    pub adv: f64,
    pub ssim: f64,
    pub vgg: f64,
    pub freq: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            l1_masked: 0.0,
            adv: 0.0,
            ssim: 0.0,
            vgg: 0.0,
            freq: 0.0,
        }
    }
}

impl LossWeights {
    const ZERO: LossWeights = LossWeights {
        l1: 0.0,
        l1_masked: 0.0,
        adv: 0.0,
        ssim: 0.0,
        vgg: 0.0,
        freq: 0.0,
    };

    pub fn as_array(&self) -> [(&'static str, f64); 6] {
        [
            ("l1", self.l1),
            ("l1_masked", self.l1_masked),
            ("adv", self.adv),
            ("ssim", self.ssim),
            ("vgg", self.vgg),
            ("freq", self.freq),
        ]
    }
}

/// Named weight presets: the single and paired ablation settings and the combined loss.
pub const PRESETS: [&str; 7] = ["l1", "l1m", "l1m_adv", "l1m_ssim", "l1m_vgg", "l1m_freq", "combined"];

pub fn preset_weights(name: &str) -> Result<LossWeights> {
    let z = LossWeights::ZERO;
    let m = LossWeights { l1_masked: 1.0, ..z };
    Ok(match name {
        "l1" => LossWeights { l1: 1.0, ..z },
        "l1m" => m,
        "l1m_adv" => LossWeights { adv: 1.0, ..m },
        "l1m_ssim" => LossWeights { ssim: 1.0, ..m },
        "l1m_vgg" => LossWeights { vgg: 1.0, ..m },
        "l1m_freq" => LossWeights { freq: 1.0, ..m },
        "combined" => LossWeights {
            l1_masked: 5.0,
            adv: 1.0,
            ssim: 1.0,
            vgg: 1.0,
            freq: 1.0,
            ..z
        },
        other => {
            return Err(Error::Config(format!(
                "unknown loss preset '{other}' (known: {})",
                PRESETS.join(", ")
            )))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub masked_w: f64,
    pub ssim_kernel: usize,
    pub ssim_sigma: f64,
    pub freq_radius: f64,
    pub vgg_layers: Vec<usize>,
    pub vgg_lambdas: Vec<f64>,
    pub vgg_source: VggSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            masked_w: 0.5,
            ssim_kernel: 11,
            ssim_sigma: 1.5,
            freq_radius: 21.0,
            vgg_layers: vec![2, 7, 14, 21, 28],
            vgg_lambdas: vec![0.0002, 0.0001, 0.0001, 0.0002, 0.0005],
            vgg_source: VggSource::Pretrained {
                path: "assets/vgg19.safetensors".into(),
            },
        }
    }
}

impl LossConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Ok(LossConfig {
            weights: preset_weights(name)?,
            ..LossConfig::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.weights.as_array();
        if ws.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if ws.iter().all(|(_, w)| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.masked_w) {
            return Err(Error::Config(format!("masked_w {} outside [0, 1]", self.masked_w)));
        }
        if self.ssim_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("ssim_kernel {} must be odd", self.ssim_kernel)));
        }
        if self.freq_radius < 1.0 {
            return Err(Error::Config(format!("freq_radius {} must be at least 1", self.freq_radius)));
        }
        if self.vgg_layers.len() != self.vgg_lambdas.len() {
            return Err(Error::Config("vgg_layers and vgg_lambdas differ in length".into()));
        }
        Ok(())
    }
}

/// Per-term values (None when the term is disabled) and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l1: Option<f64>,
    pub l1_masked: Option<f64>,
    pub adv: Option<f64>,
    pub ssim: Option<f64>,
    pub vgg: Option<f64>,
    pub freq: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("l1", self.l1),
            ("l1_masked", self.l1_masked),
            ("adv", self.adv),
            ("ssim", self.ssim),
            ("vgg", self.vgg),
            ("freq", self.freq),
        ]
    }

    /// Σ weight × term over the enabled terms.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.terms()
            .iter()
            .zip(w.as_array())
            .filter_map(|((_, t), (_, wi))| t.map(|t| wi * t))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms().iter().all(|(_, t)| t.is_none_or(f64::is_finite))
    }

    pub fn describe(&self) -> String {
        let mut parts: Vec<String> = self
            .terms()
            .iter()
            .filter_map(|(n, t)| t.map(|t| format!("{n}={t}")))
            .collect();
        parts.push(format!("total={}", self.total));
        parts.join(" ")
    }
}

/// Report plus gradients for the generator step.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub report: LossReport,
    /// dL/dyhat from all pixel-space terms.
    pub grad_yhat: Array4<f64>,
    /// dL/d(d_fake) from the adversarial term, to be pushed through the discriminator.
    pub grad_d_fake: Option<Array4<f64>>,
}

/// Loss configuration with its loaded perceptual extractor.
#[derive(Debug, Clone)]
pub struct LossEngine {
    pub cfg: LossConfig,
    pub vgg: Option<Vgg19>,
}

impl LossEngine {
    /// Loads the VGG extractor only when its weight is positive.
    pub fn new(cfg: LossConfig) -> Result<Self> {
        cfg.validate()?;
        let vgg = if cfg.weights.vgg > 0.0 {
            Some(Vgg19::load(&cfg.vgg_source)?)
        } else {
            None
        };
        Ok(LossEngine { cfg, vgg })
    }

    pub fn needs_discriminator(&self) -> bool {
        self.cfg.weights.adv > 0.0
    }

    pub fn evaluate(
        &self,
        yhat: &Array4<f64>,
        y: &Array4<f64>,
        mask: &Array4<f64>,
        d_fake: Option<&Array4<f64>>,
    ) -> Result<LossOutput> {
        combined_impl(yhat, y, mask, d_fake, &self.cfg, self.vgg.as_ref(), true)
    }
}

/// Weighted combination; disabled terms are not evaluated.
pub fn combined_loss(
    yhat: &Array4<f64>,
    y: &Array4<f64>,
    mask: &Array4<f64>,
    d_fake: Option<&Array4<f64>>,
    cfg: &LossConfig,
    vgg: Option<&Vgg19>,
) -> Result<LossReport> {
    Ok(combined_impl(yhat, y, mask, d_fake, cfg, vgg, false)?.report)
}

fn combined_impl(
    yhat: &Array4<f64>,
    y: &Array4<f64>,
    mask: &Array4<f64>,
    d_fake: Option<&Array4<f64>>,
    cfg: &LossConfig,
    vgg: Option<&Vgg19>,
    want_grad: bool,
) -> Result<LossOutput> {
    pixel::check_same(yhat, y, "combined")?;
    let w = cfg.weights;
    let mut r = LossReport::default();
    let mut grad = Array4::<f64>::zeros(yhat.raw_dim());
    let mut grad_d = None;
    let mut add = |g: Array4<f64>, wi: f64| grad.scaled_add(wi, &g);
    if w.l1 > 0.0 {
        let (v, g) = if want_grad {
            let (v, g) = l1_loss_grad(yhat, y)?;
            (v, Some(g))
        } else {
            (l1_loss(yhat, y)?, None)
        };
        r.l1 = Some(v);
        if let Some(g) = g {
            add(g, w.l1);
        }
    }
    if w.l1_masked > 0.0 {
        let (v, g) = masked_l1_loss_grad(yhat, y, mask, cfg.masked_w)?;
        r.l1_masked = Some(v.total);
        if want_grad {
            add(g, w.l1_masked);
        }
    }
    if w.ssim > 0.0 {
        let (v, g) = if want_grad {
            let (v, g) = ssim_loss_grad(yhat, y, cfg.ssim_kernel, cfg.ssim_sigma)?;
            (v, Some(g))
        } else {
            (ssim_loss(yhat, y, cfg.ssim_kernel, cfg.ssim_sigma)?, None)
        };
        r.ssim = Some(v);
        if let Some(g) = g {
            add(g, w.ssim);
        }
    }
    if w.vgg > 0.0 {
        let vgg = vgg.ok_or_else(|| Error::Dependency("VGG extractor not loaded".into()))?;
        let (v, g) = if want_grad {
            let (v, g) = vgg_loss_grad(yhat, y, vgg, &cfg.vgg_layers, &cfg.vgg_lambdas)?;
            (v, Some(g))
        } else {
            (vgg_loss(yhat, y, vgg, &cfg.vgg_layers, &cfg.vgg_lambdas)?, None)
        };
        r.vgg = Some(v);
        if let Some(g) = g {
            add(g, w.vgg);
        }
    }
    if w.freq > 0.0 {
        let (v, g) = if want_grad {
            let (v, g) = freq_loss_grad(yhat, y, cfg.freq_radius)?;
            (v, Some(g))
        } else {
            (freq_loss(yhat, y, cfg.freq_radius)?, None)
        };
        r.freq = Some(v.total);
        if let Some(g) = g {
            add(g, w.freq);
        }
    }
    if w.adv > 0.0 {
        let d = d_fake.ok_or_else(|| {
            Error::Argument("adversarial term enabled but no discriminator scores given".into())
        })?;
        let (v, g) = lsgan_g_loss_grad(d);
        r.adv = Some(v);
        if want_grad {
            grad_d = Some(g * w.adv);
        }
    }
    r.total = r.weighted_sum(&w);
    Ok(LossOutput {
        report: r,
        grad_yhat: grad,
        grad_d_fake: grad_d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::tests::random4;

    fn random_cfg(weights: LossWeights) -> LossConfig {
        LossConfig {
            weights,
            vgg_source: VggSource::Random {
                seed: 1,
                width_divisor: 16,
            },
            ..LossConfig::default()
        }
    }

    #[test]
    fn combined_optimum_is_zero() {
        let cfg = random_cfg(preset_weights("combined").unwrap());
        let eng = LossEngine::new(cfg).unwrap();
        let y = random4((2, 1, 16, 16), 1).mapv(f64::abs);
        let mask = y.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let ones = Array4::from_elem((2, 1, 2, 2), 1.0);
        let out = eng.evaluate(&y, &y, &mask, Some(&ones)).unwrap();
        assert!(out.report.total.abs() < 1e-7);
    }

    #[test]
    fn l1_only_reduces_to_l1() {
        let cfg = random_cfg(LossWeights::default());
        let y = random4((1, 1, 8, 8), 2);
        let z = random4((1, 1, 8, 8), 3);
        let r = combined_loss(&z, &y, &Array4::zeros(y.raw_dim()), None, &cfg, None).unwrap();
        assert_eq!(r.total, l1_loss(&z, &y).unwrap());
        assert!(r.ssim.is_none() && r.adv.is_none());
    }

    #[test]
    fn presets_and_validation() {
        for p in PRESETS {
            LossConfig::preset(p).unwrap().validate().unwrap();
        }
        assert!(matches!(LossConfig::preset("nope"), Err(Error::Config(_))));
        let zero = LossConfig {
            weights: LossWeights::ZERO,
            ..LossConfig::default()
        };
        assert!(zero.validate().is_err());
        let c = LossConfig::preset("combined").unwrap();
        assert_eq!(c.weights.l1_masked, 5.0);
    }

    #[test]
    fn missing_vgg_weights_is_dependency_error() {
        let cfg = LossConfig::preset("l1m_vgg").unwrap();
        let cfg = LossConfig {
            vgg_source: VggSource::Pretrained {
                path: "/nonexistent/vgg.safetensors".into(),
            },
            ..cfg
        };
        assert!(matches!(LossEngine::new(cfg), Err(Error::Dependency(_))));
    }
}
