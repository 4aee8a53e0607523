//! Adam optimizer over a list of convolution parameters.

use super::layers::{Conv2d, ConvGrad};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<ConvGrad>,
    v: Vec<ConvGrad>,
}

impl Adam {
    pub fn new(params: &[&Conv2d], lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<ConvGrad> = params.iter().map(|c| ConvGrad::zeros_like(c)).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update of every parameter from `grads` (same order).
    pub fn step(&mut self, params: Vec<&mut Conv2d>, grads: &[ConvGrad]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = self.lr / c1;
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / ((*v / c2).sqrt() + eps);
        };
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut c = Conv2d::zeros(1, 1, 1, 1, 0);
        c.weight[[0, 0, 0, 0]] = 1.0;
        let mut opt = Adam::new(&[&c], 0.1, 0.5, 0.99);
        let mut g = ConvGrad::zeros_like(&c);
        g.weight[[0, 0, 0, 0]] = 3.0;
        g.bias[0] = -2.0;
        opt.step(vec![&mut c], &[g]);
        assert!((c.weight[[0, 0, 0, 0]] - 0.9).abs() < 1e-8);
        assert!((c.bias[0] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut c = Conv2d::zeros(1, 1, 1, 1, 0);
        c.weight[[0, 0, 0, 0]] = 5.0;
        let mut opt = Adam::new(&[&c], 0.05, 0.5, 0.99);
        for _ in 0..2000 {
            let mut g = ConvGrad::zeros_like(&c);
            g.weight[[0, 0, 0, 0]] = 2.0 * (c.weight[[0, 0, 0, 0]] - 1.5);
            opt.step(vec![&mut c], &[g]);
        }
        assert!((c.weight[[0, 0, 0, 0]] - 1.5).abs() < 1e-3);
    }
}
