//! Pixel losses (plain and tumor-masked L1) and least-squares adversarial losses.

use ndarray::{Array4, Zip};

use crate::error::{Error, Result};

pub(crate) fn check_same(a: &Array4<f64>, b: &Array4<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    if a.is_empty() {
        return Err(Error::Shape(format!("{what}: empty input")));
    }
    Ok(())
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error over all elements.
pub fn l1_loss(yhat: &Array4<f64>, y: &Array4<f64>) -> Result<f64> {
    check_same(yhat, y, "l1")?;
    let mut s = 0.0;
    Zip::from(yhat).and(y).for_each(|&a, &b| s += (a - b).abs());
    Ok(s / yhat.len() as f64)
}

/// L1 and its gradient with respect to `yhat` (zero at ties).
pub fn l1_loss_grad(yhat: &Array4<f64>, y: &Array4<f64>) -> Result<(f64, Array4<f64>)> {
    let v = l1_loss(yhat, y)?;
    let n = yhat.len() as f64;
    let g = Zip::from(yhat).and(y).map_collect(|&a, &b| sign(a - b) / n);
    Ok((v, g))
}

/// Components of the masked L1 loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedL1 {
    pub tumor: f64,
    pub healthy: f64,
    pub total: f64,
}

fn check_mask(mask: &Array4<f64>) -> Result<()> {
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Argument("tumor mask must be binary (0 or 1)".into()));
    }
    Ok(())
}

/// Region sums over the whole batch: (|d|·M, M, |d|·(1-M), 1-M).
fn region_sums(yhat: &Array4<f64>, y: &Array4<f64>, mask: &Array4<f64>) -> (f64, f64, f64, f64) {
    let (mut st, mut nt, mut sh, mut nh) = (0.0, 0.0, 0.0, 0.0);
    Zip::from(yhat).and(y).and(mask).for_each(|&a, &b, &m| {
        let d = (a - b).abs();
        st += d * m;
        nt += m;
        sh += d * (1.0 - m);
        nh += 1.0 - m;
    });
    (st, nt, sh, nh)
}

/// `w · L1_t + (1 − w) · L1_h`, each region mean taken over the whole batch.
///
/// An empty tumor region contributes 0, leaving `(1 − w) · L1_h`. When the
/// healthy region is empty the whole image is tumor and the loss is `L1_t`.
pub fn masked_l1_loss(yhat: &Array4<f64>, y: &Array4<f64>, mask: &Array4<f64>, w: f64) -> Result<MaskedL1> {
    Ok(masked_l1_impl(yhat, y, mask, w, false)?.0)
}

pub fn masked_l1_loss_grad(
    yhat: &Array4<f64>,
    y: &Array4<f64>,
    mask: &Array4<f64>,
    w: f64,
) -> Result<(MaskedL1, Array4<f64>)> {
    let (v, g) = masked_l1_impl(yhat, y, mask, w, true)?;
    Ok((v, g.unwrap()))
}

fn masked_l1_impl(
    yhat: &Array4<f64>,
    y: &Array4<f64>,
    mask: &Array4<f64>,
    w: f64,
    want_grad: bool,
) -> Result<(MaskedL1, Option<Array4<f64>>)> {
    check_same(yhat, y, "masked l1")?;
    check_same(yhat, mask, "masked l1 mask")?;
    check_mask(mask)?;
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Argument(format!("masked_w {w} outside [0, 1]")));
    }
    let (st, nt, sh, nh) = region_sums(yhat, y, mask);
    let tumor = if nt > 0.0 { st / nt } else { 0.0 };
    let healthy = if nh > 0.0 { sh / nh } else { 0.0 };
    // Coefficients of the tumor and healthy region means in the total.
    let (ct, ch) = if nh == 0.0 { (1.0, 0.0) } else { (w, 1.0 - w) };
    let total = ct * tumor + ch * healthy;
    let grad = want_grad.then(|| {
        let gt = if nt > 0.0 { ct / nt } else { 0.0 };
        let gh = if nh > 0.0 { ch / nh } else { 0.0 };
        Zip::from(yhat)
            .and(y)
            .and(mask)
            .map_collect(|&a, &b, &m| sign(a - b) * (gt * m + gh * (1.0 - m)))
    });
    Ok((
        MaskedL1 {
            tumor,
            healthy,
            total,
        },
        grad,
    ))
}

fn mean_sq_offset(a: &Array4<f64>, target: f64) -> f64 {
    a.iter().map(|v| (v - target) * (v - target)).sum::<f64>() / a.len() as f64
}

/// Discriminator objective: mean((d_real − 1)²) + mean(d_fake²).
pub fn lsgan_d_loss(d_real: &Array4<f64>, d_fake: &Array4<f64>) -> f64 {
    mean_sq_offset(d_real, 1.0) + mean_sq_offset(d_fake, 0.0)
}

/// Gradients of [`lsgan_d_loss`] with respect to both score maps.
pub fn lsgan_d_loss_grad(d_real: &Array4<f64>, d_fake: &Array4<f64>) -> (f64, Array4<f64>, Array4<f64>) {
    let nr = d_real.len() as f64;
    let nf = d_fake.len() as f64;
    (
        lsgan_d_loss(d_real, d_fake),
        d_real.mapv(|v| 2.0 * (v - 1.0) / nr),
        d_fake.mapv(|v| 2.0 * v / nf),
    )
}

/// Generator objective: mean((d_fake − 1)²).
pub fn lsgan_g_loss(d_fake: &Array4<f64>) -> f64 {
    mean_sq_offset(d_fake, 1.0)
}

pub fn lsgan_g_loss_grad(d_fake: &Array4<f64>) -> (f64, Array4<f64>) {
    let n = d_fake.len() as f64;
    (lsgan_g_loss(d_fake), d_fake.mapv(|v| 2.0 * (v - 1.0) / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Array4<f64> {
        Array4::from_shape_vec((1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_loss(&row(&[0.0, 0.0]), &row(&[1.0, 0.0])).unwrap(), 0.5);
        let y = row(&[0.2, 0.7, 0.1]);
        assert_eq!(l1_loss(&y, &y).unwrap(), 0.0);
        let a = row(&[0.3, 0.1, 0.9]);
        let l = l1_loss(&a, &y).unwrap();
        let l3 = l1_loss(&(&a * 3.0), &(&y * 3.0)).unwrap();
        assert!((l3 - 3.0 * l).abs() < 1e-12);
        assert!(matches!(l1_loss(&row(&[0.0]), &y), Err(Error::Shape(_))));
    }

    #[test]
    fn masked_examples() {
        let y = row(&[1.0, 0.0, 0.5, 0.5]);
        let yh = row(&[0.0, 0.0, 0.0, 1.0]);
        let m = row(&[1.0, 1.0, 0.0, 0.0]);
        let r = masked_l1_loss(&yh, &y, &m, 0.5).unwrap();
        assert_eq!((r.tumor, r.healthy, r.total), (0.5, 0.5, 0.5));
        let empty = row(&[0.0; 4]);
        let r = masked_l1_loss(&yh, &y, &empty, 0.5).unwrap();
        assert_eq!(r.tumor, 0.0);
        assert_eq!(r.total, 0.5 * r.healthy);
        let ones = row(&[1.0; 4]);
        for w in [0.0, 0.3, 1.0] {
            assert_eq!(masked_l1_loss(&yh, &y, &ones, w).unwrap().total, l1_loss(&yh, &y).unwrap());
        }
        assert!(matches!(
            masked_l1_loss(&yh, &y, &row(&[0.5, 0.0, 0.0, 0.0]), 0.5),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn lsgan_examples() {
        let ones = Array4::from_elem((1, 1, 3, 3), 1.0);
        let zeros = Array4::zeros((1, 1, 3, 3));
        let half = Array4::from_elem((1, 1, 3, 3), 0.5);
        assert_eq!(lsgan_d_loss(&ones, &zeros), 0.0);
        assert_eq!(lsgan_g_loss(&ones), 0.0);
        assert_eq!(lsgan_d_loss(&half, &half), 0.5);
    }
}
