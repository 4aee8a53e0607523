//! Masked volumetric SSIM and PSNR in tumor and healthy tissue.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array3, Axis, Zip};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::ssim::{gaussian_window, C1, C2};
use crate::par;
use crate::volume::{LabelVolume, Volume};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// One axis of a separable Gaussian filter with same-size output; taps that
/// fall outside the volume are dropped and the rest renormalized.
fn filter_axis(a: &Array3<f64>, axis: usize, w: &[f64]) -> Array3<f64> {
    let shape = [a.dim().0, a.dim().1, a.dim().2];
    let n = shape[axis] as isize;
    let r = (w.len() / 2) as isize;
    par::array3_from_fn(shape, |idx| {
        let i = idx[axis] as isize;
        let (mut acc, mut norm) = (0.0, 0.0);
        for (t, &wt) in w.iter().enumerate() {
            let j = i + t as isize - r;
            if j >= 0 && j < n {
                let mut src = idx;
                src[axis] = j as usize;
                acc += wt * a[src];
                norm += wt;
            }
        }
        acc / norm
    })
}

fn gauss3(a: &Array3<f64>, w: &[f64]) -> Array3<f64> {
    let x = filter_axis(a, 0, w);
    let x = filter_axis(&x, 1, w);
    filter_axis(&x, 2, w)
}

/// Voxelwise SSIM of two volumes in [0, 1] with an 11³ Gaussian window.
pub fn ssim_map_3d(a: &Array3<f64>, b: &Array3<f64>) -> Result<Array3<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("ssim volumes {:?} vs {:?}", a.dim(), b.dim())));
    }
    let w = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let ma = gauss3(a, &w);
    let mb = gauss3(b, &w);
    let eaa = gauss3(&(a * a), &w);
    let ebb = gauss3(&(b * b), &w);
    let eab = gauss3(&(a * b), &w);
    let mut out = Array3::<f64>::zeros(a.raw_dim());
    Zip::from(&mut out)
        .and(&ma)
        .and(&mb)
        .and(&eaa)
        .and(&ebb)
        .and(&eab)
        .for_each(|o, &ma, &mb, &eaa, &ebb, &eab| {
            let va = eaa - ma * ma;
            let vb = ebb - mb * mb;
            let cov = eab - ma * mb;
            *o = ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        });
    Ok(out)
}

fn check_mask(shape: (usize, usize, usize), mask: &Array3<bool>) -> Result<usize> {
    if mask.dim() != shape {
        return Err(Error::Shape(format!("mask {:?} vs volume {:?}", mask.dim(), shape)));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyRegion("mask selects no voxels".into()));
    }
    Ok(n)
}

/// Mean of an SSIM map over a region.
pub fn masked_mean(map: &Array3<f64>, mask: &Array3<bool>) -> Result<f64> {
    let n = check_mask(map.dim(), mask)?;
    let s: f64 = map.iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    Ok(s / n as f64)
}

/// SSIM map over the whole volume, averaged inside `mask`.
pub fn masked_ssim(pred: &Array3<f64>, reference: &Array3<f64>, mask: &Array3<bool>) -> Result<f64> {
    check_mask(pred.dim(), mask)?;
    masked_mean(&ssim_map_3d(pred, reference)?, mask)
}

/// PSNR in dB over masked voxels for data range 1; zero error gives +inf.
pub fn masked_psnr(pred: &Array3<f64>, reference: &Array3<f64>, mask: &Array3<bool>) -> Result<f64> {
    if pred.dim() != reference.dim() {
        return Err(Error::Shape("psnr volumes differ in shape".into()));
    }
    let n = check_mask(pred.dim(), mask)?;
    let mut se = 0.0;
    Zip::from(pred).and(reference).and(mask).for_each(|&p, &r, &m| {
        if m {
            se += (p - r) * (p - r);
        }
    });
    let mse = se / n as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Tumor metrics are None when the case has no tumor voxels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub case_id: String,
    pub ssim_h: f64,
    pub ssim_t: Option<f64>,
    pub psnr_h: f64,
    pub psnr_t: Option<f64>,
}

/// Region masks for one case.
#[derive(Debug, Clone)]
pub struct Regions {
    pub brain: Array3<bool>,
    pub tumor: Array3<bool>,
    pub healthy: Array3<bool>,
}

/// Tumor = seg > 0; brain = (reference > 0) ∪ tumor; healthy = brain \ tumor.
pub fn regions(reference: &Volume, seg: Option<&LabelVolume>) -> Result<Regions> {
    let tumor = match seg {
        Some(s) => {
            if s.shape() != reference.shape() {
                return Err(Error::Shape("segmentation and reference differ in shape".into()));
            }
            s.tumor_mask()
        }
        None => Array3::from_elem(reference.data.raw_dim(), false),
    };
    let brain = Zip::from(&reference.data)
        .and(&tumor)
        .map_collect(|&r, &t| r > 0.0 || t);
    let healthy = Zip::from(&brain).and(&tumor).map_collect(|&b, &t| b && !t);
    Ok(Regions { brain, tumor, healthy })
}

/// Both volumes scaled by the reference range; the prediction is clamped to [0, 1].
pub fn normalize_pair(pred: &Volume, reference: &Volume) -> Result<(Array3<f64>, Array3<f64>)> {
    if pred.shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs reference {:?}",
            pred.shape(),
            reference.shape()
        )));
    }
    let (lo, hi) = reference.min_max();
    let (lo, hi) = (lo as f64, hi as f64);
    if hi <= lo {
        return Err(Error::DegenerateRange { lo, hi });
    }
    let r = reference.data.mapv(|v| (v as f64 - lo) / (hi - lo));
    let p = pred.data.mapv(|v| ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0));
    Ok((p, r))
}

/// Without a segmentation the healthy columns cover the whole volume and the
/// tumor columns are not applicable.
pub fn evaluate_case(case_id: &str, pred: &Volume, reference: &Volume, seg: Option<&LabelVolume>) -> Result<MetricRow> {
    let (p, r) = normalize_pair(pred, reference)?;
    let mut reg = regions(reference, seg)?;
    if seg.is_none() {
        log::warn!("{case_id}: no segmentation, reporting whole-volume metrics");
        reg.healthy.fill(true);
    }
    let map = ssim_map_3d(&p, &r)?;
    let has_tumor = reg.tumor.iter().any(|&t| t);
    Ok(MetricRow {
        case_id: case_id.to_string(),
        ssim_h: masked_mean(&map, &reg.healthy)?,
        ssim_t: if has_tumor { Some(masked_mean(&map, &reg.tumor)?) } else { None },
        psnr_h: masked_psnr(&p, &r, &reg.healthy)?,
        psnr_t: if has_tumor { Some(masked_psnr(&p, &r, &reg.tumor)?) } else { None },
    })
}

/// Column means; not-applicable entries are skipped.
pub fn mean_row(rows: &[MetricRow]) -> MetricRow {
    let mean = |vals: Vec<f64>| -> Option<f64> {
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    MetricRow {
        case_id: "mean".into(),
        ssim_h: mean(rows.iter().map(|r| r.ssim_h).collect()).unwrap_or(f64::NAN),
        ssim_t: mean(rows.iter().filter_map(|r| r.ssim_t).collect()),
        psnr_h: mean(rows.iter().map(|r| r.psnr_h).collect()).unwrap_or(f64::NAN),
        psnr_t: mean(rows.iter().filter_map(|r| r.psnr_t).collect()),
    }
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        None => "NA".into(),
        Some(v) if v == f64::INFINITY => "inf".into(),
        Some(v) if v.is_nan() => "NA".into(),
        Some(v) => format!("{v:.6}"),
    }
}

pub const CSV_HEADER: &str = "case_id,ssim_h,ssim_t,psnr_h,psnr_t";

/// CSV text: header, one line per row, then the mean row.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{CSV_HEADER}").unwrap();
    let mean = mean_row(rows);
    for r in rows.iter().chain(std::iter::once(&mean)) {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.case_id,
            fmt_value(Some(r.ssim_h)),
            fmt_value(r.ssim_t),
            fmt_value(Some(r.psnr_h)),
            fmt_value(r.psnr_t)
        )
        .unwrap();
    }
    out
}

fn json_value(v: Option<f64>) -> serde_json::Value {
    match v {
        Some(v) if v.is_finite() => serde_json::json!(v),
        Some(v) if v == f64::INFINITY => serde_json::json!("inf"),
        _ => serde_json::Value::Null,
    }
}

/// Summary with case count and column means.
pub fn metrics_summary(rows: &[MetricRow]) -> serde_json::Value {
    let m = mean_row(rows);
    serde_json::json!({
        "cases": rows.len(),
        "mean": {
            "ssim_h": json_value(Some(m.ssim_h)),
            "ssim_t": json_value(m.ssim_t),
            "psnr_h": json_value(Some(m.psnr_h)),
            "psnr_t": json_value(m.psnr_t),
        },
    })
}

pub fn write_metrics(rows: &[MetricRow], csv_path: &Path, json_path: &Path) -> Result<()> {
    for p in [csv_path, json_path] {
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(csv_path, metrics_csv(rows)).map_err(|e| Error::io(csv_path, e))?;
    let text = serde_json::to_string_pretty(&metrics_summary(rows)).unwrap() + "\n";
    std::fs::write(json_path, text).map_err(|e| Error::io(json_path, e))
}

/// Center slice of a volume along axis 2, for quick checks.
pub fn center_slice(v: &Array3<f64>) -> ndarray::Array2<f64> {
    v.index_axis(Axis(2), v.dim().2 / 2).to_owned()
}
