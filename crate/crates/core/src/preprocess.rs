//! Intensity normalization: corpus-level histogram standardization and
//! per-case MinMax scaling.
//!
//! Histogram standardization learns, per sequence, a set of "standard"
//! intensity landmarks at fixed foreground percentiles. A volume is
//! standardized by mapping its own percentiles onto those landmarks with a
//! piecewise-linear, monotone function. MinMax scaling then brings the three
//! input volumes of a case jointly into [0, 1]; the target volume gets its own
//! independent scale.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{Sequence, Volume};

/// Percentile points used when none are given.
pub const DEFAULT_PERCENTILES: [f64; 11] =
    [1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0];

/// Range spanned by fitted landmarks.
pub const STANDARD_RANGE: (f64, f64) = (0.0, 100.0);

/// Ceiling of standardized output, as a multiple of the top landmark.
pub const CLAMP_FACTOR: f64 = 1.5;

const TIE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardScale {
    pub sequence: Sequence,
    pub percentiles: Vec<f64>,
    pub landmarks: Vec<f64>,
}

impl StandardScale {
    pub fn new(sequence: Sequence, percentiles: Vec<f64>, landmarks: Vec<f64>) -> Result<Self> {
        let s = StandardScale {
            sequence,
            percentiles,
            landmarks,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        validate_percentiles(&self.percentiles)?;
        if self.landmarks.len() != self.percentiles.len() {
            return Err(Error::Argument(format!(
                "{} landmarks for {} percentile points",
                self.landmarks.len(),
                self.percentiles.len()
            )));
        }
        if self.landmarks.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Argument("landmarks must be strictly increasing".into()));
        }
        Ok(())
    }
}

fn validate_percentiles(points: &[f64]) -> Result<()> {
    if points.len() < 2 {
        return Err(Error::Argument("need at least two percentile points".into()));
    }
    if points.iter().any(|&p| !(p > 0.0 && p < 100.0)) {
        return Err(Error::Argument("percentile points must lie in (0, 100)".into()));
    }
    if points.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Argument("percentile points must be strictly increasing".into()));
    }
    Ok(())
}

/// Per-sequence scales shared between training and inference.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    #[serde(default)]
    pub scale: Vec<StandardScale>,
}

impl LandmarkSet {
    pub fn get(&self, s: Sequence) -> Option<&StandardScale> {
        self.scale.iter().find(|x| x.sequence == s)
    }

    pub fn insert(&mut self, scale: StandardScale) {
        self.scale.retain(|x| x.sequence != scale.sequence);
        self.scale.push(scale);
        self.scale.sort_by_key(|x| x.sequence);
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: LandmarkSet =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for s in &set.scale {
            s.validate()?;
        }
        Ok(set)
    }
}

/// Sorted foreground (> 0) intensities.
fn sorted_foreground(v: &Volume) -> Vec<f64> {
    let mut fg: Vec<f64> = v
        .data
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x as f64)
        .collect();
    fg.sort_by(f64::total_cmp);
    fg
}

/// Linear-interpolated percentile of sorted data (the usual "linear" method).
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

/// Foreground percentiles of one volume; errors when the foreground has
/// fewer than two distinct values or its percentiles collapse.
pub fn foreground_percentiles(v: &Volume, points: &[f64]) -> Result<Vec<f64>> {
    let fg = sorted_foreground(v);
    if fg.is_empty() || fg[0] == fg[fg.len() - 1] {
        return Err(Error::DegenerateHistogram(
            "volume foreground has fewer than two distinct intensities".into(),
        ));
    }
    let out: Vec<f64> = points.iter().map(|&p| percentile_sorted(&fg, p)).collect();
    if !(out[out.len() - 1] > out[0]) {
        return Err(Error::DegenerateHistogram(
            "first and last foreground percentiles coincide".into(),
        ));
    }
    Ok(out)
}

/// Learns standard landmarks from a training corpus.
///
/// Each volume's percentiles are affinely mapped so that the first lands on 0
/// and the last on 100; the landmarks are the mean of those over volumes.
pub fn fit_landmarks(
    sequence: Sequence,
    volumes: &[&Volume],
    percentile_points: &[f64],
) -> Result<StandardScale> {
    validate_percentiles(percentile_points)?;
    if volumes.is_empty() {
        return Err(Error::Argument("fit_landmarks needs at least one volume".into()));
    }
    let per_volume = par::map_slice(volumes, |v| foreground_percentiles(v, percentile_points));
    let (s_lo, s_hi) = STANDARD_RANGE;
    let mut acc = vec![0.0; percentile_points.len()];
    // fixed summation order: volume order
    for pct in per_volume {
        let pct = pct?;
        let (lo, hi) = (pct[0], pct[pct.len() - 1]);
        for (a, x) in acc.iter_mut().zip(&pct) {
            *a += s_lo + (x - lo) / (hi - lo) * (s_hi - s_lo);
        }
    }
    let n = volumes.len() as f64;
    let mut landmarks: Vec<f64> = acc.into_iter().map(|a| a / n).collect();
    for i in 1..landmarks.len() {
        if landmarks[i] <= landmarks[i - 1] {
            landmarks[i] = landmarks[i - 1] + TIE_EPS;
        }
    }
    StandardScale::new(sequence, percentile_points.to_vec(), landmarks)
}

/// Piecewise-linear interpolation through knots `xs` (non-decreasing) to `ys`
/// (strictly increasing), with linear extrapolation along the end segments.
fn piecewise_linear(v: f64, xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len();
    let seg = |k: usize| {
        let (x0, x1, y0, y1) = (xs[k], xs[k + 1], ys[k], ys[k + 1]);
        y0 + (v - x0) * (y1 - y0) / (x1 - x0)
    };
    if v < xs[0] {
        // first segment with positive width
        let k = (0..n - 1).find(|&k| xs[k + 1] > xs[k]).unwrap();
        return ys[0] + (v - xs[0]) * (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k]);
    }
    if v >= xs[n - 1] {
        let k = (0..n - 1).rev().find(|&k| xs[k + 1] > xs[k]).unwrap();
        return ys[n - 1] + (v - xs[n - 1]) * (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k]);
    }
    // last knot <= v; the next knot is then strictly greater
    let k = xs.partition_point(|&x| x <= v) - 1;
    seg(k)
}

/// Maps a volume onto the standard landmarks. Background (<= 0) stays 0.
pub fn standardize(v: &Volume, scale: &StandardScale) -> Result<Volume> {
    scale.validate()?;
    let own = foreground_percentiles(v, &scale.percentiles)?;
    let ceiling = CLAMP_FACTOR * scale.landmarks[scale.landmarks.len() - 1];
    let lm = &scale.landmarks;
    let data = v.data.mapv(|x| {
        if x <= 0.0 {
            0.0
        } else {
            piecewise_linear(x as f64, &own, lm).clamp(0.0, ceiling) as f32
        }
    });
    Ok(v.with_data(data))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScale {
    pub lo: f64,
    pub hi: f64,
}

impl MinMaxScale {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::DegenerateRange { lo, hi });
        }
        Ok(MinMaxScale { lo, hi })
    }

    /// Fitted on a single volume (used for targets).
    pub fn fit(v: &Volume) -> Result<Self> {
        let (lo, hi) = v.min_max();
        MinMaxScale::new(lo as f64, hi as f64)
    }

    pub fn apply_value(&self, x: f64) -> f64 {
        (x - self.lo) / (self.hi - self.lo)
    }

    pub fn invert_value(&self, x: f64) -> f64 {
        (x * (self.hi - self.lo) + self.lo).max(0.0)
    }
}

/// Joint min/max over the three input volumes of a case.
pub fn minmax_fit_inputs(inputs: &[&Volume]) -> Result<MinMaxScale> {
    if inputs.len() != 3 {
        return Err(Error::Argument(format!("expected 3 input volumes, got {}", inputs.len())));
    }
    let shape = inputs[0].shape();
    if inputs.iter().any(|v| v.shape() != shape) {
        return Err(Error::Shape("input volumes differ in shape".into()));
    }
    let (lo, hi) = inputs.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
        let (a, b) = v.min_max();
        (lo.min(a), hi.max(b))
    });
    MinMaxScale::new(lo as f64, hi as f64)
}

pub fn minmax_apply(v: &Volume, s: &MinMaxScale) -> Result<Volume> {
    let s = MinMaxScale::new(s.lo, s.hi)?;
    Ok(v.with_data(v.data.mapv(|x| s.apply_value(x as f64) as f32)))
}

/// Inverse scaling, clamped at 0 (intensities live in [0, inf)).
pub fn minmax_invert(v: &Volume, s: &MinMaxScale) -> Result<Volume> {
    let s = MinMaxScale::new(s.lo, s.hi)?;
    if v.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument("cannot invert non-finite intensities".into()));
    }
    Ok(v.with_data(v.data.mapv(|x| s.invert_value(x as f64) as f32)))
}

/// Convenience for arrays that are not wrapped in a [`Volume`].
pub fn minmax_apply_array(a: &Array3<f32>, s: &MinMaxScale) -> Array3<f32> {
    a.mapv(|x| s.apply_value(x as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(data: Array3<f32>) -> Volume {
        Volume::new(data, [1.0; 3]).unwrap()
    }

    fn uniform_volume(n: usize, seed: u64, scale: f32) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // a few zeros as background plus n foreground voxels in (0, 1]
        let side = ((n as f64).cbrt().ceil()) as usize;
        let data = Array3::from_shape_fn((side, side, side), |_| {
            let u: f32 = rng.random_range(1e-6..1.0);
            u * scale
        });
        vol(data)
    }

    #[test]
    fn uniform_foreground_gives_linear_landmarks() {
        let v = uniform_volume(100_000, 3, 1.0);
        let scale = fit_landmarks(Sequence::T1n, &[&v], &DEFAULT_PERCENTILES).unwrap();
        // oracle: direct percentile computation on the sampled voxels
        let mut fg: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
        fg.sort_by(f64::total_cmp);
        let pct: Vec<f64> = DEFAULT_PERCENTILES
            .iter()
            .map(|&p| {
                let pos = p / 100.0 * (fg.len() - 1) as f64;
                let i = pos.floor() as usize;
                fg[i] + (pos - i as f64) * (fg[(i + 1).min(fg.len() - 1)] - fg[i])
            })
            .collect();
        let (lo, hi) = (pct[0], pct[10]);
        for (i, &p) in DEFAULT_PERCENTILES.iter().enumerate() {
            let oracle = (pct[i] - lo) / (hi - lo) * 100.0;
            assert!((scale.landmarks[i] - oracle).abs() < 1e-9);
            // and close to linear spacing of the percentile points themselves
            let linear = (p - 1.0) / 98.0 * 100.0;
            assert!((scale.landmarks[i] - linear).abs() < 2.0, "{i}: {}", scale.landmarks[i]);
        }
        assert_eq!(scale.landmarks[0], 0.0);
        assert!((scale.landmarks[10] - 100.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_volumes_do_not_change_landmarks() {
        let v = uniform_volume(4000, 5, 3.0);
        let one = fit_landmarks(Sequence::T2w, &[&v], &DEFAULT_PERCENTILES).unwrap();
        let two = fit_landmarks(Sequence::T2w, &[&v, &v], &DEFAULT_PERCENTILES).unwrap();
        for (a, b) in one.landmarks.iter().zip(&two.landmarks) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_volume_is_degenerate() {
        let v = vol(Array3::zeros((4, 4, 4)));
        let e = fit_landmarks(Sequence::T1c, &[&v], &DEFAULT_PERCENTILES).unwrap_err();
        assert!(matches!(e, Error::DegenerateHistogram(_)));
        let c = vol(Array3::from_elem((4, 4, 4), 3.0));
        assert!(matches!(
            fit_landmarks(Sequence::T1c, &[&c], &DEFAULT_PERCENTILES),
            Err(Error::DegenerateHistogram(_))
        ));
    }

    #[test]
    fn standardize_fixed_point() {
        let v = uniform_volume(8000, 9, 50.0);
        let own = foreground_percentiles(&v, &DEFAULT_PERCENTILES).unwrap();
        let scale = StandardScale::new(Sequence::T1n, DEFAULT_PERCENTILES.to_vec(), own).unwrap();
        let out = standardize(&v, &scale).unwrap();
        for (a, b) in v.data.iter().zip(out.data.iter()) {
            assert!((a - b).abs() < 1e-5 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn standardize_absorbs_global_scaling() {
        let v = uniform_volume(8000, 11, 1.0);
        let scale = fit_landmarks(Sequence::T2f, &[&v], &DEFAULT_PERCENTILES).unwrap();
        let doubled = v.with_data(v.data.mapv(|x| 2.0 * x));
        let a = standardize(&v, &scale).unwrap();
        let b = standardize(&doubled, &scale).unwrap();
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn standardize_keeps_background_and_clamps() {
        let mut data = Array3::from_shape_fn((10, 10, 10), |(i, j, k)| (i + j + k) as f32);
        data[[9, 9, 9]] = 1.0e6;
        let v = vol(data);
        let scale = fit_landmarks(Sequence::T1c, &[&v], &DEFAULT_PERCENTILES).unwrap();
        let out = standardize(&v, &scale).unwrap();
        assert_eq!(out.data[[0, 0, 0]], 0.0);
        assert!((out.data[[9, 9, 9]] as f64 - 150.0).abs() < 1e-3);
    }

    #[test]
    fn standardize_handles_tied_percentiles() {
        // three intensity levels -> many tied percentile knots
        let data = Array3::from_shape_fn((8, 8, 8), |(i, _, _)| match i {
            0 => 0.0,
            1..=3 => 10.0,
            4..=6 => 20.0,
            _ => 40.0,
        });
        let v = vol(data);
        let scale = fit_landmarks(Sequence::T1c, &[&v], &DEFAULT_PERCENTILES).unwrap();
        let out = standardize(&v, &scale).unwrap();
        assert!(out.data.iter().all(|x| x.is_finite()));
        assert!(out.data[[1, 0, 0]] <= out.data[[4, 0, 0]]);
        assert!(out.data[[4, 0, 0]] <= out.data[[7, 0, 0]]);
    }

    proptest! {
        #[test]
        fn standardize_is_monotone(vals in proptest::collection::vec(0.0f32..1000.0, 64..200), seed in 0u64..50) {
            let n = vals.len();
            let v = vol(Array3::from_shape_vec((n, 1, 1), vals).unwrap());
            let reference = uniform_volume(2000, seed, 10.0);
            let scale = fit_landmarks(Sequence::T1n, &[&reference], &DEFAULT_PERCENTILES).unwrap();
            if let Ok(out) = standardize(&v, &scale) {
                let mut pairs: Vec<(f32, f32)> = v.data.iter().cloned().zip(out.data.iter().cloned()).collect();
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                for w in pairs.windows(2) {
                    prop_assert!(w[1].1 >= w[0].1);
                }
            }
        }

        #[test]
        fn minmax_round_trip(vals in proptest::collection::vec(0.0f32..500.0, 8..64)) {
            let n = vals.len();
            let v = vol(Array3::from_shape_vec((n, 1, 1), vals).unwrap());
            if let Ok(s) = MinMaxScale::fit(&v) {
                let a = minmax_apply(&v, &s).unwrap();
                let (lo, hi) = a.min_max();
                prop_assert_eq!(lo, 0.0);
                prop_assert!((hi - 1.0).abs() < 1e-6);
                let back = minmax_invert(&a, &s).unwrap();
                for (x, y) in v.data.iter().zip(back.data.iter()) {
                    prop_assert!(((x - y) as f64).abs() <= 1e-6 * (s.hi - s.lo).max(1.0));
                }
            }
        }
    }

    #[test]
    fn joint_minmax() {
        let mk = |lo: f32, hi: f32| {
            let mut d = Array3::from_elem((2, 2, 2), (lo + hi) / 2.0);
            d[[0, 0, 0]] = lo;
            d[[1, 1, 1]] = hi;
            vol(d)
        };
        let (a, b, c) = (mk(0.0, 5.0), mk(1.0, 9.0), mk(2.0, 7.0));
        assert_eq!(minmax_fit_inputs(&[&a, &b, &c]).unwrap(), MinMaxScale { lo: 0.0, hi: 9.0 });
        let one = |x: f32| vol(Array3::from_elem((1, 1, 1), x));
        let (p, q, r) = (one(1.0), one(2.0), one(3.0));
        assert_eq!(minmax_fit_inputs(&[&p, &q, &r]).unwrap(), MinMaxScale { lo: 1.0, hi: 3.0 });
        let (k1, k2, k3) = (one(4.0), one(4.0), one(4.0));
        assert!(matches!(
            minmax_fit_inputs(&[&k1, &k2, &k3]),
            Err(Error::DegenerateRange { .. })
        ));
    }

    #[test]
    fn minmax_formulas() {
        let s = MinMaxScale::new(0.0, 2.0).unwrap();
        assert_eq!(s.apply_value(1.0), 0.5);
        assert_eq!(s.invert_value(-0.1), 0.0);
        assert!(MinMaxScale::new(1.0, 1.0).is_err());
    }

    #[test]
    fn landmark_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = LandmarkSet::default();
        let v = uniform_volume(1000, 1, 2.0);
        set.insert(fit_landmarks(Sequence::T2w, &[&v], &DEFAULT_PERCENTILES).unwrap());
        set.insert(fit_landmarks(Sequence::T1c, &[&v], &DEFAULT_PERCENTILES).unwrap());
        let p = dir.path().join("landmarks.toml");
        set.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("sequence = \"t1c\""));
        assert!(text.contains("percentiles"));
        assert!(text.contains("landmarks"));
        assert_eq!(LandmarkSet::load(&p).unwrap(), set);
    }
}
