//! Slice-wise volume inference and multi-orientation fusion.
//!
//! A fusion pass reslices the input volumes along one of the three principal
//! planes, optionally after a 45 degree rotation about one of the two other
//! principal axes, predicts every slice, maps the prediction back onto the
//! original grid and averages all passes voxel by voxel. Tilted passes work
//! on an enlarged canvas holding the whole rotated volume; each voxel only
//! counts the passes in which its value came from fully supported samples.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{input_channels, Plane, STACK_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::Generator;
use crate::par;
use crate::volume::{Sequence, SequenceSet, Volume};

pub const TILT_DEG: f64 = 45.0;

/// Anything that maps (N, 9, H, W) stacks to (N, 1, H, W) slices.
pub trait SliceSynthesizer: Sync {
    /// Slice sizes must be multiples of this.
    fn size_multiple(&self) -> usize;
    fn synthesize(&self, x: &Array4<f64>) -> Result<Array4<f64>>;
}

impl SliceSynthesizer for Generator {
    fn size_multiple(&self) -> usize {
        self.cfg.size_multiple()
    }

    /// Network output clamped to [0, 1].
    fn synthesize(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        Ok(self.forward(x)?.mapv(|v| v.clamp(0.0, 1.0)))
    }
}

/// Returns one input channel unchanged (channel 1, 4 or 7 is a center slice).
#[derive(Debug, Clone, Copy)]
pub struct ChannelEcho {
    pub channel: usize,
}

impl SliceSynthesizer for ChannelEcho {
    fn size_multiple(&self) -> usize {
        1
    }

    fn synthesize(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        Ok(x.slice(s![.., self.channel..self.channel + 1, .., ..]).to_owned())
    }
}

/// Returns the same value everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantSlice(pub f64);

impl SliceSynthesizer for ConstantSlice {
    fn size_multiple(&self) -> usize {
        1
    }

    fn synthesize(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (n, _, h, w) = x.dim();
        Ok(Array4::from_elem((n, 1, h, w), self.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tilt {
    None,
    /// +45 degrees about the lower-numbered of the two non-slicing axes.
    First,
    /// +45 degrees about the higher-numbered one.
    Second,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Orientation {
    pub base: Plane,
    pub tilt: Tilt,
}

impl Orientation {
    /// Untilted passes first, then the tilted ones, plane by plane.
    pub fn all() -> Vec<Orientation> {
        let mut out: Vec<Orientation> = Plane::ALL
            .iter()
            .map(|&base| Orientation { base, tilt: Tilt::None })
            .collect();
        for base in Plane::ALL {
            for tilt in [Tilt::First, Tilt::Second] {
                out.push(Orientation { base, tilt });
            }
        }
        out
    }

    pub fn rotation(&self) -> Option<Rotation> {
        let a = self.base.axis();
        let others: Vec<usize> = (0..3).filter(|&i| i != a).collect();
        match self.tilt {
            Tilt::None => None,
            Tilt::First => Some(Rotation::new(others[0], TILT_DEG)),
            Tilt::Second => Some(Rotation::new(others[1], TILT_DEG)),
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rotation() {
            None => write!(f, "{}", self.base),
            Some(r) => write!(f, "{}+rot{}@{}", self.base, r.angle_deg, r.axis),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Three planes with two tilts each.
    #[default]
    Nine,
    /// Three untilted planes only.
    Three,
}

impl FusionMode {
    pub fn orientations(self) -> Vec<Orientation> {
        let all = Orientation::all();
        match self {
            FusionMode::Nine => all,
            FusionMode::Three => all.into_iter().take(3).collect(),
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nine" | "9" => Ok(FusionMode::Nine),
            "three" | "3" => Ok(FusionMode::Three),
            other => Err(Error::Argument(format!("unknown fusion mode '{other}'"))),
        }
    }
}

/// Rotation of the volume content about one principal axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    pub axis: usize,
    pub angle_deg: f64,
    cos: f64,
    sin: f64,
}

impl Rotation {
    pub fn new(axis: usize, angle_deg: f64) -> Self {
        let (sin, cos) = angle_deg.to_radians().sin_cos();
        Rotation {
            axis,
            angle_deg,
            cos,
            sin,
        }
    }

    fn plane(&self) -> (usize, usize) {
        match self.axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }

    /// Rotates offset `d` by +angle (`sign` = 1) or -angle (`sign` = -1).
    fn apply(&self, d: [f64; 3], sign: f64) -> [f64; 3] {
        let (p, q) = self.plane();
        let (s, c) = (sign * self.sin, self.cos);
        let mut out = d;
        out[p] = c * d[p] - s * d[q];
        out[q] = s * d[p] + c * d[q];
        out
    }

    /// Bounding box of the rotated grid.
    pub fn canvas_shape(&self, shape: [usize; 3]) -> [usize; 3] {
        let (p, q) = self.plane();
        let (c, s) = (self.cos.abs(), self.sin.abs());
        let ext = |a: usize, b: usize| {
            let e = c * (a as f64 - 1.0) + s * (b as f64 - 1.0) + 1.0;
            (e - 1e-9).ceil() as usize
        };
        let mut out = shape;
        out[p] = ext(shape[p], shape[q]);
        out[q] = ext(shape[q], shape[p]);
        out
    }
}

fn center(shape: [usize; 3]) -> [f64; 3] {
    [
        (shape[0] as f64 - 1.0) / 2.0,
        (shape[1] as f64 - 1.0) / 2.0,
        (shape[2] as f64 - 1.0) / 2.0,
    ]
}

/// Per-axis (low index, fraction) with the second corner needed only when
/// the fraction is nonzero. None if a needed corner is out of bounds.
fn corners(pos: [f64; 3], shape: [usize; 3]) -> Option<[(usize, f64); 3]> {
    let mut out = [(0usize, 0.0f64); 3];
    for a in 0..3 {
        let f = pos[a].floor();
        let t = pos[a] - f;
        if f < 0.0 {
            return None;
        }
        let i = f as usize;
        let hi = if t > 0.0 { i + 1 } else { i };
        if hi >= shape[a] {
            return None;
        }
        out[a] = (i, t);
    }
    Some(out)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Trilinear sample in `a + t (b - a)` form. Corners with zero weight are
/// never read, so constants are reproduced exactly. Returns None when a
/// needed corner is out of bounds or (with `valid`) not itself valid.
pub fn trilinear<T: Copy + Into<f64>>(
    a: &Array3<T>,
    pos: [f64; 3],
    valid: Option<&Array3<bool>>,
) -> Option<f64> {
    let shape = [a.dim().0, a.dim().1, a.dim().2];
    let c = corners(pos, shape)?;
    let get = |i: usize, j: usize, k: usize| -> Option<f64> {
        if let Some(v) = valid {
            if !v[[i, j, k]] {
                return None;
            }
        }
        Some(a[[i, j, k]].into())
    };
    let line = |i: usize, j: usize| -> Option<f64> {
        let (k, tk) = c[2];
        let v0 = get(i, j, k)?;
        if tk > 0.0 {
            Some(lerp(v0, get(i, j, k + 1)?, tk))
        } else {
            Some(v0)
        }
    };
    let plane = |i: usize| -> Option<f64> {
        let (j, tj) = c[1];
        let v0 = line(i, j)?;
        if tj > 0.0 {
            Some(lerp(v0, line(i, j + 1)?, tj))
        } else {
            Some(v0)
        }
    };
    let (i, ti) = c[0];
    let v0 = plane(i)?;
    if ti > 0.0 {
        Some(lerp(v0, plane(i + 1)?, ti))
    } else {
        Some(v0)
    }
}

/// Rotated copy of `vol` on the enlarged canvas, zero outside, with the
/// mask of canvas voxels whose sample was fully inside `vol`.
pub fn rotate_forward(vol: &Array3<f32>, rot: &Rotation) -> (Array3<f32>, Array3<bool>) {
    let shape = [vol.dim().0, vol.dim().1, vol.dim().2];
    let cshape = rot.canvas_shape(shape);
    let (vc, cc) = (center(shape), center(cshape));
    let both = par::array3_from_fn(cshape, |idx| {
        let d = [
            idx[0] as f64 - cc[0],
            idx[1] as f64 - cc[1],
            idx[2] as f64 - cc[2],
        ];
        let r = rot.apply(d, -1.0);
        let pos = [r[0] + vc[0], r[1] + vc[1], r[2] + vc[2]];
        match trilinear(vol, pos, None) {
            Some(v) => (v as f32, true),
            None => (0.0, false),
        }
    });
    (both.mapv(|p| p.0), both.mapv(|p| p.1))
}

/// Maps a canvas prediction back onto the original `shape`.
pub fn rotate_back(
    canvas: &Array3<f64>,
    canvas_valid: &Array3<bool>,
    rot: &Rotation,
    shape: [usize; 3],
) -> (Array3<f64>, Array3<bool>) {
    let cshape = [canvas.dim().0, canvas.dim().1, canvas.dim().2];
    let (vc, cc) = (center(shape), center(cshape));
    let both = par::array3_from_fn(shape, |idx| {
        let d = [
            idx[0] as f64 - vc[0],
            idx[1] as f64 - vc[1],
            idx[2] as f64 - vc[2],
        ];
        let r = rot.apply(d, 1.0);
        let pos = [r[0] + cc[0], r[1] + cc[1], r[2] + cc[2]];
        match trilinear(canvas, pos, Some(canvas_valid)) {
            Some(v) => (v, true),
            None => (0.0, false),
        }
    });
    (both.mapv(|p| p.0), both.mapv(|p| p.1))
}

/// Default number of slices per synthesizer call.
pub const INFERENCE_BATCH: usize = 16;

/// Predicts every slice of `plane` and stacks the results into a volume of
/// the input shape. Slices are zero-padded at the high end to the
/// synthesizer's size multiple and cropped back afterwards.
pub fn predict_volume<S: SliceSynthesizer + ?Sized>(
    gen: &S,
    inputs: &SequenceSet,
    target: Sequence,
    plane: Plane,
    batch: usize,
) -> Result<Array3<f64>> {
    let shape = inputs
        .shape()
        .ok_or_else(|| Error::MissingInput(format!("case {} has no volumes", inputs.case_id)))?;
    let a = plane.axis();
    let n = shape[a];
    let rest: Vec<usize> = (0..3).filter(|&i| i != a).map(|i| shape[i]).collect();
    let (h, w) = (rest[0], rest[1]);
    let m = gen.size_multiple().max(1);
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if hp.max(wp) > 1 << 16 {
        return Err(Error::Shape(format!("padded slice {hp}x{wp} too large")));
    }
    let mut out = Array3::<f64>::zeros((shape[0], shape[1], shape[2]));
    let batch = batch.max(1);
    let mut z0 = 0;
    while z0 < n {
        let z1 = (z0 + batch).min(n);
        let mut x = Array4::<f64>::zeros((z1 - z0, STACK_CHANNELS, hp, wp));
        for z in z0..z1 {
            let st = input_channels(inputs, target, plane, z)?;
            x.slice_mut(s![z - z0, .., ..h, ..w]).assign(&st.mapv(f64::from));
        }
        let y = gen.synthesize(&x)?;
        if y.dim() != (z1 - z0, 1, hp, wp) {
            return Err(Error::Shape(format!(
                "synthesizer returned {:?} for input {:?}",
                y.dim(),
                x.dim()
            )));
        }
        for z in z0..z1 {
            out.index_axis_mut(Axis(a), z)
                .assign(&y.slice(s![z - z0, 0, ..h, ..w]));
        }
        z0 = z1;
    }
    Ok(out)
}

/// One orientation's prediction on the original grid and where it is valid.
pub fn aligned_prediction<S: SliceSynthesizer + ?Sized>(
    gen: &S,
    inputs: &SequenceSet,
    target: Sequence,
    o: Orientation,
    batch: usize,
) -> Result<(Array3<f64>, Array3<bool>)> {
    let shape = inputs
        .shape()
        .ok_or_else(|| Error::MissingInput(format!("case {} has no volumes", inputs.case_id)))?;
    match o.rotation() {
        None => {
            let p = predict_volume(gen, inputs, target, o.base, batch)?;
            Ok((p, Array3::from_elem(shape, true)))
        }
        Some(rot) => {
            let mut canvas = SequenceSet {
                case_id: inputs.case_id.clone(),
                sequences: Default::default(),
                seg: None,
            };
            let mut valid: Option<Array3<bool>> = None;
            for seq in target.others() {
                let v = inputs.get(seq).ok_or_else(|| {
                    Error::MissingInput(format!("case {} lacks input {seq}", inputs.case_id))
                })?;
                let (data, mask) = rotate_forward(&v.data, &rot);
                valid = Some(mask);
                canvas.sequences.insert(
                    seq,
                    Volume {
                        data,
                        spacing: v.spacing,
                        origin: v.origin,
                    },
                );
            }
            let valid = valid.unwrap();
            let pred = predict_volume(gen, &canvas, target, o.base, batch)?;
            Ok(rotate_back(&pred, &valid, &rot, shape))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fused {
    pub volume: Array3<f32>,
    /// Number of orientations contributing to each voxel.
    pub counts: Array3<u8>,
}

/// Mean of the aligned per-orientation predictions, in fixed orientation order.
///
/// The mean is kept as a running update `m += (v - m) / k`, which leaves a
/// constant prediction exactly constant.
pub fn fuse<S: SliceSynthesizer + ?Sized>(
    gen: &S,
    inputs: &SequenceSet,
    target: Sequence,
    mode: FusionMode,
    batch: usize,
) -> Result<Fused> {
    let shape = inputs
        .shape()
        .ok_or_else(|| Error::MissingInput(format!("case {} has no volumes", inputs.case_id)))?;
    let mut mean = Array3::<f64>::zeros(shape);
    let mut counts = Array3::<u8>::zeros(shape);
    for o in mode.orientations() {
        let (p, valid) = aligned_prediction(gen, inputs, target, o, batch)?;
        ndarray::Zip::from(&mut mean)
            .and(&mut counts)
            .and(&p)
            .and(&valid)
            .for_each(|m, c, &v, &ok| {
                if ok {
                    *c += 1;
                    *m += (v - *m) / *c as f64;
                }
            });
    }
    Ok(Fused {
        volume: mean.mapv(|m| m as f32),
        counts,
    })
}
