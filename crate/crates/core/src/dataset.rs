//! Nine-channel 2.5D slice stacks, slice enumeration, online augmentation and
//! epoch sampling.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::case_seed;
use crate::preprocess::{
    minmax_apply, minmax_fit_inputs, standardize, LandmarkSet, MinMaxScale,
};
use crate::volume::{Sequence, SequenceSet, Volume};
use crate::par;

/// Number of input channels: three sequences times three neighbouring slices.
pub const STACK_CHANNELS: usize = 9;

/// Slicing plane. The value of [`Plane::axis`] is the volume axis held fixed
/// (volumes are RAS: axis 0 runs left-right, 1 posterior-anterior, 2 inferior-superior).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Sagittal,
    Coronal,
    Axial,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Sagittal, Plane::Coronal, Plane::Axial];

    pub fn axis(self) -> usize {
        match self {
            Plane::Sagittal => 0,
            Plane::Coronal => 1,
            Plane::Axial => 2,
        }
    }

    pub fn from_axis(axis: usize) -> Option<Plane> {
        Plane::ALL.get(axis).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Plane::Sagittal => "sagittal",
            Plane::Coronal => "coronal",
            Plane::Axial => "axial",
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sagittal" => Ok(Plane::Sagittal),
            "coronal" => Ok(Plane::Coronal),
            "axial" => Ok(Plane::Axial),
            other => Err(Error::Argument(format!("unknown plane '{other}'"))),
        }
    }
}

/// One training or inference sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack25D {
    /// (9, H, W): for each input sequence in canonical order, slices z-1, z, z+1.
    pub input: Array3<f32>,
    /// (H, W) slice of the target sequence; zeros when no target is available.
    pub target: Array2<f32>,
    /// (H, W) binary tumor mask stored as 0.0 / 1.0.
    pub tumor_mask: Array2<f32>,
    pub plane: Plane,
    pub slice_index: usize,
}

impl Stack25D {
    pub fn spatial(&self) -> (usize, usize) {
        self.target.dim()
    }
}

fn slice_of(v: &Volume, plane: Plane, z: isize) -> Option<ArrayView2<'_, f32>> {
    let a = plane.axis();
    if z < 0 || z as usize >= v.data.len_of(Axis(a)) {
        return None;
    }
    Some(v.data.index_axis(Axis(a), z as usize))
}

fn slice_shape(shape: [usize; 3], plane: Plane) -> (usize, usize) {
    let a = plane.axis();
    let rest: Vec<usize> = (0..3).filter(|&i| i != a).map(|i| shape[i]).collect();
    (rest[0], rest[1])
}

/// Builds the nine input channels for slice `z`; out-of-range neighbours are zero.
pub fn input_channels(
    set: &SequenceSet,
    target: Sequence,
    plane: Plane,
    z: usize,
) -> Result<Array3<f32>> {
    let shape = set
        .shape()
        .ok_or_else(|| Error::MissingInput(format!("case {} has no volumes", set.case_id)))?;
    let n = shape[plane.axis()];
    if z >= n {
        return Err(Error::Argument(format!(
            "slice {z} out of range for {plane} plane with {n} slices"
        )));
    }
    let (h, w) = slice_shape(shape, plane);
    let mut out = Array3::<f32>::zeros((STACK_CHANNELS, h, w));
    for (si, seq) in target.others().into_iter().enumerate() {
        let v = set.get(seq).ok_or_else(|| {
            Error::MissingInput(format!("case {} lacks input {seq}", set.case_id))
        })?;
        for (k, dz) in [-1isize, 0, 1].into_iter().enumerate() {
            if let Some(sl) = slice_of(v, plane, z as isize + dz) {
                out.index_axis_mut(Axis(0), si * 3 + k).assign(&sl);
            }
        }
    }
    Ok(out)
}

/// Extracts the stack at slice `z` of `plane` with target and tumor mask.
pub fn extract_stack(set: &SequenceSet, target: Sequence, plane: Plane, z: usize) -> Result<Stack25D> {
    let input = input_channels(set, target, plane, z)?;
    let tv = set
        .get(target)
        .ok_or_else(|| Error::MissingInput(format!("case {} lacks target {target}", set.case_id)))?;
    let target_slice = slice_of(tv, plane, z as isize).unwrap().to_owned();
    let tumor_mask = match &set.seg {
        Some(seg) => seg
            .labels
            .index_axis(Axis(plane.axis()), z)
            .mapv(|l| if l > 0 { 1.0 } else { 0.0 }),
        None => Array2::zeros(target_slice.raw_dim()),
    };
    Ok(Stack25D {
        input,
        target: target_slice,
        tumor_mask,
        plane,
        slice_index: z,
    })
}

/// All `(plane, z)` whose target slice holds at least one nonzero voxel.
pub fn enumerate_slices(set: &SequenceSet, target: Sequence, planes: &[Plane]) -> Result<Vec<(Plane, usize)>> {
    let tv = set
        .get(target)
        .ok_or_else(|| Error::MissingInput(format!("case {} lacks target {target}", set.case_id)))?;
    let mut out = Vec::new();
    for &plane in planes {
        for (z, sl) in tv.data.axis_iter(Axis(plane.axis())).enumerate() {
            if sl.iter().any(|&v| v != 0.0) {
                out.push((plane, z));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub pad_to: [usize; 2],
    pub crop_to: [usize; 2],
    pub hflip_p: f64,
    pub rot_p: f64,
    pub rot_range_deg: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            pad_to: [288, 288],
            crop_to: [256, 256],
            hflip_p: 0.5,
            rot_p: 0.5,
            rot_range_deg: [-15.0, 15.0],
        }
    }
}

impl AugmentConfig {
    /// Small-canvas variant for 32-voxel phantoms.
    pub fn desk() -> Self {
        AugmentConfig {
            pad_to: [72, 72],
            crop_to: [64, 64],
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_to[0] > self.pad_to[0] || self.crop_to[1] > self.pad_to[1] {
            return Err(Error::Config(format!(
                "crop_to {:?} exceeds pad_to {:?}",
                self.crop_to, self.pad_to
            )));
        }
        if self.crop_to.contains(&0) {
            return Err(Error::Config("crop_to must be positive".into()));
        }
        for p in [self.hflip_p, self.rot_p] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.rot_range_deg[0] > self.rot_range_deg[1] {
            return Err(Error::Config("rot_range_deg must be ordered".into()));
        }
        Ok(())
    }
}

/// One geometric draw shared by every channel, the target and the mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Top-left corner of the crop inside the padded canvas.
    pub crop_origin: [usize; 2],
    pub flip: bool,
    /// Rotation angle in degrees; 0 means no rotation.
    pub angle_deg: f64,
}

impl AugmentParams {
    /// Parameters that leave a `crop_to`-sized input unchanged.
    pub fn identity(cfg: &AugmentConfig) -> Self {
        AugmentParams {
            crop_origin: [
                (cfg.pad_to[0] - cfg.crop_to[0]) / 2,
                (cfg.pad_to[1] - cfg.crop_to[1]) / 2,
            ],
            flip: false,
            angle_deg: 0.0,
        }
    }
}

pub fn sample_params<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> AugmentParams {
    let oy = rng.random_range(0..=cfg.pad_to[0] - cfg.crop_to[0]);
    let ox = rng.random_range(0..=cfg.pad_to[1] - cfg.crop_to[1]);
    let flip = rng.random::<f64>() < cfg.hflip_p;
    let rotate = rng.random::<f64>() < cfg.rot_p;
    let angle = rng.random_range(cfg.rot_range_deg[0]..=cfg.rot_range_deg[1]);
    AugmentParams {
        crop_origin: [oy, ox],
        flip,
        angle_deg: if rotate { angle } else { 0.0 },
    }
}

/// Maps an output pixel `(i, j)` back to a (fractional) position in the
/// original un-padded slice of size `input`.
///
/// Forward order is: centered zero padding to `pad_to`, crop at
/// `crop_origin`, horizontal flip of the width axis, rotation about the crop
/// center. Positions outside the original slice read as zero.
pub fn source_coordinate(
    cfg: &AugmentConfig,
    input: (usize, usize),
    p: &AugmentParams,
    i: usize,
    j: usize,
) -> (f64, f64) {
    let (ch, cw) = (cfg.crop_to[0] as f64, cfg.crop_to[1] as f64);
    let (mut r, mut c) = (i as f64, j as f64);
    if p.angle_deg != 0.0 {
        let (sin, cos) = p.angle_deg.to_radians().sin_cos();
        let (cy, cx) = ((ch - 1.0) / 2.0, (cw - 1.0) / 2.0);
        let (dy, dx) = (r - cy, c - cx);
        r = cy + cos * dy + sin * dx;
        c = cx - sin * dy + cos * dx;
    }
    if p.flip {
        c = cw - 1.0 - c;
    }
    let off_y = ((cfg.pad_to[0] - input.0) / 2) as f64;
    let off_x = ((cfg.pad_to[1] - input.1) / 2) as f64;
    (
        r + p.crop_origin[0] as f64 - off_y,
        c + p.crop_origin[1] as f64 - off_x,
    )
}

fn at(img: &ArrayView2<f32>, r: isize, c: isize) -> f64 {
    let (h, w) = img.dim();
    if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
        0.0
    } else {
        img[[r as usize, c as usize]] as f64
    }
}

/// Bilinear sample with zero fill outside the image.
pub fn bilinear(img: &ArrayView2<f32>, r: f64, c: f64) -> f64 {
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0, c - c0);
    let (r0, c0) = (r0 as isize, c0 as isize);
    let mut acc = 0.0;
    for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
        for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
            let wgt = wr * wc;
            if wgt != 0.0 {
                acc += wgt * at(img, r0 + dr, c0 + dc);
            }
        }
    }
    acc
}

/// Nearest-neighbour sample with zero fill outside the image.
pub fn nearest(img: &ArrayView2<f32>, r: f64, c: f64) -> f64 {
    at(img, r.round() as isize, c.round() as isize)
}

/// Applies one fixed geometric draw to all channels, target and mask.
pub fn apply_augment(s: &Stack25D, cfg: &AugmentConfig, p: &AugmentParams) -> Result<Stack25D> {
    cfg.validate()?;
    let (h, w) = s.spatial();
    if h > cfg.pad_to[0] || w > cfg.pad_to[1] {
        return Err(Error::Shape(format!(
            "slice {h}x{w} larger than pad_to {:?}",
            cfg.pad_to
        )));
    }
    let [oh, ow] = cfg.crop_to;
    let coords: Vec<(f64, f64)> = (0..oh * ow)
        .map(|k| source_coordinate(cfg, (h, w), p, k / ow, k % ow))
        .collect();
    let resample = |img: ArrayView2<f32>, nn: bool| -> Array2<f32> {
        Array2::from_shape_fn((oh, ow), |(i, j)| {
            let (r, c) = coords[i * ow + j];
            if nn {
                nearest(&img, r, c) as f32
            } else {
                bilinear(&img, r, c).clamp(0.0, 1.0) as f32
            }
        })
    };
    let mut input = Array3::<f32>::zeros((s.input.len_of(Axis(0)), oh, ow));
    for (k, ch) in s.input.axis_iter(Axis(0)).enumerate() {
        input.index_axis_mut(Axis(0), k).assign(&resample(ch, false));
    }
    Ok(Stack25D {
        input,
        target: resample(s.target.view(), false),
        tumor_mask: resample(s.tumor_mask.view(), true),
        plane: s.plane,
        slice_index: s.slice_index,
    })
}

/// Draws parameters from `rng` and applies them.
pub fn augment<R: Rng>(s: &Stack25D, cfg: &AugmentConfig, rng: &mut R) -> Result<Stack25D> {
    let p = sample_params(cfg, rng);
    apply_augment(s, cfg, &p)
}

const EPOCH_SALT: u64 = 0x45_50_4f_43_48;
const SAMPLE_SALT: u64 = 0x53_41_4d_50_4c_45;

/// Generator for the sampler of `epoch` under `seed`.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(case_seed(seed ^ EPOCH_SALT, epoch as usize))
}

/// Generator for the augmentation of the `global_index`-th drawn sample.
pub fn sample_rng(seed: u64, global_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(case_seed(seed ^ SAMPLE_SALT, global_index as usize))
}

/// Uniform draw with replacement of `epoch_size` indices into `n_samples`.
pub fn epoch_sampler(n_samples: usize, epoch_size: usize, seed: u64, epoch: u64) -> Result<Vec<usize>> {
    if n_samples == 0 {
        return Err(Error::Argument("cannot sample from an empty sample list".into()));
    }
    if epoch_size == 0 {
        return Err(Error::Argument("epoch_size must be at least 1".into()));
    }
    let mut rng = epoch_rng(seed, epoch);
    Ok((0..epoch_size).map(|_| rng.random_range(0..n_samples)).collect())
}

/// Deterministic 90/10 train/dev split by sorted case id.
pub fn split_cases(ids: &[String]) -> (Vec<String>, Vec<String>) {
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    let n = sorted.len();
    let n_dev = if n < 2 {
        0
    } else {
        ((n as f64 * 0.1).round() as usize).max(1)
    };
    let dev = sorted.split_off(n - n_dev);
    (sorted, dev)
}

/// A case normalized for training or inference of one target sequence.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    /// Inputs scaled jointly to [0,1]; the target (if present) scaled on its own.
    pub set: SequenceSet,
    pub target: Sequence,
    pub input_scale: MinMaxScale,
    pub target_scale: Option<MinMaxScale>,
}

/// Optional histogram standardization followed by MinMax scaling of the
/// three inputs jointly and of the target separately.
pub fn prepare_case(raw: &SequenceSet, target: Sequence, landmarks: Option<&LandmarkSet>) -> Result<PreparedCase> {
    raw.validate()?;
    let mut std_set = SequenceSet {
        case_id: raw.case_id.clone(),
        sequences: Default::default(),
        seg: raw.seg.clone(),
    };
    for (&seq, v) in &raw.sequences {
        let v = match landmarks.and_then(|l| l.get(seq)) {
            Some(scale) => standardize(v, scale)?,
            None => v.clone(),
        };
        std_set.sequences.insert(seq, v);
    }
    let inputs: Vec<&Volume> = target
        .others()
        .iter()
        .map(|s| {
            std_set.get(*s).ok_or_else(|| {
                Error::MissingInput(format!("case {} lacks input {s}", raw.case_id))
            })
        })
        .collect::<Result<_>>()?;
    let input_scale = minmax_fit_inputs(&inputs)?;
    let mut out = SequenceSet {
        case_id: raw.case_id.clone(),
        sequences: Default::default(),
        seg: raw.seg.clone(),
    };
    for s in target.others() {
        out.sequences
            .insert(s, minmax_apply(std_set.get(s).unwrap(), &input_scale)?);
    }
    let target_scale = match std_set.get(target) {
        Some(tv) => {
            let sc = MinMaxScale::fit(tv)?;
            out.sequences.insert(target, minmax_apply(tv, &sc)?);
            Some(sc)
        }
        None => None,
    };
    Ok(PreparedCase {
        set: out,
        target,
        input_scale,
        target_scale,
    })
}

/// Prepared training cases with their flat slice index.
#[derive(Debug, Clone)]
pub struct SliceDataset {
    pub cases: Vec<PreparedCase>,
    /// (case position, plane, slice)
    pub index: Vec<(usize, Plane, usize)>,
}

impl SliceDataset {
    pub fn new(cases: Vec<PreparedCase>, planes: &[Plane]) -> Result<Self> {
        let per_case = par::map_slice(&cases, |c| enumerate_slices(&c.set, c.target, planes));
        let mut index = Vec::new();
        for (ci, slices) in per_case.into_iter().enumerate() {
            index.extend(slices?.into_iter().map(|(p, z)| (ci, p, z)));
        }
        Ok(SliceDataset { cases, index })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// The augmented sample for entry `entry`, drawn as global sample `global_index`.
    pub fn sample(&self, entry: usize, global_index: u64, seed: u64, aug: &AugmentConfig) -> Result<Stack25D> {
        let (ci, plane, z) = self.index[entry];
        let c = &self.cases[ci];
        let s = extract_stack(&c.set, c.target, plane, z)?;
        let mut rng = sample_rng(seed, global_index);
        augment(&s, aug, &mut rng)
    }
}

/// Stacks samples of equal size into (input, target, mask) batches.
pub fn collate(samples: &[Stack25D]) -> Result<(Array4<f64>, Array4<f64>, Array4<f64>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("empty batch".into()))?;
    let (h, w) = first.spatial();
    let c = first.input.len_of(Axis(0));
    let n = samples.len();
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    let mut y = Array4::<f64>::zeros((n, 1, h, w));
    let mut m = Array4::<f64>::zeros((n, 1, h, w));
    for (b, s) in samples.iter().enumerate() {
        if s.spatial() != (h, w) || s.input.len_of(Axis(0)) != c {
            return Err(Error::Shape("batch samples differ in shape".into()));
        }
        x.slice_mut(s![b, .., .., ..]).assign(&s.input.mapv(f64::from));
        y.slice_mut(s![b, 0, .., ..]).assign(&s.target.mapv(f64::from));
        m.slice_mut(s![b, 0, .., ..]).assign(&s.tumor_mask.mapv(f64::from));
    }
    Ok((x, y, m))
}
