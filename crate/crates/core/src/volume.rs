//! Volumes, label maps and BraTS-style case directories on disk.
//!
//! Everything in memory lives in the canonical voxel frame: array axes are
//! (sagittal, coronal, axial), i.e. the file axes permuted/flipped so that
//! they run along +R, +A, +S. Oblique components of the file affine are
//! dropped once the permutation is known.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array3, ArrayD, Axis, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis code of the in-memory frame.
pub const CANONICAL_ORIENTATION: &str = "RAS";

/// One of the four MRI contrasts of a case.
///
/// The declaration order is the alphabetical order of the short names and is
/// the channel order used everywhere inputs are stacked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sequence {
    T1c,
    T1n,
    T2f,
    T2w,
}

impl Sequence {
    pub const ALL: [Sequence; 4] = [Sequence::T1c, Sequence::T1n, Sequence::T2f, Sequence::T2w];

    pub fn as_str(self) -> &'static str {
        match self {
            Sequence::T1c => "t1c",
            Sequence::T1n => "t1n",
            Sequence::T2f => "t2f",
            Sequence::T2w => "t2w",
        }
    }

    /// The three remaining sequences in canonical order.
    pub fn others(self) -> [Sequence; 3] {
        let mut out = [Sequence::T1c; 3];
        let mut i = 0;
        for s in Sequence::ALL {
            if s != self {
                out[i] = s;
                i += 1;
            }
        }
        out
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1c" => Ok(Sequence::T1c),
            "t1n" => Ok(Sequence::T1n),
            "t2f" => Ok(Sequence::T2f),
            "t2w" => Ok(Sequence::T2w),
            other => Err(Error::Argument(format!("unknown sequence '{other}'"))),
        }
    }
}

/// A scalar 3D grid in the canonical frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    /// Millimetres per voxel along each canonical axis.
    pub spacing: [f64; 3],
    /// World position of voxel (0, 0, 0).
    pub origin: [f64; 3],
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3]) -> Result<Self> {
        let v = Volume {
            data,
            spacing,
            origin: [0.0; 3],
        };
        v.validate()?;
        Ok(v)
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.iter().len() == 0 {
            return Err(Error::Shape("volume has an empty dimension".into()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Shape(format!("invalid spacing {:?}", self.spacing)));
        }
        Ok(())
    }

    /// True when every voxel is finite and non-negative (raw MRI convention).
    pub fn is_raw_valid(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && *v >= 0.0)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn with_data(&self, data: Array3<f32>) -> Volume {
        assert_eq!(data.shape(), self.data.shape());
        Volume {
            data,
            spacing: self.spacing,
            origin: self.origin,
        }
    }
}

/// Integer tissue labels; 0 is background/healthy, anything else is tumor.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub labels: Array3<u16>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl LabelVolume {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.labels.shape();
        [s[0], s[1], s[2]]
    }

    /// Union of all tumor sub-labels.
    pub fn tumor_mask(&self) -> Array3<bool> {
        self.labels.mapv(|l| l > 0)
    }
}

/// The sequences and labels of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSet {
    pub case_id: String,
    pub sequences: BTreeMap<Sequence, Volume>,
    pub seg: Option<LabelVolume>,
}

impl SequenceSet {
    pub fn get(&self, s: Sequence) -> Option<&Volume> {
        self.sequences.get(&s)
    }

    pub fn shape(&self) -> Option<[usize; 3]> {
        self.sequences.values().next().map(Volume::shape)
    }

    /// The absent sequence, if exactly one is missing.
    pub fn missing(&self) -> Option<Sequence> {
        let absent: Vec<_> = Sequence::ALL
            .into_iter()
            .filter(|s| !self.sequences.contains_key(s))
            .collect();
        (absent.len() == 1).then(|| absent[0])
    }

    /// Checks that all present volumes share shape and spacing.
    pub fn validate(&self) -> Result<()> {
        let mut reference: Option<(Sequence, [usize; 3], [f64; 3])> = None;
        for (&s, v) in &self.sequences {
            v.validate()?;
            match reference {
                None => reference = Some((s, v.shape(), v.spacing)),
                Some((r, shape, spacing)) => {
                    if v.shape() != shape {
                        return Err(Error::Consistency(format!(
                            "{}: {s} has shape {:?} but {r} has {:?}",
                            self.case_id,
                            v.shape(),
                            shape
                        )));
                    }
                    if !spacing_close(v.spacing, spacing) {
                        return Err(Error::Consistency(format!(
                            "{}: {s} has spacing {:?} but {r} has {:?}",
                            self.case_id, v.spacing, spacing
                        )));
                    }
                }
            }
        }
        let Some((_, shape, _)) = reference else {
            return Err(Error::Consistency(format!("{}: no sequences", self.case_id)));
        };
        if let Some(seg) = &self.seg {
            if seg.shape() != shape {
                return Err(Error::Consistency(format!(
                    "{}: seg has shape {:?} but sequences have {:?}",
                    self.case_id,
                    seg.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

fn spacing_close(a: [f64; 3], b: [f64; 3]) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-4 * x.abs().max(1.0))
}

struct Raw {
    data: ArrayD<f32>,
    header: NiftiHeader,
}

fn read_raw(path: &Path) -> Result<Raw> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let format = |e: nifti::NiftiError| Error::Format {
        path: path.to_owned(),
        reason: e.to_string(),
    };
    let obj = ReaderOptions::new().read_file(path).map_err(format)?;
    let header = obj.header().clone();
    let ndim = header.dim[0] as usize;
    if !(3..=7).contains(&ndim) {
        return Err(Error::Dimensionality {
            path: path.to_owned(),
            ndim,
        });
    }
    // singleton trailing dimensions are tolerated, real 4D data is not
    if header.dim[4..=ndim.max(3)].iter().any(|&d| d > 1) {
        return Err(Error::Dimensionality {
            path: path.to_owned(),
            ndim,
        });
    }
    let data = obj.into_volume().into_ndarray::<f32>().map_err(format)?;
    Ok(Raw { data, header })
}

/// Voxel-to-world 3x4 matrix from sform, falling back to qform, then pixdim.
fn header_affine(h: &NiftiHeader) -> [[f64; 4]; 3] {
    if h.sform_code > 0 {
        let row = |r: [f32; 4]| [r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64];
        return [row(h.srow_x), row(h.srow_y), row(h.srow_z)];
    }
    let dx = h.pixdim[1].abs().max(f32::MIN_POSITIVE) as f64;
    let dy = h.pixdim[2].abs().max(f32::MIN_POSITIVE) as f64;
    let dz = h.pixdim[3].abs().max(f32::MIN_POSITIVE) as f64;
    if h.qform_code > 0 {
        let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let r = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ];
        let off = [h.quatern_x as f64, h.quatern_y as f64, h.quatern_z as f64];
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            m[i][0] = r[i][0] * dx;
            m[i][1] = r[i][1] * dy;
            m[i][2] = r[i][2] * dz * qfac;
            m[i][3] = off[i];
        }
        return m;
    }
    [[dx, 0.0, 0.0, 0.0], [0.0, dy, 0.0, 0.0], [0.0, 0.0, dz, 0.0]]
}

/// Maps file axes onto canonical axes. Returns, per canonical axis, the file
/// axis it comes from and whether it is flipped.
#[allow(clippy::needless_range_loop)]
fn canonical_axes(m: &[[f64; 4]; 3]) -> Option<[(usize, bool); 3]> {
    let mut out = [(usize::MAX, false); 3];
    let mut used = [false; 3];
    // greedily assign the strongest direction cosines first
    let mut cand: Vec<(f64, usize, usize)> = Vec::with_capacity(9);
    for world in 0..3 {
        for file in 0..3 {
            let norm = (0..3).map(|i| m[i][file].powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                cand.push((m[world][file].abs() / norm, world, file));
            }
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, world, file) in cand {
        if out[world].0 == usize::MAX && !used[file] {
            out[world] = (file, m[world][file] < 0.0);
            used[file] = true;
        }
    }
    out.iter().all(|(f, _)| *f != usize::MAX).then_some(out)
}

fn reorient<T: Clone>(
    data: ArrayD<T>,
    m: &[[f64; 4]; 3],
    path: &Path,
) -> Result<(Array3<T>, [f64; 3], [f64; 3])> {
    let mut data = data;
    while data.ndim() > 3 {
        data = data.index_axis_move(Axis(3), 0);
    }
    let data = data
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::Format {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
    let axes = canonical_axes(m).ok_or_else(|| Error::Format {
        path: path.to_owned(),
        reason: "degenerate voxel-to-world affine".into(),
    })?;
    let mut view = data.view();
    let mut origin_index = [0.0f64; 3];
    for &(file, flip) in &axes {
        if flip {
            view.invert_axis(Axis(file));
            origin_index[file] = (data.shape()[file] - 1) as f64;
        }
    }
    let perm = [axes[0].0, axes[1].0, axes[2].0];
    let out = view.permuted_axes(perm).as_standard_layout().to_owned();
    let mut spacing = [0.0; 3];
    let mut origin = [0.0; 3];
    for c in 0..3 {
        let file = axes[c].0;
        spacing[c] = (0..3).map(|i| m[i][file].powi(2)).sum::<f64>().sqrt();
    }
    for i in 0..3 {
        origin[i] = m[i][3] + (0..3).map(|j| m[i][j] * origin_index[j]).sum::<f64>();
    }
    Ok((out, spacing, origin))
}

/// Reads a NIfTI-1 volume (optionally gzipped) into the canonical frame.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    let m = header_affine(&raw.header);
    let (data, spacing, origin) = reorient(raw.data, &m, path)?;
    let v = Volume {
        data,
        spacing,
        origin,
    };
    v.validate().map_err(|e| Error::Format {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    Ok(v)
}

/// Reads a label map. Values must be non-negative integers.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    if let Some(bad) = raw
        .data
        .iter()
        .find(|v| !v.is_finite() || **v < 0.0 || v.fract() != 0.0 || **v > u16::MAX as f32)
    {
        return Err(Error::Format {
            path: path.to_owned(),
            reason: format!("label value {bad} is not a non-negative integer"),
        });
    }
    let m = header_affine(&raw.header);
    let labels = raw.data.mapv(|v| v as u16);
    let (labels, spacing, origin) = reorient(labels, &m, path)?;
    Ok(LabelVolume {
        labels,
        spacing,
        origin,
    })
}

#[allow(clippy::field_reassign_with_default)]
fn canonical_header(spacing: [f64; 3], origin: [f64; 3]) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim = [
        1.0,
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    h.sform_code = 1;
    h.qform_code = 1;
    h.quatern_b = 0.0;
    h.quatern_c = 0.0;
    h.quatern_d = 0.0;
    h.quatern_x = origin[0] as f32;
    h.quatern_y = origin[1] as f32;
    h.quatern_z = origin[2] as f32;
    h.srow_x = [spacing[0] as f32, 0.0, 0.0, origin[0] as f32];
    h.srow_y = [0.0, spacing[1] as f32, 0.0, origin[1] as f32];
    h.srow_z = [0.0, 0.0, spacing[2] as f32, origin[2] as f32];
    h.xyzt_units = 2; // mm
    h
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory does not exist"),
        )),
        _ => Ok(()),
    }
}

fn map_write_err(path: &Path, e: nifti::NiftiError) -> Error {
    match e {
        nifti::NiftiError::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_owned(),
            reason: other.to_string(),
        },
    }
}

/// Writes a 32-bit float NIfTI-1 file; gzip when the name ends in `.gz`.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let header = canonical_header(v.spacing, v.origin);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&v.data)
        .map_err(|e| map_write_err(path, e))
}

/// Writes a 16-bit unsigned label map.
pub fn save_labels(l: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let header = canonical_header(l.spacing, l.origin);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&l.labels)
        .map_err(|e| map_write_err(path, e))
}

/// Finds `<case>-<suffix>.nii[.gz]` in `dir`, matching the suffix case-insensitively.
pub fn find_case_file(dir: &Path, suffix: &str) -> Result<Option<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut hits: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_ascii_lowercase();
        let stem = name
            .strip_suffix(".nii.gz")
            .or_else(|| name.strip_suffix(".nii"));
        if let Some(stem) = stem {
            if stem.ends_with(&format!("-{suffix}")) {
                hits.push(entry.path());
            }
        }
    }
    hits.sort();
    Ok(hits.into_iter().next())
}

/// Case identifier: the directory name.
pub fn case_id_of(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".to_string())
}

/// Loads a BraTS-style case directory, leaving out `missing` if given.
pub fn load_case(dir: impl AsRef<Path>, missing: Option<Sequence>) -> Result<SequenceSet> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "case directory not found"),
        ));
    }
    let case_id = case_id_of(dir);
    let mut sequences = BTreeMap::new();
    for s in Sequence::ALL {
        if Some(s) == missing {
            continue;
        }
        let file = find_case_file(dir, s.as_str())?.ok_or_else(|| {
            Error::MissingInput(format!("{case_id}: no {s} volume in {}", dir.display()))
        })?;
        sequences.insert(s, load_volume(&file)?);
    }
    let seg = match find_case_file(dir, "seg")? {
        Some(f) => Some(load_labels(&f)?),
        None => None,
    };
    let set = SequenceSet {
        case_id,
        sequences,
        seg,
    };
    set.validate()?;
    Ok(set)
}

/// Writes every present volume of `set` into `dir` with BraTS naming.
pub fn save_case(set: &SequenceSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (s, v) in &set.sequences {
        save_volume(v, dir.join(format!("{}-{}.nii.gz", set.case_id, s)))?;
    }
    if let Some(seg) = &set.seg {
        save_labels(seg, dir.join(format!("{}-seg.nii.gz", set.case_id)))?;
    }
    Ok(())
}

/// Sub-directories of `root` that look like case directories, sorted by name.
pub fn list_case_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn ramp(shape: (usize, usize, usize)) -> Volume {
        let data = Array3::from_shape_fn(shape, |(i, j, k)| (i * 100 + j * 10 + k) as f32 * 0.25);
        Volume::new(data, [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = ramp((5, 6, 7));
        v.spacing = [0.9, 1.1, 2.5];
        v.data[[1, 2, 3]] = 1.0e-7;
        let p = dir.path().join("x.nii.gz");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.shape(), [5, 6, 7]);
        for (a, b) in v.data.iter().zip(back.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for i in 0..3 {
            assert!((back.spacing[i] - v.spacing[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn single_voxel_survives() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = Array3::zeros((4, 4, 4));
        data[[0, 0, 0]] = 7.0;
        let v = Volume::new(data, [1.0; 3]).unwrap();
        let p = dir.path().join("one.nii");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.data[[0, 0, 0]], 7.0);
        assert_eq!(back.data.sum(), 7.0);
        assert_eq!(back.spacing, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        save_volume(&ramp((8, 8, 8)), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..200]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
        let p2 = dir.path().join("t2.nii");
        std::fs::write(&p2, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(load_volume(&p2), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_volume("/nonexistent/x.nii.gz"), Err(Error::Io { .. })));
    }

    #[test]
    fn four_d_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("four.nii");
        let data = ndarray::Array4::<f32>::zeros((3, 3, 3, 2));
        WriterOptions::new(&p).write_nifti(&data).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Dimensionality { .. })));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let v = ramp((3, 3, 3));
        let err = save_volume(&v, "/nonexistent-dir/sub/x.nii.gz").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn flipped_affine_is_reoriented() {
        // file axis 0 runs toward -R, axes 1 and 2 are swapped
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flip.nii");
        let data = Array3::from_shape_fn((2, 3, 4), |(i, j, k)| (i * 100 + j * 10 + k) as f32);
        let mut h = NiftiHeader::default();
        h.sform_code = 1;
        h.srow_x = [-2.0, 0.0, 0.0, 10.0];
        h.srow_y = [0.0, 0.0, 1.0, 0.0];
        h.srow_z = [0.0, 3.0, 0.0, 0.0];
        WriterOptions::new(&p).reference_header(&h).write_nifti(&data).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.shape(), [2, 4, 3]);
        assert_eq!(v.spacing, [2.0, 1.0, 3.0]);
        // canonical (a, b, c) = file (1 - a, c, b)
        for a in 0..2 {
            for b in 0..4 {
                for c in 0..3 {
                    assert_eq!(v.data[[a, b, c]], data[[1 - a, c, b]]);
                }
            }
        }
        assert_eq!(v.origin[0], 8.0);
    }

    #[test]
    fn sequence_order_is_alphabetical() {
        let names: Vec<_> = Sequence::ALL.iter().map(|s| s.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert_eq!(Sequence::T1n.others(), [Sequence::T1c, Sequence::T2f, Sequence::T2w]);
        assert_eq!("T2F".parse::<Sequence>().unwrap(), Sequence::T2f);
    }

    #[test]
    fn load_case_checks_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let case = dir.path().join("C-001");
        std::fs::create_dir(&case).unwrap();
        for s in Sequence::ALL {
            let shape = if s == Sequence::T2w { (4, 4, 5) } else { (4, 4, 4) };
            save_volume(&ramp(shape), case.join(format!("C-001-{s}.nii.gz"))).unwrap();
        }
        assert!(matches!(load_case(&case, None), Err(Error::Consistency(_))));
        // leaving out the odd one makes it consistent
        let set = load_case(&case, Some(Sequence::T2w)).unwrap();
        assert_eq!(set.sequences.len(), 3);
        assert_eq!(set.missing(), Some(Sequence::T2w));
    }

    #[test]
    fn load_case_requires_all_non_missing() {
        let dir = tempfile::tempdir().unwrap();
        let case = dir.path().join("C-002");
        std::fs::create_dir(&case).unwrap();
        for s in [Sequence::T1c, Sequence::T1n, Sequence::T2f] {
            save_volume(&ramp((4, 4, 4)), case.join(format!("C-002-{s}.nii.gz"))).unwrap();
        }
        assert!(matches!(load_case(&case, None), Err(Error::MissingInput(_))));
        assert!(load_case(&case, Some(Sequence::T2w)).is_ok());
    }

    #[test]
    fn suffix_match_ignores_case() {
        let dir = tempfile::tempdir().unwrap();
        let case = dir.path().join("Up");
        std::fs::create_dir(&case).unwrap();
        for s in Sequence::ALL {
            let name = format!("Up-{}.nii.gz", s.as_str().to_uppercase());
            save_volume(&ramp((3, 3, 3)), case.join(name)).unwrap();
        }
        let set = load_case(&case, None).unwrap();
        assert_eq!(set.sequences.len(), 4);
        assert!(set.seg.is_none());
    }
}
