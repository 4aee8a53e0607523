//! Deterministic synthetic four-sequence cases.
//!
//! A phantom is an axis-aligned ellipsoidal "brain" made of concentric shells
//! plus one smooth tumor blob. All four sequences come from the same tissue
//! map through different monotone intensity transforms, so they share anatomy
//! but differ in contrast, the way real co-registered MRI sequences do.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{LabelVolume, Sequence, SequenceSet, Volume};

/// Brain semi-axis as a fraction of the grid size.
const BRAIN_FRACTION: f64 = 0.42;
/// Largest outward bulge of the tumor relative to its nominal radius.
const BLOB_AMPLITUDE: f64 = 0.2;
/// Floor applied to noisy brain voxels so the brain support never touches 0.
const BRAIN_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub seed: u64,
    /// Nominal tumor radius range in voxels.
    pub tumor_radius_range: [f64; 2],
    pub n_shells: usize,
    /// Additive Gaussian noise, relative to a unit tissue intensity.
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [32, 32, 32],
            seed: 0,
            tumor_radius_range: [2.5, 4.5],
            n_shells: 3,
            noise_sigma: 0.01,
        }
    }
}

impl PhantomSpec {
    pub fn cube(side: usize, seed: u64) -> Self {
        PhantomSpec {
            shape: [side; 3],
            seed,
            ..Default::default()
        }
    }

    fn semi_axes(&self) -> [f64; 3] {
        self.shape.map(|s| BRAIN_FRACTION * s as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s < 16) {
            return Err(Error::Phantom(format!("shape {:?}: every side must be >= 16", self.shape)));
        }
        if self.n_shells == 0 {
            return Err(Error::Phantom("n_shells must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Phantom("noise_sigma must be >= 0".into()));
        }
        let [r0, r1] = self.tumor_radius_range;
        if !(r0 > 0.0 && r1 >= r0) {
            return Err(Error::Phantom(format!("bad tumor radius range {:?}", self.tumor_radius_range)));
        }
        let min_axis = self.semi_axes().iter().cloned().fold(f64::INFINITY, f64::min);
        // the largest bulged tumor must fit inside the brain with a voxel to spare
        if r1 * (1.0 + BLOB_AMPLITUDE) + 1.0 >= min_axis {
            return Err(Error::Phantom(format!(
                "tumor radius {r1} does not fit in a brain of semi-axis {min_axis:.1}"
            )));
        }
        Ok(())
    }
}

/// Contrast of a unit tissue value in shell space, per sequence.
fn tissue_intensity(seq: Sequence, t: f64) -> f64 {
    match seq {
        Sequence::T1n => 0.35 + 0.45 * t,
        Sequence::T1c => 0.30 + 0.50 * t.powf(1.3),
        Sequence::T2w => 0.90 - 0.55 * t,
        Sequence::T2f => 0.75 - 0.35 * t.powf(0.8),
    }
}

/// Tumor appearance: dark in T1n, bright elsewhere (enhancing in T1c).
fn tumor_intensity(seq: Sequence) -> f64 {
    match seq {
        Sequence::T1n => 0.22,
        Sequence::T1c => 1.0,
        Sequence::T2w => 0.97,
        Sequence::T2f => 0.93,
    }
}

fn intensity_scale(seq: Sequence) -> f64 {
    match seq {
        Sequence::T1c => 1200.0,
        Sequence::T1n => 900.0,
        Sequence::T2f => 700.0,
        Sequence::T2w => 1500.0,
    }
}

fn seq_index(seq: Sequence) -> u64 {
    Sequence::ALL.iter().position(|&s| s == seq).unwrap() as u64
}

/// Voxel classes shared by all sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background,
    Shell(usize),
    Tumor,
}

struct Anatomy {
    tissue: Array3<Tissue>,
    seg: Array3<u16>,
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn build_anatomy(spec: &PhantomSpec) -> Anatomy {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let axes = spec.semi_axes();
    let center = spec.shape.map(|s| (s as f64 - 1.0) / 2.0);
    let min_axis = axes.iter().cloned().fold(f64::INFINITY, f64::min);

    let radius = rng.random_range(spec.tumor_radius_range[0]..=spec.tumor_radius_range[1]);
    let reach = radius * (1.0 + BLOB_AMPLITUDE) + 1.0;
    // tumor center: anywhere that keeps the whole blob inside the brain
    let max_offset = (min_axis - reach).max(0.0);
    let dir = unit_vector(&mut rng);
    let off = rng.random_range(0.0..=1.0f64).cbrt() * max_offset;
    let t_center = [
        center[0] + dir[0] * off,
        center[1] + dir[1] * off,
        center[2] + dir[2] * off,
    ];
    let u1 = unit_vector(&mut rng);
    let u2 = unit_vector(&mut rng);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    let n = spec.n_shells;
    let mut tissue = Array3::from_elem(spec.shape, Tissue::Background);
    let mut seg = Array3::<u16>::zeros(spec.shape);
    for ((i, j, k), t) in tissue.indexed_iter_mut() {
        let p = [i as f64, j as f64, k as f64];
        let rho = ((p[0] - center[0]) / axes[0]).powi(2)
            + ((p[1] - center[1]) / axes[1]).powi(2)
            + ((p[2] - center[2]) / axes[2]).powi(2);
        let rho = rho.sqrt();
        if rho > 1.0 {
            continue;
        }
        *t = Tissue::Shell(((rho * n as f64) as usize).min(n - 1));
        let d = [p[0] - t_center[0], p[1] - t_center[1], p[2] - t_center[2]];
        let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let r_eff = if dist > 0.0 {
            let a = (d[0] * u1[0] + d[1] * u1[1] + d[2] * u1[2]) / dist;
            let b = (d[0] * u2[0] + d[1] * u2[1] + d[2] * u2[2]) / dist;
            radius * (1.0 + BLOB_AMPLITUDE * (3.0 * a + phase).sin() * b)
        } else {
            radius
        };
        if dist <= r_eff {
            *t = Tissue::Tumor;
            seg[[i, j, k]] = if dist <= 0.5 * r_eff { 1 } else { 2 };
        }
    }
    Anatomy { tissue, seg }
}

fn render(spec: &PhantomSpec, anatomy: &Anatomy, seq: Sequence) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(seq_index(seq) + 1),
    );
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).unwrap());
    let n = spec.n_shells as f64;
    let scale = intensity_scale(seq);
    anatomy.tissue.mapv(|t| {
        let base = match t {
            Tissue::Background => return 0.0,
            Tissue::Shell(k) => tissue_intensity(seq, (k as f64 + 1.0) / (n + 1.0)),
            Tissue::Tumor => tumor_intensity(seq),
        };
        let noisy = match &noise {
            Some(d) => (base + d.sample(&mut rng)).max(BRAIN_FLOOR),
            None => base,
        };
        (noisy * scale) as f32
    })
}

/// Builds one phantom case. Bit-identical for identical specs.
pub fn generate_case(spec: &PhantomSpec, case_id: &str) -> Result<SequenceSet> {
    spec.validate()?;
    let anatomy = build_anatomy(spec);
    let rendered = par::map_slice(&Sequence::ALL, |&s| (s, render(spec, &anatomy, s)));
    let spacing = [1.0; 3];
    let mut sequences = BTreeMap::new();
    for (s, data) in rendered {
        sequences.insert(s, Volume::new(data, spacing)?);
    }
    let set = SequenceSet {
        case_id: case_id.to_string(),
        sequences,
        seg: Some(LabelVolume {
            labels: anatomy.seg,
            spacing,
            origin: [0.0; 3],
        }),
    };
    set.validate()?;
    Ok(set)
}

/// Seed of the `index`-th case derived from a corpus seed (splitmix64 step).
pub fn case_seed(corpus_seed: u64, index: usize) -> u64 {
    let mut z = corpus_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn case_name(index: usize) -> String {
    format!("PHANTOM-{index:05}")
}

/// Generates `count` cases from one template, in parallel.
pub fn generate_corpus(template: &PhantomSpec, count: usize) -> Result<Vec<SequenceSet>> {
    par::map_range(count, |i| {
        let spec = PhantomSpec {
            seed: case_seed(template.seed, i),
            ..template.clone()
        };
        generate_case(&spec, &case_name(i))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn deterministic() {
        let spec = PhantomSpec::cube(24, 42);
        let a = generate_case(&spec, "a").unwrap();
        let b = generate_case(&spec, "a").unwrap();
        for s in Sequence::ALL {
            let (x, y) = (&a.sequences[&s].data, &b.sequences[&s].data);
            assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_eq!(a.seg, b.seg);
        let c = generate_case(&PhantomSpec::cube(24, 43), "a").unwrap();
        assert_ne!(a.sequences[&Sequence::T1c].data, c.sequences[&Sequence::T1c].data);
    }

    #[test]
    fn noiseless_single_shell_has_three_levels() {
        let spec = PhantomSpec {
            n_shells: 1,
            noise_sigma: 0.0,
            ..PhantomSpec::cube(32, 7)
        };
        let set = generate_case(&spec, "x").unwrap();
        for v in set.sequences.values() {
            let distinct: BTreeSet<u32> = v.data.iter().map(|x| x.to_bits()).collect();
            assert!(distinct.len() <= 3, "{} levels", distinct.len());
            assert!(distinct.contains(&0f32.to_bits()));
        }
    }

    #[test]
    fn tumor_inside_brain_and_shared_support() {
        for seed in 0..5 {
            let set = generate_case(&PhantomSpec::cube(32, seed), "x").unwrap();
            let seg = &set.seg.as_ref().unwrap().labels;
            assert!(seg.iter().any(|&l| l > 0), "seed {seed}: no tumor");
            let t1c = &set.sequences[&Sequence::T1c].data;
            for (idx, &l) in seg.indexed_iter() {
                if l > 0 {
                    assert!(t1c[idx] > 0.0);
                }
            }
            // identical support across sequences, exactly zero outside
            let support = t1c.mapv(|x| x > 0.0);
            for v in set.sequences.values() {
                assert_eq!(v.data.mapv(|x| x > 0.0), support);
                assert!(v.is_raw_valid());
            }
            assert!(!support[[0, 0, 0]]);
        }
    }

    #[test]
    fn sequences_share_anatomy() {
        let spec = PhantomSpec {
            n_shells: 5,
            ..PhantomSpec::cube(32, 3)
        };
        let set = generate_case(&spec, "x").unwrap();
        let anatomy = build_anatomy(&spec);
        let shell_means = |s: Sequence| -> Vec<f64> {
            (0..spec.n_shells)
                .map(|k| {
                    let (mut sum, mut n) = (0.0, 0.0);
                    for (idx, t) in anatomy.tissue.indexed_iter() {
                        if *t == Tissue::Shell(k) {
                            sum += set.sequences[&s].data[idx] as f64;
                            n += 1.0;
                        }
                    }
                    sum / n
                })
                .collect()
        };
        let corr = |a: &[f64], b: &[f64]| {
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            cov / (va * vb).sqrt()
        };
        let means: Vec<Vec<f64>> = Sequence::ALL.iter().map(|&s| shell_means(s)).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                let r = corr(&means[i], &means[j]);
                assert!(r.abs() > 0.9, "{i},{j}: r = {r}");
            }
        }
    }

    #[test]
    fn impossible_geometry_rejected() {
        let spec = PhantomSpec {
            tumor_radius_range: [10.0, 12.0],
            ..PhantomSpec::cube(16, 0)
        };
        assert!(matches!(generate_case(&spec, "x"), Err(Error::Phantom(_))));
        assert!(matches!(
            generate_case(&PhantomSpec::cube(8, 0), "x"),
            Err(Error::Phantom(_))
        ));
    }

    #[test]
    fn corpus_ids_and_seeds() {
        let cases = generate_corpus(&PhantomSpec::cube(16, 1), 3).unwrap();
        let ids: Vec<_> = cases.iter().map(|c| c.case_id.clone()).collect();
        assert_eq!(ids, vec!["PHANTOM-00000", "PHANTOM-00001", "PHANTOM-00002"]);
        assert_ne!(case_seed(1, 0), case_seed(1, 1));
    }
}
