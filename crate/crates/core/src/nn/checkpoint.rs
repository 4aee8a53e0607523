//! Checkpoint files: named f64 parameter tensors in a safetensors archive
//! with one JSON metadata entry holding the format tag and run metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array1, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::discriminator::{Discriminator, DiscriminatorConfig};
use super::generator::{Generator, GeneratorConfig};
use super::spectral::SnState;
use crate::error::{Error, Result};
use crate::volume::Sequence;

pub const MAGIC: &str = "mrsynth-checkpoint-v1";
const META_KEY: &str = "mrsynth";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub target: Sequence,
    pub epoch: u64,
    pub global_step: u64,
    /// Mean development metrics at save time (finite values only).
    pub dev_metrics: BTreeMap<String, f64>,
    /// SHA-256 of the effective configuration text.
    pub config_hash: String,
    pub generator: GeneratorConfig,
    pub discriminator: Option<DiscriminatorConfig>,
}

impl CheckpointMeta {
    pub fn new(target: Sequence, generator: GeneratorConfig) -> Self {
        CheckpointMeta {
            format: MAGIC.into(),
            target,
            epoch: 0,
            global_step: 0,
            dev_metrics: BTreeMap::new(),
            config_hash: String::new(),
            generator,
            discriminator: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
}

fn bytes_of(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

fn ck_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, c) in self.generator.conv_names().iter().zip(self.generator.convs()) {
            named.push((format!("gen.{name}.weight"), c.weight.shape().to_vec(), bytes_of(c.weight.iter().copied())));
            named.push((format!("gen.{name}.bias"), c.bias.shape().to_vec(), bytes_of(c.bias.iter().copied())));
        }
        if let Some(d) = &self.discriminator {
            for ((name, l), st) in d.conv_names().iter().zip(&d.layers).zip(&d.sn) {
                named.push((format!("{name}.weight"), l.conv.weight.shape().to_vec(), bytes_of(l.conv.weight.iter().copied())));
                named.push((format!("{name}.bias"), l.conv.bias.shape().to_vec(), bytes_of(l.conv.bias.iter().copied())));
                named.push((format!("{name}.u"), l.u.shape().to_vec(), bytes_of(l.u.iter().copied())));
                named.push((format!("{name}.v"), st.v.shape().to_vec(), bytes_of(st.v.iter().copied())));
            }
        }
        let views: Vec<(String, TensorView)> = named
            .iter()
            .map(|(n, shape, data)| Ok((n.clone(), TensorView::new(Dtype::F64, shape.clone(), data).map_err(ck_err)?)))
            .collect::<Result<_>>()?;
        let meta = serde_json::to_string(&self.meta).map_err(ck_err)?;
        let info = HashMap::from([(META_KEY.to_string(), meta)]);
        safetensors::serialize(views, Some(info)).map_err(ck_err)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(ck_err)?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(ck_err)?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("not a mrsynth checkpoint (no metadata)".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json).map_err(ck_err)?;
        if meta.format != MAGIC {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format '{}', expected '{MAGIC}'",
                meta.format
            )));
        }
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = st
                .tensor(name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dtype() != Dtype::F64 || t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected f64 {shape:?}, found {:?} {:?}",
                    t.dtype(),
                    t.shape()
                )));
            }
            Ok(t.data()
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect())
        };
        let load4 = |name: &str, like: &Array4<f64>| -> Result<Array4<f64>> {
            Ok(Array4::from_shape_vec(like.raw_dim(), fetch(name, like.shape())?).unwrap())
        };
        let load1 = |name: &str, like: &Array1<f64>| -> Result<Array1<f64>> {
            Ok(Array1::from(fetch(name, like.shape())?))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut generator = Generator::new(meta.generator.clone(), &mut rng)?;
        let names = generator.conv_names();
        for (name, c) in names.iter().zip(generator.convs_mut()) {
            c.weight = load4(&format!("gen.{name}.weight"), &c.weight)?;
            c.bias = load1(&format!("gen.{name}.bias"), &c.bias)?;
        }
        let discriminator = match &meta.discriminator {
            Some(cfg) => {
                let mut d = Discriminator::new(cfg.clone(), &mut rng)?;
                let names = d.conv_names();
                let mut sn = Vec::with_capacity(names.len());
                for ((name, l), st) in names.iter().zip(d.layers.iter_mut()).zip(&d.sn) {
                    l.conv.weight = load4(&format!("{name}.weight"), &l.conv.weight)?;
                    l.conv.bias = load1(&format!("{name}.bias"), &l.conv.bias)?;
                    l.u = load1(&format!("{name}.u"), &l.u)?;
                    let v = load1(&format!("{name}.v"), &st.v)?;
                    sn.push(SnState::from_vectors(&l.conv.weight, l.u.clone(), v));
                }
                d.sn = sn;
                Some(d)
            }
            None => None,
        };
        Ok(Checkpoint {
            meta,
            generator,
            discriminator,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::tests::random4;

    #[test]
    fn round_trip_preserves_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gcfg = GeneratorConfig {
            depth: 3,
            base_width: 4,
            width_cap: 8,
            ..GeneratorConfig::default()
        };
        let generator = Generator::new(gcfg.clone(), &mut rng).unwrap();
        let dcfg = DiscriminatorConfig {
            base_width: 4,
            ..DiscriminatorConfig::default()
        };
        let discriminator = Discriminator::new(dcfg.clone(), &mut rng).unwrap();
        let mut meta = CheckpointMeta::new(Sequence::T2f, gcfg);
        meta.epoch = 3;
        meta.global_step = 12;
        meta.dev_metrics.insert("ssim_h".into(), 0.5);
        meta.discriminator = Some(dcfg);
        let ck = Checkpoint {
            meta,
            generator,
            discriminator: Some(discriminator),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt/t2f/3.bin");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.generator, ck.generator);
        let x = random4((1, 9, 16, 16), 1);
        assert_eq!(back.generator.forward(&x).unwrap(), ck.generator.forward(&x).unwrap());
        let d0 = ck.discriminator.as_ref().unwrap();
        let d1 = back.discriminator.as_ref().unwrap();
        let xd = random4((1, 2, 32, 32), 2);
        assert_eq!(d0.forward(&xd).unwrap(), d1.forward(&xd).unwrap());
        assert_eq!(ck.to_bytes().unwrap(), back.to_bytes().unwrap());
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint"), Err(Error::Checkpoint(_))));
        let data = 1.0f64.to_le_bytes();
        let v = TensorView::new(Dtype::F64, vec![1], &data).unwrap();
        let bytes = safetensors::serialize([("x", v)], None).unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }
}
