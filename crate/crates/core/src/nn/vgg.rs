//! VGG-19 convolutional feature extractor (frozen) with input-gradient support.
//!
//! Layer indices follow the usual `features` numbering of VGG-19, so tap 2 is
//! the second convolution, 7 the fourth, and so on. Taps are read directly
//! after the convolution, before its ReLU.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::layers::{maxpool2, maxpool2_backward, Activation, Conv2d};
use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Output channels of the 16 convolutions; `None` marks a max-pool.
const PLAN: [Option<usize>; 21] = [
    Some(64), Some(64), None,
    Some(128), Some(128), None,
    Some(256), Some(256), Some(256), Some(256), None,
    Some(512), Some(512), Some(512), Some(512), None,
    Some(512), Some(512), Some(512), Some(512), None,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VggOp {
    /// Index into the extractor's convolution list.
    Conv(usize),
    Relu,
    Pool,
}

/// Where extractor weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum VggSource {
    /// A safetensors file with `features.{i}.weight` / `features.{i}.bias`.
    Pretrained { path: PathBuf },
    /// He-initialized weights with all widths divided by `width_divisor`.
    Random { seed: u64, width_divisor: usize },
}

#[derive(Debug, Clone)]
pub struct Vgg19 {
    pub ops: Vec<VggOp>,
    pub convs: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct VggTrace {
    inputs: Vec<Array4<f64>>,
    pool_args: Vec<Option<Array4<usize>>>,
}

fn op_list(width_divisor: usize) -> Vec<(VggOp, Option<(usize, usize)>)> {
    let mut out = Vec::new();
    let mut cin = 3;
    let mut conv = 0;
    for p in PLAN {
        match p {
            Some(w) => {
                let w = (w / width_divisor).max(1);
                out.push((VggOp::Conv(conv), Some((cin, w))));
                out.push((VggOp::Relu, None));
                cin = w;
                conv += 1;
            }
            None => out.push((VggOp::Pool, None)),
        }
    }
    out
}

impl Vgg19 {
    pub fn load(source: &VggSource) -> Result<Self> {
        match source {
            VggSource::Pretrained { path } => Vgg19::pretrained(path),
            VggSource::Random { seed, width_divisor } => Ok(Vgg19::random(*seed, *width_divisor)),
        }
    }

    pub fn random(seed: u64, width_divisor: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ops = Vec::new();
        let mut convs = Vec::new();
        for (op, shape) in op_list(width_divisor.max(1)) {
            if let Some((cin, cout)) = shape {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                convs.push(Conv2d::normal(cin, cout, 3, 1, 1, std, &mut rng));
            }
            ops.push(op);
        }
        Vgg19 { ops, convs }
    }

    pub fn pretrained(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Dependency(format!("VGG-19 weights {}: {e}", path.display()))
        })?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Dependency(format!("VGG-19 weights {}: {e}", path.display())))?;
        let tensors: HashMap<String, _> = st.tensors().into_iter().collect();
        let fetch = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Dependency(format!("VGG-19 weights lack {name}")))?;
            let data: Vec<f64> = match t.dtype() {
                Dtype::F32 => t
                    .data()
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect(),
                Dtype::F64 => t
                    .data()
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
                other => {
                    return Err(Error::Dependency(format!("{name}: unsupported dtype {other:?}")))
                }
            };
            Ok((t.shape().to_vec(), data))
        };
        let mut ops = Vec::new();
        let mut convs = Vec::new();
        for (i, (op, shape)) in op_list(1).into_iter().enumerate() {
            if let Some((cin, cout)) = shape {
                let (ws, w) = fetch(&format!("features.{i}.weight"))?;
                let (_, b) = fetch(&format!("features.{i}.bias"))?;
                if ws != [cout, cin, 3, 3] || b.len() != cout {
                    return Err(Error::Dependency(format!(
                        "features.{i}: expected [{cout}, {cin}, 3, 3], got {ws:?}"
                    )));
                }
                convs.push(Conv2d {
                    weight: Array4::from_shape_vec((cout, cin, 3, 3), w).unwrap(),
                    bias: Array1::from(b),
                    stride: 1,
                    padding: 1,
                });
            }
            ops.push(op);
        }
        Ok(Vgg19 { ops, convs })
    }

    /// Replicates a one-channel batch to three channels and normalizes each.
    pub fn prepare_input(x: &Array4<f64>) -> Array4<f64> {
        let (n, _, h, w) = x.dim();
        let mut out = Array4::<f64>::zeros((n, 3, h, w));
        for c in 0..3 {
            let src = x.index_axis(Axis(1), 0);
            out.index_axis_mut(Axis(1), c)
                .assign(&src.mapv(|v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]));
        }
        out
    }

    /// Adjoint of [`Vgg19::prepare_input`].
    pub fn prepare_input_backward(g: &Array4<f64>) -> Array4<f64> {
        let (n, _, h, w) = g.dim();
        let mut out = Array4::<f64>::zeros((n, 1, h, w));
        for (c, std) in IMAGENET_STD.iter().enumerate() {
            let gc = g.index_axis(Axis(1), c);
            out.index_axis_mut(Axis(1), 0).scaled_add(1.0 / std, &gc);
        }
        out
    }

    /// Feature maps at the requested op indices (ascending) for a one-channel batch.
    pub fn features(&self, x: &Array4<f64>, taps: &[usize]) -> Result<Vec<Array4<f64>>> {
        Ok(self.features_trace(x, taps)?.0)
    }

    pub fn features_trace(&self, x: &Array4<f64>, taps: &[usize]) -> Result<(Vec<Array4<f64>>, VggTrace)> {
        let last = *taps
            .iter()
            .max()
            .ok_or_else(|| Error::Argument("no VGG layers requested".into()))?;
        if last >= self.ops.len() {
            return Err(Error::Argument(format!("VGG layer {last} out of range")));
        }
        if !taps.iter().all(|&t| matches!(self.ops[t], VggOp::Conv(_)))
            || !taps.windows(2).all(|w| w[0] < w[1])
        {
            return Err(Error::Argument(format!("VGG taps {taps:?} must be ascending convolution indices")));
        }
        if x.len_of(Axis(1)) != 1 {
            return Err(Error::Shape("VGG input must have one channel".into()));
        }
        let mut cur = Vgg19::prepare_input(x);
        let mut inputs = Vec::with_capacity(last + 1);
        let mut pool_args = Vec::with_capacity(last + 1);
        let mut feats = Vec::with_capacity(taps.len());
        for i in 0..=last {
            let next = match self.ops[i] {
                VggOp::Conv(k) => {
                    pool_args.push(None);
                    self.convs[k].forward(&cur)
                }
                VggOp::Relu => {
                    pool_args.push(None);
                    Activation::Relu.forward(&cur)
                }
                VggOp::Pool => {
                    let (y, arg) = maxpool2(&cur);
                    pool_args.push(Some(arg));
                    y
                }
            };
            inputs.push(std::mem::replace(&mut cur, next));
            if taps.contains(&i) {
                feats.push(cur.clone());
            }
        }
        Ok((feats, VggTrace { inputs, pool_args }))
    }

    /// Gradient with respect to the one-channel input given gradients at `taps`.
    pub fn backward(&self, trace: &VggTrace, taps: &[usize], tap_grads: &[Array4<f64>]) -> Array4<f64> {
        let last = trace.inputs.len() - 1;
        let mut g: Option<Array4<f64>> = None;
        for i in (0..=last).rev() {
            if let Some(t) = taps.iter().position(|&t| t == i) {
                g = Some(match g {
                    Some(mut acc) => {
                        acc += &tap_grads[t];
                        acc
                    }
                    None => tap_grads[t].clone(),
                });
            }
            let Some(go) = g.take() else { continue };
            let input = &trace.inputs[i];
            g = Some(match self.ops[i] {
                VggOp::Conv(k) => self.convs[k].backward(input, &go, None, true).unwrap(),
                VggOp::Relu => Activation::Relu.backward(input, &go),
                VggOp::Pool => {
                    let (_, _, h, w) = input.dim();
                    maxpool2_backward(&go, trace.pool_args[i].as_ref().unwrap(), h, w)
                }
            });
        }
        Vgg19::prepare_input_backward(&g.expect("at least one tap"))
    }
}
