//! Differentiable tensor primitives and the two network topologies: a
//! single-trunk U-Net with two output heads, and the stacked W-Net whose
//! first half regresses distance maps and feeds features to the second half.
//!
//! There is no general autodiff here. Each topology compiles to a small op
//! graph; the forward pass records activations on a tape and the backward
//! pass replays it in reverse with hand-derived gradients for every op.

mod checkpoint;
mod graph;
pub mod ops;
mod topology;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{Graph, Op, Tape};
pub use topology::{forward_unet_two_head, forward_wnet, Network, NetworkOutputs};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Batched raster tensor, NHWC, row-major within each image.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<S: Scalar> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor4<S> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Tensor4 {
            n,
            h,
            w,
            c,
            data: vec![S::zero(); n * h * w * c],
        }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != n * h * w * c {
            return Err(Error::shape_mismatch(
                "Tensor4::from_vec",
                n * h * w * c,
                data.len(),
            ));
        }
        Ok(Tensor4 { n, h, w, c, data })
    }

    #[inline]
    pub fn idx(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.h + y) * self.w + x) * self.c + c
    }

    #[inline]
    pub fn get(&self, n: usize, y: usize, x: usize, c: usize) -> S {
        self.data[self.idx(n, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, v: S) {
        let i = self.idx(n, y, x, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n && self.h == other.h && self.w == other.w && self.c == other.c
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One learnable tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamTensor<S: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub grad: Vec<S>,
}

impl<S: Scalar> ParamTensor<S> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        ParamTensor {
            shape,
            data: vec![S::zero(); len],
            grad: vec![S::zero(); len],
        }
    }
}

/// Ordered collection of named parameters. Iteration order is insertion
/// order, which the optimizer and checkpoints rely on for determinism.
#[derive(Debug, Clone, Default)]
pub struct ModelParams<S: Scalar> {
    map: IndexMap<String, ParamTensor<S>>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn new() -> Self {
        ModelParams {
            map: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.map.insert(name.to_string(), ParamTensor::zeros(shape));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<S>> {
        self.map.get(name)
    }

    pub fn by_index(&self, i: usize) -> (&str, &ParamTensor<S>) {
        let (name, t) = self.map.get_index(i).expect("parameter index in range");
        (name.as_str(), t)
    }

    pub fn by_index_mut(&mut self, i: usize) -> (&str, &mut ParamTensor<S>) {
        let (name, t) = self.map.get_index_mut(i).expect("parameter index in range");
        (name.as_str(), t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor<S>)> {
        self.map.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamTensor<S>)> {
        self.map.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.map.iter_mut() {
            t.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|t| t.data.len()).sum()
    }
}

/// Network family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetKind {
    /// One U-Net trunk with parallel distance and embedding heads.
    #[serde(rename = "unet_two_head")]
    UnetTwoHead,
    /// Two stacked U-Nets with an intermediate distance regression and a
    /// concatenative bridge into the second net.
    #[serde(rename = "wnet")]
    Wnet,
}

/// What gets concatenated to the standardized image before the second U-Net
/// (or, for the two-head U-Net, before its only trunk).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConcatVariant {
    /// Image only.
    None,
    /// Image + normalized x/y coordinate channels.
    Coord,
    /// Image + the predicted (post-ReLU) distance map.
    DistMap,
    /// Image + distance features projected to this many channels and
    /// L2-normalized per pixel.
    DFeat(usize),
    /// Image + an intermediate embedding head of this many channels,
    /// trained with its own embedding loss.
    EFeat(usize),
    /// Image + both of the above.
    DFeatEFeat(usize, usize),
}

impl std::fmt::Display for ConcatVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConcatVariant::None => write!(f, "none"),
            ConcatVariant::Coord => write!(f, "coord"),
            ConcatVariant::DistMap => write!(f, "distmap"),
            ConcatVariant::DFeat(j) => write!(f, "dfeat.{j}"),
            ConcatVariant::EFeat(k) => write!(f, "efeat.{k}"),
            ConcatVariant::DFeatEFeat(j, k) => write!(f, "dfeat.{j}+efeat.{k}"),
        }
    }
}

impl std::str::FromStr for ConcatVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_dim = |text: &str, prefix: &str| -> Result<usize> {
            let dim: usize = text
                .strip_prefix(prefix)
                .and_then(|d| d.parse().ok())
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("cannot parse concat variant part {text:?}"))
                })?;
            if dim == 0 {
                return Err(Error::InvalidConfig(format!(
                    "concat dimension in {text:?} must be >= 1"
                )));
            }
            Ok(dim)
        };
        match s {
            "none" => Ok(ConcatVariant::None),
            "coord" | "coordinate" => Ok(ConcatVariant::Coord),
            "distmap" => Ok(ConcatVariant::DistMap),
            _ => {
                if let Some((d, e)) = s.split_once('+') {
                    Ok(ConcatVariant::DFeatEFeat(
                        parse_dim(d, "dfeat.")?,
                        parse_dim(e, "efeat.")?,
                    ))
                } else if s.starts_with("dfeat.") {
                    Ok(ConcatVariant::DFeat(parse_dim(s, "dfeat.")?))
                } else if s.starts_with("efeat.") {
                    Ok(ConcatVariant::EFeat(parse_dim(s, "efeat.")?))
                } else {
                    Err(Error::InvalidConfig(format!(
                        "unknown concat variant {s:?}"
                    )))
                }
            }
        }
    }
}

impl Serialize for ConcatVariant {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ConcatVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Architecture description; everything needed to rebuild the op graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub kind: NetKind,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_base")]
    pub base: usize,
    #[serde(default = "default_feature_width")]
    pub feature_width: usize,
    pub embedding_dim: usize,
    #[serde(default = "default_concat")]
    pub concat: ConcatVariant,
    /// When set, gradients from the embedding loss stop at the concatenative
    /// bridge instead of flowing back into the first U-Net.
    #[serde(default)]
    pub detach_concat: bool,
}

fn default_depth() -> usize {
    2
}

fn default_base() -> usize {
    16
}

fn default_feature_width() -> usize {
    32
}

fn default_concat() -> ConcatVariant {
    ConcatVariant::DFeat(32)
}

impl Default for TopologySpec {
    fn default() -> Self {
        TopologySpec {
            kind: NetKind::Wnet,
            depth: default_depth(),
            base: default_base(),
            feature_width: default_feature_width(),
            embedding_dim: 8,
            concat: default_concat(),
            detach_concat: false,
        }
    }
}

impl TopologySpec {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "embedding_dim must be >= 2, got {}",
                self.embedding_dim
            )));
        }
        if self.depth < 1 {
            return Err(Error::InvalidConfig("depth must be >= 1".into()));
        }
        if self.base < 1 || self.feature_width < 1 {
            return Err(Error::InvalidConfig(
                "base and feature_width must be >= 1".into(),
            ));
        }
        if self.kind == NetKind::UnetTwoHead
            && !matches!(self.concat, ConcatVariant::None | ConcatVariant::Coord)
        {
            return Err(Error::InvalidConfig(format!(
                "the two-head U-Net only supports concat variants none/coord, got {}",
                self.concat
            )));
        }
        Ok(())
    }
}

/// Fills conv kernels with He-Normal samples (std = sqrt(2/fan_in)) and
/// biases with zeros, in parameter insertion order, from one seeded stream.
pub fn he_normal_init<S: Scalar>(params: &mut ModelParams<S>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in params.iter_mut() {
        if t.shape.len() == 4 {
            let fan_in: usize = t.shape[..3].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in &mut t.data {
                *v = S::from_f64(normal.sample(&mut rng));
            }
        } else {
            t.data.iter_mut().for_each(|v| *v = S::zero());
        }
        t.grad.iter_mut().for_each(|g| *g = S::zero());
    }
}
