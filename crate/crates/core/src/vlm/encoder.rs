//! Frozen stub visual encoder and the trainable two-layer projector.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::VlmError;
use crate::model::checkpoint::sha256_hex;
use crate::model::param;
use crate::par::Exec;
use crate::tensor::{kernels, Graph, NodeId, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub patch: usize,
    /// Side of the square encoder input (global view and tiles).
    pub base: usize,
    pub feature_dim: usize,
    pub projector_hidden: usize,
}

impl VisionConfig {
    /// ViT-L/14-shaped geometry: 224-pixel views cut into 14-pixel patches.
    pub fn reference(feature_dim: usize, projector_hidden: usize) -> Self {
        Self {
            patch: 14,
            base: 224,
            feature_dim,
            projector_hidden,
        }
    }

    pub fn patches_per_view(&self) -> usize {
        (self.base / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<(), VlmError> {
        if self.patch == 0 || !self.base.is_multiple_of(self.patch) || self.feature_dim == 0 || self.projector_hidden == 0 {
            return Err(VlmError::Config(format!("invalid vision config {self:?}")));
        }
        Ok(())
    }
}

/// Per-patch features of one view, patches in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    pub grid: (usize, usize),
    /// `[grid.0 * grid.1, dim]`
    pub features: Tensor<f32>,
}

impl PatchFeatures {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.last_dim()
    }
}

/// Stand-in for a pretrained vision tower: a seeded linear map of
/// flattened patches. Never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct StubEncoder {
    pub patch: usize,
    weight: Tensor<f32>,
    bias: Tensor<f32>,
}

impl StubEncoder {
    pub fn new(patch: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = patch * patch * 3;
        Self {
            patch,
            weight: Tensor::randn([fan_in, dim], 1.0 / (fan_in as f64).sqrt(), &mut rng),
            bias: Tensor::randn([dim], 0.02, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn checksum(&self) -> String {
        let mut bytes = self.weight.to_le_bytes();
        bytes.extend(self.bias.to_le_bytes());
        sha256_hex(&bytes)
    }

    pub fn encode(&self, image: &Image) -> Result<PatchFeatures, VlmError> {
        let p = self.patch;
        if !image.width.is_multiple_of(p) || !image.height.is_multiple_of(p) {
            return Err(VlmError::Image(format!(
                "{}x{} image is not a whole number of {p}-pixel patches",
                image.width, image.height
            )));
        }
        let (gh, gw) = (image.height / p, image.width / p);
        let fan_in = p * p * 3;
        let mut patches = Vec::with_capacity(gh * gw * fan_in);
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    let start = ((py * p + y) * image.width + px * p) * 3;
                    patches.extend_from_slice(&image.data[start..start + p * 3]);
                }
            }
        }
        let n = gh * gw;
        let d = self.dim();
        let mut out = kernels::matmul(Exec::auto(n * fan_in * d), &patches, self.weight.data(), n, fan_in, d);
        for row in out.chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        Ok(PatchFeatures {
            grid: (gh, gw),
            features: Tensor::new([n, d], out).expect("sized above"),
        })
    }
}

pub const PROJ_W1: &str = "projector.w_1";
pub const PROJ_B1: &str = "projector.b_1";
pub const PROJ_W2: &str = "projector.w_2";
pub const PROJ_B2: &str = "projector.b_2";

pub fn projector_shapes(feature_dim: usize, hidden: usize, d_model: usize) -> [(&'static str, Vec<usize>); 4] {
    [
        (PROJ_W1, vec![feature_dim, hidden]),
        (PROJ_B1, vec![hidden]),
        (PROJ_W2, vec![hidden, d_model]),
        (PROJ_B2, vec![d_model]),
    ]
}

pub fn init_projector<T: Scalar>(feature_dim: usize, hidden: usize, d_model: usize, seed: u64) -> BTreeMap<String, Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    projector_shapes(feature_dim, hidden, d_model)
        .into_iter()
        .map(|(name, shape)| {
            let t = if name == PROJ_B1 || name == PROJ_B2 {
                Tensor::zeros(shape)
            } else {
                let fan_in = shape[0] as f64;
                Tensor::randn(shape, 1.0 / fan_in.sqrt(), &mut rng)
            };
            (name.to_string(), t)
        })
        .collect()
}

/// `gelu(x W1 + b1) W2 + b2`, rows of `x` being patch features.
pub fn build_projector<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    hidden: usize,
    d_model: usize,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<NodeId, VlmError> {
    let f = g.shape(x)[1];
    let [(n1, s1), (n2, s2), (n3, s3), (n4, s4)] = projector_shapes(f, hidden, d_model);
    let w1 = param(g, n1, &s1, trainable)?;
    let b1 = param(g, n2, &s2, trainable)?;
    let w2 = param(g, n3, &s3, trainable)?;
    let b2 = param(g, n4, &s4, trainable)?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let y = g.matmul(h, w2)?;
    Ok(g.add_row(y, b2)?)
}

/// Direct evaluation of the projector.
pub fn project<T: Scalar>(features: &Tensor<T>, projector: &BTreeMap<String, Tensor<T>>) -> Result<Tensor<T>, VlmError> {
    let (hidden, d_model) = match (projector.get(PROJ_W1), projector.get(PROJ_W2)) {
        (Some(w1), Some(w2)) => (w1.last_dim(), w2.last_dim()),
        _ => return Err(VlmError::Config("projector weights missing".into())),
    };
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let y = build_projector(&mut g, x, hidden, d_model, &|_| false)?;
    g.forward(projector)?;
    Ok(g.value(y)?.clone())
}
