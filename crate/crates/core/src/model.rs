//! Backbone plus hash layer, and the checkpoint file that stores them.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, ArchDescriptor, BackboneParams, BackboneTrace};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::hash::{self, HashParams, HashTrace};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FGHC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: BackboneParams,
    pub hash: HashParams,
}

/// Everything one forward pass keeps for backpropagation.
#[derive(Debug, Clone)]
pub struct ModelTrace {
    backbone: BackboneTrace,
    hash: HashTrace,
}

impl ModelTrace {
    pub fn codes(&self) -> &Tensor {
        self.hash.codes()
    }

    pub fn feature_map(&self) -> &Tensor {
        self.backbone.feature_map()
    }

    /// Accumulates `dL/du` into the parameter gradients of `model`, which
    /// must have its gradient buffers enabled. Returns the input image.
    pub fn backward(self, model: &mut Model, upstream_u: &[f64]) -> Result<Tensor> {
        let dz = self.hash.backward(&mut model.hash, upstream_u)?;
        self.backbone.backward(&mut model.backbone, &dz)
    }
}

impl Model {
    pub fn init(arch: &ArchDescriptor, k: usize, seed: u64) -> Result<Self> {
        let backbone = BackboneParams::init(arch, seed)?;
        let hash = HashParams::init(k, arch.embedding_dim()?, seed.wrapping_add(0x9e37_79b9))?;
        Ok(Self { backbone, hash })
    }

    pub fn code_length(&self) -> usize {
        self.hash.code_length()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.backbone.tensors();
        t.extend(self.hash.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.backbone.tensors_mut();
        t.extend(self.hash.tensors_mut());
        t
    }

    pub fn enable_grads(&mut self) {
        self.backbone.enable_grads();
        self.hash.enable_grads();
    }

    /// Gradient buffers in [`Model::tensors`] order (zeros where absent).
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors()
            .iter()
            .map(|t| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }

    pub fn forward(&self, x: Tensor) -> Result<ModelTrace> {
        let backbone = backbone::forward(x, &self.backbone)?;
        let hash = hash::hash_forward_traced(backbone.embedding(), &self.hash)?;
        Ok(ModelTrace { backbone, hash })
    }

    /// Relaxed code `u ∈ (−1, 1)^k`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (_, z) = backbone::extract(x, &self.backbone)?;
        hash::hash_forward(&z, &self.hash)
    }

    /// Binary code used at inference time.
    pub fn code(&self, x: &Tensor) -> Result<Vec<i8>> {
        Ok(hash::binarize(self.encode(x)?.data()))
    }

    /// Centres the hash layer's pre-activations over `images`.
    pub fn center_hash(&mut self, images: &[Tensor]) -> Result<()> {
        let z: Vec<Vec<f64>> = images
            .par_iter()
            .map(|x| Ok(backbone::extract(x, &self.backbone)?.1.into_data()))
            .collect::<Result<_>>()?;
        self.hash.center(&z)
    }

    pub fn feature_map(&self, x: &Tensor) -> Result<Tensor> {
        Ok(backbone::extract(x, &self.backbone)?.0.a)
    }

    /// `"FGHC"`, version, JSON header (arch, k), tensor count, tensors, CRC32.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&CheckpointHeader {
            arch: self.backbone.arch.clone(),
            code_length: self.code_length(),
        })?;
        let tensors = self.tensors();
        let mut w = Writer::new(MAGIC);
        w.u32(VERSION).block(&header)?.len_u32(tensors.len())?;
        for t in tensors {
            w.tensor(t)?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Malformed(format!("unsupported checkpoint version {version}")));
        }
        let header: CheckpointHeader = serde_json::from_slice(r.block()?)
            .map_err(|e| Error::Malformed(format!("checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let stages = header.arch.stages.len();
        if count != 2 * stages + 2 {
            return Err(Error::Malformed(format!(
                "{count} tensors for {stages} stages"
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(r.tensor()?);
        }
        r.finish()?;
        let mut it = tensors.into_iter();
        let mut kernels = Vec::with_capacity(stages);
        let mut biases = Vec::with_capacity(stages);
        for _ in 0..stages {
            kernels.push(it.next().unwrap());
            biases.push(it.next().unwrap());
        }
        let backbone = BackboneParams {
            arch: header.arch,
            kernels,
            biases,
        };
        backbone.validate()?;
        let hash = HashParams {
            w: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        let dim = backbone.arch.embedding_dim()?;
        if hash.w.shape() != [header.code_length, dim] || hash.bias.shape() != [header.code_length] {
            return Err(Error::Malformed("hash layer shapes disagree with header".into()));
        }
        Ok(Self { backbone, hash })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchDescriptor,
    code_length: usize,
}
