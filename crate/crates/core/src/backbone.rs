//! Plain convolutional feature extractor: `conv → bias → relu` stages, the
//! last of which yields the feature map `A`; the embedding `z` is its global
//! average pool.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub stages: Vec<StageSpec>,
}

impl ArchDescriptor {
    /// Three 3×3 stride-2 stages, 16 → 32 → 64 channels.
    pub fn default_for(height: usize, width: usize) -> Self {
        Self::with_channels(height, width, &[16, 32, 64])
    }

    pub fn with_channels(height: usize, width: usize, channels: &[usize]) -> Self {
        Self {
            input_channels: 3,
            input_height: height,
            input_width: width,
            stages: channels
                .iter()
                .map(|&c| StageSpec {
                    out_channels: c,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                })
                .collect(),
        }
    }

    /// Shape of every stage output, ending with the feature map's `[c′, h′, w′]`.
    pub fn stage_shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.stages.is_empty() {
            return Err(Error::config("arch.stages", "need at least one stage"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("arch.input_channels", "must be positive"));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        let mut shapes = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 {
                return Err(Error::config(format!("arch.stages[{i}].out_channels"), "must be positive"));
            }
            h = ops::conv_output_size(h, s.kernel, s.stride, s.pad)
                .map_err(|e| Error::config(format!("arch.stages[{i}]"), e.to_string()))?;
            w = ops::conv_output_size(w, s.kernel, s.stride, s.pad)
                .map_err(|e| Error::config(format!("arch.stages[{i}]"), e.to_string()))?;
            shapes.push([s.out_channels, h, w]);
        }
        Ok(shapes)
    }

    pub fn feature_shape(&self) -> Result<[usize; 3]> {
        Ok(*self.stage_shapes()?.last().unwrap())
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        Ok(self.feature_shape()?[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub arch: ArchDescriptor,
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl BackboneParams {
    /// He-normal kernels (std `√(2/fan_in)`), zero biases.
    pub fn init(arch: &ArchDescriptor, seed: u64) -> Result<Self> {
        arch.stage_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = arch.input_channels;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for s in &arch.stages {
            let fan_in = (c_in * s.kernel * s.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
            kernels.push(Tensor::from_fn(&[s.out_channels, c_in, s.kernel, s.kernel], |_| {
                normal.sample(&mut rng)
            }));
            biases.push(Tensor::zeros(&[s.out_channels]));
            c_in = s.out_channels;
        }
        Ok(Self {
            arch: arch.clone(),
            kernels,
            biases,
        })
    }

    /// Parameters in a fixed order: kernel 0, bias 0, kernel 1, ...
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.kernels
            .iter()
            .zip(&self.biases)
            .flat_map(|(k, b)| [k, b])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.kernels
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(k, b)| [k, b])
            .collect()
    }

    pub fn enable_grads(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::enable_grad);
    }

    /// Checks the invariants a loaded parameter set must satisfy.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.arch.stage_shapes()?;
        if self.kernels.len() != shapes.len() || self.biases.len() != shapes.len() {
            return Err(Error::Malformed("stage count disagrees with descriptor".into()));
        }
        let mut c_in = self.arch.input_channels;
        for (i, s) in self.arch.stages.iter().enumerate() {
            if self.kernels[i].shape() != [s.out_channels, c_in, s.kernel, s.kernel]
                || self.biases[i].shape() != [s.out_channels]
            {
                return Err(Error::Malformed(format!("stage {i} parameter shapes disagree")));
            }
            c_in = s.out_channels;
        }
        if self.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::Malformed("non-finite backbone parameter".into()));
        }
        Ok(())
    }
}

/// Pixels in `[0, 1]` enter the first convolution as `(x − PIXEL_MEAN) / PIXEL_STD`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub a: Tensor,
    pub source_id: Option<usize>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    /// `acts[0]` is the standardized input, `acts[i+1]` the relu output of stage `i`.
    acts: Vec<Tensor>,
    pres: Vec<Tensor>,
    z: Tensor,
}

impl BackboneTrace {
    pub fn feature_map(&self) -> &Tensor {
        self.acts.last().unwrap()
    }

    pub fn embedding(&self) -> &Tensor {
        &self.z
    }

    pub fn stage_output(&self, stage: usize) -> &Tensor {
        &self.acts[stage + 1]
    }

    /// Backpropagates `dL/dz` into the parameter gradients (and the input's,
    /// if it requires grad). Returns the input tensor.
    pub fn backward(mut self, params: &mut BackboneParams, upstream_z: &[f64]) -> Result<Tensor> {
        let last = self.acts.len() - 1;
        self.acts[last].enable_grad();
        ops::global_avg_pool_backward(&mut self.acts[last], upstream_z)?;
        for i in (0..self.pres.len()).rev() {
            let up = self.acts[i + 1].grad().unwrap().to_vec();
            self.pres[i].enable_grad();
            ops::relu_backward(&mut self.pres[i], &up)?;
            let up = self.pres[i].grad().unwrap().to_vec();
            ops::add_channel_bias_backward(&mut params.biases[i], &up)?;
            if i > 0 {
                self.acts[i].enable_grad();
            }
            let spec = &params.arch.stages[i];
            let (stride, pad) = (spec.stride, spec.pad);
            ops::conv2d_backward(&mut self.acts[i], &mut params.kernels[i], stride, pad, &up)?;
        }
        let mut x = self.acts.swap_remove(0);
        x.data_mut().iter_mut().for_each(|v| *v = *v * PIXEL_STD + PIXEL_MEAN);
        if let Some(g) = x.grad_mut() {
            g.iter_mut().for_each(|v| *v /= PIXEL_STD);
        }
        Ok(x)
    }
}

/// Forward pass keeping a trace. Enable grad on `x` first to get its gradient.
pub fn forward(x: Tensor, params: &BackboneParams) -> Result<BackboneTrace> {
    let a = &params.arch;
    if x.shape() != [a.input_channels, a.input_height, a.input_width] {
        return Err(Error::dim(format!(
            "backbone expects input {:?}, got {:?}",
            [a.input_channels, a.input_height, a.input_width],
            x.shape()
        )));
    }
    let mut x = x;
    x.data_mut().iter_mut().for_each(|v| *v = (*v - PIXEL_MEAN) / PIXEL_STD);
    let mut acts = vec![x];
    let mut pres = Vec::with_capacity(a.stages.len());
    for (i, s) in a.stages.iter().enumerate() {
        let mut pre = ops::conv2d(acts.last().unwrap(), &params.kernels[i], s.stride, s.pad)?;
        ops::add_channel_bias(&mut pre, &params.biases[i])?;
        acts.push(ops::relu_act(&pre));
        pres.push(pre);
    }
    let z = ops::global_avg_pool(acts.last().unwrap())?;
    Ok(BackboneTrace { acts, pres, z })
}

/// Feature map `A` and embedding `z = GAP(A)` for one image.
pub fn extract(x: &Tensor, params: &BackboneParams) -> Result<(FeatureMap, Tensor)> {
    let trace = forward(x.clone(), params)?;
    let z = trace.z.clone();
    let a = trace.acts.into_iter().last().unwrap();
    Ok((FeatureMap { a, source_id: None }, z))
}
