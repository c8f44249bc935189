//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Layout is fixed everywhere: the shape lists the channel axis last for
//! volumetric data (`[W, H, L, C]`, optionally `[W, H, L, C, N]` with a
//! trailing batch axis) and the first listed axis varies fastest in memory.
//! Each channel is therefore a contiguous 3D plane and each batch sample a
//! contiguous block, which is what the convolution kernels and the batch
//! concat/split operations rely on.

mod graph;
mod kernels;
mod optim;

pub use graph::{Graph, Var};
pub use optim::{sgd_momentum_step, SgdMomentum};

use crate::error::{OmError, Result};

pub const MAX_ORDER: usize = 5;

/// Dense N-dimensional 32-bit float array, the universal numeric carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

pub fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_ORDER {
            return Err(OmError::InvalidArgument {
                op: "tensor",
                msg: format!("order must be 1..={MAX_ORDER}, got {}", shape.len()),
            });
        }
        if element_count(shape) != data.len() {
            return Err(OmError::InvalidArgument {
                op: "tensor",
                msg: format!(
                    "shape {:?} implies {} elements, data has {}",
                    shape,
                    element_count(shape),
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; element_count(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::filled(&[1], value)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Flat offset of a multi-index; axis 0 varies fastest.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for (i, &d) in self.shape.iter().enumerate() {
            debug_assert!(idx[i] < d);
            off += idx[i] * stride;
            stride *= d;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f32 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f32) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    /// Interpret as a (possibly batched) volume: `([W,H,L], channels, batch)`.
    /// A 4D tensor is a single sample (batch = 1).
    pub fn as_volume(&self) -> Result<VolumeDims> {
        match self.shape.len() {
            4 => Ok(VolumeDims {
                spatial: [self.shape[0], self.shape[1], self.shape[2]],
                channels: self.shape[3],
                batch: 1,
                batched: false,
            }),
            5 => Ok(VolumeDims {
                spatial: [self.shape[0], self.shape[1], self.shape[2]],
                channels: self.shape[3],
                batch: self.shape[4],
                batched: true,
            }),
            n => Err(OmError::InvalidArgument {
                op: "as_volume",
                msg: format!("expected 4D or 5D tensor, got order {n}"),
            }),
        }
    }

    pub fn assert_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(OmError::NonFinite { op })
        }
    }
}

/// Shape summary of a 4D/5D tensor in the fixed volume layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeDims {
    pub spatial: [usize; 3],
    pub channels: usize,
    pub batch: usize,
    pub batched: bool,
}

impl VolumeDims {
    pub fn voxels(&self) -> usize {
        self.spatial[0] * self.spatial[1] * self.spatial[2]
    }

    pub fn sample_len(&self) -> usize {
        self.voxels() * self.channels
    }

    /// Shape with the channel count replaced, preserving batchedness.
    pub fn with_channels(&self, channels: usize) -> Vec<usize> {
        let mut s = vec![self.spatial[0], self.spatial[1], self.spatial[2], channels];
        if self.batched {
            s.push(self.batch);
        }
        s
    }
}
