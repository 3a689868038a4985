//! Tensor kernels: sparse 3D convolution (submanifold and strided), dense 2D
//! convolution, transposed convolution, bilinear upsampling, and naive dense
//! oracles used to cross-check the sparse paths.
//!
//! Every kernel is bit-deterministic: accumulation runs in f32 with a fixed
//! kernel-offset order (lexicographic), and parallelism only splits
//! independent output rows/channels, so results do not depend on the worker
//! count.

use thiserror::Error;

pub mod dense;
pub mod oracle;
pub mod sparse;

pub use dense::{bilinear_upsample2x, conv2d, transposed_conv2d, DenseTensor2D};
pub use oracle::{dense_conv3d_oracle, dense_conv3d_oracle_counted, Dense4};
pub use sparse::{sparse_conv3d, SparseTensor3D};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("channel mismatch: layer expects {expected} input channels, tensor has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("submanifold convolution requires an odd cubic kernel, got {0:?}")]
    SubmanifoldEvenKernel([usize; 3]),
    #[error("submanifold convolution requires stride 1, got {0}")]
    SubmanifoldStride(usize),
    #[error("submanifold convolution requires same-padding {expected}, got {got}")]
    SubmanifoldPadding { expected: usize, got: usize },
    #[error("transposed convolution requires kernel == stride and zero padding")]
    TransposedShape,
    #[error("kernel called with wrong mode: expected {expected}, got {got}")]
    WrongMode {
        expected: &'static str,
        got: &'static str,
    },
    #[error("weight buffer has {got} values, expected {expected}")]
    WeightSize { expected: usize, got: usize },
    #[error("{name} vector has {got} values, expected {expected}")]
    VectorSize {
        name: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("kernel dimensionality does not match the tensor (2d vs 3d)")]
    Dimensionality,
}

/// How a convolution treats its input lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Sparse 3D, output active set equals the input active set.
    Submanifold,
    /// Sparse 3D with stride; an output site is active when any active
    /// input site falls inside its receptive field.
    StridedSparse,
    /// Dense 2D cross-correlation with zero padding.
    Dense,
    /// Dense 2D transposed convolution with kernel == stride (block scatter).
    Transposed,
}

impl ConvMode {
    fn name(self) -> &'static str {
        match self {
            ConvMode::Submanifold => "submanifold",
            ConvMode::StridedSparse => "strided-sparse",
            ConvMode::Dense => "dense",
            ConvMode::Transposed => "transposed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

/// Per-channel inference-time affine; running statistics are assumed
/// pre-folded into (scale, shift).
#[derive(Debug, Clone, PartialEq)]
pub struct NormAffine {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl NormAffine {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
        }
    }
}

/// Kernel spatial extents: (kx, ky, kz) for 3D, (kh, kw) for 2D.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelShape {
    Spatial3d([usize; 3]),
    Spatial2d([usize; 2]),
}

impl KernelShape {
    pub fn volume(&self) -> usize {
        match self {
            KernelShape::Spatial3d(k) => k[0] * k[1] * k[2],
            KernelShape::Spatial2d(k) => k[0] * k[1],
        }
    }
}

/// One convolution layer: geometry, weights, and the post-ops applied in
/// the fixed order conv -> bias -> norm -> activation.
///
/// Weights are stored as `[offset][ci][co]`, offsets ordered
/// lexicographically by (kz, ky, kx) in 3D and (kh, kw) in 2D; that order is
/// also the accumulation order, which pins the floating-point result.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernel: KernelShape,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub mode: ConvMode,
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    pub norm: Option<NormAffine>,
    pub activation: Activation,
}

impl ConvParams {
    pub fn validate(&self) -> Result<(), KernelError> {
        let expected = self.kernel.volume() * self.in_channels * self.out_channels;
        if self.weights.len() != expected {
            return Err(KernelError::WeightSize {
                expected,
                got: self.weights.len(),
            });
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels {
                return Err(KernelError::VectorSize {
                    name: "bias",
                    expected: self.out_channels,
                    got: b.len(),
                });
            }
        }
        if let Some(n) = &self.norm {
            for (name, v) in [("norm scale", &n.scale), ("norm shift", &n.shift)] {
                if v.len() != self.out_channels {
                    return Err(KernelError::VectorSize {
                        name: if name == "norm scale" {
                            "norm scale"
                        } else {
                            "norm shift"
                        },
                        expected: self.out_channels,
                        got: v.len(),
                    });
                }
            }
        }
        match self.mode {
            ConvMode::Submanifold => {
                let k = match self.kernel {
                    KernelShape::Spatial3d(k) => k,
                    KernelShape::Spatial2d(_) => return Err(KernelError::Dimensionality),
                };
                if k[0] % 2 == 0 || k[1] % 2 == 0 || k[2] % 2 == 0 || k[0] != k[1] || k[1] != k[2]
                {
                    return Err(KernelError::SubmanifoldEvenKernel(k));
                }
                if self.stride != 1 {
                    return Err(KernelError::SubmanifoldStride(self.stride));
                }
                let same_pad = (k[0] - 1) / 2;
                if self.padding != same_pad {
                    return Err(KernelError::SubmanifoldPadding {
                        expected: same_pad,
                        got: self.padding,
                    });
                }
            }
            ConvMode::StridedSparse => {
                if matches!(self.kernel, KernelShape::Spatial2d(_)) {
                    return Err(KernelError::Dimensionality);
                }
            }
            ConvMode::Dense => {
                if matches!(self.kernel, KernelShape::Spatial3d(_)) {
                    return Err(KernelError::Dimensionality);
                }
            }
            ConvMode::Transposed => {
                let k = match self.kernel {
                    KernelShape::Spatial2d(k) => k,
                    KernelShape::Spatial3d(_) => return Err(KernelError::Dimensionality),
                };
                if k[0] != self.stride || k[1] != self.stride || self.padding != 0 {
                    return Err(KernelError::TransposedShape);
                }
            }
        }
        Ok(())
    }

    pub fn expect_mode(&self, expected: ConvMode) -> Result<(), KernelError> {
        if self.mode != expected
            && !(expected == ConvMode::Submanifold && self.mode == ConvMode::StridedSparse)
        {
            return Err(KernelError::WrongMode {
                expected: expected.name(),
                got: self.mode.name(),
            });
        }
        Ok(())
    }

    /// Learnable scalar count: weights + bias + norm affine.
    pub fn param_count(&self) -> u64 {
        let mut n = self.weights.len() as u64;
        if self.bias.is_some() {
            n += self.out_channels as u64;
        }
        if self.norm.is_some() {
            n += 2 * self.out_channels as u64;
        }
        n
    }

    /// Applies bias, norm affine, and activation for output channel `co`.
    #[inline]
    pub fn finish(&self, v: f32, co: usize) -> f32 {
        let mut v = v;
        if let Some(b) = &self.bias {
            v += b[co];
        }
        if let Some(n) = &self.norm {
            v = v * n.scale[co] + n.shift[co];
        }
        match self.activation {
            Activation::None => v,
            Activation::Relu => v.max(0.0),
        }
    }
}

/// Dense output extent of a zero-padded cross-correlation along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}
