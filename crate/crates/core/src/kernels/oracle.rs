//! Naive dense reference implementations used to cross-check the sparse and
//! vectorized paths. Straight loops, no sparsity logic, no shortcuts.

use super::{ConvParams, KernelError, KernelShape};

/// Dense 4D array, C x Z x Y x X row-major. `dims` is (X, Y, Z).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense4 {
    pub channels: usize,
    pub dims: [usize; 3],
    pub values: Vec<f32>,
}

impl Dense4 {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            values: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.values[((c * self.dims[2] + z) * self.dims[1] + y) * self.dims[0] + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, z: usize, y: usize, x: usize, v: f32) {
        self.values[((c * self.dims[2] + z) * self.dims[1] + y) * self.dims[0] + x] = v;
    }
}

/// Textbook zero-padded cross-correlation over a dense 3D volume.
pub fn dense_conv3d_oracle(input: &Dense4, p: &ConvParams) -> Result<Dense4, KernelError> {
    dense_conv3d_oracle_counted(input, p).map(|(out, _)| out)
}

/// As `dense_conv3d_oracle`, also returning the multiply-accumulate count.
/// The input is materialized with explicit zero padding first, so every
/// kernel tap is a real multiply and the count equals
/// `kernel_volume * Cin * Cout * output_sites`.
pub fn dense_conv3d_oracle_counted(
    input: &Dense4,
    p: &ConvParams,
) -> Result<(Dense4, u64), KernelError> {
    if p.in_channels != input.channels {
        return Err(KernelError::ChannelMismatch {
            expected: p.in_channels,
            got: input.channels,
        });
    }
    let kernel = match p.kernel {
        KernelShape::Spatial3d(k) => k,
        KernelShape::Spatial2d(_) => return Err(KernelError::Dimensionality),
    };
    let pad = p.padding;
    let stride = p.stride;
    let padded_dims = [
        input.dims[0] + 2 * pad,
        input.dims[1] + 2 * pad,
        input.dims[2] + 2 * pad,
    ];
    let mut padded = Dense4::zeros(input.channels, padded_dims);
    for c in 0..input.channels {
        for z in 0..input.dims[2] {
            for y in 0..input.dims[1] {
                for x in 0..input.dims[0] {
                    padded.set(c, z + pad, y + pad, x + pad, input.get(c, z, y, x));
                }
            }
        }
    }

    let out_dims = [
        super::conv_out_dim(input.dims[0], kernel[0], stride, pad),
        super::conv_out_dim(input.dims[1], kernel[1], stride, pad),
        super::conv_out_dim(input.dims[2], kernel[2], stride, pad),
    ];
    let cin = p.in_channels;
    let cout = p.out_channels;
    let mut out = Dense4::zeros(cout, out_dims);
    let mut macs = 0u64;
    for co in 0..cout {
        for oz in 0..out_dims[2] {
            for oy in 0..out_dims[1] {
                for ox in 0..out_dims[0] {
                    let mut acc = 0.0f32;
                    let mut offset = 0usize;
                    for kz in 0..kernel[2] {
                        for ky in 0..kernel[1] {
                            for kx in 0..kernel[0] {
                                let block = offset * cin * cout;
                                for ci in 0..cin {
                                    let v = padded.get(
                                        ci,
                                        oz * stride + kz,
                                        oy * stride + ky,
                                        ox * stride + kx,
                                    );
                                    acc += v * p.weights[block + ci * cout + co];
                                    macs += 1;
                                }
                                offset += 1;
                            }
                        }
                    }
                    out.set(co, oz, oy, ox, p.finish(acc, co));
                }
            }
        }
    }
    Ok((out, macs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{Activation, ConvMode};

    fn params3d(kernel: usize, stride: usize, padding: usize, cin: usize, cout: usize) -> ConvParams {
        ConvParams {
            kernel: KernelShape::Spatial3d([kernel; 3]),
            stride,
            padding,
            in_channels: cin,
            out_channels: cout,
            mode: ConvMode::StridedSparse,
            weights: vec![0.0; kernel * kernel * kernel * cin * cout],
            bias: None,
            norm: None,
            activation: Activation::None,
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut input = Dense4::zeros(2, [4, 3, 2]);
        for (i, v) in input.values.iter_mut().enumerate() {
            *v = i as f32 * 0.5 - 3.0;
        }
        let mut p = params3d(1, 1, 0, 2, 2);
        p.weights = vec![1.0, 0.0, 0.0, 1.0];
        let out = dense_conv3d_oracle(&input, &p).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn impulse_response_of_ones_kernel() {
        // Single-channel impulse in the interior; an all-ones 3x3x3 kernel
        // spreads it into a 3x3x3 block of ones.
        let mut input = Dense4::zeros(1, [5, 5, 5]);
        input.set(0, 2, 2, 2, 1.0);
        let mut p = params3d(3, 1, 1, 1, 1);
        p.weights = vec![1.0; 27];
        let out = dense_conv3d_oracle(&input, &p).unwrap();
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    let expect = if (1..=3).contains(&z) && (1..=3).contains(&y) && (1..=3).contains(&x)
                    {
                        1.0
                    } else {
                        0.0
                    };
                    assert_eq!(out.get(0, z, y, x), expect, "at {z},{y},{x}");
                }
            }
        }
    }

    #[test]
    fn mac_counter_matches_formula() {
        let input = Dense4::zeros(3, [6, 6, 6]);
        let p = params3d(3, 2, 1, 3, 4);
        let (out, macs) = dense_conv3d_oracle_counted(&input, &p).unwrap();
        assert_eq!(out.dims, [3, 3, 3]);
        let expect = 27u64 * 3 * 4 * (3 * 3 * 3);
        assert_eq!(macs, expect);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let input = Dense4::zeros(2, [3, 3, 3]);
        let p = params3d(1, 1, 0, 3, 1);
        assert!(dense_conv3d_oracle(&input, &p).is_err());
    }
}
