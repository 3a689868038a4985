//! Dense 2D tensors and the kernels of the BEV backbone: convolution,
//! transposed convolution, and bilinear upsampling.

use rayon::prelude::*;

use super::{conv_out_dim, ConvMode, ConvParams, KernelError, KernelShape};

/// Dense C x H x W tensor of f32, row-major (c, then h, then w).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor2D {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl DenseTensor2D {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.values[c * hw..(c + 1) * hw]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.values[(c * self.height + y) * self.width + x] = v;
    }

    pub fn elements(&self) -> usize {
        self.values.len()
    }

    /// Channel-wise concatenation; all inputs must share H and W.
    pub fn concat_channels(parts: &[&DenseTensor2D]) -> DenseTensor2D {
        assert!(!parts.is_empty());
        let height = parts[0].height;
        let width = parts[0].width;
        assert!(parts.iter().all(|p| p.height == height && p.width == width));
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut values = Vec::with_capacity(channels * height * width);
        for p in parts {
            values.extend_from_slice(&p.values);
        }
        DenseTensor2D {
            channels,
            height,
            width,
            values,
        }
    }
}

/// Elementwise `relu(x + skip)`; residual blocks in the 2D backbone.
pub fn residual_add_relu_2d(x: &DenseTensor2D, skip: &DenseTensor2D) -> DenseTensor2D {
    assert_eq!(
        (x.channels, x.height, x.width),
        (skip.channels, skip.height, skip.width)
    );
    DenseTensor2D {
        channels: x.channels,
        height: x.height,
        width: x.width,
        values: x
            .values
            .iter()
            .zip(&skip.values)
            .map(|(a, b)| (a + b).max(0.0))
            .collect(),
    }
}

/// Zero-padded dense cross-correlation.
///
/// Accumulation per output element runs over (ci, ky, kx) in that fixed
/// order; channels are computed independently, so parallelism never changes
/// the result.
pub fn conv2d(input: &DenseTensor2D, p: &ConvParams) -> Result<DenseTensor2D, KernelError> {
    p.validate()?;
    p.expect_mode(ConvMode::Dense)?;
    if p.in_channels != input.channels {
        return Err(KernelError::ChannelMismatch {
            expected: p.in_channels,
            got: input.channels,
        });
    }
    let [kh, kw] = match p.kernel {
        KernelShape::Spatial2d(k) => k,
        _ => return Err(KernelError::Dimensionality),
    };
    let (h, w) = (input.height, input.width);
    let oh = conv_out_dim(h, kh, p.stride, p.padding);
    let ow = conv_out_dim(w, kw, p.stride, p.padding);
    let cin = p.in_channels;
    let cout = p.out_channels;
    let stride = p.stride;
    let pad = p.padding as i64;

    let mut out = DenseTensor2D::zeros(cout, oh, ow);
    out.values
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(co, acc)| {
            for ci in 0..cin {
                let plane = input.plane(ci);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = p.weights[((ky * kw + kx) * cin + ci) * cout + co];
                        for oy in 0..oh {
                            let sy = (oy * stride) as i64 + ky as i64 - pad;
                            if sy < 0 || sy >= h as i64 {
                                continue;
                            }
                            let sy = sy as usize;
                            // Output x range with the source column in bounds.
                            let dx = kx as i64 - pad;
                            let ox_lo = if dx < 0 {
                                ((-dx) as usize).div_ceil(stride)
                            } else {
                                0
                            };
                            let ox_hi_excl = {
                                // ox*stride + dx <= w-1
                                let max_num = w as i64 - 1 - dx;
                                if max_num < 0 {
                                    0
                                } else {
                                    ((max_num as usize) / stride + 1).min(ow)
                                }
                            };
                            if ox_lo >= ox_hi_excl {
                                continue;
                            }
                            let row = &mut acc[oy * ow + ox_lo..oy * ow + ox_hi_excl];
                            if stride == 1 {
                                let src_start = (ox_lo as i64 + dx) as usize;
                                let src = &plane[sy * w + src_start..][..row.len()];
                                for (d, s) in row.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for (i, d) in row.iter_mut().enumerate() {
                                    let sx = ((ox_lo + i) * stride) as i64 + dx;
                                    *d += wv * plane[sy * w + sx as usize];
                                }
                            }
                        }
                    }
                }
            }
            for (i, v) in acc.iter_mut().enumerate() {
                let _ = i;
                *v = p.finish(*v, co);
            }
        });
    debug_assert!(out.values.iter().all(|v| v.is_finite()));
    Ok(out)
}

/// Transposed convolution with kernel == stride and zero padding: each input
/// cell scatters into its own stride-aligned output block, so blocks never
/// overlap and output dims are exactly `input * stride`.
pub fn transposed_conv2d(
    input: &DenseTensor2D,
    p: &ConvParams,
) -> Result<DenseTensor2D, KernelError> {
    p.validate()?;
    p.expect_mode(ConvMode::Transposed)?;
    if p.in_channels != input.channels {
        return Err(KernelError::ChannelMismatch {
            expected: p.in_channels,
            got: input.channels,
        });
    }
    let [kh, kw] = match p.kernel {
        KernelShape::Spatial2d(k) => k,
        _ => return Err(KernelError::Dimensionality),
    };
    let (h, w) = (input.height, input.width);
    let s = p.stride;
    let (oh, ow) = (h * s, w * s);
    let cin = p.in_channels;
    let cout = p.out_channels;

    let mut out = DenseTensor2D::zeros(cout, oh, ow);
    out.values
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(co, acc)| {
            for ci in 0..cin {
                let plane = input.plane(ci);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = p.weights[((ky * kw + kx) * cin + ci) * cout + co];
                        for y in 0..h {
                            let dst_row = (y * s + ky) * ow + kx;
                            let src_row = &plane[y * w..(y + 1) * w];
                            for (x, sv) in src_row.iter().enumerate() {
                                acc[dst_row + x * s] += wv * sv;
                            }
                        }
                    }
                }
            }
            for v in acc.iter_mut() {
                *v = p.finish(*v, co);
            }
        });
    debug_assert!(out.values.iter().all(|v| v.is_finite()));
    Ok(out)
}

/// Doubles H and W by bilinear interpolation, align-corners-false: source
/// coordinate `s = (t + 0.5) / 2 - 0.5`, clamped to borders.
pub fn bilinear_upsample2x(input: &DenseTensor2D) -> DenseTensor2D {
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (2 * h, 2 * w);

    let axis_taps = |n: usize, on: usize| -> Vec<(usize, usize, f32)> {
        (0..on)
            .map(|t| {
                let s = ((t as f32 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f32);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, s - i0 as f32)
            })
            .collect()
    };
    let rows = axis_taps(h, oh);
    let cols = axis_taps(w, ow);

    let mut out = DenseTensor2D::zeros(input.channels, oh, ow);
    out.values
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(c, plane_out)| {
            let plane = input.plane(c);
            for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let v00 = plane[y0 * w + x0];
                    let v01 = plane[y0 * w + x1];
                    let v10 = plane[y1 * w + x0];
                    let v11 = plane[y1 * w + x1];
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    plane_out[oy * ow + ox] = top + (bot - top) * fy;
                }
            }
        });
    out
}
