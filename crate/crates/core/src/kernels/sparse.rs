//! Sparse 3D tensors and sparse convolution.

use rayon::prelude::*;

use super::{ConvMode, ConvParams, KernelError, KernelShape};
use crate::kernels::oracle::Dense4;

/// Coordinate-list 3D tensor. Active sites are (ix, iy, iz) triples sorted
/// lexicographically by (iz, iy, ix); `features` is the row-aligned N x C
/// matrix. The sorted form is canonical: equality is defined on it.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor3D {
    dims: [usize; 3],
    channels: usize,
    coords: Vec<[u32; 3]>,
    features: Vec<f32>,
}

impl SparseTensor3D {
    pub fn empty(dims: [usize; 3], channels: usize) -> Self {
        Self {
            dims,
            channels,
            coords: Vec::new(),
            features: Vec::new(),
        }
    }

    /// Builds a tensor from unsorted rows, sorting into canonical order.
    /// Coordinates must be unique and in bounds.
    pub fn from_rows(
        dims: [usize; 3],
        channels: usize,
        coords: Vec<[u32; 3]>,
        features: Vec<f32>,
    ) -> Self {
        assert_eq!(coords.len() * channels, features.len(), "row mismatch");
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_unstable_by_key(|&i| {
            let c = coords[i];
            (c[2], c[1], c[0])
        });
        let mut sorted_coords = Vec::with_capacity(coords.len());
        let mut sorted_features = Vec::with_capacity(features.len());
        for &i in &order {
            let c = coords[i];
            debug_assert!(
                (c[0] as usize) < dims[0] && (c[1] as usize) < dims[1] && (c[2] as usize) < dims[2],
                "active coordinate out of bounds"
            );
            sorted_coords.push(c);
            sorted_features.extend_from_slice(&features[i * channels..(i + 1) * channels]);
        }
        debug_assert!(
            sorted_coords.windows(2).all(|w| {
                let k = |c: &[u32; 3]| (c[2], c[1], c[0]);
                k(&w[0]) < k(&w[1])
            }),
            "duplicate active coordinates"
        );
        Self {
            dims,
            channels,
            coords: sorted_coords,
            features: sorted_features,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[u32; 3]] {
        &self.coords
    }

    pub fn feature(&self, row: usize) -> &[f32] {
        &self.features[row * self.channels..(row + 1) * self.channels]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    /// Dense C x Z x Y x X copy; inactive sites are exactly zero.
    pub fn to_dense(&self) -> Dense4 {
        let [x, y, z] = self.dims;
        let mut out = Dense4::zeros(self.channels, self.dims);
        for (row, c) in self.coords.iter().enumerate() {
            let f = self.feature(row);
            for (ch, &v) in f.iter().enumerate() {
                let idx = ((ch * z + c[2] as usize) * y + c[1] as usize) * x + c[0] as usize;
                out.values[idx] = v;
            }
        }
        out
    }

    /// Inverse of `to_dense` for tensors with no all-zero feature rows:
    /// keeps every site whose feature vector has any nonzero component.
    pub fn from_dense(d: &Dense4) -> Self {
        let [x, y, z] = d.dims;
        let c = d.channels;
        let mut coords = Vec::new();
        let mut features = Vec::new();
        for iz in 0..z {
            for iy in 0..y {
                for ix in 0..x {
                    let mut row = vec![0.0f32; c];
                    let mut nonzero = false;
                    for ch in 0..c {
                        let v = d.values[((ch * z + iz) * y + iy) * x + ix];
                        nonzero |= v != 0.0;
                        row[ch] = v;
                    }
                    if nonzero {
                        coords.push([ix as u32, iy as u32, iz as u32]);
                        features.extend_from_slice(&row);
                    }
                }
            }
        }
        Self {
            dims: d.dims,
            channels: c,
            coords,
            features,
        }
    }
}

/// Adds two tensors with identical active sets and applies relu; used by
/// residual blocks, whose submanifold branches preserve the active set.
pub fn residual_add_relu(x: &SparseTensor3D, skip: &SparseTensor3D) -> SparseTensor3D {
    assert_eq!(x.dims, skip.dims);
    assert_eq!(x.channels, skip.channels);
    assert_eq!(x.coords, skip.coords, "residual branches must share sites");
    let features = x
        .features
        .iter()
        .zip(&skip.features)
        .map(|(a, b)| (a + b).max(0.0))
        .collect();
    SparseTensor3D {
        dims: x.dims,
        channels: x.channels,
        coords: x.coords.clone(),
        features,
    }
}

// Coordinate -> row lookup. Small volumes use a flat table; large ones fall
// back to a hash map.
enum CoordIndex {
    Table { x: usize, y: usize, table: Vec<i32> },
    Map(std::collections::HashMap<[u32; 3], u32>),
}

const DENSE_INDEX_LIMIT: usize = 1 << 25;

impl CoordIndex {
    fn build(dims: [usize; 3], coords: &[[u32; 3]]) -> Self {
        let volume = dims[0] * dims[1] * dims[2];
        if volume <= DENSE_INDEX_LIMIT {
            let mut table = vec![-1i32; volume];
            for (row, c) in coords.iter().enumerate() {
                let idx = (c[2] as usize * dims[1] + c[1] as usize) * dims[0] + c[0] as usize;
                table[idx] = row as i32;
            }
            CoordIndex::Table {
                x: dims[0],
                y: dims[1],
                table,
            }
        } else {
            let map = coords
                .iter()
                .enumerate()
                .map(|(row, c)| (*c, row as u32))
                .collect();
            CoordIndex::Map(map)
        }
    }

    #[inline]
    fn get(&self, ix: usize, iy: usize, iz: usize) -> Option<usize> {
        match self {
            CoordIndex::Table { x, y, table } => {
                let row = table[(iz * y + iy) * x + ix];
                (row >= 0).then_some(row as usize)
            }
            CoordIndex::Map(map) => map
                .get(&[ix as u32, iy as u32, iz as u32])
                .map(|&r| r as usize),
        }
    }
}

/// Sparse 3D convolution, submanifold or strided.
pub fn sparse_conv3d(input: &SparseTensor3D, p: &ConvParams) -> Result<SparseTensor3D, KernelError> {
    sparse_conv3d_counted(input, p).map(|(t, _)| t)
}

/// As `sparse_conv3d`, additionally returning the multiply-accumulate count
/// actually performed (`gather hits * Cin * Cout`).
pub fn sparse_conv3d_counted(
    input: &SparseTensor3D,
    p: &ConvParams,
) -> Result<(SparseTensor3D, u64), KernelError> {
    p.validate()?;
    if !matches!(p.mode, ConvMode::Submanifold | ConvMode::StridedSparse) {
        return Err(KernelError::WrongMode {
            expected: "submanifold or strided-sparse",
            got: match p.mode {
                ConvMode::Dense => "dense",
                ConvMode::Transposed => "transposed",
                _ => unreachable!(),
            },
        });
    }
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

    let (out_dims, out_coords) = match p.mode {
        ConvMode::Submanifold => (input.dims, input.coords.clone()),
        _ => strided_output_sites(input, kernel, p.stride, p.padding),
    };

    // Kernel offsets in lexicographic (kz, ky, kx) order, matching the
    // weight layout; `delta = k - padding` so src = out * stride + delta.
    let pad = p.padding as i64;
    let stride = p.stride as i64;
    let mut deltas = Vec::with_capacity(kernel[0] * kernel[1] * kernel[2]);
    for kz in 0..kernel[2] as i64 {
        for ky in 0..kernel[1] as i64 {
            for kx in 0..kernel[0] as i64 {
                deltas.push([kx - pad, ky - pad, kz - pad]);
            }
        }
    }

    let index = CoordIndex::build(input.dims, &input.coords);
    let cin = p.in_channels;
    let cout = p.out_channels;
    let in_dims = input.dims;
    let mut out_features = vec![0.0f32; out_coords.len() * cout];

    let hits: u64 = out_features
        .par_chunks_mut(cout)
        .zip(out_coords.par_iter())
        .map(|(acc, site)| {
            let base = [
                site[0] as i64 * stride,
                site[1] as i64 * stride,
                site[2] as i64 * stride,
            ];
            let mut local_hits = 0u64;
            for (o, d) in deltas.iter().enumerate() {
                let sx = base[0] + d[0];
                let sy = base[1] + d[1];
                let sz = base[2] + d[2];
                if sx < 0
                    || sy < 0
                    || sz < 0
                    || sx >= in_dims[0] as i64
                    || sy >= in_dims[1] as i64
                    || sz >= in_dims[2] as i64
                {
                    continue;
                }
                if let Some(row) = index.get(sx as usize, sy as usize, sz as usize) {
                    local_hits += 1;
                    let f = &input.features[row * cin..(row + 1) * cin];
                    let block = &p.weights[o * cin * cout..(o + 1) * cin * cout];
                    for (ci, &fv) in f.iter().enumerate() {
                        let wrow = &block[ci * cout..(ci + 1) * cout];
                        for (a, &w) in acc.iter_mut().zip(wrow) {
                            *a += fv * w;
                        }
                    }
                }
            }
            for (co, a) in acc.iter_mut().enumerate() {
                *a = p.finish(*a, co);
            }
            local_hits
        })
        .sum();

    debug_assert!(out_features.iter().all(|v| v.is_finite()));
    let out = SparseTensor3D {
        dims: out_dims,
        channels: cout,
        coords: out_coords,
        features: out_features,
    };
    Ok((out, hits * cin as u64 * cout as u64))
}

// Output dims and active sites of a strided sparse convolution: a site is
// active when at least one active input falls inside its receptive field.
fn strided_output_sites(
    input: &SparseTensor3D,
    kernel: [usize; 3],
    stride: usize,
    padding: usize,
) -> ([usize; 3], Vec<[u32; 3]>) {
    let out_dims = [
        super::conv_out_dim(input.dims[0], kernel[0], stride, padding),
        super::conv_out_dim(input.dims[1], kernel[1], stride, padding),
        super::conv_out_dim(input.dims[2], kernel[2], stride, padding),
    ];
    let s = stride as i64;
    let p = padding as i64;
    // Output positions receiving input i along one axis:
    // o*s - p <= i <= o*s - p + k - 1  =>  ceil((i+p-k+1)/s) <= o <= (i+p)/s.
    let axis_range = |i: i64, k: i64, dim: usize| {
        let lo = (i + p - k + 1).div_euclid(s) + i64::from((i + p - k + 1).rem_euclid(s) != 0);
        let hi = (i + p).div_euclid(s);
        (lo.max(0), hi.min(dim as i64 - 1))
    };
    let mut candidates = Vec::new();
    for c in &input.coords {
        let (xlo, xhi) = axis_range(c[0] as i64, kernel[0] as i64, out_dims[0]);
        let (ylo, yhi) = axis_range(c[1] as i64, kernel[1] as i64, out_dims[1]);
        let (zlo, zhi) = axis_range(c[2] as i64, kernel[2] as i64, out_dims[2]);
        for oz in zlo..=zhi {
            for oy in ylo..=yhi {
                for ox in xlo..=xhi {
                    candidates.push([ox as u32, oy as u32, oz as u32]);
                }
            }
        }
    }
    candidates.sort_unstable_by_key(|c| (c[2], c[1], c[0]));
    candidates.dedup();
    (out_dims, candidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{Activation, NormAffine};
    use crate::rng::Xoshiro256StarStar;

    fn subm_params(kernel: usize, cin: usize, cout: usize, weights: Vec<f32>) -> ConvParams {
        ConvParams {
            kernel: KernelShape::Spatial3d([kernel; 3]),
            stride: 1,
            padding: (kernel - 1) / 2,
            in_channels: cin,
            out_channels: cout,
            mode: ConvMode::Submanifold,
            weights,
            bias: None,
            norm: None,
            activation: Activation::None,
        }
    }

    fn random_tensor(
        rng: &mut Xoshiro256StarStar,
        dims: [usize; 3],
        channels: usize,
        occupancy: f64,
    ) -> SparseTensor3D {
        let mut coords = Vec::new();
        let mut features = Vec::new();
        for iz in 0..dims[2] {
            for iy in 0..dims[1] {
                for ix in 0..dims[0] {
                    if rng.next_f64() < occupancy {
                        coords.push([ix as u32, iy as u32, iz as u32]);
                        for _ in 0..channels {
                            features.push(rng.uniform_f32(-1.0, 1.0));
                        }
                    }
                }
            }
        }
        SparseTensor3D::from_rows(dims, channels, coords, features)
    }

    #[test]
    fn identity_kernel_preserves_features() {
        let mut rng = Xoshiro256StarStar::new(5);
        let x = random_tensor(&mut rng, [6, 5, 4], 3, 0.3);
        let mut weights = vec![0.0f32; 9];
        for c in 0..3 {
            weights[c * 3 + c] = 1.0;
        }
        let p = subm_params(1, 3, 3, weights);
        let y = sparse_conv3d(&x, &p).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn isolated_site_sees_only_center_tap() {
        let mut rng = Xoshiro256StarStar::new(8);
        let cin = 2;
        let cout = 3;
        let volume = 27;
        let weights: Vec<f32> = (0..volume * cin * cout)
            .map(|_| rng.uniform_f32(-1.0, 1.0))
            .collect();
        let bias = vec![0.5f32, -0.25, 0.125];
        let mut p = subm_params(3, cin, cout, weights);
        p.bias = Some(bias.clone());

        let feature = vec![0.7f32, -1.2];
        let x = SparseTensor3D::from_rows([5, 5, 5], cin, vec![[2, 2, 2]], feature.clone());
        let y = sparse_conv3d(&x, &p).unwrap();
        assert_eq!(y.coords(), &[[2, 2, 2]]);

        // Center offset in lexicographic (kz, ky, kx) order is index 13.
        let center = 13;
        let block = &p.weights[center * cin * cout..(center + 1) * cin * cout];
        for co in 0..cout {
            let expect: f32 =
                (0..cin).map(|ci| feature[ci] * block[ci * cout + co]).sum::<f32>() + bias[co];
            assert!((y.feature(0)[co] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn submanifold_preserves_active_set() {
        let mut rng = Xoshiro256StarStar::new(17);
        for _ in 0..20 {
            let x = random_tensor(&mut rng, [8, 7, 6], 4, 0.15);
            let weights: Vec<f32> = (0..27 * 16).map(|_| rng.uniform_f32(-1.0, 1.0)).collect();
            let p = subm_params(3, 4, 4, weights);
            let y = sparse_conv3d(&x, &p).unwrap();
            assert_eq!(x.coords(), y.coords());
        }
    }

    #[test]
    fn to_dense_roundtrip() {
        let mut rng = Xoshiro256StarStar::new(23);
        let x = random_tensor(&mut rng, [5, 4, 6], 3, 0.25);
        let d = x.to_dense();
        let back = SparseTensor3D::from_dense(&d);
        assert_eq!(x, back);
    }

    #[test]
    fn to_dense_empty_and_single() {
        let empty = SparseTensor3D::empty([3, 3, 3], 2);
        assert!(empty.to_dense().values.iter().all(|&v| v == 0.0));

        let single =
            SparseTensor3D::from_rows([3, 3, 3], 2, vec![[1, 2, 0]], vec![5.0, -1.0]);
        let d = single.to_dense();
        let nonzero = d.values.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 2);
        // Site (ix=1, iy=2, iz=0) lands at dense (c, z=0, y=2, x=1).
        assert_eq!(d.get(0, 0, 2, 1), 5.0);
        assert_eq!(d.get(1, 0, 2, 1), -1.0);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = SparseTensor3D::empty([4, 4, 4], 3);
        let p = subm_params(1, 2, 2, vec![0.0; 4]);
        assert!(matches!(
            sparse_conv3d(&x, &p),
            Err(KernelError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn even_kernel_rejected_in_submanifold() {
        let mut p = subm_params(3, 1, 1, vec![0.0; 27]);
        p.kernel = KernelShape::Spatial3d([2, 2, 2]);
        p.weights = vec![0.0; 8];
        p.padding = 0;
        assert!(matches!(
            p.validate(),
            Err(KernelError::SubmanifoldEvenKernel(_))
        ));
    }

    #[test]
    fn linearity_without_postops() {
        let mut rng = Xoshiro256StarStar::new(31);
        let dims = [6, 6, 5];
        for _ in 0..10 {
            let xa = random_tensor(&mut rng, dims, 3, 0.2);
            // Same active set, different features.
            let features_b: Vec<f32> =
                (0..xa.len() * 3).map(|_| rng.uniform_f32(-1.0, 1.0)).collect();
            let xb = SparseTensor3D::from_rows(dims, 3, xa.coords().to_vec(), features_b);
            let weights: Vec<f32> = (0..27 * 9).map(|_| rng.uniform_f32(-1.0, 1.0)).collect();
            let p = subm_params(3, 3, 3, weights);

            let a = 0.75f32;
            let b = -1.5f32;
            let combo_features: Vec<f32> = xa
                .features()
                .iter()
                .zip(xb.features())
                .map(|(u, v)| a * u + b * v)
                .collect();
            let combo = SparseTensor3D::from_rows(dims, 3, xa.coords().to_vec(), combo_features);

            let ya = sparse_conv3d(&xa, &p).unwrap();
            let yb = sparse_conv3d(&xb, &p).unwrap();
            let yc = sparse_conv3d(&combo, &p).unwrap();
            for ((u, v), w) in ya.features().iter().zip(yb.features()).zip(yc.features()) {
                assert!((a * u + b * v - w).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn postops_order_is_bias_norm_relu() {
        let x = SparseTensor3D::from_rows([1, 1, 1], 1, vec![[0, 0, 0]], vec![2.0]);
        let p = ConvParams {
            kernel: KernelShape::Spatial3d([1, 1, 1]),
            stride: 1,
            padding: 0,
            in_channels: 1,
            out_channels: 1,
            mode: ConvMode::Submanifold,
            weights: vec![1.0],
            bias: Some(vec![1.0]),
            norm: Some(NormAffine {
                scale: vec![-2.0],
                shift: vec![1.0],
            }),
            activation: Activation::Relu,
        };
        // conv = 2, +bias = 3, *scale+shift = -5, relu = 0.
        let y = sparse_conv3d(&x, &p).unwrap();
        assert_eq!(y.feature(0)[0], 0.0);
    }

    #[test]
    fn residual_add_is_identity_on_zero_branch() {
        let mut rng = Xoshiro256StarStar::new(40);
        let x = random_tensor(&mut rng, [4, 4, 4], 2, 0.4);
        // Inputs are post-relu in real networks, so keep them non-negative.
        let nonneg = SparseTensor3D::from_rows(
            x.dims(),
            2,
            x.coords().to_vec(),
            x.features().iter().map(|v| v.abs()).collect(),
        );
        let zero_branch = SparseTensor3D::from_rows(
            x.dims(),
            2,
            x.coords().to_vec(),
            vec![0.0; x.len() * 2],
        );
        let y = residual_add_relu(&zero_branch, &nonneg);
        assert_eq!(y, nonneg);
    }
}
