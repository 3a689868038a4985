//! Instantiates a `DetectorSpec` into executable layers with deterministic
//! synthesized weights, runs the 3D backbone -> BEV projection -> 2D
//! backbone forward pass, and records a per-layer trace.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archspec::{
    self, layer_plan, DetectorSpec, HeadKind, LayerRole, PlannedLayer, SpecError, NOMINAL_GRID_Z,
    VOXEL_FEATURE_CHANNELS,
};
use crate::heads::{RawAnchorMaps, RawCenterMaps};
use crate::kernels::sparse::residual_add_relu;
use crate::kernels::{
    conv2d, dense::residual_add_relu_2d, sparse::sparse_conv3d_counted, transposed_conv2d,
    bilinear_upsample2x, ConvMode, ConvParams, DenseTensor2D, KernelError, NormAffine,
    SparseTensor3D,
};
use crate::pointcloud::{voxelize, MetricTransform, PointCloud, VoxelGridSpec, VoxelSet};
use crate::rng::Xoshiro256StarStar;

/// One instantiated layer: its plan entry plus materialized parameters.
#[derive(Debug, Clone)]
pub struct BuiltLayer {
    pub plan: PlannedLayer,
    pub params: ConvParams,
}

/// Executable detector. Immutable after construction; forward passes on the
/// same detector may run concurrently.
#[derive(Debug, Clone)]
pub struct Detector {
    spec: DetectorSpec,
    weight_seed: u64,
    layers: Vec<BuiltLayer>,
}

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(
        "grid dims {dims:?} not divisible by the 3D downsample factor {factor}"
    )]
    NonDivisibleGrid { dims: [usize; 3], factor: usize },
    #[error(
        "grid has {got} vertical voxels but the architecture is built for {expected}"
    )]
    VerticalExtent { expected: usize, got: usize },
    #[error("BEV input has {got} channels, 2D backbone expects {expected}")]
    BevChannels { expected: usize, got: usize },
}

/// Per-layer forward record. `macs` is the measured gather count for sparse
/// layers and the analytic padded count for dense/transposed layers.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub name: String,
    pub input_dims: Vec<usize>,
    pub output_dims: Vec<usize>,
    pub active_in: Option<usize>,
    pub active_out: Option<usize>,
    pub in_elems: u64,
    pub out_elems: u64,
    pub macs: u64,
    pub nanos: u128,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ForwardTrace {
    pub records: Vec<TraceRecord>,
}

impl ForwardTrace {
    /// Trace as JSON lines, one record per layer.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace record"));
            out.push('\n');
        }
        out
    }

    /// Total measured MACs of sparse 3D layers.
    pub fn sparse_macs(&self) -> u64 {
        self.records
            .iter()
            .filter(|r| r.active_out.is_some() && r.macs > 0)
            .map(|r| r.macs)
            .sum()
    }

    /// Total analytic MACs of dense (2D) layers.
    pub fn dense_macs(&self) -> u64 {
        self.records
            .iter()
            .filter(|r| r.active_out.is_none())
            .map(|r| r.macs)
            .sum()
    }

    /// Peak resident activation estimate: max over layers of
    /// (input elements + output elements) * 4 bytes.
    pub fn peak_activation_bytes(&self) -> u64 {
        self.records
            .iter()
            .map(|r| (r.in_elems + r.out_elems) * 4)
            .max()
            .unwrap_or(0)
    }
}

/// Pre-head BEV features plus the cell-to-meters mapping, so heads never
/// re-derive grid geometry.
#[derive(Debug, Clone)]
pub struct PreHeadFeatures {
    pub map: DenseTensor2D,
    pub transform: MetricTransform,
}

/// Raw head outputs before decoding.
#[derive(Debug, Clone)]
pub enum HeadMaps {
    Anchor(RawAnchorMaps),
    Center(RawCenterMaps),
}

/// Builds a detector with synthesized weights: every weight is uniform in
/// [-1/sqrt(fan_in), +1/sqrt(fan_in)] drawn from xoshiro256** substream `k`
/// of `seed` (k = layer index in canonical plan order); biases are zero and
/// norm affines are identity.
pub fn build(spec: &DetectorSpec, seed: u64) -> Result<Detector, SpecError> {
    let plan = layer_plan(spec)?;
    let layers = plan
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            let mut rng = Xoshiro256StarStar::substream(seed, k as u64);
            let fan_in = p.kernel.volume() * p.in_channels;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = p.kernel.volume() * p.in_channels * p.out_channels;
            let weights: Vec<f32> = (0..n)
                .map(|_| ((2.0 * rng.next_f64() - 1.0) * bound) as f32)
                .collect();
            let params = ConvParams {
                kernel: p.kernel,
                stride: p.stride,
                padding: p.padding,
                in_channels: p.in_channels,
                out_channels: p.out_channels,
                mode: p.mode,
                weights,
                bias: p.bias.then(|| vec![0.0; p.out_channels]),
                norm: p.norm.then(|| NormAffine::identity(p.out_channels)),
                activation: p.activation,
            };
            BuiltLayer { plan: p, params }
        })
        .collect();
    Ok(Detector {
        spec: spec.clone(),
        weight_seed: seed,
        layers,
    })
}

impl Detector {
    pub fn spec(&self) -> &DetectorSpec {
        &self.spec
    }

    pub fn weight_seed(&self) -> u64 {
        self.weight_seed
    }

    pub fn layers(&self) -> &[BuiltLayer] {
        &self.layers
    }

    /// Actual learnable scalar total of the materialized layers.
    pub fn param_total(&self) -> u64 {
        self.layers.iter().map(|l| l.params.param_count()).sum()
    }

    fn dense_macs_of(&self, layer: &BuiltLayer, out: &DenseTensor2D, input: &DenseTensor2D) -> u64 {
        let kv = layer.plan.kernel.volume() as u64;
        let cin = layer.plan.in_channels as u64;
        let cout = layer.plan.out_channels as u64;
        let sites = if layer.plan.mode == ConvMode::Transposed {
            (input.height * input.width) as u64
        } else {
            (out.height * out.width) as u64
        };
        kv * cin * cout * sites
    }

    /// Runs the 3D backbone on an already-assembled sparse tensor.
    pub fn forward_3d_tensor(
        &self,
        input: SparseTensor3D,
    ) -> Result<(SparseTensor3D, Vec<TraceRecord>), ForwardError> {
        if input.channels() != VOXEL_FEATURE_CHANNELS {
            return Err(KernelError::ChannelMismatch {
                expected: VOXEL_FEATURE_CHANNELS,
                got: input.channels(),
            }
            .into());
        }
        let dims = input.dims();
        let factor = archspec::downsample_factor_3d(&self.spec);
        if dims[0] % factor != 0 || dims[1] % factor != 0 || dims[2] % factor != 0 {
            return Err(ForwardError::NonDivisibleGrid { dims, factor });
        }

        let skip_sources: HashSet<usize> = self
            .layers
            .iter()
            .filter_map(|l| l.plan.skip_from)
            .collect();
        let mut saved: HashMap<usize, SparseTensor3D> = HashMap::new();
        let mut records = Vec::new();
        let mut x = input;
        for (g, layer) in self.layers.iter().enumerate() {
            if !matches!(layer.plan.role, LayerRole::Backbone3d { .. }) {
                continue;
            }
            if skip_sources.contains(&g) {
                saved.insert(g, x.clone());
            }
            let t0 = Instant::now();
            let in_dims = x.dims();
            let in_active = x.len();
            let in_elems = (in_active * x.channels()) as u64;
            let (mut y, macs) = sparse_conv3d_counted(&x, &layer.params)?;
            if let Some(src) = layer.plan.skip_from {
                y = residual_add_relu(&y, &saved[&src]);
            }
            records.push(TraceRecord {
                name: layer.plan.name.clone(),
                input_dims: in_dims.to_vec(),
                output_dims: y.dims().to_vec(),
                active_in: Some(in_active),
                active_out: Some(y.len()),
                in_elems,
                out_elems: (y.len() * y.channels()) as u64,
                macs,
                nanos: t0.elapsed().as_nanos(),
            });
            x = y;
        }
        Ok((x, records))
    }

    /// Voxel-set entry point; checks the grid's vertical extent against the
    /// architecture's nominal one.
    pub fn forward_3d(
        &self,
        voxels: &VoxelSet,
    ) -> Result<(SparseTensor3D, Vec<TraceRecord>), ForwardError> {
        let dims = voxels.grid.dims();
        if dims[2] != NOMINAL_GRID_Z {
            return Err(ForwardError::VerticalExtent {
                expected: NOMINAL_GRID_Z,
                got: dims[2],
            });
        }
        let mut features = Vec::with_capacity(voxels.len() * 4);
        for f in &voxels.features {
            features.extend_from_slice(f);
        }
        let tensor = SparseTensor3D::from_rows(
            dims,
            VOXEL_FEATURE_CHANNELS,
            voxels.coords.clone(),
            features,
        );
        self.forward_3d_tensor(tensor)
    }

    /// Runs the 2D backbone, branch transforms, channel concatenation, and
    /// the optional bilinear post-upsample.
    pub fn forward_2d(
        &self,
        bev: DenseTensor2D,
        grid: &VoxelGridSpec,
    ) -> Result<(PreHeadFeatures, Vec<TraceRecord>), ForwardError> {
        let first_2d = self
            .layers
            .iter()
            .find(|l| matches!(l.plan.role, LayerRole::Backbone2d { .. }))
            .expect("spec has 2D stages");
        if bev.channels != first_2d.plan.in_channels {
            return Err(ForwardError::BevChannels {
                expected: first_2d.plan.in_channels,
                got: bev.channels,
            });
        }

        let skip_sources: HashSet<usize> = self
            .layers
            .iter()
            .filter_map(|l| l.plan.skip_from)
            .collect();
        let mut saved: HashMap<usize, DenseTensor2D> = HashMap::new();
        let mut records = Vec::new();
        let n_stages = self.spec.stages2d.len();
        let mut stage_out: Vec<Option<DenseTensor2D>> = vec![None; n_stages];

        let mut x = bev;
        let mut current_stage = 0usize;
        for (g, layer) in self.layers.iter().enumerate() {
            let stage = match layer.plan.role {
                LayerRole::Backbone2d { stage } => stage,
                _ => continue,
            };
            if stage != current_stage {
                stage_out[current_stage] = Some(x.clone());
                current_stage = stage;
            }
            if skip_sources.contains(&g) {
                saved.insert(g, x.clone());
            }
            let t0 = Instant::now();
            let in_dims = vec![x.channels, x.height, x.width];
            let in_elems = x.elements() as u64;
            let mut y = conv2d(&x, &layer.params)?;
            if let Some(src) = layer.plan.skip_from {
                y = residual_add_relu_2d(&y, &saved[&src]);
            }
            records.push(TraceRecord {
                name: layer.plan.name.clone(),
                input_dims: in_dims,
                output_dims: vec![y.channels, y.height, y.width],
                active_in: None,
                active_out: None,
                in_elems,
                out_elems: y.elements() as u64,
                macs: self.dense_macs_of(layer, &y, &x),
                nanos: t0.elapsed().as_nanos(),
            });
            x = y;
        }
        stage_out[current_stage] = Some(x);

        let mut branches = Vec::with_capacity(n_stages);
        for layer in &self.layers {
            let stage = match layer.plan.role {
                LayerRole::BranchTransform { stage } => stage,
                _ => continue,
            };
            let input = stage_out[stage].as_ref().expect("stage output");
            let t0 = Instant::now();
            let y = match layer.plan.mode {
                ConvMode::Transposed => transposed_conv2d(input, &layer.params)?,
                _ => conv2d(input, &layer.params)?,
            };
            records.push(TraceRecord {
                name: layer.plan.name.clone(),
                input_dims: vec![input.channels, input.height, input.width],
                output_dims: vec![y.channels, y.height, y.width],
                active_in: None,
                active_out: None,
                in_elems: input.elements() as u64,
                out_elems: y.elements() as u64,
                macs: self.dense_macs_of(layer, &y, input),
                nanos: t0.elapsed().as_nanos(),
            });
            branches.push(y);
        }

        let refs: Vec<&DenseTensor2D> = branches.iter().collect();
        let mut map = DenseTensor2D::concat_channels(&refs);
        if self.spec.post_upsample == archspec::PostUpsample::Bilinear2x {
            let t0 = Instant::now();
            let in_dims = vec![map.channels, map.height, map.width];
            let in_elems = map.elements() as u64;
            let up = bilinear_upsample2x(&map);
            records.push(TraceRecord {
                name: "post.bilinear2x".to_string(),
                input_dims: in_dims,
                output_dims: vec![up.channels, up.height, up.width],
                active_in: None,
                active_out: None,
                in_elems,
                out_elems: up.elements() as u64,
                macs: 0,
                nanos: t0.elapsed().as_nanos(),
            });
            map = up;
        }

        let transform = MetricTransform::from_grid(grid, (map.width, map.height));
        Ok((PreHeadFeatures { map, transform }, records))
    }

    /// Runs the detection-head convolutions on pre-head features. Center
    /// heatmaps come back through a sigmoid; everything else is raw.
    pub fn head_maps(
        &self,
        pre: &PreHeadFeatures,
    ) -> Result<(HeadMaps, Vec<TraceRecord>), ForwardError> {
        let mut outs: Vec<(LayerRole, DenseTensor2D)> = Vec::new();
        let mut records = Vec::new();
        for layer in &self.layers {
            if !matches!(
                layer.plan.role,
                LayerRole::HeadClsLogits
                    | LayerRole::HeadBoxResiduals
                    | LayerRole::HeadHeatmap
                    | LayerRole::HeadRegression
            ) {
                continue;
            }
            let t0 = Instant::now();
            let y = conv2d(&pre.map, &layer.params)?;
            records.push(TraceRecord {
                name: layer.plan.name.clone(),
                input_dims: vec![pre.map.channels, pre.map.height, pre.map.width],
                output_dims: vec![y.channels, y.height, y.width],
                active_in: None,
                active_out: None,
                in_elems: pre.map.elements() as u64,
                out_elems: y.elements() as u64,
                macs: self.dense_macs_of(layer, &y, &pre.map),
                nanos: t0.elapsed().as_nanos(),
            });
            outs.push((layer.plan.role, y));
        }
        let take = |role: LayerRole, outs: &mut Vec<(LayerRole, DenseTensor2D)>| {
            let pos = outs.iter().position(|(r, _)| *r == role).unwrap();
            outs.remove(pos).1
        };
        let maps = match self.spec.head.kind {
            HeadKind::Anchor => HeadMaps::Anchor(RawAnchorMaps {
                cls_logits: take(LayerRole::HeadClsLogits, &mut outs),
                box_residuals: take(LayerRole::HeadBoxResiduals, &mut outs),
            }),
            HeadKind::Center => {
                let mut heatmap = take(LayerRole::HeadHeatmap, &mut outs);
                for v in heatmap.values.iter_mut() {
                    *v = 1.0 / (1.0 + (-*v).exp());
                }
                HeadMaps::Center(RawCenterMaps {
                    heatmap,
                    regression: take(LayerRole::HeadRegression, &mut outs),
                })
            }
        };
        Ok((maps, records))
    }

    /// Full backbone pass: voxelize -> 3D -> BEV -> 2D, tracing every layer.
    pub fn forward(
        &self,
        cloud: &PointCloud,
        grid: &VoxelGridSpec,
    ) -> Result<(PreHeadFeatures, ForwardTrace), ForwardError> {
        let mut trace = ForwardTrace::default();

        let t0 = Instant::now();
        let voxels = voxelize(cloud, grid);
        trace.records.push(TraceRecord {
            name: "voxelize".to_string(),
            input_dims: vec![cloud.len()],
            output_dims: voxels.grid.dims().to_vec(),
            active_in: None,
            active_out: Some(voxels.len()),
            in_elems: (cloud.len() * 4) as u64,
            out_elems: (voxels.len() * 4) as u64,
            macs: 0,
            nanos: t0.elapsed().as_nanos(),
        });

        let (x3, recs3) = self.forward_3d(&voxels)?;
        trace.records.extend(recs3);

        let t0 = Instant::now();
        let bev = bev_project(&x3);
        trace.records.push(TraceRecord {
            name: "bev_project".to_string(),
            input_dims: x3.dims().to_vec(),
            output_dims: vec![bev.channels, bev.height, bev.width],
            active_in: Some(x3.len()),
            active_out: None,
            in_elems: (x3.len() * x3.channels()) as u64,
            out_elems: bev.elements() as u64,
            macs: 0,
            nanos: t0.elapsed().as_nanos(),
        });

        let (pre, recs2) = self.forward_2d(bev, grid)?;
        trace.records.extend(recs2);
        Ok((pre, trace))
    }
}

/// Projects sparse 3D features onto the ground plane by concatenating
/// height slices into channels: output channel `z * C + c`, height Y,
/// width X; inactive sites contribute zeros.
pub fn bev_project(x: &SparseTensor3D) -> DenseTensor2D {
    let [dx, dy, _dz] = x.dims();
    let c = x.channels();
    let mut out = DenseTensor2D::zeros(c * x.dims()[2], dy, dx);
    for (row, coord) in x.coords().iter().enumerate() {
        let f = x.feature(row);
        let (ix, iy, iz) = (coord[0] as usize, coord[1] as usize, coord[2] as usize);
        for (ch, &v) in f.iter().enumerate() {
            out.set(iz * c + ch, iy, ix, v);
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum WeightFileError {
    #[error("weight file: {0}")]
    Io(#[from] io::Error),
    #[error("weight file truncated or malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("weight file does not match spec at layer '{layer}': {detail}")]
    LayerMismatch { layer: String, detail: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightManifest {
    format: String,
    spec_name: String,
    weight_seed: u64,
    tensors: Vec<TensorEntry>,
}

const WEIGHT_FORMAT: &str = "sparsedet-weights-v1";

fn expected_tensors(plan: &[PlannedLayer]) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for p in plan {
        out.push((
            format!("{}.weight", p.name),
            vec![p.kernel.volume(), p.in_channels, p.out_channels],
        ));
        if p.bias {
            out.push((format!("{}.bias", p.name), vec![p.out_channels]));
        }
        if p.norm {
            out.push((format!("{}.norm_scale", p.name), vec![p.out_channels]));
            out.push((format!("{}.norm_shift", p.name), vec![p.out_channels]));
        }
    }
    out
}

/// Writes weights as a length-prefixed JSON manifest followed by raw
/// little-endian f32 data; the byte stream is identical for identical
/// detectors.
pub fn save_weights(det: &Detector, path: &Path) -> Result<(), WeightFileError> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, values: &[f32], data: &mut Vec<u8>| {
        let offset = data.len() as u64;
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape,
            offset,
            len: values.len() as u64,
        });
    };
    for l in &det.layers {
        let p = &l.plan;
        push(
            format!("{}.weight", p.name),
            vec![p.kernel.volume(), p.in_channels, p.out_channels],
            &l.params.weights,
            &mut data,
        );
        if let Some(b) = &l.params.bias {
            push(format!("{}.bias", p.name), vec![p.out_channels], b, &mut data);
        }
        if let Some(n) = &l.params.norm {
            push(
                format!("{}.norm_scale", p.name),
                vec![p.out_channels],
                &n.scale,
                &mut data,
            );
            push(
                format!("{}.norm_shift", p.name),
                vec![p.out_channels],
                &n.shift,
                &mut data,
            );
        }
    }
    let manifest = WeightManifest {
        format: WEIGHT_FORMAT.to_string(),
        spec_name: det.spec.name.clone(),
        weight_seed: det.weight_seed,
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest).expect("manifest serialization");
    let mut file = Vec::with_capacity(8 + manifest_bytes.len() + data.len());
    file.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    file.extend_from_slice(&manifest_bytes);
    file.extend_from_slice(&data);
    fs::write(path, file)?;
    Ok(())
}

/// Loads weights saved by `save_weights`, checking the manifest against the
/// spec's layer plan; the first mismatching layer is named in the error.
pub fn load_weights(spec: &DetectorSpec, path: &Path) -> Result<Detector, WeightFileError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(WeightFileError::Malformed("missing header".to_string()));
    }
    let manifest_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + manifest_len {
        return Err(WeightFileError::Malformed("truncated manifest".to_string()));
    }
    let manifest: WeightManifest = serde_json::from_slice(&bytes[8..8 + manifest_len])
        .map_err(|e| WeightFileError::Malformed(e.to_string()))?;
    if manifest.format != WEIGHT_FORMAT {
        return Err(WeightFileError::Malformed(format!(
            "unsupported format '{}'",
            manifest.format
        )));
    }
    let data = &bytes[8 + manifest_len..];

    let plan = layer_plan(spec)?;
    let expected = expected_tensors(&plan);
    if manifest.tensors.len() != expected.len() {
        return Err(WeightFileError::Malformed(format!(
            "{} tensors in file, spec expects {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut values: HashMap<String, Vec<f32>> = HashMap::new();
    for (entry, (want_name, want_shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != want_name || &entry.shape != want_shape {
            return Err(WeightFileError::LayerMismatch {
                layer: want_name.clone(),
                detail: format!(
                    "expected {want_name} {want_shape:?}, file has {} {:?}",
                    entry.name, entry.shape
                ),
            });
        }
        let n: usize = entry.shape.iter().product();
        if entry.len as usize != n {
            return Err(WeightFileError::LayerMismatch {
                layer: want_name.clone(),
                detail: format!("length {} does not match shape {want_shape:?}", entry.len),
            });
        }
        let start = entry.offset as usize;
        let end = start + n * 4;
        if end > data.len() {
            return Err(WeightFileError::Malformed(format!(
                "tensor '{}' extends past end of file",
                entry.name
            )));
        }
        let floats: Vec<f32> = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.insert(entry.name.clone(), floats);
    }

    let layers = plan
        .into_iter()
        .map(|p| {
            let weights = values.remove(&format!("{}.weight", p.name)).unwrap();
            let bias = p.bias.then(|| values.remove(&format!("{}.bias", p.name)).unwrap());
            let norm = p.norm.then(|| NormAffine {
                scale: values.remove(&format!("{}.norm_scale", p.name)).unwrap(),
                shift: values.remove(&format!("{}.norm_shift", p.name)).unwrap(),
            });
            let params = ConvParams {
                kernel: p.kernel,
                stride: p.stride,
                padding: p.padding,
                in_channels: p.in_channels,
                out_channels: p.out_channels,
                mode: p.mode,
                weights,
                bias,
                norm,
                activation: p.activation,
            };
            BuiltLayer { plan: p, params }
        })
        .collect();
    Ok(Detector {
        spec: spec.clone(),
        weight_seed: manifest.weight_seed,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{preset, HeadKind, PostUpsample, Stage2DSpec, Stage3DSpec};
    use crate::kernels::dense_conv3d_oracle;
    use crate::kernels::oracle::Dense4;
    use crate::pointcloud::Point;

    // Small grid with the nominal vertical extent: 16 x 16 x 40.
    fn tiny_grid() -> VoxelGridSpec {
        VoxelGridSpec {
            range_min: [0.0, 0.0, -2.0],
            range_max: [1.6, 1.6, 4.0],
            voxel_size: [0.1, 0.1, 0.15],
        }
    }

    fn tiny_spec(residual: bool) -> DetectorSpec {
        let mut spec = preset("A0", HeadKind::Anchor).unwrap();
        spec.name = "tiny".to_string();
        spec.stages3d = vec![
            Stage3DSpec {
                depth: 2,
                width: 4,
                downsample: false,
                residual,
            },
            Stage3DSpec {
                depth: 3,
                width: 8,
                downsample: true,
                residual,
            },
        ];
        spec.stages2d = vec![
            Stage2DSpec {
                depth: 2,
                width: 8,
                downsample: false,
                upsample_stride: 1,
                residual,
            },
            Stage2DSpec {
                depth: 2,
                width: 8,
                downsample: true,
                upsample_stride: 2,
                residual,
            },
        ];
        spec.post_upsample = PostUpsample::None;
        spec
    }

    fn random_cloud(n: usize, seed: u64, grid: &VoxelGridSpec) -> PointCloud {
        let mut rng = Xoshiro256StarStar::new(seed);
        PointCloud {
            points: (0..n)
                .map(|_| Point {
                    x: rng.uniform_f32(grid.range_min[0], grid.range_max[0]),
                    y: rng.uniform_f32(grid.range_min[1], grid.range_max[1]),
                    z: rng.uniform_f32(grid.range_min[2], grid.range_max[2]),
                    intensity: rng.uniform_f32(0.0, 1.0),
                })
                .collect(),
        }
    }

    #[test]
    fn build_is_deterministic() {
        let spec = tiny_spec(false);
        let a = build(&spec, 7).unwrap();
        let b = build(&spec, 7).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.params.weights, lb.params.weights);
        }
        let c = build(&spec, 8).unwrap();
        assert_ne!(a.layers[0].params.weights, c.layers[0].params.weights);
    }

    #[test]
    fn weights_respect_fan_in_bound() {
        // Head convs are 1x1 over the pre-head channels; pick widths so one
        // layer has fan_in exactly 16.
        let mut spec = tiny_spec(false);
        spec.stages2d[0].width = 8;
        spec.stages2d[1].width = 8;
        let det = build(&spec, 3).unwrap();
        let head = det
            .layers
            .iter()
            .find(|l| l.plan.role == LayerRole::HeadClsLogits)
            .unwrap();
        assert_eq!(head.plan.in_channels, 16);
        assert!(head.params.weights.iter().all(|w| w.abs() <= 0.25));
    }

    #[test]
    fn param_total_matches_analytic_count_for_random_specs() {
        let mut rng = Xoshiro256StarStar::new(99);
        for case in 0..20 {
            let n3 = 2 + rng.index(2);
            let stages3d: Vec<Stage3DSpec> = (0..n3)
                .map(|i| Stage3DSpec {
                    depth: 1 + rng.index(3),
                    width: [4, 8, 12, 16][rng.index(4)],
                    downsample: i > 0,
                    residual: rng.next_f64() < 0.5,
                })
                .collect();
            let up1 = [1usize, 2][rng.index(2)];
            let stages2d = vec![
                Stage2DSpec {
                    depth: 1 + rng.index(3),
                    width: [8, 16][rng.index(2)],
                    downsample: false,
                    upsample_stride: up1,
                    residual: rng.next_f64() < 0.5,
                },
                Stage2DSpec {
                    depth: 1 + rng.index(3),
                    width: [8, 16][rng.index(2)],
                    downsample: true,
                    upsample_stride: up1 * 2,
                    residual: rng.next_f64() < 0.5,
                },
            ];
            let kind = if rng.next_f64() < 0.5 {
                HeadKind::Anchor
            } else {
                HeadKind::Center
            };
            let spec = DetectorSpec {
                name: format!("rand{case}"),
                stages3d,
                stages2d,
                post_upsample: if rng.next_f64() < 0.5 {
                    PostUpsample::None
                } else {
                    PostUpsample::Bilinear2x
                },
                head: crate::archspec::HeadSpec::default_for(kind),
            };
            let analytic = archspec::count_params(&spec).unwrap();
            let det = build(&spec, case as u64).unwrap();
            assert_eq!(analytic, det.param_total(), "case {case}");
        }
    }

    #[test]
    fn forward_3d_empty_voxels() {
        let spec = tiny_spec(false);
        let det = build(&spec, 1).unwrap();
        let grid = tiny_grid();
        let voxels = voxelize(&PointCloud::default(), &grid);
        let (out, _) = det.forward_3d(&voxels).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.dims(), [8, 8, 20]);
    }

    #[test]
    fn a0_output_dims_on_desk_grid() {
        let spec = preset("A0", HeadKind::Anchor).unwrap();
        let det = build(&spec, 5).unwrap();
        let grid = VoxelGridSpec::desk();
        // A handful of points is enough to check dims.
        let cloud = random_cloud(500, 2, &grid);
        let (out, _) = det.forward_3d(&voxelize(&cloud, &grid)).unwrap();
        assert_eq!(out.dims(), [64, 64, 5]);
    }

    #[test]
    fn wrong_vertical_extent_rejected() {
        let spec = tiny_spec(false);
        let det = build(&spec, 1).unwrap();
        let grid = VoxelGridSpec {
            range_min: [0.0, 0.0, 0.0],
            range_max: [1.6, 1.6, 3.0],
            voxel_size: [0.1, 0.1, 0.15],
        };
        let voxels = voxelize(&PointCloud::default(), &grid);
        assert!(matches!(
            det.forward_3d(&voxels),
            Err(ForwardError::VerticalExtent { expected: 40, got: 20 })
        ));
    }

    #[test]
    fn forward_3d_matches_masked_dense_oracle_composition() {
        let spec = tiny_spec(false);
        let det = build(&spec, 11).unwrap();
        let grid = tiny_grid();
        let cloud = random_cloud(400, 4, &grid);
        let voxels = voxelize(&cloud, &grid);
        let (sparse_out, _) = det.forward_3d(&voxels).unwrap();

        // Dense path: apply the oracle layer by layer, masking to the sparse
        // active set after each layer (the sparsity semantics).
        let mut features = Vec::new();
        for f in &voxels.features {
            features.extend_from_slice(f);
        }
        let mut x = SparseTensor3D::from_rows(grid.dims(), 4, voxels.coords.clone(), features);
        let mut dense = x.to_dense();
        for layer in det
            .layers
            .iter()
            .filter(|l| matches!(l.plan.role, LayerRole::Backbone3d { .. }))
        {
            let (y, _) = sparse_conv3d_counted(&x, &layer.params).unwrap();
            let dense_full = dense_conv3d_oracle(&dense, &layer.params).unwrap();
            let mut masked = Dense4::zeros(dense_full.channels, dense_full.dims);
            for (row, c) in y.coords().iter().enumerate() {
                let _ = row;
                for ch in 0..dense_full.channels {
                    masked.set(
                        ch,
                        c[2] as usize,
                        c[1] as usize,
                        c[0] as usize,
                        dense_full.get(ch, c[2] as usize, c[1] as usize, c[0] as usize),
                    );
                }
            }
            dense = masked;
            x = y;
        }
        let max_err = sparse_out
            .to_dense()
            .values
            .iter()
            .zip(&dense.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1e-4, "max err {max_err}");
    }

    #[test]
    fn bev_project_examples() {
        // dims (4, 4, 2) with C = 3 flattens to 6 channels.
        let mut rng = Xoshiro256StarStar::new(15);
        let mut coords = Vec::new();
        let mut features = Vec::new();
        for _ in 0..10 {
            let c = [
                rng.index(4) as u32,
                rng.index(4) as u32,
                rng.index(2) as u32,
            ];
            if coords.contains(&c) {
                continue;
            }
            coords.push(c);
            for _ in 0..3 {
                features.push(rng.uniform_f32(-1.0, 1.0));
            }
        }
        let x = SparseTensor3D::from_rows([4, 4, 2], 3, coords, features);
        let bev = bev_project(&x);
        assert_eq!((bev.channels, bev.height, bev.width), (6, 4, 4));
        let dense = x.to_dense();
        for z in 0..2 {
            for ch in 0..3 {
                for y in 0..4 {
                    for xi in 0..4 {
                        assert_eq!(bev.get(z * 3 + ch, y, xi), dense.get(ch, z, y, xi));
                    }
                }
            }
        }
        let empty = bev_project(&SparseTensor3D::empty([4, 4, 2], 3));
        assert!(empty.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_forward_shapes_match_pre_head_resolution() {
        let grid = tiny_grid();
        let cloud = random_cloud(600, 8, &grid);
        for name in ["A0", "A0+Upsample", "A0+Upsample×2", "A1", "A2_res"] {
            let spec = preset(name, HeadKind::Anchor).unwrap();
            let det = build(&spec, 2).unwrap();
            let (pre, _) = det.forward(&cloud, &grid).unwrap();
            let (w, h) = archspec::pre_head_resolution(&spec, &grid).unwrap();
            assert_eq!((pre.map.width, pre.map.height), (w, h), "{name}");
            assert_eq!(
                pre.map.channels,
                archspec::pre_head_channels(&spec),
                "{name}"
            );
            assert!(pre.map.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn empty_cloud_gives_zero_pre_head_map() {
        let grid = tiny_grid();
        let spec = tiny_spec(false);
        let det = build(&spec, 3).unwrap();
        let (pre, _) = det.forward(&PointCloud::default(), &grid).unwrap();
        assert!(pre.map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trace_dense_macs_match_flop_counter() {
        let grid = tiny_grid();
        let spec = tiny_spec(true);
        let det = build(&spec, 9).unwrap();
        let cloud = random_cloud(300, 1, &grid);
        let (pre, trace) = det.forward(&cloud, &grid).unwrap();
        let (_, head_recs) = det.head_maps(&pre).unwrap();
        let trace_dense: u64 = trace.dense_macs() + head_recs.iter().map(|r| r.macs).sum::<u64>();
        let analytic_2d: u64 = archspec::flops_per_layer(&spec, &grid)
            .unwrap()
            .iter()
            .filter(|(l, _)| {
                matches!(
                    l.role,
                    LayerRole::Backbone2d { .. }
                        | LayerRole::BranchTransform { .. }
                        | LayerRole::HeadClsLogits
                        | LayerRole::HeadBoxResiduals
                        | LayerRole::HeadHeatmap
                        | LayerRole::HeadRegression
                )
            })
            .map(|(_, f)| f)
            .sum();
        assert_eq!(2 * trace_dense, analytic_2d);
    }

    #[test]
    fn residual_block_with_zero_weights_is_identity() {
        // Same stem, one extra residual pair; zeroing the pair's weights
        // must reproduce the shorter network exactly.
        let mut with_block = tiny_spec(true);
        with_block.stages3d = vec![Stage3DSpec {
            depth: 3,
            width: 4,
            downsample: false,
            residual: true,
        }];
        let mut without_block = with_block.clone();
        without_block.stages3d[0].depth = 1;
        without_block.stages3d[0].residual = false;

        let full = build(&with_block, 21).unwrap();
        let short = build(&without_block, 21).unwrap();
        // Zero the block convs (plan indices 1 and 2).
        let mut zeroed = full.clone();
        for idx in [1usize, 2] {
            for w in zeroed.layers[idx].params.weights.iter_mut() {
                *w = 0.0;
            }
        }
        // Leading layers share substream 0, so their weights agree.
        assert_eq!(
            zeroed.layers[0].params.weights,
            short.layers[0].params.weights
        );

        let grid = tiny_grid();
        let cloud = random_cloud(200, 6, &grid);
        let voxels = voxelize(&cloud, &grid);
        let (a, _) = zeroed.forward_3d(&voxels).unwrap();
        let (b, _) = short.forward_3d(&voxels).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_deterministic_across_thread_counts() {
        let grid = tiny_grid();
        let spec = tiny_spec(true);
        let det = build(&spec, 13).unwrap();
        let cloud = random_cloud(500, 3, &grid);
        let mut results = Vec::new();
        for threads in [1usize, 4, 8] {
            let r = crate::runtime::with_threads(threads, || {
                det.forward(&cloud, &grid).unwrap().0.map
            });
            results.push(r);
        }
        assert_eq!(results[0], results[1]);
        assert_eq!(results[0], results[2]);
    }

    #[test]
    fn weight_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(true);
        let det = build(&spec, 17).unwrap();
        let p1 = dir.path().join("a.weights");
        let p2 = dir.path().join("b.weights");
        save_weights(&det, &p1).unwrap();
        let loaded = load_weights(&spec, &p1).unwrap();
        save_weights(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(loaded.weight_seed(), 17);

        let grid = tiny_grid();
        let cloud = random_cloud(300, 5, &grid);
        let (pre_a, _) = det.forward(&cloud, &grid).unwrap();
        let (pre_b, _) = loaded.forward(&cloud, &grid).unwrap();
        assert_eq!(pre_a.map, pre_b.map);
    }

    #[test]
    fn weight_file_wrong_spec_names_layer() {
        let dir = tempfile::tempdir().unwrap();
        let det = build(&tiny_spec(false), 1).unwrap();
        let path = dir.path().join("w.weights");
        save_weights(&det, &path).unwrap();
        let mut other = tiny_spec(false);
        other.stages3d[0].width = 6;
        match load_weights(&other, &path) {
            Err(WeightFileError::LayerMismatch { layer, .. }) => {
                assert_eq!(layer, "3d.s1.l0.weight");
            }
            other => panic!("expected layer mismatch, got {other:?}"),
        }
    }
}
