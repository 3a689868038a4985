//! Point-cloud data model: binary cloud files, voxelization, oriented boxes,
//! and synthetic labeled scenes for end-to-end tests.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Xoshiro256StarStar;

/// Class ids used throughout: 0 = vehicle, 1 = pedestrian, 2 = cyclist.
pub const CLASS_NAMES: [&str; 3] = ["vehicle", "pedestrian", "cyclist"];

/// One LiDAR return. Coordinates in meters, intensity in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

/// Ordered point sequence; order is preserved exactly as loaded or
/// generated so downstream results are reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum CloudIoError {
    #[error("cloud file: {0}")]
    Io(#[from] io::Error),
    #[error("truncated cloud file: {len} bytes is not a multiple of 16")]
    Truncated { len: usize },
    #[error("non-finite value in cloud record {record}")]
    NonFinite { record: usize },
}

/// Decodes a flat binary cloud: records of 4 little-endian f32
/// (x, y, z, intensity).
pub fn cloud_from_bytes(bytes: &[u8]) -> Result<PointCloud, CloudIoError> {
    if bytes.len() % 16 != 0 {
        return Err(CloudIoError::Truncated { len: bytes.len() });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (record, chunk) in bytes.chunks_exact(16).enumerate() {
        let f = |i: usize| f32::from_le_bytes(chunk[4 * i..4 * i + 4].try_into().unwrap());
        let p = Point {
            x: f(0),
            y: f(1),
            z: f(2),
            intensity: f(3),
        };
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.intensity.is_finite()) {
            return Err(CloudIoError::NonFinite { record });
        }
        points.push(p);
    }
    Ok(PointCloud { points })
}

pub fn cloud_to_bytes(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.points.len() * 16);
    for p in &cloud.points {
        out.extend_from_slice(&p.x.to_le_bytes());
        out.extend_from_slice(&p.y.to_le_bytes());
        out.extend_from_slice(&p.z.to_le_bytes());
        out.extend_from_slice(&p.intensity.to_le_bytes());
    }
    out
}

pub fn load_cloud(path: &Path) -> Result<PointCloud, CloudIoError> {
    let bytes = fs::read(path)?;
    cloud_from_bytes(&bytes)
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<(), CloudIoError> {
    fs::write(path, cloud_to_bytes(cloud))?;
    Ok(())
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("axis {axis}: range_max must exceed range_min")]
    EmptyRange { axis: usize },
    #[error("axis {axis}: voxel_size must be positive")]
    BadVoxelSize { axis: usize },
    #[error("axis {axis}: derived dimension is zero")]
    ZeroDim { axis: usize },
}

/// Metric extent and voxel size of the detection volume. Derived grid
/// dimensions are `floor((range_max - range_min) / voxel_size)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelGridSpec {
    pub range_min: [f32; 3],
    pub range_max: [f32; 3],
    pub voxel_size: [f32; 3],
}

impl VoxelGridSpec {
    /// Desk-scale default: x, y in [-25.6, 25.6), z in [-2, 4),
    /// voxels 0.1 x 0.1 x 0.15 m, i.e. a 512 x 512 x 40 grid.
    pub fn desk() -> Self {
        Self {
            range_min: [-25.6, -25.6, -2.0],
            range_max: [25.6, 25.6, 4.0],
            voxel_size: [0.1, 0.1, 0.15],
        }
    }

    /// Full-scale variant of the desk grid (x, y in [-75.2, 75.2)),
    /// a 1504 x 1504 x 40 grid.
    pub fn full_scale() -> Self {
        Self {
            range_min: [-75.2, -75.2, -2.0],
            range_max: [75.2, 75.2, 4.0],
            voxel_size: [0.1, 0.1, 0.15],
        }
    }

    pub fn validate(&self) -> Result<(), GridError> {
        for axis in 0..3 {
            if !(self.range_max[axis] > self.range_min[axis]) {
                return Err(GridError::EmptyRange { axis });
            }
            if !(self.voxel_size[axis] > 0.0) {
                return Err(GridError::BadVoxelSize { axis });
            }
            if self.dims()[axis] == 0 {
                return Err(GridError::ZeroDim { axis });
            }
        }
        Ok(())
    }

    /// Grid dimensions (X, Y, Z). A relative 1e-6 slack absorbs the f32
    /// representation error of ranges and voxel sizes, so extents that are
    /// exact multiples of the voxel size land on the intended integer.
    pub fn dims(&self) -> [usize; 3] {
        let mut d = [0usize; 3];
        for axis in 0..3 {
            let span = self.range_max[axis] as f64 - self.range_min[axis] as f64;
            let q = span / self.voxel_size[axis] as f64;
            d[axis] = (q * (1.0 + 1e-6)).floor().max(0.0) as usize;
        }
        d
    }

    /// Voxel index of a point, or None when it falls outside the half-open
    /// range [range_min, range_max) or past the derived grid dims on any
    /// axis. The range bounds compare exactly, so a point sitting on
    /// range_max is always dropped.
    pub fn voxel_index(&self, p: &Point) -> Option<[u32; 3]> {
        let dims = self.dims();
        let coords = [p.x, p.y, p.z];
        let mut idx = [0u32; 3];
        for axis in 0..3 {
            if coords[axis] < self.range_min[axis] || coords[axis] >= self.range_max[axis] {
                return None;
            }
            let rel = coords[axis] as f64 - self.range_min[axis] as f64;
            let i = (rel / self.voxel_size[axis] as f64).floor();
            if i < 0.0 || i >= dims[axis] as f64 {
                return None;
            }
            idx[axis] = i as u32;
        }
        Some(idx)
    }
}

/// Occupied voxels of a cloud. `coords` are (ix, iy, iz) triples sorted
/// lexicographically by (iz, iy, ix); `features` holds the per-voxel mean
/// of (x, y, z, intensity), row-aligned with `coords`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSet {
    pub coords: Vec<[u32; 3]>,
    pub features: Vec<[f32; 4]>,
    pub grid: VoxelGridSpec,
}

impl VoxelSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Groups a cloud into voxels. Points outside the grid are dropped; each
/// occupied voxel's feature is the arithmetic mean of its points.
///
/// The mean is accumulated in f64 over points ordered by their raw bit
/// patterns, which makes the result independent of the input order.
pub fn voxelize(cloud: &PointCloud, grid: &VoxelGridSpec) -> VoxelSet {
    use std::collections::HashMap;

    let mut buckets: HashMap<[u32; 3], Vec<Point>> = HashMap::new();
    for p in &cloud.points {
        if let Some(idx) = grid.voxel_index(p) {
            buckets.entry(idx).or_default().push(*p);
        }
    }

    let mut keys: Vec<[u32; 3]> = buckets.keys().copied().collect();
    keys.sort_unstable_by_key(|c| (c[2], c[1], c[0]));

    let mut features = Vec::with_capacity(keys.len());
    for key in &keys {
        let pts = buckets.get_mut(key).unwrap();
        pts.sort_unstable_by_key(|p| {
            (
                p.x.to_bits(),
                p.y.to_bits(),
                p.z.to_bits(),
                p.intensity.to_bits(),
            )
        });
        let n = pts.len() as f64;
        let mut sum = [0.0f64; 4];
        for p in pts.iter() {
            sum[0] += p.x as f64;
            sum[1] += p.y as f64;
            sum[2] += p.z as f64;
            sum[3] += p.intensity as f64;
        }
        features.push([
            (sum[0] / n) as f32,
            (sum[1] / n) as f32,
            (sum[2] / n) as f32,
            (sum[3] / n) as f32,
        ]);
    }

    VoxelSet {
        coords: keys,
        features,
        grid: *grid,
    }
}

/// 7-DoF oriented box: center, extents, and yaw about +z in (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub cx: f32,
    pub cy: f32,
    pub cz: f32,
    pub length: f32,
    pub width: f32,
    pub height: f32,
    pub yaw: f32,
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(mut a: f32) -> f32 {
    use std::f32::consts::PI;
    while a > PI {
        a -= 2.0 * PI;
    }
    while a <= -PI {
        a += 2.0 * PI;
    }
    a
}

impl Box3D {
    pub fn new(cx: f32, cy: f32, cz: f32, length: f32, width: f32, height: f32, yaw: f32) -> Self {
        Self {
            cx,
            cy,
            cz,
            length,
            width,
            height,
            yaw: wrap_angle(yaw),
        }
    }

    /// BEV footprint corners in CCW order.
    pub fn bev_corners(&self) -> [[f32; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.length * 0.5;
        let hw = self.width * 0.5;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        let mut out = [[0.0f32; 2]; 4];
        for (i, [lx, ly]) in local.into_iter().enumerate() {
            out[i] = [
                self.cx + c * lx - s * ly,
                self.cy + s * lx + c * ly,
            ];
        }
        out
    }

    pub fn bev_area(&self) -> f32 {
        self.length * self.width
    }

    /// Closed-boundary containment test in the box frame.
    pub fn contains_point(&self, p: &Point) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p.x - self.cx;
        let dy = p.y - self.cy;
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        let lz = p.z - self.cz;
        lx.abs() <= self.length * 0.5
            && ly.abs() <= self.width * 0.5
            && lz.abs() <= self.height * 0.5
    }
}

/// Maps BEV feature-map cells (row, col) to metric centers:
/// `x = x_min + (col + 0.5) * cell_size_x`, same for y with rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricTransform {
    pub x_min: f32,
    pub y_min: f32,
    pub cell_size_x: f32,
    pub cell_size_y: f32,
}

impl MetricTransform {
    /// Transform for a feature map of `(width, height)` cells covering the
    /// grid's x/y extent.
    pub fn from_grid(grid: &VoxelGridSpec, resolution: (usize, usize)) -> Self {
        let (w, h) = resolution;
        Self {
            x_min: grid.range_min[0],
            y_min: grid.range_min[1],
            cell_size_x: (grid.range_max[0] - grid.range_min[0]) / w as f32,
            cell_size_y: (grid.range_max[1] - grid.range_min[1]) / h as f32,
        }
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f32, f32) {
        (
            self.x_min + (col as f32 + 0.5) * self.cell_size_x,
            self.y_min + (row as f32 + 0.5) * self.cell_size_y,
        )
    }
}

/// JSON record for one labeled or detected box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxLabel {
    pub cx: f32,
    pub cy: f32,
    pub cz: f32,
    pub length: f32,
    pub width: f32,
    pub height: f32,
    pub yaw: f32,
    pub class: u32,
}

impl BoxLabel {
    pub fn from_box(b: &Box3D, class: u32) -> Self {
        Self {
            cx: b.cx,
            cy: b.cy,
            cz: b.cz,
            length: b.length,
            width: b.width,
            height: b.height,
            yaw: b.yaw,
            class,
        }
    }

    pub fn to_box(&self) -> Box3D {
        Box3D::new(
            self.cx,
            self.cy,
            self.cz,
            self.length,
            self.width,
            self.height,
            self.yaw,
        )
    }
}

/// Synthetic scene: a cloud plus the oriented boxes planted in it.
#[derive(Debug, Clone)]
pub struct LabeledScene {
    pub cloud: PointCloud,
    pub boxes: Vec<(Box3D, u32)>,
    pub seed: u64,
}

/// Placement attempts per object before synthesis gives up.
pub const PLACEMENT_RETRY_BUDGET: usize = 100;
/// Surface samples per planted object.
pub const SURFACE_POINTS_PER_OBJECT: usize = 200;
/// Uniform clutter points per scene.
pub const CLUTTER_POINTS: usize = 4096;

/// Per-class (length, width, height) sampling ranges in meters.
pub const CLASS_SIZE_RANGES: [[(f32, f32); 3]; 3] = [
    [(4.0, 5.0), (1.8, 2.1), (1.5, 1.8)],
    [(0.6, 1.0), (0.6, 1.0), (1.6, 1.9)],
    [(1.6, 2.0), (0.6, 0.9), (1.6, 1.9)],
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid grid: {0}")]
    Grid(#[from] GridError),
    #[error("class_mix must have {expected} non-negative entries summing to 1, got {got:?}")]
    BadClassMix { expected: usize, got: Vec<f64> },
    #[error(
        "failed to place object {object} after {budget} attempts; \
         grid too small for the requested object count"
    )]
    PlacementBudget { object: usize, budget: usize },
}

// Separating-axis test for two BEV rectangles with a positive clearance, so
// planted boxes never touch (BEV IoU is exactly zero).
fn bev_disjoint(a: &Box3D, b: &Box3D, clearance: f32) -> bool {
    let ca = a.bev_corners();
    let cb = b.bev_corners();
    let axes = |c: &[[f32; 2]; 4]| {
        [
            [c[1][0] - c[0][0], c[1][1] - c[0][1]],
            [c[3][0] - c[0][0], c[3][1] - c[0][1]],
        ]
    };
    for axis in axes(&ca).into_iter().chain(axes(&cb)) {
        let norm = (axis[0] * axis[0] + axis[1] * axis[1]).sqrt();
        if norm == 0.0 {
            continue;
        }
        let ux = axis[0] / norm;
        let uy = axis[1] / norm;
        let project = |c: &[[f32; 2]; 4]| {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for p in c {
                let v = p[0] * ux + p[1] * uy;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (lo, hi)
        };
        let (alo, ahi) = project(&ca);
        let (blo, bhi) = project(&cb);
        if ahi + clearance < blo || bhi + clearance < alo {
            return true;
        }
    }
    false
}

// Samples a point on the surface of `b` shrunk by a hair, so every sample is
// strictly inside the labeled box.
fn sample_surface_point(b: &Box3D, rng: &mut Xoshiro256StarStar) -> Point {
    let hl = b.length * 0.5 * 0.998;
    let hw = b.width * 0.5 * 0.998;
    let hh = b.height * 0.5 * 0.998;
    // Face areas: +-x, +-y, +-z.
    let ax = (hw * hh) as f64;
    let ay = (hl * hh) as f64;
    let az = (hl * hw) as f64;
    let face = rng.weighted_index(&[ax, ax, ay, ay, az, az]);
    let u = rng.uniform_f32(-1.0, 1.0);
    let v = rng.uniform_f32(-1.0, 1.0);
    let (lx, ly, lz) = match face {
        0 => (hl, u * hw, v * hh),
        1 => (-hl, u * hw, v * hh),
        2 => (u * hl, hw, v * hh),
        3 => (u * hl, -hw, v * hh),
        4 => (u * hl, v * hw, hh),
        _ => (u * hl, v * hw, -hh),
    };
    let (s, c) = b.yaw.sin_cos();
    Point {
        x: b.cx + c * lx - s * ly,
        y: b.cy + s * lx + c * ly,
        z: b.cz + lz,
        intensity: rng.uniform_f32(0.0, 1.0),
    }
}

/// Generates a deterministic labeled scene: `n_objects` non-overlapping
/// boxes with class-conditioned sizes, surface-sampled object points, and
/// uniform clutter. Identical seeds give bit-identical scenes.
pub fn synth_scene(
    seed: u64,
    n_objects: usize,
    class_mix: &[f64],
    grid: &VoxelGridSpec,
) -> Result<LabeledScene, SynthError> {
    grid.validate()?;
    let n_classes = CLASS_SIZE_RANGES.len();
    let mix_ok = class_mix.len() == n_classes
        && class_mix.iter().all(|p| *p >= 0.0)
        && (class_mix.iter().sum::<f64>() - 1.0).abs() < 1e-6;
    if !mix_ok {
        return Err(SynthError::BadClassMix {
            expected: n_classes,
            got: class_mix.to_vec(),
        });
    }

    let mut place_rng = Xoshiro256StarStar::substream(seed, 0);
    let mut surface_rng = Xoshiro256StarStar::substream(seed, 1);
    let mut clutter_rng = Xoshiro256StarStar::substream(seed, 2);

    let mut boxes: Vec<(Box3D, u32)> = Vec::with_capacity(n_objects);
    for object in 0..n_objects {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRY_BUDGET {
            let class = place_rng.weighted_index(class_mix) as u32;
            let ranges = &CLASS_SIZE_RANGES[class as usize];
            let length = place_rng.uniform_f32(ranges[0].0, ranges[0].1);
            let width = place_rng.uniform_f32(ranges[1].0, ranges[1].1);
            let height = place_rng.uniform_f32(ranges[2].0, ranges[2].1);
            let margin = 0.5 * (length * length + width * width).sqrt() + 0.2;
            let x_lo = grid.range_min[0] + margin;
            let x_hi = grid.range_max[0] - margin;
            let y_lo = grid.range_min[1] + margin;
            let y_hi = grid.range_max[1] - margin;
            if x_lo >= x_hi || y_lo >= y_hi {
                continue;
            }
            let candidate = Box3D::new(
                place_rng.uniform_f32(x_lo, x_hi),
                place_rng.uniform_f32(y_lo, y_hi),
                height * 0.5,
                length,
                width,
                height,
                place_rng.uniform_f32(-std::f32::consts::PI, std::f32::consts::PI),
            );
            if boxes
                .iter()
                .all(|(b, _)| bev_disjoint(b, &candidate, 0.05))
            {
                boxes.push((candidate, class));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::PlacementBudget {
                object,
                budget: PLACEMENT_RETRY_BUDGET,
            });
        }
    }

    let mut points = Vec::with_capacity(n_objects * SURFACE_POINTS_PER_OBJECT + CLUTTER_POINTS);
    for (b, _) in &boxes {
        for _ in 0..SURFACE_POINTS_PER_OBJECT {
            points.push(sample_surface_point(b, &mut surface_rng));
        }
    }
    for _ in 0..CLUTTER_POINTS {
        points.push(Point {
            x: clutter_rng.uniform_f32(grid.range_min[0], grid.range_max[0]),
            y: clutter_rng.uniform_f32(grid.range_min[1], grid.range_max[1]),
            z: clutter_rng.uniform_f32(grid.range_min[2], grid.range_max[2]),
            intensity: clutter_rng.uniform_f32(0.0, 1.0),
        });
    }

    Ok(LabeledScene {
        cloud: PointCloud { points },
        boxes,
        seed,
    })
}

/// Reads a label file: a JSON array of box records.
pub fn load_labels(path: &Path) -> Result<Vec<BoxLabel>, io::Error> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

pub fn write_labels(path: &Path, labels: &[BoxLabel]) -> Result<(), io::Error> {
    let text = serde_json::to_string_pretty(labels).expect("label serialization");
    fs::write(path, text)
}
