//! Detection heads: anchor generation, raw-map decoding for anchor and
//! center heads, rotated BEV IoU, and greedy NMS.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archspec::{HeadKind, HeadSpec};
use crate::kernels::DenseTensor2D;
use crate::pointcloud::{wrap_angle, Box3D, MetricTransform};

/// One decoded object proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub box3d: Box3D,
    pub score: f32,
    pub class_id: u32,
}

/// JSON schema shared by labels (without score) and detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub cx: f32,
    pub cy: f32,
    pub cz: f32,
    pub length: f32,
    pub width: f32,
    pub height: f32,
    pub yaw: f32,
    pub class: u32,
    pub score: f32,
}

impl DetectionRecord {
    pub fn from_detection(d: &Detection) -> Self {
        Self {
            cx: d.box3d.cx,
            cy: d.box3d.cy,
            cz: d.box3d.cz,
            length: d.box3d.length,
            width: d.box3d.width,
            height: d.box3d.height,
            yaw: d.box3d.yaw,
            class: d.class_id,
            score: d.score,
        }
    }

    pub fn to_detection(&self) -> Detection {
        Detection {
            box3d: Box3D::new(
                self.cx,
                self.cy,
                self.cz,
                self.length,
                self.width,
                self.height,
                self.yaw,
            ),
            score: self.score,
            class_id: self.class,
        }
    }
}

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("operation requires an anchor head, spec has a center head")]
    NotAnchorHead,
    #[error("raw map shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Anchors laid out row-major over the pre-head grid, then class, then yaw.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub resolution: (usize, usize),
    pub classes: usize,
    pub yaws: usize,
    pub anchors: Vec<Box3D>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Raw anchor-head maps. `cls_logits` has one channel per (anchor-in-cell,
/// class) pair; `box_residuals` has 7 channels per anchor-in-cell.
#[derive(Debug, Clone)]
pub struct RawAnchorMaps {
    pub cls_logits: DenseTensor2D,
    pub box_residuals: DenseTensor2D,
}

/// Raw center-head maps. `heatmap` is one sigmoid channel per class;
/// `regression` channels are offset (2), z (1), log-size (3), yaw sin/cos.
#[derive(Debug, Clone)]
pub struct RawCenterMaps {
    pub heatmap: DenseTensor2D,
    pub regression: DenseTensor2D,
}

/// Places one anchor per (cell, class, yaw) at cell centers, with
/// class-specific sizes and z-centers.
pub fn gen_anchors(
    resolution: (usize, usize),
    head: &HeadSpec,
    transform: &MetricTransform,
) -> Result<AnchorSet, HeadError> {
    if head.kind != HeadKind::Anchor {
        return Err(HeadError::NotAnchorHead);
    }
    let (w, h) = resolution;
    let mut anchors = Vec::with_capacity(w * h * head.classes.len() * head.yaws.len());
    for row in 0..h {
        for col in 0..w {
            let (cx, cy) = transform.cell_center(row, col);
            for a in &head.anchors {
                for &yaw in &head.yaws {
                    anchors.push(Box3D::new(
                        cx, cy, a.z_center, a.length, a.width, a.height, yaw,
                    ));
                }
            }
        }
    }
    Ok(AnchorSet {
        resolution,
        classes: head.classes.len(),
        yaws: head.yaws.len(),
        anchors,
    })
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Decodes anchor-head maps into detections.
///
/// With anchor diagonal `d = sqrt(l_a^2 + w_a^2)`:
/// `x = x_a + dx*d`, `y = y_a + dy*d`, `z = z_a + dz*h_a`,
/// `l = l_a*exp(dl)` (same for w, h), `yaw = wrap(yaw_a + dyaw)`.
/// Score is the sigmoid of the best class logit; detections below
/// `score_threshold` are dropped.
pub fn decode_anchor(
    raw: &RawAnchorMaps,
    anchors: &AnchorSet,
    score_threshold: f32,
) -> Result<Vec<Detection>, HeadError> {
    let (w, h) = anchors.resolution;
    let per_cell = anchors.classes * anchors.yaws;
    let n_classes = anchors.classes;
    if raw.cls_logits.width != w
        || raw.cls_logits.height != h
        || raw.box_residuals.width != w
        || raw.box_residuals.height != h
    {
        return Err(HeadError::ShapeMismatch(format!(
            "maps are {}x{}, anchors expect {}x{}",
            raw.cls_logits.width, raw.cls_logits.height, w, h
        )));
    }
    if raw.cls_logits.channels != per_cell * n_classes {
        return Err(HeadError::ShapeMismatch(format!(
            "cls map has {} channels, expected {}",
            raw.cls_logits.channels,
            per_cell * n_classes
        )));
    }
    if raw.box_residuals.channels != per_cell * 7 {
        return Err(HeadError::ShapeMismatch(format!(
            "box map has {} channels, expected {}",
            raw.box_residuals.channels,
            per_cell * 7
        )));
    }

    let mut out = Vec::new();
    for row in 0..h {
        for col in 0..w {
            for cell_anchor in 0..per_cell {
                let mut best_logit = f32::NEG_INFINITY;
                let mut best_class = 0u32;
                for class in 0..n_classes {
                    let logit = raw.cls_logits.get(cell_anchor * n_classes + class, row, col);
                    if logit > best_logit {
                        best_logit = logit;
                        best_class = class as u32;
                    }
                }
                let score = sigmoid(best_logit);
                if score < score_threshold {
                    continue;
                }
                let anchor_index = (row * w + col) * per_cell + cell_anchor;
                let anchor = &anchors.anchors[anchor_index];
                let r: Vec<f32> = (0..7)
                    .map(|j| raw.box_residuals.get(cell_anchor * 7 + j, row, col))
                    .collect();
                out.push(Detection {
                    box3d: decode_box(&r, anchor),
                    score,
                    class_id: best_class,
                });
            }
        }
    }
    Ok(out)
}

/// Applies a 7-vector of residuals (dx, dy, dz, dl, dw, dh, dyaw) to an
/// anchor.
pub fn decode_box(residuals: &[f32], anchor: &Box3D) -> Box3D {
    let d = (anchor.length * anchor.length + anchor.width * anchor.width).sqrt();
    Box3D::new(
        anchor.cx + residuals[0] * d,
        anchor.cy + residuals[1] * d,
        anchor.cz + residuals[2] * anchor.height,
        anchor.length * residuals[3].exp(),
        anchor.width * residuals[4].exp(),
        anchor.height * residuals[5].exp(),
        wrap_angle(anchor.yaw + residuals[6]),
    )
}

/// Algebraic inverse of `decode_box`; primarily an oracle for round-trip
/// checks and target construction.
pub fn encode_box(gt: &Box3D, anchor: &Box3D) -> [f32; 7] {
    let d = (anchor.length * anchor.length + anchor.width * anchor.width).sqrt();
    [
        (gt.cx - anchor.cx) / d,
        (gt.cy - anchor.cy) / d,
        (gt.cz - anchor.cz) / anchor.height,
        (gt.length / anchor.length).ln(),
        (gt.width / anchor.width).ln(),
        (gt.height / anchor.height).ln(),
        wrap_angle(gt.yaw - anchor.yaw),
    ]
}

/// Decodes center-head maps: per-class peaks are strict maxima of their 3x3
/// neighborhood with heatmap >= `peak_threshold`; the best `max_dets` by
/// score survive. Box center `x = x_min + (col + offset_x) * cell_size_x`
/// (same for y with rows), z direct, sizes from log-space, yaw from
/// (sin, cos).
pub fn decode_center(
    raw: &RawCenterMaps,
    transform: &MetricTransform,
    peak_threshold: f32,
    max_dets: usize,
) -> Vec<Detection> {
    let (h, w) = (raw.heatmap.height, raw.heatmap.width);
    let mut dets = Vec::new();
    for class in 0..raw.heatmap.channels {
        for row in 0..h {
            for col in 0..w {
                let v = raw.heatmap.get(class, row, col);
                if v < peak_threshold {
                    continue;
                }
                let mut is_peak = true;
                'scan: for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nr, nc) = (row as i64 + dr, col as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        if raw.heatmap.get(class, nr as usize, nc as usize) >= v {
                            is_peak = false;
                            break 'scan;
                        }
                    }
                }
                if !is_peak {
                    continue;
                }
                let reg = |ch: usize| raw.regression.get(ch, row, col);
                let cx = transform.x_min + (col as f32 + reg(0)) * transform.cell_size_x;
                let cy = transform.y_min + (row as f32 + reg(1)) * transform.cell_size_y;
                dets.push(Detection {
                    box3d: Box3D::new(
                        cx,
                        cy,
                        reg(2),
                        reg(3).exp(),
                        reg(4).exp(),
                        reg(5).exp(),
                        reg(7).atan2_inverse(reg(6)),
                    ),
                    score: v,
                    class_id: class as u32,
                });
            }
        }
    }
    sort_detections(&mut dets);
    dets.truncate(max_dets);
    dets
}

// f32::atan2 with the (sin, cos) argument order used by the regression map.
trait Atan2Inverse {
    fn atan2_inverse(self, sin: f32) -> f32;
}

impl Atan2Inverse for f32 {
    fn atan2_inverse(self, sin: f32) -> f32 {
        sin.atan2(self)
    }
}

/// Rotated BEV IoU via convex polygon clipping; z and height are ignored.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> f32 {
    let area_a = a.bev_area() as f64;
    let area_b = b.bev_area() as f64;
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let ca: Vec<[f64; 2]> = a
        .bev_corners()
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64])
        .collect();
    let cb: Vec<[f64; 2]> = b
        .bev_corners()
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64])
        .collect();
    let inter = polygon_area(&clip_polygon(&ca, &cb));
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    ((inter / union) as f32).clamp(0.0, 1.0)
}

// Sutherland-Hodgman clip of a convex CCW polygon against a convex CCW clip
// polygon.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let inside =
            |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        let intersect = |p: [f64; 2], q: [f64; 2]| -> [f64; 2] {
            // Solve cross(edge, p + t*(q - p) - a) = 0 for t.
            let edge = [b[0] - a[0], b[1] - a[1]];
            let dp = [q[0] - p[0], q[1] - p[1]];
            let denom = edge[0] * dp[1] - edge[1] * dp[0];
            if denom.abs() < 1e-30 {
                return p;
            }
            let t = (edge[0] * (a[1] - p[1]) - edge[1] * (a[0] - p[0])) / denom;
            [p[0] + t * dp[0], p[1] + t * dp[1]]
        };
        for j in 0..input.len() {
            let current = input[j];
            let previous = input[(j + input.len() - 1) % input.len()];
            let (cur_in, prev_in) = (inside(current), inside(previous));
            if cur_in {
                if !prev_in {
                    output.push(intersect(previous, current));
                }
                output.push(current);
            } else if prev_in {
                output.push(intersect(previous, current));
            }
        }
    }
    output
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    acc.abs() * 0.5
}

/// Deterministic detection order: score descending, ties broken by lower
/// box-center (cx, cy, cz) lexicographic order, then class.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.box3d.cx.total_cmp(&b.box3d.cx))
            .then(a.box3d.cy.total_cmp(&b.box3d.cy))
            .then(a.box3d.cz.total_cmp(&b.box3d.cz))
            .then(a.class_id.cmp(&b.class_id))
    });
}

/// Class-wise greedy NMS: processes detections in score order (ties broken
/// by box center), keeps one iff its rotated BEV IoU with every kept
/// same-class detection is below the threshold, then truncates to
/// `keep_limit`.
pub fn nms(dets: &[Detection], iou_threshold: f32, keep_limit: usize) -> Vec<Detection> {
    let mut ordered: Vec<Detection> = dets.to_vec();
    sort_detections(&mut ordered);
    let mut kept: Vec<Detection> = Vec::new();
    for cand in ordered {
        // Kept order is score-descending, so anything kept past the limit
        // would be truncated; stopping early is exact.
        if kept.len() >= keep_limit {
            break;
        }
        let cand_radius = 0.5
            * ((cand.box3d.length * cand.box3d.length + cand.box3d.width * cand.box3d.width)
                as f64)
                .sqrt();
        let overlaps = kept.iter().any(|k| {
            if k.class_id != cand.class_id {
                return false;
            }
            let dx = (k.box3d.cx - cand.box3d.cx) as f64;
            let dy = (k.box3d.cy - cand.box3d.cy) as f64;
            let k_radius = 0.5
                * ((k.box3d.length * k.box3d.length + k.box3d.width * k.box3d.width) as f64)
                    .sqrt();
            // Beyond the sum of half-diagonals the rectangles cannot touch.
            if dx * dx + dy * dy > (cand_radius + k_radius) * (cand_radius + k_radius) {
                return false;
            }
            rotated_iou_bev(&k.box3d, &cand.box3d) >= iou_threshold
        });
        if !overlaps {
            kept.push(cand);
        }
    }
    kept.truncate(keep_limit);
    kept
}
