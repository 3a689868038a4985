//! Declarative detector architectures: the A-series backbone presets, spec
//! validation, derived pre-head resolution, and analytic parameter / FLOP
//! counting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{Activation, ConvMode, KernelShape};
use crate::pointcloud::VoxelGridSpec;

/// Vertical voxel extent the architecture family is defined against. The
/// BEV channel count after height concatenation is
/// `width_3d_last * (NOMINAL_GRID_Z / 2^downsamples)`, so parameter counts
/// are well-defined without a runtime grid; forwards check the actual grid
/// against this extent.
pub const NOMINAL_GRID_Z: usize = 40;

/// Channels of the raw voxel features entering the 3D backbone
/// (mean x, y, z, intensity).
pub const VOXEL_FEATURE_CHANNELS: usize = 4;

/// Regression channels of the center head: offset (2), z (1), log-size (3),
/// yaw sin/cos (2).
pub const CENTER_REGRESSION_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage3DSpec {
    pub depth: usize,
    pub width: usize,
    pub downsample: bool,
    pub residual: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2DSpec {
    pub depth: usize,
    pub width: usize,
    pub downsample: bool,
    /// Stride of the output-branch transposed convolution; 1 means a plain
    /// 1x1 transform. Must restore the branch to the common pre-head
    /// resolution.
    pub upsample_stride: usize,
    pub residual: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Anchor,
    Center,
}

/// Per-class anchor geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassAnchor {
    pub length: f32,
    pub width: f32,
    pub height: f32,
    pub z_center: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub classes: Vec<String>,
    pub anchors: Vec<ClassAnchor>,
    pub yaws: Vec<f32>,
    pub score_threshold: f32,
    pub nms_iou: f32,
    pub pre_nms_top_k: usize,
    pub post_nms_top_k: usize,
}

impl HeadSpec {
    /// Default three-class head; anchor geometry and thresholds are project
    /// conventions, overridable via spec files or CLI flags.
    pub fn default_for(kind: HeadKind) -> Self {
        Self {
            kind,
            classes: crate::pointcloud::CLASS_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            anchors: vec![
                ClassAnchor {
                    length: 4.7,
                    width: 2.1,
                    height: 1.7,
                    z_center: 0.0,
                },
                ClassAnchor {
                    length: 0.9,
                    width: 0.9,
                    height: 1.7,
                    z_center: 0.0,
                },
                ClassAnchor {
                    length: 1.8,
                    width: 0.8,
                    height: 1.7,
                    z_center: 0.0,
                },
            ],
            yaws: vec![0.0, std::f32::consts::FRAC_PI_2],
            score_threshold: 0.1,
            nms_iou: 0.7,
            pre_nms_top_k: 4096,
            post_nms_top_k: 500,
        }
    }

    /// Anchors per BEV cell (classes x yaws). Zero for center heads.
    pub fn anchors_per_cell(&self) -> usize {
        match self.kind {
            HeadKind::Anchor => self.classes.len() * self.yaws.len(),
            HeadKind::Center => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PostUpsample {
    None,
    Bilinear2x,
}

/// Complete declarative architecture; networks, parameter counts, and FLOP
/// counts all derive from this single description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub name: String,
    pub stages3d: Vec<Stage3DSpec>,
    pub stages2d: Vec<Stage2DSpec>,
    pub post_upsample: PostUpsample,
    pub head: HeadSpec,
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("invalid detector spec: {0:?}")]
    Invalid(Vec<String>),
    #[error(
        "grid dims {dims:?} are not divisible by the downsample factors \
         (3d x{factor_3d}, 2d x{factor_2d})"
    )]
    NonDivisibleGrid {
        dims: [usize; 3],
        factor_3d: usize,
        factor_2d: usize,
    },
    #[error("spec JSON: {0}")]
    Json(String),
}

/// Names of the built-in presets.
pub const PRESET_NAMES: [&str; 13] = [
    "A0",
    "A0-deep",
    "A0-wide",
    "A0-d&w",
    "A0+Upsample",
    "A0+Upsample×2",
    "A0-deep_res",
    "A0-wide_res",
    "A0-d&w_res",
    "A1",
    "A1_res",
    "A2",
    "A2_res",
];

struct PresetDef {
    depths3d: &'static [usize],
    widths3d: &'static [usize],
    depths2d: [usize; 2],
    widths2d: [usize; 2],
    upsample: [usize; 2],
    post_upsample: PostUpsample,
    residual: bool,
}

fn preset_def(name: &str) -> Option<PresetDef> {
    let base = |depths3d, widths3d, depths2d, widths2d| PresetDef {
        depths3d,
        widths3d,
        depths2d,
        widths2d,
        upsample: [1, 2],
        post_upsample: PostUpsample::None,
        residual: false,
    };
    let def = match name {
        "A0" => base(&[2, 3, 3, 3], &[16, 32, 64, 64], [6, 6], [128, 256]),
        "A0-deep" => base(&[8, 12, 12, 12], &[16, 32, 64, 64], [24, 24], [128, 256]),
        "A0-wide" => base(&[2, 3, 3, 3], &[32, 64, 128, 128], [6, 6], [256, 512]),
        "A0-d&w" => base(&[3, 5, 5, 5], &[28, 56, 112, 112], [9, 9], [224, 448]),
        "A1" => base(&[2, 4, 4], &[32, 64, 64], [6, 6], [128, 256]),
        "A2" => base(&[3, 6, 6], &[48, 96, 144], [12, 12], [128, 256]),
        "A0+Upsample" => PresetDef {
            upsample: [2, 4],
            ..base(&[2, 3, 3, 3], &[16, 32, 64, 64], [6, 6], [128, 256])
        },
        "A0+Upsample×2" => PresetDef {
            upsample: [2, 4],
            post_upsample: PostUpsample::Bilinear2x,
            ..base(&[2, 3, 3, 3], &[16, 32, 64, 64], [6, 6], [128, 256])
        },
        _ => {
            if let Some(stem) = name.strip_suffix("_res") {
                let mut def = preset_def(stem)?;
                def.residual = true;
                return Some(def);
            }
            return None;
        }
    };
    Some(def)
}

/// Builds a named preset with the given head kind. ASCII alias
/// "A0+Upsamplex2" is accepted for the x2 variant.
pub fn preset(name: &str, head: HeadKind) -> Result<DetectorSpec, SpecError> {
    let canonical = if name == "A0+Upsamplex2" {
        "A0+Upsample×2"
    } else {
        name
    };
    let def =
        preset_def(canonical).ok_or_else(|| SpecError::UnknownPreset(name.to_string()))?;
    let stages3d = def
        .depths3d
        .iter()
        .zip(def.widths3d)
        .enumerate()
        .map(|(i, (&depth, &width))| Stage3DSpec {
            depth,
            width,
            downsample: i > 0,
            residual: def.residual,
        })
        .collect();
    let stages2d = (0..2)
        .map(|i| Stage2DSpec {
            depth: def.depths2d[i],
            width: def.widths2d[i],
            downsample: i > 0,
            upsample_stride: def.upsample[i],
            residual: def.residual,
        })
        .collect();
    Ok(DetectorSpec {
        name: canonical.to_string(),
        stages3d,
        stages2d,
        post_upsample: def.post_upsample,
        head: HeadSpec::default_for(head),
    })
}

/// Checks every spec invariant, returning all violations rather than the
/// first.
pub fn validate(spec: &DetectorSpec) -> Vec<String> {
    let mut errs = Vec::new();
    if spec.stages3d.is_empty() {
        errs.push("spec must have at least one 3D stage".to_string());
    }
    if spec.stages2d.is_empty() {
        errs.push("spec must have at least one 2D stage".to_string());
    }
    if let Some(first) = spec.stages3d.first() {
        if first.downsample {
            errs.push("first 3D stage must not downsample".to_string());
        }
    }
    for (i, s) in spec.stages3d.iter().enumerate() {
        if s.depth == 0 {
            errs.push(format!("3D stage {} has depth 0", i + 1));
        }
        if s.width == 0 {
            errs.push(format!("3D stage {} has width 0", i + 1));
        }
    }
    if let Some(first) = spec.stages2d.first() {
        if first.downsample {
            errs.push("first 2D stage must not downsample".to_string());
        }
    }
    if spec.stages2d.len() >= 2 && !spec.stages2d[1].downsample {
        errs.push("second 2D stage must downsample".to_string());
    }
    let mut cumulative_down = 1usize;
    let s1_up = spec.stages2d.first().map(|s| s.upsample_stride).unwrap_or(1);
    for (i, s) in spec.stages2d.iter().enumerate() {
        if s.depth == 0 {
            errs.push(format!("2D stage {} has depth 0", i + 1));
        }
        if s.width == 0 {
            errs.push(format!("2D stage {} has width 0", i + 1));
        }
        if s.upsample_stride == 0 {
            errs.push(format!("2D stage {} has upsample_stride 0", i + 1));
        }
        if s.downsample {
            cumulative_down *= 2;
        }
        if s.upsample_stride != s1_up * cumulative_down {
            errs.push(format!(
                "2D stage {} upsample_stride {} does not restore the common \
                 pre-head resolution (expected {})",
                i + 1,
                s.upsample_stride,
                s1_up * cumulative_down
            ));
        }
    }
    let f3 = downsample_factor_3d(spec);
    if NOMINAL_GRID_Z % f3 != 0 {
        errs.push(format!(
            "nominal vertical extent {NOMINAL_GRID_Z} is not divisible by the \
             3D downsample factor {f3}"
        ));
    }
    let head = &spec.head;
    if head.classes.is_empty() {
        errs.push("head must define at least one class".to_string());
    }
    for (name, v) in [
        ("score_threshold", head.score_threshold),
        ("nms_iou", head.nms_iou),
    ] {
        if !(0.0..=1.0).contains(&v) {
            errs.push(format!("head {name} {v} outside [0, 1]"));
        }
    }
    if head.kind == HeadKind::Anchor {
        if head.anchors.len() != head.classes.len() {
            errs.push(format!(
                "anchor head needs one anchor per class ({} classes, {} anchors)",
                head.classes.len(),
                head.anchors.len()
            ));
        }
        if head.yaws.is_empty() {
            errs.push("anchor head needs a non-empty yaw set".to_string());
        }
    }
    errs
}

/// 2^(number of downsampling 3D stages).
pub fn downsample_factor_3d(spec: &DetectorSpec) -> usize {
    1 << spec.stages3d.iter().filter(|s| s.downsample).count()
}

/// 2^(number of downsampling 2D stages).
pub fn downsample_factor_2d(spec: &DetectorSpec) -> usize {
    1 << spec.stages2d.iter().filter(|s| s.downsample).count()
}

/// Channels entering the 2D backbone: last 3D width times the number of
/// remaining height planes (pure concatenation along z).
pub fn bev_input_channels(spec: &DetectorSpec) -> usize {
    let last = spec.stages3d.last().expect("validated spec");
    last.width * (NOMINAL_GRID_Z / downsample_factor_3d(spec))
}

/// Channel width of the concatenated pre-head features: sum of the 2D stage
/// widths (one branch per stage).
pub fn pre_head_channels(spec: &DetectorSpec) -> usize {
    spec.stages2d.iter().map(|s| s.width).sum()
}

/// Spatial size (W, H) of the pre-head feature map for `grid`.
pub fn pre_head_resolution(
    spec: &DetectorSpec,
    grid: &VoxelGridSpec,
) -> Result<(usize, usize), SpecError> {
    let f3 = downsample_factor_3d(spec);
    let f2 = downsample_factor_2d(spec);
    let [x, y, _] = grid.dims();
    if x % (f3 * f2) != 0 || y % (f3 * f2) != 0 {
        return Err(SpecError::NonDivisibleGrid {
            dims: grid.dims(),
            factor_3d: f3,
            factor_2d: f2,
        });
    }
    let s1_up = spec.stages2d[0].upsample_stride;
    let post = match spec.post_upsample {
        PostUpsample::None => 1,
        PostUpsample::Bilinear2x => 2,
    };
    Ok((x / f3 * s1_up * post, y / f3 * s1_up * post))
}

/// Where a planned layer sits in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Backbone3d { stage: usize },
    Backbone2d { stage: usize },
    BranchTransform { stage: usize },
    HeadClsLogits,
    HeadBoxResiduals,
    HeadHeatmap,
    HeadRegression,
}

/// One convolution layer derived from a `DetectorSpec`. The plan order is
/// canonical (3D stages, 2D stages, branch transforms, head) and doubles as
/// the weight-substream index order.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedLayer {
    pub name: String,
    pub role: LayerRole,
    pub kernel: KernelShape,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub mode: ConvMode,
    pub bias: bool,
    pub norm: bool,
    pub activation: Activation,
    /// For the closing layer of a residual block: global index of the
    /// block's opening layer; the opening layer's input is added to this
    /// layer's output, followed by relu.
    pub skip_from: Option<usize>,
}

impl PlannedLayer {
    pub fn param_count(&self) -> u64 {
        layer_param_count(
            self.kernel.volume(),
            self.in_channels,
            self.out_channels,
            self.bias,
            self.norm,
        )
    }
}

/// Learnable scalars of one convolution layer:
/// `kernel_volume * Cin * Cout + Cout (bias) + 2 * Cout (norm affine)`.
pub fn layer_param_count(
    kernel_volume: usize,
    cin: usize,
    cout: usize,
    bias: bool,
    norm: bool,
) -> u64 {
    let mut n = (kernel_volume * cin * cout) as u64;
    if bias {
        n += cout as u64;
    }
    if norm {
        n += 2 * cout as u64;
    }
    n
}

/// Expands a spec into its canonical layer list.
///
/// Within each stage the leading layer (strided and/or channel-changing) is
/// plain; in residual stages the remaining stride-1 layers pair into
/// identity-skip blocks and any unpaired trailing layer stays plain.
pub fn layer_plan(spec: &DetectorSpec) -> Result<Vec<PlannedLayer>, SpecError> {
    let errs = validate(spec);
    if !errs.is_empty() {
        return Err(SpecError::Invalid(errs));
    }

    let mut plan: Vec<PlannedLayer> = Vec::new();
    let pair_residuals = |plan: &mut Vec<PlannedLayer>, stage_first: usize, residual: bool| {
        if !residual {
            return;
        }
        // Layers after the stage's leading layer, taken two at a time.
        let mut i = stage_first + 1;
        while i + 1 < plan.len() {
            plan[i + 1].skip_from = Some(i);
            plan[i + 1].activation = Activation::None;
            i += 2;
        }
    };

    let mut cin = VOXEL_FEATURE_CHANNELS;
    for (si, stage) in spec.stages3d.iter().enumerate() {
        let stage_first = plan.len();
        for li in 0..stage.depth {
            let leading = li == 0;
            let strided = leading && stage.downsample;
            plan.push(PlannedLayer {
                name: format!("3d.s{}.l{}", si + 1, li),
                role: LayerRole::Backbone3d { stage: si },
                kernel: KernelShape::Spatial3d([3, 3, 3]),
                stride: if strided { 2 } else { 1 },
                padding: 1,
                in_channels: if leading { cin } else { stage.width },
                out_channels: stage.width,
                mode: if strided {
                    ConvMode::StridedSparse
                } else {
                    ConvMode::Submanifold
                },
                bias: true,
                norm: true,
                activation: Activation::Relu,
                skip_from: None,
            });
        }
        pair_residuals(&mut plan, stage_first, stage.residual);
        cin = stage.width;
    }

    let mut cin2d = bev_input_channels(spec);
    for (si, stage) in spec.stages2d.iter().enumerate() {
        let stage_first = plan.len();
        for li in 0..stage.depth {
            let leading = li == 0;
            // The stage-1 leading layer is a 1x1 channel adapter projecting
            // the tall concatenated BEV stack down to the stage width;
            // later stages lead with a strided 3x3.
            let (kernel, stride, padding) = if leading && si == 0 {
                ([1, 1], 1, 0)
            } else if leading && stage.downsample {
                ([3, 3], 2, 1)
            } else {
                ([3, 3], 1, 1)
            };
            plan.push(PlannedLayer {
                name: format!("2d.s{}.l{}", si + 1, li),
                role: LayerRole::Backbone2d { stage: si },
                kernel: KernelShape::Spatial2d(kernel),
                stride,
                padding,
                in_channels: if leading { cin2d } else { stage.width },
                out_channels: stage.width,
                mode: ConvMode::Dense,
                bias: true,
                norm: true,
                activation: Activation::Relu,
                skip_from: None,
            });
        }
        pair_residuals(&mut plan, stage_first, stage.residual);
        cin2d = stage.width;
    }

    for (si, stage) in spec.stages2d.iter().enumerate() {
        let up = stage.upsample_stride;
        let (kernel, mode) = if up == 1 {
            (KernelShape::Spatial2d([1, 1]), ConvMode::Dense)
        } else {
            (KernelShape::Spatial2d([up, up]), ConvMode::Transposed)
        };
        plan.push(PlannedLayer {
            name: format!("branch.s{}", si + 1),
            role: LayerRole::BranchTransform { stage: si },
            kernel,
            stride: up,
            padding: 0,
            in_channels: stage.width,
            out_channels: stage.width,
            mode,
            bias: true,
            norm: true,
            activation: Activation::None,
            skip_from: None,
        });
    }

    let pre_c = pre_head_channels(spec);
    let head = &spec.head;
    let head_layer = |name: &str, role, cout| PlannedLayer {
        name: name.to_string(),
        role,
        kernel: KernelShape::Spatial2d([1, 1]),
        stride: 1,
        padding: 0,
        in_channels: pre_c,
        out_channels: cout,
        mode: ConvMode::Dense,
        bias: true,
        norm: false,
        activation: Activation::None,
        skip_from: None,
    };
    match head.kind {
        HeadKind::Anchor => {
            let per_cell = head.anchors_per_cell();
            plan.push(head_layer(
                "head.cls",
                LayerRole::HeadClsLogits,
                per_cell * head.classes.len(),
            ));
            plan.push(head_layer(
                "head.box",
                LayerRole::HeadBoxResiduals,
                per_cell * 7,
            ));
        }
        HeadKind::Center => {
            plan.push(head_layer(
                "head.heatmap",
                LayerRole::HeadHeatmap,
                head.classes.len(),
            ));
            plan.push(head_layer(
                "head.reg",
                LayerRole::HeadRegression,
                CENTER_REGRESSION_CHANNELS,
            ));
        }
    }
    Ok(plan)
}

/// Analytic learnable-parameter total; independent of grid size and equal
/// to the instantiated network's actual parameter count.
pub fn count_params(spec: &DetectorSpec) -> Result<u64, SpecError> {
    Ok(layer_plan(spec)?.iter().map(|l| l.param_count()).sum())
}

/// Per-layer dense-equivalent FLOPs (2 * kernel_volume * Cin * Cout * output
/// sites, sparse 3D layers treated as dense). The bilinear post-upsample is
/// interpolation, not convolution, and contributes no entry.
pub fn flops_per_layer(
    spec: &DetectorSpec,
    grid: &VoxelGridSpec,
) -> Result<Vec<(PlannedLayer, u64)>, SpecError> {
    let plan = layer_plan(spec)?;
    let f3 = downsample_factor_3d(spec);
    let f2 = downsample_factor_2d(spec);
    let [gx, gy, gz] = grid.dims();
    if gx % (f3 * f2) != 0 || gy % (f3 * f2) != 0 || gz % f3 != 0 {
        return Err(SpecError::NonDivisibleGrid {
            dims: grid.dims(),
            factor_3d: f3,
            factor_2d: f2,
        });
    }
    let (pre_w, pre_h) = pre_head_resolution(spec, grid)?;

    let mut dims3 = [gx, gy, gz];
    // The 2D backbone starts at the post-3D BEV resolution.
    let mut hw = (gy / f3, gx / f3);
    let mut stage_out: Vec<(usize, usize)> = Vec::new();
    let mut out = Vec::with_capacity(plan.len());
    for layer in plan {
        let sites: u64 = match layer.role {
            LayerRole::Backbone3d { .. } => {
                if layer.stride == 2 {
                    for d in dims3.iter_mut() {
                        *d /= 2;
                    }
                }
                (dims3[0] * dims3[1] * dims3[2]) as u64
            }
            LayerRole::Backbone2d { stage } => {
                if layer.stride == 2 {
                    hw = (hw.0 / 2, hw.1 / 2);
                }
                if stage_out.len() <= stage {
                    stage_out.resize(stage + 1, hw);
                }
                stage_out[stage] = hw;
                (hw.0 * hw.1) as u64
            }
            LayerRole::BranchTransform { stage } => {
                // Non-overlapping transposed conv touches each input cell
                // once per kernel tap, so the input extent is the site count.
                let (h, w) = stage_out[stage];
                (h * w) as u64
            }
            _ => (pre_w * pre_h) as u64,
        };
        let flops = 2 * layer.kernel.volume() as u64
            * layer.in_channels as u64
            * layer.out_channels as u64
            * sites;
        out.push((layer, flops));
    }
    Ok(out)
}

/// Dense-equivalent FLOP total over all layers; an upper bound on sparse
/// work.
pub fn count_flops_dense(spec: &DetectorSpec, grid: &VoxelGridSpec) -> Result<u64, SpecError> {
    Ok(flops_per_layer(spec, grid)?.iter().map(|(_, f)| f).sum())
}

/// Serializes a spec to JSON.
pub fn spec_to_json(spec: &DetectorSpec) -> String {
    serde_json::to_string_pretty(spec).expect("spec serialization")
}

/// Parses a spec from JSON; unknown fields are rejected.
pub fn spec_from_json(text: &str) -> Result<DetectorSpec, SpecError> {
    serde_json::from_str(text).map_err(|e| SpecError::Json(e.to_string()))
}
