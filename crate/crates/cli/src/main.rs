//! Command-line front end: scene synthesis, inference, benchmarking,
//! evaluation, and report emission.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sparsedet::archspec::{
    self, count_params, preset, spec_from_json, DetectorSpec, HeadKind, PostUpsample,
    PRESET_NAMES,
};
use sparsedet::costbench::{
    measure_latency, profile_cost, report, ReportFormat, ReportRow,
};
use sparsedet::heads::DetectionRecord;
use sparsedet::metrics::{evaluate, EvalConfig, SceneEval};
use sparsedet::network::{build, load_weights, save_weights, Detector};
use sparsedet::pipeline::detect;
use sparsedet::pointcloud::{
    load_cloud, load_labels, synth_scene, write_cloud, write_labels, BoxLabel, PointCloud,
    VoxelGridSpec,
};
use sparsedet::runtime::with_threads;

#[derive(Parser)]
#[command(
    name = "sparsedet",
    version,
    about = "Deterministic LiDAR 3D detector inference and cost benchmarking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the built-in architecture presets with their shapes and sizes.
    Presets,
    /// Generate a synthetic labeled scene corpus.
    Synth(SynthArgs),
    /// Run one detector over a cloud file and write detections JSON.
    Run(RunArgs),
    /// Profile and time a set of detectors on one scene.
    Bench(BenchArgs),
    /// Score detection files against label files (AP / APH / mAPH).
    Eval(EvalArgs),
}

#[derive(Args, Clone)]
struct GridArgs {
    /// Grid preset: "desk" (512x512x40 voxels) or "full" (1504x1504x40).
    #[arg(long, default_value = "desk", conflicts_with_all = ["grid_min", "grid_max", "voxel_size"])]
    grid: String,
    /// Custom range minimum "x,y,z" in meters (requires the other two).
    #[arg(long, requires_all = ["grid_max", "voxel_size"])]
    grid_min: Option<String>,
    /// Custom range maximum "x,y,z" in meters.
    #[arg(long, requires_all = ["grid_min", "voxel_size"])]
    grid_max: Option<String>,
    /// Custom voxel size "x,y,z" in meters.
    #[arg(long, requires_all = ["grid_min", "grid_max"])]
    voxel_size: Option<String>,
}

impl GridArgs {
    fn resolve(&self) -> Result<VoxelGridSpec> {
        let grid = if let (Some(lo), Some(hi), Some(vs)) =
            (&self.grid_min, &self.grid_max, &self.voxel_size)
        {
            VoxelGridSpec {
                range_min: parse_triple(lo)?,
                range_max: parse_triple(hi)?,
                voxel_size: parse_triple(vs)?,
            }
        } else {
            match self.grid.as_str() {
                "desk" => VoxelGridSpec::desk(),
                "full" => VoxelGridSpec::full_scale(),
                other => bail!("unknown grid preset '{other}' (expected desk or full)"),
            }
        };
        grid.validate().map_err(|e| anyhow!("invalid grid: {e}"))?;
        Ok(grid)
    }
}

fn parse_triple(s: &str) -> Result<[f32; 3]> {
    let parts: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("cannot parse '{s}' as x,y,z"))?;
    if parts.len() != 3 {
        bail!("expected three comma-separated values, got '{s}'");
    }
    Ok([parts[0], parts[1], parts[2]])
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of scenes to generate.
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    /// Objects per scene.
    #[arg(long, default_value_t = 12)]
    objects: usize,
    /// Per-class probabilities "vehicle,pedestrian,cyclist".
    #[arg(long, default_value = "0.5,0.3,0.2")]
    class_mix: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct ModelArgs {
    /// Built-in preset name (see `presets`).
    #[arg(long, conflicts_with = "spec")]
    preset: Option<String>,
    /// Detector spec JSON file (overrides any preset).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Head kind for presets: "anchor" or "center".
    #[arg(long, default_value = "anchor", conflicts_with = "spec")]
    head: String,
    /// Weight synthesis seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Load weights from a file instead of synthesizing them.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Save the detector's weights after building.
    #[arg(long)]
    save_weights: Option<PathBuf>,
    /// Override the head's score threshold.
    #[arg(long)]
    score_threshold: Option<f32>,
    /// Override the head's NMS IoU threshold.
    #[arg(long)]
    nms_iou: Option<f32>,
    /// Override the pre-NMS candidate budget.
    #[arg(long)]
    pre_nms_top_k: Option<usize>,
    /// Override the post-NMS detection budget.
    #[arg(long)]
    post_nms_top_k: Option<usize>,
}

impl ModelArgs {
    fn head_kind(&self) -> Result<HeadKind> {
        match self.head.as_str() {
            "anchor" => Ok(HeadKind::Anchor),
            "center" => Ok(HeadKind::Center),
            other => bail!("unknown head '{other}' (expected anchor or center)"),
        }
    }

    fn resolve_spec(&self) -> Result<DetectorSpec> {
        let mut spec = if let Some(path) = &self.spec {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read spec file {}", path.display()))?;
            spec_from_json(&text).map_err(|e| anyhow!("{e}"))?
        } else if let Some(name) = &self.preset {
            preset(name, self.head_kind()?).map_err(|e| anyhow!("{e}"))?
        } else {
            bail!("one of --preset or --spec is required");
        };
        if let Some(v) = self.score_threshold {
            spec.head.score_threshold = v;
        }
        if let Some(v) = self.nms_iou {
            spec.head.nms_iou = v;
        }
        if let Some(v) = self.pre_nms_top_k {
            spec.head.pre_nms_top_k = v;
        }
        if let Some(v) = self.post_nms_top_k {
            spec.head.post_nms_top_k = v;
        }
        let violations = archspec::validate(&spec);
        if !violations.is_empty() {
            bail!("invalid detector spec: {violations:?}");
        }
        Ok(spec)
    }

    fn build_detector(&self, spec: &DetectorSpec) -> Result<Detector> {
        let det = if let Some(path) = &self.weights {
            load_weights(spec, path).map_err(|e| anyhow!("{e}"))?
        } else {
            build(spec, self.seed).map_err(|e| anyhow!("{e}"))?
        };
        if let Some(path) = &self.save_weights {
            save_weights(&det, path).map_err(|e| anyhow!("{e}"))?;
        }
        Ok(det)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Input cloud file (flat binary x,y,z,intensity f32 records).
    #[arg(long)]
    cloud: PathBuf,
    /// Output detections JSON ("-" for stdout).
    #[arg(long, default_value = "-")]
    out: String,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated preset names.
    #[arg(long, value_delimiter = ',', required = true)]
    presets: Vec<String>,
    /// Head kind for all presets.
    #[arg(long, default_value = "anchor")]
    head: String,
    /// Scene cloud file to benchmark on.
    #[arg(long)]
    scene: PathBuf,
    /// Optional label file; adds mAPH columns to the report.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 50)]
    runs: usize,
    /// Report format: csv, json, or svg.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Output path ("-" for stdout).
    #[arg(long, default_value = "-")]
    out: String,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Weight synthesis seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Detection JSON files, one per scene.
    #[arg(long, value_delimiter = ',', required = true)]
    dets: Vec<PathBuf>,
    /// Label JSON files, paired with --dets by position.
    #[arg(long, value_delimiter = ',', required = true)]
    labels: Vec<PathBuf>,
    /// Per-class IoU thresholds "vehicle,pedestrian,cyclist".
    #[arg(long, default_value = "0.7,0.5,0.5")]
    iou_thresholds: String,
    /// Number of recall sample points.
    #[arg(long, default_value_t = 101)]
    recall_points: usize,
    /// Output format: json or csv.
    #[arg(long, default_value = "json")]
    format: String,
    /// Output path ("-" for stdout).
    #[arg(long, default_value = "-")]
    out: String,
}

// Usage/config failures exit 2, runtime failures exit 1.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn runtime(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Presets => cmd_presets().map_err(runtime),
        Command::Synth(args) => cmd_synth(args),
        Command::Run(args) => cmd_run(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn pre_head_formula(spec: &DetectorSpec) -> String {
    let f3 = archspec::downsample_factor_3d(spec);
    let s1_up = spec.stages2d[0].upsample_stride;
    let post = if spec.post_upsample == PostUpsample::Bilinear2x {
        2
    } else {
        1
    };
    let net = f3 / (s1_up * post).min(f3);
    if net <= 1 {
        "(X, Y)".to_string()
    } else {
        format!("(X/{net}, Y/{net})")
    }
}

fn cmd_presets() -> Result<()> {
    println!(
        "{:<14} {:<7} {:<14} {:<18} {:<9} {:<10} {:<13} {:>10}",
        "name", "head", "3d-depths", "3d-widths", "2d-depths", "2d-widths", "pre-head", "params"
    );
    for name in PRESET_NAMES {
        for kind in [HeadKind::Anchor, HeadKind::Center] {
            let spec = preset(name, kind).map_err(|e| anyhow!("{e}"))?;
            let join = |v: Vec<usize>| {
                v.iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            println!(
                "{:<14} {:<7} {:<14} {:<18} {:<9} {:<10} {:<13} {:>10}",
                name,
                match kind {
                    HeadKind::Anchor => "anchor",
                    HeadKind::Center => "center",
                },
                join(spec.stages3d.iter().map(|s| s.depth).collect()),
                join(spec.stages3d.iter().map(|s| s.width).collect()),
                join(spec.stages2d.iter().map(|s| s.depth).collect()),
                join(spec.stages2d.iter().map(|s| s.width).collect()),
                pre_head_formula(&spec),
                count_params(&spec).map_err(|e| anyhow!("{e}"))?
            );
        }
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), Failure> {
    let grid = args.grid.resolve().map_err(usage)?;
    let mix_parts: Vec<f64> = args
        .class_mix
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| usage(anyhow!("cannot parse --class-mix: {e}")))?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))
        .map_err(runtime)?;

    let mut manifest_scenes = Vec::new();
    for i in 0..args.scenes {
        let scene_seed = args.seed.wrapping_add(i as u64);
        let scene = synth_scene(scene_seed, args.objects, &mix_parts, &grid)
            .map_err(|e| runtime(anyhow!("{e}")))?;
        let cloud_name = format!("scene_{i:03}.bin");
        let label_name = format!("scene_{i:03}.json");
        write_cloud(&args.out.join(&cloud_name), &scene.cloud)
            .map_err(|e| runtime(anyhow!("{e}")))?;
        let labels: Vec<BoxLabel> = scene
            .boxes
            .iter()
            .map(|(b, c)| BoxLabel::from_box(b, *c))
            .collect();
        write_labels(&args.out.join(&label_name), &labels)
            .map_err(|e| runtime(anyhow!("{e}")))?;
        manifest_scenes.push(serde_json::json!({
            "cloud": cloud_name,
            "labels": label_name,
            "seed": scene_seed,
            "points": scene.cloud.len(),
            "boxes": scene.boxes.len(),
        }));
    }
    let manifest = serde_json::json!({
        "seed": args.seed,
        "scenes": args.scenes,
        "objects_per_scene": args.objects,
        "class_mix": mix_parts,
        "grid": grid,
        "files": manifest_scenes,
    });
    fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest"),
    )
    .map_err(|e| runtime(anyhow!("{e}")))?;
    Ok(())
}

fn write_output(path: &str, content: &str) -> Result<()> {
    if path == "-" {
        print!("{content}");
        Ok(())
    } else {
        fs::write(Path::new(path), content).with_context(|| format!("cannot write {path}"))
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let grid = args.grid.resolve().map_err(usage)?;
    let spec = args.model.resolve_spec().map_err(usage)?;
    if !args.cloud.exists() {
        return Err(usage(anyhow!(
            "cloud file {} does not exist",
            args.cloud.display()
        )));
    }
    let det = args.model.build_detector(&spec).map_err(runtime)?;
    let cloud = load_cloud(&args.cloud).map_err(|e| runtime(anyhow!("{e}")))?;
    let output = with_threads(args.threads, || detect(&det, &cloud, &grid))
        .map_err(|e| runtime(anyhow!("{e}")))?;
    let records: Vec<DetectionRecord> = output
        .detections
        .iter()
        .map(DetectionRecord::from_detection)
        .collect();
    let mut text = serde_json::to_string_pretty(&records).expect("detections");
    text.push('\n');
    write_output(&args.out, &text).map_err(runtime)?;
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    let grid = args.grid.resolve().map_err(usage)?;
    let kind = match args.head.as_str() {
        "anchor" => HeadKind::Anchor,
        "center" => HeadKind::Center,
        other => return Err(usage(anyhow!("unknown head '{other}'"))),
    };
    let format = ReportFormat::parse(&args.format).map_err(|e| usage(anyhow!("{e}")))?;
    if !args.scene.exists() {
        return Err(usage(anyhow!(
            "scene file {} does not exist",
            args.scene.display()
        )));
    }
    let cloud = load_cloud(&args.scene).map_err(|e| runtime(anyhow!("{e}")))?;
    let labels: Option<Vec<BoxLabel>> = match &args.labels {
        Some(path) => Some(load_labels(path).map_err(|e| runtime(anyhow!("{e}")))?),
        None => None,
    };

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for name in &args.presets {
        let row = bench_one(name, kind, &args, &grid, &cloud, labels.as_deref());
        match row {
            Ok(row) => rows.push(row),
            Err(e) => {
                eprintln!("error: preset {name}: {e:#}");
                failures.push(name.clone());
            }
        }
    }
    if rows.is_empty() {
        return Err(runtime(anyhow!("every benchmark configuration failed")));
    }
    let doc = report(&rows, format).map_err(|e| runtime(anyhow!("{e}")))?;
    write_output(&args.out, &doc).map_err(runtime)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(runtime(anyhow!("failed configurations: {failures:?}")))
    }
}

fn bench_one(
    name: &str,
    kind: HeadKind,
    args: &BenchArgs,
    grid: &VoxelGridSpec,
    cloud: &PointCloud,
    labels: Option<&[BoxLabel]>,
) -> Result<ReportRow> {
    let spec = preset(name, kind).map_err(|e| anyhow!("{e}"))?;
    let profile = profile_cost(&spec, grid, cloud).map_err(|e| anyhow!("{e}"))?;
    let det = build(&spec, args.seed).map_err(|e| anyhow!("{e}"))?;
    let latency = with_threads(args.threads, || {
        measure_latency(&det, cloud, grid, args.warmup, args.runs)
    })
    .map_err(|e| anyhow!("{e}"))?;
    let eval = match labels {
        Some(labels) => {
            let output =
                with_threads(args.threads, || detect(&det, cloud, grid)).map_err(|e| anyhow!("{e}"))?;
            let scene = SceneEval {
                detections: output.detections,
                labels: labels.iter().map(|l| (l.to_box(), l.class)).collect(),
            };
            Some(evaluate(&[scene], &EvalConfig::default()).map_err(|e| anyhow!("{e}"))?)
        }
        None => None,
    };
    Ok(ReportRow {
        label: format!(
            "{name}-{}",
            match kind {
                HeadKind::Anchor => "anchor",
                HeadKind::Center => "center",
            }
        ),
        profile,
        latency,
        eval,
    })
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    if args.dets.len() != args.labels.len() {
        return Err(usage(anyhow!(
            "{} detection files but {} label files",
            args.dets.len(),
            args.labels.len()
        )));
    }
    let thresholds: Vec<f32> = args
        .iou_thresholds
        .split(',')
        .map(|p| p.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| usage(anyhow!("cannot parse --iou-thresholds: {e}")))?;
    let config = EvalConfig {
        iou_thresholds: thresholds,
        recall_points: args.recall_points,
        ..EvalConfig::default()
    };

    let mut scenes = Vec::new();
    for (det_path, label_path) in args.dets.iter().zip(&args.labels) {
        let det_text = fs::read_to_string(det_path)
            .with_context(|| format!("cannot read {}", det_path.display()))
            .map_err(usage)?;
        let records: Vec<DetectionRecord> = serde_json::from_str(&det_text)
            .with_context(|| format!("bad detection schema in {}", det_path.display()))
            .map_err(runtime)?;
        let labels = load_labels(label_path)
            .with_context(|| format!("cannot read {}", label_path.display()))
            .map_err(usage)?;
        scenes.push(SceneEval {
            detections: records.iter().map(|r| r.to_detection()).collect(),
            labels: labels.iter().map(|l| (l.to_box(), l.class)).collect(),
        });
    }
    let report = evaluate(&scenes, &config).map_err(|e| runtime(anyhow!("{e}")))?;
    let doc = match args.format.as_str() {
        "json" => {
            let mut t = report.to_json();
            t.push('\n');
            t
        }
        "csv" => format!("{}\n{}\n", report.csv_header(), report.csv_row()),
        other => return Err(usage(anyhow!("unknown format '{other}'"))),
    };
    write_output(&args.out, &doc).map_err(runtime)?;
    Ok(())
}
