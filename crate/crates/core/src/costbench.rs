//! Cost-aware measurement: the batch-1 latency protocol, analytic and
//! measured cost profiles, Pareto-front computation, and report emission
//! (CSV, JSON, SVG).

use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::archspec::{self, DetectorSpec, SpecError};
use crate::metrics::EvalReport;
use crate::network::{build, Detector};
use crate::pipeline::{detect, PipelineError};
use crate::pointcloud::{PointCloud, VoxelGridSpec};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("forward failure in run {run}: {source}")]
    RunFailed {
        run: usize,
        #[source]
        source: PipelineError,
    },
    #[error("unknown report format '{0}' (expected csv, json, or svg)")]
    UnknownFormat(String),
    #[error("report needs at least one row")]
    EmptyReport,
}

/// Median / mean / p95 of a sample list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SummaryStats {
    pub median_ms: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

/// Summarizes latency samples; callers keep the raw list alongside.
pub fn summarize(samples_ms: &[f64]) -> SummaryStats {
    assert!(!samples_ms.is_empty());
    let mut sorted = samples_ms.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let median_ms = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mean_ms = sorted.iter().sum::<f64>() / n as f64;
    let p95_idx = ((0.95 * n as f64).ceil() as usize).max(1) - 1;
    SummaryStats {
        median_ms,
        mean_ms,
        p95_ms: sorted[p95_idx.min(n - 1)],
    }
}

/// Per-stage median wall times in milliseconds.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct StageMedians {
    pub voxelize_ms: f64,
    pub backbone3d_ms: f64,
    pub bev_ms: f64,
    pub backbone2d_ms: f64,
    pub head_ms: f64,
    pub nms_ms: f64,
}

impl StageMedians {
    pub fn total_ms(&self) -> f64 {
        self.voxelize_ms
            + self.backbone3d_ms
            + self.bev_ms
            + self.backbone2d_ms
            + self.head_ms
            + self.nms_ms
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EnvironmentInfo {
    pub host: String,
    pub threads: usize,
    pub version: String,
}

impl EnvironmentInfo {
    pub fn current() -> Self {
        let host = std::env::var("HOSTNAME")
            .ok()
            .or_else(|| {
                std::fs::read_to_string("/proc/sys/kernel/hostname")
                    .ok()
                    .map(|s| s.trim().to_string())
            })
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| "unknown".to_string());
        Self {
            host,
            threads: rayon::current_num_threads(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Latency measurement result. Batch size is always 1; the field exists so
/// the protocol is auditable in emitted reports.
#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub batch_size: usize,
    pub warmup_runs: usize,
    pub measured_runs: usize,
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub stages: StageMedians,
    pub env: EnvironmentInfo,
}

impl LatencyReport {
    /// Builds a report from already-collected samples; used by the
    /// statistics tests and by `measure_latency`.
    pub fn from_samples(
        warmup_runs: usize,
        samples_ms: Vec<f64>,
        stages: StageMedians,
        env: EnvironmentInfo,
    ) -> Self {
        let stats = summarize(&samples_ms);
        Self {
            batch_size: 1,
            warmup_runs,
            measured_runs: samples_ms.len(),
            samples_ms,
            median_ms: stats.median_ms,
            mean_ms: stats.mean_ms,
            p95_ms: stats.p95_ms,
            stages,
            env,
        }
    }
}

// One benchmark at a time, process-wide.
static MEASUREMENT_LOCK: Mutex<()> = Mutex::new(());

// Monotonic-clock read overhead, calibrated once; subtracted from samples
// only when it exceeds 1 microsecond.
fn timer_overhead_ns() -> u128 {
    static OVERHEAD: OnceLock<u128> = OnceLock::new();
    *OVERHEAD.get_or_init(|| {
        let mut samples: Vec<u128> = (0..1001)
            .map(|_| {
                let t = Instant::now();
                t.elapsed().as_nanos()
            })
            .collect();
        samples.sort_unstable();
        samples[samples.len() / 2]
    })
}

/// Measures end-to-end latency (voxelize through NMS) of `runs` batch-1
/// passes over the same input, after `warmup` discarded passes. Benchmarks
/// are serialized process-wide.
pub fn measure_latency(
    det: &Detector,
    cloud: &PointCloud,
    grid: &VoxelGridSpec,
    warmup: usize,
    runs: usize,
) -> Result<LatencyReport, BenchError> {
    assert!(runs >= 1, "need at least one measured run");
    let _guard = MEASUREMENT_LOCK.lock().unwrap();

    for run in 0..warmup {
        detect(det, cloud, grid).map_err(|source| BenchError::RunFailed { run, source })?;
    }

    let overhead = timer_overhead_ns();
    let subtract = if overhead > 1_000 { overhead } else { 0 };
    let mut samples_ms = Vec::with_capacity(runs);
    let mut stage_samples: Vec<[f64; 6]> = Vec::with_capacity(runs);
    for run in 0..runs {
        let t0 = Instant::now();
        let out = detect(det, cloud, grid)
            .map_err(|source| BenchError::RunFailed { run, source })?;
        let elapsed = t0.elapsed().as_nanos().saturating_sub(subtract);
        samples_ms.push(elapsed as f64 / 1e6);
        let t = out.timing;
        stage_samples.push([
            t.voxelize_ns as f64 / 1e6,
            t.backbone3d_ns as f64 / 1e6,
            t.bev_ns as f64 / 1e6,
            t.backbone2d_ns as f64 / 1e6,
            t.head_ns as f64 / 1e6,
            t.nms_ns as f64 / 1e6,
        ]);
    }
    let stage_median = |idx: usize| {
        let col: Vec<f64> = stage_samples.iter().map(|s| s[idx]).collect();
        summarize(&col).median_ms
    };
    let stages = StageMedians {
        voxelize_ms: stage_median(0),
        backbone3d_ms: stage_median(1),
        bev_ms: stage_median(2),
        backbone2d_ms: stage_median(3),
        head_ms: stage_median(4),
        nms_ms: stage_median(5),
    };
    Ok(LatencyReport::from_samples(
        warmup,
        samples_ms,
        stages,
        EnvironmentInfo::current(),
    ))
}

/// Analytic and measured cost numbers for one architecture.
#[derive(Debug, Clone, Serialize)]
pub struct CostProfile {
    pub params: u64,
    pub dense_flops: u64,
    pub sparse_macs: u64,
    pub peak_activation_bytes: u64,
}

/// Params and dense FLOPs analytically; sparse MACs and the activation
/// estimate from one instrumented forward on `sample`.
pub fn profile_cost(
    spec: &DetectorSpec,
    grid: &VoxelGridSpec,
    sample: &PointCloud,
) -> Result<CostProfile, BenchError> {
    let params = archspec::count_params(spec)?;
    let dense_flops = archspec::count_flops_dense(spec, grid)?;
    let det = build(spec, 0)?;
    let out = detect(&det, sample, grid)
        .map_err(|source| BenchError::RunFailed { run: 0, source })?;
    Ok(CostProfile {
        params,
        dense_flops,
        sparse_macs: out.trace.sparse_macs(),
        peak_activation_bytes: out.trace.peak_activation_bytes(),
    })
}

/// A labeled point on the cost/quality plane.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoPoint {
    pub label: String,
    pub cost: f64,
    pub quality: f64,
}

/// Non-dominated subset, input order preserved. A point is dominated when
/// another has cost <= and quality >= with at least one strict.
pub fn pareto(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    points
        .iter()
        .filter(|p| {
            !points.iter().any(|q| {
                q.cost <= p.cost
                    && q.quality >= p.quality
                    && (q.cost < p.cost || q.quality > p.quality)
            })
        })
        .cloned()
        .collect()
}

/// One benchmark-report row.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub profile: CostProfile,
    pub latency: LatencyReport,
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self, BenchError> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(BenchError::UnknownFormat(other.to_string())),
        }
    }
}

/// Renders rows as CSV, JSON, or an SVG latency/quality scatter with the
/// Pareto frontier. The quality metric is mAPH when evaluations are
/// attached, otherwise the parameter count.
pub fn report(rows: &[ReportRow], format: ReportFormat) -> Result<String, BenchError> {
    if rows.is_empty() {
        return Err(BenchError::EmptyReport);
    }
    match format {
        ReportFormat::Csv => Ok(render_csv(rows)),
        ReportFormat::Json => Ok(serde_json::to_string_pretty(rows).expect("report rows")),
        ReportFormat::Svg => Ok(render_svg(rows)),
    }
}

fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(
        "label,params,dense_flops,sparse_macs,latency_median_ms,latency_p95_ms,maph\n",
    );
    for r in rows {
        let maph = r
            .eval
            .as_ref()
            .map(|e| format!("{}", e.maph))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_quote(&r.label),
            r.profile.params,
            r.profile.dense_flops,
            r.profile.sparse_macs,
            r.latency.median_ms,
            r.latency.p95_ms,
            maph
        ));
    }
    out
}

fn csv_quote(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn render_svg(rows: &[ReportRow]) -> String {
    let use_maph = rows.iter().all(|r| r.eval.is_some());
    let metric_label = if use_maph { "mAPH" } else { "params" };
    let quality = |r: &ReportRow| -> f64 {
        if use_maph {
            r.eval.as_ref().unwrap().maph
        } else {
            r.profile.params as f64
        }
    };

    let (width, height) = (800.0f64, 600.0f64);
    let margin = 70.0f64;
    let xs: Vec<f64> = rows.iter().map(|r| r.latency.median_ms).collect();
    let ys: Vec<f64> = rows.iter().map(quality).collect();
    let bounds = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.1).max(1e-9);
        (lo - pad, hi + pad)
    };
    let (x_lo, x_hi) = bounds(&xs);
    let (y_lo, y_hi) = bounds(&ys);
    let px = |x: f64| margin + (x - x_lo) / (x_hi - x_lo) * (width - 2.0 * margin);
    let py = |y: f64| height - margin - (y - y_lo) / (y_hi - y_lo) * (height - 2.0 * margin);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    // Axes.
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = margin,
        b = height - margin,
        r = width - margin
    ));
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = margin,
        t = margin,
        b = height - margin
    ));
    svg.push_str(&format!(
        "  <text x=\"{x}\" y=\"{y}\" text-anchor=\"middle\" font-size=\"14\">median latency (ms)</text>\n",
        x = width / 2.0,
        y = height - margin / 3.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{x}\" y=\"{y}\" text-anchor=\"middle\" font-size=\"14\" \
         transform=\"rotate(-90 {x} {y})\">{label}</text>\n",
        x = margin / 3.0,
        y = height / 2.0,
        label = xml_escape(metric_label)
    ));

    // Pareto frontier polyline (cost = latency, quality = metric).
    let points: Vec<ParetoPoint> = rows
        .iter()
        .map(|r| ParetoPoint {
            label: r.label.clone(),
            cost: r.latency.median_ms,
            quality: quality(r),
        })
        .collect();
    let mut frontier = pareto(&points);
    frontier.sort_by(|a, b| a.cost.total_cmp(&b.cost));
    if frontier.len() >= 2 {
        let path: Vec<String> = frontier
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.cost), py(p.quality)))
            .collect();
        svg.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        ));
    }

    for (r, (&x, &y)) in rows.iter().zip(xs.iter().zip(&ys)) {
        svg.push_str(&format!(
            "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"5\" fill=\"crimson\"/>\n",
            px(x),
            py(y)
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\">{}</text>\n",
            px(x) + 8.0,
            py(y) - 6.0,
            xml_escape(&r.label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
