//! Detection-quality evaluation: greedy matching, precision-recall with an
//! envelope interpolation, AP, and heading-weighted APH.

use serde::Serialize;
use thiserror::Error;

use crate::heads::{rotated_iou_bev, Detection};
use crate::pointcloud::{wrap_angle, Box3D};

/// Per-class IoU thresholds and the recall sampling density.
#[derive(Debug, Clone, Serialize)]
pub struct EvalConfig {
    pub class_names: Vec<String>,
    pub iou_thresholds: Vec<f32>,
    pub recall_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            class_names: crate::pointcloud::CLASS_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            iou_thresholds: vec![0.7, 0.5, 0.5],
            recall_points: 101,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unknown class id {class} (config defines {known} classes)")]
    UnknownClass { class: u32, known: usize },
    #[error("config needs one IoU threshold per class")]
    ThresholdCount,
    #[error("recall_points must be at least 2")]
    RecallPoints,
}

/// Outcome for one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetMatch {
    TruePositive { gt_index: usize },
    FalsePositive,
}

/// Matching result; `outcomes` is aligned with the input detections.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub outcomes: Vec<DetMatch>,
    pub gt_matched: Vec<bool>,
    /// Indices of the input detections in processing order (descending
    /// score, ties by box center).
    pub order: Vec<usize>,
}

fn processing_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&dets[i], &dets[j]);
        b.score
            .total_cmp(&a.score)
            .then(a.box3d.cx.total_cmp(&b.box3d.cx))
            .then(a.box3d.cy.total_cmp(&b.box3d.cy))
            .then(a.box3d.cz.total_cmp(&b.box3d.cz))
    });
    order
}

/// Greedy single-class matching: detections in descending score order; a
/// detection is a true positive iff its best rotated BEV IoU over the
/// still-unmatched ground truths reaches the threshold, and that ground
/// truth is then consumed.
pub fn match_detections(dets: &[Detection], gts: &[Box3D], iou_threshold: f32) -> MatchResult {
    let order = processing_order(dets);
    let mut outcomes = vec![DetMatch::FalsePositive; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for &di in &order {
        let mut best: Option<(usize, f32)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_matched[gi] {
                continue;
            }
            let iou = rotated_iou_bev(&dets[di].box3d, gt);
            let better = match best {
                None => true,
                Some((_, best_iou)) => iou > best_iou,
            };
            if better {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, iou)) = best {
            if iou >= iou_threshold {
                gt_matched[gi] = true;
                outcomes[di] = DetMatch::TruePositive { gt_index: gi };
            }
        }
    }
    MatchResult {
        outcomes,
        gt_matched,
        order,
    }
}

/// Interpolated average precision over a weighted TP sequence.
///
/// `contributions[k]` is the k-th detection's TP weight in descending-score
/// order (1 for a plain TP, `1 - heading_error/pi` for APH, 0 for an FP).
/// Precision after k+1 detections is `W_k / (k+1)` and recall is
/// `W_k / n_gt`; the precision envelope `max{p : recall >= r}` is averaged
/// at `recall_points` equally spaced recalls in [0, 1].
///
/// With no ground truth, the result is 1 when there are no detections
/// (vacuous perfection) and 0 otherwise.
pub fn weighted_ap(contributions: &[f64], n_gt: usize, recall_points: usize) -> f64 {
    if n_gt == 0 {
        return if contributions.is_empty() { 1.0 } else { 0.0 };
    }
    let mut recalls = Vec::with_capacity(contributions.len());
    let mut precisions = Vec::with_capacity(contributions.len());
    let mut w = 0.0f64;
    for (k, c) in contributions.iter().enumerate() {
        w += c;
        recalls.push(w / n_gt as f64);
        precisions.push(w / (k + 1) as f64);
    }
    // Suffix max turns "best precision at recall >= r" into a lookup.
    let mut suffix_max = precisions.clone();
    for i in (0..suffix_max.len().saturating_sub(1)).rev() {
        suffix_max[i] = suffix_max[i].max(suffix_max[i + 1]);
    }
    let envelope = |r: f64| -> f64 {
        let idx = recalls.partition_point(|&rec| rec < r);
        if idx == recalls.len() {
            0.0
        } else {
            suffix_max[idx]
        }
    };
    let mut total = 0.0;
    for i in 0..recall_points {
        let r = i as f64 / (recall_points - 1) as f64;
        total += envelope(r);
    }
    total / recall_points as f64
}

/// AP from plain TP/FP flags in descending-score order.
pub fn ap(tp_flags: &[bool], n_gt: usize, recall_points: usize) -> f64 {
    let contribs: Vec<f64> = tp_flags.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    weighted_ap(&contribs, n_gt, recall_points)
}

/// APH: identical to AP except each TP contributes `1 - heading_error/pi`.
pub fn aph(contributions: &[f64], n_gt: usize, recall_points: usize) -> f64 {
    weighted_ap(contributions, n_gt, recall_points)
}

/// TP heading weight `1 - wrapped_yaw_error / pi`, in [0, 1].
pub fn heading_weight(det_yaw: f32, gt_yaw: f32) -> f64 {
    let delta = wrap_angle(det_yaw - gt_yaw).abs() as f64;
    1.0 - delta / std::f64::consts::PI
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassEval {
    pub class: String,
    pub ap: f64,
    pub aph: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
    pub n_gt: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassEval>,
    pub maph: f64,
}

impl EvalReport {
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["maph".to_string()];
        for c in &self.per_class {
            cols.push(format!("ap_{}", c.class));
            cols.push(format!("aph_{}", c.class));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![format!("{}", self.maph)];
        for c in &self.per_class {
            cols.push(format!("{}", c.ap));
            cols.push(format!("{}", c.aph));
        }
        cols.join(",")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// One scene's detections and ground-truth labels (box, class id).
#[derive(Debug, Clone, Default)]
pub struct SceneEval {
    pub detections: Vec<Detection>,
    pub labels: Vec<(Box3D, u32)>,
}

/// Evaluates pooled scenes per class: matching happens within each scene,
/// the PR curve pools all scenes, and mAPH averages the per-class APH.
pub fn evaluate(scenes: &[SceneEval], config: &EvalConfig) -> Result<EvalReport, EvalError> {
    if config.iou_thresholds.len() != config.class_names.len() {
        return Err(EvalError::ThresholdCount);
    }
    if config.recall_points < 2 {
        return Err(EvalError::RecallPoints);
    }
    let n_classes = config.class_names.len();
    for scene in scenes {
        for d in &scene.detections {
            if d.class_id as usize >= n_classes {
                return Err(EvalError::UnknownClass {
                    class: d.class_id,
                    known: n_classes,
                });
            }
        }
        for (_, c) in &scene.labels {
            if *c as usize >= n_classes {
                return Err(EvalError::UnknownClass {
                    class: *c,
                    known: n_classes,
                });
            }
        }
    }

    let mut per_class = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let threshold = config.iou_thresholds[class];
        // Pooled per-detection records: (score, center key, ap contribution,
        // aph contribution).
        let mut pooled: Vec<(f32, [f32; 3], f64, f64)> = Vec::new();
        let mut n_gt = 0usize;
        let mut tp = 0usize;
        for scene in scenes {
            let dets: Vec<Detection> = scene
                .detections
                .iter()
                .filter(|d| d.class_id as usize == class)
                .copied()
                .collect();
            let gts: Vec<Box3D> = scene
                .labels
                .iter()
                .filter(|(_, c)| *c as usize == class)
                .map(|(b, _)| *b)
                .collect();
            n_gt += gts.len();
            let result = match_detections(&dets, &gts, threshold);
            for (d, outcome) in dets.iter().zip(&result.outcomes) {
                let (c_ap, c_aph) = match outcome {
                    DetMatch::TruePositive { gt_index } => {
                        tp += 1;
                        (1.0, heading_weight(d.box3d.yaw, gts[*gt_index].yaw))
                    }
                    DetMatch::FalsePositive => (0.0, 0.0),
                };
                pooled.push((
                    d.score,
                    [d.box3d.cx, d.box3d.cy, d.box3d.cz],
                    c_ap,
                    c_aph,
                ));
            }
        }
        pooled.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1[0].total_cmp(&b.1[0]))
                .then(a.1[1].total_cmp(&b.1[1]))
                .then(a.1[2].total_cmp(&b.1[2]))
        });
        let ap_contribs: Vec<f64> = pooled.iter().map(|r| r.2).collect();
        let aph_contribs: Vec<f64> = pooled.iter().map(|r| r.3).collect();
        let fp = pooled.len() - tp_count(&ap_contribs);
        per_class.push(ClassEval {
            class: config.class_names[class].clone(),
            ap: weighted_ap(&ap_contribs, n_gt, config.recall_points),
            aph: weighted_ap(&aph_contribs, n_gt, config.recall_points),
            tp,
            fp,
            fn_count: n_gt - tp,
            n_gt,
        });
        // `tp` accumulated per scene equals the pooled contribution count.
        debug_assert_eq!(tp, tp_count(&ap_contribs));
    }
    let maph = per_class.iter().map(|c| c.aph).sum::<f64>() / n_classes as f64;
    Ok(EvalReport { per_class, maph })
}

fn tp_count(ap_contribs: &[f64]) -> usize {
    ap_contribs.iter().filter(|&&c| c > 0.0).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256StarStar;
    use std::f32::consts::PI;

    fn boxed(cx: f32, cy: f32, yaw: f32) -> Box3D {
        Box3D::new(cx, cy, 0.0, 4.0, 2.0, 1.5, yaw)
    }

    fn det(b: Box3D, score: f32, class: u32) -> Detection {
        Detection {
            box3d: b,
            score,
            class_id: class,
        }
    }

    #[test]
    fn exact_match_is_tp() {
        let gt = boxed(1.0, 2.0, 0.4);
        let r = match_detections(&[det(gt, 0.9, 0)], &[gt], 0.7);
        assert_eq!(r.outcomes, vec![DetMatch::TruePositive { gt_index: 0 }]);
        assert_eq!(r.gt_matched, vec![true]);
    }

    #[test]
    fn second_detection_on_same_gt_is_fp() {
        let gt = boxed(0.0, 0.0, 0.0);
        let d1 = det(gt, 0.9, 0);
        let d2 = det(gt, 0.8, 0);
        let r = match_detections(&[d2, d1], &[gt], 0.5);
        // Input order is [lower, higher]; the higher-score one wins the gt.
        assert_eq!(r.outcomes[1], DetMatch::TruePositive { gt_index: 0 });
        assert_eq!(r.outcomes[0], DetMatch::FalsePositive);
    }

    // Independent re-implementation with different structure: repeatedly
    // pick the highest-score unprocessed detection, scan all gts.
    fn match_oracle(dets: &[Detection], gts: &[Box3D], threshold: f32) -> Vec<DetMatch> {
        let mut remaining: Vec<usize> = (0..dets.len()).collect();
        let mut outcomes = vec![DetMatch::FalsePositive; dets.len()];
        let mut used = vec![false; gts.len()];
        while !remaining.is_empty() {
            let mut best_pos = 0;
            for (pos, &di) in remaining.iter().enumerate() {
                let (bi, bb) = (remaining[best_pos], &dets[remaining[best_pos]]);
                let d = &dets[di];
                let better = d.score > bb.score
                    || (d.score == bb.score
                        && (d.box3d.cx, d.box3d.cy, d.box3d.cz)
                            < (bb.box3d.cx, bb.box3d.cy, bb.box3d.cz))
                    || (d.score == bb.score
                        && (d.box3d.cx, d.box3d.cy, d.box3d.cz)
                            == (bb.box3d.cx, bb.box3d.cy, bb.box3d.cz)
                        && di < bi);
                if better {
                    best_pos = pos;
                }
            }
            let di = remaining.remove(best_pos);
            let mut best_gt: Option<(usize, f32)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if used[gi] {
                    continue;
                }
                let iou = rotated_iou_bev(&dets[di].box3d, gt);
                if best_gt.map_or(true, |(_, b)| iou > b) {
                    best_gt = Some((gi, iou));
                }
            }
            if let Some((gi, iou)) = best_gt {
                if iou >= threshold {
                    used[gi] = true;
                    outcomes[di] = DetMatch::TruePositive { gt_index: gi };
                }
            }
        }
        outcomes
    }

    #[test]
    fn matching_agrees_with_oracle_on_random_scenes() {
        let mut rng = Xoshiro256StarStar::new(71);
        for _ in 0..100 {
            let n_gt = rng.index(8);
            let gts: Vec<Box3D> = (0..n_gt)
                .map(|_| {
                    boxed(
                        rng.uniform_f32(-10.0, 10.0),
                        rng.uniform_f32(-10.0, 10.0),
                        rng.uniform_f32(-PI, PI),
                    )
                })
                .collect();
            let dets: Vec<Detection> = (0..rng.index(15))
                .map(|_| {
                    let near = !gts.is_empty() && rng.next_f64() < 0.6;
                    let b = if near {
                        let g = gts[rng.index(gts.len())];
                        boxed(
                            g.cx + rng.uniform_f32(-1.0, 1.0),
                            g.cy + rng.uniform_f32(-1.0, 1.0),
                            g.yaw + rng.uniform_f32(-0.3, 0.3),
                        )
                    } else {
                        boxed(
                            rng.uniform_f32(-10.0, 10.0),
                            rng.uniform_f32(-10.0, 10.0),
                            rng.uniform_f32(-PI, PI),
                        )
                    };
                    det(b, rng.uniform_f32(0.0, 1.0), 0)
                })
                .collect();
            let fast = match_detections(&dets, &gts, 0.5);
            let slow = match_oracle(&dets, &gts, 0.5);
            assert_eq!(fast.outcomes, slow);
        }
    }

    #[test]
    fn ap_all_tp_no_fp_is_one() {
        assert_eq!(ap(&[true, true, true], 3, 101), 1.0);
    }

    #[test]
    fn ap_no_detections_is_zero() {
        assert_eq!(ap(&[], 5, 101), 0.0);
    }

    #[test]
    fn ap_hand_computed_two_gt_example() {
        // det1 TP (score 0.9), det2 FP (score 0.8), 2 gts: envelope is 1 for
        // r <= 0.5 and 0 beyond, so AP = 51/101.
        let got = ap(&[true, false], 2, 101);
        assert!((got - 51.0 / 101.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn aph_equals_ap_with_perfect_headings() {
        let contribs = vec![1.0; 4];
        assert_eq!(aph(&contribs, 4, 101), 1.0);
    }

    #[test]
    fn aph_zero_when_headings_flipped() {
        // h = 1 - pi/pi = 0 for every TP.
        let w = heading_weight(0.0, PI);
        assert!(w.abs() < 1e-6);
        let contribs = vec![w; 3];
        assert_eq!(aph(&contribs, 3, 101), 0.0);
        assert_eq!(ap(&[true, true, true], 3, 101), 1.0);
    }

    #[test]
    fn aph_single_tp_with_quarter_turn_error() {
        // A quarter-turn heading error halves the TP weight.
        let w = heading_weight(0.0, std::f32::consts::FRAC_PI_2);
        assert!((w - 0.5).abs() < 1e-6);
        // One TP with weight exactly 0.5 on one gt: the curve's only point
        // is (recall 0.5, precision 0.5), the envelope is 0.5 up to
        // r = 0.5, so APH = 0.5 * 51/101.
        let got = aph(&[0.5], 1, 101);
        assert!((got - 0.5 * 51.0 / 101.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn vacuous_empty_convention() {
        assert_eq!(weighted_ap(&[], 0, 101), 1.0);
        assert_eq!(weighted_ap(&[0.0], 0, 101), 0.0);
    }

    #[test]
    fn evaluate_perfect_detections() {
        let gt = boxed(1.0, 1.0, 0.3);
        let scene = SceneEval {
            detections: vec![det(gt, 1.0, 0)],
            labels: vec![(gt, 0)],
        };
        let report = evaluate(&[scene], &EvalConfig::default()).unwrap();
        assert_eq!(report.per_class[0].ap, 1.0);
        assert_eq!(report.per_class[0].aph, 1.0);
        // Classes without dets or gts score the vacuous 1.0.
        assert_eq!(report.maph, 1.0);
    }

    #[test]
    fn evaluate_empty_dets_vs_empty_gts() {
        let report = evaluate(&[SceneEval::default()], &EvalConfig::default()).unwrap();
        for c in &report.per_class {
            assert_eq!(c.ap, 1.0);
            assert_eq!(c.aph, 1.0);
        }
    }

    #[test]
    fn evaluate_rejects_unknown_class() {
        let gt = boxed(0.0, 0.0, 0.0);
        let scene = SceneEval {
            detections: vec![det(gt, 1.0, 9)],
            labels: vec![],
        };
        assert!(matches!(
            evaluate(&[scene], &EvalConfig::default()),
            Err(EvalError::UnknownClass { class: 9, .. })
        ));
    }

    #[test]
    fn corruption_bounds_recall_ceiling() {
        // 20 scenes; detections reproduce only 70% of the gts, so AP can
        // reach at most 0.7 + one recall sample of slack.
        let mut rng = Xoshiro256StarStar::new(81);
        let mut scenes = Vec::new();
        for _ in 0..20 {
            let mut labels = Vec::new();
            let mut dets = Vec::new();
            for i in 0..10 {
                let b = boxed(
                    rng.uniform_f32(-40.0, 40.0) + 90.0 * i as f32,
                    rng.uniform_f32(-40.0, 40.0),
                    rng.uniform_f32(-PI, PI),
                );
                labels.push((b, 0u32));
                if i < 7 {
                    dets.push(det(b, rng.uniform_f32(0.5, 1.0), 0));
                }
            }
            scenes.push(SceneEval {
                detections: dets,
                labels,
            });
        }
        let config = EvalConfig::default();
        let report = evaluate(&scenes, &config).unwrap();
        let vehicle = &report.per_class[0];
        assert!(vehicle.ap <= 0.7 + 1.0 / config.recall_points as f64);
        assert!(vehicle.ap > 0.6, "dropped boxes should still leave most AP");
        assert_eq!(vehicle.fn_count, 20 * 3);
    }

    #[test]
    fn aph_never_exceeds_ap_on_random_corpora() {
        let mut rng = Xoshiro256StarStar::new(83);
        for _ in 0..100 {
            let n = 1 + rng.index(20);
            let n_gt = 1 + rng.index(10);
            let mut ap_contribs = Vec::new();
            let mut aph_contribs = Vec::new();
            for _ in 0..n {
                if rng.next_f64() < 0.6 {
                    ap_contribs.push(1.0);
                    aph_contribs.push(rng.next_f64());
                } else {
                    ap_contribs.push(0.0);
                    aph_contribs.push(0.0);
                }
            }
            let a = weighted_ap(&ap_contribs, n_gt, 101);
            let h = weighted_ap(&aph_contribs, n_gt, 101);
            assert!(h <= a + 1e-12, "aph {h} > ap {a}");
        }
    }

    #[test]
    fn ap_invariant_to_monotone_score_rescaling() {
        // Only the order enters the computation; evaluate with two score
        // scales and compare.
        let gt = boxed(0.0, 0.0, 0.0);
        let far = boxed(50.0, 50.0, 0.0);
        let mk = |scale: f32| SceneEval {
            detections: vec![det(gt, 0.9 * scale, 0), det(far, 0.4 * scale, 0)],
            labels: vec![(gt, 0)],
        };
        let config = EvalConfig::default();
        let a = evaluate(&[mk(1.0)], &config).unwrap();
        let b = evaluate(&[mk(0.01)], &config).unwrap();
        assert_eq!(a.per_class[0].ap, b.per_class[0].ap);
    }

    #[test]
    fn trailing_fp_never_increases_ap() {
        let mut rng = Xoshiro256StarStar::new(87);
        for _ in 0..50 {
            let n = 1 + rng.index(10);
            let contribs: Vec<f64> = (0..n)
                .map(|_| if rng.next_f64() < 0.5 { 1.0 } else { 0.0 })
                .collect();
            let n_gt = 1 + rng.index(8);
            let base = weighted_ap(&contribs, n_gt, 101);
            let mut with_fp = contribs.clone();
            with_fp.push(0.0);
            let worse = weighted_ap(&with_fp, n_gt, 101);
            assert!(worse <= base + 1e-12);
        }
    }

    #[test]
    fn evaluate_independent_of_detection_order() {
        let mut rng = Xoshiro256StarStar::new(93);
        let gts: Vec<(Box3D, u32)> = (0..6)
            .map(|i| {
                (
                    boxed(15.0 * i as f32, 0.0, rng.uniform_f32(-PI, PI)),
                    (i % 3) as u32,
                )
            })
            .collect();
        let mut dets: Vec<Detection> = gts
            .iter()
            .map(|(b, c)| det(*b, rng.uniform_f32(0.3, 1.0), *c))
            .collect();
        let config = EvalConfig::default();
        let scene = SceneEval {
            detections: dets.clone(),
            labels: gts.clone(),
        };
        let a = evaluate(&[scene], &config).unwrap();
        dets.reverse();
        let scene_rev = SceneEval {
            detections: dets,
            labels: gts,
        };
        let b = evaluate(&[scene_rev], &config).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }
}
