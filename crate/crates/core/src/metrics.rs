//! Detection evaluation: IoU matching, precision/recall/F1, average
//! precision with all-point interpolation, and the aggregate report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{DetBox, GtBox};

/// Intersection over union of two axis-aligned boxes; 0 when disjoint or
/// when either box has zero area.
pub fn iou(a: &DetBox, b: &DetBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.x2 - a.x1).max(0.0) * (a.y2 - a.y1).max(0.0);
    let area_b = (b.x2 - b.x1).max(0.0) * (b.y2 - b.y1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// One detection's outcome, ordered by descending score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetFlag {
    pub score: f64,
    pub tp: bool,
    pub cls: usize,
}

/// Greedy class-wise matching: detections sorted by score descending (ties
/// by lower index) each claim the unmatched same-class gt of highest IoU
/// >= `iou_thr` (ties by lower gt index). Unmatched detections are FP,
/// unmatched gts FN.
pub fn match_detections(
    dets: &[DetBox],
    gts: &[GtBox],
    iou_thr: f64,
) -> (Vec<DetFlag>, ConfusionCounts) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].score.partial_cmp(&dets[a].score).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut gt_used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    let mut counts = ConfusionCounts::default();
    for &di in &order {
        let det = dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_used[gi] || gt.cls != det.cls {
                continue;
            }
            let gt_det = DetBox { x1: gt.x1, y1: gt.y1, x2: gt.x2, y2: gt.y2, score: 0.0, cls: gt.cls };
            let overlap = iou(&det, &gt_det);
            if overlap >= iou_thr {
                let better = match best {
                    None => true,
                    Some((_, b)) => overlap > b,
                };
                if better {
                    best = Some((gi, overlap));
                }
            }
        }
        let tp = match best {
            Some((gi, _)) => {
                gt_used[gi] = true;
                counts.tp += 1;
                true
            }
            None => {
                counts.fp += 1;
                false
            }
        };
        flags.push(DetFlag { score: det.score, tp, cls: det.cls });
    }
    counts.fn_ = gt_used.iter().filter(|&&u| !u).count();
    (flags, counts)
}

/// `(precision, recall, f1)` with the 0/0 cases defined as 0.
pub fn precision_recall_f1(c: &ConfusionCounts) -> (f64, f64, f64) {
    let p = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let r = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Average precision by exact area under the precision envelope
/// (all-point interpolation). `None` when the class has no gt instances.
pub fn average_precision(flags: &[DetFlag], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut sorted: Vec<&DetFlag> = flags.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(sorted.len()); // (recall, precision)
    for (k, f) in sorted.iter().enumerate() {
        if f.tp {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope: max precision at recall >= r.
    let mut best = 0.0f64;
    for p in points.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in points {
        if r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = r;
        }
    }
    Some(ap)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP@0.5 per class id present in the ground truth.
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map50: f64,
    /// Best micro-averaged F1 over the pooled score sweep, with its
    /// operating point.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub best_threshold: f64,
    pub counts: ConfusionCounts,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_det: usize,
}

/// Evaluates per-image detections against ground truth at IoU 0.5.
///
/// mAP50 averages per-class AP over classes with at least one gt instance.
/// The reported precision/recall/F1 are taken at the score threshold that
/// maximizes micro-averaged F1 over the pooled detections.
pub fn evaluate_boxes(
    dets_by_image: &[Vec<DetBox>],
    gts_by_image: &[Vec<GtBox>],
    num_classes: usize,
) -> Result<EvalReport> {
    if dets_by_image.len() != gts_by_image.len() {
        return Err(Error::contract(format!(
            "{} detection lists vs {} gt lists",
            dets_by_image.len(),
            gts_by_image.len()
        )));
    }
    let mut offenders: Vec<usize> = Vec::new();
    for dets in dets_by_image {
        for d in dets {
            if d.cls >= num_classes && !offenders.contains(&d.cls) {
                offenders.push(d.cls);
            }
        }
    }
    if !offenders.is_empty() {
        return Err(Error::contract(format!(
            "unknown class ids in detections: {offenders:?} (num_classes = {num_classes})"
        )));
    }

    let mut per_class_flags: BTreeMap<usize, Vec<DetFlag>> = BTreeMap::new();
    let mut per_class_gt: BTreeMap<usize, usize> = BTreeMap::new();
    let mut all_flags: Vec<DetFlag> = Vec::new();
    let mut total_gt = 0usize;
    let mut total_det = 0usize;
    for (dets, gts) in dets_by_image.iter().zip(gts_by_image) {
        total_gt += gts.len();
        total_det += dets.len();
        for gt in gts {
            *per_class_gt.entry(gt.cls).or_default() += 1;
        }
        for cls in 0..num_classes {
            let class_dets: Vec<DetBox> =
                dets.iter().filter(|d| d.cls == cls).copied().collect();
            let class_gts: Vec<GtBox> = gts.iter().filter(|g| g.cls == cls).copied().collect();
            if class_dets.is_empty() && class_gts.is_empty() {
                continue;
            }
            let (flags, _) = match_detections(&class_dets, &class_gts, 0.5);
            per_class_flags.entry(cls).or_default().extend(flags.iter().copied());
            all_flags.extend(flags);
        }
    }

    let mut per_class_ap = BTreeMap::new();
    for (&cls, &n_gt) in &per_class_gt {
        let flags = per_class_flags.get(&cls).map(|v| v.as_slice()).unwrap_or(&[]);
        if let Some(ap) = average_precision(flags, n_gt) {
            per_class_ap.insert(cls, ap);
        }
    }
    let map50 = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };

    // Micro F1 sweep over the pooled detections.
    all_flags.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut best = (0.0f64, 0.0f64, 0.0f64, f64::INFINITY, ConfusionCounts {
        tp: 0,
        fp: 0,
        fn_: total_gt,
    }); // (p, r, f1, threshold, counts)
    let mut tp = 0usize;
    for (k, f) in all_flags.iter().enumerate() {
        if f.tp {
            tp += 1;
        }
        let counts = ConfusionCounts { tp, fp: k + 1 - tp, fn_: total_gt - tp };
        let (p, r, f1) = precision_recall_f1(&counts);
        if f1 > best.2 {
            best = (p, r, f1, f.score, counts);
        }
    }
    Ok(EvalReport {
        per_class_ap,
        map50,
        precision: best.0,
        recall: best.1,
        f1: best.2,
        best_threshold: best.3,
        counts: best.4,
        n_images: gts_by_image.len(),
        n_gt: total_gt,
        n_det: total_det,
    })
}

/// File-level evaluation: detections and ground truth as JSONL (formats from
/// the data module), reporting as above.
pub fn evaluate(det_path: &Path, gt_path: &Path, num_classes: usize) -> Result<EvalReport> {
    let dets = crate::data::load_detections(det_path)?;
    let gts = crate::data::load_annotations(gt_path)?;
    // Pair by image name; gt order defines image order.
    let mut det_map: BTreeMap<String, Vec<DetBox>> = BTreeMap::new();
    for rec in dets {
        det_map.insert(rec.image.clone(), rec.boxes);
    }
    let mut dets_by_image = Vec::with_capacity(gts.len());
    let mut gts_by_image = Vec::with_capacity(gts.len());
    for rec in &gts {
        dets_by_image.push(det_map.remove(&rec.image).unwrap_or_default());
        gts_by_image.push(rec.boxes.iter().map(|b| b.to_gt()).collect());
    }
    evaluate_boxes(&dets_by_image, &gts_by_image, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, cls: usize) -> DetBox {
        DetBox { x1, y1, x2, y2, score, cls }
    }

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64, cls: usize) -> GtBox {
        GtBox { x1, y1, x2, y2, cls }
    }

    #[test]
    fn iou_reference_cases() {
        let a = det(0.0, 0.0, 2.0, 2.0, 1.0, 0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = det(5.0, 5.0, 7.0, 7.0, 1.0, 0);
        assert_eq!(iou(&a, &b), 0.0);
        let c = det(1.0, 1.0, 3.0, 3.0, 1.0, 0);
        assert!((iou(&a, &c) - 1.0 / 7.0).abs() < 1e-12);
        // Zero-area box reads as 0 by convention.
        let z = det(1.0, 1.0, 1.0, 3.0, 1.0, 0);
        assert_eq!(iou(&a, &z), 0.0);
    }

    #[test]
    fn matching_single_exact_hit() {
        let (flags, counts) = match_detections(
            &[det(0.0, 0.0, 4.0, 4.0, 0.9, 1)],
            &[gt(0.0, 0.0, 4.0, 4.0, 1)],
            0.5,
        );
        assert_eq!(counts, ConfusionCounts { tp: 1, fp: 0, fn_: 0 });
        assert!(flags[0].tp);
    }

    #[test]
    fn matching_duplicate_detection_higher_score_wins() {
        let (flags, counts) = match_detections(
            &[det(0.0, 0.0, 4.0, 4.0, 0.6, 0), det(0.1, 0.0, 4.0, 4.0, 0.9, 0)],
            &[gt(0.0, 0.0, 4.0, 4.0, 0)],
            0.5,
        );
        assert_eq!(counts, ConfusionCounts { tp: 1, fp: 1, fn_: 0 });
        // flags come back in score order: the 0.9 det matched first.
        assert!(flags[0].tp && (flags[0].score - 0.9).abs() < 1e-12);
        assert!(!flags[1].tp);
    }

    #[test]
    fn prf_reference_values() {
        assert_eq!(precision_recall_f1(&ConfusionCounts::default()), (0.0, 0.0, 0.0));
        let perfect = ConfusionCounts { tp: 5, fp: 0, fn_: 0 };
        assert_eq!(precision_recall_f1(&perfect), (1.0, 1.0, 1.0));
        let c = ConfusionCounts { tp: 8, fp: 2, fn_: 8 };
        let (p, r, f1) = precision_recall_f1(&c);
        assert!((p - 0.8).abs() < 1e-12);
        assert!((r - 0.5).abs() < 1e-12);
        assert!((f1 - 0.6154).abs() < 1e-4);
    }

    #[test]
    fn ap_reference_cases() {
        let one_tp = [DetFlag { score: 0.9, tp: true, cls: 0 }];
        assert_eq!(average_precision(&one_tp, 1), Some(1.0));
        let only_fp = [
            DetFlag { score: 0.9, tp: false, cls: 0 },
            DetFlag { score: 0.3, tp: false, cls: 0 },
        ];
        assert_eq!(average_precision(&only_fp, 2), Some(0.0));
        // TP at 0.9 then FP at 0.3 with one gt: recall hits 1 at precision 1.
        let mixed = [
            DetFlag { score: 0.9, tp: true, cls: 0 },
            DetFlag { score: 0.3, tp: false, cls: 0 },
        ];
        assert_eq!(average_precision(&mixed, 1), Some(1.0));
        assert_eq!(average_precision(&[], 0), None);
    }

    #[test]
    fn ap_monotone_under_fp_removal_and_duplicate_tp() {
        let base = vec![
            DetFlag { score: 0.9, tp: true, cls: 0 },
            DetFlag { score: 0.7, tp: false, cls: 0 },
            DetFlag { score: 0.5, tp: true, cls: 0 },
        ];
        let ap = average_precision(&base, 2).unwrap();
        // Removing the FP never decreases AP.
        let without_fp: Vec<DetFlag> = base.iter().filter(|f| f.tp).copied().collect();
        assert!(average_precision(&without_fp, 2).unwrap() >= ap);
        // A duplicate match attempt on the same gt enters as FP: not higher AP.
        let mut with_dup = base.clone();
        with_dup.push(DetFlag { score: 0.4, tp: false, cls: 0 });
        assert!(average_precision(&with_dup, 2).unwrap() <= ap);
    }

    #[test]
    fn evaluate_perfect_and_empty() {
        let gts = vec![vec![gt(0.0, 0.0, 4.0, 4.0, 0), gt(5.0, 5.0, 9.0, 9.0, 1)]];
        let dets = vec![vec![
            det(0.0, 0.0, 4.0, 4.0, 1.0, 0),
            det(5.0, 5.0, 9.0, 9.0, 1.0, 1),
        ]];
        let report = evaluate_boxes(&dets, &gts, 3).unwrap();
        assert_eq!(report.map50, 1.0);
        assert_eq!(report.f1, 1.0);
        let empty = evaluate_boxes(&[vec![]], &[gts[0].clone()], 3).unwrap();
        assert_eq!(empty.map50, 0.0);
        assert_eq!(empty.recall, 0.0);
    }

    #[test]
    fn evaluate_rejects_unknown_class() {
        let gts = vec![vec![gt(0.0, 0.0, 4.0, 4.0, 0)]];
        let dets = vec![vec![det(0.0, 0.0, 4.0, 4.0, 1.0, 7)]];
        let err = evaluate_boxes(&dets, &gts, 3).unwrap_err();
        assert!(err.to_string().contains('7'));
    }

    #[test]
    fn map_is_mean_of_per_class_ap() {
        let gts = vec![vec![
            gt(0.0, 0.0, 4.0, 4.0, 0),
            gt(10.0, 10.0, 14.0, 14.0, 1),
        ]];
        let dets = vec![vec![
            det(0.0, 0.0, 4.0, 4.0, 0.9, 0),
            det(20.0, 20.0, 24.0, 24.0, 0.8, 1), // miss
        ]];
        let report = evaluate_boxes(&dets, &gts, 2).unwrap();
        let mean: f64 =
            report.per_class_ap.values().sum::<f64>() / report.per_class_ap.len() as f64;
        assert_eq!(report.map50, mean);
        assert_eq!(report.per_class_ap[&0], 1.0);
        assert_eq!(report.per_class_ap[&1], 0.0);
    }

    #[test]
    fn score_monotone_relabeling_preserves_ap_and_best_counts() {
        let gts = vec![vec![
            gt(0.0, 0.0, 4.0, 4.0, 0),
            gt(10.0, 0.0, 14.0, 4.0, 0),
            gt(20.0, 0.0, 24.0, 4.0, 1),
        ]];
        let dets_raw = vec![
            det(0.0, 0.0, 4.0, 4.0, 0.9, 0),
            det(10.5, 0.0, 14.0, 4.0, 0.6, 0),
            det(40.0, 0.0, 44.0, 4.0, 0.5, 0),
            det(20.0, 0.0, 24.0, 4.0, 0.3, 1),
        ];
        let a = evaluate_boxes(&[dets_raw.clone()], &gts, 2).unwrap();
        // strictly increasing transform: s -> s^3 * 0.5 + 0.1
        let transformed: Vec<DetBox> = dets_raw
            .iter()
            .map(|d| DetBox { score: d.score.powi(3) * 0.5 + 0.1, ..*d })
            .collect();
        let b = evaluate_boxes(&[transformed], &gts, 2).unwrap();
        assert_eq!(a.map50, b.map50);
        assert_eq!(a.per_class_ap, b.per_class_ap);
        assert_eq!(a.counts, b.counts);
    }
}
