//! Instance-segmentation metrics: mask IoU and average precision.
//!
//! Matching is greedy in descending confidence (ties keep input order): each
//! prediction takes the unmatched ground truth of highest IoU at or above the
//! threshold (ties to the lower ground-truth index). AP is the area under the
//! monotone precision envelope, summed at every recall step.

use serde::Serialize;

/// Thresholds averaged into `ap`: 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub points: Vec<usize>,
    pub confidence: f64,
}

/// `|a ∩ b| / |a ∪ b|`, with duplicates ignored; 0 when both are empty.
pub fn mask_iou(a: &[usize], b: &[usize]) -> f64 {
    let sorted = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let (a, b) = (sorted(a), sorted(b));
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Prediction indices by descending confidence; equal confidences keep input order.
pub fn confidence_order(preds: &[Prediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    order
}

/// For each prediction in confidence order, whether it matched a ground truth.
pub fn greedy_match(preds: &[Prediction], gts: &[Vec<usize>], iou_threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    confidence_order(preds)
        .into_iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = mask_iou(&preds[p].points, gt);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            best.is_some()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Precision and recall after each prediction, from the match flags in confidence order.
pub fn pr_curve(matched: &[bool], n_gt: usize) -> PrCurve {
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(matched.len());
    let mut recall = Vec::with_capacity(matched.len());
    for (k, &m) in matched.iter().enumerate() {
        tp += usize::from(m);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    PrCurve { precision, recall }
}

/// All-point interpolated area: every true positive adds `1/n_gt` of recall
/// at the best precision reached at or after it.
pub fn interpolated_area(matched: &[bool], n_gt: usize) -> f64 {
    let curve = pr_curve(matched, n_gt);
    let mut envelope = curve.precision;
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let sum: f64 = matched.iter().zip(&envelope).filter(|(m, _)| **m).map(|(_, p)| p).sum();
    sum / n_gt as f64
}

/// NaN when there is no ground truth.
pub fn average_precision(preds: &[Prediction], gts: &[Vec<usize>], iou_threshold: f64) -> f64 {
    if gts.is_empty() {
        return f64::NAN;
    }
    interpolated_area(&greedy_match(preds, gts, iou_threshold), gts.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    /// Mean over scenes with ground truth.
    pub ap: f64,
    /// One curve per scene; empty for scenes without ground truth.
    pub curves: Vec<PrCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub scenes: usize,
    /// Scenes without ground truth, excluded from every mean.
    pub excluded_scenes: usize,
    pub per_threshold: Vec<ThresholdResult>,
}

fn nan_mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.filter(|x| !x.is_nan()).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// AP25, AP50 and the 0.50:0.95 mean, each macro-averaged over scenes.
pub fn evaluate(scenes: &[(Vec<Prediction>, Vec<Vec<usize>>)]) -> ApReport {
    let mut thresholds = vec![0.25];
    thresholds.extend(coco_thresholds());
    let per_threshold: Vec<ThresholdResult> = thresholds
        .iter()
        .map(|&t| {
            let mut aps = Vec::with_capacity(scenes.len());
            let mut curves = Vec::with_capacity(scenes.len());
            for (preds, gts) in scenes {
                if gts.is_empty() {
                    aps.push(f64::NAN);
                    curves.push(PrCurve { precision: vec![], recall: vec![] });
                } else {
                    let matched = greedy_match(preds, gts, t);
                    aps.push(interpolated_area(&matched, gts.len()));
                    curves.push(pr_curve(&matched, gts.len()));
                }
            }
            ThresholdResult {
                threshold: t,
                ap: nan_mean(aps.into_iter()),
                curves,
            }
        })
        .collect();
    let at = |t: f64| per_threshold.iter().find(|r| (r.threshold - t).abs() < 1e-9).map_or(f64::NAN, |r| r.ap);
    ApReport {
        ap: nan_mean(per_threshold.iter().filter(|r| r.threshold >= 0.5 - 1e-9).map(|r| r.ap)),
        ap50: at(0.5),
        ap25: at(0.25),
        scenes: scenes.len(),
        excluded_scenes: scenes.iter().filter(|(_, g)| g.is_empty()).count(),
        per_threshold,
    }
}

/// Aligned text table, one row per `(setup, method)`.
pub fn format_table(rows: &[(String, String, ApReport)]) -> String {
    let w_setup = rows.iter().map(|r| r.0.chars().count()).chain([5]).max().unwrap_or(5);
    let w_method = rows.iter().map(|r| r.1.chars().count()).chain([6]).max().unwrap_or(6);
    let mut out = format!("{:<w_setup$}  {:<w_method$}  {:>6}  {:>6}  {:>6}\n", "setup", "method", "AP", "AP50", "AP25");
    let pct = |v: f64| if v.is_nan() { "n/a".to_string() } else { format!("{:.1}", 100.0 * v) };
    for (setup, method, r) in rows {
        out.push_str(&format!(
            "{setup:<w_setup$}  {method:<w_method$}  {:>6}  {:>6}  {:>6}\n",
            pct(r.ap),
            pct(r.ap50),
            pct(r.ap25)
        ));
    }
    out
}
