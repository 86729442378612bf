//! COCO-style AP, relative-position statistics and context tables.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::detector::Detector;
use crate::geometry::{iou, scale_bucket, BBox};
use crate::inversion::{invert_layout, visualize_single_anchor, AnchorVisualization, InversionConfig, InversionError, InversionResult};
use crate::layout::{Detection, Layout};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("{predictions} prediction layouts for {ground_truth} ground-truth layouts")]
    Mismatch { predictions: usize, ground_truth: usize },
    #[error("detection masks missing for mask AP")]
    MissingMasks,
    #[error("models disagree on categories: {0:?} vs {1:?}")]
    Categories(Vec<String>, Vec<String>),
    #[error("no models given")]
    NoModels,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouKind {
    Box,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApResult {
    /// Mean over IoU thresholds and categories with ground truth, in `[0, 100]`.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// AP per IoU threshold (averaged over categories).
    pub per_threshold: Vec<f64>,
    /// AP per category averaged over thresholds; `None` where the category has no ground truth.
    pub per_category: Vec<Option<f64>>,
    pub num_gt: usize,
    pub num_pred: usize,
}

fn pair_iou(a: &Detection, b: &Detection, kind: IouKind) -> Result<f64, AnalysisError> {
    match kind {
        IouKind::Box => Ok(iou(&a.bbox, &b.bbox)),
        IouKind::Mask => match (&a.mask, &b.mask) {
            (Some(x), Some(y)) => Ok(x.iou(y)),
            _ => Err(AnalysisError::MissingMasks),
        },
    }
}

/// Precision interpolated at 101 recall points from score-sorted TP flags.
fn interpolated_ap(tp: &[bool], npos: usize) -> f64 {
    let mut rec = Vec::with_capacity(tp.len());
    let mut prec = Vec::with_capacity(tp.len());
    let (mut t, mut f) = (0usize, 0usize);
    for &is_tp in tp {
        if is_tp {
            t += 1;
        } else {
            f += 1;
        }
        rec.push(t as f64 / npos as f64);
        prec.push(t as f64 / (t + f) as f64);
    }
    for i in (1..prec.len()).rev() {
        if prec[i] > prec[i - 1] {
            prec[i - 1] = prec[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = rec.partition_point(|&x| x < r);
        if idx < prec.len() {
            sum += prec[idx];
        }
    }
    sum / 101.0
}

/// COCO protocol: per category and threshold, detections are ranked by score
/// and greedily matched to the unmatched ground truth of highest IoU.
pub fn evaluate_ap(predictions: &[Layout], ground_truth: &[Layout], num_classes: usize) -> Result<ApResult, AnalysisError> {
    evaluate_ap_with(predictions, ground_truth, num_classes, IouKind::Box)
}

pub fn evaluate_ap_with(
    predictions: &[Layout],
    ground_truth: &[Layout],
    num_classes: usize,
    kind: IouKind,
) -> Result<ApResult, AnalysisError> {
    if predictions.len() != ground_truth.len() {
        return Err(AnalysisError::Mismatch { predictions: predictions.len(), ground_truth: ground_truth.len() });
    }
    let thresholds = iou_thresholds();
    let mut table = vec![vec![None; thresholds.len()]; num_classes];
    for (c, row) in table.iter_mut().enumerate() {
        let npos: usize = ground_truth.iter().map(|g| g.instances.iter().filter(|d| d.category == c).count()).sum();
        if npos == 0 {
            continue;
        }
        // (score, image, per-threshold tp flag)
        let mut ranked: Vec<(f64, usize, Vec<bool>)> = Vec::new();
        for (img, (pred, gt)) in predictions.iter().zip(ground_truth).enumerate() {
            let gts: Vec<&Detection> = gt.instances.iter().filter(|d| d.category == c).collect();
            let mut dets: Vec<&Detection> = pred.instances.iter().filter(|d| d.category == c).collect();
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            let ious: Vec<Vec<f64>> = dets
                .iter()
                .map(|d| gts.iter().map(|g| pair_iou(d, g, kind)).collect::<Result<Vec<_>, _>>())
                .collect::<Result<_, _>>()?;
            let mut flags = vec![vec![false; thresholds.len()]; dets.len()];
            for (ti, &t) in thresholds.iter().enumerate() {
                let mut taken = vec![false; gts.len()];
                for (di, row_iou) in ious.iter().enumerate() {
                    let mut best = None;
                    let mut best_iou = t.min(1.0 - 1e-10);
                    for (gi, &v) in row_iou.iter().enumerate() {
                        if !taken[gi] && v >= best_iou {
                            best_iou = v;
                            best = Some(gi);
                        }
                    }
                    if let Some(gi) = best {
                        taken[gi] = true;
                        flags[di][ti] = true;
                    }
                }
            }
            for (d, f) in dets.iter().zip(flags) {
                ranked.push((d.score, img, f));
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (ti, cell) in row.iter_mut().enumerate() {
            let tp: Vec<bool> = ranked.iter().map(|r| r.2[ti]).collect();
            *cell = Some(100.0 * interpolated_ap(&tp, npos));
        }
    }
    let valid: Vec<&Vec<Option<f64>>> = table.iter().filter(|r| r[0].is_some()).collect();
    let per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|ti| {
            if valid.is_empty() {
                0.0
            } else {
                valid.iter().map(|r| r[ti].unwrap_or(0.0)).sum::<f64>() / valid.len() as f64
            }
        })
        .collect();
    let per_category = table
        .iter()
        .map(|r| r[0].map(|_| r.iter().map(|v| v.unwrap_or(0.0)).sum::<f64>() / thresholds.len() as f64))
        .collect();
    Ok(ApResult {
        ap: per_threshold.iter().sum::<f64>() / thresholds.len() as f64,
        ap50: per_threshold[0],
        ap75: per_threshold[5],
        per_threshold,
        per_category,
        num_gt: ground_truth.iter().map(|g| g.len()).sum(),
        num_pred: predictions.iter().map(|p| p.len()).sum(),
    })
}

/// Fraction of ground-truth instances matched one-to-one by a same-class
/// prediction at IoU ≥ `thresh` (greedy by score).
pub fn instance_recall(predictions: &[Layout], ground_truth: &[Layout], thresh: f64) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (pred, gt) in predictions.iter().zip(ground_truth) {
        total += gt.len();
        let mut order: Vec<&Detection> = pred.instances.iter().collect();
        order.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut taken = vec![false; gt.len()];
        for d in order {
            let best = gt
                .instances
                .iter()
                .enumerate()
                .filter(|(i, g)| !taken[*i] && g.category == d.category)
                .map(|(i, g)| (i, iou(&d.bbox, &g.bbox)))
                .filter(|&(_, v)| v >= thresh)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = best {
                taken[i] = true;
                hit += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Vertical {
    Above,
    Level,
    Below,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Horizontal {
    Left,
    Center,
    Right,
}

/// Position of `other` relative to `center` from box centers; equal coordinates are ties.
pub fn relative_position(center: &Detection, other: &Detection) -> (Vertical, Horizontal) {
    let (cx, cy) = center.bbox.center();
    let (ox, oy) = other.bbox.center();
    let v = if oy < cy {
        Vertical::Above
    } else if oy > cy {
        Vertical::Below
    } else {
        Vertical::Level
    };
    let h = if ox < cx {
        Horizontal::Left
    } else if ox > cx {
        Horizontal::Right
    } else {
        Horizontal::Center
    };
    (v, h)
}

/// 3×3 histogram over (above/level/below) × (left/center/right); ties in the middle bins.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct QuadrantCounts {
    pub counts: [[usize; 3]; 3],
}

impl QuadrantCounts {
    pub fn add(&mut self, v: Vertical, h: Horizontal) {
        let r = v as usize;
        let c = h as usize;
        self.counts[r][c] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn above(&self) -> usize {
        self.counts[0].iter().sum()
    }

    pub fn below(&self) -> usize {
        self.counts[2].iter().sum()
    }

    pub fn left(&self) -> usize {
        self.counts.iter().map(|r| r[0]).sum()
    }

    pub fn right(&self) -> usize {
        self.counts.iter().map(|r| r[2]).sum()
    }

    /// Share of above among above+below; `None` without vertical evidence.
    pub fn above_fraction(&self) -> Option<f64> {
        let n = self.above() + self.below();
        (n > 0).then(|| self.above() as f64 / n as f64)
    }
}

/// Emergence statistics around one center category.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextTable {
    pub center_category: usize,
    pub runs: usize,
    /// Images where each category appeared as context (counted once per image).
    pub occurrences: Vec<usize>,
    /// Per contextual category, positions of every contextual instance.
    pub positions: Vec<QuadrantCounts>,
}

impl ContextTable {
    pub fn new(center_category: usize, num_classes: usize) -> Self {
        Self { center_category, runs: 0, occurrences: vec![0; num_classes], positions: vec![QuadrantCounts::default(); num_classes] }
    }

    /// Record one run: `center` is the optimized instance, `context` the other confident detections.
    pub fn record(&mut self, center: Option<&Detection>, context: &[Detection]) {
        self.runs += 1;
        let mut seen = vec![false; self.occurrences.len()];
        for d in context {
            if !seen[d.category] {
                seen[d.category] = true;
                self.occurrences[d.category] += 1;
            }
            if let Some(c) = center {
                let (v, h) = relative_position(c, d);
                self.positions[d.category].add(v, h);
            }
        }
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.occurrences
            .iter()
            .map(|&n| if self.runs == 0 { 0.0 } else { n as f64 / self.runs as f64 })
            .collect()
    }
}

/// Per-layout inversion seed, so every job is independent of the others.
pub fn job_config(cfg: &InversionConfig, job: usize) -> InversionConfig {
    InversionConfig { seed: crate::shapes::splitmix(cfg.seed ^ (job as u64).wrapping_mul(0x9e37_79b9)), ..cfg.clone() }
}

/// Invert every layout with one model; jobs run in parallel, results in layout order.
pub fn invert_all(det: &Detector, layouts: &[Layout], cfg: &InversionConfig) -> Vec<Result<InversionResult, InversionError>> {
    layouts.par_iter().enumerate().map(|(k, l)| invert_layout(det, l, &job_config(cfg, k), None)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferMatrix {
    /// `ap50[i][j]`: AP@0.5 of model `j` on images inverted from model `i`.
    pub ap50: Vec<Vec<f64>>,
    pub ap: Vec<Vec<f64>>,
    /// `recall[i][j]`: instance recall at IoU 0.5.
    pub recall: Vec<Vec<f64>>,
    /// Layouts whose inversion produced an image, per source model.
    pub inverted: Vec<usize>,
    /// Layouts whose inversion errored (excluded), per source model.
    pub failed: Vec<usize>,
    /// Self-inversions that reproduced the layout exactly, per source model.
    pub reproduced: Vec<usize>,
}

impl TransferMatrix {
    /// Whether each row's diagonal cell is its maximum AP@0.5.
    pub fn diagonal_dominant(&self) -> Vec<bool> {
        self.ap50.iter().enumerate().map(|(i, row)| row.iter().all(|&v| v <= row[i])).collect()
    }
}

fn same_categories(models: &[&Detector]) -> Result<(), AnalysisError> {
    let first = models.first().ok_or(AnalysisError::NoModels)?;
    for m in &models[1..] {
        if m.config.categories != first.config.categories {
            return Err(AnalysisError::Categories(first.config.categories.clone(), m.config.categories.clone()));
        }
    }
    Ok(())
}

/// Score already-inverted images: `images[i]` holds per-layout results from model `i`.
pub fn transfer_matrix_from(
    models: &[&Detector],
    layouts: &[Layout],
    images: &[Vec<Result<InversionResult, InversionError>>],
) -> Result<TransferMatrix, AnalysisError> {
    same_categories(models)?;
    let nc = models[0].num_classes();
    let n = models.len();
    let mut out = TransferMatrix {
        ap50: vec![vec![0.0; n]; n],
        ap: vec![vec![0.0; n]; n],
        recall: vec![vec![0.0; n]; n],
        inverted: vec![0; n],
        failed: vec![0; n],
        reproduced: vec![0; n],
    };
    for (i, results) in images.iter().enumerate() {
        let kept: Vec<(usize, &InversionResult)> = results.iter().enumerate().filter_map(|(k, r)| r.as_ref().ok().map(|r| (k, r))).collect();
        out.inverted[i] = kept.len();
        out.failed[i] = results.len() - kept.len();
        out.reproduced[i] = kept.iter().filter(|(_, r)| r.success).count();
        let gts: Vec<Layout> = kept.iter().map(|&(k, _)| layouts[k].clone()).collect();
        for (j, judge) in models.iter().enumerate() {
            let preds: Vec<Layout> = kept
                .par_iter()
                .map(|(_, r)| judge.detect(&r.image).unwrap_or_default())
                .collect();
            let res = evaluate_ap(&preds, &gts, nc)?;
            out.ap50[i][j] = res.ap50;
            out.ap[i][j] = res.ap;
            out.recall[i][j] = instance_recall(&preds, &gts, 0.5);
        }
    }
    Ok(out)
}

/// Invert `layouts` with every model and evaluate each image set with every model.
pub fn transfer_matrix(models: &[&Detector], layouts: &[Layout], cfg: &InversionConfig) -> Result<TransferMatrix, AnalysisError> {
    same_categories(models)?;
    let images: Vec<_> = models.iter().map(|m| invert_all(m, layouts, cfg)).collect();
    transfer_matrix_from(models, layouts, &images)
}

/// Anchor whose center is nearest the image center, among those whose
/// side is nearest `side`.
pub fn central_anchor(det: &Detector, side: f64) -> usize {
    let (cx, cy) = (det.config.image_width as f64 / 2.0, det.config.image_height as f64 / 2.0);
    let boxes = &det.anchors.boxes;
    let best_side = boxes.iter().map(|b| (b.width() - side).abs()).fold(f64::INFINITY, f64::min);
    let key = |b: &BBox| {
        let (x, y) = b.center();
        (x - cx).powi(2) + (y - cy).powi(2)
    };
    (0..boxes.len())
        .filter(|&i| (boxes[i].width() - side).abs() == best_side)
        .min_by(|&a, &b| key(&boxes[a]).total_cmp(&key(&boxes[b])).then(a.cmp(&b)))
        .unwrap_or(0)
}

/// One single-anchor visualization re-detected by its model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextRun {
    pub seed: u64,
    pub probability: f64,
    pub success: bool,
    /// Detection of the visualized category best overlapping the anchor.
    pub center: Option<Detection>,
    /// Every other confident detection.
    pub context: Vec<Detection>,
}

impl ContextRun {
    pub fn from_visualization(seed: u64, vis: &AnchorVisualization, category: usize, min_score: f64) -> Self {
        let confident: Vec<&Detection> = vis.detected.instances.iter().filter(|d| d.score > min_score).collect();
        let center = confident
            .iter()
            .enumerate()
            .filter(|(_, d)| d.category == category && iou(&d.bbox, &vis.anchor) > 0.0)
            .max_by(|a, b| iou(&a.1.bbox, &vis.anchor).total_cmp(&iou(&b.1.bbox, &vis.anchor)).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        let context = confident.iter().enumerate().filter(|(i, _)| Some(*i) != center).map(|(_, d)| (*d).clone()).collect();
        Self { seed, probability: vis.probability, success: vis.success, center: center.map(|i| confident[i].clone()), context }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextReport {
    pub category: usize,
    pub anchor_row: usize,
    pub anchor: BBox,
    pub table: ContextTable,
    pub runs: Vec<ContextRun>,
}

/// Rebuild the table from stored run logs.
pub fn context_table_from_runs(category: usize, num_classes: usize, runs: &[ContextRun]) -> ContextTable {
    let mut table = ContextTable::new(category, num_classes);
    for r in runs {
        table.record(r.center.as_ref(), &r.context);
    }
    table
}

/// `n_runs` visualizations of `category` at one anchor with seeds
/// `cfg.seed, cfg.seed + 1, …`; confident co-detections are tallied once per image.
pub fn context_frequency(det: &Detector, category: usize, anchor_row: usize, n_runs: usize, cfg: &InversionConfig) -> Result<ContextReport, InversionError> {
    let min_score = 0.5;
    let runs: Vec<ContextRun> = (0..n_runs)
        .into_par_iter()
        .map(|k| {
            let seed = cfg.seed.wrapping_add(k as u64);
            let vis = visualize_single_anchor(det, anchor_row, category, &InversionConfig { seed, ..cfg.clone() })?;
            Ok(ContextRun::from_visualization(seed, &vis, category, min_score))
        })
        .collect::<Result<_, InversionError>>()?;
    let table = context_table_from_runs(category, det.num_classes(), &runs);
    let anchor = det.anchors.boxes.get(anchor_row).copied().ok_or_else(|| InversionError::Config(format!("anchor {anchor_row} out of range")))?;
    Ok(ContextReport { category, anchor_row, anchor, table, runs })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScaleBucketResult {
    pub bucket: u8,
    /// `None` when no anchor of the model falls in this bucket.
    pub anchor_row: Option<usize>,
    pub anchor: Option<BBox>,
    pub runs: usize,
    /// Share of runs where the category is re-detected at IoU ≥ 0.5 with the anchor.
    pub success_rate: f64,
    /// Mean best re-detection IoU with the anchor box.
    pub mean_iou: f64,
    pub mean_probability: f64,
    #[serde(skip)]
    pub visualizations: Vec<AnchorVisualization>,
}

impl ScaleBucketResult {
    pub fn covered(&self) -> bool {
        self.anchor_row.is_some()
    }
}

/// Best IoU between `anchor` and a detection of `category`.
pub fn redetection_iou(detected: &Layout, anchor: &BBox, category: usize) -> f64 {
    detected.instances.iter().filter(|d| d.category == category).map(|d| iou(&d.bbox, anchor)).fold(0.0, f64::max)
}

/// Single-anchor visualizations at the most central anchor of each scale
/// bucket 1–5; buckets without anchors are reported as skipped.
pub fn scale_sweep(det: &Detector, category: usize, runs: usize, cfg: &InversionConfig) -> Result<Vec<ScaleBucketResult>, InversionError> {
    let (cx, cy) = (det.config.image_width as f64 / 2.0, det.config.image_height as f64 / 2.0);
    let mut out = Vec::new();
    for bucket in 1..=5u8 {
        let row = det
            .anchors
            .boxes
            .iter()
            .enumerate()
            .filter(|(_, b)| scale_bucket(b).ok() == Some(bucket))
            .min_by(|a, b| {
                let d = |b: &BBox| {
                    let (x, y) = b.center();
                    (x - cx).powi(2) + (y - cy).powi(2)
                };
                d(a.1).total_cmp(&d(b.1)).then(a.0.cmp(&b.0))
            })
            .map(|(i, _)| i);
        let Some(row) = row else {
            log::info!("scale bucket {bucket}: no anchor in this bucket, skipped");
            out.push(ScaleBucketResult { bucket, anchor_row: None, anchor: None, runs: 0, success_rate: 0.0, mean_iou: 0.0, mean_probability: 0.0, visualizations: Vec::new() });
            continue;
        };
        let anchor = det.anchors.boxes[row];
        let vis: Vec<AnchorVisualization> = (0..runs)
            .into_par_iter()
            .map(|k| visualize_single_anchor(det, row, category, &InversionConfig { seed: cfg.seed.wrapping_add(k as u64), ..cfg.clone() }))
            .collect::<Result<_, _>>()?;
        let ious: Vec<f64> = vis.iter().map(|v| redetection_iou(&v.detected, &anchor, category)).collect();
        let n = runs.max(1) as f64;
        out.push(ScaleBucketResult {
            bucket,
            anchor_row: Some(row),
            anchor: Some(anchor),
            runs,
            success_rate: ious.iter().filter(|&&v| v >= 0.5).count() as f64 / n,
            mean_iou: ious.iter().sum::<f64>() / n,
            mean_probability: vis.iter().map(|v| v.probability).sum::<f64>() / n,
            visualizations: vis,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn det(x: f64, y: f64, s: f64, c: usize, score: f64) -> Detection {
        Detection::new(BBox::new(x, y, x + s, y + s).unwrap(), c, score)
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gt = vec![Layout::new(vec![det(0.0, 0.0, 10.0, 0, 1.0), det(20.0, 20.0, 8.0, 1, 1.0)])];
        let r = evaluate_ap(&gt, &gt, 2).unwrap();
        assert_eq!(r.ap, 100.0);
        let none = vec![Layout::default()];
        assert_eq!(evaluate_ap(&none, &gt, 2).unwrap().ap, 0.0);
    }

    #[test]
    fn false_positive_ranked_first_halves_ap() {
        let gt = vec![Layout::new(vec![det(0.0, 0.0, 10.0, 0, 1.0)])];
        let pred = vec![Layout::new(vec![det(50.0, 50.0, 10.0, 0, 0.9), det(0.0, 0.0, 10.0, 0, 0.8)])];
        let r = evaluate_ap(&pred, &gt, 1).unwrap();
        assert_eq!(r.ap50, 50.0);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(evaluate_ap(&[Layout::default()], &[], 1).is_err());
    }

    #[test]
    fn ap_falls_with_threshold() {
        let gt = vec![Layout::new(vec![det(0.0, 0.0, 10.0, 0, 1.0)])];
        let pred = vec![Layout::new(vec![det(1.5, 0.0, 10.0, 0, 0.9)])];
        let r = evaluate_ap(&pred, &gt, 1).unwrap();
        assert!(r.per_threshold.windows(2).all(|w| w[0] >= w[1]));
        assert!(r.ap <= r.ap50);
        assert_eq!(r.ap50, 100.0);
        assert_eq!(r.per_threshold[9], 0.0);
    }

    #[test]
    fn positions_and_ties() {
        let c = det(10.0, 10.0, 10.0, 0, 1.0);
        assert_eq!(relative_position(&c, &det(10.0, 0.0, 10.0, 1, 1.0)), (Vertical::Above, Horizontal::Center));
        assert_eq!(relative_position(&c, &det(30.0, 12.0, 10.0, 1, 1.0)), (Vertical::Below, Horizontal::Right));
        let mut t = ContextTable::new(0, 2);
        t.record(Some(&c), &[det(10.0, 0.0, 10.0, 1, 1.0), det(0.0, 0.0, 5.0, 1, 1.0)]);
        t.record(Some(&c), &[]);
        assert_eq!(t.frequencies(), vec![0.0, 0.5]);
        assert_eq!(t.positions[1].total(), 2);
        assert_eq!(t.positions[1].above_fraction(), Some(1.0));
    }

    fn placements(above: f64, left: f64, n: usize) -> QuadrantCounts {
        use crate::shapes::{generate_scene, DatasetSpec, Motif};
        let spec = DatasetSpec {
            motifs: vec![Motif { source: "star".into(), target: "moon".into(), probability: 1.0, above_prob: above, left_prob: left }],
            ..DatasetSpec::default()
        };
        let (star, moon) = (spec.category_index("star").unwrap(), spec.category_index("moon").unwrap());
        let mut q = QuadrantCounts::default();
        let mut seed = 0;
        while q.total() < n {
            let s = generate_scene(&spec, seed);
            seed += 1;
            let stars: Vec<&Detection> = s.layout.instances.iter().filter(|d| d.category == star).collect();
            let moons: Vec<&Detection> = s.layout.instances.iter().filter(|d| d.category == moon).collect();
            if stars.len() == 1 && moons.len() == 1 && s.motif_events.iter().any(|e| e.fired) {
                let (v, h) = relative_position(stars[0], moons[0]);
                q.add(v, h);
            }
        }
        q
    }

    #[test]
    fn planted_above_bias_recovered_from_annotations() {
        let q = placements(0.8, 0.5, 300);
        let f = q.above_fraction().unwrap();
        assert!((f - 0.8).abs() <= 0.1, "above fraction {f}");
    }

    #[test]
    fn uniform_placement_gives_uniform_quadrants() {
        let q = placements(0.5, 0.5, 400);
        let cells = [
            q.counts[Vertical::Above as usize][Horizontal::Left as usize],
            q.counts[Vertical::Above as usize][Horizontal::Right as usize],
            q.counts[Vertical::Below as usize][Horizontal::Left as usize],
            q.counts[Vertical::Below as usize][Horizontal::Right as usize],
        ];
        let n: usize = cells.iter().sum();
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in cells {
            assert!((c as f64 - n as f64 / 4.0).abs() <= 3.0 * sigma, "{cells:?}");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn single_category_ap_monotone_in_threshold(seed in 0u64..10_000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut gts = Vec::new();
            let mut preds = Vec::new();
            for _ in 0..4 {
                let g: Vec<Detection> = (0..rng.random_range(0..4)).map(|_| det(rng.random_range(0.0..80.0), rng.random_range(0.0..80.0), rng.random_range(5.0..30.0), 0, 1.0)).collect();
                let mut p: Vec<Detection> = g.iter().map(|d| {
                    let j = rng.random_range(-3.0..3.0);
                    det(d.bbox.x_min + j, d.bbox.y_min, d.bbox.width(), 0, rng.random_range(0.0..1.0))
                }).collect();
                for _ in 0..rng.random_range(0..3) {
                    p.push(det(rng.random_range(0.0..80.0), rng.random_range(0.0..80.0), 10.0, 0, rng.random_range(0.0..1.0)));
                }
                gts.push(Layout::new(g));
                preds.push(Layout::new(p));
            }
            let r = evaluate_ap(&preds, &gts, 1).unwrap();
            proptest::prop_assert!(r.per_threshold.windows(2).all(|w| w[0] >= w[1] - 1e-12));
            proptest::prop_assert!(r.ap <= r.ap50 + 1e-12);
        }

        #[test]
        fn context_frequencies_match_recount(seed in 0u64..10_000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let runs: Vec<ContextRun> = (0..rng.random_range(0..20)).map(|k| ContextRun {
                seed: k,
                probability: 1.0,
                success: true,
                center: Some(det(50.0, 50.0, 20.0, 0, 1.0)),
                context: (0..rng.random_range(0..6)).map(|_| det(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), 10.0, rng.random_range(0..3), 0.9)).collect(),
            }).collect();
            let t = context_table_from_runs(0, 3, &runs);
            for (c, f) in t.frequencies().iter().enumerate() {
                let brute = runs.iter().filter(|r| r.context.iter().any(|d| d.category == c)).count() as f64 / runs.len().max(1) as f64;
                proptest::prop_assert!(*f <= 1.0);
                proptest::prop_assert!((f - brute).abs() < 1e-15);
                let instances = runs.iter().flat_map(|r| &r.context).filter(|d| d.category == c).count();
                proptest::prop_assert_eq!(t.positions[c].total(), instances);
            }
        }
    }

    fn tiny() -> Detector {
        Detector::new(crate::detector::tiny_config(crate::detector::Arch::SingleStage))
    }

    fn quick() -> InversionConfig {
        InversionConfig { iterations: 3, ..InversionConfig::default() }
    }

    #[test]
    fn context_with_no_runs_is_empty() {
        let d = tiny();
        let r = context_frequency(&d, 0, 0, 0, &quick()).unwrap();
        assert_eq!(r.table.runs, 0);
        assert!(r.table.frequencies().iter().all(|&f| f == 0.0));
        assert!(r.runs.is_empty());
    }

    #[test]
    fn context_runs_record_seeds_and_recount() {
        let d = tiny();
        let cfg = InversionConfig { seed: 40, ..quick() };
        let r = context_frequency(&d, 1, central_anchor(&d, 8.0), 3, &cfg).unwrap();
        assert_eq!(r.runs.iter().map(|x| x.seed).collect::<Vec<_>>(), vec![40, 41, 42]);
        assert_eq!(context_table_from_runs(1, 2, &r.runs), r.table);
    }

    #[test]
    fn single_model_transfer_is_one_by_one() {
        let d = tiny();
        let layouts = vec![Layout::new(vec![det(4.0, 4.0, 12.0, 0, 1.0)]), Layout::default()];
        let m = transfer_matrix(&[&d], &layouts, &quick()).unwrap();
        assert_eq!(m.ap50.len(), 1);
        assert_eq!(m.ap50[0].len(), 1);
        assert_eq!(m.inverted[0] + m.failed[0], 2);
        assert_eq!(m.diagonal_dominant(), vec![true]);
    }

    #[test]
    fn uncovered_scale_buckets_are_skipped() {
        let d = tiny();
        let r = scale_sweep(&d, 0, 1, &quick()).unwrap();
        assert_eq!(r.len(), 5);
        assert!(r[0].covered());
        for b in &r[1..] {
            assert!(!b.covered());
            assert_eq!(b.runs, 0);
        }
    }
}
