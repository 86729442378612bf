//! Box algebra shared by the detectors, the pseudo-target projection and the metrics.
//!
//! Boxes are stored as corners in pixel units. The center/size form only
//! appears at the [`encode_box`]/[`decode_box`] boundary and in the COCO
//! `[x, y, w, h]` converters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reference areas (side lengths squared) of the five scale buckets.
pub const SCALE_SIDES: [f64; 5] = [32.0, 64.0, 128.0, 256.0, 512.0];

/// Largest log-scale change a decoded box may apply to its reference box.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box [{0}, {1}, {2}, {3}]")]
    InvalidBox(f64, f64, f64, f64),
    #[error("degenerate (zero-area) box")]
    Degenerate,
    #[error("cannot match {instances} instances to {candidates} candidates")]
    TooManyInstances { instances: usize, candidates: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min > x_max || y_min > y_max {
            return Err(GeometryError::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    /// COCO `[x, y, width, height]`.
    pub fn from_xywh(xywh: [f64; 4]) -> Result<Self, GeometryError> {
        let [x, y, w, h] = xywh;
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    /// `(cx, cy, w, h)`.
    pub fn to_center(&self) -> [f64; 4] {
        let (cx, cy) = self.center();
        [cx, cy, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let ih = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        iw * ih
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        BBox {
            x_min: cx(self.x_min),
            y_min: cy(self.y_min),
            x_max: cx(self.x_max),
            y_max: cy(self.y_max),
        }
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    pub fn max_abs_diff(&self, other: &BBox) -> f64 {
        [
            self.x_min - other.x_min,
            self.y_min - other.y_min,
            self.x_max - other.x_max,
            self.y_max - other.y_max,
        ]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let enclosing = a.hull(b).area();
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if enclosing <= 0.0 {
        iou
    } else {
        iou - (enclosing - union) / enclosing
    }
}

/// GIoU of `pred` against `target` together with its gradient with respect to
/// the corners of `pred`, ordered `[x_min, y_min, x_max, y_max]`.
///
/// Subgradients at the min/max switching points pick the `pred` branch.
pub fn giou_with_grad(pred: &BBox, target: &BBox) -> (f64, [f64; 4]) {
    let (pw, ph) = (pred.width(), pred.height());
    let area_p = pw * ph;
    let area_t = target.area();

    let ix1 = pred.x_min.max(target.x_min);
    let iy1 = pred.y_min.max(target.y_min);
    let ix2 = pred.x_max.min(target.x_max);
    let iy2 = pred.y_max.min(target.y_max);
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;
    let union = area_p + area_t - inter;

    let cw = pred.x_max.max(target.x_max) - pred.x_min.min(target.x_min);
    let ch = pred.y_max.max(target.y_max) - pred.y_min.min(target.y_min);
    let enclosing = cw * ch;

    if union <= 0.0 || enclosing <= 0.0 {
        return (giou(pred, target), [0.0; 4]);
    }
    let value = inter / union - 1.0 + union / enclosing;

    // d(area_p)
    let d_area_p = [-ph, -pw, ph, pw];
    // d(iw), d(ih) with respect to pred corners
    let active_w = iw > 0.0;
    let active_h = ih > 0.0;
    let diw = [
        if active_w && pred.x_min >= target.x_min { -1.0 } else { 0.0 },
        0.0,
        if active_w && pred.x_max <= target.x_max { 1.0 } else { 0.0 },
        0.0,
    ];
    let dih = [
        0.0,
        if active_h && pred.y_min >= target.y_min { -1.0 } else { 0.0 },
        0.0,
        if active_h && pred.y_max <= target.y_max { 1.0 } else { 0.0 },
    ];
    let dcw = [
        if pred.x_min <= target.x_min { -1.0 } else { 0.0 },
        0.0,
        if pred.x_max >= target.x_max { 1.0 } else { 0.0 },
        0.0,
    ];
    let dch = [
        0.0,
        if pred.y_min <= target.y_min { -1.0 } else { 0.0 },
        0.0,
        if pred.y_max >= target.y_max { 1.0 } else { 0.0 },
    ];

    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_inter = diw[k] * ih + iw * dih[k];
        let d_union = d_area_p[k] - d_inter;
        let d_enc = dcw[k] * ch + cw * dch[k];
        grad[k] = (d_inter * union - inter * d_union) / (union * union)
            + (d_union * enclosing - union * d_enc) / (enclosing * enclosing);
    }
    (value, grad)
}

/// Regression target `(dx, dy, dw, dh)` of `gt` relative to `anchor`:
/// center offsets in units of the anchor size and log size ratios.
pub fn encode_box(gt: &BBox, anchor: &BBox) -> Result<[f64; 4], GeometryError> {
    if anchor.is_degenerate() || gt.is_degenerate() {
        return Err(GeometryError::Degenerate);
    }
    let [acx, acy, aw, ah] = anchor.to_center();
    let [gcx, gcy, gw, gh] = gt.to_center();
    Ok([
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (gw / aw).ln(),
        (gh / ah).ln(),
    ])
}

/// Inverse of [`encode_box`]. Log-scale deltas are clamped at [`MAX_LOG_SCALE`].
pub fn decode_box(deltas: &[f64], anchor: &BBox) -> BBox {
    decode_box_with_jacobian(deltas, anchor).0
}

/// Decoded box plus `d(corner_i)/d(delta_j)` stored row-major as `jac[i][j]`.
pub fn decode_box_with_jacobian(deltas: &[f64], anchor: &BBox) -> (BBox, [[f64; 4]; 4]) {
    let [acx, acy, aw, ah] = anchor.to_center();
    let dw = deltas[2].min(MAX_LOG_SCALE);
    let dh = deltas[3].min(MAX_LOG_SCALE);
    let cx = deltas[0] * aw + acx;
    let cy = deltas[1] * ah + acy;
    let w = aw * dw.exp();
    let h = ah * dh.exp();
    let bbox = BBox {
        x_min: cx - 0.5 * w,
        y_min: cy - 0.5 * h,
        x_max: cx + 0.5 * w,
        y_max: cy + 0.5 * h,
    };
    let gw = if deltas[2] < MAX_LOG_SCALE { 0.5 * w } else { 0.0 };
    let gh = if deltas[3] < MAX_LOG_SCALE { 0.5 * h } else { 0.0 };
    let jac = [
        [aw, 0.0, -gw, 0.0],
        [0.0, ah, 0.0, -gh],
        [aw, 0.0, gw, 0.0],
        [0.0, ah, 0.0, gh],
    ];
    (bbox, jac)
}

/// Scale bucket 1..=5 whose reference area is nearest to the box area in log scale.
pub fn scale_bucket(b: &BBox) -> Result<u8, GeometryError> {
    let area = b.area();
    if area <= 0.0 {
        return Err(GeometryError::Degenerate);
    }
    let la = area.ln();
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (k, side) in SCALE_SIDES.iter().enumerate() {
        let dist = (la - (side * side).ln()).abs();
        if dist < best_dist - 1e-12 {
            best = k;
            best_dist = dist;
        }
    }
    Ok(best as u8 + 1)
}

/// Where an anchor came from inside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnchorIndex {
    pub level: usize,
    pub cell_y: usize,
    pub cell_x: usize,
    pub scale: usize,
}

/// One feature level of an anchor grid: stride in pixels and square anchor sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorLevel {
    pub stride: usize,
    pub sizes: Vec<f64>,
}

/// Anchors in row order of the raw outputs: level, then cell row, cell column, then scale.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub boxes: Vec<BBox>,
    pub provenance: Vec<AnchorIndex>,
    /// First row of each level.
    pub level_offsets: Vec<usize>,
}

impl AnchorGrid {
    pub fn new(image_width: usize, image_height: usize, levels: &[AnchorLevel]) -> Self {
        let mut boxes = Vec::new();
        let mut provenance = Vec::new();
        let mut level_offsets = Vec::new();
        for (level, spec) in levels.iter().enumerate() {
            level_offsets.push(boxes.len());
            let gh = image_height / spec.stride;
            let gw = image_width / spec.stride;
            for cell_y in 0..gh {
                for cell_x in 0..gw {
                    let cx = (cell_x as f64 + 0.5) * spec.stride as f64;
                    let cy = (cell_y as f64 + 0.5) * spec.stride as f64;
                    for (scale, &side) in spec.sizes.iter().enumerate() {
                        boxes.push(BBox {
                            x_min: cx - 0.5 * side,
                            y_min: cy - 0.5 * side,
                            x_max: cx + 0.5 * side,
                            y_max: cy + 0.5 * side,
                        });
                        provenance.push(AnchorIndex { level, cell_y, cell_x, scale });
                    }
                }
            }
        }
        Self { boxes, provenance, level_offsets }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Greedy per-category NMS over parallel slices. Returns kept indices sorted
/// by descending score; equal scores favour the lower index.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], categories: &[usize], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept
            .iter()
            .any(|&k| categories[k] == categories[i] && iou(&boxes[k], &boxes[i]) > iou_thresh);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(dets: &[crate::layout::Detection], iou_thresh: f64) -> Vec<crate::layout::Detection> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let cats: Vec<usize> = dets.iter().map(|d| d.category).collect();
    nms_indices(&boxes, &scores, &cats, iou_thresh)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

/// Assign every target box to a distinct candidate.
///
/// Targets are served in descending order of their best IoU; each takes its
/// best still-unused candidate. Candidates are ranked by IoU, then GIoU (so
/// that disjoint candidates are still ordered by proximity), then lower index.
pub fn match_by_iou(targets: &[BBox], candidates: &[BBox]) -> Result<Vec<usize>, GeometryError> {
    if targets.len() > candidates.len() {
        return Err(GeometryError::TooManyInstances {
            instances: targets.len(),
            candidates: candidates.len(),
        });
    }
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let scores: Vec<Vec<(f64, f64)>> = targets
        .iter()
        .map(|t| candidates.iter().map(|c| (iou(t, c), giou(t, c))).collect())
        .collect();
    let better = |a: (f64, f64), b: (f64, f64)| a.0 > b.0 || (a.0 == b.0 && a.1 > b.1);
    let best_of = |row: &[(f64, f64)], used: &[bool]| -> Option<usize> {
        let mut best: Option<usize> = None;
        for (j, &s) in row.iter().enumerate() {
            if used[j] {
                continue;
            }
            match best {
                Some(b) if !better(s, row[b]) => {}
                _ => best = Some(j),
            }
        }
        best
    };
    let no_use = vec![false; candidates.len()];
    let mut order: Vec<(usize, (f64, f64))> = scores
        .iter()
        .enumerate()
        .map(|(i, row)| (i, row[best_of(row, &no_use).expect("nonempty candidates")]))
        .collect();
    order.sort_by(|a, b| {
        b.1 .0
            .total_cmp(&a.1 .0)
            .then(b.1 .1.total_cmp(&a.1 .1))
            .then(a.0.cmp(&b.0))
    });
    let mut used = vec![false; candidates.len()];
    let mut assignment = vec![usize::MAX; targets.len()];
    for (i, _) in order {
        let j = best_of(&scores[i], &used).expect("enough candidates");
        used[j] = true;
        assignment[i] = j;
    }
    Ok(assignment)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 2., 2.), &b(0., 0., 2., 2.)), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(2., 2., 3., 3.)), 0.0);
        assert!((iou(&b(0., 0., 4., 4.), &b(1., 1., 3., 3.)) - 0.25).abs() < 1e-12);
        assert_eq!(iou(&b(1., 1., 1., 1.), &b(1., 1., 1., 1.)), 0.0);
    }

    #[test]
    fn giou_examples() {
        assert_eq!(giou(&b(0., 0., 2., 2.), &b(0., 0., 2., 2.)), 1.0);
        assert!((giou(&b(0., 0., 1., 1.), &b(1., 1., 2., 2.)) + 0.5).abs() < 1e-12);
        assert!((giou(&b(0., 0., 4., 4.), &b(1., 1., 3., 3.)) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn encode_identity_and_translation() {
        let a = b(10., 10., 30., 50.);
        assert_eq!(encode_box(&a, &a).unwrap(), [0.0; 4]);
        // shift by (+5, -4): dx = 5 / 20, dy = -4 / 40
        let d = encode_box(&a.translate(5.0, -4.0), &a).unwrap();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] + 0.1).abs() < 1e-12);
        assert!(d[2].abs() < 1e-12 && d[3].abs() < 1e-12);
        assert_eq!(encode_box(&a, &b(3., 3., 3., 9.)), Err(GeometryError::Degenerate));
    }

    #[test]
    fn scale_buckets() {
        assert_eq!(scale_bucket(&b(0., 0., 32., 32.)).unwrap(), 1);
        assert_eq!(scale_bucket(&b(0., 0., 512., 512.)).unwrap(), 5);
        // the 64/128 log midpoint is 90.51
        assert_eq!(scale_bucket(&b(0., 0., 90., 90.)).unwrap(), 2);
        assert_eq!(scale_bucket(&b(0., 0., 91., 91.)).unwrap(), 3);
        assert_eq!(scale_bucket(&b(0., 0., 8., 8.)).unwrap(), 1);
        assert!(scale_bucket(&b(0., 0., 0., 8.)).is_err());
    }

    #[test]
    fn match_examples() {
        let gt = b(0., 0., 10., 10.);
        // IoUs 0.1, 0.7, 0.3 with candidates of equal offset construction
        let cands = vec![b(9., 0., 19., 10.), b(0., 0., 10., 7.), b(0., 0., 10., 3.)];
        let ious: Vec<f64> = cands.iter().map(|c| iou(&gt, c)).collect();
        assert!(ious[1] > ious[2] && ious[2] > ious[0]);
        assert_eq!(match_by_iou(&[gt], &cands).unwrap(), vec![1]);
        assert_eq!(match_by_iou(&[], &cands).unwrap(), Vec::<usize>::new());
        assert!(match_by_iou(&[gt, gt], &cands[..1]).is_err());
    }

    #[test]
    fn match_collision_goes_to_best_unused() {
        let cands = vec![b(0., 0., 10., 10.), b(2., 0., 12., 10.)];
        // both targets prefer candidate 0; the one with the higher IoU wins it
        let t1 = b(0., 0., 10., 9.);
        let t2 = b(0., 0., 10., 10.);
        let m = match_by_iou(&[t1, t2], &cands).unwrap();
        assert_eq!(m, vec![1, 0]);
    }

    #[test]
    fn nms_keeps_higher_score() {
        use crate::layout::Detection;
        let a = Detection::new(b(0., 0., 10., 10.), 0, 0.9);
        let c = Detection::new(b(1., 1., 11., 11.), 0, 0.8);
        assert!((iou(&a.bbox, &c.bbox) - 81.0 / 119.0).abs() < 1e-12);
        let kept = nms(&[c.clone(), a.clone()], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(nms(&[a.clone()], 0.5).len(), 1);
        // other category is never suppressed
        let other = Detection::new(c.bbox, 1, 0.8);
        assert_eq!(nms(&[a, other], 0.5).len(), 2);
    }

    #[test]
    fn anchor_grid_layout() {
        let levels = vec![
            AnchorLevel { stride: 8, sizes: vec![16.0, 24.0] },
            AnchorLevel { stride: 16, sizes: vec![48.0] },
        ];
        let grid = AnchorGrid::new(32, 32, &levels);
        assert_eq!(grid.len(), 4 * 4 * 2 + 2 * 2);
        assert_eq!(grid.level_offsets, vec![0, 32]);
        let p = grid.provenance[2 * 2 + 1];
        assert_eq!((p.level, p.cell_y, p.cell_x, p.scale), (0, 0, 2, 1));
        let mut seen = std::collections::HashSet::new();
        assert!(grid.provenance.iter().all(|p| seen.insert(*p)));
    }
}
