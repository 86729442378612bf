//! Attribution of one detector output (a class score or a box delta of a
//! single candidate) to image regions: Grad-CAM, NormGrad and extremal masks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{Arch, DenseGrads, DenseOutputs, Detector, DetectorError, RawGrads, RawOutputs, Tape};
use crate::geometry::{iou, BBox};
use crate::image::Image;
use crate::nn::{sigmoid, softmax, Adam, Feat};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("layer {0} does not exist")]
    Layer(usize),
    #[error("RoI features exist only for two-stage models")]
    NoRoiFeatures,
    #[error("candidate row {row} out of range ({rows} rows)")]
    Row { row: usize, rows: usize },
    #[error("area fraction {0} outside (0, 1]")]
    Area(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegComponent {
    Dx,
    Dy,
    Dw,
    Dh,
}

impl RegComponent {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dx" => Some(Self::Dx),
            "dy" => Some(Self::Dy),
            "dw" => Some(Self::Dw),
            "dh" => Some(Self::Dh),
            _ => None,
        }
    }
}

/// Scalar network output being explained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HeadTarget {
    /// Class logit of a category (0-based).
    Class(usize),
    /// Raw regression delta.
    Reg(RegComponent),
}

/// Feature map the gradient-based methods read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FeatureLayer {
    /// Backbone layer feeding the candidate's head (single-stage) or the pooled RoI features (two-stage).
    Head,
    Backbone(usize),
    /// Pooled RoI features (two-stage only).
    Roi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    GradCam,
    NormGrad,
    ExtremalMask,
}

#[derive(Debug, Clone)]
pub struct AttributionRequest {
    pub image: Image,
    /// Anchor row (single-stage) or index into `rois` (two-stage).
    pub row: usize,
    pub rois: Vec<BBox>,
    pub target: HeadTarget,
    pub layer: FeatureLayer,
    /// Region Grad-CAM is truncated to (the instance's box).
    pub region: BBox,
}

impl AttributionRequest {
    /// Request for the candidate a detection box is matched to: the anchor
    /// of highest IoU, or for two-stage models the best proposal used as a fixed RoI.
    pub fn for_instance(det: &Detector, image: &Image, bbox: BBox, target: HeadTarget, layer: FeatureLayer) -> Result<Self, AttributionError> {
        let best = |cands: &[BBox]| {
            cands
                .iter()
                .enumerate()
                .max_by(|a, b| iou(a.1, &bbox).total_cmp(&iou(b.1, &bbox)).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0)
        };
        let (row, rois) = match det.arch() {
            Arch::SingleStage => (best(&det.anchors.boxes), Vec::new()),
            Arch::TwoStage => {
                let mut proposals = det.propose(&det.stage1(image)?);
                if proposals.is_empty() {
                    proposals.push(bbox);
                }
                let i = best(&proposals);
                (0, vec![proposals[i]])
            }
        };
        Ok(Self { image: image.clone(), row, rois, target, layer, region: bbox })
    }
}

/// Non-negative map at image resolution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    /// True when max-normalized to 1 (false for an all-zero map).
    pub normalized: bool,
    pub region: Option<BBox>,
}

impl SaliencyMap {
    fn normalize(mut self) -> Self {
        let m = self.data.iter().copied().fold(0.0, f64::max);
        if m > 0.0 {
            self.data.iter_mut().for_each(|v| *v /= m);
            self.normalized = true;
        }
        self
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Share of total mass inside `b`.
    pub fn mass_inside(&self, b: &BBox) -> f64 {
        let total: f64 = self.data.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                if cx >= b.x_min && cx < b.x_max && cy >= b.y_min && cy < b.y_max {
                    inside += self.get(x, y);
                }
            }
        }
        inside / total
    }

    /// Pixels of the top `frac` of values (ties broken by index).
    pub fn top_fraction(&self, frac: f64) -> Vec<bool> {
        self.top_fraction_in(frac, None)
    }

    /// As [`top_fraction`](Self::top_fraction), ranking only pixels whose centers lie in `region`.
    pub fn top_fraction_in(&self, frac: f64, region: Option<&BBox>) -> Vec<bool> {
        let inside = |i: usize| {
            region.is_none_or(|b| {
                let (x, y) = ((i % self.width) as f64 + 0.5, (i / self.width) as f64 + 0.5);
                x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max
            })
        };
        let mut order: Vec<usize> = (0..self.data.len()).filter(|&i| inside(i)).collect();
        let k = ((order.len() as f64) * frac).round() as usize;
        order.sort_by(|&a, &b| self.data[b].total_cmp(&self.data[a]).then(a.cmp(&b)));
        let mut out = vec![false; self.data.len()];
        for &i in order.iter().take(k) {
            out[i] = true;
        }
        out
    }

    pub fn cosine(&self, other: &SaliencyMap) -> f64 {
        let dot: f64 = self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum();
        let na: f64 = self.data.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = other.data.iter().map(|b| b * b).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

/// IoU of the top-`frac` binarizations of two maps, ranked within `region` when given.
pub fn top_fraction_iou(a: &SaliencyMap, b: &SaliencyMap, frac: f64, region: Option<&BBox>) -> f64 {
    let (x, y) = (a.top_fraction_in(frac, region), b.top_fraction_in(frac, region));
    let inter = x.iter().zip(&y).filter(|(p, q)| **p && **q).count();
    let union = x.iter().zip(&y).filter(|(p, q)| **p || **q).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn forward(det: &Detector, req: &AttributionRequest) -> Result<(RawOutputs, Tape), AttributionError> {
    let (raw, tape) = match det.arch() {
        Arch::SingleStage => det.forward_tape(&req.image)?,
        Arch::TwoStage => det.forward_tape_with_rois(&req.image, Some(&req.rois))?,
    };
    let rows = raw.final_block().rows();
    if req.row >= rows {
        return Err(AttributionError::Row { row: req.row, rows });
    }
    Ok((raw, tape))
}

fn target_index(block: &DenseOutputs, row: usize, target: HeadTarget) -> (bool, usize) {
    match target {
        HeadTarget::Class(c) => {
            let col = match block.kind {
                crate::detector::ClsKind::Sigmoid => c,
                crate::detector::ClsKind::Softmax => c + 1,
            };
            (true, row * block.width() + col)
        }
        HeadTarget::Reg(r) => (false, row * 4 + r.index()),
    }
}

/// Raw value of the target scalar.
pub fn target_value(det: &Detector, req: &AttributionRequest) -> Result<f64, AttributionError> {
    let (raw, _) = forward(det, req)?;
    let block = raw.final_block();
    let (is_cls, i) = target_index(block, req.row, req.target);
    Ok(if is_cls { block.cls_logits[i] } else { block.reg_deltas[i] })
}

fn one_hot(raw: &RawOutputs, row: usize, target: HeadTarget, weight: f64) -> RawGrads {
    let put = |block: &DenseOutputs| {
        let mut g = block.zero_grads();
        let (is_cls, i) = target_index(block, row, target);
        if is_cls {
            g.cls[i] = weight;
        } else {
            g.reg[i] = weight;
        }
        g
    };
    match raw {
        RawOutputs::Single(b) => RawGrads::Single(put(b)),
        RawOutputs::Two { stage1, stage2, .. } => RawGrads::Two { stage1: stage1.zero_grads(), stage2: put(stage2) },
    }
}

/// Activation and gradient at the requested layer, with the stride mapping
/// feature cells to image pixels (or the RoI the cells tile).
struct LayerGrad {
    act: Feat,
    grad: Vec<f64>,
    placement: Placement,
}

enum Placement {
    Grid { stride: f64 },
    Roi(BBox),
}

fn layer_grad(det: &Detector, req: &AttributionRequest) -> Result<LayerGrad, AttributionError> {
    let (raw, tape) = forward(det, req)?;
    let back = det.backward(&tape, &one_hot(&raw, req.row, req.target, 1.0), None);
    let layer = match (req.layer, det.arch()) {
        (FeatureLayer::Head, Arch::SingleStage) => FeatureLayer::Backbone(det.level_layer_of_row(req.row)),
        (FeatureLayer::Head, Arch::TwoStage) => FeatureLayer::Roi,
        (l, _) => l,
    };
    match layer {
        FeatureLayer::Backbone(l) => {
            let act = tape.activations.get(l).ok_or(AttributionError::Layer(l))?.clone();
            let stride = req.image.width as f64 / act.w as f64;
            Ok(LayerGrad { act, grad: back.layer_grads[l].clone(), placement: Placement::Grid { stride } })
        }
        FeatureLayer::Roi => {
            let feats = det.roi_features(&tape).ok_or(AttributionError::NoRoiFeatures)?;
            let s = det.config.roi_size;
            let c = det.feature_channels();
            let d = c * s * s;
            let grads = back.roi_feat_grads.ok_or(AttributionError::NoRoiFeatures)?;
            let act = Feat { c, h: s, w: s, data: feats[req.row * d..(req.row + 1) * d].to_vec() };
            Ok(LayerGrad { act, grad: grads[req.row * d..(req.row + 1) * d].to_vec(), placement: Placement::Roi(req.rois[req.row]) })
        }
        FeatureLayer::Head => unreachable!(),
    }
}

/// Bilinear upsampling of an `h×w` cell map to image pixels.
fn upsample(cells: &[f64], h: usize, w: usize, placement: &Placement, width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    let sample = |u: f64, v: f64| {
        let u = u.clamp(0.0, (w - 1) as f64);
        let v = v.clamp(0.0, (h - 1) as f64);
        let (u0, v0) = (u.floor() as usize, v.floor() as usize);
        let (u1, v1) = ((u0 + 1).min(w - 1), (v0 + 1).min(h - 1));
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        (1.0 - fv) * ((1.0 - fu) * cells[v0 * w + u0] + fu * cells[v0 * w + u1])
            + fv * ((1.0 - fu) * cells[v1 * w + u0] + fu * cells[v1 * w + u1])
    };
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            out[y * width + x] = match placement {
                Placement::Grid { stride } => sample(px / stride - 0.5, py / stride - 0.5),
                Placement::Roi(b) => {
                    if px < b.x_min || px >= b.x_max || py < b.y_min || py >= b.y_max {
                        0.0
                    } else {
                        sample((px - b.x_min) / b.width() * w as f64 - 0.5, (py - b.y_min) / b.height() * h as f64 - 0.5)
                    }
                }
            };
        }
    }
    out
}

fn truncate(data: &mut [f64], width: usize, b: &BBox) {
    for (i, v) in data.iter_mut().enumerate() {
        let (x, y) = ((i % width) as f64 + 0.5, (i / width) as f64 + 0.5);
        if x < b.x_min || x >= b.x_max || y < b.y_min || y >= b.y_max {
            *v = 0.0;
        }
    }
}

/// Rectified channel-weighted activations, weights = spatially averaged
/// gradients; upsampled and truncated to the request region.
pub fn grad_cam(det: &Detector, req: &AttributionRequest) -> Result<SaliencyMap, AttributionError> {
    let lg = layer_grad(det, req)?;
    let (c, hw) = (lg.act.c, lg.act.plane());
    let mut cells = vec![0.0; hw];
    for ch in 0..c {
        let g = &lg.grad[ch * hw..(ch + 1) * hw];
        let alpha = g.iter().sum::<f64>() / hw as f64;
        for (cell, a) in cells.iter_mut().zip(&lg.act.data[ch * hw..(ch + 1) * hw]) {
            *cell += alpha * a;
        }
    }
    cells.iter_mut().for_each(|v| *v = v.max(0.0));
    if lg.grad.iter().all(|&g| g == 0.0) {
        log::warn!("grad_cam: target gradient is identically zero");
    }
    let (w, h) = (req.image.width, req.image.height);
    let mut data = upsample(&cells, lg.act.h, lg.act.w, &lg.placement, w, h);
    truncate(&mut data, w, &req.region);
    Ok(SaliencyMap { width: w, height: h, data, normalized: false, region: Some(req.region) }.normalize())
}

/// Per-cell `‖a‖·‖g‖` (the norm of the activation–gradient outer product), upsampled.
pub fn norm_grad(det: &Detector, req: &AttributionRequest) -> Result<SaliencyMap, AttributionError> {
    let lg = layer_grad(det, req)?;
    let cells = norm_grad_cells(&lg);
    if lg.grad.iter().all(|&g| g == 0.0) {
        log::warn!("norm_grad: target gradient is identically zero");
    }
    let (w, h) = (req.image.width, req.image.height);
    let data = upsample(&cells, lg.act.h, lg.act.w, &lg.placement, w, h);
    Ok(SaliencyMap { width: w, height: h, data, normalized: false, region: None }.normalize())
}

fn norm_grad_cells(lg: &LayerGrad) -> Vec<f64> {
    let (c, hw) = (lg.act.c, lg.act.plane());
    (0..hw)
        .map(|i| {
            let a: f64 = (0..c).map(|ch| lg.act.data[ch * hw + i].powi(2)).sum::<f64>().sqrt();
            let g: f64 = (0..c).map(|ch| lg.grad[ch * hw + i].powi(2)).sum::<f64>().sqrt();
            a * g
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtremalConfig {
    /// Preserved area as a fraction of the image.
    pub area: f64,
    pub grid: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Weight of the area penalty at the last iteration.
    pub area_weight: f64,
    /// The penalty weight grows geometrically from `area_weight / area_ramp`.
    pub area_ramp: f64,
    pub baseline_sigma: f64,
}

impl Default for ExtremalConfig {
    fn default() -> Self {
        Self { area: 0.1, grid: 64, iterations: 300, lr: 0.1, area_weight: 3e4, area_ramp: 1e4, baseline_sigma: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtremalResult {
    pub mask: SaliencyMap,
    /// Mean of the smooth mask.
    pub mean_area: f64,
    /// Target value (probability for class targets, raw delta otherwise) on the original image.
    pub original: f64,
    /// Target value with the smooth mask applied.
    pub preserved: f64,
    pub retention: f64,
    /// Target value with exactly the top `area` pixels of the mask preserved.
    pub preserved_hard: f64,
    pub retention_hard: f64,
    /// Mean area within 10% of the budget.
    pub converged: bool,
    /// Objective per iteration.
    pub trace: Vec<f64>,
}

fn score(block: &DenseOutputs, row: usize, target: HeadTarget) -> (f64, f64) {
    // value and d value / d raw output
    match target {
        HeadTarget::Class(c) => match block.kind {
            crate::detector::ClsKind::Sigmoid => {
                let p = sigmoid(block.row_logits(row)[c]);
                (p, p * (1.0 - p))
            }
            crate::detector::ClsKind::Softmax => {
                let p = softmax(block.row_logits(row))[c + 1];
                (p, p)
            }
        },
        HeadTarget::Reg(r) => (block.deltas(row)[r.index()], 1.0),
    }
}

fn raw_score_grads(raw: &RawOutputs, row: usize, target: HeadTarget) -> (f64, RawGrads) {
    let block = raw.final_block();
    let (v, _) = score(block, row, target);
    let mut grads = one_hot(raw, row, target, 1.0);
    if let HeadTarget::Class(c) = target {
        let g = match &mut grads {
            RawGrads::Single(g) => g,
            RawGrads::Two { stage2, .. } => stage2,
        };
        let w = block.width();
        match block.kind {
            crate::detector::ClsKind::Sigmoid => g.cls[row * w + c] = v * (1.0 - v),
            crate::detector::ClsKind::Softmax => {
                let p = softmax(block.row_logits(row));
                for k in 0..w {
                    g.cls[row * w + k] = p[c + 1] * (if k == c + 1 { 1.0 } else { 0.0 } - p[k]);
                }
            }
        }
    }
    (v, grads)
}

fn blend(image: &Image, baseline: &Image, mask: &[f64]) -> Image {
    let n = image.plane_len();
    let mut out = image.clone();
    for c in 0..3 {
        for i in 0..n {
            let j = c * n + i;
            out.data[j] = mask[i] * image.data[j] + (1.0 - mask[i]) * baseline.data[j];
        }
    }
    out
}

fn scalar_with_grad(det: &Detector, req: &AttributionRequest, image: &Image) -> Result<(f64, Vec<f64>), AttributionError> {
    objective_with_grad(det, req, image, |v| (v, 1.0))
}

/// `f` maps the target value to (objective, d objective / d value).
fn objective_with_grad(
    det: &Detector,
    req: &AttributionRequest,
    image: &Image,
    f: impl Fn(f64) -> (f64, f64),
) -> Result<(f64, Vec<f64>), AttributionError> {
    let r = AttributionRequest { image: image.clone(), ..req.clone() };
    let (raw, tape) = forward(det, &r)?;
    let (v, mut grads) = raw_score_grads(&raw, req.row, req.target);
    let (obj, scale) = f(v);
    let blocks: Vec<&mut DenseGrads> = match &mut grads {
        RawGrads::Single(g) => vec![g],
        RawGrads::Two { stage1, stage2 } => vec![stage1, stage2],
    };
    for g in blocks {
        g.cls.iter_mut().chain(g.reg.iter_mut()).for_each(|x| *x *= scale);
    }
    Ok((obj, det.backward(&tape, &grads, None).pixels))
}

fn preserved_value(det: &Detector, req: &AttributionRequest, baseline: &Image, mask: &[f64]) -> Result<f64, AttributionError> {
    Ok(scalar_with_grad(det, req, &blend(&req.image, baseline, mask))?.0)
}

/// Smooth preservation mask maximizing the target under an area budget,
/// blending the image with a blurred copy outside the mask.
///
/// Class targets maximize the log-probability; regression targets keep the
/// delta close to its value on the unmasked image.
pub fn extremal_mask(det: &Detector, req: &AttributionRequest, cfg: &ExtremalConfig) -> Result<ExtremalResult, AttributionError> {
    if !(cfg.area > 0.0 && cfg.area <= 1.0) {
        return Err(AttributionError::Area(cfg.area));
    }
    let (w, h) = (req.image.width, req.image.height);
    let n = w * h;
    let baseline = req.image.gaussian_blur(cfg.baseline_sigma);
    let original = scalar_with_grad(det, req, &req.image)?.0;
    let g = cfg.grid.min(w).max(1);
    let stride = w as f64 / g as f64;
    let placement = Placement::Grid { stride };
    let keep = ((n as f64) * cfg.area).round() as usize;
    let reference: Vec<f64> = (0..n).map(|i| if i < keep { 1.0 } else { 0.0 }).collect();
    let objective = |v: f64| match req.target {
        HeadTarget::Class(_) => {
            let v = v.max(1e-12);
            (v.ln(), 1.0 / v)
        }
        HeadTarget::Reg(_) => {
            let d = v - original;
            (-d * d, -2.0 * d)
        }
    };
    // cell values are optimized directly and projected back onto [0, 1]
    let mut cells = vec![0.5; g * g];
    let mut adam = Adam::new(cells.len(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let t = it as f64 / (cfg.iterations.max(2) - 1) as f64;
        let weight = cfg.area_weight * cfg.area_ramp.max(1.0).powf(t - 1.0);
        let mask = upsample(&cells, g, g, &placement, w, h);
        let (obj, gimg) = objective_with_grad(det, req, &blend(&req.image, &baseline, &mask), objective)?;
        // loss: -obj + area_weight * mean((sort(m) - ref)^2)
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| mask[b].total_cmp(&mask[a]).then(a.cmp(&b)));
        let mut area_loss = 0.0;
        let mut gmask = vec![0.0; n];
        for (rank, &i) in order.iter().enumerate() {
            let d = mask[i] - reference[rank];
            area_loss += d * d / n as f64;
            gmask[i] += weight * 2.0 * d / n as f64;
        }
        for i in 0..n {
            let mut s = 0.0;
            for c in 0..3 {
                let j = c * n + i;
                s += gimg[j] * (req.image.data[j] - baseline.data[j]);
            }
            gmask[i] -= s;
        }
        trace.push(-obj + weight * area_loss);
        let mut gcells = vec![0.0; g * g];
        upsample_adjoint(&gmask, g, g, stride, w, h, &mut gcells);
        adam.update(&mut cells, &gcells);
        cells.iter_mut().for_each(|c| *c = c.clamp(0.0, 1.0));
    }
    let smooth = upsample(&cells, g, g, &placement, w, h);
    let mean_area = smooth.iter().sum::<f64>() / n as f64;
    let map = SaliencyMap { width: w, height: h, data: smooth.clone(), normalized: false, region: None };
    let hard: Vec<f64> = map.top_fraction(cfg.area).into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
    let preserved = preserved_value(det, req, &baseline, &smooth)?;
    let preserved_hard = preserved_value(det, req, &baseline, &hard)?;
    let converged = (mean_area - cfg.area).abs() <= 0.1 * cfg.area;
    if !converged {
        log::warn!("extremal mask area {mean_area:.4} misses the budget {:.4}", cfg.area);
    }
    let ratio = |p: f64| if original != 0.0 { p / original } else { 0.0 };
    Ok(ExtremalResult {
        mask: map,
        mean_area,
        original,
        preserved,
        retention: ratio(preserved),
        preserved_hard,
        retention_hard: ratio(preserved_hard),
        converged,
        trace,
    })
}

fn upsample_adjoint(grad: &[f64], h: usize, w: usize, stride: f64, width: usize, height: usize, out: &mut [f64]) {
    for y in 0..height {
        for x in 0..width {
            let g = grad[y * width + x];
            let u = ((x as f64 + 0.5) / stride - 0.5).clamp(0.0, (w - 1) as f64);
            let v = ((y as f64 + 0.5) / stride - 0.5).clamp(0.0, (h - 1) as f64);
            let (u0, v0) = (u.floor() as usize, v.floor() as usize);
            let (u1, v1) = ((u0 + 1).min(w - 1), (v0 + 1).min(h - 1));
            let (fu, fv) = (u - u0 as f64, v - v0 as f64);
            out[v0 * w + u0] += g * (1.0 - fv) * (1.0 - fu);
            out[v0 * w + u1] += g * (1.0 - fv) * fu;
            out[v1 * w + u0] += g * fv * (1.0 - fu);
            out[v1 * w + u1] += g * fv * fu;
        }
    }
}

/// Run the chosen method; extremal masks use `extremal` for their budget.
pub fn attribute(det: &Detector, req: &AttributionRequest, method: Method, extremal: &ExtremalConfig) -> Result<SaliencyMap, AttributionError> {
    match method {
        Method::GradCam => grad_cam(det, req),
        Method::NormGrad => norm_grad(det, req),
        Method::ExtremalMask => Ok(extremal_mask(det, req, extremal)?.mask),
    }
}
