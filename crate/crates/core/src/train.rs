//! Detector training: focal loss + smooth L1 for the single-stage model; RPN,
//! RoI classification/regression and mask losses for the two-stage model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::evaluate_ap;
use crate::detector::{crop_mask, DenseGrads, DenseOutputs, Detector, RawGrads, RawOutputs, TrainState};
use crate::geometry::{encode_box, iou, BBox};
use crate::image::Image;
use crate::layout::Layout;
use crate::nn::{log_sigmoid, sigmoid, softmax, Adam};
use crate::shapes::splitmix;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (image {image}); last finite loss {last_finite}")]
    Diverged { epoch: usize, step: u64, image: usize, loss: f64, last_finite: f64 },
    #[error("training set is empty")]
    Empty,
    #[error(transparent)]
    Detector(#[from] crate::detector::DetectorError),
    #[error("invalid training config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate of the cosine schedule as a fraction of `lr`.
    pub min_lr_frac: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub reg_beta: f64,
    pub reg_weight: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub roi_batch: usize,
    pub roi_pos_frac: f64,
    /// Jittered copies of each ground-truth box added to the RoI pool.
    pub gt_jitter_copies: usize,
    pub mask_weight: f64,
    /// Evaluate val AP every this many epochs (0 disables).
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| if (0.0..=1.0).contains(&v) { Ok(()) } else { Err(format!("{name} must lie in [0, 1]")) };
        if self.epochs == 0 || self.batch_size == 0 {
            return Err("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err("lr must be positive".into());
        }
        if !(self.grad_clip > 0.0) || self.reg_beta <= 0.0 || self.weight_decay < 0.0 {
            return Err("grad_clip and reg_beta must be positive, weight_decay non-negative".into());
        }
        unit("min_lr_frac", self.min_lr_frac)?;
        unit("focal_alpha", self.focal_alpha)?;
        unit("roi_pos_frac", self.roi_pos_frac)?;
        unit("pos_iou", self.pos_iou)?;
        unit("neg_iou", self.neg_iou)?;
        unit("rpn_pos_iou", self.rpn_pos_iou)?;
        unit("rpn_neg_iou", self.rpn_neg_iou)?;
        if self.neg_iou > self.pos_iou || self.rpn_neg_iou > self.rpn_pos_iou {
            return Err("negative IoU thresholds must not exceed positive ones".into());
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            lr: 2e-3,
            min_lr_frac: 0.02,
            warmup_steps: 100,
            weight_decay: 1e-5,
            grad_clip: 10.0,
            seed: 7,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            pos_iou: 0.5,
            neg_iou: 0.4,
            reg_beta: 1.0 / 9.0,
            reg_weight: 1.0,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 64,
            roi_batch: 32,
            roi_pos_frac: 0.25,
            gt_jitter_copies: 3,
            mask_weight: 1.0,
            eval_every: 1,
        }
    }
}

/// Loss of one image split by term.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub cls: f64,
    pub reg: f64,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub mask: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.cls + self.reg + self.rpn_cls + self.rpn_reg + self.mask
    }

    fn add(&mut self, o: &LossParts) {
        self.cls += o.cls;
        self.reg += o.reg;
        self.rpn_cls += o.rpn_cls;
        self.rpn_reg += o.rpn_reg;
        self.mask += o.mask;
    }

    fn scale(&mut self, k: f64) {
        self.cls *= k;
        self.reg *= k;
        self.rpn_cls *= k;
        self.rpn_reg *= k;
        self.mask *= k;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub parts: LossParts,
    pub val_ap: Option<f64>,
    pub val_ap50: Option<f64>,
}

/// Focal loss of one logit and its derivative.
pub fn focal(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if positive {
        let lp = log_sigmoid(x);
        let q = 1.0 - p;
        (-alpha * q.powf(gamma) * lp, alpha * q.powf(gamma) * (gamma * p * lp - q))
    } else {
        let lq = log_sigmoid(-x);
        (-(1.0 - alpha) * p.powf(gamma) * lq, (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * lq))
    }
}

/// Smooth L1 and its derivative.
pub fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

fn reg_loss(block: &DenseOutputs, grads: &mut DenseGrads, row: usize, gt: &BBox, beta: f64, weight: f64) -> f64 {
    let Ok(t) = encode_box(gt, &block.refs[row]) else {
        return 0.0;
    };
    let mut loss = 0.0;
    for j in 0..4 {
        let (l, g) = smooth_l1(block.reg_deltas[row * 4 + j] - t[j], beta);
        loss += weight * l;
        grads.reg[row * 4 + j] += weight * g;
    }
    loss
}

/// Anchor assignment: `Some(gt)` positive, `None` negative; ignored anchors are absent from the list.
fn assign(anchors: &[BBox], gts: &[BBox], pos: f64, neg: f64) -> Vec<(usize, Option<usize>)> {
    let mut best_for_gt = vec![(f64::MIN, usize::MAX); gts.len()];
    let mut label: Vec<Option<Option<usize>>> = Vec::with_capacity(anchors.len());
    for (r, a) in anchors.iter().enumerate() {
        let mut best = (0.0, None);
        for (g, b) in gts.iter().enumerate() {
            let v = iou(a, b);
            if v > best.0 {
                best = (v, Some(g));
            }
            if v > best_for_gt[g].0 {
                best_for_gt[g] = (v, r);
            }
        }
        label.push(if best.0 >= pos {
            Some(best.1)
        } else if best.0 < neg {
            Some(None)
        } else {
            None
        });
    }
    for (g, &(v, r)) in best_for_gt.iter().enumerate() {
        if v > 0.0 {
            label[r] = Some(Some(g));
        }
    }
    label.into_iter().enumerate().filter_map(|(r, l)| l.map(|l| (r, l))).collect()
}

fn single_stage_loss(det: &Detector, block: &DenseOutputs, layout: &Layout, cfg: &TrainConfig) -> (LossParts, DenseGrads) {
    let gts = layout.boxes();
    let nc = det.num_classes();
    let mut grads = block.zero_grads();
    let assigned = assign(&block.refs, &gts, cfg.pos_iou, cfg.neg_iou);
    let npos = assigned.iter().filter(|a| a.1.is_some()).count().max(1) as f64;
    let mut parts = LossParts::default();
    for &(r, g) in &assigned {
        let cat = g.map(|g| layout.instances[g].category);
        for k in 0..nc {
            let (l, d) = focal(block.cls_logits[r * nc + k], cat == Some(k), cfg.focal_alpha, cfg.focal_gamma);
            parts.cls += l / npos;
            grads.cls[r * nc + k] += d / npos;
        }
        if let Some(g) = g {
            parts.reg += reg_loss(block, &mut grads, r, &gts[g], cfg.reg_beta, cfg.reg_weight / npos);
        }
    }
    (parts, grads)
}

fn jitter_box<R: Rng>(b: &BBox, rng: &mut R, width: f64, height: f64) -> BBox {
    let (w, h) = (b.width(), b.height());
    let dx = rng.random_range(-0.15..0.15) * w;
    let dy = rng.random_range(-0.15..0.15) * h;
    let sw = rng.random_range(-0.15f64..0.15).exp();
    let sh = rng.random_range(-0.15f64..0.15).exp();
    let (cx, cy) = b.center();
    let j = BBox { x_min: cx + dx - 0.5 * w * sw, y_min: cy + dy - 0.5 * h * sh, x_max: cx + dx + 0.5 * w * sw, y_max: cy + dy + 0.5 * h * sh };
    let c = j.clip(width, height);
    if c.is_degenerate() {
        *b
    } else {
        c
    }
}

/// Sample second-stage RoIs: label per RoI (`Some(gt)` foreground) at a
/// fixed positive fraction.
fn sample_rois<R: Rng>(det: &Detector, proposals: &[BBox], gts: &[BBox], cfg: &TrainConfig, rng: &mut R) -> (Vec<BBox>, Vec<Option<usize>>) {
    let (w, h) = (det.config.image_width as f64, det.config.image_height as f64);
    let mut pool: Vec<BBox> = proposals.to_vec();
    for g in gts {
        pool.push(*g);
        for _ in 0..cfg.gt_jitter_copies {
            pool.push(jitter_box(g, rng, w, h));
        }
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for b in pool {
        let best = gts.iter().enumerate().map(|(i, g)| (iou(&b, g), i)).max_by(|a, b| a.0.total_cmp(&b.0));
        match best {
            Some((v, i)) if v >= 0.5 => pos.push((b, Some(i))),
            _ => neg.push((b, None)),
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let npos = ((cfg.roi_batch as f64 * cfg.roi_pos_frac).round() as usize).min(pos.len());
    pos.truncate(npos);
    neg.truncate(cfg.roi_batch - npos);
    pos.extend(neg);
    pos.into_iter().unzip()
}

fn two_stage_loss<R: Rng>(
    stage1: &DenseOutputs,
    stage2: &DenseOutputs,
    labels: &[Option<usize>],
    layout: &Layout,
    cfg: &TrainConfig,
    rng: &mut R,
) -> (LossParts, DenseGrads, DenseGrads) {
    let gts = layout.boxes();
    let mut parts = LossParts::default();
    // region proposals
    let mut g1 = stage1.zero_grads();
    let assigned = assign(&stage1.refs, &gts, cfg.rpn_pos_iou, cfg.rpn_neg_iou);
    let mut pos: Vec<(usize, usize)> = assigned.iter().filter_map(|&(r, g)| g.map(|g| (r, g))).collect();
    let mut neg: Vec<usize> = assigned.iter().filter(|a| a.1.is_none()).map(|a| a.0).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(cfg.rpn_batch / 2);
    neg.truncate(cfg.rpn_batch - pos.len());
    let n = (pos.len() + neg.len()).max(1) as f64;
    let npos = pos.len().max(1) as f64;
    for &(r, g) in &pos {
        let x = stage1.cls_logits[r];
        parts.rpn_cls += -log_sigmoid(x) / n;
        g1.cls[r] += (sigmoid(x) - 1.0) / n;
        parts.rpn_reg += reg_loss(stage1, &mut g1, r, &gts[g], cfg.reg_beta, cfg.reg_weight / npos);
    }
    for &r in &neg {
        let x = stage1.cls_logits[r];
        parts.rpn_cls += -log_sigmoid(-x) / n;
        g1.cls[r] += sigmoid(x) / n;
    }
    // per-RoI heads
    let mut g2 = stage2.zero_grads();
    let r = stage2.rows();
    let width = stage2.width();
    let nr = r.max(1) as f64;
    let npos2 = labels.iter().filter(|l| l.is_some()).count().max(1) as f64;
    let s = stage2.mask_size;
    for i in 0..r {
        let target = labels[i].map_or(0, |g| layout.instances[g].category + 1);
        let p = softmax(stage2.row_logits(i));
        parts.cls += -p[target].max(1e-300).ln() / nr;
        for k in 0..width {
            g2.cls[i * width + k] += (p[k] - if k == target { 1.0 } else { 0.0 }) / nr;
        }
        if let Some(g) = labels[i] {
            parts.reg += reg_loss(stage2, &mut g2, i, &gts[g], cfg.reg_beta, cfg.reg_weight / npos2);
            if let (Some(logits), Some(gm), Some(mask)) = (stage2.mask_row(i), g2.mask.as_mut(), layout.instances[g].mask.as_ref()) {
                let t = crop_mask(mask, &stage2.refs[i], s);
                let k = cfg.mask_weight / (npos2 * (s * s) as f64);
                for j in 0..s * s {
                    parts.mask += k * crate::nn::bce_with_logits(logits[j], t[j]);
                    gm[i * s * s + j] += k * (sigmoid(logits[j]) - t[j]);
                }
            }
        }
    }
    (parts, g1, g2)
}

/// Loss and parameter gradient of one image; gradients accumulate into `grads`.
pub fn image_loss(
    det: &Detector,
    image: &Image,
    layout: &Layout,
    cfg: &TrainConfig,
    seed: u64,
    grads: &mut [f64],
) -> Result<LossParts, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gts = layout.boxes();
    let mut labels = Vec::new();
    let (raw, tape) = det.forward_tape_with(image, |s1| {
        let (rois, l) = sample_rois(det, &det.propose(s1), &gts, cfg, &mut rng);
        labels = l;
        rois
    })?;
    let (parts, raw_grads) = match &raw {
        RawOutputs::Single(block) => {
            let (p, g) = single_stage_loss(det, block, layout, cfg);
            (p, RawGrads::Single(g))
        }
        RawOutputs::Two { stage1, stage2, .. } => {
            let (p, g1, g2) = two_stage_loss(stage1, stage2, &labels, layout, cfg, &mut rng);
            (p, RawGrads::Two { stage1: g1, stage2: g2 })
        }
    };
    if parts.total().is_finite() {
        det.backward(&tape, &raw_grads, Some(grads));
    }
    Ok(parts)
}

fn learning_rate(cfg: &TrainConfig, step: u64, total: u64) -> f64 {
    let warm = if cfg.warmup_steps > 0 { ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0) } else { 1.0 };
    let t = (step as f64 / total.max(1) as f64).min(1.0);
    let cos = cfg.min_lr_frac + (1.0 - cfg.min_lr_frac) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    cfg.lr * warm * cos
}

/// Detections and AP@[.5:.95] / AP@0.5 on a labelled set.
pub fn evaluate(det: &Detector, data: &[(Image, Layout)]) -> Result<(f64, f64), TrainError> {
    let preds = data.iter().map(|(img, _)| det.detect(img)).collect::<Result<Vec<_>, _>>()?;
    let gts: Vec<Layout> = data.iter().map(|(_, l)| l.clone()).collect();
    let r = evaluate_ap(&preds, &gts, det.num_classes()).expect("aligned layouts");
    Ok((r.ap, r.ap50))
}

/// Train `det` in place, resuming from `state` when given. `on_epoch` sees
/// each epoch's log together with the state needed to resume after it.
pub fn train<F>(
    det: &mut Detector,
    data: &[(Image, Layout)],
    val: &[(Image, Layout)],
    cfg: &TrainConfig,
    state: Option<TrainState>,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>, TrainError>
where
    F: FnMut(&EpochLog, &Detector, &TrainState),
{
    cfg.validate().map_err(TrainError::Config)?;
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut state = state.unwrap_or_else(|| TrainState { epoch: 0, adam: Adam::new(det.params.len(), cfg.lr) });
    state.adam.weight_decay = cfg.weight_decay;
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let mut logs = Vec::new();
    let mut last_finite = f64::NAN;
    let mut grads = vec![0.0; det.params.len()];
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37))));
        let mut epoch_parts = LossParts::default();
        for batch in order.chunks(cfg.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_parts = LossParts::default();
            for &i in batch {
                let seed = splitmix(cfg.seed.wrapping_add(splitmix(state.adam.step)).wrapping_add(i as u64));
                let parts = image_loss(det, &data[i].0, &data[i].1, cfg, seed, &mut grads)?;
                if !parts.total().is_finite() {
                    return Err(TrainError::Diverged { epoch, step: state.adam.step, image: i, loss: parts.total(), last_finite });
                }
                last_finite = parts.total();
                batch_parts.add(&parts);
            }
            let k = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= k);
            let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(TrainError::Diverged { epoch, step: state.adam.step, image: batch[0], loss: norm, last_finite });
            }
            if norm > cfg.grad_clip {
                let c = cfg.grad_clip / norm;
                grads.iter_mut().for_each(|g| *g *= c);
            }
            let lr = learning_rate(cfg, state.adam.step, total);
            state.adam.update_with_lr(&mut det.params.values, &grads, lr);
            epoch_parts.add(&batch_parts);
        }
        epoch_parts.scale(1.0 / data.len() as f64);
        state.epoch += 1;
        let (val_ap, val_ap50) = if cfg.eval_every > 0 && !val.is_empty() && state.epoch % cfg.eval_every == 0 {
            let (a, b) = evaluate(det, val)?;
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        let log = EpochLog { epoch: state.epoch, loss: epoch_parts.total(), parts: epoch_parts, val_ap, val_ap50 };
        log::info!("epoch {} loss {:.4} val AP50 {:?}", log.epoch, log.loss, log.val_ap50);
        on_epoch(&log, det, &state);
        logs.push(log);
    }
    Ok(logs)
}
