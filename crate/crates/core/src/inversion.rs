//! Layout inversion: alternate between projecting the raw detector outputs
//! onto the set of pseudo-targets whose post-processing is exactly the target
//! layout, and one gradient step on the image towards those targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{
    crop_mask, postprocess_dense, ClsKind, DenseGrads, DenseOutputs, Detector, DetectorError, PostprocessConfig, RawGrads,
    RawOutputs, Tape,
};
use crate::geometry::{decode_box_with_jacobian, encode_box, giou_with_grad, iou, match_by_iou, BBox, GeometryError};
use crate::image::Image;
use crate::layout::{Detection, Layout};
use crate::nn::{bce_with_logits, log_sigmoid, logit, sigmoid, softmax};
use crate::shapes::splitmix;

#[derive(Debug, Error)]
pub enum InversionError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("target instance {index} has category {category}; the model has {num_classes} classes")]
    UnknownCategory { index: usize, category: usize, num_classes: usize },
    #[error("target instances {a} and {b} share a class and overlap at IoU {iou:.3}, above the NMS threshold")]
    Infeasible { a: usize, b: usize, iou: f64 },
    #[error("target has {instances} instances; post-processing keeps at most {cap}")]
    OverCap { instances: usize, cap: usize },
    #[error("target box {index} lies outside the image")]
    OutOfImage { index: usize },
    #[error("projected pseudo-targets do not reproduce the target layout")]
    Projection,
    #[error("non-finite image gradient at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("mask loss requested but the model has no mask head")]
    NoMaskHead,
    #[error("invalid inversion config: {0}")]
    Config(String),
}

/// Which distance terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSubset {
    pub cls: bool,
    pub reg: bool,
    pub mask: bool,
}

impl Default for LossSubset {
    fn default() -> Self {
        Self { cls: true, reg: true, mask: true }
    }
}

impl LossSubset {
    pub fn only(cls: bool, reg: bool, mask: bool) -> Self {
        Self { cls, reg, mask }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant,
    Cosine,
}

/// How the pixel gradient becomes a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `I ← I − η·g`.
    Sgd,
    /// `I ← I − η·g / rms(g)`.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Uniform noise in `[init_lo, init_hi]`.
    Noise,
    /// Constant mid-gray.
    Gray,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub schedule: StepSchedule,
    pub rule: StepRule,
    pub lambda: f64,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub lambda_mask: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tv_weight: f64,
    pub pnorm_weight: f64,
    pub pnorm_exponent: f64,
    pub blur_every: usize,
    pub blur_sigma: f64,
    pub jitter: i64,
    pub init: InitMode,
    pub init_lo: f64,
    pub init_hi: f64,
    pub seed: u64,
    pub losses: LossSubset,
    /// Probability a matched row's class is raised to.
    pub match_prob: f64,
    /// Probability a suppressed row's classes are lowered to.
    pub background_prob: f64,
    /// Probability a single-anchor visualization must reach.
    pub anchor_prob: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            step_size: 0.1,
            schedule: StepSchedule::Cosine,
            rule: StepRule::Normalized,
            lambda: 1.0,
            lambda_cls: 1.0,
            lambda_reg: 1.0,
            lambda_mask: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            tv_weight: 1e-3,
            pnorm_weight: 1e-4,
            pnorm_exponent: 6.0,
            blur_every: 10,
            blur_sigma: 0.5,
            jitter: 2,
            init: InitMode::Noise,
            init_lo: 0.4,
            init_hi: 0.6,
            seed: 0,
            losses: LossSubset::default(),
            match_prob: 0.95,
            background_prob: 0.05,
            anchor_prob: 0.99,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self, post: &PostprocessConfig) -> Result<(), InversionError> {
        let weights = [
            self.step_size,
            self.lambda,
            self.lambda_cls,
            self.lambda_reg,
            self.lambda_mask,
            self.lambda1,
            self.lambda2,
            self.tv_weight,
            self.pnorm_weight,
            self.blur_sigma,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(InversionError::Config("weights and step size must be finite and non-negative".into()));
        }
        if self.iterations == 0 {
            return Err(InversionError::Config("iterations must be at least 1".into()));
        }
        if !(self.losses.cls || self.losses.reg || self.losses.mask) {
            return Err(InversionError::Config("loss subset must not be empty".into()));
        }
        if !(self.match_prob > post.score_thresh && self.match_prob < 1.0) {
            return Err(InversionError::Config("match_prob must lie in (score_thresh, 1)".into()));
        }
        if !(self.background_prob > 0.0 && self.background_prob < post.score_thresh) {
            return Err(InversionError::Config("background_prob must lie in (0, score_thresh)".into()));
        }
        if self.pnorm_exponent < 1.0 || self.jitter < 0 || self.init_lo > self.init_hi {
            return Err(InversionError::Config("p ≥ 1, jitter ≥ 0 and init_lo ≤ init_hi required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Role {
    Matched(usize),
    Suppressed,
    Free,
}

/// Pseudo-targets for one dense block: `z` has the raw block's shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBlock {
    pub z: DenseOutputs,
    pub roles: Vec<Role>,
}

impl PseudoBlock {
    /// `(row, instance)` for every matched row, in instance order.
    pub fn matched(&self) -> Vec<(usize, usize)> {
        let mut m: Vec<(usize, usize)> = self
            .roles
            .iter()
            .enumerate()
            .filter_map(|(r, role)| match role {
                Role::Matched(i) => Some((r, *i)),
                _ => None,
            })
            .collect();
        m.sort_by_key(|&(_, i)| i);
        m
    }

    pub fn count(&self, pred: impl Fn(&Role) -> bool) -> usize {
        self.roles.iter().filter(|r| pred(r)).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PseudoTargets {
    Single(PseudoBlock),
    Two { stage1: PseudoBlock, stage2: PseudoBlock },
}

impl PseudoTargets {
    pub fn final_block(&self) -> &PseudoBlock {
        match self {
            PseudoTargets::Single(b) => b,
            PseudoTargets::Two { stage2, .. } => stage2,
        }
    }
}

/// Reject targets no pseudo-target assignment can reproduce.
pub fn check_target(target: &Layout, num_classes: usize, post: &PostprocessConfig, width: usize, height: usize) -> Result<(), InversionError> {
    if target.len() > post.max_detections {
        return Err(InversionError::OverCap { instances: target.len(), cap: post.max_detections });
    }
    for (i, d) in target.instances.iter().enumerate() {
        if d.category >= num_classes {
            return Err(InversionError::UnknownCategory { index: i, category: d.category, num_classes });
        }
        if d.bbox.clip(width as f64, height as f64).max_abs_diff(&d.bbox) > 0.0 || d.bbox.is_degenerate() {
            return Err(InversionError::OutOfImage { index: i });
        }
        for (j, e) in target.instances.iter().enumerate().skip(i + 1) {
            let v = iou(&d.bbox, &e.bbox);
            if d.category == e.category && v > post.nms_thresh {
                return Err(InversionError::Infeasible { a: i, b: j, iou: v });
            }
        }
    }
    Ok(())
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Raise class `target` (a column) of a softmax row until its probability is at least `hi`.
fn softmax_raise(row: &mut [f64], target: usize, hi: f64) {
    let others = logsumexp(row.iter().enumerate().filter(|(k, _)| *k != target).map(|(_, v)| *v));
    let need = others + (hi / (1.0 - hi)).ln();
    if row[target] < need {
        row[target] = need;
    }
}

/// Raise the background column of a softmax row until no foreground probability exceeds `lo`.
fn softmax_background(row: &mut [f64], lo: f64) {
    let fg = &row[1..];
    let m = fg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = fg.iter().map(|v| (v - m).exp()).sum();
    let gap = 1.0 / lo - s;
    if gap > 0.0 {
        let need = m + gap.ln();
        if row[0] < need {
            row[0] = need;
        }
    }
}

fn set_matched(z: &mut DenseOutputs, row: usize, category: usize, hi: f64, lo: f64) {
    let w = z.width();
    let cls = &mut z.cls_logits[row * w..(row + 1) * w];
    match z.kind {
        ClsKind::Sigmoid => {
            for (k, v) in cls.iter_mut().enumerate() {
                *v = if k == category { v.max(logit(hi)) } else { v.min(logit(lo)) };
            }
        }
        ClsKind::Softmax => softmax_raise(cls, category + 1, hi),
    }
}

fn set_background(z: &mut DenseOutputs, row: usize, lo: f64) {
    let w = z.width();
    let cls = &mut z.cls_logits[row * w..(row + 1) * w];
    match z.kind {
        ClsKind::Sigmoid => cls.iter_mut().for_each(|v| *v = v.min(logit(lo))),
        ClsKind::Softmax => softmax_background(cls, lo),
    }
}

/// Minimal-perturbation projection of one block. Each target instance takes
/// the candidate of highest reference-box IoU (class and encoded box set);
/// with `suppress`, unmatched rows that would survive post-processing get
/// background targets until post-processing yields exactly the target.
pub fn project_block(
    raw: &DenseOutputs,
    target: &Layout,
    post: &PostprocessConfig,
    width: usize,
    height: usize,
    hi: f64,
    lo: f64,
    suppress: bool,
) -> Result<PseudoBlock, InversionError> {
    let rows = match_by_iou(&target.boxes(), &raw.refs)?;
    let mut z = raw.clone();
    let mut roles = vec![Role::Free; raw.rows()];
    for (i, (&r, d)) in rows.iter().zip(&target.instances).enumerate() {
        roles[r] = Role::Matched(i);
        set_matched(&mut z, r, d.category, hi, lo);
        let t = encode_box(&d.bbox, &z.refs[r])?;
        z.reg_deltas[r * 4..r * 4 + 4].copy_from_slice(&t);
    }
    if suppress {
        loop {
            let mut changed = false;
            for k in postprocess_dense(&z, post, width, height) {
                if !matches!(roles[k.row], Role::Matched(_)) {
                    set_background(&mut z, k.row, lo);
                    roles[k.row] = Role::Suppressed;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let got = Layout::new(postprocess_dense(&z, post, width, height).into_iter().map(|k| k.detection).collect());
        if !got.matches(target, 1e-4) {
            return Err(InversionError::Projection);
        }
    }
    Ok(PseudoBlock { z, roles })
}

fn class_agnostic(target: &Layout) -> Layout {
    Layout::new(target.instances.iter().map(|d| Detection::new(d.bbox, 0, 1.0)).collect())
}

/// Z-update. Single-stage: one projected block. Two-stage: the stage-1 block
/// is matched class-agnostically on anchors (no suppression), the stage-2
/// block is projected on the current RoIs.
pub fn update_pseudo_targets(det: &Detector, raw: &RawOutputs, target: &Layout, cfg: &InversionConfig) -> Result<PseudoTargets, InversionError> {
    let post = &det.config.postprocess;
    let (w, h) = (det.config.image_width, det.config.image_height);
    let (hi, lo) = (cfg.match_prob, cfg.background_prob);
    match raw {
        RawOutputs::Single(block) => Ok(PseudoTargets::Single(project_block(block, target, post, w, h, hi, lo, true)?)),
        RawOutputs::Two { stage1, stage2, .. } => Ok(PseudoTargets::Two {
            stage1: project_block(stage1, &class_agnostic(target), post, w, h, hi, lo, false)?,
            stage2: project_block(stage2, target, post, w, h, hi, lo, true)?,
        }),
    }
}

/// Per-term distance values (before weighting).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DistanceParts {
    pub cls: f64,
    pub reg: f64,
    pub mask: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub cls: f64,
    pub reg: f64,
    pub mask: f64,
}

impl TermWeights {
    pub fn from_config(cfg: &InversionConfig) -> Self {
        let on = |b: bool, w: f64| if b { w } else { 0.0 };
        Self {
            cls: on(cfg.losses.cls, cfg.lambda_cls),
            reg: on(cfg.losses.reg, cfg.lambda_reg),
            mask: on(cfg.losses.mask, cfg.lambda_mask),
        }
    }

    pub fn combine(&self, p: &DistanceParts) -> f64 {
        self.cls * p.cls + self.reg * p.reg + self.mask * p.mask
    }
}

/// `ℓ_cls` over matched and suppressed rows (normalized by the matched count),
/// `ℓ_reg = mean(1 − GIoU)` over matched rows, and per-RoI mask BCE.
/// Gradients of `scale · Σ weights·terms` are accumulated into `grads`.
pub fn block_distance(
    raw: &DenseOutputs,
    z: &PseudoBlock,
    target: &Layout,
    weights: &TermWeights,
    scale: f64,
    grads: &mut DenseGrads,
) -> DistanceParts {
    let matched = z.matched();
    let norm = matched.len().max(1) as f64;
    let w = raw.width();
    let mut parts = DistanceParts::default();
    for (r, role) in z.roles.iter().enumerate() {
        if matches!(role, Role::Free) {
            continue;
        }
        let x = raw.row_logits(r);
        let t = z.z.row_logits(r);
        let g = &mut grads.cls[r * w..(r + 1) * w];
        match raw.kind {
            ClsKind::Sigmoid => {
                for k in 0..w {
                    let tk = sigmoid(t[k]);
                    parts.cls += bce_with_logits(x[k], tk) / norm;
                    g[k] += scale * weights.cls * (sigmoid(x[k]) - tk) / norm;
                }
            }
            ClsKind::Softmax => {
                let px = softmax(x);
                let pt = softmax(t);
                let lse = logsumexp(x.iter().copied());
                for k in 0..w {
                    parts.cls += pt[k] * (lse - x[k]) / norm;
                    g[k] += scale * weights.cls * (px[k] - pt[k]) / norm;
                }
            }
        }
    }
    let s = raw.mask_size;
    let mut mask_rows = 0usize;
    for &(r, i) in &matched {
        let (pred, jac) = decode_box_with_jacobian(raw.deltas(r), &raw.refs[r]);
        let (gv, dg) = giou_with_grad(&pred, &target.instances[i].bbox);
        parts.reg += (1.0 - gv) / norm;
        for j in 0..4 {
            let d: f64 = (0..4).map(|c| -dg[c] * jac[c][j]).sum();
            grads.reg[r * 4 + j] += scale * weights.reg * d / norm;
        }
        if let (Some(_), Some(_)) = (raw.mask_row(r), target.instances[i].mask.as_ref()) {
            mask_rows += 1;
        }
    }
    if mask_rows > 0 {
        let k = 1.0 / (mask_rows * s * s) as f64;
        for &(r, i) in &matched {
            let (Some(logits), Some(mask), Some(gm)) = (raw.mask_row(r), target.instances[i].mask.as_ref(), grads.mask.as_mut()) else {
                continue;
            };
            let t = crop_mask(mask, &raw.refs[r], s);
            for j in 0..s * s {
                parts.mask += k * bce_with_logits(logits[j], t[j]);
                gm[r * s * s + j] += scale * weights.mask * k * (sigmoid(logits[j]) - t[j]);
            }
        }
    }
    parts
}

/// Weighted distance `d(Z, Φ(I))` and its gradient with respect to the raw outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Distance {
    pub total: f64,
    pub stage1: Option<DistanceParts>,
    pub parts: DistanceParts,
    pub grads: RawGrads,
}

pub fn distance(raw: &RawOutputs, z: &PseudoTargets, target: &Layout, cfg: &InversionConfig) -> Distance {
    let w = TermWeights::from_config(cfg);
    match (raw, z) {
        (RawOutputs::Single(b), PseudoTargets::Single(p)) => {
            let mut g = b.zero_grads();
            let parts = block_distance(b, p, target, &w, 1.0, &mut g);
            Distance { total: w.combine(&parts), stage1: None, parts, grads: RawGrads::Single(g) }
        }
        (RawOutputs::Two { stage1, stage2, .. }, PseudoTargets::Two { stage1: z1, stage2: z2 }) => {
            let agnostic = class_agnostic(target);
            let w1 = TermWeights { mask: 0.0, ..w };
            let mut g1 = stage1.zero_grads();
            let p1 = block_distance(stage1, z1, &agnostic, &w1, cfg.lambda1, &mut g1);
            let mut g2 = stage2.zero_grads();
            let p2 = block_distance(stage2, z2, target, &w, cfg.lambda2, &mut g2);
            Distance {
                total: cfg.lambda1 * w1.combine(&p1) + cfg.lambda2 * w.combine(&p2),
                stage1: Some(p1),
                parts: p2,
                grads: RawGrads::Two { stage1: g1, stage2: g2 },
            }
        }
        _ => panic!("pseudo-targets do not match the raw outputs"),
    }
}

/// `R(I) = w_tv·Σ (∇I)² + w_p·Σ |I − ½|^p` and its pixel gradient.
pub fn regularize(image: &Image, cfg: &InversionConfig) -> (f64, Vec<f64>) {
    let (w, h) = (image.width, image.height);
    let mut grad = vec![0.0; image.data.len()];
    let mut tv = 0.0;
    let mut pn = 0.0;
    let p = cfg.pnorm_exponent;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let i = image.idx(c, x, y);
                let v = image.data[i];
                if x + 1 < w {
                    let d = image.data[i + 1] - v;
                    tv += d * d;
                    grad[i] -= 2.0 * cfg.tv_weight * d;
                    grad[i + 1] += 2.0 * cfg.tv_weight * d;
                }
                if y + 1 < h {
                    let d = image.data[i + w] - v;
                    tv += d * d;
                    grad[i] -= 2.0 * cfg.tv_weight * d;
                    grad[i + w] += 2.0 * cfg.tv_weight * d;
                }
                let u = v - 0.5;
                pn += u.abs().powf(p);
                grad[i] += cfg.pnorm_weight * p * u.abs().powf(p - 1.0) * u.signum();
            }
        }
    }
    (cfg.tv_weight * tv + cfg.pnorm_weight * pn, grad)
}

/// Jitter offset used at `step`; a pure function of the seed and step.
pub fn jitter_offset(cfg: &InversionConfig, step: usize) -> (i64, i64) {
    if cfg.jitter == 0 {
        return (0, 0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(step as u64 + 1)));
    (rng.random_range(-cfg.jitter..=cfg.jitter), rng.random_range(-cfg.jitter..=cfg.jitter))
}

/// The image the detector sees at `step`: circularly shifted by the jitter offset.
pub fn transform_image(image: &Image, step: usize, cfg: &InversionConfig) -> Image {
    let (dx, dy) = jitter_offset(cfg, step);
    if dx == 0 && dy == 0 {
        image.clone()
    } else {
        image.roll(dx, dy)
    }
}

/// Whether the blur is applied after the 1-based step `step`.
pub fn blur_due(step: usize, cfg: &InversionConfig) -> bool {
    cfg.blur_every > 0 && step > 0 && step % cfg.blur_every == 0
}

pub fn step_size_at(cfg: &InversionConfig, step: usize) -> f64 {
    match cfg.schedule {
        StepSchedule::Constant => cfg.step_size,
        StepSchedule::Cosine => {
            let t = step as f64 / cfg.iterations.max(1) as f64;
            cfg.step_size * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
        }
    }
}

pub fn init_image(cfg: &InversionConfig, width: usize, height: usize) -> Image {
    match cfg.init {
        InitMode::Gray => Image::filled(width, height, 0.5),
        InitMode::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed));
            Image::noise(width, height, cfg.init_lo, cfg.init_hi, &mut rng)
        }
    }
}

/// `λ·d + R` and its gradient with respect to the unshifted image.
#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub distance: Distance,
    pub regularizer: f64,
    pub grad: Vec<f64>,
}

fn objective_from_tape(det: &Detector, image: &Image, shift: (i64, i64), tape: &Tape, dist: Distance, cfg: &InversionConfig) -> Objective {
    let back = det.backward(tape, &dist.grads, None);
    let mut g = Image::from_data(image.width, image.height, back.pixels);
    if shift != (0, 0) {
        g = g.roll(-shift.0, -shift.1);
    }
    let (r, gr) = regularize(image, cfg);
    let grad: Vec<f64> = g.data.iter().zip(&gr).map(|(a, b)| cfg.lambda * a + b).collect();
    Objective { value: cfg.lambda * dist.total + r, regularizer: r, distance: dist, grad }
}

fn forward_for(det: &Detector, image: &Image, z: Option<&PseudoTargets>) -> Result<(RawOutputs, Tape), DetectorError> {
    match z {
        Some(PseudoTargets::Two { stage2, .. }) => det.forward_tape_with_rois(image, Some(&stage2.z.refs)),
        _ => det.forward_tape(image),
    }
}

/// Objective with `Z` held fixed (stage-2 RoIs are taken from `Z`); no jitter.
pub fn objective(det: &Detector, image: &Image, z: &PseudoTargets, target: &Layout, cfg: &InversionConfig) -> Result<Objective, InversionError> {
    let (raw, tape) = forward_for(det, image, Some(z))?;
    let dist = distance(&raw, z, target, cfg);
    Ok(objective_from_tape(det, image, (0, 0), &tape, dist, cfg))
}

fn apply_step(image: &Image, grad: &[f64], rule: StepRule, eta: f64) -> Image {
    let scale = match rule {
        StepRule::Sgd => eta,
        StepRule::Normalized => {
            let rms = (grad.iter().map(|g| g * g).sum::<f64>() / grad.len() as f64).sqrt();
            if rms > 0.0 {
                eta / rms
            } else {
                0.0
            }
        }
    };
    let mut out = image.clone();
    for (v, g) in out.data.iter_mut().zip(grad) {
        *v -= scale * g;
    }
    out.clamp_unit();
    out
}

/// I-update: one gradient step on `λ·d(Z, Φ(I)) + R(I)` with `Z` fixed, step size from the schedule at `step`.
pub fn image_step(
    det: &Detector,
    image: &Image,
    z: &PseudoTargets,
    target: &Layout,
    cfg: &InversionConfig,
    step: usize,
) -> Result<Image, InversionError> {
    let obj = objective(det, image, z, target, cfg)?;
    if obj.grad.iter().any(|g| !g.is_finite()) {
        return Err(InversionError::NonFinite { iteration: step });
    }
    Ok(apply_step(image, &obj.grad, cfg.rule, step_size_at(cfg, step)))
}

/// One row of the inversion trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub distance: f64,
    pub cls: f64,
    pub reg: f64,
    pub mask: f64,
    pub regularizer: f64,
    pub suppressed: usize,
    /// IoU of each instance's matched raw box with its target.
    pub ious: Vec<f64>,
    /// Share of target instances covered by a proposal at IoU ≥ 0.5 (two-stage).
    pub coverage: Option<f64>,
    /// Post-processing the pseudo-targets gives back the (shifted) target layout.
    pub projected: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,distance,cls,reg,mask,regularizer,suppressed,coverage,projected,ious\n");
        for r in &self.rows {
            let ious: Vec<String> = r.ious.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&format!(
                "{},{:.8},{:.8},{:.8},{:.8},{:.8},{},{},{},{}\n",
                r.iteration,
                r.distance,
                r.cls,
                r.reg,
                r.mask,
                r.regularizer,
                r.suppressed,
                r.coverage.map_or(String::new(), |c| format!("{c:.4}")),
                r.projected,
                ious.join(";")
            ));
        }
        s
    }
}

/// Whether post-processing the pseudo-targets reproduces `target`
/// (categories exact, boxes within 1e-4).
pub fn projection_holds(det: &Detector, z: &PseudoBlock, target: &Layout) -> bool {
    let got = det.postprocess_kept(&z.z).into_iter().map(|k| k.detection).collect();
    Layout::new(got).matches(target, 1e-4)
}

/// Whether `detected` reproduces `target`: same size, a one-to-one same-class
/// matching at IoU ≥ `thresh`. Returns the matched IoU per target instance (0 when unmatched).
pub fn layout_reproduced(detected: &Layout, target: &Layout, thresh: f64) -> (bool, Vec<f64>) {
    let mut pairs = Vec::new();
    for (i, t) in target.instances.iter().enumerate() {
        for (j, d) in detected.instances.iter().enumerate() {
            if d.category == t.category {
                let v = iou(&d.bbox, &t.bbox);
                if v >= thresh {
                    pairs.push((v, i, j));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut ious = vec![0.0; target.len()];
    let mut used_t = vec![false; target.len()];
    let mut used_d = vec![false; detected.len()];
    for (v, i, j) in pairs {
        if !used_t[i] && !used_d[j] {
            used_t[i] = true;
            used_d[j] = true;
            ious[i] = v;
        }
    }
    let ok = detected.len() == target.len() && used_t.iter().all(|&u| u);
    (ok, ious)
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub image: Image,
    pub trace: Trace,
    /// Iterations actually run (0 when the initial image already satisfies the target).
    pub iterations: usize,
    pub detected: Layout,
    pub success: bool,
    pub final_ious: Vec<f64>,
}

fn coverage(proposals: &[BBox], target: &Layout) -> f64 {
    if target.is_empty() {
        return 1.0;
    }
    let hit = target.instances.iter().filter(|t| proposals.iter().any(|p| iou(p, &t.bbox) >= 0.5)).count();
    hit as f64 / target.len() as f64
}

/// Two-stage forward whose RoI set has at least `min` boxes: ordinary
/// proposals, topped up with the best remaining anchors by objectness.
fn forward_with_enough_rois(det: &Detector, image: &Image, min: usize) -> Result<(RawOutputs, Tape), DetectorError> {
    det.forward_tape_with(image, |s1| {
        let mut rois = det.propose(s1);
        if rois.len() < min {
            let mut order: Vec<usize> = (0..s1.rows()).collect();
            order.sort_by(|&a, &b| s1.cls_logits[b].total_cmp(&s1.cls_logits[a]).then(a.cmp(&b)));
            let (w, h) = (det.config.image_width as f64, det.config.image_height as f64);
            for r in order {
                if rois.len() >= min {
                    break;
                }
                let b = s1.decoded(r).clip(w, h);
                if !b.is_degenerate() {
                    rois.push(b);
                }
            }
        }
        rois
    })
}

/// Alternating inversion of `target`. Works for both architectures; for
/// two-stage models the stage weights `lambda1`, `lambda2` apply.
pub fn invert_layout(det: &Detector, target: &Layout, cfg: &InversionConfig, init: Option<Image>) -> Result<InversionResult, InversionError> {
    let post = &det.config.postprocess;
    let (w, h) = (det.config.image_width, det.config.image_height);
    cfg.validate(post)?;
    check_target(target, det.num_classes(), post, w, h)?;
    let mut image = init.unwrap_or_else(|| init_image(cfg, w, h));
    let mut trace = Trace::default();
    let detected = det.detect(&image)?;
    let (ok, ious) = layout_reproduced(&detected, target, 0.5);
    if ok {
        return Ok(InversionResult { image, trace, iterations: 0, detected, success: true, final_ious: ious });
    }
    for t in 0..cfg.iterations {
        let shift = jitter_offset(cfg, t);
        let shifted = if shift == (0, 0) { image.clone() } else { image.roll(shift.0, shift.1) };
        let tgt = if shift == (0, 0) { target.clone() } else { target.translate(shift.0 as f64, shift.1 as f64, w as f64, h as f64) };
        let (raw, tape) = match det.arch() {
            crate::detector::Arch::SingleStage => det.forward_tape(&shifted)?,
            crate::detector::Arch::TwoStage => forward_with_enough_rois(det, &shifted, tgt.len())?,
        };
        let z = update_pseudo_targets(det, &raw, &tgt, cfg)?;
        let dist = distance(&raw, &z, &tgt, cfg);
        let block = raw.final_block();
        let zb = z.final_block();
        let ious = zb.matched().iter().map(|&(r, i)| iou(&block.decoded(r), &tgt.instances[i].bbox)).collect();
        let cov = match &raw {
            RawOutputs::Two { proposals, .. } => Some(coverage(proposals, &tgt)),
            RawOutputs::Single(_) => None,
        };
        let suppressed = zb.count(|r| matches!(r, Role::Suppressed));
        let projected = projection_holds(det, zb, &tgt);
        let obj = objective_from_tape(det, &image, shift, &tape, dist, cfg);
        if obj.grad.iter().any(|g| !g.is_finite()) {
            return Err(InversionError::NonFinite { iteration: t });
        }
        trace.rows.push(TraceRow {
            iteration: t,
            distance: obj.distance.total,
            cls: obj.distance.parts.cls,
            reg: obj.distance.parts.reg,
            mask: obj.distance.parts.mask,
            regularizer: obj.regularizer,
            suppressed,
            ious,
            coverage: cov,
            projected,
        });
        image = apply_step(&image, &obj.grad, cfg.rule, step_size_at(cfg, t));
        if blur_due(t + 1, cfg) {
            image = image.gaussian_blur(cfg.blur_sigma);
        }
    }
    let detected = det.detect(&image)?;
    let (success, final_ious) = layout_reproduced(&detected, target, 0.5);
    Ok(InversionResult { image, trace, iterations: cfg.iterations, detected, success, final_ious })
}

/// Two-stage inversion; identical loop to [`invert_layout`] with the
/// stage-1 projection and `λ₁, λ₂` active.
pub fn invert_layout_two_stage(det: &Detector, target: &Layout, cfg: &InversionConfig) -> Result<InversionResult, InversionError> {
    if det.arch() != crate::detector::Arch::TwoStage {
        return Err(InversionError::Config("two-stage inversion needs a two-stage model".into()));
    }
    invert_layout(det, target, cfg, None)
}

/// Final-image agreement of the matched rows with the target, per term.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisentangleReport {
    pub subset: LossSubset,
    /// Mean probability of the target class on matched rows.
    pub class_prob: f64,
    /// Mean IoU of matched rows' decoded boxes with their targets.
    pub box_iou: f64,
    /// Mean IoU of matched rows' binarized masks with the target crops.
    pub mask_iou: Option<f64>,
    pub cls_met: bool,
    pub reg_met: bool,
    pub mask_met: Option<bool>,
}

/// Matched-row agreement on `image` (no jitter).
pub fn agreement(det: &Detector, image: &Image, target: &Layout, cfg: &InversionConfig) -> Result<(f64, f64, Option<f64>), InversionError> {
    let (raw, _) = match det.arch() {
        crate::detector::Arch::SingleStage => det.forward_tape(image)?,
        crate::detector::Arch::TwoStage => forward_with_enough_rois(det, image, target.len())?,
    };
    let z = update_pseudo_targets(det, &raw, target, cfg)?;
    let block = raw.final_block();
    let matched = z.final_block().matched();
    let n = matched.len().max(1) as f64;
    let mut prob = 0.0;
    let mut box_iou = 0.0;
    let mut mask_sum = 0.0;
    let mut mask_n = 0usize;
    for &(r, i) in &matched {
        let inst = &target.instances[i];
        prob += block.fg_probs(r)[inst.category] / n;
        box_iou += iou(&block.decoded(r), &inst.bbox) / n;
        if let (Some(logits), Some(mask)) = (block.mask_row(r), inst.mask.as_ref()) {
            let t = crop_mask(mask, &block.refs[r], block.mask_size);
            let (mut inter, mut uni) = (0usize, 0usize);
            for (l, tv) in logits.iter().zip(&t) {
                let (a, b) = (*l > 0.0, *tv >= 0.5);
                inter += (a && b) as usize;
                uni += (a || b) as usize;
            }
            mask_sum += if uni == 0 { 1.0 } else { inter as f64 / uni as f64 };
            mask_n += 1;
        }
    }
    Ok((prob, box_iou, (mask_n > 0).then(|| mask_sum / mask_n as f64)))
}

/// Inversion with only the `subset` distance terms active.
pub fn invert_disentangled(
    det: &Detector,
    target: &Layout,
    subset: LossSubset,
    cfg: &InversionConfig,
) -> Result<(InversionResult, DisentangleReport), InversionError> {
    if subset.mask && !det.has_mask_head() {
        return Err(InversionError::NoMaskHead);
    }
    let cfg = InversionConfig { losses: subset, ..cfg.clone() };
    let result = invert_layout(det, target, &cfg, None)?;
    let (class_prob, box_iou, mask_iou) = agreement(det, &result.image, target, &cfg)?;
    let report = DisentangleReport {
        subset,
        class_prob,
        box_iou,
        mask_iou: if subset.mask { mask_iou } else { None },
        cls_met: class_prob >= 0.9,
        reg_met: box_iou >= 0.5,
        mask_met: if subset.mask { mask_iou.map(|m| m >= 0.7) } else { None },
    };
    Ok((result, report))
}

#[derive(Debug, Clone)]
pub struct AnchorVisualization {
    pub image: Image,
    /// Target probability per iteration.
    pub trace: Vec<f64>,
    pub probability: f64,
    pub success: bool,
    pub anchor: BBox,
    /// Full detector output on the final image.
    pub detected: Layout,
}

fn anchor_prob(det: &Detector, image: &Image, row: usize, category: usize, rois: &[BBox]) -> Result<(f64, RawOutputs, Tape), DetectorError> {
    let (raw, tape) = det.forward_tape_with_rois(image, Some(rois))?;
    let p = match &raw {
        RawOutputs::Single(b) => b.fg_probs(row)[category],
        RawOutputs::Two { stage2, .. } => stage2.fg_probs(0)[category],
    };
    Ok((p, raw, tape))
}

/// Maximize one candidate's probability for `category`, nothing else
/// constrained. Two-stage models score the anchor box as a fixed RoI.
pub fn visualize_single_anchor(det: &Detector, anchor_row: usize, category: usize, cfg: &InversionConfig) -> Result<AnchorVisualization, InversionError> {
    cfg.validate(&det.config.postprocess)?;
    if anchor_row >= det.anchors.len() {
        return Err(InversionError::Config(format!("anchor {anchor_row} out of range ({} anchors)", det.anchors.len())));
    }
    if category >= det.num_classes() {
        return Err(InversionError::UnknownCategory { index: 0, category, num_classes: det.num_classes() });
    }
    let (w, h) = (det.config.image_width, det.config.image_height);
    let anchor = det.anchors.boxes[anchor_row];
    let rois = [anchor];
    let mut image = init_image(cfg, w, h);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let shift = jitter_offset(cfg, t);
        let shifted = if shift == (0, 0) { image.clone() } else { image.roll(shift.0, shift.1) };
        let (p, raw, tape) = anchor_prob(det, &shifted, anchor_row, category, &rois)?;
        trace.push(p);
        let grads = match &raw {
            RawOutputs::Single(b) => {
                let mut g = b.zero_grads();
                let k = anchor_row * b.width() + category;
                g.cls[k] = sigmoid(b.cls_logits[k]) - 1.0;
                RawGrads::Single(g)
            }
            RawOutputs::Two { stage1, stage2, .. } => {
                let mut g2 = stage2.zero_grads();
                let pr = softmax(stage2.row_logits(0));
                for (k, v) in pr.iter().enumerate() {
                    g2.cls[k] = v - if k == category + 1 { 1.0 } else { 0.0 };
                }
                RawGrads::Two { stage1: stage1.zero_grads(), stage2: g2 }
            }
        };
        let loss = match &raw {
            RawOutputs::Single(b) => -log_sigmoid(b.cls_logits[anchor_row * b.width() + category]),
            RawOutputs::Two { .. } => -p.max(1e-300).ln(),
        };
        let dist = Distance {
            total: loss,
            stage1: None,
            parts: DistanceParts { cls: loss, reg: 0.0, mask: 0.0 },
            grads,
        };
        let obj = objective_from_tape(det, &image, shift, &tape, dist, cfg);
        if obj.grad.iter().any(|g| !g.is_finite()) {
            return Err(InversionError::NonFinite { iteration: t });
        }
        image = apply_step(&image, &obj.grad, cfg.rule, step_size_at(cfg, t));
        if blur_due(t + 1, cfg) {
            image = image.gaussian_blur(cfg.blur_sigma);
        }
    }
    let (probability, _, _) = anchor_prob(det, &image, anchor_row, category, &rois)?;
    let detected = det.detect(&image)?;
    Ok(AnchorVisualization { image, trace, probability, success: probability >= cfg.anchor_prob, anchor, detected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{tiny_config, Arch};
    use crate::layout::Mask;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn block(kind: ClsKind, nc: usize, refs: Vec<BBox>, logit: f64) -> DenseOutputs {
        let w = if kind == ClsKind::Sigmoid { nc } else { nc + 1 };
        let n = refs.len();
        let mut cls = vec![logit; n * w];
        if kind == ClsKind::Softmax {
            for r in 0..n {
                cls[r * w] = 5.0;
            }
        }
        DenseOutputs { kind, num_classes: nc, cls_logits: cls, reg_deltas: vec![0.0; n * 4], refs, mask_logits: None, mask_size: 0 }
    }

    fn post() -> PostprocessConfig {
        PostprocessConfig::default()
    }

    #[test]
    fn empty_target_without_survivors_changes_nothing() {
        let raw = block(ClsKind::Sigmoid, 2, vec![bx(0.0, 0.0, 10.0, 10.0), bx(5.0, 5.0, 20.0, 20.0)], -3.0);
        let z = project_block(&raw, &Layout::default(), &post(), 32, 32, 0.95, 0.05, true).unwrap();
        assert_eq!(z.z, raw);
        assert!(z.roles.iter().all(|r| *r == Role::Free));
    }

    #[test]
    fn single_target_takes_the_highest_iou_anchor() {
        let gt = bx(10.0, 10.0, 20.0, 20.0);
        // IoUs with the target: 0.1, 0.7, 0.3 (approximately)
        let refs = vec![bx(10.0, 10.0, 20.0, 11.0), bx(10.0, 10.0, 20.0, 17.0), bx(10.0, 10.0, 20.0, 13.0)];
        let ious: Vec<f64> = refs.iter().map(|r| iou(r, &gt)).collect();
        assert!((ious[0] - 0.1).abs() < 1e-9 && (ious[1] - 0.7).abs() < 1e-9 && (ious[2] - 0.3).abs() < 1e-9);
        let raw = block(ClsKind::Sigmoid, 1, refs, -4.0);
        let target = Layout::new(vec![Detection::new(gt, 0, 1.0)]);
        let z = project_block(&raw, &target, &post(), 32, 32, 0.95, 0.05, true).unwrap();
        assert_eq!(z.roles, vec![Role::Free, Role::Matched(0), Role::Free]);
        assert_eq!(z.z.deltas(1), encode_box(&gt, &raw.refs[1]).unwrap());
        assert_eq!(z.z.row_logits(0), raw.row_logits(0));
        let got = Layout::new(postprocess_dense(&z.z, &post(), 32, 32).into_iter().map(|k| k.detection).collect());
        assert!(got.matches(&target, 1e-9));
    }

    #[test]
    fn spurious_detection_is_backgrounded() {
        for kind in [ClsKind::Sigmoid, ClsKind::Softmax] {
            let gt = bx(2.0, 2.0, 10.0, 10.0);
            let mut raw = block(kind, 2, vec![bx(2.0, 2.0, 10.0, 10.0), bx(20.0, 20.0, 30.0, 30.0)], -4.0);
            let w = raw.width();
            raw.cls_logits[w + w - 1] = 9.0;
            let target = Layout::new(vec![Detection::new(gt, 0, 1.0)]);
            let z = project_block(&raw, &target, &post(), 32, 32, 0.95, 0.05, true).unwrap();
            assert_eq!(z.roles, vec![Role::Matched(0), Role::Suppressed]);
            assert_eq!(z.z.deltas(1), raw.deltas(1));
            assert!(z.z.fg_probs(1).iter().all(|&p| p <= 0.05 + 1e-12));
        }
    }

    #[test]
    fn infeasible_targets_rejected() {
        let a = Detection::new(bx(0.0, 0.0, 10.0, 10.0), 0, 1.0);
        let b = Detection::new(bx(1.0, 0.0, 11.0, 10.0), 0, 1.0);
        assert!(matches!(check_target(&Layout::new(vec![a.clone(), b]), 2, &post(), 32, 32), Err(InversionError::Infeasible { .. })));
        let c = Detection::new(bx(0.0, 0.0, 10.0, 10.0), 5, 1.0);
        assert!(matches!(check_target(&Layout::new(vec![c]), 2, &post(), 32, 32), Err(InversionError::UnknownCategory { .. })));
        let raw = block(ClsKind::Sigmoid, 1, vec![bx(0.0, 0.0, 4.0, 4.0)], 0.0);
        let two = Layout::new(vec![a.clone(), Detection::new(bx(20.0, 20.0, 30.0, 30.0), 0, 1.0)]);
        assert!(matches!(project_block(&raw, &two, &post(), 32, 32, 0.95, 0.05, true), Err(InversionError::Geometry(_))));
    }

    fn random_layout(seed: u64, n: usize, nc: usize) -> Layout {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out: Vec<Detection> = Vec::new();
        for _ in 0..50 {
            if out.len() == n {
                break;
            }
            let (w, h) = (rng.random_range(3.0..20.0), rng.random_range(3.0..20.0));
            let x = rng.random_range(0.0..32.0 - w);
            let y = rng.random_range(0.0..32.0 - h);
            let d = Detection::new(bx(x, y, x + w, y + h), rng.random_range(0..nc), 1.0);
            if out.iter().all(|o| o.category != d.category || iou(&o.bbox, &d.bbox) <= 0.5) {
                out.push(d);
            }
        }
        Layout::new(out)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn projection_reproduces_target_and_keeps_free_rows(seed in any::<u64>(), n in 0usize..6, softmax_kind in any::<bool>()) {
            let kind = if softmax_kind { ClsKind::Softmax } else { ClsKind::Sigmoid };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
            let refs: Vec<BBox> = (0..40).map(|_| {
                let (w, h) = (rng.random_range(2.0..24.0), rng.random_range(2.0..24.0));
                let (x, y) = (rng.random_range(0.0..32.0 - w), rng.random_range(0.0..32.0 - h));
                bx(x, y, x + w, y + h)
            }).collect();
            let mut raw = block(kind, 3, refs, 0.0);
            raw.cls_logits.iter_mut().for_each(|v| *v = rng.random_range(-6.0..6.0));
            raw.reg_deltas.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            let target = random_layout(seed, n, 3);
            let z = project_block(&raw, &target, &post(), 32, 32, 0.95, 0.05, true).unwrap();
            let got = Layout::new(postprocess_dense(&z.z, &post(), 32, 32).into_iter().map(|k| k.detection).collect());
            prop_assert!(got.matches(&target, 1e-4));
            for (r, role) in z.roles.iter().enumerate() {
                if *role == Role::Free {
                    prop_assert_eq!(z.z.row_logits(r), raw.row_logits(r));
                    prop_assert_eq!(z.z.deltas(r), raw.deltas(r));
                }
            }
        }
    }

    fn no_reg_cfg() -> InversionConfig {
        InversionConfig { tv_weight: 0.0, pnorm_weight: 0.0, jitter: 0, blur_every: 0, ..InversionConfig::default() }
    }

    fn tiny_target() -> Layout {
        let mut m = Mask::empty(32, 32);
        for y in 6..18 {
            for x in 4..20 {
                m.set(x, y, true);
            }
        }
        let mut d = Detection::new(bx(4.0, 6.0, 20.0, 18.0), 1, 1.0);
        d.mask = Some(m);
        Layout::new(vec![d, Detection::new(bx(18.0, 20.0, 30.0, 31.0), 0, 1.0)])
    }

    #[test]
    fn distance_vanishes_at_the_targets() {
        let det = Detector::new(tiny_config(Arch::SingleStage));
        let img = init_image(&InversionConfig::default(), 32, 32);
        let raw = det.forward_raw(&img).unwrap();
        let cfg = no_reg_cfg();
        let target = tiny_target();
        let z = update_pseudo_targets(&det, &raw, &target, &cfg).unwrap();
        let PseudoTargets::Single(zb) = &z else { unreachable!() };
        let at_z = RawOutputs::Single(zb.z.clone());
        let d = distance(&at_z, &z, &target, &cfg);
        assert!(d.parts.reg.abs() < 1e-9);
        let RawGrads::Single(g) = &d.grads else { unreachable!() };
        assert!(g.cls.iter().chain(&g.reg).all(|v| v.abs() < 1e-9));
        // doubling the regression weight doubles its contribution exactly
        let d1 = distance(&raw, &z, &target, &cfg);
        let d2 = distance(&raw, &z, &target, &InversionConfig { lambda_reg: 2.0, ..cfg.clone() });
        assert!((d2.total - d1.total - d1.parts.reg).abs() < 1e-12);
    }

    fn fd_check(det: &Detector, cfg: &InversionConfig, probes: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Image::noise(32, 32, 0.2, 0.8, &mut rng);
        let target = tiny_target();
        let (raw, _) = forward_with_enough_rois(det, &img, target.len()).unwrap();
        let z = update_pseudo_targets(det, &raw, &target, cfg).unwrap();
        let obj = objective(det, &img, &z, &target, cfg).unwrap();
        let eps = 1e-6;
        for _ in 0..probes {
            let i = rng.random_range(0..img.data.len());
            let (mut a, mut b) = (img.clone(), img.clone());
            a.data[i] += eps;
            b.data[i] -= eps;
            let fa = objective(det, &a, &z, &target, cfg).unwrap().value;
            let fb = objective(det, &b, &z, &target, cfg).unwrap().value;
            let fd = (fa - fb) / (2.0 * eps);
            let g = obj.grad[i];
            assert!((fd - g).abs() <= 1e-3 * fd.abs().max(g.abs()).max(1e-6), "pixel {i}: fd {fd} vs {g}");
        }
    }

    #[test]
    fn distance_pixel_gradient_matches_finite_differences() {
        for arch in [Arch::SingleStage, Arch::TwoStage] {
            let det = Detector::new(tiny_config(arch));
            fd_check(&det, &no_reg_cfg(), 10);
        }
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        let cfg = InversionConfig { tv_weight: 0.3, pnorm_weight: 0.7, pnorm_exponent: 3.0, ..InversionConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Image::noise(6, 5, 0.0, 1.0, &mut rng);
        let (_, g) = regularize(&img, &cfg);
        for i in 0..img.data.len() {
            let (mut a, mut b) = (img.clone(), img.clone());
            a.data[i] += 1e-6;
            b.data[i] -= 1e-6;
            let fd = (regularize(&a, &cfg).0 - regularize(&b, &cfg).0) / 2e-6;
            assert!((fd - g[i]).abs() <= 1e-3 * fd.abs().max(1e-6));
        }
        assert_eq!(regularize(&Image::filled(6, 5, 0.25), &InversionConfig { pnorm_weight: 0.0, ..cfg }).0, 0.0);
    }

    #[test]
    fn blur_schedule_and_jitter_are_deterministic() {
        let cfg = InversionConfig { blur_every: 4, ..InversionConfig::default() };
        let due: Vec<usize> = (0..13).filter(|&s| blur_due(s, &cfg)).collect();
        assert_eq!(due, vec![4, 8, 12]);
        let img = init_image(&cfg, 8, 8);
        for s in 0..20 {
            let (dx, dy) = jitter_offset(&cfg, s);
            assert!(dx.abs() <= 2 && dy.abs() <= 2);
            assert_eq!(transform_image(&img, s, &cfg), transform_image(&img, s, &cfg));
        }
        assert!((0..20).any(|s| jitter_offset(&cfg, s) != (0, 0)));
    }

    fn fixed_z(det: &Detector, img: &Image, cfg: &InversionConfig) -> PseudoTargets {
        let (raw, _) = forward_with_enough_rois(det, img, 2).unwrap();
        update_pseudo_targets(det, &raw, &tiny_target(), cfg).unwrap()
    }

    #[test]
    fn zero_step_leaves_image_unchanged() {
        let det = Detector::new(tiny_config(Arch::SingleStage));
        let cfg = InversionConfig { step_size: 0.0, ..InversionConfig::default() };
        let img = init_image(&cfg, 32, 32);
        let z = fixed_z(&det, &img, &cfg);
        assert_eq!(image_step(&det, &img, &z, &tiny_target(), &cfg, 0).unwrap(), img);
    }

    #[test]
    fn small_steps_descend_the_objective() {
        for arch in [Arch::SingleStage, Arch::TwoStage] {
            let det = Detector::new(tiny_config(arch));
            let cfg = InversionConfig { rule: StepRule::Sgd, schedule: StepSchedule::Constant, step_size: 1e-3, ..no_reg_cfg() };
            let mut img = init_image(&cfg, 32, 32);
            let target = tiny_target();
            let z = fixed_z(&det, &img, &cfg);
            let mut values = vec![objective(&det, &img, &z, &target, &cfg).unwrap().value];
            for s in 0..50 {
                img = image_step(&det, &img, &z, &target, &cfg, s).unwrap();
                values.push(objective(&det, &img, &z, &target, &cfg).unwrap().value);
            }
            let down = values.windows(2).filter(|w| w[1] <= w[0]).count();
            assert!(down >= 45, "{arch:?}: {down}/50 non-increasing");
            // first-order prediction of the decrease
            let obj = objective(&det, &img, &z, &target, &cfg).unwrap();
            let g2: f64 = obj.grad.iter().map(|g| g * g).sum();
            let eta = 1e-4 / g2.sqrt();
            let next = apply_step(&img, &obj.grad, StepRule::Sgd, eta);
            let actual = obj.value - objective(&det, &next, &z, &target, &cfg).unwrap().value;
            let predicted = eta * g2;
            assert!((actual - predicted).abs() <= 0.2 * predicted, "{arch:?}: {actual} vs {predicted}");
        }
    }

    #[test]
    fn inversion_is_deterministic_and_keeps_the_projection_invariant() {
        for arch in [Arch::SingleStage, Arch::TwoStage] {
            let det = Detector::new(tiny_config(arch));
            let cfg = InversionConfig { iterations: 6, blur_every: 3, ..InversionConfig::default() };
            let a = invert_layout(&det, &tiny_target(), &cfg, None).unwrap();
            let b = invert_layout(&det, &tiny_target(), &cfg, None).unwrap();
            assert_eq!(a.image, b.image);
            assert_eq!(a.trace, b.trace);
            assert_eq!(a.trace.rows.len(), 6);
            assert!(a.trace.rows.iter().all(|r| r.projected), "{arch:?}");
            assert!(a.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
            let c = invert_layout(&det, &tiny_target(), &InversionConfig { seed: 1, ..cfg }, None).unwrap();
            assert_ne!(a.image, c.image);
        }
    }

    #[test]
    fn config_validation() {
        let p = post();
        assert!(InversionConfig::default().validate(&p).is_ok());
        assert!(InversionConfig { iterations: 0, ..InversionConfig::default() }.validate(&p).is_err());
        assert!(InversionConfig { lambda_reg: -1.0, ..InversionConfig::default() }.validate(&p).is_err());
        assert!(InversionConfig { losses: LossSubset::only(false, false, false), ..InversionConfig::default() }.validate(&p).is_err());
        let det = Detector::new(tiny_config(Arch::SingleStage));
        let r = invert_disentangled(&det, &tiny_target(), LossSubset::only(false, false, true), &InversionConfig::default());
        assert!(matches!(r, Err(InversionError::NoMaskHead)));
    }

    #[test]
    fn reproduction_check() {
        let t = tiny_target();
        assert!(layout_reproduced(&t, &t, 0.5).0);
        let mut wrong = t.clone();
        wrong.instances[0].category = 0;
        assert!(!layout_reproduced(&wrong, &t, 0.5).0);
        let mut extra = t.clone();
        extra.instances.push(Detection::new(bx(0.0, 0.0, 3.0, 3.0), 0, 0.9));
        let (ok, ious) = layout_reproduced(&extra, &t, 0.5);
        assert!(!ok);
        assert_eq!(ious, vec![1.0, 1.0]);
    }

    #[test]
    fn single_anchor_run_reports_probability_trace() {
        for arch in [Arch::SingleStage, Arch::TwoStage] {
            let det = Detector::new(tiny_config(arch));
            let cfg = InversionConfig { iterations: 5, ..InversionConfig::default() };
            let v = visualize_single_anchor(&det, 3, 1, &cfg).unwrap();
            assert_eq!(v.trace.len(), 5);
            assert!(v.probability >= 0.0 && v.probability <= 1.0);
            assert!(visualize_single_anchor(&det, 10_000, 1, &cfg).is_err());
        }
    }
}
