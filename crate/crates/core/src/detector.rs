//! Toy single-stage and two-stage detectors.
//!
//! Single-stage: `detect = postprocess ∘ forward_raw`, where the raw outputs are
//! one dense block of per-anchor class logits (sigmoid, multi-label) and box
//! deltas. Two-stage: a region proposal stage (`stage1` + non-differentiable
//! `propose`) feeding a per-RoI stage (`stage2`, softmax with background) and
//! its own post-processing. Every stage is separately callable, and
//! [`Detector::backward`] returns pixel gradients of any scalar built from the
//! raw outputs.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{decode_box, nms_indices, AnchorGrid, AnchorLevel, BBox};
use crate::image::Image;
use crate::layout::{Detection, Layout, Mask};
use crate::nn::{sigmoid, softmax, Adam, Conv2d, ConvCache, Feat, Linear, LinearCache, ParamStore, RoiAlign, RoiCache};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("image is {got_w}x{got_h}, model expects {want_w}x{want_h}")]
    Shape { got_w: usize, got_h: usize, want_w: usize, want_h: usize },
    #[error("{path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    SingleStage,
    TwoStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_detections: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { score_thresh: 0.5, nms_thresh: 0.5, max_detections: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub pre_nms_top_k: usize,
    pub nms_thresh: f64,
    pub post_nms_top_k: usize,
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { pre_nms_top_k: 300, nms_thresh: 0.7, post_nms_top_k: 32, min_size: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub arch: Arch,
    pub image_width: usize,
    pub image_height: usize,
    pub categories: Vec<String>,
    pub backbone: Vec<ConvSpec>,
    /// Backbone layer indices whose outputs are the feature levels.
    pub level_layers: Vec<usize>,
    pub anchor_levels: Vec<AnchorLevel>,
    pub head_width: usize,
    pub postprocess: PostprocessConfig,
    pub proposals: ProposalConfig,
    pub roi_size: usize,
    pub roi_samples: usize,
    pub fc_width: usize,
    pub mask_head: bool,
    pub mask_width: usize,
    /// RoIs whose side (sqrt area) is below this are pooled from level 0.
    pub roi_level_split: f64,
    pub init_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let conv = |out, stride| ConvSpec { out, stride };
        Self {
            arch: Arch::SingleStage,
            image_width: 128,
            image_height: 128,
            categories: crate::shapes::DatasetSpec::default().category_names(),
            backbone: vec![conv(16, 2), conv(32, 2), conv(48, 2), conv(48, 1), conv(48, 2), conv(48, 1)],
            level_layers: vec![3, 5],
            anchor_levels: vec![
                AnchorLevel { stride: 8, sizes: vec![16.0, 24.0, 32.0] },
                AnchorLevel { stride: 16, sizes: vec![48.0, 68.0, 96.0] },
            ],
            head_width: 32,
            postprocess: PostprocessConfig::default(),
            proposals: ProposalConfig::default(),
            roi_size: 7,
            roi_samples: 2,
            fc_width: 128,
            mask_head: true,
            mask_width: 16,
            roi_level_split: 40.0,
            init_seed: 1,
        }
    }
}

impl DetectorConfig {
    pub fn single_stage() -> Self {
        Self { arch: Arch::SingleStage, mask_head: false, ..Self::default() }
    }

    pub fn two_stage() -> Self {
        Self { arch: Arch::TwoStage, ..Self::default() }
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_levels[0].sizes.len()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.categories.is_empty() {
            return Err("categories must not be empty".into());
        }
        if self.level_layers.len() != self.anchor_levels.len() || self.level_layers.is_empty() {
            return Err("one anchor level per feature level is required".into());
        }
        let a = self.anchors_per_cell();
        if self.anchor_levels.iter().any(|l| l.sizes.len() != a || l.stride == 0) {
            return Err("every level needs the same number of anchor sizes".into());
        }
        let mut stride = 1;
        let mut level_channels = None;
        for (i, c) in self.backbone.iter().enumerate() {
            stride *= c.stride;
            if let Some(l) = self.level_layers.iter().position(|&x| x == i) {
                if self.anchor_levels[l].stride != stride {
                    return Err(format!("level {l}: anchor stride {} != feature stride {stride}", self.anchor_levels[l].stride));
                }
                if *level_channels.get_or_insert(c.out) != c.out {
                    return Err("all feature levels must have equal channel counts".into());
                }
                if self.image_width % stride != 0 || self.image_height % stride != 0 {
                    return Err(format!("image size must be divisible by stride {stride}"));
                }
            }
        }
        if self.level_layers.iter().any(|&l| l >= self.backbone.len()) {
            return Err("level layer index out of range".into());
        }
        Ok(())
    }
}

/// Classification form of a dense output block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsKind {
    /// Independent per-class sigmoid; background is "all classes low".
    Sigmoid,
    /// Softmax over `[background, class 0, class 1, ...]`.
    Softmax,
}

/// `N×(D_cls + D_reg)` candidate outputs with the reference boxes their deltas apply to.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOutputs {
    pub kind: ClsKind,
    pub num_classes: usize,
    pub cls_logits: Vec<f64>,
    pub reg_deltas: Vec<f64>,
    pub refs: Vec<BBox>,
    /// Per-row `S×S` mask logits relative to the reference box.
    pub mask_logits: Option<Vec<f64>>,
    pub mask_size: usize,
}

impl DenseOutputs {
    pub fn rows(&self) -> usize {
        self.refs.len()
    }

    /// Columns of `cls_logits` per row.
    pub fn width(&self) -> usize {
        match self.kind {
            ClsKind::Sigmoid => self.num_classes,
            ClsKind::Softmax => self.num_classes + 1,
        }
    }

    pub fn row_logits(&self, row: usize) -> &[f64] {
        let w = self.width();
        &self.cls_logits[row * w..(row + 1) * w]
    }

    /// Foreground class probabilities of one row.
    pub fn fg_probs(&self, row: usize) -> Vec<f64> {
        let l = self.row_logits(row);
        match self.kind {
            ClsKind::Sigmoid => l.iter().map(|&v| sigmoid(v)).collect(),
            ClsKind::Softmax => softmax(l)[1..].to_vec(),
        }
    }

    pub fn deltas(&self, row: usize) -> &[f64] {
        &self.reg_deltas[row * 4..row * 4 + 4]
    }

    pub fn decoded(&self, row: usize) -> BBox {
        decode_box(self.deltas(row), &self.refs[row])
    }

    pub fn mask_row(&self, row: usize) -> Option<&[f64]> {
        let s2 = self.mask_size * self.mask_size;
        self.mask_logits.as_ref().map(|m| &m[row * s2..(row + 1) * s2])
    }

    pub fn is_finite(&self) -> bool {
        self.cls_logits.iter().chain(&self.reg_deltas).all(|v| v.is_finite())
            && self.mask_logits.as_ref().is_none_or(|m| m.iter().all(|v| v.is_finite()))
    }

    pub fn zero_grads(&self) -> DenseGrads {
        DenseGrads {
            cls: vec![0.0; self.cls_logits.len()],
            reg: vec![0.0; self.reg_deltas.len()],
            mask: self.mask_logits.as_ref().map(|m| vec![0.0; m.len()]),
        }
    }
}

/// Gradient of a scalar with respect to a [`DenseOutputs`] block.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub cls: Vec<f64>,
    pub reg: Vec<f64>,
    pub mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawOutputs {
    Single(DenseOutputs),
    Two { stage1: DenseOutputs, proposals: Vec<BBox>, stage2: DenseOutputs },
}

impl RawOutputs {
    /// The block whose post-processing yields the final layout.
    pub fn final_block(&self) -> &DenseOutputs {
        match self {
            RawOutputs::Single(d) => d,
            RawOutputs::Two { stage2, .. } => stage2,
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            RawOutputs::Single(d) => d.is_finite(),
            RawOutputs::Two { stage1, stage2, .. } => stage1.is_finite() && stage2.is_finite(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawGrads {
    Single(DenseGrads),
    Two { stage1: DenseGrads, stage2: DenseGrads },
}

/// A kept candidate: the row it came from plus its detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Kept {
    pub row: usize,
    pub detection: Detection,
}

/// Decode, drop scores below the threshold, per-class NMS, cap. Sorted by score.
pub fn postprocess_dense(block: &DenseOutputs, cfg: &PostprocessConfig, width: usize, height: usize) -> Vec<Kept> {
    let mut rows = Vec::new();
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    let mut cats = Vec::new();
    for r in 0..block.rows() {
        let probs = block.fg_probs(r);
        let mut decoded = None;
        for (k, &p) in probs.iter().enumerate() {
            if p >= cfg.score_thresh {
                let b = *decoded.get_or_insert_with(|| block.decoded(r).clip(width as f64, height as f64));
                rows.push(r);
                boxes.push(b);
                scores.push(p);
                cats.push(k);
            }
        }
    }
    let mut kept: Vec<Kept> = nms_indices(&boxes, &scores, &cats, cfg.nms_thresh)
        .into_iter()
        .take(cfg.max_detections)
        .map(|i| Kept { row: rows[i], detection: Detection::new(boxes[i], cats[i], scores[i]) })
        .collect();
    if block.mask_logits.is_some() {
        for k in &mut kept {
            let logits = block.mask_row(k.row).expect("mask logits");
            k.detection.mask = Some(paste_mask(logits, block.mask_size, &k.detection.bbox, width, height));
        }
    }
    kept
}

/// Paste an `S×S` logit grid into `bbox` at image resolution (nearest cell, threshold 0).
pub fn paste_mask(logits: &[f64], s: usize, bbox: &BBox, width: usize, height: usize) -> Mask {
    let mut mask = Mask::empty(width, height);
    let x0 = bbox.x_min.floor().max(0.0) as usize;
    let y0 = bbox.y_min.floor().max(0.0) as usize;
    let x1 = (bbox.x_max.ceil() as usize).min(width);
    let y1 = (bbox.y_max.ceil() as usize).min(height);
    let (bw, bh) = (bbox.width().max(1e-9), bbox.height().max(1e-9));
    for y in y0..y1 {
        for x in x0..x1 {
            let u = ((x as f64 + 0.5 - bbox.x_min) / bw * s as f64).floor();
            let v = ((y as f64 + 0.5 - bbox.y_min) / bh * s as f64).floor();
            if u < 0.0 || v < 0.0 || u >= s as f64 || v >= s as f64 {
                continue;
            }
            if logits[v as usize * s + u as usize] > 0.0 {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Resample a binary image mask onto the `S×S` grid of `roi` (cell centers, nearest pixel).
pub fn crop_mask(mask: &Mask, roi: &BBox, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            let x = roi.x_min + (j as f64 + 0.5) * roi.width() / s as f64;
            let y = roi.y_min + (i as f64 + 0.5) * roi.height() / s as f64;
            if x >= 0.0 && y >= 0.0 && (x as usize) < mask.width && (y as usize) < mask.height && mask.get(x as usize, y as usize) {
                out[i * s + j] = 1.0;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct SingleHeads {
    cls_tower: Conv2d,
    cls_out: Conv2d,
    reg_tower: Conv2d,
    reg_out: Conv2d,
}

#[derive(Debug, Clone)]
struct TwoHeads {
    rpn_conv: Conv2d,
    rpn_obj: Conv2d,
    rpn_reg: Conv2d,
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    reg: Linear,
    mask_conv: Option<Conv2d>,
    mask_out: Option<Conv2d>,
    roi_align: RoiAlign,
}

#[derive(Debug, Clone)]
enum Heads {
    Single(SingleHeads),
    Two(TwoHeads),
}

/// A detector: configuration, flat parameters, and the layer graph built from the config.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamStore,
    pub anchors: AnchorGrid,
    backbone: Vec<Conv2d>,
    heads: Heads,
}

/// Pixel normalization applied before the first convolution: `(I - 0.5) / 0.25`.
const INPUT_SCALE: f64 = 4.0;

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Output of every backbone layer (post-ReLU).
    pub activations: Vec<Feat>,
    caches: Vec<ConvCache>,
    head: HeadTape,
}

#[derive(Debug, Clone)]
struct ConvPair {
    tower: ConvCache,
    out: ConvCache,
}

#[derive(Debug, Clone)]
enum HeadTape {
    Single { cls: Vec<ConvPair>, reg: Vec<ConvPair> },
    Two(Box<TwoTape>),
}

#[derive(Debug, Clone)]
struct TwoTape {
    rpn: Vec<(ConvCache, ConvCache, ConvCache)>,
    rois: Vec<BBox>,
    roi_levels: Vec<usize>,
    roi_caches: Vec<RoiCache>,
    /// Pooled RoI features, `R × (C·S·S)`.
    pub roi_feats: Vec<f64>,
    fc1: LinearCache,
    fc2: LinearCache,
    cls: LinearCache,
    reg: LinearCache,
    mask: Vec<(ConvCache, ConvCache)>,
}

/// Result of [`Detector::backward`].
#[derive(Debug, Clone)]
pub struct Backward {
    /// Gradient with respect to image pixels (same layout as [`Image::data`]).
    pub pixels: Vec<f64>,
    /// Gradient with respect to every backbone layer output.
    pub layer_grads: Vec<Vec<f64>>,
    /// Gradient with respect to the pooled RoI features (two-stage only).
    pub roi_feat_grads: Option<Vec<f64>>,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Self {
        config.validate().expect("valid detector config");
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::default();
        let mut in_c = 3;
        let mut backbone = Vec::new();
        for c in &config.backbone {
            backbone.push(Conv2d::new(&mut store, in_c, c.out, 3, c.stride, true, 0.0, &mut rng));
            in_c = c.out;
        }
        let feat_c = config.backbone[config.level_layers[0]].out;
        let a = config.anchors_per_cell();
        let nc = config.num_classes();
        let hw = config.head_width;
        let heads = match config.arch {
            Arch::SingleStage => {
                let prior = -((1.0 - 0.01f64) / 0.01).ln();
                Heads::Single(SingleHeads {
                    cls_tower: Conv2d::new(&mut store, feat_c, hw, 3, 1, true, 0.0, &mut rng),
                    cls_out: Conv2d::new(&mut store, hw, a * nc, 3, 1, false, prior, &mut rng),
                    reg_tower: Conv2d::new(&mut store, feat_c, hw, 3, 1, true, 0.0, &mut rng),
                    reg_out: Conv2d::new(&mut store, hw, a * 4, 3, 1, false, 0.0, &mut rng),
                })
            }
            Arch::TwoStage => {
                let s = config.roi_size;
                let d = feat_c * s * s;
                let (mask_conv, mask_out) = if config.mask_head {
                    (
                        Some(Conv2d::new(&mut store, feat_c, config.mask_width, 3, 1, true, 0.0, &mut rng)),
                        Some(Conv2d::new(&mut store, config.mask_width, 1, 1, 1, false, 0.0, &mut rng)),
                    )
                } else {
                    (None, None)
                };
                Heads::Two(TwoHeads {
                    rpn_conv: Conv2d::new(&mut store, feat_c, hw, 3, 1, true, 0.0, &mut rng),
                    rpn_obj: Conv2d::new(&mut store, hw, a, 1, 1, false, 0.0, &mut rng),
                    rpn_reg: Conv2d::new(&mut store, hw, a * 4, 1, 1, false, 0.0, &mut rng),
                    fc1: Linear::new(&mut store, d, config.fc_width, true, None, &mut rng),
                    fc2: Linear::new(&mut store, config.fc_width, config.fc_width, true, None, &mut rng),
                    cls: Linear::new(&mut store, config.fc_width, nc + 1, false, Some(0.01), &mut rng),
                    reg: Linear::new(&mut store, config.fc_width, 4, false, Some(0.001), &mut rng),
                    mask_conv,
                    mask_out,
                    roi_align: RoiAlign { out_size: s, samples: config.roi_samples },
                })
            }
        };
        let anchors = AnchorGrid::new(config.image_width, config.image_height, &config.anchor_levels);
        Self { config, params: store, anchors, backbone, heads }
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    pub fn has_mask_head(&self) -> bool {
        matches!(&self.heads, Heads::Two(h) if h.mask_conv.is_some())
    }

    pub fn num_backbone_layers(&self) -> usize {
        self.backbone.len()
    }

    fn check_image(&self, image: &Image) -> Result<(), DetectorError> {
        if image.width != self.config.image_width || image.height != self.config.image_height {
            return Err(DetectorError::Shape {
                got_w: image.width,
                got_h: image.height,
                want_w: self.config.image_width,
                want_h: self.config.image_height,
            });
        }
        Ok(())
    }

    fn run_backbone(&self, image: &Image) -> (Vec<Feat>, Vec<ConvCache>) {
        let p = &self.params.values;
        let mut x = Feat {
            c: 3,
            h: image.height,
            w: image.width,
            data: image.data.iter().map(|v| (v - 0.5) * INPUT_SCALE).collect(),
        };
        let mut acts = Vec::with_capacity(self.backbone.len());
        let mut caches = Vec::with_capacity(self.backbone.len());
        for conv in &self.backbone {
            let (y, cache) = conv.forward(p, &x);
            acts.push(y.clone());
            caches.push(cache);
            x = y;
        }
        (acts, caches)
    }

    fn level_feats<'a>(&self, acts: &'a [Feat]) -> Vec<&'a Feat> {
        self.config.level_layers.iter().map(|&l| &acts[l]).collect()
    }

    /// Scatter a conv output `(A·D)×H×W` into anchor rows `(offset + cell·A + a)×D`.
    fn conv_to_rows(out: &Feat, a: usize, d: usize, offset: usize, rows: &mut [f64]) {
        let hw = out.plane();
        for cell in 0..hw {
            for ai in 0..a {
                for k in 0..d {
                    rows[(offset + cell * a + ai) * d + k] = out.data[(ai * d + k) * hw + cell];
                }
            }
        }
    }

    fn rows_to_conv(rows: &[f64], a: usize, d: usize, offset: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for cell in 0..hw {
            for ai in 0..a {
                for k in 0..d {
                    out[(ai * d + k) * hw + cell] = rows[(offset + cell * a + ai) * d + k];
                }
            }
        }
        out
    }

    /// Differentiable forward pass with the tape needed by [`Detector::backward`].
    pub fn forward_tape(&self, image: &Image) -> Result<(RawOutputs, Tape), DetectorError> {
        self.forward_tape_with_rois(image, None)
    }

    /// As [`Detector::forward_tape`]; for two-stage models `rois`, when given,
    /// replaces the proposals fed to the second stage.
    pub fn forward_tape_with_rois(&self, image: &Image, rois: Option<&[BBox]>) -> Result<(RawOutputs, Tape), DetectorError> {
        match rois {
            Some(r) => self.forward_tape_with(image, |_| r.to_vec()),
            None => self.forward_tape_with(image, |s1| self.propose(s1)),
        }
    }

    /// Two-stage forward where `select` picks the second-stage RoIs from the
    /// stage-1 outputs. Ignored for single-stage models.
    pub fn forward_tape_with<F>(&self, image: &Image, select: F) -> Result<(RawOutputs, Tape), DetectorError>
    where
        F: FnOnce(&DenseOutputs) -> Vec<BBox>,
    {
        self.check_image(image)?;
        let (acts, caches) = self.run_backbone(image);
        let (raw, head) = match &self.heads {
            Heads::Single(h) => {
                let (dense, cls, reg) = self.single_heads(h, &acts);
                (RawOutputs::Single(dense), HeadTape::Single { cls, reg })
            }
            Heads::Two(h) => {
                let (stage1, rpn) = self.rpn(h, &acts);
                let proposals = select(&stage1);
                let (stage2, tape) = self.stage2_with_tape(h, &acts, &proposals, rpn);
                (RawOutputs::Two { stage1, proposals, stage2 }, HeadTape::Two(Box::new(tape)))
            }
        };
        Ok((raw, Tape { activations: acts, caches, head }))
    }

    pub fn forward_raw(&self, image: &Image) -> Result<RawOutputs, DetectorError> {
        Ok(self.forward_tape(image)?.0)
    }

    fn single_heads(&self, h: &SingleHeads, acts: &[Feat]) -> (DenseOutputs, Vec<ConvPair>, Vec<ConvPair>) {
        let p = &self.params.values;
        let nc = self.num_classes();
        let a = self.config.anchors_per_cell();
        let n = self.anchors.len();
        let mut cls_logits = vec![0.0; n * nc];
        let mut reg_deltas = vec![0.0; n * 4];
        let mut cls_t = Vec::new();
        let mut reg_t = Vec::new();
        for (l, feat) in self.level_feats(acts).into_iter().enumerate() {
            let off = self.anchors.level_offsets[l];
            let (t, tc) = h.cls_tower.forward(p, feat);
            let (o, oc) = h.cls_out.forward(p, &t);
            Self::conv_to_rows(&o, a, nc, off, &mut cls_logits);
            cls_t.push(ConvPair { tower: tc, out: oc });
            let (t, tc) = h.reg_tower.forward(p, feat);
            let (o, oc) = h.reg_out.forward(p, &t);
            Self::conv_to_rows(&o, a, 4, off, &mut reg_deltas);
            reg_t.push(ConvPair { tower: tc, out: oc });
        }
        let dense = DenseOutputs {
            kind: ClsKind::Sigmoid,
            num_classes: nc,
            cls_logits,
            reg_deltas,
            refs: self.anchors.boxes.clone(),
            mask_logits: None,
            mask_size: 0,
        };
        (dense, cls_t, reg_t)
    }

    fn rpn(&self, h: &TwoHeads, acts: &[Feat]) -> (DenseOutputs, Vec<(ConvCache, ConvCache, ConvCache)>) {
        let p = &self.params.values;
        let a = self.config.anchors_per_cell();
        let n = self.anchors.len();
        let mut obj = vec![0.0; n];
        let mut reg = vec![0.0; n * 4];
        let mut caches = Vec::new();
        for (l, feat) in self.level_feats(acts).into_iter().enumerate() {
            let off = self.anchors.level_offsets[l];
            let (t, tc) = h.rpn_conv.forward(p, feat);
            let (o, oc) = h.rpn_obj.forward(p, &t);
            Self::conv_to_rows(&o, a, 1, off, &mut obj);
            let (r, rc) = h.rpn_reg.forward(p, &t);
            Self::conv_to_rows(&r, a, 4, off, &mut reg);
            caches.push((tc, oc, rc));
        }
        let dense = DenseOutputs {
            kind: ClsKind::Sigmoid,
            num_classes: 1,
            cls_logits: obj,
            reg_deltas: reg,
            refs: self.anchors.boxes.clone(),
            mask_logits: None,
            mask_size: 0,
        };
        (dense, caches)
    }

    /// Stage-1 raw outputs (class-agnostic objectness and deltas per anchor).
    pub fn stage1(&self, image: &Image) -> Result<DenseOutputs, DetectorError> {
        self.check_image(image)?;
        let Heads::Two(h) = &self.heads else {
            panic!("stage1 called on a single-stage detector");
        };
        let (acts, _) = self.run_backbone(image);
        Ok(self.rpn(h, &acts).0)
    }

    /// Stage-1 post-processing: top-k by objectness, decode, clip, NMS, top-k.
    pub fn propose(&self, stage1: &DenseOutputs) -> Vec<BBox> {
        let cfg = &self.config.proposals;
        let (w, h) = (self.config.image_width as f64, self.config.image_height as f64);
        let mut order: Vec<usize> = (0..stage1.rows()).collect();
        order.sort_by(|&a, &b| stage1.cls_logits[b].total_cmp(&stage1.cls_logits[a]).then(a.cmp(&b)));
        order.truncate(cfg.pre_nms_top_k);
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for &r in &order {
            let b = stage1.decoded(r).clip(w, h);
            if b.width() >= cfg.min_size && b.height() >= cfg.min_size {
                boxes.push(b);
                scores.push(stage1.cls_logits[r]);
            }
        }
        let cats = vec![0; boxes.len()];
        nms_indices(&boxes, &scores, &cats, cfg.nms_thresh)
            .into_iter()
            .take(cfg.post_nms_top_k)
            .map(|i| boxes[i])
            .collect()
    }

    fn roi_level(&self, roi: &BBox) -> usize {
        if self.config.level_layers.len() < 2 || roi.area().sqrt() < self.config.roi_level_split {
            0
        } else {
            1
        }
    }

    fn stage2_with_tape(
        &self,
        h: &TwoHeads,
        acts: &[Feat],
        rois: &[BBox],
        rpn: Vec<(ConvCache, ConvCache, ConvCache)>,
    ) -> (DenseOutputs, TwoTape) {
        let p = &self.params.values;
        let feats = self.level_feats(acts);
        let s = self.config.roi_size;
        let feat_c = feats[0].c;
        let d = feat_c * s * s;
        let r = rois.len();
        let mut roi_feats = vec![0.0; r * d];
        let mut roi_caches = Vec::with_capacity(r);
        let mut roi_levels = Vec::with_capacity(r);
        let mut pooled = Vec::with_capacity(r);
        for (i, roi) in rois.iter().enumerate() {
            let l = self.roi_level(roi);
            let scale = 1.0 / self.config.anchor_levels[l].stride as f64;
            let (f, cache) = h.roi_align.forward(feats[l], [roi.x_min, roi.y_min, roi.x_max, roi.y_max], scale);
            roi_feats[i * d..(i + 1) * d].copy_from_slice(&f.data);
            roi_caches.push(cache);
            roi_levels.push(l);
            pooled.push(f);
        }
        let (h1, fc1) = h.fc1.forward(p, &roi_feats, r);
        let (h2, fc2) = h.fc2.forward(p, &h1, r);
        let (cls_logits, cls) = h.cls.forward(p, &h2, r);
        let (reg_deltas, reg) = h.reg.forward(p, &h2, r);
        let mut mask = Vec::new();
        let mask_logits = match (&h.mask_conv, &h.mask_out) {
            (Some(mc), Some(mo)) => {
                let mut logits = Vec::with_capacity(r * s * s);
                for f in &pooled {
                    let (t, tc) = mc.forward(p, f);
                    let (o, oc) = mo.forward(p, &t);
                    logits.extend_from_slice(&o.data);
                    mask.push((tc, oc));
                }
                Some(logits)
            }
            _ => None,
        };
        let dense = DenseOutputs {
            kind: ClsKind::Softmax,
            num_classes: self.num_classes(),
            cls_logits,
            reg_deltas,
            refs: rois.to_vec(),
            mask_logits,
            mask_size: s,
        };
        let tape = TwoTape { rpn, rois: rois.to_vec(), roi_levels, roi_caches, roi_feats, fc1, fc2, cls, reg, mask };
        (dense, tape)
    }

    /// Stage-2 raw outputs on the given RoIs.
    pub fn stage2(&self, image: &Image, rois: &[BBox]) -> Result<DenseOutputs, DetectorError> {
        match self.forward_tape_with_rois(image, Some(rois))?.0 {
            RawOutputs::Two { stage2, .. } => Ok(stage2),
            RawOutputs::Single(_) => panic!("stage2 called on a single-stage detector"),
        }
    }

    /// Non-differentiable post-processing of the final block into a layout.
    pub fn postprocess(&self, raw: &RawOutputs) -> Layout {
        Layout::new(self.postprocess_kept(raw.final_block()).into_iter().map(|k| k.detection).collect())
    }

    pub fn postprocess_kept(&self, block: &DenseOutputs) -> Vec<Kept> {
        postprocess_dense(block, &self.config.postprocess, self.config.image_width, self.config.image_height)
    }

    pub fn detect(&self, image: &Image) -> Result<Layout, DetectorError> {
        Ok(self.postprocess(&self.forward_raw(image)?))
    }

    /// Backpropagate `grads` through the tape. Parameter gradients are
    /// accumulated into `param_grads` when present.
    pub fn backward(&self, tape: &Tape, grads: &RawGrads, mut param_grads: Option<&mut [f64]>) -> Backward {
        let p = &self.params.values;
        let nl = self.backbone.len();
        let mut layer_grads: Vec<Vec<f64>> = tape.activations.iter().map(|a| vec![0.0; a.data.len()]).collect();
        let a = self.config.anchors_per_cell();
        let mut roi_feat_grads = None;
        match (&self.heads, &tape.head, grads) {
            (Heads::Single(h), HeadTape::Single { cls, reg }, RawGrads::Single(g)) => {
                let nc = self.num_classes();
                for (l, &layer) in self.config.level_layers.iter().enumerate() {
                    let feat = &tape.activations[layer];
                    let off = self.anchors.level_offsets[l];
                    let gc = Self::rows_to_conv(&g.cls, a, nc, off, a * nc, feat.h, feat.w);
                    let gt = h.cls_out.backward(p, &cls[l].out, &gc, param_grads.as_deref_mut(), true).expect("input grad");
                    let gf = h.cls_tower.backward(p, &cls[l].tower, &gt, param_grads.as_deref_mut(), true).expect("input grad");
                    add_into(&mut layer_grads[layer], &gf);
                    let gr = Self::rows_to_conv(&g.reg, a, 4, off, a * 4, feat.h, feat.w);
                    let gt = h.reg_out.backward(p, &reg[l].out, &gr, param_grads.as_deref_mut(), true).expect("input grad");
                    let gf = h.reg_tower.backward(p, &reg[l].tower, &gt, param_grads.as_deref_mut(), true).expect("input grad");
                    add_into(&mut layer_grads[layer], &gf);
                }
            }
            (Heads::Two(h), HeadTape::Two(t), RawGrads::Two { stage1, stage2 }) => {
                for (l, &layer) in self.config.level_layers.iter().enumerate() {
                    let feat = &tape.activations[layer];
                    let off = self.anchors.level_offsets[l];
                    let (tc, oc, rc) = &t.rpn[l];
                    let go = Self::rows_to_conv(&stage1.cls, a, 1, off, a, feat.h, feat.w);
                    let mut gt = h.rpn_obj.backward(p, oc, &go, param_grads.as_deref_mut(), true).expect("input grad");
                    let gr = Self::rows_to_conv(&stage1.reg, a, 4, off, a * 4, feat.h, feat.w);
                    let gt2 = h.rpn_reg.backward(p, rc, &gr, param_grads.as_deref_mut(), true).expect("input grad");
                    add_into(&mut gt, &gt2);
                    let gf = h.rpn_conv.backward(p, tc, &gt, param_grads.as_deref_mut(), true).expect("input grad");
                    add_into(&mut layer_grads[layer], &gf);
                }
                let r = t.rois.len();
                if r > 0 {
                    let mut gh2 = h.cls.backward(p, &t.cls, &stage2.cls, param_grads.as_deref_mut(), true).expect("input grad");
                    let g_reg = h.reg.backward(p, &t.reg, &stage2.reg, param_grads.as_deref_mut(), true).expect("input grad");
                    add_into(&mut gh2, &g_reg);
                    let gh1 = h.fc2.backward(p, &t.fc2, &gh2, param_grads.as_deref_mut(), true).expect("input grad");
                    let mut groi = h.fc1.backward(p, &t.fc1, &gh1, param_grads.as_deref_mut(), true).expect("input grad");
                    let s2 = self.config.roi_size * self.config.roi_size;
                    let d = groi.len() / r;
                    if let (Some(mc), Some(mo), Some(gm)) = (&h.mask_conv, &h.mask_out, &stage2.mask) {
                        for i in 0..r {
                            let (tc, oc) = &t.mask[i];
                            let g1 = mo.backward(p, oc, &gm[i * s2..(i + 1) * s2], param_grads.as_deref_mut(), true).expect("input grad");
                            let g0 = mc.backward(p, tc, &g1, param_grads.as_deref_mut(), true).expect("input grad");
                            add_into(&mut groi[i * d..(i + 1) * d], &g0);
                        }
                    }
                    for i in 0..r {
                        let layer = self.config.level_layers[t.roi_levels[i]];
                        h.roi_align.backward(&t.roi_caches[i], &groi[i * d..(i + 1) * d], &mut layer_grads[layer]);
                    }
                    roi_feat_grads = Some(groi);
                }
            }
            _ => panic!("raw gradients do not match the detector architecture"),
        }
        // backbone, last layer first; level gradients are already in place
        let mut pixels = Vec::new();
        for l in (0..nl).rev() {
            let need_input = true;
            let g = layer_grads[l].clone();
            let gin = self.backbone[l].backward(p, &tape.caches[l], &g, param_grads.as_deref_mut(), need_input).expect("input grad");
            if l > 0 {
                add_into(&mut layer_grads[l - 1], &gin);
            } else {
                pixels = gin.into_iter().map(|v| v * INPUT_SCALE).collect();
            }
        }
        Backward { pixels, layer_grads, roi_feat_grads }
    }

    /// Pooled RoI features recorded on a two-stage tape.
    pub fn roi_features<'a>(&self, tape: &'a Tape) -> Option<&'a [f64]> {
        match &tape.head {
            HeadTape::Two(t) => Some(&t.roi_feats),
            HeadTape::Single { .. } => None,
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.config.backbone[self.config.level_layers[0]].out
    }

    /// Backbone layer feeding the heads at the level of anchor row `row`.
    pub fn level_layer_of_row(&self, row: usize) -> usize {
        let level = self.anchors.provenance[row].level;
        self.config.level_layers[level]
    }

    pub fn save(&self, path: &Path, state: Option<&TrainState>) -> Result<(), DetectorError> {
        let io = |source| DetectorError::Io { path: path.display().to_string(), source };
        let header = CheckpointHeader {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            categories: self.config.categories.clone(),
            params: self.params.len(),
            train_state: state.map(|s| (s.epoch, s.adam.step, s.adam.lr)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(io)?);
            f.write_all(MAGIC).map_err(io)?;
            f.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
            f.write_all(&json).map_err(io)?;
            write_f64s(&mut f, &self.params.values).map_err(io)?;
            if let Some(s) = state {
                write_f64s(&mut f, &s.adam.m).map_err(io)?;
                write_f64s(&mut f, &s.adam.v).map_err(io)?;
            }
            f.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Detector, Option<TrainState>), DetectorError> {
        let io = |source| DetectorError::Io { path: path.display().to_string(), source };
        let bad = |message: String| DetectorError::Checkpoint { path: path.display().to_string(), message };
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a detector checkpoint".into()));
        }
        let mut len = [0u8; 8];
        f.read_exact(&mut len).map_err(io)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        f.read_exact(&mut json).map_err(io)?;
        let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
        if header.config.hash() != header.config_hash {
            return Err(bad("config hash mismatch".into()));
        }
        header.config.validate().map_err(bad)?;
        let mut det = Detector::new(header.config);
        if det.params.len() != header.params {
            return Err(bad(format!("expected {} parameters, header says {}", det.params.len(), header.params)));
        }
        det.params.values = read_f64s(&mut f, header.params).map_err(io)?;
        let state = match header.train_state {
            Some((epoch, step, lr)) => {
                let mut adam = Adam::new(header.params, lr);
                adam.step = step;
                adam.m = read_f64s(&mut f, header.params).map_err(io)?;
                adam.v = read_f64s(&mut f, header.params).map_err(io)?;
                Some(TrainState { epoch, adam })
            }
            None => None,
        };
        Ok((det, state))
    }
}

/// Optimizer state stored alongside a checkpoint so training can resume exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub adam: Adam,
}

const MAGIC: &[u8; 8] = b"DETINVCK";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: DetectorConfig,
    config_hash: String,
    categories: Vec<String>,
    params: usize,
    train_state: Option<(usize, u64, f64)>,
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// 32×32 two-level model small enough for finite-difference tests.
#[cfg(test)]
pub(crate) fn tiny_config(arch: Arch) -> DetectorConfig {
    DetectorConfig {
        arch,
        image_width: 32,
        image_height: 32,
        categories: vec!["a".into(), "b".into()],
        backbone: vec![ConvSpec { out: 4, stride: 2 }, ConvSpec { out: 6, stride: 2 }, ConvSpec { out: 6, stride: 2 }],
        level_layers: vec![1, 2],
        anchor_levels: vec![
            AnchorLevel { stride: 4, sizes: vec![8.0, 12.0] },
            AnchorLevel { stride: 8, sizes: vec![16.0, 24.0] },
        ],
        head_width: 5,
        roi_size: 3,
        fc_width: 8,
        mask_width: 3,
        mask_head: arch == Arch::TwoStage,
        proposals: ProposalConfig { post_nms_top_k: 6, ..ProposalConfig::default() },
        ..DetectorConfig::default()
    }
}
