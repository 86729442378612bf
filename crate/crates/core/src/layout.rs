//! Layouts (detector outputs and inversion targets), bitmap masks and the
//! COCO-shaped annotation file.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

/// Binary mask, row-major, one byte per pixel (0 or 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Tight bounding box in pixel-extent convention: pixel `(x, y)` covers `[x, x+1) × [y, y+1)`.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        if x0 == usize::MAX {
            None
        } else {
            Some(BBox { x_min: x0 as f64, y_min: y0 as f64, x_max: x1 as f64, y_max: y1 as f64 })
        }
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(&other.data) {
            let (a, b) = (*a != 0, *b != 0);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Uncompressed COCO RLE: column-major run lengths starting with a zero run.
    /// Shift by whole pixels; pixels leaving the frame are dropped.
    pub fn shifted(&self, dx: i64, dy: i64) -> Mask {
        let mut out = Mask::empty(self.width, self.height);
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                let (sx, sy) = (x - dx, y - dy);
                if sx >= 0 && sy >= 0 && sx < self.width as i64 && sy < self.height as i64 && self.get(sx as usize, sy as usize) {
                    out.set(x as usize, y as usize, true);
                }
            }
        }
        out
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u32;
        for x in 0..self.width {
            for y in 0..self.height {
                let v = self.data[y * self.width + x].min(1);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle { size: [self.height, self.width], counts }
    }

    pub fn from_rle(rle: &Rle) -> Result<Self, String> {
        let [height, width] = rle.size;
        let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
        if total != (width * height) as u64 {
            return Err(format!("RLE counts sum to {total}, expected {}", width * height));
        }
        let mut mask = Mask::empty(width, height);
        let mut pos = 0usize;
        let mut value = 0u8;
        for &c in &rle.counts {
            for _ in 0..c {
                let (x, y) = (pos / height, pos % height);
                mask.data[y * width + x] = value;
                pos += 1;
            }
            value ^= 1;
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

/// One object: category index into the detector's category set, box, score, optional mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
    #[serde(skip)]
    pub mask: Option<Mask>,
}

impl Detection {
    pub fn new(bbox: BBox, category: usize, score: f64) -> Self {
        Self { bbox, category, score, mask: None }
    }
}

/// Ordered collection of instances.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    pub instances: Vec<Detection>,
}

impl Layout {
    pub fn new(instances: Vec<Detection>) -> Self {
        Self { instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.instances.iter().map(|d| d.bbox).collect()
    }

    /// True when both layouts hold the same multiset of categories and every box of
    /// `self` pairs one-to-one with a same-category box of `other` within `tol`.
    /// Scores and masks are ignored.
    pub fn matches(&self, other: &Layout, tol: f64) -> bool {
        if self.len() != other.len() {
            return false;
        }
        let mut used = vec![false; other.len()];
        for d in &self.instances {
            let hit = other.instances.iter().enumerate().find(|(j, o)| {
                !used[*j] && o.category == d.category && o.bbox.max_abs_diff(&d.bbox) <= tol
            });
            match hit {
                Some((j, _)) => used[j] = true,
                None => return false,
            }
        }
        true
    }

    /// Target layout shifted by `(dx, dy)` and clipped to the image; masks move by the rounded shift.
    pub fn translate(&self, dx: f64, dy: f64, width: f64, height: f64) -> Layout {
        Layout {
            instances: self
                .instances
                .iter()
                .map(|d| Detection {
                    bbox: d.bbox.translate(dx, dy).clip(width, height),
                    mask: d.mask.as_ref().map(|m| m.shifted(dx.round() as i64, dy.round() as i64)),
                    ..d.clone()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: u64,
    pub file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationEntry {
    #[serde(default)]
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// COCO `[x, y, width, height]`.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Rle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default)]
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryEntry {
    pub id: u64,
    pub name: String,
}

/// COCO-shaped annotation (or prediction) file. Category ids are `index + 1`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
    pub categories: Vec<CategoryEntry>,
}

/// A single schema violation, addressed by a JSON-path-like field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for SchemaError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl AnnotationFile {
    pub fn category_names(&self) -> Vec<String> {
        let mut cats = self.categories.clone();
        cats.sort_by_key(|c| c.id);
        cats.into_iter().map(|c| c.name).collect()
    }

    /// Per-image layouts in the order of `images`.
    pub fn layouts(&self) -> Result<Vec<(ImageEntry, Layout)>, String> {
        let mut by_image: HashMap<u64, Vec<Detection>> = HashMap::new();
        for (k, a) in self.annotations.iter().enumerate() {
            let bbox = BBox::from_xywh(a.bbox).map_err(|e| format!("annotations[{k}].bbox: {e}"))?;
            if a.category_id == 0 {
                return Err(format!("annotations[{k}].category_id: ids start at 1"));
            }
            let mask = match &a.mask {
                Some(r) => Some(Mask::from_rle(r).map_err(|e| format!("annotations[{k}].mask: {e}"))?),
                None => None,
            };
            by_image.entry(a.image_id).or_default().push(Detection {
                bbox,
                category: (a.category_id - 1) as usize,
                score: a.score.unwrap_or(1.0),
                mask,
            });
        }
        Ok(self
            .images
            .iter()
            .map(|im| (im.clone(), Layout::new(by_image.remove(&im.id).unwrap_or_default())))
            .collect())
    }

    pub fn push_layout(&mut self, image: ImageEntry, layout: &Layout, with_scores: bool) {
        let image_id = image.id;
        self.images.push(image);
        for d in &layout.instances {
            let id = self.annotations.len() as u64 + 1;
            self.annotations.push(AnnotationEntry {
                id,
                image_id,
                category_id: d.category as u64 + 1,
                bbox: d.bbox.to_xywh(),
                area: Some(d.mask.as_ref().map(|m| m.area() as f64).unwrap_or(d.bbox.area())),
                mask: d.mask.as_ref().map(Mask::to_rle),
                iscrowd: 0,
                score: with_scores.then_some(d.score),
            });
        }
    }

    /// Exhaustive semantic validation; structural (serde) errors are caught at parse time.
    pub fn validate(&self) -> Vec<SchemaError> {
        let mut errors = Vec::new();
        let mut err = |path: String, message: String| errors.push(SchemaError { path, message });
        if self.categories.is_empty() {
            err("categories".into(), "at least one category is required".into());
        }
        let mut cat_ids = HashSet::new();
        let mut cat_names = HashSet::new();
        for (k, c) in self.categories.iter().enumerate() {
            if c.id == 0 {
                err(format!("categories[{k}].id"), "category ids start at 1".into());
            }
            if !cat_ids.insert(c.id) {
                err(format!("categories[{k}].id"), format!("duplicate category id {}", c.id));
            }
            if !cat_names.insert(c.name.clone()) {
                err(format!("categories[{k}].name"), format!("duplicate category name {:?}", c.name));
            }
        }
        let mut images = HashMap::new();
        for (k, im) in self.images.iter().enumerate() {
            if images.insert(im.id, (im.width, im.height)).is_some() {
                err(format!("images[{k}].id"), format!("duplicate image id {}", im.id));
            }
            if im.width == 0 || im.height == 0 {
                err(format!("images[{k}]"), "image dimensions must be positive".into());
            }
        }
        let mut ann_ids = HashSet::new();
        for (k, a) in self.annotations.iter().enumerate() {
            if a.id != 0 && !ann_ids.insert(a.id) {
                err(format!("annotations[{k}].id"), format!("duplicate annotation id {}", a.id));
            }
            if !cat_ids.contains(&a.category_id) {
                err(format!("annotations[{k}].category_id"), format!("unknown category id {}", a.category_id));
            }
            if a.iscrowd != 0 {
                err(format!("annotations[{k}].iscrowd"), "crowd annotations are not supported".into());
            }
            if let Some(s) = a.score {
                if !(0.0..=1.0).contains(&s) {
                    err(format!("annotations[{k}].score"), format!("score {s} outside [0, 1]"));
                }
            }
            let [x, y, w, h] = a.bbox;
            if !a.bbox.iter().all(|v| v.is_finite()) || w <= 0.0 || h <= 0.0 {
                err(format!("annotations[{k}].bbox"), format!("invalid box {:?}", a.bbox));
                continue;
            }
            match images.get(&a.image_id) {
                None => err(format!("annotations[{k}].image_id"), format!("unknown image id {}", a.image_id)),
                Some(&(iw, ih)) => {
                    if x < 0.0 || y < 0.0 || x + w > iw as f64 + 1e-9 || y + h > ih as f64 + 1e-9 {
                        err(
                            format!("annotations[{k}].bbox"),
                            format!("box {:?} outside the {iw}x{ih} image", a.bbox),
                        );
                    }
                    if let Some(rle) = &a.mask {
                        if rle.size != [ih, iw] {
                            err(format!("annotations[{k}].mask.size"), format!("mask size {:?} != [{ih}, {iw}]", rle.size));
                        } else if let Err(e) = Mask::from_rle(rle) {
                            err(format!("annotations[{k}].mask.counts"), e);
                        }
                    }
                }
            }
        }
        errors
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_file() -> AnnotationFile {
        let mut mask = Mask::empty(8, 6);
        for y in 1..4 {
            for x in 2..5 {
                mask.set(x, y, true);
            }
        }
        let bbox = mask.tight_bbox().unwrap();
        assert_eq!(bbox, BBox { x_min: 2.0, y_min: 1.0, x_max: 5.0, y_max: 4.0 });
        let mut f = AnnotationFile {
            categories: vec![CategoryEntry { id: 1, name: "star".into() }, CategoryEntry { id: 2, name: "moon".into() }],
            ..Default::default()
        };
        let layout = Layout::new(vec![Detection { bbox, category: 1, score: 1.0, mask: Some(mask) }]);
        f.push_layout(ImageEntry { id: 7, file: "a.png".into(), width: 8, height: 6 }, &layout, false);
        f
    }

    #[test]
    fn rle_roundtrip_and_layouts() {
        let f = sample_file();
        assert!(f.validate().is_empty());
        let json = serde_json::to_string(&f).unwrap();
        let back: AnnotationFile = serde_json::from_str(&json).unwrap();
        let layouts = back.layouts().unwrap();
        assert_eq!(layouts.len(), 1);
        let d = &layouts[0].1.instances[0];
        assert_eq!(d.category, 1);
        assert_eq!(d.mask.as_ref().unwrap().tight_bbox().unwrap(), d.bbox);
    }

    #[test]
    fn validation_flags_bad_fields() {
        let mut f = sample_file();
        f.annotations[0].bbox = [6.0, 1.0, 4.0, 2.0];
        f.annotations[0].category_id = 9;
        let errs = f.validate();
        let paths: Vec<&str> = errs.iter().map(|e| e.path.as_str()).collect();
        assert!(paths.contains(&"annotations[0].bbox"));
        assert!(paths.contains(&"annotations[0].category_id"));
    }

    #[test]
    fn layout_matching_ignores_order() {
        let a = Detection::new(BBox::new(0., 0., 4., 4.).unwrap(), 0, 0.9);
        let b = Detection::new(BBox::new(5., 5., 9., 9.).unwrap(), 1, 0.7);
        let l1 = Layout::new(vec![a.clone(), b.clone()]);
        let l2 = Layout::new(vec![b.clone(), a.clone()]);
        assert!(l1.matches(&l2, 1e-9));
        let mut moved = b;
        moved.bbox = moved.bbox.translate(1e-3, 0.0);
        assert!(!l1.matches(&Layout::new(vec![a, moved]), 1e-4));
    }
}
