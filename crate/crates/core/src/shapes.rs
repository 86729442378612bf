//! Deterministic synthetic scenes: flat-colored geometric shapes on smooth
//! noise backgrounds, with planted co-occurrence motifs and placement biases.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{iou, BBox};
use crate::image::{Image, ImageError};
use crate::layout::{AnnotationFile, CategoryEntry, Detection, ImageEntry, Layout, Mask};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("dataset at {path} was generated from spec {found}, expected {expected}")]
    SpecMismatch { path: String, expected: String, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
    Crescent,
    Diamond,
    Cross,
    Ring,
    Hexagon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub name: String,
    pub shape: ShapeKind,
    pub color: [f64; 3],
}

/// When a scene holds `source`, `target` is present with `probability`
/// (otherwise it is removed) and placed next to a `source` instance:
/// above it with `above_prob`, left of its center with `left_prob`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Motif {
    pub source: String,
    pub target: String,
    pub probability: f64,
    #[serde(default = "half")]
    pub above_prob: f64,
    #[serde(default = "half")]
    pub left_prob: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub categories: Vec<CategorySpec>,
    pub image_width: usize,
    pub image_height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Nominal object side range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    pub motifs: Vec<Motif>,
    pub max_pair_iou: f64,
    /// Amplitude of the smooth background noise around its base gray.
    pub background_amplitude: f64,
    /// Coarse grid cells of the background noise per side.
    pub background_cells: usize,
    /// Per-pixel fill noise on objects.
    pub texture_amplitude: f64,
    pub color_jitter: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let cat = |name: &str, shape, color| CategorySpec { name: name.into(), shape, color };
        Self {
            categories: vec![
                cat("circle", ShapeKind::Circle, [0.85, 0.15, 0.15]),
                cat("square", ShapeKind::Square, [0.15, 0.7, 0.2]),
                cat("triangle", ShapeKind::Triangle, [0.2, 0.3, 0.9]),
                cat("star", ShapeKind::Star, [0.95, 0.85, 0.1]),
                cat("moon", ShapeKind::Crescent, [0.92, 0.92, 0.95]),
                cat("diamond", ShapeKind::Diamond, [0.8, 0.2, 0.8]),
                cat("cross", ShapeKind::Cross, [0.1, 0.8, 0.85]),
                cat("ring", ShapeKind::Ring, [0.95, 0.5, 0.1]),
            ],
            image_width: 128,
            image_height: 128,
            min_objects: 1,
            max_objects: 5,
            min_size: 14.0,
            max_size: 72.0,
            motifs: vec![
                Motif { source: "star".into(), target: "moon".into(), probability: 0.9, above_prob: 0.8, left_prob: 0.5 },
                Motif { source: "moon".into(), target: "star".into(), probability: 0.2, above_prob: 0.2, left_prob: 0.5 },
            ],
            max_pair_iou: 0.3,
            background_amplitude: 0.15,
            background_cells: 4,
            texture_amplitude: 0.04,
            color_jitter: 0.05,
            train_size: 1600,
            val_size: 200,
            seed: 20_210_311,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.categories.is_empty() {
            return bad("categories must not be empty".into());
        }
        let names: BTreeSet<&str> = self.categories.iter().map(|c| c.name.as_str()).collect();
        if names.len() != self.categories.len() {
            return bad("category names must be unique".into());
        }
        if self.image_width < 16 || self.image_height < 16 {
            return bad("image must be at least 16x16".into());
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects > max_objects".into());
        }
        if !(self.min_size > 2.0 && self.min_size <= self.max_size) {
            return bad("object size range must satisfy 2 < min_size <= max_size".into());
        }
        if self.max_size > self.image_width.min(self.image_height) as f64 {
            return bad("max_size exceeds the image".into());
        }
        if self.train_size == 0 || self.val_size == 0 {
            return bad("split sizes must be positive".into());
        }
        for (k, m) in self.motifs.iter().enumerate() {
            for p in [m.probability, m.above_prob, m.left_prob] {
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("motifs[{k}]: probabilities must lie in [0, 1]"));
                }
            }
            if !names.contains(m.source.as_str()) || !names.contains(m.target.as_str()) || m.source == m.target {
                return bad(format!("motifs[{k}]: unknown or identical categories"));
            }
        }
        Ok(())
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("spec serializes")))
    }

    /// Scene seed of item `index` of a split, derived from the master seed.
    pub fn scene_seed(&self, split: Split, index: usize) -> u64 {
        let tag = match split {
            Split::Train => 0x7261_696e,
            Split::Val => 0x7661_6c00,
        };
        splitmix(self.seed ^ splitmix(tag ^ splitmix(index as u64)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

pub fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Outcome of one motif coin in a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MotifEvent {
    pub motif: usize,
    pub fired: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub image: Image,
    pub layout: Layout,
    pub seed: u64,
    pub motif_events: Vec<MotifEvent>,
}

struct Slot {
    category: usize,
    /// Index of the slot this one is planted next to, and the motif doing it.
    partner_of: Option<(usize, usize)>,
}

/// Whether normalized point `(u, v)` in `[-1, 1]²` lies inside the shape.
fn inside(shape: ShapeKind, u: f64, v: f64, rot: f64) -> bool {
    let (s, c) = rot.sin_cos();
    let (ru, rv) = (c * u + s * v, -s * u + c * v);
    match shape {
        ShapeKind::Circle => u * u + v * v <= 1.0,
        ShapeKind::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
        ShapeKind::Triangle => v >= -0.9 && v <= 0.9 && u.abs() <= 0.95 * (v + 0.9) / 1.8,
        ShapeKind::Star => {
            let poly: Vec<(f64, f64)> = (0..10)
                .map(|k| {
                    let r = if k % 2 == 0 { 1.0 } else { 0.45 };
                    let a = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
                    (r * a.cos(), r * a.sin())
                })
                .collect();
            point_in_polygon(ru, rv, &poly)
        }
        ShapeKind::Crescent => {
            let (du, dv) = (u - 0.45, v + 0.15);
            u * u + v * v <= 1.0 && du * du + dv * dv > 0.72
        }
        ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
        ShapeKind::Cross => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        ShapeKind::Ring => {
            let r2 = u * u + v * v;
            (0.3..=1.0).contains(&r2)
        }
        ShapeKind::Hexagon => {
            let (a, b) = (u.abs(), v.abs());
            b <= 0.866 && 0.866 * a + 0.5 * b <= 0.866
        }
    }
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

struct Placed {
    category: usize,
    mask: Mask,
    bbox: BBox,
    color: [f64; 3],
}

fn rasterize(spec: &DatasetSpec, category: usize, cx: f64, cy: f64, w: f64, h: f64, rot: f64) -> Option<(Mask, BBox)> {
    let (iw, ih) = (spec.image_width, spec.image_height);
    let mut mask = Mask::empty(iw, ih);
    let shape = spec.categories[category].shape;
    let x0 = ((cx - w / 2.0).floor().max(0.0)) as usize;
    let x1 = ((cx + w / 2.0).ceil().min(iw as f64)) as usize;
    let y0 = ((cy - h / 2.0).floor().max(0.0)) as usize;
    let y1 = ((cy + h / 2.0).ceil().min(ih as f64)) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - cx) / (w / 2.0);
            let v = (y as f64 + 0.5 - cy) / (h / 2.0);
            if inside(shape, u, v, rot) {
                mask.set(x, y, true);
            }
        }
    }
    let bbox = mask.tight_bbox()?;
    (bbox.width() >= 3.0 && bbox.height() >= 3.0).then_some((mask, bbox))
}

#[allow(clippy::too_many_arguments)]
fn fits(spec: &DatasetSpec, placed: &[Placed], mask: &Mask, bbox: &BBox, cx: f64, cy: f64, w: f64, h: f64) -> bool {
    let refs: Vec<&Placed> = placed.iter().collect();
    fits_refs(spec, &refs, mask, bbox, cx, cy, w, h)
}

#[allow(clippy::too_many_arguments)]
fn fits_refs(spec: &DatasetSpec, placed: &[&Placed], mask: &Mask, bbox: &BBox, cx: f64, cy: f64, w: f64, h: f64) -> bool {
    // the nominal footprint must be fully inside, so masks are never cut by the border
    if cx - w / 2.0 < 0.0 || cy - h / 2.0 < 0.0 || cx + w / 2.0 > spec.image_width as f64 || cy + h / 2.0 > spec.image_height as f64 {
        return false;
    }
    placed.iter().all(|p| {
        iou(&p.bbox, bbox) <= spec.max_pair_iou
            && p.bbox.intersection_area(bbox) < bbox.area().min(p.bbox.area()) * 0.5
            && !p.mask.data.iter().zip(&mask.data).any(|(a, b)| *a != 0 && *b != 0)
    })
}

fn object_color<R: Rng>(spec: &DatasetSpec, category: usize, rng: &mut R) -> [f64; 3] {
    let base = spec.categories[category].color;
    let j = spec.color_jitter;
    [0, 1, 2].map(|c| (base[c] + rng.random_range(-j..=j)).clamp(0.0, 1.0))
}

fn background<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> Image {
    let (w, h) = (spec.image_width, spec.image_height);
    let cells = spec.background_cells.max(1);
    let base: f64 = rng.random_range(0.25..0.55);
    let tint: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-0.05..0.05));
    let a = spec.background_amplitude;
    let mut img = Image::filled(w, h, 0.0);
    for c in 0..3 {
        let grid: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random_range(-a..=a)).collect();
        for y in 0..h {
            let gy = y as f64 / h as f64 * cells as f64;
            let (iy, fy) = (gy.floor() as usize, gy.fract());
            for x in 0..w {
                let gx = x as f64 / w as f64 * cells as f64;
                let (ix, fx) = (gx.floor() as usize, gx.fract());
                let g = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
                let v = g(iy, ix) * (1.0 - fx) * (1.0 - fy)
                    + g(iy, ix + 1) * fx * (1.0 - fy)
                    + g(iy + 1, ix) * (1.0 - fx) * fy
                    + g(iy + 1, ix + 1) * fx * fy;
                img.set(c, x, y, (base + tint[c] + v).clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn choose_categories<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> (Vec<Slot>, Vec<MotifEvent>) {
    let nc = spec.categories.len();
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut slots: Vec<Slot> = (0..n).map(|_| Slot { category: rng.random_range(0..nc), partner_of: None }).collect();
    let mut fixed: BTreeSet<usize> = BTreeSet::new();
    let mut events = Vec::new();
    for (mi, motif) in spec.motifs.iter().enumerate() {
        let a = spec.category_index(&motif.source).expect("validated");
        let b = spec.category_index(&motif.target).expect("validated");
        if fixed.contains(&a) || fixed.contains(&b) {
            continue;
        }
        let sources: Vec<usize> = (0..slots.len()).filter(|&i| slots[i].category == a && slots[i].partner_of.is_none()).collect();
        if sources.is_empty() {
            continue;
        }
        let fired = rng.random_bool(motif.probability);
        if fired {
            let parent = *sources.choose(rng).expect("nonempty");
            let existing: Vec<usize> = (0..slots.len()).filter(|&i| slots[i].category == b && slots[i].partner_of.is_none()).collect();
            if let Some(&i) = existing.first() {
                slots[i].partner_of = Some((parent, mi));
            } else if slots.len() < spec.max_objects {
                slots.push(Slot { category: b, partner_of: Some((parent, mi)) });
            } else {
                let free: Vec<usize> = (0..slots.len())
                    .filter(|&i| i != parent && !fixed.contains(&slots[i].category) && slots[i].category != a && slots[i].partner_of.is_none())
                    .filter(|&i| !slots.iter().any(|s| s.partner_of.map(|p| p.0) == Some(i)))
                    .collect();
                match free.choose(rng) {
                    Some(&i) => slots[i] = Slot { category: b, partner_of: Some((parent, mi)) },
                    None => continue,
                }
            }
        } else {
            let allowed: Vec<usize> = (0..nc).filter(|c| *c != a && *c != b && !fixed.contains(c)).collect();
            for s in slots.iter_mut().filter(|s| s.category == b) {
                if let Some(&c) = allowed.choose(rng) {
                    s.category = c;
                }
            }
            slots.retain(|s| s.category != b);
        }
        fixed.insert(a);
        fixed.insert(b);
        events.push(MotifEvent { motif: mi, fired });
    }
    (slots, events)
}

/// One scene, fully determined by `(spec, seed)`.
pub fn generate_scene(spec: &DatasetSpec, seed: u64) -> SceneRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = background(spec, &mut rng);
    let (slots, motif_events) = choose_categories(spec, &mut rng);

    let sample_geom = |rng: &mut ChaCha8Rng, max_size: f64| {
        let s = rng.random_range(spec.min_size..=max_size.max(spec.min_size));
        let aspect: f64 = rng.random_range(0.8..1.25);
        let rot = rng.random_range(-0.4..0.4);
        (s * aspect.sqrt(), s / aspect.sqrt(), rot)
    };

    let mut placed: Vec<Placed> = Vec::new();
    let pair_max = spec.max_size.min(0.4 * spec.image_height.min(spec.image_width) as f64);
    let (iw, ih) = (spec.image_width as f64, spec.image_height as f64);

    // planted groups (parent plus children) first, so their constrained placement sees an emptier canvas
    let children_of = |i: usize| -> Vec<usize> {
        (0..slots.len()).filter(|&j| slots[j].partner_of.map(|p| p.0) == Some(i)).collect()
    };
    let mut groups: Vec<(usize, Vec<usize>)> = (0..slots.len())
        .filter(|&i| slots[i].partner_of.is_none())
        .map(|i| (i, children_of(i)))
        .collect();
    groups.sort_by_key(|(i, ch)| (ch.is_empty(), *i));

    for (parent, children) in groups {
        let max_size = if children.is_empty() { spec.max_size } else { pair_max };
        'attempt: for _ in 0..200 {
            let (w, h, rot) = sample_geom(&mut rng, max_size);
            let (cx, cy) = (rng.random_range(w / 2.0..=iw - w / 2.0), rng.random_range(h / 2.0..=ih - h / 2.0));
            let Some((mask, bbox)) = rasterize(spec, slots[parent].category, cx, cy, w, h, rot) else { continue };
            if !fits(spec, &placed, &mask, &bbox, cx, cy, w, h) {
                continue;
            }
            let mut group = vec![Placed { category: slots[parent].category, mask, bbox, color: [0.0; 3] }];
            for &child in &children {
                let (_, mi) = slots[child].partner_of.expect("child");
                let motif = &spec.motifs[mi];
                let mut ok = false;
                let above = rng.random_bool(motif.above_prob);
                let left = rng.random_bool(motif.left_prob);
                for _ in 0..30 {
                    let (w, h, rot) = sample_geom(&mut rng, pair_max);
                    let (pcx, pcy) = bbox.center();
                    let gap = rng.random_range(1.0..6.0);
                    let dy = bbox.height() / 2.0 + h / 2.0 + gap;
                    let dx = rng.random_range(0.5..(0.5 * bbox.width()).max(1.0));
                    let ccx = if left { pcx - dx } else { pcx + dx };
                    let ccy = if above { pcy - dy } else { pcy + dy };
                    let Some((cmask, cbox)) = rasterize(spec, slots[child].category, ccx, ccy, w, h, rot) else { continue };
                    let others: Vec<&Placed> = placed.iter().chain(group.iter()).collect();
                    if fits_refs(spec, &others, &cmask, &cbox, ccx, ccy, w, h) {
                        group.push(Placed { category: slots[child].category, mask: cmask, bbox: cbox, color: [0.0; 3] });
                        ok = true;
                        break;
                    }
                }
                if !ok {
                    continue 'attempt;
                }
            }
            for mut p in group {
                p.color = object_color(spec, p.category, &mut rng);
                placed.push(p);
            }
            break;
        }
    }

    for p in &placed {
        for y in 0..spec.image_height {
            for x in 0..spec.image_width {
                if p.mask.get(x, y) {
                    for c in 0..3 {
                        let t = spec.texture_amplitude;
                        let v = p.color[c] + if t > 0.0 { rng.random_range(-t..=t) } else { 0.0 };
                        image.set(c, x, y, v.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }

    let layout = Layout::new(
        placed
            .into_iter()
            .map(|p| Detection { bbox: p.bbox, category: p.category, score: 1.0, mask: Some(p.mask) })
            .collect(),
    );
    SceneRecord { image, layout, seed, motif_events }
}

pub fn generate_split(spec: &DatasetSpec, split: Split) -> Vec<SceneRecord> {
    let n = match split {
        Split::Train => spec.train_size,
        Split::Val => spec.val_size,
    };
    (0..n).map(|i| generate_scene(spec, spec.scene_seed(split, i))).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec_hash: String,
    pub spec: DatasetSpec,
    pub splits: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

pub fn annotation_file(spec: &DatasetSpec, split: Split, scenes: &[SceneRecord]) -> AnnotationFile {
    let mut file = AnnotationFile {
        categories: spec
            .categories
            .iter()
            .enumerate()
            .map(|(i, c)| CategoryEntry { id: i as u64 + 1, name: c.name.clone() })
            .collect(),
        ..Default::default()
    };
    for (i, s) in scenes.iter().enumerate() {
        let entry = ImageEntry {
            id: i as u64 + 1,
            file: format!("{}/{:05}.png", split.name(), i),
            width: spec.image_width,
            height: spec.image_height,
        };
        file.push_layout(entry, &s.layout, false);
    }
    file
}

/// Write `<dir>/{train,val}/NNNNN.png`, `<dir>/{train,val}.json` and `<dir>/manifest.json`.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    spec.validate()?;
    let mut written = Vec::new();
    for split in [Split::Train, Split::Val] {
        let split_dir = dir.join(split.name());
        std::fs::create_dir_all(&split_dir).map_err(io_err(&split_dir))?;
        let scenes = generate_split(spec, split);
        for (i, s) in scenes.iter().enumerate() {
            let path = split_dir.join(format!("{i:05}.png"));
            s.image.save_png(&path)?;
        }
        let file = annotation_file(spec, split, &scenes);
        let path = dir.join(format!("{}.json", split.name()));
        let json = serde_json::to_vec(&file).expect("annotations serialize");
        std::fs::write(&path, json).map_err(io_err(&path))?;
        written.push(path);
    }
    let manifest = DatasetManifest {
        spec_hash: spec.hash(),
        spec: spec.clone(),
        splits: vec!["train".into(), "val".into()],
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest).expect("manifest serializes")).map_err(io_err(&path))?;
    written.push(path);
    Ok(written)
}

/// Load a split written by [`generate_dataset`], checking it was produced from `spec`.
pub fn load_split(spec: &DatasetSpec, dir: &Path, split: Split) -> Result<Vec<(Image, Layout)>, DataError> {
    let manifest_path = dir.join("manifest.json");
    let raw = std::fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: DatasetManifest = serde_json::from_slice(&raw)
        .map_err(|e| DataError::Format { path: manifest_path.display().to_string(), message: e.to_string() })?;
    let expected = spec.hash();
    if manifest.spec_hash != expected {
        return Err(DataError::SpecMismatch { path: dir.display().to_string(), expected, found: manifest.spec_hash });
    }
    let ann_path = dir.join(format!("{}.json", split.name()));
    let raw = std::fs::read(&ann_path).map_err(io_err(&ann_path))?;
    let file: AnnotationFile = serde_json::from_slice(&raw)
        .map_err(|e| DataError::Format { path: ann_path.display().to_string(), message: e.to_string() })?;
    let layouts = file.layouts().map_err(|message| DataError::Format { path: ann_path.display().to_string(), message })?;
    layouts
        .into_iter()
        .map(|(entry, layout)| {
            let img = Image::load_png_sized(&dir.join(&entry.file), entry.width, entry.height)?;
            Ok((img, layout))
        })
        .collect()
}
