//! Static plots drawn straight into images: saliency overlays, matrix heatmaps, bar charts.

use detinv::attribution::SaliencyMap;
use detinv::geometry::BBox;
use detinv::image::Image;

fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [(1.5 * v).min(1.0), (2.0 * v - 0.6).clamp(0.0, 1.0), (1.0 - 3.0 * v).max(0.0) * 0.6]
}

fn fill(img: &mut Image, x0: usize, y0: usize, x1: usize, y1: usize, rgb: [f64; 3]) {
    for y in y0..y1.min(img.height) {
        for x in x0..x1.min(img.width) {
            for (c, v) in rgb.iter().enumerate() {
                img.set(c, x, y, *v);
            }
        }
    }
}

pub fn draw_box(img: &mut Image, b: &BBox, rgb: [f64; 3]) {
    let (w, h) = (img.width as f64, img.height as f64);
    let x0 = b.x_min.clamp(0.0, w - 1.0) as usize;
    let x1 = (b.x_max - 1.0).clamp(0.0, w - 1.0) as usize;
    let y0 = b.y_min.clamp(0.0, h - 1.0) as usize;
    let y1 = (b.y_max - 1.0).clamp(0.0, h - 1.0) as usize;
    fill(img, x0, y0, x1 + 1, y0 + 1, rgb);
    fill(img, x0, y1, x1 + 1, y1 + 1, rgb);
    fill(img, x0, y0, x0 + 1, y1 + 1, rgb);
    fill(img, x1, y0, x1 + 1, y1 + 1, rgb);
}

/// Saliency blended over a dimmed copy of the image.
pub fn overlay(image: &Image, map: &SaliencyMap) -> Image {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let v = map.get(x, y);
            let h = heat(v);
            for (c, hv) in h.iter().enumerate() {
                let base = 0.4 * image.get(c, x, y);
                out.set(c, x, y, (1.0 - v) * base + v * hv);
            }
        }
    }
    out
}

/// Grayscale rendering of a map.
pub fn map_image(map: &SaliencyMap) -> Image {
    let plane: Vec<f64> = map.data.clone();
    let mut data = plane.clone();
    data.extend_from_slice(&plane);
    data.extend_from_slice(&plane);
    Image::from_data(map.width, map.height, data)
}

/// Square cells shaded by value / `max`.
pub fn heatmap(values: &[Vec<f64>], max: f64, cell: usize) -> Image {
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    let mut img = Image::filled((cols * cell).max(1), (rows * cell).max(1), 1.0);
    for (i, row) in values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let t = if max > 0.0 { v / max } else { 0.0 };
            fill(&mut img, j * cell + 1, i * cell + 1, (j + 1) * cell - 1, (i + 1) * cell - 1, heat(t));
        }
    }
    img
}

/// Vertical bars of values in [0, 1]; `highlight` gets a distinct color.
pub fn bar_chart(values: &[f64], highlight: Option<usize>, bar: usize, height: usize) -> Image {
    let mut img = Image::filled((values.len() * bar).max(1), height, 1.0);
    for (i, v) in values.iter().enumerate() {
        let top = height - (v.clamp(0.0, 1.0) * height as f64).round() as usize;
        let rgb = if Some(i) == highlight { [0.85, 0.3, 0.1] } else { [0.25, 0.4, 0.75] };
        fill(&mut img, i * bar + 2, top, (i + 1) * bar - 2, height, rgb);
    }
    img
}
