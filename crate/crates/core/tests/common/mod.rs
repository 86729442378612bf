//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use detinv::geometry::{iou, BBox};
use detinv::layout::{Detection, Layout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Repeatedly take the best remaining detection and drop what it covers.
pub fn greedy_oracle(boxes: &[BBox], scores: &[f64], cats: &[usize], thresh: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        out.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && cats[i] == cats[b] && iou(&boxes[i], &boxes[b]) > thresh {
                alive[i] = false;
            }
        }
    }
    out
}

/// Direct transcription of the reference COCO evaluator (per-image matching,
/// stable score sort, cumulative sums, searchsorted). Returns `(AP, AP@0.5)`.
pub fn reference_ap(preds: &[Layout], gts: &[Layout], num_classes: usize) -> (f64, f64) {
    let thrs: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let rec_thrs: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    // precision[t][c], -1 where the category has no ground truth
    let mut precision = vec![vec![-1.0; num_classes]; thrs.len()];
    for c in 0..num_classes {
        let mut scores = Vec::new();
        let mut matched: Vec<Vec<bool>> = vec![Vec::new(); thrs.len()];
        let mut npig = 0usize;
        for (p, g) in preds.iter().zip(gts) {
            let g: Vec<&BBox> = g.instances.iter().filter(|d| d.category == c).map(|d| &d.bbox).collect();
            let mut d: Vec<&Detection> = p.instances.iter().filter(|d| d.category == c).collect();
            d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            npig += g.len();
            for (ti, &t) in thrs.iter().enumerate() {
                let mut gt_m = vec![false; g.len()];
                for det in &d {
                    let mut thr = t.min(1.0 - 1e-10);
                    let mut m: isize = -1;
                    for (gi, gb) in g.iter().enumerate() {
                        if gt_m[gi] {
                            continue;
                        }
                        let v = iou(&det.bbox, gb);
                        if v < thr {
                            continue;
                        }
                        thr = v;
                        m = gi as isize;
                    }
                    if m >= 0 {
                        gt_m[m as usize] = true;
                    }
                    matched[ti].push(m >= 0);
                }
            }
            scores.extend(d.iter().map(|x| x.score));
        }
        if npig == 0 {
            continue;
        }
        let mut inds: Vec<usize> = (0..scores.len()).collect();
        inds.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        for ti in 0..thrs.len() {
            let (mut tp, mut fp) = (0.0, 0.0);
            let mut rc = Vec::new();
            let mut pr = Vec::new();
            for &i in &inds {
                if matched[ti][i] {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
                rc.push(tp / npig as f64);
                pr.push(tp / (tp + fp + f64::EPSILON));
            }
            for i in (1..pr.len()).rev() {
                if pr[i] > pr[i - 1] {
                    pr[i - 1] = pr[i];
                }
            }
            let mut q = vec![0.0; rec_thrs.len()];
            for (ri, &r) in rec_thrs.iter().enumerate() {
                let pi = rc.iter().position(|&x| x >= r);
                if let Some(pi) = pi {
                    q[ri] = pr[pi];
                }
            }
            precision[ti][c] = q.iter().sum::<f64>() / q.len() as f64;
        }
    }
    let mean = |row: &[f64]| {
        let v: Vec<f64> = row.iter().copied().filter(|&x| x > -1.0).collect();
        if v.is_empty() { 0.0 } else { 100.0 * v.iter().sum::<f64>() / v.len() as f64 }
    };
    let ap = thrs.iter().enumerate().map(|(ti, _)| mean(&precision[ti])).sum::<f64>() / thrs.len() as f64;
    (ap, mean(&precision[0]))
}

pub fn random_set(seed: u64, classes: usize) -> (Vec<Layout>, Vec<Layout>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = rng.random_range(1..6);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let rand_box = |rng: &mut ChaCha8Rng| {
        let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
        BBox::new(x, y, x + rng.random_range(4.0..40.0), y + rng.random_range(4.0..40.0)).unwrap()
    };
    for _ in 0..images {
        let n = rng.random_range(0..7);
        let g: Vec<Detection> =
            (0..n).map(|_| Detection::new(rand_box(&mut rng), rng.random_range(0..classes), 1.0)).collect();
        let mut p = Vec::new();
        for d in &g {
            if rng.random_bool(0.8) {
                let j = |rng: &mut ChaCha8Rng| rng.random_range(-3.0..3.0);
                let b = d.bbox;
                let moved = BBox::new(b.x_min + j(&mut rng), b.y_min + j(&mut rng), b.x_max + j(&mut rng), b.y_max + j(&mut rng));
                if let Ok(m) = moved {
                    let cat = if rng.random_bool(0.9) { d.category } else { rng.random_range(0..classes) };
                    p.push(Detection::new(m, cat, rng.random_range(0.0..1.0)));
                }
            }
        }
        for _ in 0..rng.random_range(0..4) {
            p.push(Detection::new(rand_box(&mut rng), rng.random_range(0..classes), rng.random_range(0.0..1.0)));
        }
        gts.push(Layout::new(g));
        preds.push(Layout::new(p));
    }
    (preds, gts)
}
