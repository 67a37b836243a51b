//! Brute-force COCO evaluator: match per image, then walk every score cutoff.

use rand::Rng;
use smalldetr::metrics::{AnnotationSet, BoxXyxy, Detection, DetectionSet, GroundTruth};

#[derive(Clone, Copy, PartialEq)]
enum Hit {
    Tp,
    Fp,
    Skip,
}

fn area(b: &BoxXyxy) -> f64 {
    (b.x2 - b.x1) * (b.y2 - b.y1)
}

pub fn overlap(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h / (area(a) + area(b) - w * h)
}

fn in_range(a: f64, r: (f64, f64)) -> bool {
    a >= r.0 && a < r.1
}

/// Label of every detection of `class` in one image, highest score first.
fn label_image(dets: &[Detection], gts: &[GroundTruth], class: usize, thr: f64, r: (f64, f64)) -> (Vec<(f64, Hit)>, usize) {
    let mut ds: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    ds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let gs: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
    let counted = gs.iter().filter(|g| in_range(g.area, r)).count();
    let mut used = vec![false; gs.len()];
    let mut out = Vec::new();
    for d in ds {
        // an in-range ground truth is always preferred over an ignored one
        let pick = |want_in: bool, used: &[bool]| {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gs.iter().enumerate() {
                if used[i] || in_range(g.area, r) != want_in {
                    continue;
                }
                let o = overlap(&d.bbox, &g.bbox);
                if o >= thr && best.map_or(true, |(_, b)| o >= b) {
                    best = Some((i, o));
                }
            }
            best.map(|b| b.0)
        };
        let hit = if let Some(i) = pick(true, &used) {
            used[i] = true;
            Hit::Tp
        } else if let Some(i) = pick(false, &used) {
            used[i] = true;
            Hit::Skip
        } else if in_range(area(&d.bbox), r) {
            Hit::Fp
        } else {
            Hit::Skip
        };
        out.push((d.score, hit));
    }
    (out, counted)
}

fn brute_class_ap(dets: &DetectionSet, gts: &AnnotationSet, class: usize, thr: f64, r: (f64, f64)) -> Option<f64> {
    let mut all = Vec::new();
    let mut counted = 0;
    for (d, g) in dets.images.iter().zip(&gts.images) {
        let (l, n) = label_image(d, g, class, thr, r);
        all.extend(l);
        counted += n;
    }
    if counted == 0 {
        return None;
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    // (recall, precision) at every cutoff "keep the top k"
    let mut points = Vec::new();
    for k in 1..=all.len() {
        let tp = all[..k].iter().filter(|h| h.1 == Hit::Tp).count();
        let fp = all[..k].iter().filter(|h| h.1 == Hit::Fp).count();
        if tp + fp > 0 {
            points.push((tp as f64 / counted as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    // same recall grid as numpy's linspace(0, 1, 101)
    let s: f64 = (0..=100)
        .map(|i| {
            let level = i as f64 * 0.01;
            points.iter().filter(|p| p.0 >= level).map(|p| p.1).fold(0.0, f64::max)
        })
        .sum();
    Some(s / 101.0)
}

fn brute_mean(dets: &DetectionSet, gts: &AnnotationSet, thrs: &[f64], r: (f64, f64)) -> f64 {
    let mut classes: Vec<usize> = gts.images.iter().flatten().map(|g| g.class).collect();
    classes.sort();
    classes.dedup();
    let cells: Vec<f64> = thrs
        .iter()
        .flat_map(|&t| classes.iter().filter_map(move |&c| brute_class_ap(dets, gts, c, t, r)))
        .collect();
    if cells.is_empty() {
        -1.0
    } else {
        cells.iter().sum::<f64>() / cells.len() as f64
    }
}

pub fn brute_report(dets: &DetectionSet, gts: &AnnotationSet) -> [f64; 6] {
    let thrs: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let all = (0.0, f64::INFINITY);
    [
        brute_mean(dets, gts, &thrs, all),
        brute_mean(dets, gts, &[0.5], all),
        brute_mean(dets, gts, &[0.75], all),
        brute_mean(dets, gts, &thrs, (0.0, 1024.0)),
        brute_mean(dets, gts, &thrs, (1024.0, 9216.0)),
        brute_mean(dets, gts, &thrs, (9216.0, f64::INFINITY)),
    ]
}

pub fn random_box(r: &mut impl Rng) -> BoxXyxy {
    // sides from 8 to 160 px cover all three size buckets
    let (w, h) = (r.gen_range(8.0..160.0), r.gen_range(8.0..160.0));
    let (x, y) = (r.gen_range(0.0..300.0 - w), r.gen_range(0.0..300.0 - h));
    BoxXyxy::new(x, y, x + w, y + h).unwrap()
}

fn jitter(r: &mut impl Rng, b: &BoxXyxy) -> BoxXyxy {
    let (w, h) = (b.x2 - b.x1, b.y2 - b.y1);
    let s = r.gen_range(0.0..0.3);
    let dx = r.gen_range(-s..=s) * w;
    let dy = r.gen_range(-s..=s) * h;
    let sw = 1.0 + r.gen_range(-s..=s);
    BoxXyxy::new(b.x1 + dx, b.y1 + dy, b.x1 + dx + w * sw, b.y1 + dy + h * sw).unwrap()
}

/// Up to 10 detections and 5 ground truths spread over one or two images.
pub fn instance(r: &mut impl Rng) -> (DetectionSet, AnnotationSet) {
    let images = r.gen_range(1..=2);
    let classes = r.gen_range(1..=2);
    let mut gts = vec![Vec::new(); images];
    for _ in 0..r.gen_range(1..=5) {
        gts[r.gen_range(0..images)].push(GroundTruth::new(r.gen_range(0..classes), random_box(r)));
    }
    let mut dets = vec![Vec::new(); images];
    for _ in 0..r.gen_range(0..=10) {
        let img = r.gen_range(0..images);
        let d = if !gts[img].is_empty() && r.gen_bool(0.7) {
            let g: GroundTruth = gts[img][r.gen_range(0..gts[img].len())];
            let class = if r.gen_bool(0.9) { g.class } else { r.gen_range(0..classes) };
            Detection { class, score: r.gen(), bbox: jitter(r, &g.bbox) }
        } else {
            Detection { class: r.gen_range(0..classes), score: r.gen(), bbox: random_box(r) }
        };
        dets[img].push(d);
    }
    (DetectionSet { images: dets }, AnnotationSet { images: gts })
}

