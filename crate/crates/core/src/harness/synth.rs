//! Seeded synthetic detection data: one filled shape family per class on a
//! noisy textured background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::coco::{CocoAnnotation, CocoCategory, CocoDataset, CocoImage, Dataset, AQUARIUM_CLASSES};
use crate::harness::ppm::RgbImage;
use crate::metrics::SMALL_AREA;

/// Draws per object within one layout attempt.
const PLACEMENT_TRIES: usize = 100;
/// Whole-image layout attempts before the configuration is declared infeasible.
const LAYOUT_TRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_images: usize,
    pub width: usize,
    pub height: usize,
    /// Inclusive `[min, max]` object count per image.
    pub objects_per_image: [usize; 2],
    /// At most seven; names follow the Aquarium label set.
    pub classes: usize,
    /// Probability that an object is drawn small (area below 32x32).
    pub small_fraction: f64,
    /// Inclusive side range of small objects; the max must stay below 32.
    pub small_side: [usize; 2],
    /// Inclusive side range of the other objects. Each side is drawn
    /// independently; draws whose area could fall below 32x32 are redrawn.
    pub large_side: [usize; 2],
    /// Per-pixel noise amplitude in [0, 1].
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 4,
            num_images: 16,
            width: 64,
            height: 64,
            objects_per_image: [1, 2],
            classes: 7,
            small_fraction: 0.6,
            small_side: [8, 24],
            large_side: [24, 48],
            noise: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes == 0 || self.classes > AQUARIUM_CLASSES.len() {
            return fail(format!("classes must be in 1..=7, got {}", self.classes));
        }
        let [lo, hi] = self.objects_per_image;
        if lo > hi {
            return fail(format!("objects_per_image [{lo}, {hi}] is empty"));
        }
        if !(0.0..=1.0).contains(&self.small_fraction) {
            return fail(format!("small_fraction {} outside [0, 1]", self.small_fraction));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return fail(format!("noise {} outside [0, 1]", self.noise));
        }
        let [s0, s1] = self.small_side;
        if s0 < 3 || s0 > s1 || s1 * s1 >= SMALL_AREA as usize {
            return fail(format!("small_side [{s0}, {s1}] must satisfy 3 <= min <= max < 32"));
        }
        let [l0, l1] = self.large_side;
        if l0 < 3 || l0 > l1 || !is_large(l1, l1) {
            return fail(format!("large_side [{l0}, {l1}] cannot produce an object of area >= 32x32"));
        }
        let min_extent = self.width.min(self.height);
        let need = if self.small_fraction < 1.0 { l0.max(SMALL_AREA.sqrt() as usize + 1) } else { s0 };
        if hi > 0 && need > min_extent {
            return fail(format!(
                "objects up to {need}px do not fit a {}x{} image",
                self.width, self.height
            ));
        }
        Ok(())
    }
}

/// Generates the dataset; identical configs give identical bytes.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coco = CocoDataset {
        categories: (0..cfg.classes)
            .map(|i| CocoCategory {
                id: i as u64 + 1,
                name: AQUARIUM_CLASSES[i].to_string(),
            })
            .collect(),
        ..Default::default()
    };
    let mut images = Vec::with_capacity(cfg.num_images);
    for i in 0..cfg.num_images {
        let id = i as u64 + 1;
        let mut img = background(cfg, &mut rng);
        let count = rng.gen_range(cfg.objects_per_image[0]..=cfg.objects_per_image[1]);
        let kinds: Vec<(usize, bool)> = (0..count)
            .map(|_| (rng.gen_range(0..cfg.classes), rng.gen_bool(cfg.small_fraction)))
            .collect();
        let rects = layout(cfg, &mut rng, &kinds)?;
        for (&(class, _), &rect) in kinds.iter().zip(&rects) {
            let [x1, y1, x2, y2] = paint(&mut img, rect, class, &mut rng);
            let (w, h) = ((x2 - x1) as f64, (y2 - y1) as f64);
            coco.annotations.push(CocoAnnotation {
                id: coco.annotations.len() as u64 + 1,
                image_id: id,
                category_id: class as u64 + 1,
                bbox: [x1 as f64, y1 as f64, w, h],
                area: w * h,
            });
        }
        coco.images.push(CocoImage {
            id,
            width: cfg.width,
            height: cfg.height,
            file_name: format!("images/{i:04}.ppm"),
        });
        images.push(img);
    }
    Ok(Dataset { coco, images })
}

fn background(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut img = RgbImage::new(cfg.width, cfg.height);
    let base: [f64; 3] = [rng.gen_range(0.25..0.45), rng.gen_range(0.3..0.5), rng.gen_range(0.4..0.6)];
    let (fx, fy, phase) = (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3), rng.gen_range(0.0..6.28));
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let wave = 0.06 * ((x as f64 * fx + y as f64 * fy + phase).sin());
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let n = rng.gen_range(-cfg.noise..=cfg.noise);
                *p = to_byte(base[c] + wave + n);
            }
            img.put(x, y, px);
        }
    }
    img
}

/// A `w x h` rect whose painted shape stays at or above 32x32 even if the
/// rasterized outline loses a pixel on each axis.
fn is_large(w: usize, h: usize) -> bool {
    ((w - 1) * (h - 1)) as f64 >= SMALL_AREA
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Non-overlapping `[x, y, w, h]` rects for `(class, small)` draws.
///
/// Geometry is redrawn as a whole when an object does not fit; the size
/// classes stay fixed so the small-object share is not biased.
fn layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng, kinds: &[(usize, bool)]) -> Result<Vec<[usize; 4]>> {
    'attempt: for _ in 0..LAYOUT_TRIES {
        let mut placed: Vec<[usize; 4]> = Vec::with_capacity(kinds.len());
        for &(_, small) in kinds {
            match place(cfg, rng, &placed, !small) {
                Some(r) => placed.push(r),
                None => continue 'attempt,
            }
        }
        return Ok(placed);
    }
    let large = kinds.iter().filter(|k| !k.1).count();
    Err(Error::Config(format!(
        "could not lay out {} objects ({large} large) without overlap in a {}x{} image; \
         reduce objects_per_image or object sizes",
        kinds.len(),
        cfg.width,
        cfg.height
    )))
}

/// Random rect keeping a one-pixel gap to earlier ones.
fn place(cfg: &SynthConfig, rng: &mut ChaCha8Rng, placed: &[[usize; 4]], large: bool) -> Option<[usize; 4]> {
    let [lo, hi] = if large { cfg.large_side } else { cfg.small_side };
    for _ in 0..PLACEMENT_TRIES {
        let w = rng.gen_range(lo..=hi.min(cfg.width));
        let h = rng.gen_range(lo..=hi.min(cfg.height));
        if large && !is_large(w, h) {
            continue;
        }
        let x = rng.gen_range(0..=cfg.width - w);
        let y = rng.gen_range(0..=cfg.height - h);
        let clear = placed
            .iter()
            .all(|&[px, py, pw, ph]| x > px + pw || px > x + w || y > py + ph || py > y + h);
        if clear {
            return Some([x, y, w, h]);
        }
    }
    None
}

const PALETTE: [[f64; 3]; 7] = [
    [0.95, 0.55, 0.1],
    [0.85, 0.3, 0.85],
    [0.05, 0.05, 0.05],
    [0.6, 0.65, 0.7],
    [0.95, 0.95, 0.2],
    [0.1, 0.25, 0.6],
    [0.9, 0.15, 0.15],
];

fn inside(class: usize, u: f64, v: f64) -> bool {
    let (a, b) = (2.0 * u - 1.0, 2.0 * v - 1.0);
    match class {
        0 => true,
        1 => a * a + b * b <= 1.0,
        2 => a.abs() <= 0.15 + 0.85 * v,
        3 => a.abs() + b.abs() <= 1.0 + 1e-9,
        4 => a.abs() <= 1.0 / 3.0 || b.abs() <= 1.0 / 3.0,
        5 => (0.3..=1.0).contains(&(a * a + b * b)),
        _ => (u - v).abs() <= 0.2 || (u + v - 1.0).abs() <= 0.2,
    }
}

/// Paints the class shape into `rect` and returns its tight `[x1, y1, x2, y2)` box.
fn paint(img: &mut RgbImage, [x0, y0, w, h]: [usize; 4], class: usize, rng: &mut ChaCha8Rng) -> [usize; 4] {
    let mut colour = [0u8; 3];
    for (c, out) in colour.iter_mut().enumerate() {
        *out = to_byte(PALETTE[class][c] + rng.gen_range(-0.06..=0.06));
    }
    let mut tight = [usize::MAX, usize::MAX, 0, 0];
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let u = (x - x0) as f64 / w as f64 + 0.5 / w as f64;
            let v = (y - y0) as f64 / h as f64 + 0.5 / h as f64;
            if inside(class, u, v) {
                img.put(x, y, colour);
                tight = [tight[0].min(x), tight[1].min(y), tight[2].max(x + 1), tight[3].max(y + 1)];
            }
        }
    }
    tight
}

/// Share of annotations with area below 32x32.
pub fn small_fraction(ds: &CocoDataset) -> f64 {
    if ds.annotations.is_empty() {
        return 0.0;
    }
    let small = ds.annotations.iter().filter(|a| a.area < SMALL_AREA).count();
    small as f64 / ds.annotations.len() as f64
}
