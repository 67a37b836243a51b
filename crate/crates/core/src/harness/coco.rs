//! COCO-style annotation documents (images, annotations, categories subset).

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::ppm::RgbImage;
use crate::metrics::{AnnotationSet, BoxXyxy, GroundTruth};
use crate::training::{ImageTargets, Sample};

/// Class names of the Aquarium dataset, in label order.
pub const AQUARIUM_CLASSES: [&str; 7] = ["fish", "jellyfish", "penguin", "shark", "puffin", "stingray", "starfish"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    /// PPM file, relative to the annotation file's directory.
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]` in absolute pixels.
    pub bbox: [f64; 4],
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDataset {
    /// Parses and validates a document; `origin` only labels errors.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let ds: CocoDataset = serde_json::from_str(text).map_err(|e| Error::Dataset {
            path: origin.to_path_buf(),
            message: format!("line {} column {}: {e}", e.line(), e.column()),
        })?;
        ds.validate().map_err(|message| Error::Dataset {
            path: origin.to_path_buf(),
            message,
        })?;
        Ok(ds)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let mut image_dims = HashMap::new();
        for (i, im) in self.images.iter().enumerate() {
            if im.width == 0 || im.height == 0 {
                return Err(format!("images[{i}] (id {}): zero extent {}x{}", im.id, im.width, im.height));
            }
            if image_dims.insert(im.id, (im.width, im.height)).is_some() {
                return Err(format!("images[{i}]: duplicate image id {}", im.id));
            }
        }
        let mut cats = HashSet::new();
        for (i, c) in self.categories.iter().enumerate() {
            if !cats.insert(c.id) {
                return Err(format!("categories[{i}]: duplicate category id {}", c.id));
            }
        }
        let mut ann_ids = HashSet::new();
        for (i, a) in self.annotations.iter().enumerate() {
            let at = format!("annotations[{i}] (id {})", a.id);
            if !ann_ids.insert(a.id) {
                return Err(format!("{at}: duplicate annotation id"));
            }
            let &(w, h) = image_dims
                .get(&a.image_id)
                .ok_or_else(|| format!("{at}: references missing image id {}", a.image_id))?;
            if !cats.contains(&a.category_id) {
                return Err(format!("{at}: references missing category id {}", a.category_id));
            }
            let [x, y, bw, bh] = a.bbox;
            if !a.bbox.iter().all(|v| v.is_finite()) || bw <= 0.0 || bh <= 0.0 {
                return Err(format!("{at}: degenerate bbox {:?}", a.bbox));
            }
            if x < 0.0 || y < 0.0 || x + bw > w as f64 || y + bh > h as f64 {
                return Err(format!("{at}: bbox {:?} exceeds image {} bounds {w}x{h}", a.bbox, a.image_id));
            }
            if !(a.area.is_finite() && a.area > 0.0) {
                return Err(format!("{at}: area {} must be positive", a.area));
            }
        }
        Ok(())
    }

    /// Label index of a category id (its position in `categories`).
    pub fn class_of(&self, category_id: u64) -> usize {
        self.categories
            .iter()
            .position(|c| c.id == category_id)
            .expect("validated category reference")
    }

    fn per_image(&self) -> Vec<Vec<&CocoAnnotation>> {
        let index: HashMap<u64, usize> = self.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
        let mut out = vec![Vec::new(); self.images.len()];
        for a in &self.annotations {
            out[index[&a.image_id]].push(a);
        }
        out
    }

    /// Absolute `xyxy` boxes with the annotated area, per image in file order.
    pub fn ground_truth(&self) -> AnnotationSet {
        AnnotationSet {
            images: self
                .per_image()
                .into_iter()
                .map(|anns| {
                    anns.into_iter()
                        .map(|a| {
                            let [x, y, w, h] = a.bbox;
                            GroundTruth {
                                class: self.class_of(a.category_id),
                                bbox: BoxXyxy { x1: x, y1: y, x2: x + w, y2: y + h },
                                area: a.area,
                            }
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Normalized `(cx, cy, w, h)` training targets, per image in file order.
    pub fn targets(&self) -> Vec<ImageTargets> {
        self.per_image()
            .into_iter()
            .zip(&self.images)
            .map(|(anns, im)| {
                let (iw, ih) = (im.width as f64, im.height as f64);
                ImageTargets {
                    boxes: anns
                        .iter()
                        .map(|a| {
                            let [x, y, w, h] = a.bbox;
                            [(x + w / 2.0) / iw, (y + h / 2.0) / ih, w / iw, h / ih]
                        })
                        .collect(),
                    classes: anns.iter().map(|a| self.class_of(a.category_id)).collect(),
                }
            })
            .collect()
    }
}

/// Reads and validates an annotation file.
pub fn load_coco(path: &Path) -> Result<CocoDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CocoDataset::from_json(&text, path)
}

/// Annotations together with their decoded pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub coco: CocoDataset,
    pub images: Vec<RgbImage>,
}

impl Dataset {
    /// Loads an annotation file and every image it lists.
    pub fn load(annotations: &Path) -> Result<Self> {
        let coco = load_coco(annotations)?;
        let dir = annotations.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let images = coco
            .images
            .iter()
            .map(|im| {
                let p = dir.join(&im.file_name);
                let img = RgbImage::load(&p)?;
                if (img.width, img.height) != (im.width, im.height) {
                    return Err(Error::Dataset {
                        path: p,
                        message: format!(
                            "pixels are {}x{} but annotations say {}x{}",
                            img.width, img.height, im.width, im.height
                        ),
                    });
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { coco, images })
    }

    /// Writes `annotations.json` and one PPM per image into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        for (im, px) in self.coco.images.iter().zip(&self.images) {
            let p = dir.join(&im.file_name);
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            px.save(&p)?;
        }
        let path = dir.join("annotations.json");
        std::fs::write(&path, self.coco.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.images
            .iter()
            .zip(self.coco.targets())
            .map(|(img, targets)| Sample {
                image: img.to_tensor(),
                targets,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
