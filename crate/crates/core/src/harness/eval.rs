use crate::error::Result;
use crate::graph::sigmoid;
use crate::harness::coco::Dataset;
use crate::metrics::{coco_ap_report, decode_detections, ApReport, Detection, DetectionSet, MAX_DETS_PER_IMAGE};
use crate::model::Model;
use crate::par;

/// Detections of the model's last decoder layer for every image.
pub fn detect(model: &Model, data: &Dataset) -> Result<DetectionSet> {
    let k = model.config.classes;
    let images = par::map(&data.images, |img| -> Result<Vec<Detection>> {
        let p = model.predict(&img.to_tensor())?;
        let last = p.layers.last().expect("at least one decoder layer");
        let scores: Vec<f64> = last.logits.data().iter().map(|&z| sigmoid(z)).collect();
        Ok(decode_detections(
            &scores,
            last.boxes.data(),
            k,
            img.width as f64,
            img.height as f64,
            MAX_DETS_PER_IMAGE,
        ))
    });
    Ok(DetectionSet {
        images: images.into_iter().collect::<Result<_>>()?,
    })
}

/// A predictor that returns every ground-truth box with score 1.
pub fn perfect_detections(data: &Dataset) -> DetectionSet {
    DetectionSet {
        images: data
            .coco
            .ground_truth()
            .images
            .into_iter()
            .map(|gts| {
                gts.into_iter()
                    .map(|g| Detection {
                        class: g.class,
                        score: 1.0,
                        bbox: g.bbox,
                    })
                    .collect()
            })
            .collect(),
    }
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<ApReport> {
    coco_ap_report(&detect(model, data)?, &data.coco.ground_truth())
}
