//! Set-prediction loss: per-layer matching, classification BCE over every
//! query and class, L1 and GIoU over matched boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::metrics::{giou, BoxXyxy};
use crate::model::LayerOutput;
use crate::tensor::Tensor;
use crate::training::hungarian::{hungarian_match, CostMatrix, MatchResult};

/// Weights of the three loss terms; the same weights build the matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Ground truth of one image: normalized `(cx, cy, w, h)` boxes and labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageTargets {
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

impl ImageTargets {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.boxes.len() != self.classes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} boxes but {} labels",
                self.boxes.len(),
                self.classes.len()
            )));
        }
        for (i, (b, &c)) in self.boxes.iter().zip(&self.classes).enumerate() {
            if c >= num_classes {
                return Err(Error::InvalidArgument(format!("target {i}: class {c} >= {num_classes}")));
            }
            let inside = b.iter().all(|v| (0.0..=1.0).contains(v));
            if !inside || b[2] <= 0.0 || b[3] <= 0.0 {
                return Err(Error::InvalidArgument(format!("target {i}: box {b:?} outside the unit square")));
            }
        }
        Ok(())
    }

    /// The same targets listed in a different order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            boxes: order.iter().map(|&i| self.boxes[i]).collect(),
            classes: order.iter().map(|&i| self.classes[i]).collect(),
        }
    }
}

/// Unweighted, normalized loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.cls, self.l1, self.giou, self.total].iter().all(|v| v.is_finite())
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.cls += other.cls;
        self.l1 += other.l1;
        self.giou += other.giou;
        self.total += other.total;
    }
}

/// `cost[q,g] = -w_cls p_q(c_g) + w_l1 |b_q - b_g|_1 + w_giou (1 - GIoU(b_q, b_g))`.
///
/// `logits` is `(Q, K)` and `boxes` `(Q, 4)` for a single image.
pub fn match_cost(
    logits: &[f64],
    boxes: &[f64],
    num_classes: usize,
    targets: &ImageTargets,
    w: &LossWeights,
) -> Result<CostMatrix> {
    let q = boxes.len() / 4;
    if boxes.len() != q * 4 || logits.len() != q * num_classes {
        return Err(Error::shape(
            "match_cost",
            format!("{} logits and {} box values for K = {num_classes}", logits.len(), boxes.len()),
        ));
    }
    let g = targets.len();
    let mut data = Vec::with_capacity(q * g);
    for qi in 0..q {
        let pb: [f64; 4] = boxes[qi * 4..qi * 4 + 4].try_into().expect("row of four");
        let pred = BoxXyxy::from_cxcywh(pb, 1.0, 1.0);
        for (tb, &c) in targets.boxes.iter().zip(&targets.classes) {
            let p = sigmoid(logits[qi * num_classes + c]);
            let l1: f64 = pb.iter().zip(tb).map(|(a, b)| (a - b).abs()).sum();
            let gi = giou(&pred, &BoxXyxy::from_cxcywh(*tb, 1.0, 1.0))?;
            data.push(w.cls * -p + w.l1 * l1 + w.giou * (1.0 - gi));
        }
    }
    CostMatrix::new(q, g, data)
}

/// Matches every image of every layer against its targets from current values.
///
/// Returns `matches[layer][image]`.
pub fn match_layers(g: &Graph, layers: &[LayerOutput], targets: &[ImageTargets], w: &LossWeights) -> Result<Vec<Vec<MatchResult>>> {
    layers
        .iter()
        .map(|l| {
            let &[n, q, k] = g.shape(l.logits) else {
                return Err(Error::shape("match_layers", format!("logits {:?}", g.shape(l.logits))));
            };
            if n != targets.len() {
                return Err(Error::shape("match_layers", format!("{n} images but {} target sets", targets.len())));
            }
            let (ld, bd) = (g.value(l.logits).data(), g.value(l.boxes).data());
            (0..n)
                .map(|i| {
                    let c = match_cost(&ld[i * q * k..(i + 1) * q * k], &bd[i * q * 4..(i + 1) * q * 4], k, &targets[i], w)?;
                    hungarian_match(&c)
                })
                .collect()
        })
        .collect()
}

/// Number of ground-truth boxes the loss is divided by, never below one.
pub fn normalizer(targets: &[ImageTargets]) -> f64 {
    targets.iter().map(ImageTargets::len).sum::<usize>().max(1) as f64
}

/// Matches and scores `layers` against `targets`, normalizing by their box count.
pub fn compute_loss(
    g: &mut Graph,
    layers: &[LayerOutput],
    targets: &[ImageTargets],
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let matches = match_layers(g, layers, targets, w)?;
    loss_from_matches(g, layers, targets, &matches, w, normalizer(targets))
}

/// Loss for given per-layer matches, every term divided by `norm`.
///
/// Classification targets are one-hot for matched queries and all-zero for
/// the rest; box terms cover matched pairs only. Terms are summed over layers.
pub fn loss_from_matches(
    g: &mut Graph,
    layers: &[LayerOutput],
    targets: &[ImageTargets],
    matches: &[Vec<MatchResult>],
    w: &LossWeights,
    norm: f64,
) -> Result<(Var, LossBreakdown)> {
    if matches.len() != layers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} match sets for {} layers",
            matches.len(),
            layers.len()
        )));
    }
    let mut terms: [Option<Var>; 3] = [None; 3];
    let mut push = |g: &mut Graph, slot: usize, v: Var| -> Result<()> {
        terms[slot] = Some(match terms[slot] {
            Some(acc) => g.add(acc, v)?,
            None => v,
        });
        Ok(())
    };
    for (l, layer_matches) in layers.iter().zip(matches) {
        let &[n, q, k] = g.shape(l.logits) else {
            return Err(Error::shape("loss", format!("logits {:?}", g.shape(l.logits))));
        };
        if layer_matches.len() != n || targets.len() != n {
            return Err(Error::shape(
                "loss",
                format!("{n} images, {} match sets, {} target sets", layer_matches.len(), targets.len()),
            ));
        }
        let mut cls_target = Tensor::zeros(&[n, q, k]);
        let mut rows = Vec::new();
        let mut box_target = Vec::new();
        for (i, (m, t)) in layer_matches.iter().zip(targets).enumerate() {
            for &(qi, gi) in &m.pairs {
                if qi >= q || gi >= t.len() {
                    return Err(Error::InvalidArgument(format!("pair ({qi}, {gi}) out of range")));
                }
                cls_target.data_mut()[(i * q + qi) * k + t.classes[gi]] = 1.0;
                rows.push(i * q + qi);
                box_target.extend_from_slice(&t.boxes[gi]);
            }
        }
        let cls = g.bce_with_logits_sum(l.logits, &cls_target)?;
        push(g, 0, cls)?;
        if !rows.is_empty() {
            let picked = g.gather_rows(l.boxes, &rows)?;
            let bt = Tensor::new(&[rows.len(), 4], box_target)?;
            let l1 = g.l1_sum(picked, &bt)?;
            push(g, 1, l1)?;
            let gl = g.giou_loss_sum(picked, &bt)?;
            push(g, 2, gl)?;
        }
    }
    let inv = 1.0 / norm;
    let mut parts = [0.0; 3];
    let mut total = None;
    for (slot, weight) in [w.cls, w.l1, w.giou].into_iter().enumerate() {
        let Some(v) = terms[slot] else { continue };
        parts[slot] = g.value(v).data()[0] * inv;
        let scaled = g.scale(v, weight * inv);
        total = Some(match total {
            Some(acc) => g.add(acc, scaled)?,
            None => scaled,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::zeros(&[1])),
    };
    let breakdown = LossBreakdown {
        cls: parts[0],
        l1: parts[1],
        giou: parts[2],
        total: g.value(total).data()[0],
    };
    Ok((total, breakdown))
}
