//! Inference heads: binary mask, tight box and the empty decision.

use serde::Serialize;

use crate::autograd::Graph;
use crate::error::Result;
use crate::model::LatentVg;
use crate::sample::{BoundingBox, Image, Mask};
use crate::tensor::Matrix;

/// What the model says about one image and expression.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutput {
    /// Fused probability map, `H/4 × W/4`.
    pub prob_map: Matrix,
    /// Text map first, then one per latent expression, each `H/4 × W/4`.
    pub per_expression_maps: Vec<Matrix>,
    /// Full-resolution binary mask.
    pub mask: Mask,
    pub bbox: Option<BoundingBox>,
    pub empty_logit: Option<f64>,
    pub empty_decision: Option<bool>,
}

/// One exported prediction line.
#[derive(Clone, Debug, Serialize)]
pub struct PredictionRecord {
    pub id: usize,
    pub mask_rle: Vec<u32>,
    pub bbox: Option<[usize; 4]>,
    pub empty_logit: Option<f64>,
    pub empty: Option<bool>,
}

impl PredictionRecord {
    pub fn new(id: usize, out: &PredictionOutput) -> Self {
        Self {
            id,
            mask_rle: out.mask.to_rle(),
            bbox: out.bbox.map(BoundingBox::to_array),
            empty_logit: out.empty_logit,
            empty: out.empty_decision,
        }
    }
}

/// Marks cells with `prob >= threshold` as foreground and resizes to
/// `height × width` with nearest-neighbour sampling.
pub fn mask_from_probmap(prob: &Matrix, threshold: f64, height: usize, width: usize) -> Mask {
    let (h, w) = prob.shape();
    Mask::from_fn(height, width, |r, c| prob.get(r * h / height, c * w / width) >= threshold)
}

/// Tight inclusive box around the foreground, or `None` for an empty mask.
pub fn box_from_mask(mask: &Mask) -> Option<BoundingBox> {
    let mut b: Option<BoundingBox> = None;
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if !mask.get(r, c) {
                continue;
            }
            b = Some(match b {
                None => BoundingBox {
                    x_min: c,
                    y_min: r,
                    x_max: c,
                    y_max: r,
                },
                Some(b) => BoundingBox {
                    x_min: b.x_min.min(c),
                    y_min: b.y_min.min(r),
                    x_max: b.x_max.max(c),
                    y_max: b.y_max.max(r),
                },
            });
        }
    }
    b
}

/// Deterministic inference: no dropout, no Gumbel noise. In GRES mode an
/// empty decision clears the mask.
pub fn predict(model: &LatentVg, image: &Image, token_ids: &[usize]) -> Result<PredictionOutput> {
    let cfg = &model.config;
    let mut g = Graph::inference(&model.store);
    let out = model.forward_sample(&mut g, image, token_ids, None, None)?;
    let (h, w) = cfg.map_hw();
    let grid = |v| g.value(v).clone().reshaped(h, w);
    let prob_map = grid(out.prob)?;
    let per_expression_maps = out.maps.iter().map(|&m| grid(m)).collect::<Result<Vec<_>>>()?;
    let mut mask = mask_from_probmap(&prob_map, cfg.mask_threshold, cfg.image_h, cfg.image_w);
    let empty_logit = out.empty_logit.map(|l| g.value(l).item());
    let empty_decision = empty_logit.map(|l| l > cfg.empty_threshold);
    if empty_decision == Some(true) {
        mask = Mask::new(cfg.image_h, cfg.image_w);
    }
    let bbox = box_from_mask(&mask);
    Ok(PredictionOutput {
        prob_map,
        per_expression_maps,
        mask,
        bbox,
        empty_logit,
        empty_decision,
    })
}
