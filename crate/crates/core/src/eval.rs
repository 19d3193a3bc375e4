//! Scoring a model on a split.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, EvalPair, MetricReport};
use crate::model::LatentVg;
use crate::predictor::{self, PredictionOutput};
use crate::sample::SceneSample;

/// Metrics of the fused prediction plus the mIoU each individual map would
/// reach on its own (text first, then each latent expression).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricReport,
    pub per_expression_miou: Vec<f64>,
}

impl EvalReport {
    /// Largest minus smallest per-expression mIoU.
    pub fn expression_spread(&self) -> f64 {
        let max = self.per_expression_miou.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.per_expression_miou.iter().cloned().fold(f64::INFINITY, f64::min);
        if self.per_expression_miou.is_empty() {
            0.0
        } else {
            max - min
        }
    }

    pub fn to_report_string(&self) -> String {
        let mut s = self.metrics.to_report_string();
        for (i, m) in self.per_expression_miou.iter().enumerate() {
            let name = if i == 0 { "text".to_string() } else { format!("latent_{i}") };
            let _ = writeln!(s, "miou.{name} = {m:.6}");
        }
        s
    }
}

/// Predicts every sample and aggregates. No-target samples enter
/// mIoU/oIoU only with `include_no_target`.
pub fn evaluate(
    model: &LatentVg,
    samples: &[SceneSample],
    include_no_target: bool,
) -> Result<(EvalReport, Vec<PredictionOutput>)> {
    if samples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let preds = samples
        .iter()
        .map(|s| predictor::predict(model, &s.image, &s.token_ids))
        .collect::<Result<Vec<_>>>()?;
    Ok((score(model, samples, &preds, include_no_target)?, preds))
}

/// Aggregates precomputed predictions.
pub fn score(
    model: &LatentVg,
    samples: &[SceneSample],
    preds: &[PredictionOutput],
    include_no_target: bool,
) -> Result<EvalReport> {
    let pairs: Vec<EvalPair> = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| EvalPair {
            pred_mask: &p.mask,
            gt_mask: &s.gt_mask,
            pred_box: p.bbox,
            gt_box: s.gt_box,
            no_target: s.no_target,
            empty_decision: p.empty_decision,
        })
        .collect();
    let report = metrics::aggregate(&pairs, include_no_target)?;

    let cfg = &model.config;
    let n_maps = preds.first().map_or(0, |p| p.per_expression_maps.len());
    let mut sums = vec![0.0; n_maps];
    let mut count = 0usize;
    for (s, p) in samples.iter().zip(preds) {
        if s.no_target {
            continue;
        }
        count += 1;
        for (j, map) in p.per_expression_maps.iter().enumerate() {
            let m = predictor::mask_from_probmap(map, cfg.mask_threshold, cfg.image_h, cfg.image_w);
            sums[j] += metrics::iou(&m, &s.gt_mask)?;
        }
    }
    let per_expression_miou = sums
        .into_iter()
        .map(|x| if count == 0 { 0.0 } else { x / count as f64 })
        .collect();
    Ok(EvalReport {
        metrics: report,
        per_expression_miou,
    })
}
