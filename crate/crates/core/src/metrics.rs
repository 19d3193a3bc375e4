//! Segmentation, box and no-target metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{BoundingBox, Mask};

/// Intersection and union pixel counts.
pub fn overlap(pred: &Mask, gt: &Mask) -> Result<(usize, usize)> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} against ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok((inter, union))
}

/// `|∩| / |∪|`; 1 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, u) = overlap(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// IoU of two inclusive pixel boxes.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let x0 = a.x_min.max(b.x_min);
    let y0 = a.y_min.max(b.y_min);
    let x1 = a.x_max.min(b.x_max);
    let y1 = a.y_max.min(b.y_max);
    let inter = if x1 >= x0 && y1 >= y0 {
        (x1 - x0 + 1) * (y1 - y0 + 1)
    } else {
        0
    };
    inter as f64 / (a.area() + b.area() - inter) as f64
}

/// One scored sample.
#[derive(Clone, Debug)]
pub struct EvalPair<'a> {
    pub pred_mask: &'a Mask,
    pub gt_mask: &'a Mask,
    pub pred_box: Option<BoundingBox>,
    pub gt_box: Option<BoundingBox>,
    pub no_target: bool,
    /// The classifier's empty decision; without one, an empty mask counts as
    /// predicting "no target".
    pub empty_decision: Option<bool>,
}

impl EvalPair<'_> {
    fn predicted_empty(&self) -> bool {
        self.empty_decision.unwrap_or_else(|| self.pred_mask.is_empty())
    }
}

pub const PREC_THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub miou: f64,
    pub oiou: f64,
    /// Fraction of scored samples with IoU above 0.5, 0.7 and 0.9.
    pub prec_at: [f64; 3],
    /// Fraction of target-present samples whose box IoU exceeds 0.5.
    pub rec_acc: f64,
    /// Share of no-target samples predicted empty; absent without any.
    pub n_acc: Option<f64>,
    pub sample_count: usize,
    /// Samples that entered mIoU/oIoU.
    pub scored_count: usize,
    pub no_target_count: usize,
}

impl MetricReport {
    /// `key = value` lines.
    pub fn to_report_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "miou = {:.6}", self.miou);
        let _ = writeln!(s, "oiou = {:.6}", self.oiou);
        for (t, p) in PREC_THRESHOLDS.iter().zip(self.prec_at) {
            let _ = writeln!(s, "prec@{t} = {p:.6}");
        }
        let _ = writeln!(s, "rec_acc = {:.6}", self.rec_acc);
        match self.n_acc {
            Some(n) => {
                let _ = writeln!(s, "n_acc = {n:.6}");
            }
            None => {
                let _ = writeln!(s, "n_acc = none");
            }
        }
        let _ = writeln!(s, "samples = {}", self.sample_count);
        let _ = writeln!(s, "scored = {}", self.scored_count);
        let _ = writeln!(s, "no_target = {}", self.no_target_count);
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "mIoU {:.2}  oIoU {:.2}  P@0.5 {:.2}  P@0.7 {:.2}  P@0.9 {:.2}  REC {:.2}",
            100.0 * self.miou,
            100.0 * self.oiou,
            100.0 * self.prec_at[0],
            100.0 * self.prec_at[1],
            100.0 * self.prec_at[2],
            100.0 * self.rec_acc
        );
        if let Some(n) = self.n_acc {
            let _ = write!(s, "  N-acc {:.2}", 100.0 * n);
        }
        let _ = write!(s, "  ({} samples)", self.sample_count);
        s
    }
}

/// Folds per-sample results into a report. No-target samples are scored
/// only by N-acc unless `include_no_target` is set, in which case they also
/// enter mIoU/oIoU (an empty prediction scoring IoU 1).
pub fn aggregate(pairs: &[EvalPair], include_no_target: bool) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut iou_sum = 0.0;
    let mut inter_sum = 0usize;
    let mut union_sum = 0usize;
    let mut above = [0usize; 3];
    let mut scored = 0usize;
    let mut rec_hits = 0usize;
    let mut rec_total = 0usize;
    let mut nt_total = 0usize;
    let mut nt_hits = 0usize;
    for p in pairs {
        if p.no_target {
            nt_total += 1;
            nt_hits += usize::from(p.predicted_empty());
            if !include_no_target {
                continue;
            }
        }
        let (i, u) = overlap(p.pred_mask, p.gt_mask)?;
        let v = if u == 0 { 1.0 } else { i as f64 / u as f64 };
        iou_sum += v;
        inter_sum += i;
        union_sum += u;
        for (k, &t) in PREC_THRESHOLDS.iter().enumerate() {
            above[k] += usize::from(v > t);
        }
        scored += 1;
        if !p.no_target {
            rec_total += 1;
            if let (Some(a), Some(b)) = (p.pred_box, p.gt_box) {
                rec_hits += usize::from(box_iou(&a, &b) > 0.5);
            }
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(MetricReport {
        miou: if scored == 0 { 0.0 } else { iou_sum / scored as f64 },
        oiou: if union_sum == 0 {
            if scored == 0 {
                0.0
            } else {
                1.0
            }
        } else {
            inter_sum as f64 / union_sum as f64
        },
        prec_at: above.map(|a| frac(a, scored)),
        rec_acc: frac(rec_hits, rec_total),
        n_acc: (nt_total > 0).then(|| nt_hits as f64 / nt_total as f64),
        sample_count: pairs.len(),
        scored_count: scored,
        no_target_count: nt_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        Mask::from_fn(h, w, |r, c| on.contains(&(r, c)))
    }

    fn bx(x0: usize, y0: usize, x1: usize, y1: usize) -> BoundingBox {
        BoundingBox {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
        }
    }

    #[test]
    fn iou_examples() {
        let a = mask(3, 3, &[(0, 0), (1, 1)]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &mask(3, 3, &[(2, 2)])).unwrap(), 0.0);
        let pred = mask(3, 3, &[(0, 0), (0, 1)]);
        let gt = mask(3, 3, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(iou(&pred, &gt).unwrap(), 0.5);
        let empty = Mask::new(3, 3);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(iou(&a, &empty).unwrap(), 0.0);
        assert!(iou(&a, &Mask::new(2, 3)).is_err());
    }

    #[test]
    fn box_iou_examples() {
        assert_eq!(box_iou(&bx(0, 0, 3, 3), &bx(0, 0, 3, 3)), 1.0);
        assert_eq!(box_iou(&bx(0, 0, 1, 1), &bx(3, 3, 4, 4)), 0.0);
        assert!((box_iou(&bx(0, 0, 1, 1), &bx(1, 1, 2, 2)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn hand_aggregation() {
        // sample 1: I=2, U=4; sample 2: I=0, U=2
        let p1 = mask(2, 4, &[(0, 0), (0, 1), (0, 2)]);
        let g1 = mask(2, 4, &[(0, 1), (0, 2), (0, 3)]);
        let p2 = mask(2, 4, &[(1, 0)]);
        let g2 = mask(2, 4, &[(1, 3)]);
        let pairs = [
            EvalPair {
                pred_mask: &p1,
                gt_mask: &g1,
                pred_box: None,
                gt_box: None,
                no_target: false,
                empty_decision: None,
            },
            EvalPair {
                pred_mask: &p2,
                gt_mask: &g2,
                pred_box: None,
                gt_box: None,
                no_target: false,
                empty_decision: None,
            },
        ];
        let r = aggregate(&pairs, false).unwrap();
        assert!((r.oiou - 2.0 / 6.0).abs() < 1e-12);
        assert!((r.miou - 0.25).abs() < 1e-12);
        assert_eq!(r.n_acc, None);
        assert!(aggregate(&[], false).is_err());
    }

    #[test]
    fn n_acc_counts_empty_predictions() {
        let empty = Mask::new(2, 2);
        let full = Mask::from_fn(2, 2, |_, _| true);
        let mk = |m, e| EvalPair {
            pred_mask: m,
            gt_mask: &empty,
            pred_box: None,
            gt_box: None,
            no_target: true,
            empty_decision: e,
        };
        let pairs = [mk(&empty, Some(true)), mk(&full, Some(true)), mk(&full, Some(false))];
        let r = aggregate(&pairs, false).unwrap();
        assert!((r.n_acc.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.scored_count, 0);
        let pairs = [mk(&empty, None), mk(&full, None)];
        assert_eq!(aggregate(&pairs, true).unwrap().n_acc, Some(0.5));
        assert_eq!(aggregate(&pairs, true).unwrap().scored_count, 2);
    }

    #[test]
    fn perfect_sample_scores_one() {
        let m = mask(4, 4, &[(1, 1), (1, 2), (2, 1), (2, 2)]);
        let b = Some(bx(1, 1, 2, 2));
        let pairs = [EvalPair {
            pred_mask: &m,
            gt_mask: &m,
            pred_box: b,
            gt_box: b,
            no_target: false,
            empty_decision: None,
        }];
        let r = aggregate(&pairs, false).unwrap();
        assert_eq!((r.miou, r.oiou, r.rec_acc), (1.0, 1.0, 1.0));
        assert_eq!(r.prec_at, [1.0; 3]);
        assert!(r.to_report_string().contains("miou = 1.000000"));
    }
}
