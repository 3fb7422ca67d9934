//! TuSimple-style lane evaluation.

use crate::error::{Error, Result};
use crate::labelkit::RowAnchorLabel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// A point is correct when it is closer than this to the ground truth (px).
    pub pt_thresh: f64,
    /// A lane is a true positive when its point accuracy exceeds this.
    pub lane_acc_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { pt_thresh: 20.0, lane_acc_thresh: 0.85 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub f1: f64,
    pub accuracy: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl EvalResult {
    /// Rates from raw counts. Empty denominators give a precision or recall
    /// of 1 and a false-positive or false-negative rate of 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, correct: usize, gt_points: usize) -> Self {
        let ratio = |a: usize, b: usize, empty: f64| if b == 0 { empty } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp, 1.0);
        let recall = ratio(tp, tp + fn_, 1.0);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self {
            f1,
            accuracy: ratio(correct, gt_points, 1.0),
            fpr: ratio(fp, tp + fp, 0.0),
            fnr: ratio(fn_, tp + fn_, 0.0),
            precision,
            recall,
            tp,
            fp,
            fn_,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Tally {
    tp: usize,
    fp: usize,
    fn_: usize,
    correct: usize,
    gt_points: usize,
}

fn frame_tally(pred: &RowAnchorLabel, gt: &RowAnchorLabel, cfg: &EvalConfig) -> Tally {
    let valid = |x: f64| x >= 0.0;
    let mut pairs = Vec::new();
    let mut gt_points = 0;
    for (g, gl) in gt.xs.iter().enumerate() {
        let n = gl.iter().filter(|x| valid(**x)).count();
        gt_points += n;
        for (p, pl) in pred.xs.iter().enumerate() {
            let correct = gl
                .iter()
                .zip(pl)
                .filter(|(a, b)| valid(**a) && valid(**b) && (**a - **b).abs() < cfg.pt_thresh)
                .count();
            if correct > 0 {
                pairs.push((correct as f64 / n as f64, correct, g, p));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
    let mut gt_used = vec![false; gt.xs.len()];
    let mut pred_used = vec![false; pred.xs.len()];
    let mut t = Tally { gt_points, ..Default::default() };
    for (acc, correct, g, p) in pairs {
        if gt_used[g] || pred_used[p] {
            continue;
        }
        gt_used[g] = true;
        pred_used[p] = true;
        t.correct += correct;
        if acc > cfg.lane_acc_thresh {
            t.tp += 1;
        }
    }
    t.fp = pred.xs.len() - t.tp;
    t.fn_ = gt.xs.len() - t.tp;
    t
}

/// Scores predictions against ground truth frame by frame.
///
/// Predicted and ground-truth lanes are paired one-to-one, highest point
/// accuracy first; a pair is a true positive when its accuracy exceeds
/// `lane_acc_thresh`. Accuracy is the number of correct points over all
/// paired lanes divided by the number of ground-truth points.
pub fn tusimple_eval(preds: &[RowAnchorLabel], gts: &[RowAnchorLabel], cfg: &EvalConfig) -> Result<EvalResult> {
    if preds.len() != gts.len() {
        return Err(Error::AnchorMismatch(format!("{} predicted frames, {} ground-truth frames", preds.len(), gts.len())));
    }
    let mut total = Tally::default();
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.h_samples != g.h_samples {
            return Err(Error::AnchorMismatch(format!("frame {i}: h_samples differ")));
        }
        if let Some(bad) = p.xs.iter().chain(&g.xs).find(|l| l.len() != g.h_samples.len()) {
            return Err(Error::AnchorMismatch(format!(
                "frame {i}: lane has {} values for {} rows",
                bad.len(),
                g.h_samples.len()
            )));
        }
        let t = frame_tally(p, g, cfg);
        total.tp += t.tp;
        total.fp += t.fp;
        total.fn_ += t.fn_;
        total.correct += t.correct;
        total.gt_points += t.gt_points;
    }
    Ok(EvalResult::from_counts(total.tp, total.fp, total.fn_, total.correct, total.gt_points))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(lanes: &[Vec<f64>]) -> RowAnchorLabel {
        RowAnchorLabel { h_samples: (0..lanes[0].len() as u32).map(|i| 160 + 10 * i).collect(), xs: lanes.to_vec() }
    }

    fn lanes4() -> Vec<Vec<f64>> {
        (0..4).map(|l| (0..20).map(|i| 100.0 + 250.0 * l as f64 + i as f64).collect()).collect()
    }

    #[test]
    fn identical_is_perfect() {
        let gt = label(&lanes4());
        let r = tusimple_eval(&[gt.clone()], &[gt], &EvalConfig::default()).unwrap();
        assert_eq!((r.f1, r.accuracy, r.fpr, r.fnr), (1.0, 1.0, 0.0, 0.0));
    }

    #[test]
    fn three_of_four() {
        let gt = label(&lanes4());
        let pred = label(&lanes4()[..3]);
        let r = tusimple_eval(&[pred], &[gt], &EvalConfig::default()).unwrap();
        assert_eq!((r.recall, r.precision), (0.75, 1.0));
        assert!((r.f1 - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn lane_accuracy_threshold() {
        let gt = label(&lanes4()[..1]);
        let mut p = lanes4()[..1].to_vec();
        p[0][0] += 30.0;
        p[0][1] += 30.0;
        let r = tusimple_eval(&[label(&p)], &[gt.clone()], &EvalConfig::default()).unwrap();
        assert_eq!(r.tp, 1);
        assert!((r.accuracy - 0.9).abs() < 1e-12);
        p[0][2] += 30.0;
        p[0][3] += 30.0;
        let r = tusimple_eval(&[label(&p)], &[gt], &EvalConfig::default()).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 1));
    }

    #[test]
    fn anchor_mismatch() {
        let gt = label(&lanes4());
        let mut p = gt.clone();
        p.h_samples[0] = 1;
        assert!(matches!(tusimple_eval(&[p], &[gt.clone()], &EvalConfig::default()), Err(Error::AnchorMismatch(_))));
        assert!(tusimple_eval(&[], &[gt], &EvalConfig::default()).is_err());
    }
}
