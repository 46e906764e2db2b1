//! Evaluation metrics: overlap success (SUC), center-error precision (P,
//! P_norm), report files, and the held-out risk-gap probe.
//!
//! Threshold conventions are strict everywhere: a frame passes an overlap
//! threshold t only when IoU > t, and a precision radius r only when the
//! center distance is < r.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BBox;

/// Overlap thresholds 0.00, 0.05, ..., 1.00.
pub const SUC_THRESHOLDS: usize = 21;
/// Normalized-precision thresholds 0.00, 0.05, ..., 0.50.
pub const PNORM_THRESHOLDS: usize = 11;
/// Default precision radius in pixels (20 px at OTB's 500-px scale maps to
/// 8 px on the 160-px canvas).
pub const PRECISION_RADIUS: f64 = 8.0;

/// Intersection-over-union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0) as f64;
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0) as f64;
    let inter = iw * ih;
    let union = a.area() as f64 + b.area() as f64 - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Mean over 21 overlap thresholds of the fraction of frames with IoU
/// strictly above the threshold.
pub fn suc(iou_series: &[f64]) -> Result<f64> {
    if iou_series.is_empty() {
        return Err(Error::Metric("success score over an empty series".into()));
    }
    let n = iou_series.len() as f64;
    let mut total = 0.0;
    for i in 0..SUC_THRESHOLDS {
        let t = i as f64 * 0.05;
        let pass = iou_series.iter().filter(|&&v| v > t).count() as f64;
        total += pass / n;
    }
    Ok(total / SUC_THRESHOLDS as f64)
}

/// Fraction of frames whose center distance is strictly below `radius`.
pub fn precision(pred: &[(f64, f64)], gt: &[(f64, f64)], radius: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Metric(format!(
            "precision over mismatched lengths {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Metric("precision over an empty series".into()));
    }
    let pass = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| {
            let d = ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt();
            d < radius
        })
        .count();
    Ok(pass as f64 / pred.len() as f64)
}

/// Precision with the center error normalized by the ground-truth box size,
/// averaged over thresholds 0.00..=0.50.
pub fn p_norm(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Metric(format!(
            "p_norm over mismatched lengths {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Metric("p_norm over an empty series".into()));
    }
    let dists: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let dx = (p.cx - g.cx) as f64 / g.w.max(1e-6) as f64;
            let dy = (p.cy - g.cy) as f64 / g.h.max(1e-6) as f64;
            (dx * dx + dy * dy).sqrt()
        })
        .collect();
    let n = dists.len() as f64;
    let mut total = 0.0;
    for i in 0..PNORM_THRESHOLDS {
        let t = i as f64 * 0.05;
        total += dists.iter().filter(|&&d| d < t).count() as f64 / n;
    }
    Ok(total / PNORM_THRESHOLDS as f64)
}

/// Per-sequence evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub name: String,
    pub iou: Vec<f64>,
    pub suc: f64,
    pub precision: f64,
    pub p_norm: f64,
    pub distractor: bool,
    pub occlusion: bool,
}

/// Mean SUC per attribute slice; `None` when the benchmark has no such
/// sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeBreakdown {
    pub distractor: Option<f64>,
    pub occlusion: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    pub benchmark_fingerprint: String,
    pub lang_mode: String,
    pub suc: f64,
    pub precision: f64,
    pub p_norm: f64,
    pub breakdown: AttributeBreakdown,
    pub per_sequence: Vec<SequenceEval>,
}

impl EvalReport {
    pub fn aggregate(
        config_fingerprint: String,
        benchmark_fingerprint: String,
        lang_mode: String,
        per_sequence: Vec<SequenceEval>,
    ) -> Result<Self> {
        if per_sequence.is_empty() {
            return Err(Error::Metric("evaluation produced no sequences".into()));
        }
        let mean = |f: &dyn Fn(&SequenceEval) -> f64, filt: &dyn Fn(&SequenceEval) -> bool| {
            let vals: Vec<f64> = per_sequence.iter().filter(|s| filt(s)).map(|s| f(s)).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        Ok(Self {
            suc: mean(&|s| s.suc, &|_| true).unwrap(),
            precision: mean(&|s| s.precision, &|_| true).unwrap(),
            p_norm: mean(&|s| s.p_norm, &|_| true).unwrap(),
            breakdown: AttributeBreakdown {
                distractor: mean(&|s| s.suc, &|s| s.distractor),
                occlusion: mean(&|s| s.suc, &|s| s.occlusion),
            },
            config_fingerprint,
            benchmark_fingerprint,
            lang_mode,
            per_sequence,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        serde_json::from_str(&body).map_err(Error::from)
    }
}

/// Held-out empirical risk of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub label: String,
    /// Fingerprint of the training schedule with modality availability
    /// masked out; both probe inputs must match.
    pub schedule_fingerprint: String,
    pub mean_heldout_loss: f64,
    pub pairs: usize,
}

/// Signed empirical risk gap between a more-modal and a less-modal model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskGapReport {
    pub multi: RiskEstimate,
    pub single: RiskEstimate,
    /// risk(single) - risk(multi); positive means the extra modality helped.
    pub gap: f64,
}

/// Compare held-out risks of two models trained under the same schedule,
/// differing only in modality availability.
pub fn risk_gap_probe(multi: RiskEstimate, single: RiskEstimate) -> Result<RiskGapReport> {
    if multi.schedule_fingerprint != single.schedule_fingerprint {
        return Err(Error::Probe(format!(
            "schedule fingerprints differ: {} vs {}",
            multi.schedule_fingerprint, single.schedule_fingerprint
        )));
    }
    let gap = single.mean_heldout_loss - multi.mean_heldout_loss;
    Ok(RiskGapReport { multi, single, gap })
}

/// Comparison table cell used by the ablation harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub arm: String,
    pub suc: f64,
    pub precision: f64,
    pub extras: BTreeMap<String, f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f32, cy: f32, w: f32, h: f32) -> BBox {
        BBox::new(cx, cy, w, h)
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let a = b(10.0, 10.0, 4.0, 6.0);
        assert_eq!(iou(&a, &a), 1.0);
        let far = b(100.0, 100.0, 4.0, 6.0);
        assert_eq!(iou(&a, &far), 0.0);
    }

    #[test]
    fn iou_half_overlapping_unit_squares() {
        let a = b(0.5, 0.5, 1.0, 1.0);
        let c = b(1.0, 0.5, 1.0, 1.0);
        let got = iou(&a, &c);
        assert!((got - 1.0 / 3.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn suc_threshold_edges() {
        // all IoU = 1.0 passes 20 of 21 strict thresholds
        let all_one = vec![1.0; 7];
        assert!((suc(&all_one).unwrap() - 20.0 / 21.0).abs() < 1e-12);
        let all_zero = vec![0.0; 7];
        assert_eq!(suc(&all_zero).unwrap(), 0.0);
        let all_half = vec![0.5; 4];
        assert!((suc(&all_half).unwrap() - 10.0 / 21.0).abs() < 1e-12);
    }

    #[test]
    fn suc_rejects_empty() {
        assert!(matches!(suc(&[]), Err(Error::Metric(_))));
    }

    #[test]
    fn suc_is_monotone_in_the_series() {
        let base = vec![0.1, 0.4, 0.55, 0.8, 0.23];
        let better: Vec<f64> = base.iter().map(|v| f64::min(v + 0.11, 1.0)).collect();
        assert!(suc(&better).unwrap() >= suc(&base).unwrap());
    }

    #[test]
    fn suc_within_bruteforce_bounds_for_short_series() {
        // bounds = [min_t pass(t), max_t pass(t)] by direct enumeration
        let cases = [
            vec![0.3],
            vec![0.0, 1.0],
            vec![0.2, 0.4, 0.6],
            vec![0.9, 0.91, 0.13, 0.77],
            vec![0.5, 0.5, 0.5, 0.5, 0.49],
        ];
        for series in cases {
            let mut lo = f64::MAX;
            let mut hi = f64::MIN;
            for i in 0..SUC_THRESHOLDS {
                let t = i as f64 * 0.05;
                let frac =
                    series.iter().filter(|&&v| v > t).count() as f64 / series.len() as f64;
                lo = lo.min(frac);
                hi = hi.max(frac);
            }
            let s = suc(&series).unwrap();
            assert!(s >= lo && s <= hi, "{series:?}: {s} notin [{lo},{hi}]");
        }
    }

    #[test]
    fn precision_boundary_is_strict() {
        let gt = vec![(0.0, 0.0); 3];
        assert_eq!(precision(&gt, &gt, 8.0).unwrap(), 1.0);
        let at_radius = vec![(8.0, 0.0); 3];
        assert_eq!(precision(&at_radius, &gt, 8.0).unwrap(), 0.0);
        let mixed = vec![(0.0, 0.0), (5.0, 0.0), (100.0, 0.0)];
        assert!((precision(&mixed, &gt, 8.0).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn precision_rejects_length_mismatch() {
        assert!(matches!(
            precision(&[(0.0, 0.0)], &[], 8.0),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn risk_gap_of_model_against_itself_is_zero() {
        let e = RiskEstimate {
            label: "single".into(),
            schedule_fingerprint: "abc".into(),
            mean_heldout_loss: 0.83,
            pairs: 64,
        };
        let r = risk_gap_probe(e.clone(), e).unwrap();
        assert_eq!(r.gap, 0.0);
    }

    #[test]
    fn risk_gap_is_single_minus_multi() {
        let multi = RiskEstimate {
            label: "vl".into(),
            schedule_fingerprint: "abc".into(),
            mean_heldout_loss: 0.4,
            pairs: 64,
        };
        let single = RiskEstimate {
            label: "vision".into(),
            schedule_fingerprint: "abc".into(),
            mean_heldout_loss: 0.55,
            pairs: 64,
        };
        let r = risk_gap_probe(multi, single).unwrap();
        assert!((r.gap - 0.15).abs() < 1e-12);
    }

    #[test]
    fn risk_gap_rejects_schedule_mismatch() {
        let a = RiskEstimate {
            label: "a".into(),
            schedule_fingerprint: "one".into(),
            mean_heldout_loss: 0.4,
            pairs: 8,
        };
        let mut b = a.clone();
        b.schedule_fingerprint = "two".into();
        assert!(matches!(risk_gap_probe(a, b), Err(Error::Probe(_))));
    }

    #[test]
    fn eval_report_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.json");
        let seqs = vec![
            SequenceEval {
                name: "s0".into(),
                iou: vec![0.5, 0.7313],
                suc: 0.476,
                precision: 1.0,
                p_norm: 0.8,
                distractor: true,
                occlusion: false,
            },
            SequenceEval {
                name: "s1".into(),
                iou: vec![0.0],
                suc: 0.0,
                precision: 0.0,
                p_norm: 0.0,
                distractor: false,
                occlusion: false,
            },
        ];
        let rep = EvalReport::aggregate("cfg123".into(), "bench456".into(), "description".into(), seqs)
            .unwrap();
        assert_eq!(rep.breakdown.distractor, Some(0.476));
        assert_eq!(rep.breakdown.occlusion, None);
        rep.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = EvalReport::load(&p).unwrap();
        assert_eq!(back, rep);
        back.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(back.config_fingerprint, "cfg123");
    }
}
