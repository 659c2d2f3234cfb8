//! Confusion counts and detection scores over voxel masks.

use crate::grid::{BitGrid, Dims3};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Voxel-level confusion counts. Counts are exact; scores derive from them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fneg: u64,
    pub tn: u64,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fneg += other.fneg;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fneg + self.tn
    }

    #[inline]
    pub fn record(&mut self, pred: bool, gt: bool) {
        match (pred, gt) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fneg += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn scores(&self) -> Scores {
        // Every ratio reports 0 when its denominator is empty.
        let frac = |num: u64, den: u64| {
            if den == 0 {
                0.0
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        Scores {
            f1: frac(2 * self.tp, 2 * self.tp + self.fp + self.fneg),
            iou: frac(self.tp, self.tp + self.fp + self.fneg),
            oa: frac(self.tp + self.tn, self.total()),
            precision: frac(self.tp, self.tp + self.fp),
            recall: frac(self.tp, self.tp + self.fneg),
        }
    }
}

/// Detection scores in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
    pub precision: f64,
    pub recall: f64,
}

/// The voxels that take part in an evaluation: valid pixels within a week
/// range of a (T, Lat, Lon) grid.
#[derive(Clone)]
pub struct Region<'a> {
    pub dims: Dims3,
    pub valid: &'a [u8],
    pub weeks: Range<usize>,
}

impl<'a> Region<'a> {
    pub fn new(dims: Dims3, valid: &'a [u8], weeks: Range<usize>) -> Self {
        debug_assert!(weeks.end <= dims.t);
        debug_assert_eq!(valid.len(), dims.plane());
        Region { dims, valid, weeks }
    }

    pub fn full(dims: Dims3, valid: &'a [u8]) -> Self {
        Region { dims, valid, weeks: 0..dims.t }
    }
}

/// Confusion counts of a bit-mask prediction against a bit-mask truth.
pub fn count_bits(pred: &BitGrid, gt: &BitGrid, region: &Region) -> Counts {
    let plane = region.dims.plane();
    let mut c = Counts::default();
    for t in region.weeks.clone() {
        let off = t * plane;
        for p in 0..plane {
            if region.valid[p] == 1 {
                c.record(pred.get(off + p), gt.get(off + p));
            }
        }
    }
    c
}

/// Confusion counts of a byte-mask prediction against a byte-mask truth.
pub fn count_u8(pred: &[u8], gt: &[u8], region: &Region) -> Counts {
    let plane = region.dims.plane();
    let mut c = Counts::default();
    for t in region.weeks.clone() {
        let off = t * plane;
        for p in 0..plane {
            if region.valid[p] == 1 {
                c.record(pred[off + p] != 0, gt[off + p] != 0);
            }
        }
    }
    c
}

/// Per-variable counts plus their micro average (counts pooled over
/// variables before scoring).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiVarCounts {
    pub per_var: Vec<Counts>,
    pub micro: Counts,
}

impl MultiVarCounts {
    pub fn from_per_var(per_var: Vec<Counts>) -> Self {
        let mut micro = Counts::default();
        for c in &per_var {
            micro.add(*c);
        }
        MultiVarCounts { per_var, micro }
    }
}

/// Scores per-variable driver predictions against the ground-truth masks.
pub fn evaluate_drivers(
    pred: &[BitGrid],
    gt: &[BitGrid],
    region: &Region,
) -> MultiVarCounts {
    debug_assert_eq!(pred.len(), gt.len());
    let per_var: Vec<Counts> =
        pred.iter().zip(gt).map(|(p, g)| count_bits(p, g, region)).collect();
    MultiVarCounts::from_per_var(per_var)
}

/// Scores extreme probability maps against the extreme mask, binarizing at
/// a strict `prob > threshold`.
pub fn evaluate_extremes(
    probs: &[f32],
    gt: &[u8],
    region: &Region,
    threshold: f32,
) -> Counts {
    debug_assert_eq!(probs.len(), gt.len());
    let plane = region.dims.plane();
    let mut c = Counts::default();
    for t in region.weeks.clone() {
        let off = t * plane;
        for p in 0..plane {
            if region.valid[p] == 1 {
                c.record(probs[off + p] > threshold, gt[off + p] != 0);
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_and_scores_from_a_known_grid() {
        // pred 1100, gt 1010 over four voxels: tp=1 fp=1 fn=1 tn=1.
        let dims = Dims3 { t: 1, lat: 2, lon: 2 };
        let valid = vec![1u8; 4];
        let mut pred = BitGrid::zeros(4);
        pred.set(0);
        pred.set(1);
        let mut gt = BitGrid::zeros(4);
        gt.set(0);
        gt.set(2);
        let c = count_bits(&pred, &gt, &Region::full(dims, &valid));
        assert_eq!(c, Counts { tp: 1, fp: 1, fneg: 1, tn: 1 });
        let s = c.scores();
        assert!((s.f1 - 50.0).abs() < 1e-12);
        assert!((s.iou - 100.0 / 3.0).abs() < 1e-12);
        assert!((s.oa - 50.0).abs() < 1e-12);
        assert!((s.precision - 50.0).abs() < 1e-12);
        assert!((s.recall - 50.0).abs() < 1e-12);
    }

    #[test]
    fn empty_denominators_score_zero() {
        let c = Counts { tp: 0, fp: 0, fneg: 0, tn: 10 };
        let s = c.scores();
        assert_eq!(s.f1, 0.0);
        assert_eq!(s.iou, 0.0);
        assert_eq!(s.recall, 0.0);
        assert_eq!(s.oa, 100.0);
        let c = Counts::default();
        assert_eq!(c.scores().oa, 0.0);
    }

    #[test]
    fn region_filters_weeks_and_invalid_pixels() {
        let dims = Dims3 { t: 3, lat: 1, lon: 2 };
        let valid = vec![1u8, 0u8];
        let mut pred = BitGrid::zeros(6);
        let mut gt = BitGrid::zeros(6);
        // t=0 agrees, t=1 disagrees, t=2 out of range; x=1 always invalid.
        pred.set(0);
        gt.set(0);
        pred.set(2);
        gt.set(5);
        pred.set(4);
        let c = count_bits(&pred, &gt, &Region::new(dims, &valid, 0..2));
        assert_eq!(c, Counts { tp: 1, fp: 1, fneg: 0, tn: 0 });
    }

    #[test]
    fn extreme_binarization_is_strictly_greater_than() {
        let dims = Dims3 { t: 1, lat: 2, lon: 3 };
        let valid = vec![1u8; 6];
        let region = Region::full(dims, &valid);
        // Exact probabilities reproduce the mask.
        let gt = vec![1u8, 0, 1, 0, 0, 1];
        let probs: Vec<f32> = gt.iter().map(|g| *g as f32).collect();
        let s = evaluate_extremes(&probs, &gt, &region, 0.5).scores();
        assert_eq!(s.f1, 100.0);
        // Probability exactly at the threshold stays negative.
        let at = vec![0.5f32; 6];
        let c = evaluate_extremes(&at, &gt, &region, 0.5);
        assert_eq!((c.tp, c.fp), (0, 0));
        assert_eq!(c.scores().f1, 0.0);
        // Hand-counted fixture: 3 TP, 1 FP, 1 FN.
        let probs = vec![0.9f32, 0.8, 0.2, 0.7, 0.1, 0.6];
        let gt = vec![1u8, 1, 1, 0, 0, 1];
        let s = evaluate_extremes(&probs, &gt, &region, 0.5).scores();
        assert!((s.f1 - 75.0).abs() < 1e-12);
    }

    #[test]
    fn micro_average_pools_counts() {
        let a = Counts { tp: 5, fp: 1, fneg: 2, tn: 10 };
        let b = Counts { tp: 0, fp: 3, fneg: 1, tn: 20 };
        let mv = MultiVarCounts::from_per_var(vec![a, b]);
        assert_eq!(mv.micro, Counts { tp: 5, fp: 4, fneg: 3, tn: 30 });
        assert_eq!(mv.per_var.len(), 2);
    }

    proptest! {
        /// F1 and IoU measure the same overlap: F1 = 2 IoU / (1 + IoU).
        #[test]
        fn f1_iou_identity(tp in 0u64..500, fp in 0u64..500, fneg in 0u64..500) {
            let c = Counts { tp, fp, fneg, tn: 7 };
            let s = c.scores();
            let iou = s.iou / 100.0;
            let f1_from_iou = 100.0 * (2.0 * iou) / (1.0 + iou);
            prop_assert!((s.f1 - f1_from_iou).abs() < 1e-9);
        }

        /// Counting bytes and counting bits agree on random masks.
        #[test]
        fn byte_and_bit_counting_agree(seed in 0u64..100) {
            let dims = Dims3 { t: 5, lat: 4, lon: 4 };
            let mut r = crate::rng::stream(seed, "noise", &[0]);
            use rand::Rng;
            let valid: Vec<u8> = (0..16).map(|_| r.gen_range(0..2u8)).collect();
            let pred_b: Vec<u8> = (0..80).map(|_| r.gen_range(0..2u8)).collect();
            let gt_b: Vec<u8> = (0..80).map(|_| r.gen_range(0..2u8)).collect();
            let to_bits = |bytes: &[u8]| {
                let mut g = BitGrid::zeros(bytes.len());
                for (i, &b) in bytes.iter().enumerate() {
                    g.assign(i, b != 0);
                }
                g
            };
            let region = Region::new(dims, &valid, 1..4);
            let cb = count_u8(&pred_b, &gt_b, &region);
            let cg = count_bits(&to_bits(&pred_b), &to_bits(&gt_b), &region);
            prop_assert_eq!(cb, cg);
        }
    }
}
