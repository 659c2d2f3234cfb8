//! Quantization-bottleneck mathematics: binary code assignment by the sign
//! of a scalar projection, the shared affine code map, and the loss terms
//! that shape the codes during training.
//!
//! Everything here is pure math over flat slices; the model module owns the
//! surrounding network and calls into these functions for both the forward
//! loss values and the pieces of the analytic backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to [CLAMP, 1 - CLAMP] before logarithms.
pub const CLAMP: f64 = 1e-7;

/// Loss weights. The driver term dominates by design; the diversity term
/// enters the total with a negative sign (it is maximized).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Lambdas {
    pub commit: f64,
    pub ent: f64,
    pub div: f64,
    pub driver: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas { commit: 3.0, ent: 0.1, div: 0.1, driver: 100.0 }
    }
}

/// One training step's loss parts plus their weighted total.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub extreme: f64,
    pub commit: f64,
    pub ent: f64,
    pub div: f64,
    pub driver: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// total = extreme + l_commit*commit + l_ent*ent - l_div*div
    ///       + l_driver*driver.
    pub fn combine(
        extreme: f64,
        commit: f64,
        ent: f64,
        div: f64,
        driver: f64,
        l: &Lambdas,
    ) -> LossBreakdown {
        LossBreakdown {
            extreme,
            commit,
            ent,
            div,
            driver,
            total: extreme + l.commit * commit + l.ent * ent - l.div * div + l.driver * driver,
        }
    }
}

/// Shared affine map from the sign value (+1/-1) back to K dimensions.
/// code(s)[k] = scale[k] * s + offset[k]; the two implicit codebook entries
/// are code(+1) and code(-1).
#[derive(Debug, Clone)]
pub struct AffineCodes<'a> {
    pub scale: &'a [f64],
    pub offset: &'a [f64],
}

impl<'a> AffineCodes<'a> {
    pub fn k(&self) -> usize {
        self.scale.len()
    }

    /// Code vector for the "driver" side (z_l > 0).
    pub fn code_one(&self) -> Vec<f64> {
        self.scale.iter().zip(self.offset).map(|(s, o)| s + o).collect()
    }

    /// Code vector for the "normal" side (z_l <= 0).
    pub fn code_zero(&self) -> Vec<f64> {
        self.scale.iter().zip(self.offset).map(|(s, o)| o - s).collect()
    }
}

/// Sign with the boundary assigned to the normal side: -1 when z_l <= 0.
#[inline]
pub fn lfq_sign(z_l: f64) -> f64 {
    if z_l > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Quantizes a scalar field to code vectors. `z_q` is laid out k-major:
/// z_q[k * n + i] = scale[k] * sign(z_l[i]) + offset[k]. `q[i]` is 1 iff
/// z_l[i] > 0. Exactly two distinct K-vectors can appear in z_q.
pub fn lfq_quantize(z_l: &[f64], codes: &AffineCodes, z_q: &mut [f64], q: &mut [u8]) {
    let n = z_l.len();
    debug_assert_eq!(z_q.len(), codes.k() * n);
    debug_assert_eq!(q.len(), n);
    for (qi, z) in q.iter_mut().zip(z_l) {
        *qi = (*z > 0.0) as u8;
    }
    for (k, (s, o)) in codes.scale.iter().zip(codes.offset).enumerate() {
        let plane = &mut z_q[k * n..(k + 1) * n];
        for (out, z) in plane.iter_mut().zip(z_l) {
            *out = s * lfq_sign(*z) + o;
        }
    }
}

/// Nearest codebook entry by squared Euclidean distance; ties break toward
/// the smaller index. Provided for the general lookup formulation that the
/// sign rule specializes.
pub fn vq_assign(z: &[f64], codebook: &[Vec<f64>]) -> Result<usize> {
    if codebook.is_empty() {
        return Err(Error::Config("vq_assign needs a non-empty codebook".into()));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, code) in codebook.iter().enumerate() {
        debug_assert_eq!(code.len(), z.len());
        let d: f64 = z.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

/// Class weights from batch relative frequencies: w_c = max(ln(1/sqrt(f_c)),
/// 0.5), indexed [negative, positive]. A class absent from the batch gets
/// weight 1.0 (it never multiplies anything).
pub fn class_weights(gt: &[u8], valid: &[u8]) -> [f64; 2] {
    debug_assert_eq!(gt.len(), valid.len());
    let mut counts = [0u64; 2];
    for (g, s) in gt.iter().zip(valid) {
        if *s != 0 {
            counts[(*g != 0) as usize] += 1;
        }
    }
    let total = (counts[0] + counts[1]) as f64;
    let mut w = [1.0; 2];
    for c in 0..2 {
        if counts[c] > 0 {
            let f = counts[c] as f64 / total;
            w[c] = (-0.5 * f.ln()).max(0.5);
        }
    }
    w
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(CLAMP, 1.0 - CLAMP)
}

/// Class-weighted binary cross-entropy summed over prediction heads, each
/// masked by `valid` and normalized by the count of valid pixels.
pub fn loss_extreme(preds: &[&[f64]], gt: &[u8], valid: &[u8], weights: [f64; 2]) -> Result<f64> {
    let n_valid = valid.iter().filter(|s| **s != 0).count();
    if n_valid == 0 {
        return Err(Error::Shape("extreme loss over an all-invalid mask".into()));
    }
    let mut total = 0.0;
    for head in preds {
        debug_assert_eq!(head.len(), gt.len());
        let mut acc = 0.0;
        for ((p, g), s) in head.iter().zip(gt).zip(valid) {
            if *s == 0 {
                continue;
            }
            let p = clamp_p(*p);
            acc += if *g != 0 { -weights[1] * p.ln() } else { -weights[0] * (1.0 - p).ln() };
        }
        total += acc / n_valid as f64;
    }
    Ok(total)
}

fn entropy(p: f64) -> f64 {
    let p = clamp_p(p);
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}

/// Soft code probability for the entropy terms: the sign distribution is
/// degenerate, so p = logistic(2 z_l) stands in for it (consistent with the
/// sign at its limits).
#[inline]
pub fn soft_prob(z_l: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * z_l).exp())
}

/// Commitment, per-element entropy, and batch-diversity terms of the
/// quantizer regularizer. commit treats sign(z_l) as a constant.
pub fn loss_quantize(z_l: &[f64]) -> (f64, f64, f64) {
    if z_l.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = z_l.len() as f64;
    let mut commit = 0.0;
    let mut ent = 0.0;
    let mut mean_p = 0.0;
    for z in z_l {
        let d = z - lfq_sign(*z);
        commit += d * d;
        let p = soft_prob(*z);
        ent += entropy(p);
        mean_p += p;
    }
    (commit / n, ent / n, entropy(mean_p / n))
}

/// Gradient of (commit + l_ent/l_commit-weighted entropy terms) w.r.t. z_l,
/// folded with the caller's weights: adds
/// l_commit * dcommit + l_ent * dent - l_div * ddiv into `d_zl`.
pub fn loss_quantize_backward(z_l: &[f64], l: &Lambdas, d_zl: &mut [f64]) {
    if z_l.is_empty() {
        return;
    }
    let n = z_l.len() as f64;
    let mean_p: f64 = z_l.iter().map(|z| soft_prob(*z)).sum::<f64>() / n;
    // dH(p)/dp = ln((1-p)/p); dp/dz = 2 p (1-p).
    let ddiv_dmean = ((1.0 - clamp_p(mean_p)) / clamp_p(mean_p)).ln();
    for (d, z) in d_zl.iter_mut().zip(z_l) {
        let p = soft_prob(*z);
        let dp_dz = 2.0 * p * (1.0 - p);
        let dent = ((1.0 - clamp_p(p)) / clamp_p(p)).ln() * dp_dz / n;
        let dcommit = 2.0 * (z - lfq_sign(*z)) / n;
        let ddiv = ddiv_dmean * dp_dz / n;
        *d += l.commit * dcommit + l.ent * dent - l.div * ddiv;
    }
}

/// L1 distance between each code vector and the normal code (stop-gradient),
/// averaged over voxels where (1 - extreme-union) * valid is 1. `z_q` is
/// k-major over `n` voxels; `mask[i]` selects contributing voxels.
pub fn loss_driver(z_q: &[f64], k: usize, mask: &[u8], code_zero: &[f64]) -> f64 {
    let n = mask.len();
    debug_assert_eq!(z_q.len(), k * n);
    let count = mask.iter().filter(|m| **m != 0).count();
    if count == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (kk, c0) in code_zero.iter().enumerate() {
        let plane = &z_q[kk * n..(kk + 1) * n];
        for (z, m) in plane.iter().zip(mask) {
            if *m != 0 {
                acc += (z - c0).abs();
            }
        }
    }
    acc / count as f64
}

/// Adds d(driver)/d(z_q) into the k-major gradient buffer, scaled by
/// `weight` (the caller passes l_driver / voxel count handling included
/// here: the mean's denominator is the masked count).
pub fn loss_driver_backward(
    z_q: &[f64],
    k: usize,
    mask: &[u8],
    code_zero: &[f64],
    weight: f64,
    d_zq: &mut [f64],
) {
    let n = mask.len();
    debug_assert_eq!(z_q.len(), k * n);
    let count = mask.iter().filter(|m| **m != 0).count();
    if count == 0 {
        return;
    }
    let scale = weight / count as f64;
    for (kk, c0) in code_zero.iter().enumerate() {
        let plane = &z_q[kk * n..(kk + 1) * n];
        let d_plane = &mut d_zq[kk * n..(kk + 1) * n];
        for ((z, m), d) in plane.iter().zip(mask).zip(d_plane.iter_mut()) {
            if *m != 0 && *z != *c0 {
                *d += scale * (z - c0).signum();
            }
        }
    }
}
