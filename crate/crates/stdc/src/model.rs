//! Compact end-to-end detection model: per-variable feature extraction, a
//! binary quantization bottleneck, and V+1 extreme-prediction heads with an
//! Adam trainer. All gradients are hand-written; the straight-through rule
//! for the sign nonlinearity is isolated in one place so an exact mode can
//! serve finite-difference checks.
//!
//! Architecture per variable (K channels, window of T steps):
//!   values -> conv(3,1,1) tanh -> conv(1,3,3) tanh   per-variable extractor
//!          -> conv(3,1,1) tanh -> conv(1,3,3)        projection to scalar z_l
//!          -> sign quantization -> shared affine code z_q
//! Head v < V reads variable v's codes only; head V reads the codes
//! mean-pooled over variables. Each head is a conv(T,3,3) collapsing the
//! window to one probability plane at its last step.

use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cube::{deseasonalize, Climatology, DataCube};
use crate::error::{Error, Result};
use crate::grid::{BitGrid, Dims};
use crate::lfq::{self, AffineCodes, Lambdas, LossBreakdown};
use crate::nn::{self, Adam, ConvSpec, Vol};
use crate::rng;

/// Shape hyperparameters fixed at initialization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelCfg {
    pub vars: usize,
    pub k: usize,
    pub t_window: usize,
}

impl ModelCfg {
    pub fn new(vars: usize) -> ModelCfg {
        ModelCfg { vars, k: 8, t_window: 6 }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyper {
    pub steps: usize,
    pub lr: f64,
    /// Fraction of steps spent in linear learning-rate warmup.
    pub warmup_frac: f64,
    /// Spatial tile side of each sampled batch window.
    pub tile: usize,
    pub batch: usize,
    pub seed: u64,
    pub lambdas: Lambdas,
    /// Fraction of steps before the driver penalty starts to ramp; it then
    /// rises linearly, reaching full weight halfway through the remaining
    /// steps and holding there. The code field needs the prediction heads
    /// to organize it before the penalty starts pruning; a penalty at full
    /// strength from step one flattens the codes before that happens.
    pub driver_ramp_frac: f64,
    /// Fraction of the driver weight applied from step one, before the ramp
    /// takes over. Without this anchor the sign convention of each
    /// variable's codes is a coin flip: runs that settle on inverted codes
    /// (anomaly voxels at the normal code, normal voxels away from it) cost
    /// the later pruning phase most of its budget to unwind.
    pub driver_floor: f64,
    /// Every this many steps through 85% of training (0 disables), any
    /// variable whose recent batches quantized the majority of masked
    /// voxels to the anomaly code gets its scalar projection negated. The
    /// negation preserves the variable's own extreme-prediction output away
    /// from tile borders, so only the convention changes, not the learned
    /// structure. Early training settles each variable into an arbitrary
    /// sign convention, and the driver penalty cannot flip a field once it
    /// has organized; this repairs the convention instead of fighting it.
    pub fix_every: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            steps: 1500,
            lr: 2e-3,
            warmup_frac: 0.05,
            tile: 32,
            batch: 1,
            seed: 0,
            lambdas: Lambdas::default(),
            driver_ramp_frac: 0.5,
            driver_floor: 0.05,
            fix_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    start: usize,
    len: usize,
}

impl Slot {
    fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.start..self.start + self.len]
    }

    fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.start..self.start + self.len]
    }
}

/// Offsets of every tensor inside the flat parameter vector. Per-variable
/// tensors come first (contiguous block per variable), then the V+1 heads,
/// then the shared affine code map.
#[derive(Debug, Clone)]
struct Layout {
    var_slots: Vec<[Slot; 8]>,
    head_slots: Vec<[Slot; 2]>,
    scale: Slot,
    offset: Slot,
    len: usize,
}

/// The four per-variable stages and the head, derived from (K, T).
fn stage_specs(k: usize) -> [ConvSpec; 4] {
    [
        ConvSpec::same(1, k, 3, 1, 1),
        ConvSpec::same(k, k, 1, 3, 3),
        ConvSpec::same(k, k, 3, 1, 1),
        ConvSpec::same(k, 1, 1, 3, 3),
    ]
}

fn head_spec(k: usize, t: usize) -> ConvSpec {
    ConvSpec::time_valid(k, 1, t, 3, 3)
}

impl Layout {
    fn new(cfg: &ModelCfg) -> Layout {
        let mut n = 0usize;
        let mut take = |len: usize| {
            let s = Slot { start: n, len };
            n += len;
            s
        };
        let specs = stage_specs(cfg.k);
        let var_slots = (0..cfg.vars)
            .map(|_| {
                let mut slots = [Slot { start: 0, len: 0 }; 8];
                for (i, spec) in specs.iter().enumerate() {
                    slots[2 * i] = take(spec.weight_len());
                    slots[2 * i + 1] = take(spec.cout);
                }
                slots
            })
            .collect();
        let hs = head_spec(cfg.k, cfg.t_window);
        let head_slots = (0..=cfg.vars)
            .map(|_| [take(hs.weight_len()), take(hs.cout)])
            .collect();
        let scale = take(cfg.k);
        let offset = take(cfg.k);
        Layout { var_slots, head_slots, scale, offset, len: n }
    }
}

/// The model: configuration plus one flat parameter vector.
#[derive(Debug, Clone)]
pub struct MicroModel {
    pub cfg: ModelCfg,
    pub params: Vec<f64>,
    layout: Layout,
}

/// Cached activations of one window forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    th: usize,
    tw: usize,
    h1: Vec<Vec<f64>>,
    h2: Vec<Vec<f64>>,
    h3: Vec<Vec<f64>>,
    pub z_l: Vec<Vec<f64>>,
    pub z_q: Vec<Vec<f64>>,
    pub q: Vec<Vec<u8>>,
    pub mv: Vec<f64>,
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

/// How gradients cross the sign nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Sign path contributes zero (its true local derivative); used by
    /// finite-difference checks.
    Exact,
    /// Straight-through identity; used for training.
    StraightThrough,
}

/// Ground-truth planes of one sampled window (all tile-sized).
pub struct StepMasks<'a> {
    /// Extremes at the window's last step.
    pub gt: &'a [u8],
    pub valid: &'a [u8],
    /// (1 - union of extremes over the window) AND valid; the region where
    /// non-normal codes are penalized.
    pub driver_mask: &'a [u8],
}

/// Per-step history and wall time of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<LossBreakdown>,
    pub wall_secs: f64,
    /// Validation scores, filled by the caller after training if a
    /// validation split is available.
    pub final_driver_f1: Option<f64>,
    pub final_extreme_f1: Option<f64>,
}

/// Deseasonalized values plus the supervision masks the trainer may see.
/// Driver masks are deliberately absent: training is supervised by extremes
/// only.
pub struct ModelData {
    pub dims: Dims,
    /// Deseasonalized values clipped to +/- DZ_CLIP standard deviations,
    /// zero at invalid pixels, (v,t,lat,lon). The clip keeps extreme
    /// anomalies from saturating the tanh stack: a saturated voxel has no
    /// gradient, so its code sign would be frozen at whatever the
    /// initialization happened to produce.
    pub dz: Vec<f32>,
    /// Extreme mask (t,lat,lon).
    pub extremes: Vec<u8>,
    pub valid: Vec<u8>,
}

/// Input clip bound in climatology standard deviations.
const DZ_CLIP: f32 = 8.0;

impl ModelData {
    pub fn prepare(
        cube: &DataCube,
        extremes: &[u8],
        clim: &Climatology,
    ) -> Result<ModelData> {
        if extremes.len() != cube.dims.per_var() {
            return Err(Error::Shape("extreme mask does not match cube".into()));
        }
        let mut dz = deseasonalize(cube, clim)?;
        for v in dz.values.iter_mut() {
            *v = v.clamp(-DZ_CLIP, DZ_CLIP);
        }
        Ok(ModelData {
            dims: cube.dims,
            dz: dz.values,
            extremes: extremes.to_vec(),
            valid: cube.valid.clone(),
        })
    }
}

/// Driver bits and extreme probabilities over a time range.
pub struct Inference {
    pub drivers: Vec<BitGrid>,
    /// (t,lat,lon), zero outside the inferred range.
    pub extreme_probs: Vec<f32>,
}

impl MicroModel {
    pub fn init(cfg: ModelCfg, seed: u64) -> MicroModel {
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.len];
        let specs = stage_specs(cfg.k);
        let mut tensor = 0u64;
        let draw = |slot: Slot, fan_in: usize, fan_out: usize, p: &mut [f64], t: &mut u64| {
            nn::glorot(&mut rng::stream(seed, "model-init", &[*t]), fan_in, fan_out, slot.of_mut(p));
            *t += 1;
        };
        for v in 0..cfg.vars {
            for (i, spec) in specs.iter().enumerate() {
                let (fi, fo) = spec.fans();
                draw(layout.var_slots[v][2 * i], fi, fo, &mut params, &mut tensor);
            }
        }
        let hs = head_spec(cfg.k, cfg.t_window);
        let (fi, fo) = hs.fans();
        for h in 0..=cfg.vars {
            draw(layout.head_slots[h][0], fi, fo, &mut params, &mut tensor);
        }
        // The affine code map: nonzero scale so the two codes differ from
        // the start; offsets and all biases stay zero.
        draw(layout.scale, 1, cfg.k, &mut params, &mut tensor);
        MicroModel { cfg, params, layout }
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    fn codes(&self) -> AffineCodes<'_> {
        AffineCodes {
            scale: self.layout.scale.of(&self.params),
            offset: self.layout.offset.of(&self.params),
        }
    }

    /// L1 separation of the two code vectors: |code_one - code_zero|_1.
    pub fn code_distance(&self) -> f64 {
        self.layout.scale.of(&self.params).iter().map(|s| 2.0 * s.abs()).sum()
    }

    /// Negates variable `v`'s scalar projection so its code assignment
    /// swaps, compensating the variable's own head so its output is
    /// unchanged away from tile borders. With codes q = offset + scale * s,
    /// negating s maps q to 2 * offset - q; negating the head weights and
    /// shifting its bias by twice the weight-offset contraction restores the
    /// original logits wherever every tap lands inside the tile. Returns the
    /// negated parameter ranges so the optimizer can flip moment history.
    fn flip_convention(&mut self, v: usize) -> [Range<usize>; 3] {
        let s = &self.layout.var_slots[v];
        let [hw, hb] = self.layout.head_slots[v];
        let offset = self.layout.offset.of(&self.params).to_vec();
        let k = self.cfg.k;
        let taps = hw.len / k;

        let mut shift = 0.0;
        for (ci, off) in offset.iter().enumerate() {
            let block = &self.params[hw.start + ci * taps..hw.start + (ci + 1) * taps];
            shift += 2.0 * off * block.iter().sum::<f64>();
        }
        self.params[hb.start] += shift;
        for w in self.layout.head_slots[v][0].of_mut(&mut self.params) {
            *w = -*w;
        }
        for w in s[6].of_mut(&mut self.params) {
            *w = -*w;
        }
        for b in s[7].of_mut(&mut self.params) {
            *b = -*b;
        }
        [
            s[6].start..s[6].start + s[6].len,
            s[7].start..s[7].start + s[7].len,
            hw.start..hw.start + hw.len,
        ]
    }

    /// One window forward pass. `window` holds (V, T, th, tw) deseasonalized
    /// values; invalid pixels must already be zero.
    pub fn forward(&self, window: &[f64], th: usize, tw: usize) -> Forward {
        let (v_count, k, t) = (self.cfg.vars, self.cfg.k, self.cfg.t_window);
        let n = t * th * tw;
        debug_assert_eq!(window.len(), v_count * n);
        let vol_in = Vol { c: 1, t, h: th, w: tw };
        let vol_k = Vol { c: k, t, h: th, w: tw };
        let specs = stage_specs(k);
        let codes = self.codes();

        let mut fwd = Forward {
            th,
            tw,
            h1: Vec::with_capacity(v_count),
            h2: Vec::with_capacity(v_count),
            h3: Vec::with_capacity(v_count),
            z_l: Vec::with_capacity(v_count),
            z_q: Vec::with_capacity(v_count),
            q: Vec::with_capacity(v_count),
            mv: vec![0.0; k * n],
            logits: Vec::with_capacity(v_count + 1),
            probs: Vec::with_capacity(v_count + 1),
        };
        for v in 0..v_count {
            let x = &window[v * n..(v + 1) * n];
            let s = &self.layout.var_slots[v];
            let mut h1 = vec![0.0; k * n];
            nn::conv3d_forward(&specs[0], x, vol_in, s[0].of(&self.params), s[1].of(&self.params), &mut h1);
            nn::tanh_forward(&mut h1);
            let mut h2 = vec![0.0; k * n];
            nn::conv3d_forward(&specs[1], &h1, vol_k, s[2].of(&self.params), s[3].of(&self.params), &mut h2);
            nn::tanh_forward(&mut h2);
            let mut h3 = vec![0.0; k * n];
            nn::conv3d_forward(&specs[2], &h2, vol_k, s[4].of(&self.params), s[5].of(&self.params), &mut h3);
            nn::tanh_forward(&mut h3);
            let mut z_l = vec![0.0; n];
            nn::conv3d_forward(&specs[3], &h3, vol_k, s[6].of(&self.params), s[7].of(&self.params), &mut z_l);
            let mut z_q = vec![0.0; k * n];
            let mut q = vec![0u8; n];
            lfq::lfq_quantize(&z_l, &codes, &mut z_q, &mut q);
            for (m, z) in fwd.mv.iter_mut().zip(&z_q) {
                *m += z / v_count as f64;
            }
            fwd.h1.push(h1);
            fwd.h2.push(h2);
            fwd.h3.push(h3);
            fwd.z_l.push(z_l);
            fwd.z_q.push(z_q);
            fwd.q.push(q);
        }
        let hs = head_spec(k, t);
        for h in 0..=v_count {
            let input = if h < v_count { &fwd.z_q[h] } else { &fwd.mv };
            let hslot = &self.layout.head_slots[h];
            let mut logit = vec![0.0; th * tw];
            nn::conv3d_forward(&hs, input, vol_k, hslot[0].of(&self.params), hslot[1].of(&self.params), &mut logit);
            let probs = logit.iter().map(|l| nn::sigmoid(*l)).collect();
            fwd.logits.push(logit);
            fwd.probs.push(probs);
        }
        fwd
    }

    /// Loss parts of one forward pass against the window's ground truth.
    /// The driver penalty is measured against the model's current normal
    /// code.
    pub fn losses(&self, fwd: &Forward, masks: &StepMasks, l: &Lambdas) -> Result<LossBreakdown> {
        self.losses_with_reference(fwd, masks, l, &self.codes().code_zero())
    }

    /// Like `losses`, but the driver penalty compares codes against the
    /// given `normal_code`. The backward pass treats the normal code as a
    /// stopped constant, so finite-difference checks must evaluate this
    /// variant with the reference frozen at the unperturbed model's code.
    pub fn losses_with_reference(
        &self,
        fwd: &Forward,
        masks: &StepMasks,
        l: &Lambdas,
        normal_code: &[f64],
    ) -> Result<LossBreakdown> {
        let weights = lfq::class_weights(masks.gt, masks.valid);
        let preds: Vec<&[f64]> = fwd.probs.iter().map(|p| p.as_slice()).collect();
        let extreme = lfq::loss_extreme(&preds, masks.gt, masks.valid, weights)?;
        let zl_all = self.concat_zl(fwd);
        let (commit, ent, div) = lfq::loss_quantize(&zl_all);
        let voxel_mask = tile_over_time(masks.driver_mask, self.cfg.t_window);
        let driver = fwd
            .z_q
            .iter()
            .map(|zq| lfq::loss_driver(zq, self.cfg.k, &voxel_mask, normal_code))
            .sum::<f64>()
            / self.cfg.vars as f64;
        Ok(LossBreakdown::combine(extreme, commit, ent, div, driver, l))
    }

    fn concat_zl(&self, fwd: &Forward) -> Vec<f64> {
        let mut all = Vec::with_capacity(self.cfg.vars * fwd.z_l[0].len());
        for z in &fwd.z_l {
            all.extend_from_slice(z);
        }
        all
    }

    /// Accumulates d(total)/d(params) into `d_params`.
    pub fn backward(
        &self,
        window: &[f64],
        fwd: &Forward,
        masks: &StepMasks,
        l: &Lambdas,
        mode: GradMode,
        d_params: &mut [f64],
    ) {
        let (v_count, k, t) = (self.cfg.vars, self.cfg.k, self.cfg.t_window);
        let (th, tw) = (fwd.th, fwd.tw);
        let n = t * th * tw;
        let plane = th * tw;
        let vol_in = Vol { c: 1, t, h: th, w: tw };
        let vol_k = Vol { c: k, t, h: th, w: tw };
        let specs = stage_specs(k);
        let hs = head_spec(k, t);
        let weights = lfq::class_weights(masks.gt, masks.valid);
        let n_valid = masks.valid.iter().filter(|s| **s != 0).count() as f64;

        // Heads: d(extreme)/d(logit) = w_class * (p - y) / |S| at valid
        // pixels, then back through each head conv into its code field.
        let mut d_zq: Vec<Vec<f64>> = (0..v_count).map(|_| vec![0.0; k * n]).collect();
        let mut d_mv = vec![0.0; k * n];
        for h in 0..=v_count {
            let mut d_logit = vec![0.0; plane];
            for p in 0..plane {
                if masks.valid[p] == 0 {
                    continue;
                }
                let y = (masks.gt[p] != 0) as usize;
                d_logit[p] = weights[y] * (fwd.probs[h][p] - y as f64) / n_valid;
            }
            let (input, d_input) = if h < v_count {
                (&fwd.z_q[h], &mut d_zq[h])
            } else {
                (&fwd.mv, &mut d_mv)
            };
            let hslot = &self.layout.head_slots[h];
            let (dw, db) = split_two(d_params, &hslot[0], &hslot[1]);
            nn::conv3d_backward(&hs, input, vol_k, hslot[0].of(&self.params), &d_logit, d_input, dw, db);
        }
        // Mean pool: every variable receives an equal share.
        for dz in &mut d_zq {
            for (d, m) in dz.iter_mut().zip(&d_mv) {
                *d += m / v_count as f64;
            }
        }
        // Driver loss adds its subgradient on the code field.
        let voxel_mask = tile_over_time(masks.driver_mask, t);
        let code_zero = self.codes().code_zero();
        for zv in 0..v_count {
            lfq::loss_driver_backward(
                &fwd.z_q[zv],
                k,
                &voxel_mask,
                &code_zero,
                l.driver / v_count as f64,
                &mut d_zq[zv],
            );
        }

        // Affine map backward plus the sign crossing, then the quantizer
        // regularizers directly on z_l.
        let zl_all = self.concat_zl(fwd);
        let mut d_zl_all = vec![0.0; v_count * n];
        let scale = self.layout.scale.of(&self.params).to_vec();
        for v in 0..v_count {
            let d_zl = &mut d_zl_all[v * n..(v + 1) * n];
            affine_code_backward(
                &d_zq[v],
                &fwd.z_l[v],
                &scale,
                mode,
                self.layout.scale.of_mut(d_params),
                d_zl,
            );
        }
        // Offsets accumulate the raw code gradients; done in one pass so the
        // slot borrow does not overlap the scale slot above.
        {
            let d_offset = self.layout.offset.of_mut(d_params);
            for dzq in &d_zq {
                for (kk, d_off) in d_offset.iter_mut().enumerate() {
                    *d_off += dzq[kk * n..(kk + 1) * n].iter().sum::<f64>();
                }
            }
        }
        lfq::loss_quantize_backward(&zl_all, l, &mut d_zl_all);

        // Projection and extractor stacks, deepest first.
        for v in 0..v_count {
            let x = &window[v * n..(v + 1) * n];
            let s = &self.layout.var_slots[v];
            let d_zl = &d_zl_all[v * n..(v + 1) * n];
            let mut d_h3 = vec![0.0; k * n];
            {
                let (dw, db) = split_two(d_params, &s[6], &s[7]);
                nn::conv3d_backward(&specs[3], &fwd.h3[v], vol_k, s[6].of(&self.params), d_zl, &mut d_h3, dw, db);
            }
            nn::tanh_backward(&fwd.h3[v], &mut d_h3);
            let mut d_h2 = vec![0.0; k * n];
            {
                let (dw, db) = split_two(d_params, &s[4], &s[5]);
                nn::conv3d_backward(&specs[2], &fwd.h2[v], vol_k, s[4].of(&self.params), &d_h3, &mut d_h2, dw, db);
            }
            nn::tanh_backward(&fwd.h2[v], &mut d_h2);
            let mut d_h1 = vec![0.0; k * n];
            {
                let (dw, db) = split_two(d_params, &s[2], &s[3]);
                nn::conv3d_backward(&specs[1], &fwd.h1[v], vol_k, s[2].of(&self.params), &d_h2, &mut d_h1, dw, db);
            }
            nn::tanh_backward(&fwd.h1[v], &mut d_h1);
            let mut d_x = vec![0.0; n];
            {
                let (dw, db) = split_two(d_params, &s[0], &s[1]);
                nn::conv3d_backward(&specs[0], x, vol_in, s[0].of(&self.params), &d_h1, &mut d_x, dw, db);
            }
        }
    }

    /// Adam training over randomly sampled (time-window, spatial tile)
    /// batches. Supervision comes from extreme masks only.
    pub fn train(
        &mut self,
        data: &ModelData,
        train_weeks: Range<usize>,
        hyper: &Hyper,
    ) -> Result<TrainReport> {
        let start = Instant::now();
        let dims = data.dims;
        let t_win = self.cfg.t_window;
        if dims.vars != self.cfg.vars {
            return Err(Error::Shape(format!(
                "model expects {} variables, data has {}",
                self.cfg.vars, dims.vars
            )));
        }
        let lo = train_weeks.start.max(t_win - 1);
        if lo >= train_weeks.end {
            return Err(Error::Config("training range shorter than the model window".into()));
        }
        let th = hyper.tile.min(dims.lat);
        let tw = hyper.tile.min(dims.lon);
        let mut adam = Adam::new(self.params.len());
        let warmup = ((hyper.steps as f64 * hyper.warmup_frac).round() as usize).max(1);
        let mut history = Vec::with_capacity(hyper.steps);
        let mut window = vec![0.0f64; dims.vars * t_win * th * tw];
        let mut grads = vec![0.0f64; self.params.len()];

        let ramp_start = (hyper.steps as f64 * hyper.driver_ramp_frac).round() as usize;
        let ramp_len = ((hyper.steps - ramp_start.min(hyper.steps)) / 2).max(1) as f64;
        let mut sign_sum = vec![0.0f64; dims.vars];
        let mut sign_n = vec![0u64; dims.vars];

        for step in 0..hyper.steps {
            if hyper.fix_every > 0
                && step > 0
                && step % hyper.fix_every == 0
                && step * 20 <= hyper.steps * 17
            {
                for v in 0..dims.vars {
                    if sign_n[v] > 0 && sign_sum[v] > 0.0 {
                        for range in self.flip_convention(v) {
                            adam.negate_first_moment(range);
                        }
                    }
                    sign_sum[v] = 0.0;
                    sign_n[v] = 0;
                }
            }
            grads.iter_mut().for_each(|g| *g = 0.0);
            let ramp = if step < ramp_start {
                0.0
            } else {
                (((step - ramp_start) as f64 + 1.0) / ramp_len).min(1.0)
            };
            let band = ramp.max(hyper.driver_floor.clamp(0.0, 1.0));
            let lambdas = Lambdas { driver: hyper.lambdas.driver * band, ..hyper.lambdas };
            let mut acc = LossBreakdown::default();
            for b in 0..hyper.batch {
                let mut r = rng::stream(hyper.seed, "batch", &[step as u64, b as u64]);
                use rand::Rng;
                let t_end = r.gen_range(lo..train_weeks.end);
                let y0 = r.gen_range(0..=dims.lat - th);
                let x0 = r.gen_range(0..=dims.lon - tw);
                let (gt, valid, driver_mask) =
                    extract_masks(data, t_end, t_win, y0, x0, th, tw);
                extract_window(data, t_end, t_win, y0, x0, th, tw, &mut window);
                let fwd = self.forward(&window, th, tw);
                if hyper.fix_every > 0 {
                    let plane = th * tw;
                    for (v, zl) in fwd.z_l.iter().enumerate() {
                        for (j, z) in zl.iter().enumerate() {
                            if driver_mask[j % plane] == 1 {
                                sign_sum[v] += lfq::lfq_sign(*z);
                                sign_n[v] += 1;
                            }
                        }
                    }
                }
                let masks = StepMasks { gt: &gt, valid: &valid, driver_mask: &driver_mask };
                let part = self.losses(&fwd, &masks, &lambdas)?;
                self.backward(&window, &fwd, &masks, &lambdas, GradMode::StraightThrough, &mut grads);
                acc.extreme += part.extreme;
                acc.commit += part.commit;
                acc.ent += part.ent;
                acc.div += part.div;
                acc.driver += part.driver;
                acc.total += part.total;
            }
            let inv = 1.0 / hyper.batch as f64;
            for g in grads.iter_mut() {
                *g *= inv;
            }
            let loss = LossBreakdown {
                extreme: acc.extreme * inv,
                commit: acc.commit * inv,
                ent: acc.ent * inv,
                div: acc.div * inv,
                driver: acc.driver * inv,
                total: acc.total * inv,
            };
            if !loss.total.is_finite() {
                return Err(Error::Diverged(format!("loss is not finite at step {step}")));
            }
            let lr = hyper.lr * ((step + 1) as f64 / warmup as f64).min(1.0);
            adam.step(&mut self.params, &grads, lr);
            if self.code_distance() <= 0.0 {
                return Err(Error::Diverged(format!("codes collapsed at step {step}")));
            }
            history.push(loss);
        }
        Ok(TrainReport {
            history,
            wall_secs: start.elapsed().as_secs_f64(),
            final_driver_f1: None,
            final_extreme_f1: None,
        })
    }

    /// Sliding-window inference over a time range: the prediction at step t
    /// comes from the window ending at t. Windows reaching before the series
    /// start are zero-padded on the left.
    pub fn infer(&self, data: &ModelData, weeks: Range<usize>) -> Result<Inference> {
        let dims = data.dims;
        if dims.vars != self.cfg.vars {
            return Err(Error::Shape(format!(
                "model expects {} variables, data has {}",
                self.cfg.vars, dims.vars
            )));
        }
        if dims.t < self.cfg.t_window {
            return Err(Error::Shape("series shorter than the model window".into()));
        }
        let plane = dims.plane();
        let t_win = self.cfg.t_window;
        let per_step: Vec<(usize, Vec<Vec<u8>>, Vec<f64>)> = weeks
            .clone()
            .into_par_iter()
            .map(|t| {
                let mut window = vec![0.0f64; dims.vars * t_win * plane];
                extract_window(data, t, t_win, 0, 0, dims.lat, dims.lon, &mut window);
                let fwd = self.forward(&window, dims.lat, dims.lon);
                let last = (t_win - 1) * plane;
                let q_planes: Vec<Vec<u8>> =
                    fwd.q.iter().map(|q| q[last..last + plane].to_vec()).collect();
                (t, q_planes, fwd.probs[dims.vars].clone())
            })
            .collect();
        let mut drivers = vec![BitGrid::zeros(dims.per_var()); dims.vars];
        let mut extreme_probs = vec![0.0f32; dims.per_var()];
        for (t, q_planes, probs) in per_step {
            let off = t * plane;
            for (v, qp) in q_planes.iter().enumerate() {
                for (p, q) in qp.iter().enumerate() {
                    if *q != 0 && data.valid[p] == 1 {
                        drivers[v].set(off + p);
                    }
                }
            }
            for (p, pr) in probs.iter().enumerate() {
                if data.valid[p] == 1 {
                    extreme_probs[off + p] = *pr as f32;
                }
            }
        }
        Ok(Inference { drivers, extreme_probs })
    }

    /// Writes the checkpoint container: model shape + caller metadata in the
    /// header, parameters as one f64 section.
    pub fn save_checkpoint(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = json!({
            "model": { "vars": self.cfg.vars, "k": self.cfg.k, "t_window": self.cfg.t_window },
            "extra": extra,
        });
        let sections = [(
            "params".to_string(),
            vec![self.params.len() as u64],
            self.params.as_slice(),
        )];
        crate::store::write_checkpoint(path, meta, &sections)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(MicroModel, serde_json::Value)> {
        let (meta, mut sections) = crate::store::read_checkpoint(path)?;
        let m = &meta["model"];
        let cfg = ModelCfg {
            vars: m["vars"].as_u64().ok_or_else(|| Error::Corrupt("missing model.vars".into()))?
                as usize,
            k: m["k"].as_u64().ok_or_else(|| Error::Corrupt("missing model.k".into()))? as usize,
            t_window: m["t_window"]
                .as_u64()
                .ok_or_else(|| Error::Corrupt("missing model.t_window".into()))?
                as usize,
        };
        let layout = Layout::new(&cfg);
        let params = sections
            .iter_mut()
            .find(|(name, _, _)| name == "params")
            .map(|(_, _, vals)| std::mem::take(vals))
            .ok_or_else(|| Error::Corrupt("checkpoint has no params section".into()))?;
        if params.len() != layout.len {
            return Err(Error::Corrupt(format!(
                "checkpoint has {} parameters, model shape needs {}",
                params.len(),
                layout.len
            )));
        }
        Ok((MicroModel { cfg, params, layout }, meta["extra"].clone()))
    }
}

/// Repeats a (th*tw) plane mask across t steps into a (t,th,tw) voxel mask.
fn tile_over_time(mask: &[u8], t: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(t * mask.len());
    for _ in 0..t {
        out.extend_from_slice(mask);
    }
    out
}

/// Gradient of the affine code map, including the sign crossing.
/// d_scale[k] += sum_i d_zq[k,i] * sign_i; (offset handled by the caller);
/// with the straight-through rule d_zl[i] += sum_k d_zq[k,i] * scale[k].
fn affine_code_backward(
    d_zq: &[f64],
    z_l: &[f64],
    scale: &[f64],
    mode: GradMode,
    d_scale: &mut [f64],
    d_zl: &mut [f64],
) {
    let n = z_l.len();
    for (kk, d_s) in d_scale.iter_mut().enumerate() {
        let plane = &d_zq[kk * n..(kk + 1) * n];
        let mut acc = 0.0;
        for (d, z) in plane.iter().zip(z_l) {
            acc += d * lfq::lfq_sign(*z);
        }
        *d_s += acc;
    }
    if mode == GradMode::StraightThrough {
        for (i, d) in d_zl.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (kk, s) in scale.iter().enumerate() {
                acc += d_zq[kk * n + i] * s;
            }
            *d += acc;
        }
    }
}

fn split_two<'a>(buf: &'a mut [f64], a: &Slot, b: &Slot) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(a.start + a.len, b.start, "slots must be adjacent");
    let (_, rest) = buf.split_at_mut(a.start);
    let (wa, rest) = rest.split_at_mut(a.len);
    (wa, &mut rest[..b.len])
}

/// Copies the (V, T, th, tw) window ending at `t_end` out of the full cube,
/// zero-padding steps before the series start.
#[allow(clippy::too_many_arguments)]
fn extract_window(
    data: &ModelData,
    t_end: usize,
    t_win: usize,
    y0: usize,
    x0: usize,
    th: usize,
    tw: usize,
    out: &mut [f64],
) {
    let dims = data.dims;
    out.iter_mut().for_each(|o| *o = 0.0);
    for v in 0..dims.vars {
        for (wi, t) in ((t_end + 1).saturating_sub(t_win)..=t_end).enumerate() {
            let pad = t_win - (t_end - ((t_end + 1).saturating_sub(t_win))) - 1;
            let slot = pad + wi;
            for y in 0..th {
                let src = dims.idx(v, t, y0 + y, x0);
                let dst = ((v * t_win + slot) * th + y) * tw;
                for x in 0..tw {
                    out[dst + x] = data.dz[src + x] as f64;
                }
            }
        }
    }
}

/// Tile-sized ground truth for the window ending at `t_end`: extremes at the
/// last step, the valid plane, and the driver-penalty mask.
fn extract_masks(
    data: &ModelData,
    t_end: usize,
    t_win: usize,
    y0: usize,
    x0: usize,
    th: usize,
    tw: usize,
) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let dims = data.dims;
    let plane = dims.plane();
    let mut gt = vec![0u8; th * tw];
    let mut valid = vec![0u8; th * tw];
    let mut union = vec![0u8; th * tw];
    for y in 0..th {
        for x in 0..tw {
            let p = (y0 + y) * dims.lon + (x0 + x);
            let i = y * tw + x;
            valid[i] = data.valid[p];
            gt[i] = data.extremes[t_end * plane + p];
            for t in (t_end + 1).saturating_sub(t_win)..=t_end {
                union[i] |= data.extremes[t * plane + p];
            }
        }
    }
    let driver_mask: Vec<u8> =
        valid.iter().zip(&union).map(|(v, u)| v & (1 - u)).collect();
    (gt, valid, driver_mask)
}
