//! Hand-written neural-network primitives: 3-D convolution with exact
//! analytic gradients, tanh, Glorot-uniform initialization, and an
//! Adam-style optimizer. Everything operates on flat f64 slices with
//! explicit shapes so the backward passes can be checked against finite
//! differences.

use rand::Rng;

/// Shape of a (channels, time, lat, lon) volume, row-major with lon fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vol {
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Vol {
    pub fn len(&self) -> usize {
        self.c * self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, c: usize, t: usize, y: usize, x: usize) -> usize {
        ((c * self.t + t) * self.h + y) * self.w + x
    }
}

/// A 3-D convolution: `cout` filters of extent (kt, kh, kw) over `cin`
/// channels, zero-padded by (pt, ph, pw) on both sides of each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub pt: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvSpec {
    /// Same-padded over every axis (odd kernels keep the input extent).
    pub fn same(cin: usize, cout: usize, kt: usize, kh: usize, kw: usize) -> ConvSpec {
        ConvSpec { cin, cout, kt, kh, kw, pt: kt / 2, ph: kh / 2, pw: kw / 2 }
    }

    /// Valid over time (collapses kt steps), same-padded spatially.
    pub fn time_valid(cin: usize, cout: usize, kt: usize, kh: usize, kw: usize) -> ConvSpec {
        ConvSpec { cin, cout, kt, kh, kw, pt: 0, ph: kh / 2, pw: kw / 2 }
    }

    pub fn out_vol(&self, input: Vol) -> Vol {
        debug_assert_eq!(input.c, self.cin);
        Vol {
            c: self.cout,
            t: input.t + 2 * self.pt + 1 - self.kt,
            h: input.h + 2 * self.ph + 1 - self.kh,
            w: input.w + 2 * self.pw + 1 - self.kw,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kt * self.kh * self.kw
    }

    /// (fan_in, fan_out) for initialization.
    pub fn fans(&self) -> (usize, usize) {
        let k = self.kt * self.kh * self.kw;
        (self.cin * k, self.cout * k)
    }

    #[inline]
    fn w_idx(&self, co: usize, ci: usize, dt: usize, dy: usize, dx: usize) -> usize {
        (((co * self.cin + ci) * self.kt + dt) * self.kh + dy) * self.kw + dx
    }
}

/// For one kernel tap, the ranges where both the output position and the
/// shifted input position are in bounds: `o + d - p` must land in
/// `[0, in_extent)` while `o` stays in `[0, out_extent)`.
#[inline]
fn tap_range(d: usize, p: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = p.saturating_sub(d);
    let hi = (in_extent + p - d).min(out_extent);
    (lo, hi.max(lo))
}

/// out[co, ot, oy, ox] = bias[co] + sum w[co, ci, dt, dy, dx] *
/// in[ci, ot+dt-pt, oy+dy-ph, ox+dx-pw], out-of-range input treated as zero.
/// Accumulates tap-major so the inner loop runs over contiguous rows.
pub fn conv3d_forward(
    spec: &ConvSpec,
    input: &[f64],
    in_vol: Vol,
    weights: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let ov = spec.out_vol(in_vol);
    debug_assert_eq!(input.len(), in_vol.len());
    debug_assert_eq!(weights.len(), spec.weight_len());
    debug_assert_eq!(bias.len(), spec.cout);
    debug_assert_eq!(out.len(), ov.len());
    let plane = ov.t * ov.h * ov.w;
    for co in 0..ov.c {
        out[co * plane..(co + 1) * plane].fill(bias[co]);
    }
    for co in 0..ov.c {
        for ci in 0..spec.cin {
            for dt in 0..spec.kt {
                let (t_lo, t_hi) = tap_range(dt, spec.pt, in_vol.t, ov.t);
                for dy in 0..spec.kh {
                    let (y_lo, y_hi) = tap_range(dy, spec.ph, in_vol.h, ov.h);
                    for dx in 0..spec.kw {
                        let (x_lo, x_hi) = tap_range(dx, spec.pw, in_vol.w, ov.w);
                        if x_hi <= x_lo {
                            continue;
                        }
                        let w = weights[spec.w_idx(co, ci, dt, dy, dx)];
                        for ot in t_lo..t_hi {
                            let it = ot + dt - spec.pt;
                            for oy in y_lo..y_hi {
                                let iy = oy + dy - spec.ph;
                                let src = in_vol.idx(ci, it, iy, x_lo + dx - spec.pw);
                                let dst = ov.idx(co, ot, oy, x_lo);
                                let run = x_hi - x_lo;
                                let (o, i) =
                                    (&mut out[dst..dst + run], &input[src..src + run]);
                                for (ov_, iv) in o.iter_mut().zip(i) {
                                    *ov_ += w * iv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates d(loss)/d(input), d(loss)/d(weights), d(loss)/d(bias) given
/// the upstream gradient on the output. All gradient buffers are added to,
/// not overwritten.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward(
    spec: &ConvSpec,
    input: &[f64],
    in_vol: Vol,
    weights: &[f64],
    d_out: &[f64],
    d_input: &mut [f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
) {
    let ov = spec.out_vol(in_vol);
    debug_assert_eq!(d_out.len(), ov.len());
    debug_assert_eq!(d_input.len(), in_vol.len());
    debug_assert_eq!(d_weights.len(), spec.weight_len());
    debug_assert_eq!(d_bias.len(), spec.cout);
    let plane = ov.t * ov.h * ov.w;
    for co in 0..ov.c {
        d_bias[co] += d_out[co * plane..(co + 1) * plane].iter().sum::<f64>();
    }
    for co in 0..ov.c {
        for ci in 0..spec.cin {
            for dt in 0..spec.kt {
                let (t_lo, t_hi) = tap_range(dt, spec.pt, in_vol.t, ov.t);
                for dy in 0..spec.kh {
                    let (y_lo, y_hi) = tap_range(dy, spec.ph, in_vol.h, ov.h);
                    for dx in 0..spec.kw {
                        let (x_lo, x_hi) = tap_range(dx, spec.pw, in_vol.w, ov.w);
                        if x_hi <= x_lo {
                            continue;
                        }
                        let w = weights[spec.w_idx(co, ci, dt, dy, dx)];
                        let mut dw = 0.0;
                        for ot in t_lo..t_hi {
                            let it = ot + dt - spec.pt;
                            for oy in y_lo..y_hi {
                                let iy = oy + dy - spec.ph;
                                let src = in_vol.idx(ci, it, iy, x_lo + dx - spec.pw);
                                let dst = ov.idx(co, ot, oy, x_lo);
                                let run = x_hi - x_lo;
                                let go = &d_out[dst..dst + run];
                                let iv = &input[src..src + run];
                                let di = &mut d_input[src..src + run];
                                for ((g, x), d) in go.iter().zip(iv).zip(di) {
                                    dw += g * x;
                                    *d += g * w;
                                }
                            }
                        }
                        d_weights[spec.w_idx(co, ci, dt, dy, dx)] += dw;
                    }
                }
            }
        }
    }
}

/// Applies tanh in place; the output doubles as the backward cache.
pub fn tanh_forward(x: &mut [f64]) {
    for v in x {
        *v = v.tanh();
    }
}

/// d *= 1 - y^2 where y is the tanh output.
pub fn tanh_backward(y: &[f64], d: &mut [f64]) {
    for (dv, yv) in d.iter_mut().zip(y) {
        *dv *= 1.0 - yv * yv;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Glorot-uniform draw: uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, out: &mut [f64]) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in out {
        *v = rng.gen_range(-a..a);
    }
}

/// Adam with bias correction. One instance owns the moments for a whole
/// flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u32,
}

impl Adam {
    pub fn new(n: usize) -> Adam {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], steps: 0 }
    }

    /// Negates the first moment over a parameter range. Used when a block of
    /// parameters is negated in place: the direction history flips with the
    /// weights while the second moment is sign-invariant.
    pub fn negate_first_moment(&mut self, range: std::ops::Range<usize>) {
        for m in &mut self.m[range] {
            *m = -*m;
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn pointwise_conv_reproduces_input() {
        let spec = ConvSpec::same(1, 1, 1, 1, 1);
        let vol = Vol { c: 1, t: 2, h: 3, w: 4 };
        let input: Vec<f64> = (0..vol.len()).map(|i| i as f64 * 0.5 - 3.0).collect();
        let mut out = vec![0.0; vol.len()];
        conv3d_forward(&spec, &input, vol, &[1.0], &[0.0], &mut out);
        assert_eq!(out, input);
    }

    #[test]
    fn temporal_conv_hand_example() {
        // 1-D series [1, 2, 3] with kernel [10, 1, 0.1], same padding:
        // out[t] = 10*x[t-1] + x[t] + 0.1*x[t+1] with zeros outside.
        let spec = ConvSpec::same(1, 1, 3, 1, 1);
        let vol = Vol { c: 1, t: 3, h: 1, w: 1 };
        let mut out = vec![0.0; 3];
        conv3d_forward(&spec, &[1.0, 2.0, 3.0], vol, &[10.0, 1.0, 0.1], &[0.5], &mut out);
        assert_eq!(out, vec![0.5 + 1.0 + 0.2, 0.5 + 10.0 + 2.0 + 0.3, 0.5 + 20.0 + 3.0]);
    }

    #[test]
    fn head_conv_collapses_time() {
        let spec = ConvSpec::time_valid(2, 1, 4, 3, 3);
        let vol = Vol { c: 2, t: 4, h: 5, w: 6 };
        let ov = spec.out_vol(vol);
        assert_eq!(ov, Vol { c: 1, t: 1, h: 5, w: 6 });
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let spec = ConvSpec::same(2, 3, 3, 1, 3);
        let vol = Vol { c: 2, t: 4, h: 2, w: 5 };
        let mut r = rng::stream(11, "nn-test", &[0]);
        let mut input = vec![0.0; vol.len()];
        let mut weights = vec![0.0; spec.weight_len()];
        let mut bias = vec![0.0; spec.cout];
        glorot(&mut r, 4, 4, &mut input);
        glorot(&mut r, 6, 9, &mut weights);
        glorot(&mut r, 1, 1, &mut bias);
        let ov = spec.out_vol(vol);

        // Scalar loss: 0.5 * sum(out^2) so d_out = out.
        let loss = |input: &[f64], weights: &[f64], bias: &[f64]| {
            let mut out = vec![0.0; ov.len()];
            conv3d_forward(&spec, input, vol, weights, bias, &mut out);
            0.5 * out.iter().map(|v| v * v).sum::<f64>()
        };
        let mut out = vec![0.0; ov.len()];
        conv3d_forward(&spec, &input, vol, &weights, &bias, &mut out);
        let mut d_in = vec![0.0; vol.len()];
        let mut d_w = vec![0.0; spec.weight_len()];
        let mut d_b = vec![0.0; spec.cout];
        conv3d_backward(&spec, &input, vol, &weights, &out, &mut d_in, &mut d_w, &mut d_b);

        let h = 1e-5;
        let check = |analytic: f64, fd: f64, tag: &str| {
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!((analytic - fd).abs() / denom < 1e-6, "{tag}: {analytic} vs {fd}");
        };
        for i in (0..vol.len()).step_by(7) {
            let mut plus = input.clone();
            plus[i] += h;
            let mut minus = input.clone();
            minus[i] -= h;
            let fd = (loss(&plus, &weights, &bias) - loss(&minus, &weights, &bias)) / (2.0 * h);
            check(d_in[i], fd, "input");
        }
        for i in (0..weights.len()).step_by(5) {
            let mut plus = weights.clone();
            plus[i] += h;
            let mut minus = weights.clone();
            minus[i] -= h;
            let fd = (loss(&input, &plus, &bias) - loss(&input, &minus, &bias)) / (2.0 * h);
            check(d_w[i], fd, "weight");
        }
        for i in 0..bias.len() {
            let mut plus = bias.clone();
            plus[i] += h;
            let mut minus = bias.clone();
            minus[i] -= h;
            let fd = (loss(&input, &weights, &plus) - loss(&input, &weights, &minus)) / (2.0 * h);
            check(d_b[i], fd, "bias");
        }
    }

    #[test]
    fn tanh_backward_uses_cached_output() {
        let mut y = vec![0.5, -1.2, 0.0];
        tanh_forward(&mut y);
        let mut d = vec![1.0, 2.0, 3.0];
        tanh_backward(&y, &mut d);
        for (i, (dv, yv)) in d.iter().zip(&y).enumerate() {
            let expect = (i as f64 + 1.0) * (1.0 - yv * yv);
            assert!((dv - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        // With bias correction, the first step is lr * g / (|g| + eps).
        let mut adam = Adam::new(2);
        let mut p = vec![1.0, -2.0];
        adam.step(&mut p, &[0.5, -3.0], 0.01);
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn adam_matches_reference_recursion() {
        let mut adam = Adam::new(1);
        let mut p = vec![0.3];
        let grads = [0.4, -0.2, 0.7, 0.1];
        let (mut m, mut v, mut x) = (0.0, 0.0, 0.3);
        for (i, g) in grads.iter().enumerate() {
            adam.step(&mut p[..], &[*g], 0.05);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(i as i32 + 1));
            let vhat = v / (1.0 - 0.999f64.powi(i as i32 + 1));
            x -= 0.05 * mhat / (vhat.sqrt() + 1e-8);
            assert!((p[0] - x).abs() < 1e-12, "step {i}");
        }
    }

    #[test]
    fn glorot_is_bounded_and_deterministic() {
        let mut a = vec![0.0; 256];
        let mut b = vec![0.0; 256];
        glorot(&mut rng::stream(3, "init", &[4]), 10, 20, &mut a);
        glorot(&mut rng::stream(3, "init", &[4]), 10, 20, &mut b);
        assert_eq!(a, b);
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(a.iter().all(|v| v.abs() < bound));
        assert!(a.iter().any(|v| v.abs() > bound * 0.5), "draws should fill the range");
    }
}
