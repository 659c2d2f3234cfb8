//! Base signals, noise processes, and dependent-variable coupling.

use crate::error::{Error, Result};
use crate::grid::Dims3;
use crate::rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Deterministic seasonal-scale base signal of one variable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseSpec {
    Sine { shift: f64, amp: f64, n_osc: f64, #[serde(default)] lat_grad: bool },
    Cosine { shift: f64, amp: f64, n_osc: f64, #[serde(default)] lat_grad: bool },
    Constant { value: f64, #[serde(default)] lat_grad: bool },
    /// Tiles the weekly median cycle stored in a climatology container.
    FromClimatology { clim_path: String, #[serde(default)] var: usize },
}

impl BaseSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            BaseSpec::Sine { n_osc, .. } | BaseSpec::Cosine { n_osc, .. } => {
                if *n_osc < 1.0 {
                    return Err(Error::Config("trigonometric base needs n_osc >= 1".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Evaluates a base signal voxel by voxel without materializing it. The
/// optional latitude gradient adds lat/Lat in [0, 1).
pub enum BaseEval {
    Trig { shift: f64, amp: f64, omega: f64, cosine: bool, grad: bool },
    Constant { value: f64, grad: bool },
    Cycle { weeks: usize, plane: Vec<Vec<f32>> },
}

impl BaseEval {
    pub fn new(spec: &BaseSpec, dims: Dims3, weeks_per_year: usize) -> Result<BaseEval> {
        spec.validate()?;
        Ok(match spec {
            BaseSpec::Sine { shift, amp, n_osc, lat_grad } => BaseEval::Trig {
                shift: *shift,
                amp: *amp,
                omega: 2.0 * std::f64::consts::PI * n_osc / dims.t as f64,
                cosine: false,
                grad: *lat_grad,
            },
            BaseSpec::Cosine { shift, amp, n_osc, lat_grad } => BaseEval::Trig {
                shift: *shift,
                amp: *amp,
                omega: 2.0 * std::f64::consts::PI * n_osc / dims.t as f64,
                cosine: true,
                grad: *lat_grad,
            },
            BaseSpec::Constant { value, lat_grad } => {
                BaseEval::Constant { value: *value, grad: *lat_grad }
            }
            BaseSpec::FromClimatology { clim_path, var } => {
                let clim = crate::store::read_climatology(std::path::Path::new(clim_path))?;
                if clim.lat != dims.lat || clim.lon != dims.lon {
                    return Err(Error::Shape("climatology grid does not match dims".into()));
                }
                if *var >= clim.vars {
                    return Err(Error::Config(format!(
                        "climatology variable {var} out of range ({} present)",
                        clim.vars
                    )));
                }
                if clim.weeks_per_year != weeks_per_year {
                    return Err(Error::Config("climatology weeks_per_year mismatch".into()));
                }
                let mut plane = Vec::with_capacity(clim.weeks_per_year);
                for week in 0..clim.weeks_per_year {
                    let start = clim.idx(*var, week, 0, 0);
                    plane.push(clim.median[start..start + dims.plane()].to_vec());
                }
                BaseEval::Cycle { weeks: clim.weeks_per_year, plane }
            }
        })
    }

    /// Fills one (Lat, Lon) plane at time `t`. Hoists the per-step wave out
    /// of the pixel loop, which `at` cannot.
    pub fn fill_plane(&self, t: usize, lat: usize, lon: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), lat * lon);
        match self {
            BaseEval::Trig { shift, amp, omega, cosine, grad } => {
                let phase = omega * t as f64;
                let wave = shift + amp * if *cosine { phase.cos() } else { phase.sin() };
                for y in 0..lat {
                    let row = wave + if *grad { y as f64 / lat as f64 } else { 0.0 };
                    out[y * lon..(y + 1) * lon].fill(row);
                }
            }
            BaseEval::Constant { value, grad } => {
                for y in 0..lat {
                    let row = value + if *grad { y as f64 / lat as f64 } else { 0.0 };
                    out[y * lon..(y + 1) * lon].fill(row);
                }
            }
            BaseEval::Cycle { weeks, plane } => {
                for (dst, src) in out.iter_mut().zip(&plane[t % weeks]) {
                    *dst = *src as f64;
                }
            }
        }
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize, lat: usize, lon: usize) -> f64 {
        let _ = lon;
        match self {
            BaseEval::Trig { shift, amp, omega, cosine, grad } => {
                let phase = omega * t as f64;
                let wave = if *cosine { phase.cos() } else { phase.sin() };
                shift + amp * wave + if *grad { y as f64 / lat as f64 } else { 0.0 }
            }
            BaseEval::Constant { value, grad } => {
                value + if *grad { y as f64 / lat as f64 } else { 0.0 }
            }
            BaseEval::Cycle { weeks, plane } => {
                let p = &plane[t % weeks];
                p[y * (p.len() / lat) + x] as f64
            }
        }
    }
}

/// Materializes a base signal as a (T, Lat, Lon) field.
pub fn gen_base(spec: &BaseSpec, dims: Dims3, weeks_per_year: usize) -> Result<Vec<f32>> {
    let eval = BaseEval::new(spec, dims, weeks_per_year)?;
    let mut out = vec![0f32; dims.len()];
    out.par_chunks_mut(dims.plane()).enumerate().for_each(|(t, plane)| {
        for y in 0..dims.lat {
            for x in 0..dims.lon {
                plane[y * dims.lon + x] = eval.at(t, y, x, dims.lat, dims.lon) as f32;
            }
        }
    });
    Ok(out)
}

/// Stochastic noise process of one variable.
///
/// Laplace uses scale = sigma * lambda. Red noise is an AR(1) process with
/// lag-1 coefficient `rho` whose innovations are spatially smoothed by a
/// Gaussian kernel of length `spatial_len` (truncated at 3 sigma and
/// renormalized at borders); the finished field is affinely rescaled to mean
/// `meu` and std `sigma`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    White { meu: f64, sigma: f64 },
    Laplace { meu: f64, sigma: f64, lambda: f64 },
    Cauchy { meu: f64, sigma: f64 },
    Red {
        meu: f64,
        sigma: f64,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_spatial_len")]
        spatial_len: f64,
    },
}

fn default_rho() -> f64 {
    0.9
}

fn default_spatial_len() -> f64 {
    2.0
}

impl NoiseSpec {
    /// Scale parameter used as the sigma_N term during synthesis.
    pub fn sigma(&self) -> f64 {
        match self {
            NoiseSpec::White { sigma, .. }
            | NoiseSpec::Laplace { sigma, .. }
            | NoiseSpec::Cauchy { sigma, .. }
            | NoiseSpec::Red { sigma, .. } => *sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma() < 0.0 {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        if let NoiseSpec::Red { rho, spatial_len, .. } = self {
            if !(0.0..1.0).contains(rho) {
                return Err(Error::Config("red noise needs 0 <= rho < 1".into()));
            }
            if *spatial_len <= 0.0 {
                return Err(Error::Config("red noise needs spatial_len > 0".into()));
            }
        }
        if let NoiseSpec::Laplace { lambda, .. } = self {
            if *lambda <= 0.0 {
                return Err(Error::Config("laplace noise needs lambda > 0".into()));
            }
        }
        Ok(())
    }
}

/// Inverse-CDF Laplace draw from u in (-0.5, 0.5).
#[inline]
fn laplace_from_uniform(u: f64, meu: f64, scale: f64) -> f64 {
    let s = if u >= 0.0 { 1.0 } else { -1.0 };
    meu - scale * s * (1.0 - 2.0 * u.abs()).ln()
}

/// Generates the noise field of variable `v` as a (T, Lat, Lon) cube.
/// Draws are keyed per (seed, variable, time step), so the result is
/// bit-identical for any thread count.
pub fn gen_noise(spec: &NoiseSpec, dims: Dims3, seed: u64, v: usize) -> Result<Vec<f32>> {
    spec.validate()?;
    let plane = dims.plane();
    let mut out = vec![0f32; dims.len()];
    match spec {
        NoiseSpec::White { meu, sigma } => {
            let dist = Normal::new(*meu, *sigma)
                .map_err(|e| Error::Config(format!("white noise: {e}")))?;
            out.par_chunks_mut(plane).enumerate().for_each(|(t, pl)| {
                let mut r = rng::stream(seed, "noise", &[v as u64, t as u64]);
                for cell in pl.iter_mut() {
                    *cell = dist.sample(&mut r) as f32;
                }
            });
        }
        NoiseSpec::Laplace { meu, sigma, lambda } => {
            let scale = sigma * lambda;
            out.par_chunks_mut(plane).enumerate().for_each(|(t, pl)| {
                let mut r = rng::stream(seed, "noise", &[v as u64, t as u64]);
                for cell in pl.iter_mut() {
                    let u: f64 = r.gen_range(-0.5..0.5);
                    *cell = laplace_from_uniform(u, *meu, scale) as f32;
                }
            });
        }
        NoiseSpec::Cauchy { meu, sigma } => {
            out.par_chunks_mut(plane).enumerate().for_each(|(t, pl)| {
                let mut r = rng::stream(seed, "noise", &[v as u64, t as u64]);
                for cell in pl.iter_mut() {
                    let u: f64 = r.gen_range(0.0..1.0);
                    *cell = (meu + sigma * (std::f64::consts::PI * (u - 0.5)).tan()) as f32;
                }
            });
        }
        NoiseSpec::Red { meu, sigma, rho, spatial_len } => {
            red_noise(&mut out, dims, seed, v, *meu, *sigma, *rho, *spatial_len);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn red_noise(
    out: &mut [f32],
    dims: Dims3,
    seed: u64,
    v: usize,
    meu: f64,
    sigma: f64,
    rho: f64,
    spatial_len: f64,
) {
    let plane = dims.plane();
    // Smoothed unit-normal innovations, one keyed plane per time step.
    let mut field = vec![0f64; dims.len()];
    let kernel = gaussian_kernel(spatial_len);
    field.par_chunks_mut(plane).enumerate().for_each(|(t, pl)| {
        let mut r = rng::stream(seed, "noise", &[v as u64, t as u64]);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let raw: Vec<f64> = (0..plane).map(|_| dist.sample(&mut r)).collect();
        blur_plane(&raw, pl, dims.lat, dims.lon, &kernel);
    });

    // AR(1) recursion with a stationary start, in place over the
    // innovations (step t only reads the finished step t-1).
    let stationary = 1.0 / (1.0 - rho * rho).sqrt();
    for p in 0..plane {
        field[p] *= stationary;
    }
    for t in 1..dims.t {
        let (prev, cur) = field.split_at_mut(t * plane);
        let prev = &prev[(t - 1) * plane..];
        for (c, pr) in cur[..plane].iter_mut().zip(prev) {
            *c += rho * pr;
        }
    }

    // Affine rescale of the whole field to the requested moments.
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let var = field.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let scale = if var > 0.0 { sigma / var.sqrt() } else { 0.0 };
    for (dst, src) in out.iter_mut().zip(&field) {
        *dst = (meu + (src - mean) * scale) as f32;
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * (d / sigma) * (d / sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for w in &mut k {
        *w /= sum;
    }
    k
}

/// Separable convolution with border renormalization.
fn blur_plane(src: &[f64], dst: &mut [f64], lat: usize, lon: usize, kernel: &[f64]) {
    let radius = kernel.len() / 2;
    let mut tmp = vec![0f64; src.len()];
    for y in 0..lat {
        for x in 0..lon {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (i, &w) in kernel.iter().enumerate() {
                let xx = x as isize + i as isize - radius as isize;
                if xx >= 0 && (xx as usize) < lon {
                    acc += w * src[y * lon + xx as usize];
                    wsum += w;
                }
            }
            tmp[y * lon + x] = acc / wsum;
        }
    }
    for y in 0..lat {
        for x in 0..lon {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (i, &w) in kernel.iter().enumerate() {
                let yy = y as isize + i as isize - radius as isize;
                if yy >= 0 && (yy as usize) < lat {
                    acc += w * tmp[yy as usize * lon + x];
                    wsum += w;
                }
            }
            dst[y * lon + x] = acc / wsum;
        }
    }
}

/// Distribution of dependent-variable coupling weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum WeightSpec {
    Norm,
    Laplace,
}

/// Draws one coupling weight per source variable.
pub fn sample_weights(spec: WeightSpec, count: usize, seed: u64, tag_idx: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "dep-weights", &[tag_idx]);
    (0..count)
        .map(|_| match spec {
            WeightSpec::Norm => Normal::new(0.0, 1.0).unwrap().sample(&mut r),
            WeightSpec::Laplace => {
                let u: f64 = r.gen_range(-0.5..0.5);
                laplace_from_uniform(u, 0.0, 1.0)
            }
        })
        .collect()
}

/// Functional form combining independent bases into a dependent base.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CouplingKind {
    Linear,
    Quadratic,
}

/// Scalar combination rule shared by the array op and the synthesizer.
/// `disturb` holds the per-source multiplicative factor (1 when undisturbed).
#[inline]
pub fn couple_at(kind: CouplingKind, bases: &[f64], w: &[f64], disturb: &[f64]) -> f64 {
    let mut acc = 0.0;
    match kind {
        CouplingKind::Linear => {
            for i in 0..bases.len() {
                acc += w[i] * disturb[i] * bases[i];
            }
        }
        CouplingKind::Quadratic => {
            let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
            for i in 0..bases.len() {
                acc += inv_sqrt2 * w[i] * disturb[i] * (bases[i] * bases[i] - 1.0);
            }
        }
    }
    acc
}

/// Combines independent base fields into one dependent base field.
pub fn couple_dependent(
    bases: &[&[f32]],
    w: &[f64],
    kind: CouplingKind,
) -> Result<Vec<f32>> {
    if bases.is_empty() {
        return Err(Error::Config("dependent base needs at least one source".into()));
    }
    if bases.len() != w.len() {
        return Err(Error::Shape("one weight per source base required".into()));
    }
    let n = bases[0].len();
    if bases.iter().any(|b| b.len() != n) {
        return Err(Error::Shape("source bases must share a shape".into()));
    }
    let ones = vec![1.0; bases.len()];
    let mut vals = vec![0f64; bases.len()];
    let mut out = vec![0f32; n];
    for (i, cell) in out.iter_mut().enumerate() {
        for (k, b) in bases.iter().enumerate() {
            vals[k] = b[i] as f64;
        }
        *cell = couple_at(kind, &vals, w, &ones) as f32;
    }
    Ok(out)
}

/// Union of the source variables' random-anomaly masks (the dependent
/// variable inherits every component anomaly).
pub fn union_random_masks(masks: &[&crate::grid::BitGrid]) -> Result<crate::grid::BitGrid> {
    if masks.is_empty() {
        return Err(Error::Config("union of zero masks is undefined".into()));
    }
    let mut out = masks[0].clone();
    for m in &masks[1..] {
        out.or_assign(m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: Dims3 = Dims3 { t: 52, lat: 4, lon: 5 };

    #[test]
    fn sine_peaks_at_quarter_period() {
        let spec = BaseSpec::Sine { shift: 0.0, amp: 1.0, n_osc: 1.0, lat_grad: false };
        let base = gen_base(&spec, DIMS, 52).unwrap();
        let quarter = DIMS.idx(13, 0, 0);
        assert!((base[quarter] - 1.0).abs() < 1e-6);
        assert!(base[0].abs() < 1e-6);
    }

    #[test]
    fn cosine_starts_at_peak_and_constant_is_flat() {
        let spec = BaseSpec::Cosine { shift: 2.0, amp: 0.5, n_osc: 1.0, lat_grad: false };
        let base = gen_base(&spec, DIMS, 52).unwrap();
        assert!((base[0] - 2.5).abs() < 1e-6);
        let spec = BaseSpec::Constant { value: 7.0, lat_grad: false };
        let base = gen_base(&spec, DIMS, 52).unwrap();
        assert!(base.iter().all(|&b| b == 7.0));
    }

    #[test]
    fn lat_grad_spans_unit_interval() {
        let spec = BaseSpec::Constant { value: 0.0, lat_grad: true };
        let base = gen_base(&spec, DIMS, 52).unwrap();
        assert_eq!(base[DIMS.idx(0, 0, 0)], 0.0);
        assert!((base[DIMS.idx(0, 3, 0)] - 0.75).abs() < 1e-6);
        assert!(base.iter().all(|&b| (0.0..1.0).contains(&b)));
    }

    #[test]
    fn fill_plane_agrees_with_pointwise_eval() {
        let specs = [
            BaseSpec::Sine { shift: 1.0, amp: 2.0, n_osc: 3.0, lat_grad: true },
            BaseSpec::Cosine { shift: -1.0, amp: 0.5, n_osc: 1.0, lat_grad: false },
            BaseSpec::Constant { value: 4.0, lat_grad: true },
        ];
        for spec in &specs {
            let eval = BaseEval::new(spec, DIMS, 52).unwrap();
            let mut plane = vec![0f64; DIMS.plane()];
            for t in [0, 7, 51] {
                eval.fill_plane(t, DIMS.lat, DIMS.lon, &mut plane);
                for y in 0..DIMS.lat {
                    for x in 0..DIMS.lon {
                        let direct = eval.at(t, y, x, DIMS.lat, DIMS.lon);
                        assert_eq!(plane[y * DIMS.lon + x], direct);
                    }
                }
            }
        }
    }

    #[test]
    fn trig_base_rejects_fractional_oscillations() {
        let spec = BaseSpec::Sine { shift: 0.0, amp: 1.0, n_osc: 0.5, lat_grad: false };
        assert!(gen_base(&spec, DIMS, 52).is_err());
    }

    #[test]
    fn noise_is_deterministic_per_key() {
        let spec = NoiseSpec::White { meu: 0.0, sigma: 1.0 };
        let a = gen_noise(&spec, DIMS, 9, 0).unwrap();
        let b = gen_noise(&spec, DIMS, 9, 0).unwrap();
        let c = gen_noise(&spec, DIMS, 9, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    fn moments(xs: &[f32]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    #[test]
    fn white_noise_moments_match() {
        let dims = Dims3 { t: 64, lat: 24, lon: 24 };
        let spec = NoiseSpec::White { meu: 1.5, sigma: 0.3 };
        let x = gen_noise(&spec, dims, 4, 0).unwrap();
        let (mean, std) = moments(&x);
        assert!((mean - 1.5).abs() < 0.01);
        assert!((std - 0.3).abs() < 0.01);
    }

    #[test]
    fn laplace_noise_scale_is_sigma_lambda() {
        // Std of Laplace(scale b) is b*sqrt(2).
        let dims = Dims3 { t: 64, lat: 24, lon: 24 };
        let spec = NoiseSpec::Laplace { meu: 0.0, sigma: 0.5, lambda: 2.0 };
        let x = gen_noise(&spec, dims, 4, 0).unwrap();
        let (mean, std) = moments(&x);
        assert!(mean.abs() < 0.02);
        let expect = 1.0 * std::f64::consts::SQRT_2;
        assert!((std - expect).abs() / expect < 0.05, "std {std} vs {expect}");
    }

    #[test]
    fn cauchy_noise_median_is_meu() {
        let dims = Dims3 { t: 64, lat: 24, lon: 24 };
        let spec = NoiseSpec::Cauchy { meu: 3.0, sigma: 0.7 };
        let mut x = gen_noise(&spec, dims, 4, 0).unwrap();
        x.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = x[x.len() / 2] as f64;
        assert!((med - 3.0).abs() < 0.05);
        // Heavy tails: some draws land far outside a Gaussian range.
        assert!(x.iter().any(|&v| (v - 3.0).abs() > 20.0));
    }

    #[test]
    fn red_noise_has_requested_moments_and_memory() {
        let dims = Dims3 { t: 512, lat: 16, lon: 16 };
        let spec = NoiseSpec::Red { meu: 0.2, sigma: 0.9, rho: 0.9, spatial_len: 2.0 };
        let x = gen_noise(&spec, dims, 11, 0).unwrap();
        let (mean, std) = moments(&x);
        assert!((mean - 0.2).abs() < 1e-6);
        assert!((std - 0.9).abs() < 1e-6);
        // Empirical lag-1 autocorrelation close to rho.
        let plane = dims.plane();
        let mut num = 0.0;
        let mut den = 0.0;
        for t in 1..dims.t {
            for p in 0..plane {
                let a = x[t * plane + p] as f64 - mean;
                let b = x[(t - 1) * plane + p] as f64 - mean;
                num += a * b;
                den += b * b;
            }
        }
        let lag1 = num / den;
        assert!((lag1 - 0.9).abs() < 0.05, "lag-1 autocorrelation {lag1}");
    }

    #[test]
    fn weight_samplers_have_expected_shape() {
        let w = sample_weights(WeightSpec::Norm, 100_000, 5, 0);
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.02 && (std - 1.0).abs() < 0.02);

        let w = sample_weights(WeightSpec::Laplace, 100_000, 5, 1);
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let m4 = w.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        let excess_kurtosis = m4 / (var * var) - 3.0;
        assert!((excess_kurtosis - 3.0).abs() < 0.5, "kurtosis {excess_kurtosis}");
    }

    #[test]
    fn linear_coupling_is_weighted_sum() {
        let b1 = vec![1.0f32, 2.0];
        let b2 = vec![10.0f32, 20.0];
        let out = couple_dependent(&[&b1, &b2], &[2.0, 0.5], CouplingKind::Linear).unwrap();
        assert_eq!(out, vec![7.0, 14.0]);
    }

    #[test]
    fn quadratic_coupling_centers_unit_base() {
        // (b^2 - 1)/sqrt(2) with b = 1 vanishes.
        let b1 = vec![1.0f32, 3.0];
        let out = couple_dependent(&[&b1], &[1.0], CouplingKind::Quadratic).unwrap();
        assert!(out[0].abs() < 1e-7);
        let expect = (9.0 - 1.0) / std::f64::consts::SQRT_2;
        assert!((out[1] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn coupling_validates_shapes() {
        let b1 = vec![1.0f32, 2.0];
        let b2 = vec![1.0f32];
        assert!(couple_dependent(&[&b1, &b2], &[1.0, 1.0], CouplingKind::Linear).is_err());
        assert!(couple_dependent(&[&b1], &[1.0, 2.0], CouplingKind::Linear).is_err());
        assert!(couple_dependent(&[], &[], CouplingKind::Linear).is_err());
    }

    #[test]
    fn mask_union_is_elementwise_or() {
        use crate::grid::BitGrid;
        let mut a = BitGrid::zeros(10);
        let mut b = BitGrid::zeros(10);
        a.set(1);
        b.set(3);
        b.set(1);
        let u = union_random_masks(&[&a, &b]).unwrap();
        assert!(u.get(1) && u.get(3) && !u.get(0));
        assert_eq!(u.count_ones(), 2);
    }
}
