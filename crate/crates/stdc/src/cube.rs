//! Datacube, ground-truth masks, and weekly climatology.

use crate::error::{Error, Result};
use crate::grid::{BitGrid, Dims};
use rayon::prelude::*;

/// Floor applied to climatological standard deviations so deseasonalization
/// never divides by (near) zero.
pub const STD_FLOOR: f32 = 1e-6;

/// Multivariate spatio-temporal datacube in (V, T, Lat, Lon) C order.
///
/// `valid` marks usable pixels; values at valid pixels must be finite, values
/// at invalid pixels are carried through untouched (NaN allowed).
#[derive(Debug, Clone)]
pub struct DataCube {
    pub dims: Dims,
    pub var_names: Vec<String>,
    pub units: Vec<String>,
    pub weeks_per_year: usize,
    pub seed: u64,
    /// Hex SHA-256 of the generating config, empty when not synthesized.
    pub config_hash: String,
    pub values: Vec<f32>,
    /// (Lat, Lon) 0/1 pixel mask.
    pub valid: Vec<u8>,
}

impl DataCube {
    /// Checks the structural invariants. Called by the writer and available
    /// to consumers that build cubes by hand.
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.dims.len() {
            return Err(Error::Shape(format!(
                "values length {} does not match dims {:?}",
                self.values.len(),
                self.dims
            )));
        }
        if self.valid.len() != self.dims.plane() {
            return Err(Error::Shape(format!(
                "valid length {} does not match plane {}",
                self.valid.len(),
                self.dims.plane()
            )));
        }
        if self.var_names.len() != self.dims.vars || self.units.len() != self.dims.vars {
            return Err(Error::Shape("var_names/units length must equal V".into()));
        }
        if self.valid.iter().any(|&b| b > 1) {
            return Err(Error::Validation("valid mask must be 0/1".into()));
        }
        if self.weeks_per_year == 0 {
            return Err(Error::Validation("weeks_per_year must be positive".into()));
        }
        let plane = self.dims.plane();
        for v in 0..self.dims.vars {
            for t in 0..self.dims.t {
                let base = (v * self.dims.t + t) * plane;
                for p in 0..plane {
                    if self.valid[p] == 1 && !self.values[base + p].is_finite() {
                        return Err(Error::Validation(format!(
                            "non-finite value at valid pixel (v={v}, t={t}, p={p})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn valid_count(&self) -> u64 {
        self.valid.iter().map(|&b| b as u64).sum()
    }

    /// Number of whole years in the series.
    pub fn years(&self) -> usize {
        self.dims.t / self.weeks_per_year
    }
}

/// Ground-truth masks tied to a cube: shared extreme events (T,Lat,Lon) plus
/// per-variable driver and random-anomaly masks (V,T,Lat,Lon).
#[derive(Debug, Clone)]
pub struct MaskSet {
    pub dims: Dims,
    pub extremes: Vec<u8>,
    pub drivers: Vec<BitGrid>,
    pub random: Vec<BitGrid>,
}

impl MaskSet {
    pub fn empty(dims: Dims) -> Self {
        let per_var = dims.per_var();
        MaskSet {
            dims,
            extremes: vec![0u8; per_var],
            drivers: (0..dims.vars).map(|_| BitGrid::zeros(per_var)).collect(),
            random: (0..dims.vars).map(|_| BitGrid::zeros(per_var)).collect(),
        }
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        if self.dims != dims {
            return Err(Error::Shape("mask dims do not match cube dims".into()));
        }
        if self.extremes.len() != dims.per_var() {
            return Err(Error::Shape("extremes mask has wrong length".into()));
        }
        if self.drivers.len() != dims.vars || self.random.len() != dims.vars {
            return Err(Error::Shape("per-variable mask count must equal V".into()));
        }
        for g in self.drivers.iter().chain(self.random.iter()) {
            if g.len() != dims.per_var() {
                return Err(Error::Shape("per-variable mask has wrong length".into()));
            }
        }
        if self.extremes.iter().any(|&b| b > 1) {
            return Err(Error::Validation("extremes mask must be 0/1".into()));
        }
        Ok(())
    }
}

/// Per-week pixel statistics: median and population std over years, with the
/// std floored at `STD_FLOOR`. Shapes are (V, weeks_per_year, Lat, Lon).
#[derive(Debug, Clone)]
pub struct Climatology {
    pub vars: usize,
    pub weeks_per_year: usize,
    pub lat: usize,
    pub lon: usize,
    pub median: Vec<f32>,
    pub std: Vec<f32>,
}

impl Climatology {
    pub fn len(&self) -> usize {
        self.vars * self.weeks_per_year * self.lat * self.lon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, v: usize, week: usize, y: usize, x: usize) -> usize {
        ((v * self.weeks_per_year + week) * self.lat + y) * self.lon + x
    }
}

/// Median of a small sample; even counts average the two middle values.
fn median_inplace(buf: &mut [f64]) -> f64 {
    let n = buf.len();
    debug_assert!(n > 0);
    let mid = n / 2;
    buf.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    let hi = buf[mid];
    if n % 2 == 1 {
        hi
    } else {
        let lo = buf[..mid]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Computes the weekly climatology of `cube` over `years` (indices into whole
/// years of the series). Invalid pixels get median 0 and std `STD_FLOOR`.
pub fn compute_climatology(
    cube: &DataCube,
    years: std::ops::Range<usize>,
) -> Result<Climatology> {
    let w = cube.weeks_per_year;
    if cube.dims.t % w != 0 {
        return Err(Error::Validation(format!(
            "series length {} is not a multiple of weeks_per_year {}",
            cube.dims.t, w
        )));
    }
    let total_years = cube.years();
    if years.end > total_years || years.start >= years.end {
        return Err(Error::Validation(format!(
            "year range {years:?} outside series of {total_years} years"
        )));
    }
    if years.len() < 2 {
        return Err(Error::Validation(
            "climatology needs at least 2 years of data".into(),
        ));
    }

    let plane = cube.dims.plane();
    let n_groups = cube.dims.vars * w;
    let mut median = vec![0f32; n_groups * plane];
    let mut std = vec![STD_FLOOR; n_groups * plane];

    median
        .par_chunks_mut(plane)
        .zip(std.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(group, (med_plane, std_plane))| {
            let v = group / w;
            let week = group % w;
            let mut samples = vec![0f64; years.len()];
            for p in 0..plane {
                if cube.valid[p] == 0 {
                    continue;
                }
                for (k, year) in years.clone().enumerate() {
                    let t = year * w + week;
                    samples[k] = cube.values[cube.dims.idx(v, t, 0, 0) + p] as f64;
                }
                let mean = samples.iter().sum::<f64>() / samples.len() as f64;
                let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
                    / samples.len() as f64;
                med_plane[p] = median_inplace(&mut samples) as f32;
                std_plane[p] = (var.sqrt() as f32).max(STD_FLOOR);
            }
        });

    Ok(Climatology {
        vars: cube.dims.vars,
        weeks_per_year: w,
        lat: cube.dims.lat,
        lon: cube.dims.lon,
        median,
        std,
    })
}

/// Standardizes the cube against a climatology: (x - median) / std per
/// (variable, week-of-year, pixel). Invalid pixels become exactly 0.
pub fn deseasonalize(cube: &DataCube, clim: &Climatology) -> Result<DataCube> {
    if clim.vars != cube.dims.vars
        || clim.lat != cube.dims.lat
        || clim.lon != cube.dims.lon
        || clim.weeks_per_year != cube.weeks_per_year
    {
        return Err(Error::Shape("climatology does not match cube".into()));
    }
    let plane = cube.dims.plane();
    let w = cube.weeks_per_year;
    let mut out = cube.clone();
    out.values
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(chunk, vals)| {
            let v = chunk / cube.dims.t;
            let t = chunk % cube.dims.t;
            let g = (v * w + t % w) * plane;
            for p in 0..plane {
                vals[p] = if cube.valid[p] == 1 {
                    (vals[p] - clim.median[g + p]) / clim.std[g + p]
                } else {
                    0.0
                };
            }
        });
    Ok(out)
}
