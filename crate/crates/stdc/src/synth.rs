//! Dataset synthesis: the generation config, the per-voxel value rule, and
//! the full generator that assembles a cube with exact ground-truth masks.

use crate::cube::{DataCube, MaskSet};
use crate::error::{Error, Result};
use crate::events::{self, CouplingPin, EventSpec, LedgerEntry};
use crate::grid::{BitGrid, Dims, Dims3};
use crate::signal::{self, BaseEval, BaseSpec, CouplingKind, NoiseSpec, WeightSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::ops::Range;
use std::path::Path;

fn default_units() -> String {
    "1".into()
}

fn default_weeks_per_year() -> usize {
    52
}

fn default_lead_max() -> usize {
    9
}

fn default_lag_max() -> usize {
    4
}

fn default_name() -> String {
    "dataset".into()
}

/// Spatial grid and calendar of the generated cube.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridSpec {
    pub lat: usize,
    pub lon: usize,
    pub years: usize,
    #[serde(default = "default_weeks_per_year")]
    pub weeks_per_year: usize,
    /// Pixels within this many cells of the border are marked invalid.
    #[serde(default)]
    pub invalid_margin: usize,
}

/// Chronological train/validation/test split, in whole years.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_years: usize,
    pub val_years: usize,
    pub test_years: usize,
}

/// Week index ranges of the three splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    pub fn get(&self, split: &str) -> Option<Range<usize>> {
        match split {
            "train" => Some(self.train.clone()),
            "val" => Some(self.val.clone()),
            "test" => Some(self.test.clone()),
            _ => None,
        }
    }
}

impl SplitSpec {
    pub fn week_ranges(&self, weeks_per_year: usize) -> SplitRanges {
        let a = self.train_years * weeks_per_year;
        let b = a + self.val_years * weeks_per_year;
        let c = b + self.test_years * weeks_per_year;
        SplitRanges { train: 0..a, val: a..b, test: b..c }
    }
}

/// How many variables couple to the extremes and the driver window bounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct CouplingSpec {
    pub coupled_count: usize,
    #[serde(default = "default_lead_max")]
    pub lead_max: usize,
    #[serde(default = "default_lag_max")]
    pub lag_max: usize,
}

/// One independently synthesized variable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VariableSpec {
    pub name: String,
    #[serde(default = "default_units")]
    pub units: String,
    pub base: BaseSpec,
    pub noise: NoiseSpec,
    /// Relative base inflation at anomalous voxels.
    pub kb: f64,
    /// Noise inflation at anomalous voxels.
    pub kn: f64,
    /// Extra bump of ks * sigma at random and extreme voxels.
    pub ks: f64,
    /// Pin this variable's coupled flag instead of drawing it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupled: Option<bool>,
    /// Pin this variable's driver sign (+1 or -1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<i8>,
    /// Pin this variable's driver lead (weeks before the extreme).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lead: Option<usize>,
    /// Pin this variable's driver lag (weeks after the extreme).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lag: Option<usize>,
    #[serde(default)]
    pub random_events: Vec<EventSpec>,
}

/// A variable computed from the independent ones instead of synthesized.
/// Sources enter as standardized deviations (value - base) / sigma, so
/// source anomalies propagate; `kn` additionally inflates a source's
/// contribution by 2^kn at that source's random-anomaly voxels.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DependentSpec {
    pub name: String,
    #[serde(default = "default_units")]
    pub units: String,
    pub coupling: CouplingKind,
    pub weights: WeightSpec,
    #[serde(default)]
    pub kn: f64,
    /// Additive noise of the dependent variable itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    /// Source variable names; all independent variables when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parents: Option<Vec<String>>,
}

/// Complete recipe for one synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub grid: GridSpec,
    pub splits: SplitSpec,
    pub coupling: CouplingSpec,
    pub extreme_events: Vec<EventSpec>,
    pub variables: Vec<VariableSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dependent: Vec<DependentSpec>,
}

impl GenConfig {
    pub fn from_toml_str(text: &str) -> Result<GenConfig> {
        let cfg: GenConfig = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<GenConfig> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let cfg: GenConfig = serde_json::from_str(&text)?;
            cfg.validate()?;
            return Ok(cfg);
        }
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    /// SHA-256 over the canonical JSON form; ties cubes to their recipe.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn dims3(&self) -> Dims3 {
        Dims3 {
            t: self.grid.years * self.grid.weeks_per_year,
            lat: self.grid.lat,
            lon: self.grid.lon,
        }
    }

    pub fn var_count(&self) -> usize {
        self.variables.len() + self.dependent.len()
    }

    pub fn week_ranges(&self) -> SplitRanges {
        self.splits.week_ranges(self.grid.weeks_per_year)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.lat == 0 || g.lon == 0 || g.years == 0 || g.weeks_per_year == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        if 2 * g.invalid_margin >= g.lat.min(g.lon) {
            return Err(Error::Config("invalid_margin leaves no valid pixels".into()));
        }
        let s = &self.splits;
        if s.train_years + s.val_years + s.test_years != g.years {
            return Err(Error::Config(format!(
                "splits cover {} years but the grid has {}",
                s.train_years + s.val_years + s.test_years,
                g.years
            )));
        }
        if self.variables.is_empty() {
            return Err(Error::Config("at least one variable is required".into()));
        }
        let mut names: Vec<&str> = self.variables.iter().map(|v| v.name.as_str()).collect();
        names.extend(self.dependent.iter().map(|d| d.name.as_str()));
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != names.len() || names.iter().any(|n| n.is_empty()) {
            return Err(Error::Config("variable names must be unique and non-empty".into()));
        }
        for spec in &self.extreme_events {
            spec.validate()?;
        }
        for v in &self.variables {
            v.base.validate()?;
            v.noise.validate()?;
            for (k, label) in [(v.kb, "kb"), (v.kn, "kn"), (v.ks, "ks")] {
                if !k.is_finite() || k < 0.0 {
                    return Err(Error::Config(format!(
                        "variable {}: {label} must be finite and non-negative",
                        v.name
                    )));
                }
            }
            if let Some(d) = v.delta {
                if d != 1 && d != -1 {
                    return Err(Error::Config(format!(
                        "variable {}: delta must be +1 or -1",
                        v.name
                    )));
                }
            }
            for spec in &v.random_events {
                spec.validate()?;
            }
        }
        for d in &self.dependent {
            if let Some(n) = &d.noise {
                n.validate()?;
            }
            if !d.kn.is_finite() || d.kn < 0.0 {
                return Err(Error::Config(format!(
                    "dependent {}: kn must be finite and non-negative",
                    d.name
                )));
            }
            for p in self.parent_indices(d)? {
                if self.variables[p].noise.sigma() <= 0.0 {
                    return Err(Error::Config(format!(
                        "dependent {}: source {} needs sigma > 0 for standardization",
                        d.name, self.variables[p].name
                    )));
                }
            }
        }
        if self.coupling.coupled_count > self.variables.len() {
            return Err(Error::Config(
                "coupled_count exceeds the number of independent variables".into(),
            ));
        }
        Ok(())
    }

    fn parent_indices(&self, dep: &DependentSpec) -> Result<Vec<usize>> {
        match &dep.parents {
            None => Ok((0..self.variables.len()).collect()),
            Some(names) => {
                if names.is_empty() {
                    return Err(Error::Config(format!(
                        "dependent {}: parents must not be empty",
                        dep.name
                    )));
                }
                names
                    .iter()
                    .map(|n| {
                        self.variables.iter().position(|v| &v.name == n).ok_or_else(|| {
                            Error::Config(format!("dependent {}: unknown parent {n}", dep.name))
                        })
                    })
                    .collect()
            }
        }
    }
}

/// Everything the per-voxel rule needs.
#[derive(Debug, Clone, Copy)]
pub struct PointParams {
    pub base: f64,
    pub noise: f64,
    /// Noise scale, used for the ks bump.
    pub sigma: f64,
    pub kb: f64,
    pub kn: f64,
    pub ks: f64,
    /// Driver sign of the variable, +1.0 or -1.0.
    pub delta: f64,
    pub e_random: bool,
    pub e_driver: bool,
    pub e_extreme: bool,
}

#[inline]
fn on(flag: bool) -> f64 {
    if flag {
        1.0
    } else {
        0.0
    }
}

/// The value of one voxel. Anomaly-free voxels come out as exactly
/// base + noise; at driver voxels the deviation from the base takes the
/// variable's sign delta (or vanishes when the magnitude is zero).
#[inline]
pub fn synthesize_point(p: PointParams) -> f64 {
    let e_anom = on(p.e_random || p.e_driver);
    let theta = p.base * ((p.kb * e_anom).exp2() - 1.0)
        + p.noise * (p.kn * e_anom).exp2()
        + p.ks * on(p.e_random || p.e_extreme) * p.sigma;
    let magnitude_sign = if theta > 0.0 { 1.0 } else { -1.0 };
    let lambda = if p.e_driver { magnitude_sign / p.delta } else { 1.0 };
    p.base + lambda * theta
}

/// Share of each mask in percent of the labeled voxels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RatioReport {
    pub extreme_pct: f64,
    pub correlated_pct: f64,
    pub random_pct: f64,
}

/// Per-variable coupling draw and mask densities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableReport {
    pub name: String,
    pub coupled: bool,
    pub delta: i8,
    pub lead: usize,
    pub lag: usize,
    pub driver_pct: f64,
    pub random_pct: f64,
}

/// Summary written next to a generated cube.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub vars: usize,
    pub t: usize,
    pub lat: usize,
    pub lon: usize,
    pub weeks_per_year: usize,
    pub valid_pixels: u64,
    pub train_weeks: [usize; 2],
    pub val_weeks: [usize; 2],
    pub test_weeks: [usize; 2],
    pub ratios: RatioReport,
    pub variables: Vec<VariableReport>,
}

/// Generated dataset: values, ground truth, summary, and the event ledger.
pub struct Synthesis {
    pub cube: DataCube,
    pub masks: MaskSet,
    pub report: SynthesisReport,
    pub ledger: Vec<LedgerEntry>,
}

fn build_valid(dims: Dims3, margin: usize) -> Vec<u8> {
    let mut valid = vec![0u8; dims.plane()];
    for y in margin..dims.lat - margin {
        for x in margin..dims.lon - margin {
            valid[y * dims.lon + x] = 1;
        }
    }
    valid
}

/// Fills one variable's values from its noise field and masks. Runs over
/// time planes in parallel; every input is precomputed, so scheduling cannot
/// affect the result.
#[allow(clippy::too_many_arguments)]
fn fill_variable(
    out: &mut [f32],
    dims: Dims3,
    eval: &BaseEval,
    noise: &[f32],
    valid: &[u8],
    var: &VariableSpec,
    delta: f64,
    drivers: &BitGrid,
    random: &BitGrid,
    extremes: &[u8],
) {
    let plane = dims.plane();
    let sigma = var.noise.sigma();
    out.par_chunks_mut(plane).enumerate().for_each(|(t, dst)| {
        let mut base_plane = vec![0f64; plane];
        eval.fill_plane(t, dims.lat, dims.lon, &mut base_plane);
        let off = t * plane;
        for p in 0..plane {
            if valid[p] == 0 {
                dst[p] = f32::NAN;
                continue;
            }
            let i = off + p;
            dst[p] = synthesize_point(PointParams {
                base: base_plane[p],
                noise: noise[i] as f64,
                sigma,
                kb: var.kb,
                kn: var.kn,
                ks: var.ks,
                delta,
                e_random: random.get(i),
                e_driver: drivers.get(i),
                e_extreme: extremes[i] == 1,
            }) as f32;
        }
    });
}

/// Fills one dependent variable from its sources' finished values.
#[allow(clippy::too_many_arguments)]
fn fill_dependent(
    out: &mut [f32],
    dims: Dims3,
    dep: &DependentSpec,
    parents: &[usize],
    weights: &[f64],
    primaries: &[f32],
    parent_evals: &[BaseEval],
    parent_sigmas: &[f64],
    own_noise: Option<&[f32]>,
    valid: &[u8],
    random_masks: &[BitGrid],
) {
    let plane = dims.plane();
    let per_var = dims.len();
    out.par_chunks_mut(plane).enumerate().for_each(|(t, dst)| {
        let bases: Vec<Vec<f64>> = parents
            .iter()
            .map(|&pi| {
                let mut b = vec![0f64; plane];
                parent_evals[pi].fill_plane(t, dims.lat, dims.lon, &mut b);
                b
            })
            .collect();
        let off = t * plane;
        let mut devs = vec![0f64; parents.len()];
        let mut disturb = vec![1f64; parents.len()];
        for p in 0..plane {
            if valid[p] == 0 {
                dst[p] = f32::NAN;
                continue;
            }
            let i = off + p;
            for (k, &pi) in parents.iter().enumerate() {
                let x = primaries[pi * per_var + i] as f64;
                devs[k] = (x - bases[k][p]) / parent_sigmas[pi];
                disturb[k] = (dep.kn * on(random_masks[pi].get(i))).exp2();
            }
            let mut val = signal::couple_at(dep.coupling, &devs, weights, &disturb);
            if let Some(n) = own_noise {
                val += n[i] as f64;
            }
            dst[p] = val as f32;
        }
    });
}

/// Generates the full dataset described by `cfg`. Bit-identical for any
/// thread count because every random draw is keyed by indices, not order.
pub fn synthesize_dataset(cfg: &GenConfig) -> Result<Synthesis> {
    cfg.validate()?;
    let dims = cfg.dims3();
    let n_primary = cfg.variables.len();
    let n_total = cfg.var_count();
    let full = Dims { vars: n_total, t: dims.t, lat: dims.lat, lon: dims.lon };
    let per_var = dims.len();
    let valid = build_valid(dims, cfg.grid.invalid_margin);

    let (extremes, mut ledger) =
        events::place_extremes(&cfg.extreme_events, dims, &valid, cfg.seed)?;
    let pins: Vec<CouplingPin> = cfg
        .variables
        .iter()
        .map(|v| CouplingPin {
            coupled: v.coupled,
            delta: v.delta,
            lead: v.lead,
            lag: v.lag,
        })
        .collect();
    let coupling = events::build_coupling(
        &pins,
        cfg.coupling.coupled_count,
        cfg.coupling.lead_max,
        cfg.coupling.lag_max,
        cfg.seed,
    )?;
    let mut drivers: Vec<BitGrid> = (0..n_primary)
        .map(|v| {
            if coupling.coupled[v] {
                events::derive_driver_mask(&extremes, dims, coupling.lead[v], coupling.lag[v])
            } else {
                BitGrid::zeros(per_var)
            }
        })
        .collect();
    let random_specs: Vec<Vec<EventSpec>> =
        cfg.variables.iter().map(|v| v.random_events.clone()).collect();
    let (mut random, random_ledger) =
        events::place_random_anomalies(&random_specs, dims, &valid, cfg.seed)?;
    ledger.extend(random_ledger);

    let mut values = vec![0f32; full.len()];
    for (v, var) in cfg.variables.iter().enumerate() {
        let eval = BaseEval::new(&var.base, dims, cfg.grid.weeks_per_year)?;
        let noise = signal::gen_noise(&var.noise, dims, cfg.seed, v)?;
        fill_variable(
            &mut values[v * per_var..(v + 1) * per_var],
            dims,
            &eval,
            &noise,
            &valid,
            var,
            coupling.delta[v] as f64,
            &drivers[v],
            &random[v],
            &extremes,
        );
    }

    if !cfg.dependent.is_empty() {
        let parent_evals: Vec<BaseEval> = cfg
            .variables
            .iter()
            .map(|v| BaseEval::new(&v.base, dims, cfg.grid.weeks_per_year))
            .collect::<Result<_>>()?;
        let parent_sigmas: Vec<f64> =
            cfg.variables.iter().map(|v| v.noise.sigma()).collect();
        let (primaries, dep_values) = values.split_at_mut(n_primary * per_var);
        for (d, dep) in cfg.dependent.iter().enumerate() {
            let parents = cfg.parent_indices(dep)?;
            let weights =
                signal::sample_weights(dep.weights, parents.len(), cfg.seed, d as u64);
            let own_noise = match &dep.noise {
                Some(spec) => Some(signal::gen_noise(spec, dims, cfg.seed, n_primary + d)?),
                None => None,
            };
            fill_dependent(
                &mut dep_values[d * per_var..(d + 1) * per_var],
                dims,
                dep,
                &parents,
                &weights,
                primaries,
                &parent_evals,
                &parent_sigmas,
                own_noise.as_deref(),
                &valid,
                &random[..n_primary],
            );
            // The dependent variable inherits every source anomaly.
            let mut dep_random = BitGrid::zeros(per_var);
            let mut dep_drivers = BitGrid::zeros(per_var);
            for &pi in &parents {
                dep_random.or_assign(&random[pi]);
                dep_drivers.or_assign(&drivers[pi]);
            }
            random.push(dep_random);
            drivers.push(dep_drivers);
        }
    }

    let mut var_names: Vec<String> = cfg.variables.iter().map(|v| v.name.clone()).collect();
    var_names.extend(cfg.dependent.iter().map(|d| d.name.clone()));
    let mut units: Vec<String> = cfg.variables.iter().map(|v| v.units.clone()).collect();
    units.extend(cfg.dependent.iter().map(|d| d.units.clone()));

    let cube = DataCube {
        dims: full,
        var_names,
        units,
        weeks_per_year: cfg.grid.weeks_per_year,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        values,
        valid,
    };
    cube.validate()?;
    let masks = MaskSet { dims: full, extremes, drivers, random };
    masks.validate(full)?;

    let report = build_report(cfg, &cube, &masks, &coupling);
    Ok(Synthesis { cube, masks, report, ledger })
}

fn build_report(
    cfg: &GenConfig,
    cube: &DataCube,
    masks: &MaskSet,
    coupling: &events::Coupling,
) -> SynthesisReport {
    let dims = cfg.dims3();
    let n_primary = cfg.variables.len();
    let valid_pixels = cube.valid_count();
    let voxels = (valid_pixels * dims.t as u64).max(1);
    let pct = |count: u64| 100.0 * count as f64 / voxels as f64;

    let extreme_count: u64 = masks.extremes.iter().map(|&b| b as u64).sum();
    let mut variables = Vec::with_capacity(cube.dims.vars);
    let mut driver_total = 0u64;
    let mut random_total = 0u64;
    for v in 0..cube.dims.vars {
        let d = masks.drivers[v].count_ones();
        let r = masks.random[v].count_ones();
        driver_total += d;
        random_total += r;
        let primary = v < n_primary;
        variables.push(VariableReport {
            name: cube.var_names[v].clone(),
            coupled: if primary { coupling.coupled[v] } else { d > 0 },
            delta: if primary { coupling.delta[v] } else { 1 },
            lead: if primary { coupling.lead[v] } else { 0 },
            lag: if primary { coupling.lag[v] } else { 0 },
            driver_pct: pct(d),
            random_pct: pct(r),
        });
    }
    let ranges = cfg.week_ranges();
    SynthesisReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        vars: cube.dims.vars,
        t: dims.t,
        lat: dims.lat,
        lon: dims.lon,
        weeks_per_year: cfg.grid.weeks_per_year,
        valid_pixels,
        train_weeks: [ranges.train.start, ranges.train.end],
        val_weeks: [ranges.val.start, ranges.val.end],
        test_weeks: [ranges.test.start, ranges.test.end],
        ratios: RatioReport {
            extreme_pct: pct(extreme_count),
            correlated_pct: pct(driver_total) / cube.dims.vars as f64,
            random_pct: pct(random_total) / cube.dims.vars as f64,
        },
        variables,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    /// Small two-variable recipe used by most tests below.
    fn small_config() -> GenConfig {
        GenConfig {
            name: "unit".into(),
            seed: 17,
            grid: GridSpec { lat: 16, lon: 18, years: 2, weeks_per_year: 52, invalid_margin: 1 },
            splits: SplitSpec { train_years: 1, val_years: 1, test_years: 0 },
            coupling: CouplingSpec { coupled_count: 1, lead_max: 3, lag_max: 2 },
            extreme_events: vec![
                EventSpec::Cube { n: 6, sx: 4, sy: 4, sz: 4 },
                EventSpec::Local { n: 4, sz: 5 },
            ],
            variables: vec![
                VariableSpec {
                    name: "a".into(),
                    units: "1".into(),
                    base: BaseSpec::Sine { shift: 10.0, amp: 2.0, n_osc: 2.0, lat_grad: false },
                    noise: NoiseSpec::White { meu: 0.0, sigma: 0.1 },
                    kb: 0.2,
                    kn: 0.1,
                    ks: 0.5,
                    coupled: Some(true),
                    delta: Some(-1),
                    lead: None,
                    lag: None,
                    random_events: vec![EventSpec::Local { n: 5, sz: 3 }],
                },
                VariableSpec {
                    name: "b".into(),
                    units: "K".into(),
                    base: BaseSpec::Constant { value: 5.0, lat_grad: true },
                    noise: NoiseSpec::White { meu: 0.0, sigma: 0.2 },
                    kb: 0.1,
                    kn: 0.3,
                    ks: 0.0,
                    coupled: Some(false),
                    delta: None,
                    lead: None,
                    lag: None,
                    random_events: vec![EventSpec::Cube { n: 2, sx: 3, sy: 3, sz: 3 }],
                },
            ],
            dependent: vec![],
        }
    }

    /// Independent expansion of the voxel rule using a different power path.
    #[allow(clippy::too_many_arguments)]
    fn point_oracle(
        b: f64,
        n: f64,
        sigma: f64,
        kb: f64,
        kn: f64,
        ks: f64,
        delta: f64,
        e_r: bool,
        e_d: bool,
        e_x: bool,
    ) -> f64 {
        let ind = |f: bool| if f { 1.0 } else { 0.0 };
        let theta = b * (2f64.powf(kb * ind(e_r || e_d)) - 1.0)
            + n * 2f64.powf(kn * ind(e_r || e_d))
            + ks * ind(e_r || e_x) * sigma;
        let s = if theta > 0.0 { 1.0 } else { -1.0 };
        let lambda = if e_d { s / delta } else { 1.0 };
        b + lambda * theta
    }

    #[test]
    fn point_rule_matches_reference_expansion() {
        let mut r = rng::stream(99, "noise", &[0, 0]);
        for _ in 0..10_000 {
            let b = r.gen_range(-20.0..20.0);
            let n = r.gen_range(-3.0..3.0);
            let sigma = r.gen_range(0.0..2.0);
            let kb = r.gen_range(0.0..0.5);
            let kn = r.gen_range(0.0..0.5);
            let ks = r.gen_range(0.0..1.0);
            let delta = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            let (e_r, e_d, e_x) = (r.gen_bool(0.3), r.gen_bool(0.3), r.gen_bool(0.3));
            let got = synthesize_point(PointParams {
                base: b,
                noise: n,
                sigma,
                kb,
                kn,
                ks,
                delta,
                e_random: e_r,
                e_driver: e_d,
                e_extreme: e_x,
            });
            let want = point_oracle(b, n, sigma, kb, kn, ks, delta, e_r, e_d, e_x);
            let tol = 1e-12 * want.abs().max(1.0);
            assert!((got - want).abs() <= tol, "{got} vs {want}");
        }
    }

    #[test]
    fn point_rule_worked_example() {
        // b=10, kb=0.3, kn=0.2, ks=0.5, sigma=0.01, n=0.005, driver voxel:
        // theta = 10*(2^0.3 - 1) + 0.005*2^0.2 = 2.3171876252241482.
        let mut p = PointParams {
            base: 10.0,
            noise: 0.005,
            sigma: 0.01,
            kb: 0.3,
            kn: 0.2,
            ks: 0.5,
            delta: 1.0,
            e_random: false,
            e_driver: true,
            e_extreme: false,
        };
        assert!((synthesize_point(p) - 12.317187625224148).abs() < 1e-9);
        p.delta = -1.0;
        assert!((synthesize_point(p) - 7.682812374775852).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn anomaly_free_voxels_are_exactly_base_plus_noise(
            b in -50.0f64..50.0,
            n in -5.0f64..5.0,
            sigma in 0.0f64..2.0,
            kb in 0.0f64..1.0,
            kn in 0.0f64..1.0,
            ks in 0.0f64..1.0,
        ) {
            let got = synthesize_point(PointParams {
                base: b, noise: n, sigma, kb, kn, ks, delta: 1.0,
                e_random: false, e_driver: false, e_extreme: false,
            });
            prop_assert_eq!(got.to_bits(), (b + n).to_bits());
        }

        #[test]
        fn driver_voxels_deviate_with_the_coupling_sign(
            b in -50.0f64..50.0,
            n in -5.0f64..5.0,
            kb in 0.0f64..1.0,
            kn in 0.0f64..1.0,
            neg in proptest::bool::ANY,
            e_r in proptest::bool::ANY,
        ) {
            let delta = if neg { -1.0 } else { 1.0 };
            let got = synthesize_point(PointParams {
                base: b, noise: n, sigma: 0.3, kb, kn, ks: 0.5, delta,
                e_random: e_r, e_driver: true, e_extreme: false,
            });
            let dev = got - b;
            prop_assert!(dev == 0.0 || dev.signum() == delta,
                "deviation {dev} fights delta {delta}");
        }
    }

    #[test]
    fn config_toml_round_trips() {
        let cfg = small_config();
        let text = cfg.to_toml_string().unwrap();
        let back = GenConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn config_validation_rejects_bad_recipes() {
        let mut cfg = small_config();
        cfg.splits.test_years = 3;
        assert!(cfg.validate().is_err(), "split years must sum to grid years");

        let mut cfg = small_config();
        cfg.variables[1].name = "a".into();
        assert!(cfg.validate().is_err(), "duplicate names");

        let mut cfg = small_config();
        cfg.grid.invalid_margin = 8;
        assert!(cfg.validate().is_err(), "margin swallows the grid");

        let mut cfg = small_config();
        cfg.variables[0].kb = -0.1;
        assert!(cfg.validate().is_err(), "negative kb");

        let mut cfg = small_config();
        cfg.dependent.push(DependentSpec {
            name: "dep".into(),
            units: "1".into(),
            coupling: CouplingKind::Linear,
            weights: WeightSpec::Norm,
            kn: 0.0,
            noise: None,
            parents: Some(vec!["nope".into()]),
        });
        assert!(cfg.validate().is_err(), "unknown parent");
    }

    #[test]
    fn week_ranges_partition_the_series() {
        let cfg = small_config();
        let r = cfg.week_ranges();
        assert_eq!(r.train, 0..52);
        assert_eq!(r.val, 52..104);
        assert_eq!(r.test, 104..104);
        assert_eq!(r.get("val"), Some(52..104));
        assert_eq!(r.get("bogus"), None);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let cfg = small_config();
        let a = synthesize_dataset(&cfg).unwrap();
        let b = synthesize_dataset(&cfg).unwrap();
        let bits = |xs: &[f32]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.cube.values), bits(&b.cube.values));
        assert_eq!(a.masks.extremes, b.masks.extremes);
        assert_eq!(a.masks.drivers, b.masks.drivers);
        assert_eq!(a.cube.config_hash, b.cube.config_hash);
    }

    #[test]
    fn synthesis_reconstructs_per_voxel() {
        // Re-derive a sample of voxels from masks, bases, and noise streams.
        let cfg = small_config();
        let out = synthesize_dataset(&cfg).unwrap();
        let dims = cfg.dims3();
        let per_var = dims.len();
        for (v, var) in cfg.variables.iter().enumerate() {
            let eval = BaseEval::new(&var.base, dims, 52).unwrap();
            let noise = signal::gen_noise(&var.noise, dims, cfg.seed, v).unwrap();
            let delta = out.report.variables[v].delta as f64;
            for i in (0..per_var).step_by(97) {
                let p = i % dims.plane();
                if out.cube.valid[p] == 0 {
                    assert!(out.cube.values[v * per_var + i].is_nan());
                    continue;
                }
                let t = i / dims.plane();
                let y = p / dims.lon;
                let x = p % dims.lon;
                let want = synthesize_point(PointParams {
                    base: eval.at(t, y, x, dims.lat, dims.lon),
                    noise: noise[i] as f64,
                    sigma: var.noise.sigma(),
                    kb: var.kb,
                    kn: var.kn,
                    ks: var.ks,
                    delta,
                    e_random: out.masks.random[v].get(i),
                    e_driver: out.masks.drivers[v].get(i),
                    e_extreme: out.masks.extremes[i] == 1,
                }) as f32;
                assert_eq!(out.cube.values[v * per_var + i].to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn uncoupled_variables_have_empty_driver_masks() {
        let cfg = small_config();
        let out = synthesize_dataset(&cfg).unwrap();
        assert!(out.report.variables[0].coupled);
        assert!(!out.report.variables[1].coupled);
        assert_eq!(out.masks.drivers[1].count_ones(), 0);
        assert!(out.masks.drivers[0].count_ones() > 0);
        // Drivers contain the extremes for the coupled variable.
        for (i, &e) in out.masks.extremes.iter().enumerate() {
            if e == 1 {
                assert!(out.masks.drivers[0].get(i));
            }
        }
    }

    #[test]
    fn report_ratios_match_mask_counts() {
        let cfg = small_config();
        let out = synthesize_dataset(&cfg).unwrap();
        let dims = cfg.dims3();
        let voxels = out.cube.valid_count() * dims.t as u64;
        let ext: u64 = out.masks.extremes.iter().map(|&b| b as u64).sum();
        let want = 100.0 * ext as f64 / voxels as f64;
        assert!((out.report.ratios.extreme_pct - want).abs() < 1e-12);
        assert!(out.report.ratios.random_pct > 0.0);
        let ledger_extremes =
            out.ledger.iter().filter(|e| e.mask == "extreme").count();
        assert_eq!(ledger_extremes, 10, "6 cubes + 4 locals placed");
    }

    #[test]
    fn dependent_variable_recombines_its_sources() {
        let mut cfg = small_config();
        cfg.dependent.push(DependentSpec {
            name: "dep".into(),
            units: "1".into(),
            coupling: CouplingKind::Linear,
            weights: WeightSpec::Norm,
            kn: 0.4,
            noise: Some(NoiseSpec::White { meu: 0.0, sigma: 0.05 }),
            parents: None,
        });
        let out = synthesize_dataset(&cfg).unwrap();
        assert_eq!(out.cube.dims.vars, 3);
        let dims = cfg.dims3();
        let per_var = dims.len();
        let weights = signal::sample_weights(WeightSpec::Norm, 2, cfg.seed, 0);
        let own = signal::gen_noise(
            &NoiseSpec::White { meu: 0.0, sigma: 0.05 },
            dims,
            cfg.seed,
            2,
        )
        .unwrap();
        let evals: Vec<BaseEval> = cfg
            .variables
            .iter()
            .map(|v| BaseEval::new(&v.base, dims, 52).unwrap())
            .collect();
        for i in (0..per_var).step_by(131) {
            let p = i % dims.plane();
            if out.cube.valid[p] == 0 {
                continue;
            }
            let t = i / dims.plane();
            let (y, x) = (p / dims.lon, p % dims.lon);
            let mut devs = [0f64; 2];
            let mut disturb = [0f64; 2];
            for v in 0..2 {
                let base = evals[v].at(t, y, x, dims.lat, dims.lon);
                let sigma = cfg.variables[v].noise.sigma();
                devs[v] = (out.cube.values[v * per_var + i] as f64 - base) / sigma;
                disturb[v] =
                    (0.4 * on(out.masks.random[v].get(i))).exp2();
            }
            let want = (signal::couple_at(CouplingKind::Linear, &devs, &weights, &disturb)
                + own[i] as f64) as f32;
            assert_eq!(out.cube.values[2 * per_var + i].to_bits(), want.to_bits());
        }
        // Union ground truth: dependent anomalies are the sources' anomalies.
        let mut union = out.masks.random[0].clone();
        union.or_assign(&out.masks.random[1]);
        assert_eq!(out.masks.random[2], union);
        assert_eq!(out.masks.drivers[2], out.masks.drivers[0]);
    }
}
