//! Event shape generators, extreme placement, coupling, and driver masks.
//!
//! Extent sampling: cube, local, and onset extents are drawn uniform integer
//! in [1, max] per axis; Gaussian ellipsoid semi-axes uniform in
//! [1, max(1, extent/4)]; walk lengths are fixed. These ranges are calibrated
//! so the reference configuration reproduces the published mask densities.
//!
//! Every event gets its own RNG stream keyed by (seed, tag, spec index,
//! instance index), so placement is independent of thread scheduling. The
//! draw order inside one event is a fixed contract, tested by replay.

use crate::error::{Error, Result};
use crate::grid::{BitGrid, Dims3};
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// One family of anomaly events. `n` instances are placed per family.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventSpec {
    /// Axis-aligned box with extents up to (sx, sy) spatial and sz temporal.
    Cube { n: usize, sx: usize, sy: usize, sz: usize },
    /// Spatial random walk of `s` steps that drifts forward in time.
    RandomWalk { n: usize, s: usize },
    /// Single pixel with a temporal extent up to sz.
    Local { n: usize, sz: usize },
    /// Ellipsoid with semi-axes up to (sx/4, sy/4, sz/4).
    Gaussian { n: usize, sx: usize, sy: usize, sz: usize },
    /// Box of up to sx x sy appearing near fraction `os` of the series and
    /// persisting until the end.
    Onset { n: usize, sx: usize, sy: usize, os: f64 },
}

impl EventSpec {
    pub fn count(&self) -> usize {
        match self {
            EventSpec::Cube { n, .. }
            | EventSpec::RandomWalk { n, .. }
            | EventSpec::Local { n, .. }
            | EventSpec::Gaussian { n, .. }
            | EventSpec::Onset { n, .. } => *n,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            EventSpec::Cube { .. } => "cube",
            EventSpec::RandomWalk { .. } => "random_walk",
            EventSpec::Local { .. } => "local",
            EventSpec::Gaussian { .. } => "gaussian",
            EventSpec::Onset { .. } => "onset",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("{}: {msg}", self.kind_name())));
        match *self {
            EventSpec::Cube { sx, sy, sz, .. } | EventSpec::Gaussian { sx, sy, sz, .. } => {
                if sx == 0 || sy == 0 || sz == 0 {
                    return bad("extents must be positive");
                }
            }
            EventSpec::RandomWalk { s, .. } => {
                if s == 0 {
                    return bad("walk length must be positive");
                }
            }
            EventSpec::Local { sz, .. } => {
                if sz == 0 {
                    return bad("duration must be positive");
                }
            }
            EventSpec::Onset { sx, sy, os, .. } => {
                if sx == 0 || sy == 0 {
                    return bad("extents must be positive");
                }
                if !(0.0..1.0).contains(&os) {
                    return bad("onset fraction must lie in [0, 1)");
                }
            }
        }
        Ok(())
    }
}

/// Generates the voxel set of one event instance as flat (T,Lat,Lon) indices.
/// The set is deduplicated and sorted; events are clipped to the grid.
pub fn gen_event(spec: &EventSpec, dims: Dims3, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    spec.validate()?;
    if dims.len() == 0 {
        return Err(Error::Config("event grid must be non-empty".into()));
    }
    let mut vox = match *spec {
        EventSpec::Cube { sx, sy, sz, .. } => {
            let a = rng.gen_range(1..=sx);
            let b = rng.gen_range(1..=sy);
            let c = rng.gen_range(1..=sz);
            let t0 = rng.gen_range(0..dims.t);
            let y0 = rng.gen_range(0..dims.lat);
            let x0 = rng.gen_range(0..dims.lon);
            let mut out = Vec::with_capacity(a * b * c);
            for t in t0..(t0 + c).min(dims.t) {
                for y in y0..(y0 + b).min(dims.lat) {
                    for x in x0..(x0 + a).min(dims.lon) {
                        out.push(dims.idx(t, y, x));
                    }
                }
            }
            out
        }
        EventSpec::RandomWalk { s, .. } => {
            let mut t = rng.gen_range(0..dims.t);
            let mut y = rng.gen_range(0..dims.lat) as isize;
            let mut x = rng.gen_range(0..dims.lon) as isize;
            let mut out = Vec::with_capacity(s + 1);
            out.push(dims.idx(t, y as usize, x as usize));
            for _ in 0..s {
                match rng.gen_range(0..4u32) {
                    0 => y += 1,
                    1 => y -= 1,
                    2 => x += 1,
                    _ => x -= 1,
                }
                y = y.clamp(0, dims.lat as isize - 1);
                x = x.clamp(0, dims.lon as isize - 1);
                if rng.gen_bool(0.5) {
                    t += 1;
                    if t >= dims.t {
                        break;
                    }
                }
                out.push(dims.idx(t, y as usize, x as usize));
            }
            out
        }
        EventSpec::Local { sz, .. } => {
            let d = rng.gen_range(1..=sz);
            let t0 = rng.gen_range(0..dims.t);
            let y = rng.gen_range(0..dims.lat);
            let x = rng.gen_range(0..dims.lon);
            (t0..(t0 + d).min(dims.t)).map(|t| dims.idx(t, y, x)).collect()
        }
        EventSpec::Gaussian { sx, sy, sz, .. } => {
            let rx = rng.gen_range(1.0..=(sx as f64 / 4.0).max(1.0));
            let ry = rng.gen_range(1.0..=(sy as f64 / 4.0).max(1.0));
            let rz = rng.gen_range(1.0..=(sz as f64 / 4.0).max(1.0));
            let ct = rng.gen_range(0..dims.t) as f64;
            let cy = rng.gen_range(0..dims.lat) as f64;
            let cx = rng.gen_range(0..dims.lon) as f64;
            let mut out = Vec::new();
            let t_lo = ((ct - rz).floor().max(0.0)) as usize;
            let t_hi = ((ct + rz).ceil() as usize).min(dims.t - 1);
            let y_lo = ((cy - ry).floor().max(0.0)) as usize;
            let y_hi = ((cy + ry).ceil() as usize).min(dims.lat - 1);
            let x_lo = ((cx - rx).floor().max(0.0)) as usize;
            let x_hi = ((cx + rx).ceil() as usize).min(dims.lon - 1);
            for t in t_lo..=t_hi {
                let dt = (t as f64 - ct) / rz;
                for y in y_lo..=y_hi {
                    let dy = (y as f64 - cy) / ry;
                    for x in x_lo..=x_hi {
                        let dx = (x as f64 - cx) / rx;
                        if dt * dt + dy * dy + dx * dx <= 1.0 {
                            out.push(dims.idx(t, y, x));
                        }
                    }
                }
            }
            out
        }
        EventSpec::Onset { sx, sy, os, .. } => {
            let a = rng.gen_range(1..=sx);
            let b = rng.gen_range(1..=sy);
            let jitter_max = dims.t / 50;
            let jitter = if jitter_max > 0 { rng.gen_range(0..=jitter_max) } else { 0 };
            let t0 = (((os * dims.t as f64).round() as usize) + jitter).min(dims.t - 1);
            let y0 = rng.gen_range(0..dims.lat);
            let x0 = rng.gen_range(0..dims.lon);
            let mut out = Vec::new();
            for t in t0..dims.t {
                for y in y0..(y0 + b).min(dims.lat) {
                    for x in x0..(x0 + a).min(dims.lon) {
                        out.push(dims.idx(t, y, x));
                    }
                }
            }
            out
        }
    };
    vox.sort_unstable();
    vox.dedup();
    Ok(vox)
}

/// One placed event instance, recorded for the generation ledger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerEntry {
    /// "extreme" or "random".
    pub mask: String,
    /// Variable index for random anomalies, absent for shared extremes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variable: Option<usize>,
    pub kind: String,
    pub spec_index: usize,
    pub instance: usize,
    /// Voxels contributed after clipping to the grid and the valid mask.
    pub voxels: usize,
    /// [t_min, t_max, lat_min, lat_max, lon_min, lon_max], absent when empty.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[usize; 6]>,
}

fn bbox_of(vox: &[usize], dims: Dims3) -> Option<[usize; 6]> {
    if vox.is_empty() {
        return None;
    }
    let mut b = [usize::MAX, 0, usize::MAX, 0, usize::MAX, 0];
    for &i in vox {
        let t = i / dims.plane();
        let rem = i % dims.plane();
        let y = rem / dims.lon;
        let x = rem % dims.lon;
        b[0] = b[0].min(t);
        b[1] = b[1].max(t);
        b[2] = b[2].min(y);
        b[3] = b[3].max(y);
        b[4] = b[4].min(x);
        b[5] = b[5].max(x);
    }
    Some(b)
}

/// Generates every instance of every spec, intersected with the valid pixel
/// mask. If an instance comes out empty it is resampled once from the same
/// stream, then accepted as is.
fn generate_instances(
    specs: &[EventSpec],
    dims: Dims3,
    valid: &[u8],
    seed: u64,
    tag: &str,
    key_prefix: &[u64],
) -> Result<Vec<(usize, usize, Vec<usize>)>> {
    for spec in specs {
        spec.validate()?;
    }
    let jobs: Vec<(usize, usize)> = specs
        .iter()
        .enumerate()
        .flat_map(|(si, spec)| (0..spec.count()).map(move |i| (si, i)))
        .collect();
    let plane = dims.plane();
    jobs.into_par_iter()
        .map(|(si, i)| {
            let mut key = key_prefix.to_vec();
            key.push(si as u64);
            key.push(i as u64);
            let mut r = rng::stream(seed, tag, &key);
            let clip =
                |mut v: Vec<usize>| -> Vec<usize> {
                    v.retain(|&idx| valid[idx % plane] == 1);
                    v
                };
            let mut vox = clip(gen_event(&specs[si], dims, &mut r)?);
            if vox.is_empty() {
                vox = clip(gen_event(&specs[si], dims, &mut r)?);
            }
            Ok((si, i, vox))
        })
        .collect()
}

/// Places the shared extreme-event mask: the OR over all instances of all
/// specs, restricted to valid pixels. Returns the (T,Lat,Lon) mask and one
/// ledger entry per instance.
pub fn place_extremes(
    specs: &[EventSpec],
    dims: Dims3,
    valid: &[u8],
    seed: u64,
) -> Result<(Vec<u8>, Vec<LedgerEntry>)> {
    if valid.len() != dims.plane() {
        return Err(Error::Shape("valid mask does not match grid".into()));
    }
    let instances = generate_instances(specs, dims, valid, seed, "extreme-event", &[])?;
    let mut mask = vec![0u8; dims.len()];
    let mut ledger = Vec::with_capacity(instances.len());
    for (si, i, vox) in instances {
        for &idx in &vox {
            mask[idx] = 1;
        }
        ledger.push(LedgerEntry {
            mask: "extreme".into(),
            variable: None,
            kind: specs[si].kind_name().into(),
            spec_index: si,
            instance: i,
            voxels: vox.len(),
            bbox: bbox_of(&vox, dims),
        });
    }
    Ok((mask, ledger))
}

/// Places per-variable random-anomaly masks, one independent stream per
/// (variable, spec, instance).
pub fn place_random_anomalies(
    specs_per_var: &[Vec<EventSpec>],
    dims: Dims3,
    valid: &[u8],
    seed: u64,
) -> Result<(Vec<BitGrid>, Vec<LedgerEntry>)> {
    if valid.len() != dims.plane() {
        return Err(Error::Shape("valid mask does not match grid".into()));
    }
    let mut masks = Vec::with_capacity(specs_per_var.len());
    let mut ledger = Vec::new();
    for (v, specs) in specs_per_var.iter().enumerate() {
        let instances =
            generate_instances(specs, dims, valid, seed, "random-event", &[v as u64])?;
        let mut grid = BitGrid::zeros(dims.len());
        for (si, i, vox) in instances {
            for &idx in &vox {
                grid.set(idx);
            }
            ledger.push(LedgerEntry {
                mask: "random".into(),
                variable: Some(v),
                kind: specs[si].kind_name().into(),
                spec_index: si,
                instance: i,
                voxels: vox.len(),
                bbox: bbox_of(&vox, dims),
            });
        }
        masks.push(grid);
    }
    Ok((masks, ledger))
}

/// Per-variable pins from the config: any of the coupled flag, the driver
/// sign, and the lead/lag window can be fixed instead of drawn.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CouplingPin {
    pub coupled: Option<bool>,
    pub delta: Option<i8>,
    pub lead: Option<usize>,
    pub lag: Option<usize>,
}

/// Which variables couple to the extremes and how their anomalies behave.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Coupling {
    pub coupled: Vec<bool>,
    /// Driver sign per variable (+1 or -1; unused entries are +1).
    pub delta: Vec<i8>,
    /// Steps a driver precedes its extreme, per variable.
    pub lead: Vec<usize>,
    /// Steps a driver trails its extreme, per variable.
    pub lag: Vec<usize>,
}

impl Coupling {
    pub fn coupled_count(&self) -> usize {
        self.coupled.iter().filter(|&&c| c).count()
    }
}

/// Selects exactly `coupled_count` coupled variables (honoring pins) and
/// takes each coupled variable's sign, lead, and lag from its pin when set,
/// drawing the rest: sign uniform over +-1, lead uniform in [1, lead_max],
/// lag uniform in [0, lag_max].
pub fn build_coupling(
    pins: &[CouplingPin],
    coupled_count: usize,
    lead_max: usize,
    lag_max: usize,
    seed: u64,
) -> Result<Coupling> {
    let vars = pins.len();
    if coupled_count > vars {
        return Err(Error::Config(format!(
            "coupled_count {coupled_count} exceeds {vars} variables"
        )));
    }
    if lead_max == 0 {
        return Err(Error::Config("lead_max must be at least 1".into()));
    }
    for (v, pin) in pins.iter().enumerate() {
        if pin.lead.is_some_and(|l| l == 0 || l > lead_max) {
            return Err(Error::Config(format!(
                "variable {v}: pinned lead must lie in [1, {lead_max}]"
            )));
        }
        if pin.lag.is_some_and(|l| l > lag_max) {
            return Err(Error::Config(format!(
                "variable {v}: pinned lag must lie in [0, {lag_max}]"
            )));
        }
    }
    let pinned_on = pins.iter().filter(|p| p.coupled == Some(true)).count();
    let pinned_off = pins.iter().filter(|p| p.coupled == Some(false)).count();
    if pinned_on > coupled_count || vars - pinned_off < coupled_count {
        return Err(Error::Config(format!(
            "pins are incompatible with coupled_count {coupled_count}"
        )));
    }

    let mut r = rng::stream(seed, "coupling", &[]);
    let mut coupled: Vec<bool> = pins.iter().map(|p| p.coupled == Some(true)).collect();
    let mut free: Vec<usize> =
        (0..vars).filter(|&v| pins[v].coupled.is_none()).collect();
    let need = coupled_count - pinned_on;
    // Partial Fisher-Yates over the free list.
    for k in 0..need {
        let j = r.gen_range(k..free.len());
        free.swap(k, j);
        coupled[free[k]] = true;
    }

    let mut delta = vec![1i8; vars];
    let mut lead = vec![0usize; vars];
    let mut lag = vec![0usize; vars];
    for v in 0..vars {
        if !coupled[v] {
            continue;
        }
        delta[v] = match pins[v].delta {
            Some(d) if d == 1 || d == -1 => d,
            Some(d) => {
                return Err(Error::Config(format!("variable {v}: delta must be +1 or -1, got {d}")))
            }
            None => {
                if r.gen_bool(0.5) {
                    1
                } else {
                    -1
                }
            }
        };
        lead[v] = match pins[v].lead {
            Some(l) => l,
            None => r.gen_range(1..=lead_max),
        };
        lag[v] = match pins[v].lag {
            Some(l) => l,
            None => r.gen_range(0..=lag_max),
        };
    }
    Ok(Coupling { coupled, delta, lead, lag })
}

/// Dilates the extreme mask in time: every extreme run [s, e] at a pixel
/// marks [s - lead, e + lag] (clamped) as driver voxels for one variable.
pub fn derive_driver_mask(extremes: &[u8], dims: Dims3, lead: usize, lag: usize) -> BitGrid {
    let plane = dims.plane();
    debug_assert_eq!(extremes.len(), dims.len());
    let mut grid = BitGrid::zeros(dims.len());
    // Forward pass covers runs plus the lag tail, backward pass the lead head.
    let mut lag_rem = vec![0u32; plane];
    for t in 0..dims.t {
        let src = &extremes[t * plane..(t + 1) * plane];
        let base = t * plane;
        for p in 0..plane {
            if src[p] == 1 {
                grid.set(base + p);
                lag_rem[p] = lag as u32;
            } else if lag_rem[p] > 0 {
                grid.set(base + p);
                lag_rem[p] -= 1;
            }
        }
    }
    let mut lead_rem = vec![0u32; plane];
    for t in (0..dims.t).rev() {
        let src = &extremes[t * plane..(t + 1) * plane];
        let base = t * plane;
        for p in 0..plane {
            if src[p] == 1 {
                lead_rem[p] = lead as u32;
            } else if lead_rem[p] > 0 {
                grid.set(base + p);
                lead_rem[p] -= 1;
            }
        }
    }
    grid
}

/// Writes the event ledger as JSON lines.
pub fn write_ledger_jsonl(path: &std::path::Path, entries: &[LedgerEntry]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    const DIMS: Dims3 = Dims3 { t: 60, lat: 40, lon: 50 };

    fn all_valid(dims: Dims3) -> Vec<u8> {
        vec![1u8; dims.plane()]
    }

    #[test]
    fn cube_event_matches_draw_replay() {
        // Independent replay of the documented draw order.
        let spec = EventSpec::Cube { n: 1, sx: 9, sy: 7, sz: 5 };
        let mut r = rng::stream(3, "extreme-event", &[0, 0]);
        let got = gen_event(&spec, DIMS, &mut r).unwrap();

        let mut r = rng::stream(3, "extreme-event", &[0, 0]);
        let (a, b, c): (usize, usize, usize) =
            (r.gen_range(1..=9), r.gen_range(1..=7), r.gen_range(1..=5));
        let t0 = r.gen_range(0..DIMS.t);
        let y0 = r.gen_range(0..DIMS.lat);
        let x0 = r.gen_range(0..DIMS.lon);
        let mut expect = Vec::new();
        for t in t0..(t0 + c).min(DIMS.t) {
            for y in y0..(y0 + b).min(DIMS.lat) {
                for x in x0..(x0 + a).min(DIMS.lon) {
                    expect.push(DIMS.idx(t, y, x));
                }
            }
        }
        expect.sort_unstable();
        assert_eq!(got, expect);
    }

    #[test]
    fn walk_replay_stays_adjacent_and_bounded() {
        let spec = EventSpec::RandomWalk { n: 1, s: 125 };
        for inst in 0..20u64 {
            let mut r = rng::stream(8, "extreme-event", &[0, inst]);
            let got = gen_event(&spec, DIMS, &mut r).unwrap();
            assert!(!got.is_empty() && got.len() <= 126);

            // Replay the walk step by step and check adjacency along the path.
            let mut r = rng::stream(8, "extreme-event", &[0, inst]);
            let mut t = r.gen_range(0..DIMS.t);
            let mut y = r.gen_range(0..DIMS.lat) as isize;
            let mut x = r.gen_range(0..DIMS.lon) as isize;
            let mut seen = vec![DIMS.idx(t, y as usize, x as usize)];
            for _ in 0..125 {
                let (py, px) = (y, x);
                match r.gen_range(0..4u32) {
                    0 => y += 1,
                    1 => y -= 1,
                    2 => x += 1,
                    _ => x -= 1,
                }
                y = y.clamp(0, DIMS.lat as isize - 1);
                x = x.clamp(0, DIMS.lon as isize - 1);
                assert!((y - py).abs() + (x - px).abs() <= 1, "step moved too far");
                if r.gen_bool(0.5) {
                    t += 1;
                    if t >= DIMS.t {
                        break;
                    }
                }
                seen.push(DIMS.idx(t, y as usize, x as usize));
            }
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(got, seen);
        }
    }

    #[test]
    fn local_event_is_one_pixel_column() {
        let spec = EventSpec::Local { n: 1, sz: 17 };
        for inst in 0..20u64 {
            let mut r = rng::stream(1, "random-event", &[0, 0, inst]);
            let got = gen_event(&spec, DIMS, &mut r).unwrap();
            assert!(!got.is_empty() && got.len() <= 17);
            let pixel = got[0] % DIMS.plane();
            for w in got.windows(2) {
                assert_eq!(w[0] % DIMS.plane(), pixel);
                assert_eq!(w[1] - w[0], DIMS.plane(), "column must be contiguous in t");
            }
        }
    }

    #[test]
    fn gaussian_event_fits_quarter_extent_ellipsoid() {
        let spec = EventSpec::Gaussian { n: 1, sx: 35, sy: 35, sz: 25 };
        for inst in 0..20u64 {
            let mut r = rng::stream(2, "extreme-event", &[0, inst]);
            let got = gen_event(&spec, DIMS, &mut r).unwrap();
            assert!(!got.is_empty());
            let bb = bbox_of(&got, DIMS).unwrap();
            // Diameter bounds: 2 * extent/4 plus the center voxel.
            assert!(bb[1] - bb[0] <= 2 * 25 / 4 + 1);
            assert!(bb[3] - bb[2] <= 2 * 35 / 4 + 1);
            assert!(bb[5] - bb[4] <= 2 * 35 / 4 + 1);
        }
    }

    #[test]
    fn onset_event_runs_to_series_end() {
        let spec = EventSpec::Onset { n: 1, sx: 17, sy: 17, os: 0.9 };
        let start_min = (0.9 * DIMS.t as f64).round() as usize;
        for inst in 0..20u64 {
            let mut r = rng::stream(5, "extreme-event", &[0, inst]);
            let got = gen_event(&spec, DIMS, &mut r).unwrap();
            let bb = bbox_of(&got, DIMS).unwrap();
            assert!(bb[0] >= start_min, "onset started early: {}", bb[0]);
            assert_eq!(bb[1], DIMS.t - 1, "onset must persist to the end");
            assert!(bb[3] - bb[2] < 17 && bb[5] - bb[4] < 17);
        }
    }

    #[test]
    fn events_reject_degenerate_sizes() {
        let mut r = rng::stream(0, "extreme-event", &[0, 0]);
        assert!(gen_event(&EventSpec::Cube { n: 1, sx: 0, sy: 1, sz: 1 }, DIMS, &mut r).is_err());
        assert!(gen_event(&EventSpec::Onset { n: 1, sx: 1, sy: 1, os: 1.0 }, DIMS, &mut r).is_err());
        assert!(gen_event(&EventSpec::RandomWalk { n: 1, s: 0 }, DIMS, &mut r).is_err());
    }

    #[test]
    fn placement_respects_valid_mask() {
        let mut valid = all_valid(DIMS);
        // Invalidate the left half of the grid.
        for y in 0..DIMS.lat {
            for x in 0..DIMS.lon / 2 {
                valid[y * DIMS.lon + x] = 0;
            }
        }
        let specs = vec![EventSpec::Cube { n: 40, sx: 9, sy: 9, sz: 9 }];
        let (mask, ledger) = place_extremes(&specs, DIMS, &valid, 7).unwrap();
        assert_eq!(ledger.len(), 40);
        let plane = DIMS.plane();
        for (i, &m) in mask.iter().enumerate() {
            if m == 1 {
                assert_eq!(valid[i % plane], 1, "extreme on invalid pixel");
            }
        }
        let total: usize = ledger.iter().map(|e| e.voxels).sum();
        let set: u64 = mask.iter().map(|&b| b as u64).sum();
        assert!(total as u64 >= set && set > 0);
    }

    #[test]
    fn empty_after_valid_clip_is_accepted() {
        let valid = vec![0u8; DIMS.plane()];
        let specs = vec![EventSpec::Local { n: 3, sz: 5 }];
        let (mask, ledger) = place_extremes(&specs, DIMS, &valid, 7).unwrap();
        assert!(mask.iter().all(|&b| b == 0));
        assert!(ledger.iter().all(|e| e.voxels == 0 && e.bbox.is_none()));
    }

    #[test]
    fn random_anomalies_use_per_variable_streams() {
        let specs = vec![
            vec![EventSpec::Local { n: 10, sz: 5 }],
            vec![EventSpec::Local { n: 10, sz: 5 }],
        ];
        let valid = all_valid(DIMS);
        let (masks, ledger) = place_random_anomalies(&specs, DIMS, &valid, 3).unwrap();
        assert_eq!(masks.len(), 2);
        assert_eq!(ledger.len(), 20);
        assert_ne!(masks[0], masks[1], "variables must not share event draws");
        assert!(ledger.iter().take(10).all(|e| e.variable == Some(0)));
    }

    #[test]
    fn driver_dilation_brackets_a_run() {
        // Extreme run {5, 6} at one pixel, lead 2, lag 1: drivers {3..=7}.
        let dims = Dims3 { t: 12, lat: 1, lon: 1 };
        let mut ext = vec![0u8; 12];
        ext[5] = 1;
        ext[6] = 1;
        let g = derive_driver_mask(&ext, dims, 2, 1);
        let got: Vec<usize> = (0..12).filter(|&t| g.get(t)).collect();
        assert_eq!(got, vec![3, 4, 5, 6, 7]);
    }

    #[test]
    fn driver_dilation_clamps_at_series_bounds() {
        let dims = Dims3 { t: 6, lat: 1, lon: 1 };
        let mut ext = vec![0u8; 6];
        ext[0] = 1;
        ext[5] = 1;
        let g = derive_driver_mask(&ext, dims, 3, 4);
        let got: Vec<usize> = (0..6).filter(|&t| g.get(t)).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn coupling_honors_pins_and_count() {
        let pins = vec![
            CouplingPin { coupled: Some(false), ..Default::default() },
            CouplingPin {
                coupled: Some(true),
                delta: Some(-1),
                lead: Some(9),
                lag: Some(4),
            },
            CouplingPin::default(),
            CouplingPin::default(),
        ];
        let c = build_coupling(&pins, 2, 9, 4, 11).unwrap();
        assert_eq!(c.coupled_count(), 2);
        assert!(!c.coupled[0]);
        assert!(c.coupled[1]);
        assert_eq!(c.delta[1], -1);
        assert_eq!((c.lead[1], c.lag[1]), (9, 4));
        for v in 0..4 {
            if c.coupled[v] {
                assert!((1..=9).contains(&c.lead[v]));
                assert!(c.lag[v] <= 4);
                assert!(c.delta[v] == 1 || c.delta[v] == -1);
            }
        }
        // Deterministic in the seed.
        let c2 = build_coupling(&pins, 2, 9, 4, 11).unwrap();
        assert_eq!(c.coupled, c2.coupled);
        assert_eq!(c.lead, c2.lead);
    }

    #[test]
    fn coupling_rejects_impossible_pins() {
        let pins =
            vec![CouplingPin { coupled: Some(true), ..Default::default() }; 2];
        assert!(build_coupling(&pins, 1, 9, 4, 0).is_err());
        let pins =
            vec![CouplingPin { coupled: Some(false), ..Default::default() }; 3];
        assert!(build_coupling(&pins, 1, 9, 4, 0).is_err());
        let pins =
            vec![CouplingPin { coupled: Some(true), delta: Some(3), ..Default::default() }];
        assert!(build_coupling(&pins, 1, 9, 4, 0).is_err());
        let pins =
            vec![CouplingPin { lead: Some(10), ..Default::default() }];
        assert!(build_coupling(&pins, 1, 9, 4, 0).is_err(), "lead above lead_max");
        let pins = vec![CouplingPin { lag: Some(5), ..Default::default() }];
        assert!(build_coupling(&pins, 1, 9, 4, 0).is_err(), "lag above lag_max");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn drivers_contain_extremes_and_grow_with_window(
            seed in 0u64..1000,
            lead in 1usize..6,
            lag in 0usize..4,
        ) {
            let dims = Dims3 { t: 40, lat: 8, lon: 8 };
            let valid = vec![1u8; dims.plane()];
            let specs = vec![EventSpec::Local { n: 15, sz: 6 }];
            let (ext, _) = place_extremes(&specs, dims, &valid, seed).unwrap();
            let g = derive_driver_mask(&ext, dims, lead, lag);
            let bigger = derive_driver_mask(&ext, dims, lead + 1, lag + 1);
            for i in 0..dims.len() {
                if ext[i] == 1 {
                    prop_assert!(g.get(i), "driver mask must contain extremes");
                }
                if g.get(i) {
                    prop_assert!(bigger.get(i), "dilation must be monotone");
                }
            }
            // Every driver voxel lies within [-lead, +lag] of an extreme at
            // the same pixel.
            let plane = dims.plane();
            for i in 0..dims.len() {
                if !g.get(i) {
                    continue;
                }
                let t = i / plane;
                let p = i % plane;
                let lo = t.saturating_sub(lag);
                let hi = (t + lead).min(dims.t - 1);
                let near = (lo..=hi).any(|tt| ext[tt * plane + p] == 1);
                prop_assert!(near, "driver voxel with no extreme in window");
            }
        }
    }
}
