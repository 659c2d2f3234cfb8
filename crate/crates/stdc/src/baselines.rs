//! Classical driver detectors: the extreme-broadcast rule, climatological
//! z-scoring, and an isolation forest over cross-variable features.

use crate::cube::{Climatology, DataCube};
use crate::error::{Error, Result};
use crate::grid::BitGrid;
use crate::rng;
use rand::Rng;
use rayon::prelude::*;
use std::ops::Range;

/// Predicts a driver anomaly exactly where an extreme is observed, for every
/// variable. Depends only on the extreme mask, never on the values.
pub fn naive_predict(extremes: &[u8], vars: usize) -> Vec<BitGrid> {
    let one = BitGrid::from_bytes(extremes);
    vec![one; vars]
}

/// Fills `out` with the deseasonalized plane of variable `v` at step `t`.
/// Invalid pixels come out as 0.
fn z_plane(cube: &DataCube, clim: &Climatology, v: usize, t: usize, out: &mut [f64]) {
    let dims = cube.dims;
    let plane = dims.plane();
    let week = t % clim.weeks_per_year;
    let src = &cube.values[dims.idx(v, t, 0, 0)..dims.idx(v, t, 0, 0) + plane];
    let med = &clim.median[clim.idx(v, week, 0, 0)..clim.idx(v, week, 0, 0) + plane];
    let std = &clim.std[clim.idx(v, week, 0, 0)..clim.idx(v, week, 0, 0) + plane];
    for p in 0..plane {
        out[p] = if cube.valid[p] == 1 {
            (src[p] as f64 - med[p] as f64) / std[p] as f64
        } else {
            0.0
        };
    }
}

/// Flags voxels whose absolute deseasonalized value exceeds `threshold`.
pub fn zscore_predict(
    cube: &DataCube,
    clim: &Climatology,
    threshold: f64,
) -> Result<Vec<BitGrid>> {
    if clim.vars != cube.dims.vars || clim.lat != cube.dims.lat || clim.lon != cube.dims.lon {
        return Err(Error::Shape("climatology does not match the cube".into()));
    }
    let dims = cube.dims;
    let plane = dims.plane();
    let mut preds = Vec::with_capacity(dims.vars);
    let mut bytes = vec![0u8; dims.per_var()];
    for v in 0..dims.vars {
        bytes.par_chunks_mut(plane).enumerate().for_each(|(t, dst)| {
            let mut z = vec![0f64; plane];
            z_plane(cube, clim, v, t, &mut z);
            for p in 0..plane {
                dst[p] = u8::from(z[p].abs() > threshold);
            }
        });
        preds.push(BitGrid::from_bytes(&bytes));
    }
    Ok(preds)
}

/// Midpoint between the medians of the two score populations; a quick
/// threshold when labeled scores are available.
pub fn threshold_from_medians(normal: &[f64], anomalous: &[f64]) -> Result<f64> {
    fn median(xs: &[f64]) -> Result<f64> {
        if xs.is_empty() {
            return Err(Error::Validation("median of an empty score set".into()));
        }
        let mut v = xs.to_vec();
        let mid = v.len() / 2;
        let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
        let hi = *m;
        if v.len() % 2 == 1 {
            Ok(hi)
        } else {
            let lo = v[..mid]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(0.5 * (lo + hi))
        }
    }
    Ok(0.5 * (median(normal)? + median(anomalous)?))
}

/// Nearest-rank quantile of an unsorted sample.
pub fn quantile(xs: &[f64], q: f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Validation("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Validation(format!("quantile {q} outside [0, 1]")));
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1])
}

/// Average unsuccessful-search path length of a binary search tree with `n`
/// points; normalizes isolation depths.
fn avg_path_len(n: u64) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let h = |k: u64| -> f64 {
        if k <= 100 {
            (1..=k).map(|i| 1.0 / i as f64).sum()
        } else {
            (k as f64).ln() + 0.577_215_664_901_532_9
        }
    };
    2.0 * h(n - 1) - 2.0 * (n - 1) as f64 / n as f64
}

#[derive(Debug, Clone, Copy)]
pub struct IsolationForestParams {
    pub n_trees: usize,
    pub subsample: usize,
    pub seed: u64,
}

impl Default for IsolationForestParams {
    fn default() -> Self {
        IsolationForestParams { n_trees: 100, subsample: 256, seed: 0 }
    }
}

enum Node {
    Split { feature: usize, value: f64, left: u32, right: u32 },
    Leaf { size: u32 },
}

struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn path_len(&self, point: &[f64]) -> f64 {
        let mut node = 0usize;
        let mut depth = 0f64;
        loop {
            match &self.nodes[node] {
                Node::Leaf { size } => return depth + avg_path_len(*size as u64),
                Node::Split { feature, value, left, right } => {
                    node = if point[*feature] < *value { *left } else { *right } as usize;
                    depth += 1.0;
                }
            }
        }
    }
}

/// Isolation forest over fixed-dimension points. Scores approach 1 for
/// points that isolate quickly and drop toward 0.5 and below for inliers.
pub struct IsolationForest {
    trees: Vec<Tree>,
    dim: usize,
    norm: f64,
}

impl IsolationForest {
    /// Fits on `points`, a flat row-major sample of `dim`-dimensional rows.
    /// Each tree draws its own subsample from a stream keyed by the tree
    /// index, so the forest is reproducible for any thread count.
    pub fn fit(points: &[f64], dim: usize, params: IsolationForestParams) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::Shape("points must be rows of `dim` values".into()));
        }
        let n = points.len() / dim;
        if n == 0 {
            return Err(Error::Validation("isolation forest needs training points".into()));
        }
        if params.n_trees == 0 || params.subsample == 0 {
            return Err(Error::Config("n_trees and subsample must be positive".into()));
        }
        let psi = params.subsample.min(n);
        let depth_limit = (psi as f64).log2().ceil().max(1.0) as usize;
        let trees: Vec<Tree> = (0..params.n_trees)
            .into_par_iter()
            .map(|ti| {
                let mut r = rng::stream(params.seed, "iforest", &[ti as u64]);
                let mut idx: Vec<usize> = (0..n).collect();
                for k in 0..psi {
                    let j = r.gen_range(k..n);
                    idx.swap(k, j);
                }
                idx.truncate(psi);
                let mut tree = Tree { nodes: Vec::new() };
                build_node(&mut tree, points, dim, idx, 0, depth_limit, &mut r);
                tree
            })
            .collect();
        Ok(IsolationForest { trees, dim, norm: avg_path_len(psi as u64) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Anomaly score 2^(-E[path] / c(psi)) in (0, 1).
    pub fn score(&self, point: &[f64]) -> f64 {
        debug_assert_eq!(point.len(), self.dim);
        let total: f64 = self.trees.iter().map(|t| t.path_len(point)).sum();
        let mean = total / self.trees.len() as f64;
        (2f64).powf(-mean / self.norm)
    }
}

/// Appends one subtree over `idx` and returns its node index.
fn build_node(
    tree: &mut Tree,
    points: &[f64],
    dim: usize,
    idx: Vec<usize>,
    depth: usize,
    limit: usize,
    r: &mut rand_chacha::ChaCha8Rng,
) -> u32 {
    let here = tree.nodes.len() as u32;
    if depth >= limit || idx.len() <= 1 {
        tree.nodes.push(Node::Leaf { size: idx.len() as u32 });
        return here;
    }
    // Candidate features that actually spread within this node.
    let mut spread = Vec::with_capacity(dim);
    for f in 0..dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &i in &idx {
            let x = points[i * dim + f];
            lo = lo.min(x);
            hi = hi.max(x);
        }
        if hi > lo {
            spread.push((f, lo, hi));
        }
    }
    if spread.is_empty() {
        tree.nodes.push(Node::Leaf { size: idx.len() as u32 });
        return here;
    }
    let (feature, lo, hi) = spread[r.gen_range(0..spread.len())];
    let value = r.gen_range(lo..hi);
    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
        idx.into_iter().partition(|&i| points[i * dim + feature] < value);

    tree.nodes.push(Node::Leaf { size: 0 });
    let left = build_node(tree, points, dim, left_idx, depth + 1, limit, r);
    let right = build_node(tree, points, dim, right_idx, depth + 1, limit, r);
    tree.nodes[here as usize] = Node::Split { feature, value, left, right };
    here
}

/// Feature row of one variable at one voxel: its own deseasonalized value
/// followed by the signed differences to every other variable, in cyclic
/// variable order.
#[inline]
fn feature_row(z: &[f64], plane: usize, vars: usize, v: usize, p: usize, out: &mut [f64]) {
    let own = z[v * plane + p];
    out[0] = own;
    for k in 1..vars {
        out[k] = own - z[((v + k) % vars) * plane + p];
    }
}

/// Collects up to `cap` anomaly-free feature rows from the week range.
/// Eligible rows are taken at a fixed stride so the sample spans the whole
/// range deterministically.
pub fn collect_normal_features(
    cube: &DataCube,
    clim: &Climatology,
    masks: &crate::cube::MaskSet,
    weeks: Range<usize>,
    cap: usize,
) -> Result<Vec<f64>> {
    if cap == 0 {
        return Err(Error::Config("feature cap must be positive".into()));
    }
    let dims = cube.dims;
    let plane = dims.plane();
    let vars = dims.vars;
    let is_normal = |v: usize, i: usize, p: usize| {
        cube.valid[p] == 1
            && masks.extremes[i] == 0
            && !masks.drivers[v].get(i)
            && !masks.random[v].get(i)
    };

    let mut eligible = 0u64;
    for t in weeks.clone() {
        for p in 0..plane {
            let i = t * plane + p;
            for v in 0..vars {
                if is_normal(v, i, p) {
                    eligible += 1;
                }
            }
        }
    }
    if eligible == 0 {
        return Err(Error::Validation("no anomaly-free voxels to train on".into()));
    }
    let stride = (eligible / cap as u64).max(1);

    let mut rows = Vec::with_capacity(cap.min(eligible as usize) * vars);
    let mut z = vec![0f64; vars * plane];
    let mut row = vec![0f64; vars];
    let mut seen = 0u64;
    for t in weeks {
        for v in 0..vars {
            z_plane(cube, clim, v, t, &mut z[v * plane..(v + 1) * plane]);
        }
        for p in 0..plane {
            let i = t * plane + p;
            for v in 0..vars {
                if !is_normal(v, i, p) {
                    continue;
                }
                if seen % stride == 0 && rows.len() < cap * vars {
                    feature_row(&z, plane, vars, v, p, &mut row);
                    rows.extend_from_slice(&row);
                }
                seen += 1;
            }
        }
    }
    Ok(rows)
}

/// Scores every voxel of every variable and thresholds into driver masks.
pub fn iforest_predict(
    cube: &DataCube,
    clim: &Climatology,
    forest: &IsolationForest,
    threshold: f64,
) -> Result<Vec<BitGrid>> {
    let dims = cube.dims;
    if forest.dim() != dims.vars {
        return Err(Error::Shape(format!(
            "forest expects {} features but the cube has {} variables",
            forest.dim(),
            dims.vars
        )));
    }
    let plane = dims.plane();
    let vars = dims.vars;
    // (t, v, plane) layout so time steps are independent work items.
    let mut flat = vec![0u8; dims.len()];
    flat.par_chunks_mut(vars * plane).enumerate().for_each(|(t, dst)| {
        let mut z = vec![0f64; vars * plane];
        for v in 0..vars {
            z_plane(cube, clim, v, t, &mut z[v * plane..(v + 1) * plane]);
        }
        let mut row = vec![0f64; vars];
        for p in 0..plane {
            if cube.valid[p] == 0 {
                continue;
            }
            for v in 0..vars {
                feature_row(&z, plane, vars, v, p, &mut row);
                dst[v * plane + p] = u8::from(forest.score(&row) > threshold);
            }
        }
    });
    // Repack to per-variable (T, Lat, Lon) masks.
    let per_var = dims.per_var();
    let mut bytes = vec![0u8; per_var];
    let mut preds = Vec::with_capacity(vars);
    for v in 0..vars {
        for t in 0..dims.t {
            let src = &flat[(t * vars + v) * plane..(t * vars + v + 1) * plane];
            bytes[t * plane..(t + 1) * plane].copy_from_slice(src);
        }
        preds.push(BitGrid::from_bytes(&bytes));
    }
    Ok(preds)
}
