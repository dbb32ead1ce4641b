//! Traffic graphs: windowing raw tracks into samples, the lane/distance edge
//! rule, and symmetric degree normalization.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Sampling interval of every track the graph builder accepts, in seconds.
pub const DT: f64 = 0.5;

/// 100 ft expressed in meters.
pub const DEFAULT_TAU_M: f64 = 30.48;

/// Features per time step: x, y, speed.
pub const FEATURES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    pub lane: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VehicleTrack {
    pub vehicle_id: u64,
    pub points: Vec<TrackPoint>,
}

impl VehicleTrack {
    /// Checks ordering, uniform `dt` spacing and non-negative speeds.
    pub fn validate(&self, dt: f64) -> Result<()> {
        let bad = |msg: String| Error::Track {
            vehicle_id: self.vehicle_id,
            msg,
        };
        if self.points.is_empty() {
            return Err(bad("no points".into()));
        }
        for w in self.points.windows(2) {
            if w[1].t <= w[0].t {
                return Err(bad(format!("timestamps not increasing at t={}", w[1].t)));
            }
            if ((w[1].t - w[0].t) - dt).abs() > 1e-6 {
                return Err(bad(format!("non-uniform sampling: {} -> {} (expected dt={dt})", w[0].t, w[1].t)));
            }
        }
        if let Some(p) = self.points.iter().find(|p| !(p.speed >= 0.0)) {
            return Err(bad(format!("negative speed at t={}", p.t)));
        }
        let first = self.points[0].t / dt;
        if (first - first.round()).abs() > 1e-6 {
            return Err(bad(format!("t={} is not on the {dt}s grid", self.points[0].t)));
        }
        Ok(())
    }

    fn first_step(&self, dt: f64) -> i64 {
        (self.points[0].t / dt).round() as i64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphConfig {
    /// Edge distance threshold in meters.
    pub tau: f64,
    pub t_in: usize,
    pub t_out: usize,
    pub lane_tolerance: u32,
    /// Neighbors kept per sample, nearest first.
    pub max_neighbors: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU_M,
            t_in: 10,
            t_out: 10,
            lane_tolerance: 1,
            max_neighbors: 12,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.t_in == 0 || self.t_out == 0 {
            return Err(Error::Config("t_in and t_out must be >= 1".into()));
        }
        Ok(())
    }
}

/// Target position and time at the anchor step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Origin {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

/// One prediction example centred on a target vehicle.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSample {
    pub num_nodes: usize,
    /// `T_in + 1`.
    pub history_len: usize,
    /// `[node][step][x, y, speed]`, positions relative to `origin`.
    pub node_features: Vec<f64>,
    /// Symmetric 0/1 matrix with zero diagonal.
    pub adjacency: Tensor,
    pub target_index: usize,
    /// Ground-truth future offsets relative to `origin`.
    pub future: Vec<[f64; 2]>,
    pub origin: Origin,
    pub node_ids: Vec<u64>,
}

impl GraphSample {
    pub fn target_id(&self) -> u64 {
        self.node_ids[self.target_index]
    }

    pub fn t_out(&self) -> usize {
        self.future.len()
    }

    /// Flattened `[step][feature]` history of one node.
    pub fn node_history(&self, node: usize) -> &[f64] {
        let w = self.history_len * FEATURES;
        &self.node_features[node * w..(node + 1) * w]
    }

    /// `N x 3` feature matrix of all nodes at history step `step`.
    pub fn step_features(&self, step: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.num_nodes * FEATURES);
        for n in 0..self.num_nodes {
            let h = self.node_history(n);
            data.extend_from_slice(&h[step * FEATURES..(step + 1) * FEATURES]);
        }
        Tensor::from_parts(vec![self.num_nodes, FEATURES], data)
    }

    /// The target's history in absolute coordinates, oldest first.
    pub fn target_history_absolute(&self) -> Vec<[f64; 2]> {
        self.node_history(self.target_index)
            .chunks(FEATURES)
            .map(|c| [c[0] + self.origin.x, c[1] + self.origin.y])
            .collect()
    }

    pub fn future_absolute(&self) -> Vec<[f64; 2]> {
        to_absolute(&self.future, &self.origin)
    }

    /// Reorders nodes so that new node `i` is old node `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<GraphSample> {
        let n = self.num_nodes;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Config(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        let mut features = Vec::with_capacity(self.node_features.len());
        for &p in perm {
            features.extend_from_slice(self.node_history(p));
        }
        let mut adj = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                adj[i * n + j] = self.adjacency.get(perm[i], perm[j]);
            }
        }
        let target_index = perm
            .iter()
            .position(|&p| p == self.target_index)
            .expect("permutation covers target");
        Ok(GraphSample {
            node_features: features,
            adjacency: Tensor::from_parts(vec![n, n], adj),
            target_index,
            node_ids: perm.iter().map(|&p| self.node_ids[p]).collect(),
            ..self.clone()
        })
    }
}

/// Adds the origin back to target-centric offsets.
pub fn to_absolute(offsets: &[[f64; 2]], origin: &Origin) -> Vec<[f64; 2]> {
    offsets.iter().map(|[dx, dy]| [dx + origin.x, dy + origin.y]).collect()
}

/// Edge rule: distinct vehicles within `lane_tolerance` lanes of each other
/// and at most `tau` apart (Euclidean) are connected.
pub fn build_adjacency(nodes: &[(f64, f64, u32)], config: &GraphConfig) -> Tensor {
    let n = nodes.len().max(1);
    let mut a = vec![0.0; n * n];
    for i in 0..nodes.len() {
        for j in (i + 1)..nodes.len() {
            let (xi, yi, li) = nodes[i];
            let (xj, yj, lj) = nodes[j];
            let dist = (xi - xj).hypot(yi - yj);
            if li.abs_diff(lj) <= config.lane_tolerance && dist <= config.tau {
                a[i * n + j] = 1.0;
                a[j * n + i] = 1.0;
            }
        }
    }
    Tensor::from_parts(vec![n, n], a)
}

/// `D^-1/2 (A + I) D^-1/2`, with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.shape().len() != 2 || a.cols() != n {
        return Err(Error::Adjacency(format!("not square: {:?}", a.shape())));
    }
    for i in 0..n {
        if a.get(i, i) != 0.0 {
            return Err(Error::Adjacency(format!("non-zero diagonal at {i}")));
        }
        for j in 0..n {
            let v = a.get(i, j);
            if v != 0.0 && v != 1.0 {
                return Err(Error::Adjacency(format!("entry ({i},{j}) = {v} is not 0/1")));
            }
            if v != a.get(j, i) {
                return Err(Error::Adjacency(format!("asymmetric at ({i},{j})")));
            }
        }
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let degree = 1.0 + a.row(i).iter().sum::<f64>();
            1.0 / degree.sqrt()
        })
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let hat = a.get(i, j) + if i == j { 1.0 } else { 0.0 };
            if hat != 0.0 {
                out[i * n + j] = inv_sqrt[i] * hat * inv_sqrt[j];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, n], out))
}

/// Windows every track as a target. See [`extract_target_windows`].
pub fn extract_windows(tracks: &[VehicleTrack], config: &GraphConfig, stride: usize) -> Result<Vec<GraphSample>> {
    extract_target_windows(tracks, config, stride, |_| true)
}

/// Windows only the tracks whose id satisfies `is_target`.
pub fn extract_target_windows(
    tracks: &[VehicleTrack],
    config: &GraphConfig,
    stride: usize,
    is_target: impl Fn(u64) -> bool,
) -> Result<Vec<GraphSample>> {
    extract_windows_where(tracks, config, stride, |t, _| is_target(t.vehicle_id))
}

/// Cuts one sample per target per anchor step, keeping anchors for which
/// `accept(track, anchor_index)` holds.
///
/// Anchors advance by `stride` steps and require `T_in` past steps, the
/// current step and `T_out` future steps of the target. All other vehicles
/// present at the anchor become nodes (nearest `max_neighbors`), their
/// histories front-padded with their earliest point when shorter than the
/// window.
pub fn extract_windows_where(
    tracks: &[VehicleTrack],
    config: &GraphConfig,
    stride: usize,
    accept: impl Fn(&VehicleTrack, usize) -> bool,
) -> Result<Vec<GraphSample>> {
    config.validate()?;
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    for t in tracks {
        t.validate(DT)?;
    }
    let spans: Vec<(i64, i64)> = tracks
        .iter()
        .map(|t| {
            let first = t.first_step(DT);
            (first, first + t.points.len() as i64 - 1)
        })
        .collect();
    let mut present: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &(a, b)) in spans.iter().enumerate() {
        for s in a..=b {
            present.entry(s).or_default().push(i);
        }
    }

    let (t_in, t_out) = (config.t_in, config.t_out);
    let history_len = t_in + 1;
    let mut samples = Vec::new();
    for (ti, track) in tracks.iter().enumerate() {
        if track.points.len() < t_in + t_out + 1 {
            continue;
        }
        let mut k = t_in;
        while k + t_out < track.points.len() {
            if !accept(track, k) {
                k += stride;
                continue;
            }
            let anchor = spans[ti].0 + k as i64;
            let origin_pt = track.points[k];
            let origin = Origin {
                x: origin_pt.x,
                y: origin_pt.y,
                t: origin_pt.t,
            };

            let mut neighbors: Vec<(f64, usize)> = present[&anchor]
                .iter()
                .filter(|&&j| j != ti)
                .map(|&j| {
                    let p = tracks[j].points[(anchor - spans[j].0) as usize];
                    ((p.x - origin.x).hypot(p.y - origin.y), j)
                })
                .collect();
            neighbors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            neighbors.truncate(config.max_neighbors);

            let nodes: Vec<usize> = std::iter::once(ti).chain(neighbors.iter().map(|&(_, j)| j)).collect();
            let mut features = Vec::with_capacity(nodes.len() * history_len * FEATURES);
            let mut current = Vec::with_capacity(nodes.len());
            for &j in &nodes {
                let pts = &tracks[j].points;
                for s in (anchor - t_in as i64)..=anchor {
                    let idx = (s - spans[j].0).max(0) as usize;
                    let p = pts[idx];
                    features.extend_from_slice(&[p.x - origin.x, p.y - origin.y, p.speed]);
                }
                let p = pts[(anchor - spans[j].0) as usize];
                current.push((p.x, p.y, p.lane));
            }
            let future = track.points[k + 1..=k + t_out]
                .iter()
                .map(|p| [p.x - origin.x, p.y - origin.y])
                .collect();

            samples.push(GraphSample {
                num_nodes: nodes.len(),
                history_len,
                node_features: features,
                adjacency: build_adjacency(&current, config),
                target_index: 0,
                future,
                origin,
                node_ids: nodes.iter().map(|&j| tracks[j].vehicle_id).collect(),
            });
            k += stride;
        }
    }
    Ok(samples)
}
