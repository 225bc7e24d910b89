//! Spherical weighted k-means over segment vectors and expert reconstruction.
//!
//! Each segment is compared by direction only: the loss of placing segment
//! `i` in cluster `j` is `w_i * (1 - cos(v_i, c_j))`. Before a centroid is
//! recomputed, cluster members are rescaled to the cluster's mean norm
//! `r_bar`, then averaged with importance weights normalized inside the
//! cluster and projected back onto the unit sphere. Because every member
//! then has the same length, the centroid is the exact minimizer of the
//! loss for fixed assignments and the objective never increases.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::LayerImportance;
use crate::error::{DernError, Result};
use crate::linalg::{linf_norm, ZERO_NORM};
use crate::model::{ExpertWeights, MoeLayer, RouterWeights};
use crate::segments::{
    decompose, reassemble, vectorize, ComponentMask, ReassignmentResult, Segment,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Segments with the largest max-abs gate entry.
    #[default]
    GateBased,
    Random,
    /// Evenly spaced along the cosine ranking to the mean direction.
    Equidistant,
}

impl FromStr for InitStrategy {
    type Err = DernError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate" | "gate_based" => Ok(Self::GateBased),
            "random" => Ok(Self::Random),
            "equidistant" => Ok(Self::Equidistant),
            other => Err(DernError::InvalidArgument(format!(
                "unknown init '{other}'"
            ))),
        }
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GateBased => "gate",
            Self::Random => "random",
            Self::Equidistant => "equidistant",
        })
    }
}

/// Which segments may serve as initial centroids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeedPool {
    /// The expert's own segments (the leading run sharing the first
    /// segment's source expert) when there are at least `k` of them.
    /// Received segments are near-copies of own ones, so seeding from the
    /// whole set can place two centroids on one neuron.
    #[default]
    Internal,
    /// Every segment.
    All,
}

impl FromStr for SeedPool {
    type Err = DernError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "internal" => Ok(Self::Internal),
            "all" => Ok(Self::All),
            other => Err(DernError::InvalidArgument(format!(
                "unknown seed pool '{other}'"
            ))),
        }
    }
}

impl fmt::Display for SeedPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Internal => "internal",
            Self::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub init: InitStrategy,
    pub use_weights: bool,
    pub mask: ComponentMask,
    pub seed: u64,
    pub seed_pool: SeedPool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 1,
            max_iters: 50,
            tol: 1e-6,
            init: InitStrategy::GateBased,
            use_weights: true,
            mask: ComponentMask::UP_DOWN,
            seed: 0,
            seed_pool: SeedPool::Internal,
        }
    }
}

impl ClusterConfig {
    pub fn with_k(&self, k: usize) -> Self {
        Self { k, ..self.clone() }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 || self.k > n {
            return Err(DernError::InvalidArgument(format!(
                "cluster count {} outside 1..={n}",
                self.k
            )));
        }
        if self.max_iters == 0 {
            return Err(DernError::InvalidArgument(
                "max_iters must be at least 1".into(),
            ));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(DernError::InvalidArgument(format!(
                "tol {} must be >= 0",
                self.tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    /// Cluster id of each segment.
    pub assignment: Vec<usize>,
    /// Unit-length centroids in the masked vector space.
    pub centroids: Vec<Vec<f64>>,
    /// Mean member norm per cluster.
    pub mean_norms: Vec<f64>,
    /// Objective after each completed iteration.
    pub objective_trace: Vec<f64>,
}

impl ClusterState {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn members(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(move |(i, &a)| (a == j).then_some(i))
    }

    pub fn member_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k()];
        for &a in &self.assignment {
            counts[a] += 1;
        }
        counts
    }

    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Segment vectors in the masked space, with unit directions and weights.
struct Points {
    units: Vec<Vec<f64>>,
    norms: Vec<f64>,
    weights: Vec<f64>,
}

impl Points {
    fn new(segments: &[Segment], config: &ClusterConfig) -> Self {
        let mut units = Vec::with_capacity(segments.len());
        let mut norms = Vec::with_capacity(segments.len());
        for s in segments {
            let v: Vec<f64> = vectorize(s, config.mask)
                .into_iter()
                .map(f64::from)
                .collect();
            let n = v.iter().fold(0.0, |acc, x| acc + x * x).sqrt();
            if n < ZERO_NORM {
                units.push(vec![0.0; v.len()]);
                norms.push(0.0);
            } else {
                units.push(v.iter().map(|x| x / n).collect());
                norms.push(n);
            }
        }
        let weights = segments
            .iter()
            .map(|s| if config.use_weights { s.weight } else { 1.0 })
            .collect();
        Self {
            units,
            norms,
            weights,
        }
    }

    fn len(&self) -> usize {
        self.units.len()
    }

    fn is_zero(&self, i: usize) -> bool {
        self.norms[i] == 0.0
    }

    fn cos(&self, i: usize, c: &[f64]) -> f64 {
        dot(&self.units[i], c)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = dot(v, v).sqrt();
    (n >= ZERO_NORM).then(|| v.iter().map(|x| x / n).collect())
}

fn objective_of(points: &Points, assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    assignment.iter().enumerate().fold(0.0, |acc, (i, &j)| {
        acc + points.weights[i] * (1.0 - points.cos(i, &centroids[j]))
    })
}

/// Weighted cosine loss of `state` over `segments`.
pub fn objective(segments: &[Segment], state: &ClusterState, config: &ClusterConfig) -> f64 {
    objective_of(
        &Points::new(segments, config),
        &state.assignment,
        &state.centroids,
    )
}

fn init_indices(
    points: &Points,
    segments: &[Segment],
    config: &ClusterConfig,
) -> Result<Vec<usize>> {
    let k = config.k;
    let nonzero = |range: std::ops::Range<usize>| -> Vec<usize> {
        range.filter(|&i| !points.is_zero(i)).collect()
    };
    let own = segments
        .iter()
        .take_while(|s| s.source_expert == segments[0].source_expert)
        .count();
    let internal = nonzero(0..own);
    let candidates = match config.seed_pool {
        SeedPool::Internal if internal.len() >= k => internal,
        _ => nonzero(0..points.len()),
    };
    if candidates.len() < k {
        return Err(DernError::DegenerateCluster(format!(
            "only {} non-zero segments for {k} clusters",
            candidates.len()
        )));
    }
    Ok(match config.init {
        InitStrategy::GateBased => {
            let bound: Vec<f32> = segments.iter().map(|s| linf_norm(&s.gate)).collect();
            let mut order = candidates;
            order.sort_by(|&a, &b| bound[b].total_cmp(&bound[a]).then(a.cmp(&b)));
            order.truncate(k);
            order
        }
        InitStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            sample(&mut rng, candidates.len(), k)
                .into_iter()
                .map(|i| candidates[i])
                .collect()
        }
        InitStrategy::Equidistant => {
            let dim = points.units[candidates[0]].len();
            let mut mean = vec![0.0; dim];
            for &i in &candidates {
                for (m, u) in mean.iter_mut().zip(&points.units[i]) {
                    *m += points.weights[i] * u;
                }
            }
            let dir = normalize(&mean).unwrap_or_else(|| points.units[candidates[0]].clone());
            let sims: Vec<f64> = (0..points.len()).map(|i| points.cos(i, &dir)).collect();
            let mut order = candidates;
            order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
            let n = order.len();
            if k == 1 {
                vec![order[(n - 1) / 2]]
            } else {
                (0..k).map(|t| order[t * (n - 1) / (k - 1)]).collect()
            }
        }
    })
}

/// Initial unit centroids for `segments`.
pub fn init_centroids(segments: &[Segment], config: &ClusterConfig) -> Result<Vec<Vec<f64>>> {
    config.validate(segments.len())?;
    let points = Points::new(segments, config);
    Ok(init_indices(&points, segments, config)?
        .into_iter()
        .map(|i| points.units[i].clone())
        .collect())
}

fn assign(points: &Points, centroids: &[Vec<f64>]) -> Vec<usize> {
    (0..points.len())
        .map(|i| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let s = points.cos(i, c);
                if s > best.1 {
                    best = (j, s);
                }
            }
            best.0
        })
        .collect()
}

/// Refills empty clusters with the member of the largest cluster that lies
/// farthest from its centroid.
fn repair_empty(points: &Points, assignment: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .expect("k >= 1");
        let members: Vec<usize> = (0..assignment.len())
            .filter(|&i| assignment[i] == largest)
            .collect();
        let pick = members
            .iter()
            .copied()
            .filter(|&i| !points.is_zero(i))
            .min_by(|&a, &b| {
                points
                    .cos(a, &centroids[largest])
                    .total_cmp(&points.cos(b, &centroids[largest]))
                    .then(a.cmp(&b))
            })
            .unwrap_or(members[0]);
        assignment[pick] = empty;
        if !points.is_zero(pick) {
            centroids[empty] = points.units[pick].clone();
        }
    }
}

/// Recomputes every centroid from its members; returns the mean norms.
fn update(points: &Points, assignment: &[usize], centroids: &mut [Vec<f64>]) -> Vec<f64> {
    let k = centroids.len();
    let dim = centroids[0].len();
    let mut mean_norms = vec![0.0; k];
    for (j, centroid) in centroids.iter_mut().enumerate() {
        let members: Vec<usize> = (0..assignment.len())
            .filter(|&i| assignment[i] == j && !points.is_zero(i))
            .collect();
        if members.is_empty() {
            continue;
        }
        let r_bar = members.iter().map(|&i| points.norms[i]).sum::<f64>() / members.len() as f64;
        mean_norms[j] = r_bar;
        let mut total_w: f64 = members.iter().map(|&i| points.weights[i]).sum();
        // Equal weights take the unweighted path so both give the same bits.
        let first = points.weights[members[0]];
        let uniform = total_w <= 0.0 || members.iter().all(|&i| points.weights[i] == first);
        if uniform {
            total_w = members.len() as f64;
        }
        let mut acc = vec![0.0; dim];
        for &i in &members {
            let w = if uniform { 1.0 } else { points.weights[i] } / total_w;
            // v_hat = v * r_bar / |v| = u * r_bar
            for (a, u) in acc.iter_mut().zip(&points.units[i]) {
                *a += w * (u * r_bar);
            }
        }
        if let Some(c) = normalize(&acc) {
            *centroid = c;
        }
    }
    mean_norms
}

/// Runs spherical weighted k-means until the objective improves by less
/// than `tol`, the assignment stops changing, or `max_iters` is reached.
pub fn run_kmeans(segments: &[Segment], config: &ClusterConfig) -> Result<ClusterState> {
    config.validate(segments.len())?;
    let points = Points::new(segments, config);
    let mut centroids: Vec<Vec<f64>> = init_indices(&points, segments, config)?
        .into_iter()
        .map(|i| points.units[i].clone())
        .collect();

    let mut assignment: Vec<usize> = Vec::new();
    let mut mean_norms = Vec::new();
    let mut trace: Vec<f64> = Vec::new();
    for _ in 0..config.max_iters {
        let mut next = assign(&points, &centroids);
        repair_empty(&points, &mut next, &mut centroids);
        if next == assignment {
            break;
        }
        assignment = next;
        mean_norms = update(&points, &assignment, &mut centroids);
        let obj = objective_of(&points, &assignment, &centroids);
        if !obj.is_finite() {
            return Err(DernError::Numerical(
                "k-means objective is not finite".into(),
            ));
        }
        let improvement = trace.last().map(|&prev| prev - obj);
        trace.push(obj);
        if improvement.is_some_and(|d| d < config.tol) {
            break;
        }
    }
    Ok(ClusterState {
        assignment,
        centroids,
        mean_norms,
        objective_trace: trace,
    })
}

/// Builds an expert with one neuron per cluster.
///
/// Masked components come from the centroid rescaled by the cluster's mean
/// norm; components outside the mask are the weighted mean of the members'
/// raw vectors.
pub fn reconstruct_expert(
    segments: &[Segment],
    state: &ClusterState,
    config: &ClusterConfig,
) -> Result<ExpertWeights> {
    let d = segments
        .first()
        .ok_or_else(|| DernError::InvalidArgument("no segments to reconstruct".into()))?
        .dim();
    let mut neurons = Vec::with_capacity(state.k());
    for j in 0..state.k() {
        let members: Vec<usize> = state.members(j).collect();
        if members.is_empty() {
            return Err(DernError::DegenerateCluster(format!(
                "cluster {j} is empty"
            )));
        }
        let weight_of = |i: usize| {
            if config.use_weights {
                segments[i].weight
            } else {
                1.0
            }
        };
        let mut total_w: f64 = members.iter().map(|&i| weight_of(i)).sum();
        let first = weight_of(members[0]);
        let uniform = total_w <= 0.0 || members.iter().all(|&i| weight_of(i) == first);
        if uniform {
            total_w = members.len() as f64;
        }
        let raw_mean = |pick: fn(&Segment) -> &[f32]| -> Vec<f32> {
            let mut acc = vec![0.0f64; d];
            for &i in &members {
                let w = if uniform { 1.0 } else { weight_of(i) } / total_w;
                for (a, &v) in acc.iter_mut().zip(pick(&segments[i])) {
                    *a += w * f64::from(v);
                }
            }
            acc.into_iter().map(|v| v as f32).collect()
        };

        let scaled: Vec<f32> = state.centroids[j]
            .iter()
            .map(|c| (c * state.mean_norms[j]) as f32)
            .collect();
        let mut parts = scaled.chunks(d);
        let mut component = |on: bool, pick: fn(&Segment) -> &[f32]| -> Vec<f32> {
            if on {
                parts.next().expect("mask width matches centroid").to_vec()
            } else {
                raw_mean(pick)
            }
        };
        let gate = component(config.mask.gate, |s| &s.gate);
        let up = component(config.mask.up, |s| &s.up);
        let down = component(config.mask.down, |s| &s.down);

        let weight =
            members.iter().map(|&i| segments[i].weight).sum::<f64>() / members.len() as f64;
        neurons.push(Segment {
            gate,
            up,
            down,
            weight,
            source_expert: segments[members[0]].source_expert,
            source_index: j,
        });
    }
    reassemble(&neurons)
}

/// Per-expert clustering outcome, for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertClusters {
    pub expert: usize,
    pub state: ClusterState,
}

/// `ceil(ratio * h)`, at least 1.
pub fn target_size(ratio: f64, h: usize) -> usize {
    ((ratio * h as f64 - 1e-9).ceil() as usize).clamp(1, h.max(1))
}

/// Clusters each retained expert's own and received segments down to
/// `target_size(ratio, h)` neurons and assembles the layer with `router`,
/// which must already hold the retained rows only.
pub fn compress_layer(
    layer_index: usize,
    layer: &MoeLayer,
    importance: &LayerImportance,
    reassignment: &ReassignmentResult,
    router: RouterWeights,
    config: &ClusterConfig,
    ratio: f64,
) -> Result<(MoeLayer, Vec<ExpertClusters>)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(DernError::InvalidArgument(format!(
            "ratio {ratio} outside (0, 1]"
        )));
    }
    let empty = Vec::new();
    let mut experts = Vec::with_capacity(importance.retained.len());
    let mut diagnostics = Vec::with_capacity(importance.retained.len());
    for &r in &importance.retained {
        let expert = layer.experts.get(r).ok_or(DernError::UnknownExpert(r))?;
        let weight = *importance
            .scores
            .get(r)
            .ok_or(DernError::UnknownExpert(r))?;
        let mut segments = decompose(expert, weight, r);
        segments.extend(
            reassignment
                .ext_segments
                .get(&r)
                .unwrap_or(&empty)
                .iter()
                .cloned(),
        );
        let cfg = config.with_k(target_size(ratio, expert.hidden()));
        let state = run_kmeans(&segments, &cfg).map_err(|e| e.in_expert(layer_index, r))?;
        experts.push(
            reconstruct_expert(&segments, &state, &cfg).map_err(|e| e.in_expert(layer_index, r))?,
        );
        diagnostics.push(ExpertClusters { expert: r, state });
    }
    let top_k = layer.top_k.min(experts.len());
    let layer = MoeLayer::new(experts, router, top_k).map_err(|e| e.in_layer(layer_index))?;
    Ok((layer, diagnostics))
}

/// Groups segment indices by cluster id; handy for tests and dumps.
pub fn clusters_of(state: &ClusterState) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &j) in state.assignment.iter().enumerate() {
        out.entry(j).or_default().push(i);
    }
    out
}
