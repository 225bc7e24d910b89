//! Neuron-level expert segments and their reassignment to retained experts.
//!
//! A GLU expert's output is a sum over hidden neurons `i` of
//! `down[:, i] * silu(gate[i] . x) * (up[i] . x)`, so each neuron's
//! `(gate row, up row, down column)` triplet is an independent unit that can
//! be moved between experts.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DernError, Result};
use crate::linalg::{cosine_f64, Matrix};
use crate::model::{silu, ExpertWeights, RouterWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub gate: Vec<f32>,
    pub up: Vec<f32>,
    pub down: Vec<f32>,
    /// Importance inherited from the source expert.
    pub weight: f64,
    pub source_expert: usize,
    pub source_index: usize,
}

impl Segment {
    pub fn dim(&self) -> usize {
        self.gate.len()
    }

    /// This neuron's additive contribution to its expert's output.
    pub fn contribution(&self, x: &[f32]) -> Vec<f64> {
        let g = crate::linalg::dot_f64(&self.gate, x);
        let u = crate::linalg::dot_f64(&self.up, x);
        let a = silu(g) * u;
        self.down.iter().map(|&w| f64::from(w) * a).collect()
    }

    pub fn scaled(&self, c: f32) -> Segment {
        let s = |v: &[f32]| v.iter().map(|x| x * c).collect();
        Segment {
            gate: s(&self.gate),
            up: s(&self.up),
            down: s(&self.down),
            ..self.clone()
        }
    }
}

/// Which of the gate/up/down components enter the similarity vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentMask {
    pub gate: bool,
    pub up: bool,
    pub down: bool,
}

impl ComponentMask {
    pub const FULL: ComponentMask = ComponentMask {
        gate: true,
        up: true,
        down: true,
    };
    pub const UP_DOWN: ComponentMask = ComponentMask {
        gate: false,
        up: true,
        down: true,
    };

    pub fn new(gate: bool, up: bool, down: bool) -> Result<Self> {
        if !(gate || up || down) {
            return Err(DernError::InvalidArgument(
                "component mask must enable at least one of gate, up, down".into(),
            ));
        }
        Ok(Self { gate, up, down })
    }

    pub fn count(&self) -> usize {
        usize::from(self.gate) + usize::from(self.up) + usize::from(self.down)
    }

    pub fn flags(&self) -> [bool; 3] {
        [self.gate, self.up, self.down]
    }
}

impl Default for ComponentMask {
    fn default() -> Self {
        Self::UP_DOWN
    }
}

impl FromStr for ComponentMask {
    type Err = DernError;

    fn from_str(s: &str) -> Result<Self> {
        let (mut gate, mut up, mut down) = (false, false, false);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "gate" => gate = true,
                "up" => up = true,
                "down" => down = true,
                other => {
                    return Err(DernError::InvalidArgument(format!(
                        "unknown mask component '{other}'"
                    )))
                }
            }
        }
        Self::new(gate, up, down)
    }
}

impl fmt::Display for ComponentMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = ["gate", "up", "down"]
            .into_iter()
            .zip(self.flags())
            .filter_map(|(n, on)| on.then_some(n))
            .collect();
        f.write_str(&names.join(","))
    }
}

/// Splits an expert into its `h` neuron segments.
pub fn decompose(expert: &ExpertWeights, weight: f64, source_expert: usize) -> Vec<Segment> {
    (0..expert.hidden())
        .map(|i| Segment {
            gate: expert.gate.row(i).to_vec(),
            up: expert.up.row(i).to_vec(),
            down: expert.down.column(i),
            weight,
            source_expert,
            source_index: i,
        })
        .collect()
}

/// Inverse of [`decompose`]: neuron `i` of the result is `segments[i]`.
pub fn reassemble(segments: &[Segment]) -> Result<ExpertWeights> {
    if segments.is_empty() {
        return Err(DernError::InvalidArgument(
            "cannot build an expert from zero segments".into(),
        ));
    }
    let d = segments[0].dim();
    for s in segments {
        check_dim(d, s.gate.len())?;
        check_dim(d, s.up.len())?;
        check_dim(d, s.down.len())?;
    }
    let gate: Vec<Vec<f32>> = segments.iter().map(|s| s.gate.clone()).collect();
    let up: Vec<Vec<f32>> = segments.iter().map(|s| s.up.clone()).collect();
    let down: Vec<Vec<f32>> = segments.iter().map(|s| s.down.clone()).collect();
    ExpertWeights::new(
        Matrix::from_rows(&gate)?,
        Matrix::from_rows(&up)?,
        Matrix::from_columns(&down)?,
    )
}

/// Sum of per-neuron contributions; equals the expert's forward pass.
pub fn segment_sum(segments: &[Segment], x: &[f32]) -> Vec<f32> {
    let d = x.len();
    let mut out = vec![0.0f64; d];
    for s in segments {
        for (o, c) in out.iter_mut().zip(s.contribution(x)) {
            *o += c;
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Concatenates the enabled components in gate, up, down order.
pub fn vectorize(segment: &Segment, mask: ComponentMask) -> Vec<f32> {
    let mut v = Vec::with_capacity(segment.dim() * mask.count());
    if mask.gate {
        v.extend_from_slice(&segment.gate);
    }
    if mask.up {
        v.extend_from_slice(&segment.up);
    }
    if mask.down {
        v.extend_from_slice(&segment.down);
    }
    v
}

fn max_cosine(query: &[f32], targets: &[Vec<f32>]) -> f64 {
    targets
        .iter()
        .map(|t| cosine_f64(query, t))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Highest cosine similarity between `segment` and any of `targets`.
pub fn sim_to_expert(segment: &Segment, targets: &[Segment], mask: ComponentMask) -> Result<f64> {
    if targets.is_empty() {
        return Err(DernError::InvalidArgument(
            "similarity against an empty expert".into(),
        ));
    }
    let q = vectorize(segment, mask);
    let t: Vec<Vec<f32>> = targets.iter().map(|s| vectorize(s, mask)).collect();
    Ok(max_cosine(&q, &t))
}

/// Segments collected from the pruned experts of one layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentPool {
    pub segments: Vec<Segment>,
}

impl SegmentPool {
    pub fn from_experts<'a>(
        experts: impl IntoIterator<Item = (usize, &'a ExpertWeights, f64)>,
    ) -> Self {
        let segments = experts
            .into_iter()
            .flat_map(|(id, e, w)| decompose(e, w, id))
            .collect();
        Self { segments }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Index into the pool.
    pub segment: usize,
    pub source_expert: usize,
    pub source_index: usize,
    /// Receiving retained expert, or `None` if below threshold.
    pub target: Option<usize>,
    pub best_expert: usize,
    pub best_similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReassignmentResult {
    pub assignments: Vec<Assignment>,
    /// Segments received by each retained expert, in pool order.
    pub ext_segments: BTreeMap<usize, Vec<Segment>>,
    pub retained_ratio: f64,
}

impl ReassignmentResult {
    pub fn assigned_count(&self) -> usize {
        self.assignments
            .iter()
            .filter(|a| a.target.is_some())
            .count()
    }
}

/// Sends each pool segment to the retained expert holding its most similar
/// segment, if that similarity is strictly greater than `alpha`.
///
/// Targets are the retained experts' original segment sets; segments moved
/// during this call never become targets, so the outcome does not depend on
/// pool order. Ties between experts go to the lower id.
pub fn reassign(
    pool: &SegmentPool,
    retained: &BTreeMap<usize, Vec<Segment>>,
    alpha: f64,
    mask: ComponentMask,
) -> Result<ReassignmentResult> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DernError::InvalidArgument(format!(
            "alpha {alpha} outside [0, 1]"
        )));
    }
    if retained.is_empty() {
        return Err(DernError::InvalidArgument("no retained experts".into()));
    }
    if let Some((id, _)) = retained.iter().find(|(_, segs)| segs.is_empty()) {
        return Err(DernError::InvalidArgument(format!(
            "retained expert {id} has no segments"
        )));
    }

    let targets: Vec<(usize, Vec<Vec<f32>>)> = retained
        .iter()
        .map(|(&id, segs)| (id, segs.iter().map(|s| vectorize(s, mask)).collect()))
        .collect();

    let mut assignments = Vec::with_capacity(pool.len());
    let mut ext_segments: BTreeMap<usize, Vec<Segment>> =
        retained.keys().map(|&id| (id, Vec::new())).collect();
    for (idx, seg) in pool.segments.iter().enumerate() {
        let q = vectorize(seg, mask);
        let (mut best_expert, mut best_sim) = (targets[0].0, f64::NEG_INFINITY);
        for (id, t) in &targets {
            let s = max_cosine(&q, t);
            if s > best_sim {
                best_sim = s;
                best_expert = *id;
            }
        }
        let target = (best_sim > alpha).then_some(best_expert);
        if let Some(r) = target {
            ext_segments
                .get_mut(&r)
                .expect("target is retained")
                .push(seg.clone());
        }
        assignments.push(Assignment {
            segment: idx,
            source_expert: seg.source_expert,
            source_index: seg.source_index,
            target,
            best_expert,
            best_similarity: best_sim,
        });
    }

    let assigned = assignments.iter().filter(|a| a.target.is_some()).count();
    let retained_ratio = if pool.is_empty() {
        0.0
    } else {
        assigned as f64 / pool.len() as f64
    };
    Ok(ReassignmentResult {
        assignments,
        ext_segments,
        retained_ratio,
    })
}

/// Per retained expert, the vector added to its router row: `1/n` of the
/// source expert's row for every received segment, `n` being the source
/// expert's intermediate size.
pub fn router_deltas(
    result: &ReassignmentResult,
    router: &RouterWeights,
    pruned_sizes: &BTreeMap<usize, usize>,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let d = router.gate.cols();
    let n_experts = router.experts();
    let mut deltas: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for a in &result.assignments {
        let Some(r) = a.target else { continue };
        if r >= n_experts {
            return Err(DernError::UnknownExpert(r));
        }
        let o = a.source_expert;
        if o >= n_experts {
            return Err(DernError::UnknownExpert(o));
        }
        let n = *pruned_sizes.get(&o).ok_or(DernError::UnknownExpert(o))?;
        let scale = 1.0 / n as f64;
        let delta = deltas.entry(r).or_insert_with(|| vec![0.0; d]);
        for (acc, &v) in delta.iter_mut().zip(router.row(o)) {
            *acc += scale * f64::from(v);
        }
    }
    Ok(deltas)
}

/// Applies [`router_deltas`] and keeps only the `retained` rows, in the
/// given order.
pub fn transfer_router_mass(
    result: &ReassignmentResult,
    router: &RouterWeights,
    pruned_sizes: &BTreeMap<usize, usize>,
    retained: &[usize],
) -> Result<RouterWeights> {
    let deltas = router_deltas(result, router, pruned_sizes)?;
    if let Some(&bad) = deltas.keys().find(|r| !retained.contains(r)) {
        return Err(DernError::UnknownExpert(bad));
    }
    let mut rows = Vec::with_capacity(retained.len());
    for &r in retained {
        if r >= router.experts() {
            return Err(DernError::UnknownExpert(r));
        }
        let row: Vec<f32> = match deltas.get(&r) {
            Some(delta) => router
                .row(r)
                .iter()
                .zip(delta)
                .map(|(&w, &dv)| (f64::from(w) + dv) as f32)
                .collect(),
            None => router.row(r).to_vec(),
        };
        rows.push(row);
    }
    let gate = if rows.is_empty() {
        Matrix::zeros(0, router.gate.cols())
    } else {
        Matrix::from_rows(&rows)?
    };
    Ok(RouterWeights::new(gate))
}
