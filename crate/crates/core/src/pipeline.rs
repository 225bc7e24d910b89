//! End-to-end compression: importance scoring, segment reassignment and
//! clustering, plus the prune-only and whole-expert-average baselines,
//! output-fidelity evaluation and similarity diagnostics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::{
    collect_stats, importance_scores, synth_calibration, CalibrationSet, ImportanceReport,
    LayerImportance,
};
use crate::clustering::{compress_layer, ClusterConfig, ExpertClusters};
use crate::error::{DernError, Result};
use crate::linalg::{cosine_f64, Matrix};
use crate::model::{ExpertWeights, MoeLayer, MoeModel, RouterWeights};
use crate::numfmt::{self, fmt9};
use crate::segments::{
    decompose, reassign, transfer_router_mass, Assignment, ComponentMask, SegmentPool,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    Dern,
    PruneOnly,
    ExpertAverage,
}

impl FromStr for Baseline {
    type Err = DernError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dern" => Ok(Self::Dern),
            "prune" | "prune_only" => Ok(Self::PruneOnly),
            "average" | "expert_average" => Ok(Self::ExpertAverage),
            other => Err(DernError::InvalidArgument(format!(
                "unknown baseline '{other}'"
            ))),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dern => "dern",
            Self::PruneOnly => "prune",
            Self::ExpertAverage => "average",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Experts kept per layer.
    pub k_retain: usize,
    /// Optional per-layer override of `k_retain`.
    pub k_retain_per_layer: Option<Vec<usize>>,
    pub alpha: f64,
    /// Reconstructed intermediate size as a fraction of the original.
    pub ratio: f64,
    /// Clustering settings; `k` is derived from `ratio` per expert.
    pub cluster: ClusterConfig,
    pub baseline: Baseline,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(k_retain: usize) -> Self {
        Self {
            k_retain,
            k_retain_per_layer: None,
            alpha: 0.4,
            ratio: 1.0,
            cluster: ClusterConfig::default(),
            baseline: Baseline::Dern,
            seed: 0,
        }
    }

    pub fn retain_counts(&self, layers: usize) -> Result<Vec<usize>> {
        match &self.k_retain_per_layer {
            Some(v) if v.len() != layers => Err(DernError::InvalidArgument(format!(
                "{} per-layer retain counts for {layers} layers",
                v.len()
            ))),
            Some(v) => Ok(v.clone()),
            None => Ok(vec![self.k_retain; layers]),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DernError::InvalidArgument(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(DernError::InvalidArgument(format!(
                "ratio {} outside (0, 1]",
                self.ratio
            )));
        }
        Ok(())
    }
}

/// Seed of the calibration stream derived from a run seed (even domain).
pub fn calibration_seed(seed: u64) -> u64 {
    seed.wrapping_mul(2)
}

/// Seed of the probe stream derived from a run seed (odd domain).
pub fn probe_seed(seed: u64) -> u64 {
    seed.wrapping_mul(2).wrapping_add(1)
}

pub fn probe_set(d: usize, count: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    Ok(synth_calibration(d, count, probe_seed(seed))?.tokens)
}

/// What happened to one layer during compression.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutcome {
    pub retained: Vec<usize>,
    pub pruned: Vec<usize>,
    pub retained_ratio: f64,
    pub assignments: Vec<Assignment>,
    pub clusters: Vec<ExpertClusters>,
    /// Pruned expert -> retained expert it was averaged into.
    pub merged_into: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub model: MoeModel,
    pub layers: Vec<LayerOutcome>,
}

fn prune_only_layer(layer: &MoeLayer, imp: &LayerImportance) -> Result<(MoeLayer, LayerOutcome)> {
    let experts = imp
        .retained
        .iter()
        .map(|&r| layer.experts[r].clone())
        .collect();
    let rows: Vec<Vec<f32>> = imp
        .retained
        .iter()
        .map(|&r| layer.router.row(r).to_vec())
        .collect();
    let router = RouterWeights::new(Matrix::from_rows(&rows)?);
    let top_k = layer.top_k.min(imp.retained.len());
    let out = MoeLayer::new(experts, router, top_k)?;
    Ok((
        out,
        LayerOutcome {
            retained: imp.retained.clone(),
            pruned: imp.pruned.clone(),
            retained_ratio: 0.0,
            assignments: Vec::new(),
            clusters: Vec::new(),
            merged_into: BTreeMap::new(),
        },
    ))
}

fn dern_layer(
    index: usize,
    layer: &MoeLayer,
    imp: &LayerImportance,
    config: &PipelineConfig,
) -> Result<(MoeLayer, LayerOutcome)> {
    let retained_segments: BTreeMap<usize, _> = imp
        .retained
        .iter()
        .map(|&r| (r, decompose(&layer.experts[r], imp.scores[r], r)))
        .collect();
    let pool = SegmentPool::from_experts(
        imp.pruned
            .iter()
            .map(|&p| (p, &layer.experts[p], imp.scores[p])),
    );
    let result = reassign(&pool, &retained_segments, config.alpha, config.cluster.mask)?;
    let sizes: BTreeMap<usize, usize> = imp
        .pruned
        .iter()
        .map(|&p| (p, layer.experts[p].hidden()))
        .collect();
    let router = transfer_router_mass(&result, &layer.router, &sizes, &imp.retained)?;
    let (out, clusters) = compress_layer(
        index,
        layer,
        imp,
        &result,
        router,
        &config.cluster,
        config.ratio,
    )?;
    Ok((
        out,
        LayerOutcome {
            retained: imp.retained.clone(),
            pruned: imp.pruned.clone(),
            retained_ratio: result.retained_ratio,
            assignments: result.assignments,
            clusters,
            merged_into: BTreeMap::new(),
        },
    ))
}

fn expert_average_layer(
    layer: &MoeLayer,
    imp: &LayerImportance,
) -> Result<(MoeLayer, LayerOutcome)> {
    let flat: Vec<Vec<f32>> = layer.experts.iter().map(ExpertWeights::flatten).collect();
    let mut groups: BTreeMap<usize, Vec<usize>> =
        imp.retained.iter().map(|&r| (r, vec![r])).collect();
    let mut merged_into = BTreeMap::new();
    for &p in &imp.pruned {
        let mut best = (imp.retained[0], f64::NEG_INFINITY);
        for &r in &imp.retained {
            if flat[r].len() != flat[p].len() {
                return Err(DernError::ShapeMismatch(format!(
                    "expert {p} and expert {r} differ in shape; cannot average"
                )));
            }
            let s = cosine_f64(&flat[p], &flat[r]);
            if s > best.1 {
                best = (r, s);
            }
        }
        groups.get_mut(&best.0).expect("retained").push(p);
        merged_into.insert(p, best.0);
    }

    let d = layer.dim();
    let mut experts = Vec::with_capacity(groups.len());
    let mut rows = Vec::with_capacity(groups.len());
    for (&r, members) in &groups {
        let total: f64 = members.iter().map(|&i| imp.scores[i]).sum();
        let weights: Vec<f64> = if total > 0.0 {
            members.iter().map(|&i| imp.scores[i] / total).collect()
        } else {
            vec![1.0 / members.len() as f64; members.len()]
        };
        let base = &layer.experts[r];
        let mut acc = vec![0.0f64; base.param_count()];
        for (&i, &w) in members.iter().zip(&weights) {
            for (a, &v) in acc.iter_mut().zip(&flat[i]) {
                *a += w * f64::from(v);
            }
        }
        let (h, n) = (base.hidden(), h_times_d(base));
        let acc: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
        experts.push(ExpertWeights::new(
            Matrix::new(h, d, acc[..n].to_vec())?,
            Matrix::new(h, d, acc[n..2 * n].to_vec())?,
            Matrix::new(d, h, acc[2 * n..].to_vec())?,
        )?);

        let mut row = vec![0.0f64; d];
        for &i in members {
            for (a, &v) in row.iter_mut().zip(layer.router.row(i)) {
                *a += f64::from(v);
            }
        }
        rows.push(row.into_iter().map(|v| v as f32).collect::<Vec<f32>>());
    }
    let router = RouterWeights::new(Matrix::from_rows(&rows)?);
    let top_k = layer.top_k.min(experts.len());
    Ok((
        MoeLayer::new(experts, router, top_k)?,
        LayerOutcome {
            retained: imp.retained.clone(),
            pruned: imp.pruned.clone(),
            retained_ratio: 0.0,
            assignments: Vec::new(),
            clusters: Vec::new(),
            merged_into,
        },
    ))
}

fn h_times_d(e: &ExpertWeights) -> usize {
    e.hidden() * e.dim()
}

/// Compresses every layer of `model` given per-layer importance scores.
pub fn compress(
    model: &MoeModel,
    scores: &[Vec<f64>],
    config: &PipelineConfig,
) -> Result<Compressed> {
    config.validate()?;
    if scores.len() != model.layers.len() {
        return Err(DernError::ShapeMismatch(format!(
            "scores cover {} layers, model has {}",
            scores.len(),
            model.layers.len()
        )));
    }
    for (li, (s, l)) in scores.iter().zip(&model.layers).enumerate() {
        if s.len() != l.num_experts() {
            return Err(DernError::ShapeMismatch(format!(
                "{} scores for {} experts",
                s.len(),
                l.num_experts()
            ))
            .in_layer(li));
        }
    }
    let report =
        ImportanceReport::build(scores.to_vec(), &config.retain_counts(model.layers.len())?)?;

    let mut layers = Vec::with_capacity(model.layers.len());
    let mut outcomes = Vec::with_capacity(model.layers.len());
    for (li, (layer, imp)) in model.layers.iter().zip(&report.layers).enumerate() {
        let (l, o) = match config.baseline {
            Baseline::Dern => dern_layer(li, layer, imp, config),
            Baseline::PruneOnly => prune_only_layer(layer, imp),
            Baseline::ExpertAverage => expert_average_layer(layer, imp),
        }
        .map_err(|e| match e {
            e @ DernError::InLayer { .. } => e,
            e => e.in_layer(li),
        })?;
        if !l.is_finite() {
            return Err(
                DernError::Numerical("compressed weights contain NaN or Inf".into()).in_layer(li),
            );
        }
        layers.push(l);
        outcomes.push(o);
    }
    let mut meta = model.meta.clone();
    meta.insert("compression".into(), config.baseline.to_string());
    Ok(Compressed {
        model: MoeModel::new(layers, meta)?,
        layers: outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerEval {
    #[serde(serialize_with = "numfmt::ser")]
    pub mse: f64,
    #[serde(serialize_with = "numfmt::ser")]
    pub cosine: f64,
    pub params_before: usize,
    pub params_after: usize,
    #[serde(serialize_with = "numfmt::ser")]
    pub retained_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub layers: Vec<LayerEval>,
    /// Residual-stack output deviation.
    #[serde(serialize_with = "numfmt::ser")]
    pub mse: f64,
    #[serde(serialize_with = "numfmt::ser")]
    pub cosine: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub probes: usize,
    #[serde(serialize_with = "numfmt::ser")]
    pub seconds: f64,
}

fn deviation(a: &[Vec<f32>], b: &[Vec<f32>]) -> (f64, f64) {
    let mut sq = 0.0f64;
    let mut count = 0usize;
    let mut cos = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y) {
            let diff = f64::from(*p) - f64::from(*q);
            sq += diff * diff;
        }
        count += x.len();
        cos += if x == y { 1.0 } else { cosine_f64(x, y) };
    }
    (sq / count.max(1) as f64, cos / a.len().max(1) as f64)
}

/// Wall-clock start, or `None` where the platform has no clock
/// (`wasm32-unknown-unknown` panics on `Instant::now`).
fn stopwatch() -> Option<Instant> {
    if cfg!(target_arch = "wasm32") {
        None
    } else {
        Some(Instant::now())
    }
}

fn seconds_since(start: Option<Instant>) -> f64 {
    start.map_or(0.0, |t| t.elapsed().as_secs_f64())
}

/// Compares `compressed` against `original` on `probes`. Per-layer numbers
/// feed the same probe vectors to each layer; the model-level numbers use
/// the residual stack.
pub fn evaluate(
    original: &MoeModel,
    compressed: &MoeModel,
    probes: &[Vec<f32>],
) -> Result<EvalReport> {
    if original.layers.len() != compressed.layers.len() {
        return Err(DernError::ShapeMismatch(format!(
            "original has {} layers, compressed has {}",
            original.layers.len(),
            compressed.layers.len()
        )));
    }
    if probes.is_empty() {
        return Err(DernError::InvalidArgument("no probe vectors".into()));
    }
    let start = stopwatch();
    let mut layers = Vec::with_capacity(original.layers.len());
    for (li, (a, b)) in original.layers.iter().zip(&compressed.layers).enumerate() {
        let ya = probes
            .iter()
            .map(|x| a.forward(x))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_layer(li))?;
        let yb = probes
            .iter()
            .map(|x| b.forward(x))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_layer(li))?;
        let (mse, cosine) = deviation(&ya, &yb);
        layers.push(LayerEval {
            mse,
            cosine,
            params_before: a.param_count(),
            params_after: b.param_count(),
            retained_ratio: 0.0,
        });
    }
    let ya = probes
        .iter()
        .map(|x| original.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let yb = probes
        .iter()
        .map(|x| compressed.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let (mse, cosine) = deviation(&ya, &yb);
    if !mse.is_finite() {
        return Err(DernError::Numerical(
            "output deviation is not finite".into(),
        ));
    }
    Ok(EvalReport {
        layers,
        mse,
        cosine,
        params_before: original.param_count(),
        params_after: compressed.param_count(),
        probes: probes.len(),
        seconds: seconds_since(start),
    })
}

/// Calibrates, compresses with `config.baseline`, and evaluates against
/// `probe_count` fresh probes.
pub fn run(
    model: &MoeModel,
    calib: &CalibrationSet,
    config: &PipelineConfig,
    probe_count: usize,
) -> Result<(MoeModel, EvalReport)> {
    let start = stopwatch();
    let stats = collect_stats(model, calib)?;
    let scores = importance_scores(&stats)?;
    let out = compress(model, &scores, config)?;
    let d = model
        .dim()
        .ok_or_else(|| DernError::InvalidArgument("model has no layers".into()))?;
    let probes = probe_set(d, probe_count, config.seed)?;
    let mut report = evaluate(model, &out.model, &probes)?;
    for (l, o) in report.layers.iter_mut().zip(&out.layers) {
        l.retained_ratio = o.retained_ratio;
    }
    report.seconds = seconds_since(start);
    Ok((out.model, report))
}

pub fn run_dern(
    model: &MoeModel,
    calib: &CalibrationSet,
    config: &PipelineConfig,
    probe_count: usize,
) -> Result<(MoeModel, EvalReport)> {
    run(
        model,
        calib,
        &PipelineConfig {
            baseline: Baseline::Dern,
            ..config.clone()
        },
        probe_count,
    )
}

pub fn run_prune_only(
    model: &MoeModel,
    calib: &CalibrationSet,
    config: &PipelineConfig,
    probe_count: usize,
) -> Result<(MoeModel, EvalReport)> {
    run(
        model,
        calib,
        &PipelineConfig {
            baseline: Baseline::PruneOnly,
            ..config.clone()
        },
        probe_count,
    )
}

pub fn run_expert_average(
    model: &MoeModel,
    calib: &CalibrationSet,
    config: &PipelineConfig,
    probe_count: usize,
) -> Result<(MoeModel, EvalReport)> {
    run(
        model,
        calib,
        &PipelineConfig {
            baseline: Baseline::ExpertAverage,
            ..config.clone()
        },
        probe_count,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    /// `expert_level[i][j]`: cosine of the flattened experts.
    #[serde(serialize_with = "numfmt::ser_mat")]
    pub expert_level: Vec<Vec<f64>>,
    /// `neuron_level[i][j][p]`: best cosine of neuron `p` of expert `i`
    /// against any neuron of expert `j` (full gate/up/down vectors).
    pub neuron_level: Vec<Vec<Vec<f64>>>,
}

pub fn similarity_report(model: &MoeModel, layer_index: usize) -> Result<SimReport> {
    let layer = model.layers.get(layer_index).ok_or_else(|| {
        DernError::InvalidArgument(format!(
            "layer {layer_index} out of range (model has {})",
            model.layers.len()
        ))
    })?;
    let n = layer.num_experts();
    let flat: Vec<Vec<f32>> = layer.experts.iter().map(ExpertWeights::flatten).collect();
    let mut expert_level = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let s = if flat[i].len() == flat[j].len() {
                cosine_f64(&flat[i], &flat[j])
            } else {
                0.0
            };
            expert_level[i][j] = s;
            expert_level[j][i] = s;
        }
    }
    let vectors: Vec<Vec<Vec<f32>>> = layer
        .experts
        .iter()
        .map(|e| {
            decompose(e, 1.0, 0)
                .iter()
                .map(|s| crate::segments::vectorize(s, ComponentMask::FULL))
                .collect()
        })
        .collect();
    let neuron_level = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    vectors[i]
                        .iter()
                        .map(|p| {
                            vectors[j]
                                .iter()
                                .map(|q| cosine_f64(p, q))
                                .fold(f64::NEG_INFINITY, f64::max)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(SimReport {
        expert_level,
        neuron_level,
    })
}

/// Parameters of a synthetic model whose experts come in redundancy groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d: usize,
    pub h: usize,
    pub experts: usize,
    pub top_k: usize,
    pub layers: usize,
    /// Partition of `0..experts`; members of a group share one base draw.
    pub groups: Vec<Vec<usize>>,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Parses `"0,1,2,3/4,5,6,7"` (groups separated by `/`) or `"chunks:<g>"`
/// (`g` contiguous groups of equal size) for `n` experts.
pub fn parse_groups(spec: &str, n: usize) -> Result<Vec<Vec<usize>>> {
    let bad = |m: String| DernError::InvalidArgument(m);
    if let Some(g) = spec.strip_prefix("chunks:") {
        let g: usize = g
            .parse()
            .map_err(|_| bad(format!("bad group count '{g}'")))?;
        if g == 0 || !n.is_multiple_of(g) {
            return Err(bad(format!(
                "{n} experts do not split into {g} equal groups"
            )));
        }
        let size = n / g;
        return Ok((0..g)
            .map(|i| (i * size..(i + 1) * size).collect())
            .collect());
    }
    spec.split('/')
        .map(|grp| {
            grp.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .map_err(|_| bad(format!("bad expert id '{t}'")))
                })
                .collect()
        })
        .collect()
}

fn check_partition(groups: &[Vec<usize>], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in groups.iter().flatten() {
        if i >= n || seen[i] {
            return Err(DernError::InvalidArgument(format!(
                "groups must partition 0..{n}; expert {i} is out of range or repeated"
            )));
        }
        seen[i] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(DernError::InvalidArgument(format!(
            "expert {missing} is in no group"
        )));
    }
    Ok(())
}

fn gaussian(rng: &mut ChaCha8Rng, count: usize, scale: f64) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Experts within a group are a shared Gaussian base plus i.i.d. noise of
/// relative scale `noise_sigma`; router rows are independent.
pub fn gen_synthetic_model(spec: &SyntheticSpec) -> Result<MoeModel> {
    let SyntheticSpec {
        d,
        h,
        experts: n,
        top_k,
        layers,
        ref groups,
        noise_sigma,
        seed,
    } = *spec;
    if d == 0 || h == 0 || n == 0 {
        return Err(DernError::InvalidArgument(
            "d, h and experts must be positive".into(),
        ));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(DernError::InvalidArgument(format!(
            "noise {noise_sigma} must be >= 0"
        )));
    }
    check_partition(groups, n)?;
    let in_scale = 1.0 / (d as f64).sqrt();
    let out_scale = 1.0 / (h as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        let mut experts: Vec<Option<ExpertWeights>> = vec![None; n];
        for group in groups {
            let base_gate = gaussian(&mut rng, h * d, in_scale);
            let base_up = gaussian(&mut rng, h * d, in_scale);
            let base_down = gaussian(&mut rng, d * h, out_scale);
            for &e in group {
                let mut noisy = |base: &[f64], scale: f64| -> Vec<f32> {
                    base.iter()
                        .map(|&b| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            (b + noise_sigma * scale * z) as f32
                        })
                        .collect()
                };
                let gate = noisy(&base_gate, in_scale);
                let up = noisy(&base_up, in_scale);
                let down = noisy(&base_down, out_scale);
                experts[e] = Some(ExpertWeights::new(
                    Matrix::new(h, d, gate)?,
                    Matrix::new(h, d, up)?,
                    Matrix::new(d, h, down)?,
                )?);
            }
        }
        let router: Vec<f32> = gaussian(&mut rng, n * d, in_scale)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        out.push(MoeLayer::new(
            experts
                .into_iter()
                .map(|e| e.expect("partition covers all"))
                .collect(),
            RouterWeights::new(Matrix::new(n, d, router)?),
            top_k,
        )?);
    }
    let mut meta = BTreeMap::new();
    meta.insert("name".into(), "synthetic".into());
    meta.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    meta.insert("seed".into(), seed.to_string());
    MoeModel::new(out, meta)
}

/// Writes `layer,source_expert,source_index,target_expert,best_similarity`.
pub fn write_assignments_csv<W: Write>(out: W, layers: &[LayerOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "layer",
        "source_expert",
        "source_index",
        "target_expert",
        "best_similarity",
    ])?;
    for (li, l) in layers.iter().enumerate() {
        for a in &l.assignments {
            let target = a.target.map_or("-1".to_string(), |t| t.to_string());
            w.write_record([
                li.to_string(),
                a.source_expert.to_string(),
                a.source_index.to_string(),
                target,
                fmt9(a.best_similarity),
            ])?;
        }
    }
    w.flush().map_err(|e| DernError::io("<csv>", e))?;
    Ok(())
}

/// Writes `layer,expert,cluster_id,member_count,r_bar,final_objective`.
pub fn write_clusters_csv<W: Write>(out: W, layers: &[LayerOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "layer",
        "expert",
        "cluster_id",
        "member_count",
        "r_bar",
        "final_objective",
    ])?;
    for (li, l) in layers.iter().enumerate() {
        for c in &l.clusters {
            let counts = c.state.member_counts();
            for (j, count) in counts.iter().enumerate() {
                w.write_record([
                    li.to_string(),
                    c.expert.to_string(),
                    j.to_string(),
                    count.to_string(),
                    fmt9(c.state.mean_norms[j]),
                    fmt9(c.state.final_objective()),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| DernError::io("<csv>", e))?;
    Ok(())
}

/// Expert-level matrix as CSV with an `expert` column and one column per expert.
pub fn write_expert_sim_csv<W: Write>(out: W, report: &SimReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = report.expert_level.len();
    let mut header = vec!["expert".to_string()];
    header.extend((0..n).map(|j| format!("e{j}")));
    w.write_record(&header)?;
    for (i, row) in report.expert_level.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|&v| fmt9(v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| DernError::io("<csv>", e))?;
    Ok(())
}

/// Neuron-level maxima in long form: `expert_i,expert_j,neuron,max_similarity`.
pub fn write_neuron_sim_csv<W: Write>(out: W, report: &SimReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["expert_i", "expert_j", "neuron", "max_similarity"])?;
    for (i, per_j) in report.neuron_level.iter().enumerate() {
        for (j, values) in per_j.iter().enumerate() {
            for (p, &v) in values.iter().enumerate() {
                w.write_record([i.to_string(), j.to_string(), p.to_string(), fmt9(v)])?;
            }
        }
    }
    w.flush().map_err(|e| DernError::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(groups: &str, n: usize, noise: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            d: 8,
            h: 12,
            experts: n,
            top_k: 2,
            layers: 2,
            groups: parse_groups(groups, n).unwrap(),
            noise_sigma: noise,
            seed,
        }
    }

    fn setup(seed: u64) -> (MoeModel, CalibrationSet) {
        let model = gen_synthetic_model(&spec("0,1/2,3/4,5", 6, 0.1, seed)).unwrap();
        let calib = synth_calibration(8, 128, calibration_seed(seed)).unwrap();
        (model, calib)
    }

    fn layer_outputs(model: &MoeModel, probes: &[Vec<f32>]) -> Vec<Vec<Vec<f32>>> {
        model
            .layers
            .iter()
            .map(|l| probes.iter().map(|x| l.forward(x).unwrap()).collect())
            .collect()
    }

    #[test]
    fn seed_domains_are_disjoint() {
        for s in 0..100 {
            assert_eq!(calibration_seed(s) % 2, 0);
            assert_eq!(probe_seed(s) % 2, 1);
        }
    }

    #[test]
    fn keeping_every_expert_is_identity() {
        let (model, calib) = setup(1);
        for baseline in [Baseline::Dern, Baseline::PruneOnly, Baseline::ExpertAverage] {
            let config = PipelineConfig {
                baseline,
                ..PipelineConfig::new(6)
            };
            let (out, report) = run(&model, &calib, &config, 100).unwrap();
            assert!(report.mse <= 1e-8, "{baseline}: {}", report.mse);
            assert_eq!(report.params_before, report.params_after);
            assert_eq!(out.param_count(), model.param_count());
        }
    }

    #[test]
    fn alpha_one_matches_prune_only() {
        let (model, calib) = setup(2);
        let config = PipelineConfig {
            alpha: 1.0,
            ..PipelineConfig::new(3)
        };
        let (dern, report) = run_dern(&model, &calib, &config, 10).unwrap();
        let (prune, _) = run_prune_only(&model, &calib, &config, 10).unwrap();
        assert!(report.layers.iter().all(|l| l.retained_ratio == 0.0));
        let probes = probe_set(8, 100, 99).unwrap();
        let a = layer_outputs(&dern, &probes);
        let b = layer_outputs(&prune, &probes);
        for (la, lb) in a.iter().zip(&b) {
            for (x, y) in la.iter().zip(lb) {
                let scale = y.iter().fold(1e-6f32, |m, v| m.max(v.abs()));
                for (p, q) in x.iter().zip(y) {
                    assert!((p - q).abs() <= 1e-5 * scale);
                }
            }
        }
        for (l, p) in dern.layers.iter().zip(&prune.layers) {
            assert_eq!(l.router, p.router);
        }
    }

    #[test]
    fn prune_only_drops_exact_parameter_totals() {
        let (model, calib) = setup(3);
        let stats = collect_stats(&model, &calib).unwrap();
        let scores = importance_scores(&stats).unwrap();
        let config = PipelineConfig {
            baseline: Baseline::PruneOnly,
            ..PipelineConfig::new(4)
        };
        let out = compress(&model, &scores, &config).unwrap();
        let mut dropped = 0;
        for (layer, outcome) in model.layers.iter().zip(&out.layers) {
            for &p in &outcome.pruned {
                dropped += layer.experts[p].param_count() + layer.dim();
            }
            assert_eq!(outcome.pruned.len(), 2);
        }
        assert_eq!(model.param_count() - out.model.param_count(), dropped);
    }

    #[test]
    fn compression_never_adds_parameters() {
        let (model, calib) = setup(4);
        for (baseline, ratio) in [
            (Baseline::Dern, 1.0),
            (Baseline::Dern, 0.5),
            (Baseline::PruneOnly, 1.0),
            (Baseline::ExpertAverage, 1.0),
        ] {
            let config = PipelineConfig {
                baseline,
                ratio,
                ..PipelineConfig::new(3)
            };
            let (_, r) = run(&model, &calib, &config, 20).unwrap();
            assert!(r.params_after < r.params_before);
            assert!(r.mse >= 0.0 && (-1.0..=1.0).contains(&r.cosine));
        }
        let config = PipelineConfig {
            ratio: 0.5,
            ..PipelineConfig::new(6)
        };
        let (_, r) = run(&model, &calib, &config, 20).unwrap();
        assert!(r.params_after < r.params_before);
    }

    #[test]
    fn averaging_identical_experts_returns_that_expert() {
        let model = gen_synthetic_model(&spec("0,1/2", 3, 0.0, 5)).unwrap();
        let layer = &model.layers[0];
        let imp = LayerImportance {
            scores: vec![0.5, 0.2, 0.3],
            retained: vec![0, 2],
            pruned: vec![1],
        };
        let (out, outcome) = expert_average_layer(layer, &imp).unwrap();
        assert_eq!(outcome.merged_into.get(&1), Some(&0));
        let (a, b) = (out.experts[0].flatten(), layer.experts[0].flatten());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
        assert_eq!(out.experts[1], layer.experts[2]);
        let row: Vec<f32> = layer
            .router
            .row(0)
            .iter()
            .zip(layer.router.row(1))
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(out.router.row(0), &row[..]);
        assert_eq!(out.router.row(1), layer.router.row(2));
    }

    #[test]
    fn expert_average_is_convex_combination() {
        let model = gen_synthetic_model(&spec("0/1/2", 3, 0.0, 6)).unwrap();
        let layer = &model.layers[0];
        let imp = LayerImportance {
            scores: vec![0.0, 0.6, 0.4],
            retained: vec![1],
            pruned: vec![0, 2],
        };
        let (out, outcome) = expert_average_layer(layer, &imp).unwrap();
        assert_eq!(outcome.merged_into.len(), 2);
        let f: Vec<Vec<f32>> = layer.experts.iter().map(ExpertWeights::flatten).collect();
        for (i, v) in out.experts[0].flatten().iter().enumerate() {
            let want = 0.6 * f64::from(f[1][i]) + 0.4 * f64::from(f[2][i]);
            assert!((f64::from(*v) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn evaluating_a_model_against_itself_is_exact() {
        let (model, _) = setup(7);
        let probes = probe_set(8, 50, 7).unwrap();
        let r = evaluate(&model, &model, &probes).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.cosine, 1.0);
        assert!(r.layers.iter().all(|l| l.mse == 0.0));
    }

    #[test]
    fn config_validation() {
        let (model, calib) = setup(8);
        let bad_alpha = PipelineConfig {
            alpha: 1.5,
            ..PipelineConfig::new(3)
        };
        assert!(run(&model, &calib, &bad_alpha, 5).is_err());
        assert!(run(&model, &calib, &PipelineConfig::new(7), 5).is_err());
        let per_layer = PipelineConfig {
            k_retain_per_layer: Some(vec![2, 5]),
            ..PipelineConfig::new(3)
        };
        let scores = importance_scores(&collect_stats(&model, &calib).unwrap()).unwrap();
        let out = compress(&model, &scores, &per_layer).unwrap();
        assert_eq!(out.model.layers[0].num_experts(), 2);
        assert_eq!(out.model.layers[1].num_experts(), 5);
        let wrong_len = PipelineConfig {
            k_retain_per_layer: Some(vec![2]),
            ..PipelineConfig::new(3)
        };
        assert!(compress(&model, &scores, &wrong_len).is_err());
    }

    #[test]
    fn similarity_report_matches_brute_force() {
        let model = gen_synthetic_model(&spec("0/1/2/3", 4, 0.0, 9)).unwrap();
        let report = similarity_report(&model, 1).unwrap();
        let layer = &model.layers[1];
        for i in 0..4 {
            assert!((report.expert_level[i][i] - 1.0).abs() < 1e-6);
            for j in 0..4 {
                let a = layer.experts[i].flatten();
                let b = layer.experts[j].flatten();
                let dot: f64 = a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| f64::from(*x) * f64::from(*y))
                    .sum();
                let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
                assert!((report.expert_level[i][j] - dot / (na * nb)).abs() < 1e-9);
                assert_eq!(report.expert_level[i][j], report.expert_level[j][i]);

                let si = decompose(&layer.experts[i], 1.0, i);
                let sj = decompose(&layer.experts[j], 1.0, j);
                for (p, s) in si.iter().enumerate() {
                    let mut best = f64::NEG_INFINITY;
                    for t in &sj {
                        let u = crate::segments::vectorize(s, ComponentMask::FULL);
                        let v = crate::segments::vectorize(t, ComponentMask::FULL);
                        best = best.max(cosine_f64(&u, &v));
                    }
                    assert_eq!(report.neuron_level[i][j][p], best);
                }
            }
            assert!(report.neuron_level[i][i]
                .iter()
                .all(|&v| (v - 1.0).abs() < 1e-6));
        }
        assert!(similarity_report(&model, 2).is_err());
    }

    #[test]
    fn copies_are_fully_similar() {
        let model = gen_synthetic_model(&spec("0,1,2", 3, 0.0, 10)).unwrap();
        let report = similarity_report(&model, 0).unwrap();
        for row in &report.expert_level {
            assert!(row.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        }
        for per_j in &report.neuron_level {
            for v in per_j {
                assert!(v.iter().all(|&x| (x - 1.0).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn generator_is_seeded() {
        let a = gen_synthetic_model(&spec("0,1/2,3", 4, 0.05, 11)).unwrap();
        let b = gen_synthetic_model(&spec("0,1/2,3", 4, 0.05, 11)).unwrap();
        let c = gen_synthetic_model(&spec("0,1/2,3", 4, 0.05, 12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.meta.get("seed").map(String::as_str), Some("11"));
    }

    #[test]
    fn independent_experts_are_nearly_orthogonal() {
        let s = SyntheticSpec {
            d: 32,
            h: 64,
            experts: 8,
            top_k: 2,
            layers: 1,
            groups: parse_groups("chunks:8", 8).unwrap(),
            noise_sigma: 0.0,
            seed: 13,
        };
        let report = similarity_report(&gen_synthetic_model(&s).unwrap(), 0).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    assert!(report.expert_level[i][j].abs() < 0.2);
                }
            }
        }
    }

    #[test]
    fn group_parsing() {
        assert_eq!(
            parse_groups("0,1/2,3", 4).unwrap(),
            vec![vec![0, 1], vec![2, 3]]
        );
        assert_eq!(
            parse_groups("chunks:2", 6).unwrap(),
            vec![vec![0, 1, 2], vec![3, 4, 5]]
        );
        assert!(parse_groups("chunks:4", 6).is_err());
        assert!(parse_groups("0,x", 2).is_err());
        let mut bad = spec("0,1/2,3", 4, 0.0, 0);
        bad.groups = vec![vec![0, 1], vec![1, 2, 3]];
        assert!(gen_synthetic_model(&bad).is_err());
        bad.groups = vec![vec![0, 1], vec![2]];
        assert!(gen_synthetic_model(&bad).is_err());
        bad.groups = vec![vec![0, 1, 2, 4]];
        assert!(gen_synthetic_model(&bad).is_err());
    }

    #[test]
    fn csv_dumps_have_headers_and_rows() {
        let (model, calib) = setup(14);
        let scores = importance_scores(&collect_stats(&model, &calib).unwrap()).unwrap();
        let config = PipelineConfig {
            alpha: 0.0,
            ..PipelineConfig::new(3)
        };
        let out = compress(&model, &scores, &config).unwrap();
        let mut buf = Vec::new();
        write_assignments_csv(&mut buf, &out.layers).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(
            text.starts_with("layer,source_expert,source_index,target_expert,best_similarity\n")
        );
        assert_eq!(text.lines().count(), 1 + 2 * 3 * 12);
        let mut buf = Vec::new();
        write_clusters_csv(&mut buf, &out.layers).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().lines().count(),
            1 + 2 * 3 * 12
        );

        let report = similarity_report(&model, 0).unwrap();
        let mut buf = Vec::new();
        write_expert_sim_csv(&mut buf, &report).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("expert,e0,e1,e2,e3,e4,e5\n"));
        let mut buf = Vec::new();
        write_neuron_sim_csv(&mut buf, &report).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().lines().count(),
            1 + 6 * 6 * 12
        );
    }
}
