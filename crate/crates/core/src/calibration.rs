//! Routing statistics over a calibration set and expert importance scores.
//!
//! The importance of expert `i` is the mean, over calibration tokens, of the
//! routing weight it receives after renormalizing over the token's active
//! top-k set (zero when not selected). Scores therefore sum to one per layer.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, DernError, Result};
use crate::model::MoeModel;
use crate::numfmt;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub tokens: Vec<Vec<f32>>,
    pub source: String,
}

impl CalibrationSet {
    pub fn new(tokens: Vec<Vec<f32>>, source: impl Into<String>) -> Result<Self> {
        let d = tokens.first().ok_or(DernError::EmptyCalibration)?.len();
        if d == 0 {
            return Err(DernError::InvalidArgument(
                "calibration vectors are empty".into(),
            ));
        }
        for t in &tokens {
            check_dim(d, t.len())?;
        }
        Ok(Self {
            tokens,
            source: source.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `m` vectors with i.i.d. standard normal coordinates.
pub fn synth_calibration(d: usize, m: usize, seed: u64) -> Result<CalibrationSet> {
    if m == 0 {
        return Err(DernError::EmptyCalibration);
    }
    if d == 0 {
        return Err(DernError::InvalidArgument(
            "dimension must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..m)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    CalibrationSet::new(tokens, format!("synthetic:d={d},m={m},seed={seed}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    /// Per-expert sum of active-set-normalized routing weights.
    #[serde(serialize_with = "numfmt::ser_vec")]
    pub score_accum: Vec<f64>,
    pub hit_count: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub layers: Vec<LayerStats>,
    pub token_count: u64,
}

/// One streaming pass of every calibration token through every layer's
/// router. Layers all see the same input vectors.
pub fn collect_stats(model: &MoeModel, calib: &CalibrationSet) -> Result<RoutingStats> {
    if calib.is_empty() {
        return Err(DernError::EmptyCalibration);
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for (li, layer) in model.layers.iter().enumerate() {
        let n = layer.num_experts();
        let mut score_accum = vec![0.0f64; n];
        let mut hit_count = vec![0u64; n];
        for x in &calib.tokens {
            let routing = layer.route(x).map_err(|e| e.in_layer(li))?;
            for (&e, w) in routing.experts.iter().zip(routing.normalized()) {
                score_accum[e] += w;
                hit_count[e] += 1;
            }
        }
        layers.push(LayerStats {
            score_accum,
            hit_count,
        });
    }
    Ok(RoutingStats {
        layers,
        token_count: calib.len() as u64,
    })
}

pub fn importance_scores(stats: &RoutingStats) -> Result<Vec<Vec<f64>>> {
    if stats.token_count == 0 {
        return Err(DernError::EmptyCalibration);
    }
    let m = stats.token_count as f64;
    Ok(stats
        .layers
        .iter()
        .map(|l| l.score_accum.iter().map(|s| s / m).collect())
        .collect())
}

/// The `k_retain` highest-scoring experts (ties to the lower id) and the
/// rest, both sorted ascending.
pub fn select_retained(scores: &[f64], k_retain: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = scores.len();
    if k_retain == 0 || k_retain > n {
        return Err(DernError::InvalidArgument(format!(
            "k_retain {k_retain} outside 1..={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut retained = order[..k_retain].to_vec();
    let mut pruned = order[k_retain..].to_vec();
    retained.sort_unstable();
    pruned.sort_unstable();
    Ok((retained, pruned))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    #[serde(serialize_with = "numfmt::ser_vec")]
    pub scores: Vec<f64>,
    pub retained: Vec<usize>,
    pub pruned: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub layers: Vec<LayerImportance>,
}

impl ImportanceReport {
    /// `k_retain[l]` experts kept in layer `l`.
    pub fn build(scores: Vec<Vec<f64>>, k_retain: &[usize]) -> Result<Self> {
        check_dim(scores.len(), k_retain.len())?;
        let layers = scores
            .into_iter()
            .zip(k_retain)
            .enumerate()
            .map(|(li, (scores, &k))| {
                let (retained, pruned) = select_retained(&scores, k).map_err(|e| e.in_layer(li))?;
                Ok(LayerImportance {
                    scores,
                    retained,
                    pruned,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

/// Contents of `stats.json` as written by `dern calibrate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub source: String,
    pub token_count: u64,
    pub layers: Vec<StatsFileLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFileLayer {
    #[serde(serialize_with = "numfmt::ser_vec")]
    pub scores: Vec<f64>,
    #[serde(serialize_with = "numfmt::ser_vec")]
    pub score_accum: Vec<f64>,
    pub hit_count: Vec<u64>,
}

impl StatsFile {
    pub fn new(stats: &RoutingStats, source: &str) -> Result<Self> {
        let scores = importance_scores(stats)?;
        Ok(Self {
            source: source.to_string(),
            token_count: stats.token_count,
            layers: stats
                .layers
                .iter()
                .zip(scores)
                .map(|(l, scores)| StatsFileLayer {
                    scores,
                    score_accum: l.score_accum.clone(),
                    hit_count: l.hit_count.clone(),
                })
                .collect(),
        })
    }

    pub fn scores(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.scores.clone()).collect()
    }
}
