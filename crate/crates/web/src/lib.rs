//! Browser bindings for three small experiments on a synthetic MoE layer:
//! the retained-segment ratio as alpha varies, the expert similarity
//! matrix, and a side-by-side error comparison of DERN and the two
//! baselines.
//!
//! Each exported function returns a JSON string. The `*_json` functions
//! hold the logic and are plain Rust so they can be tested natively.

use std::collections::BTreeMap;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use dern_core::pipeline::{calibration_seed, parse_groups};
use dern_core::{
    collect_stats, decompose, gen_synthetic_model, importance_scores, reassign, run_dern,
    run_expert_average, run_prune_only, select_retained, similarity_report, synth_calibration,
    ClusterConfig, ComponentMask, MoeModel, PipelineConfig, SegmentPool, SyntheticSpec,
};

const D: usize = 16;
const H: usize = 32;
const EXPERTS: usize = 8;
const TOP_K: usize = 2;
const CALIB_TOKENS: usize = 256;
const PROBES: usize = 128;

fn model(groups: &str, noise: f64, seed: u64) -> Result<MoeModel, String> {
    let groups = parse_groups(groups, EXPERTS).map_err(|e| e.to_string())?;
    gen_synthetic_model(&SyntheticSpec {
        d: D,
        h: H,
        experts: EXPERTS,
        top_k: TOP_K,
        layers: 1,
        groups,
        noise_sigma: noise,
        seed,
    })
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct SweepPoint {
    alpha: f64,
    retained_ratio: f64,
}

/// Fraction of pruned segments that find a home at each of `steps + 1`
/// evenly spaced alpha values in `[0, 1]`.
pub fn alpha_sweep_json(
    groups: &str,
    noise: f64,
    seed: u64,
    retain: usize,
    mask: &str,
    steps: usize,
) -> Result<String, String> {
    let steps = steps.max(1);
    let model = model(groups, noise, seed)?;
    let mask: ComponentMask = mask
        .parse()
        .map_err(|e: dern_core::DernError| e.to_string())?;
    let calib =
        synth_calibration(D, CALIB_TOKENS, calibration_seed(seed)).map_err(|e| e.to_string())?;
    let scores = importance_scores(&collect_stats(&model, &calib).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let scores = &scores[0];
    let (retained, pruned) = select_retained(scores, retain).map_err(|e| e.to_string())?;
    let layer = &model.layers[0];
    let targets: BTreeMap<usize, _> = retained
        .iter()
        .map(|&r| (r, decompose(&layer.experts[r], scores[r], r)))
        .collect();
    let pool = SegmentPool::from_experts(pruned.iter().map(|&p| (p, &layer.experts[p], scores[p])));
    let points = (0..=steps)
        .map(|i| {
            let alpha = i as f64 / steps as f64;
            reassign(&pool, &targets, alpha, mask)
                .map(|r| SweepPoint {
                    alpha,
                    retained_ratio: r.retained_ratio,
                })
                .map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, _>>()?;
    serde_json::to_string(&points).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Heatmap {
    expert_level: Vec<Vec<f64>>,
    /// Mean over neurons of the best neuron match, per expert pair.
    neuron_level_mean: Vec<Vec<f64>>,
}

pub fn similarity_json(groups: &str, noise: f64, seed: u64) -> Result<String, String> {
    let report = similarity_report(&model(groups, noise, seed)?, 0).map_err(|e| e.to_string())?;
    let neuron_level_mean = report
        .neuron_level
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64)
                .collect()
        })
        .collect();
    serde_json::to_string(&Heatmap {
        expert_level: report.expert_level,
        neuron_level_mean,
    })
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Row {
    method: &'static str,
    mse: f64,
    cosine: f64,
    params: usize,
}

#[derive(Serialize)]
struct Comparison {
    params_before: usize,
    retained_ratio: f64,
    rows: Vec<Row>,
}

/// Compresses the same synthetic layer three ways and reports output error.
pub fn compare_json(
    groups: &str,
    noise: f64,
    seed: u64,
    retain: usize,
    alpha: f64,
    ratio: f64,
) -> Result<String, String> {
    let model = model(groups, noise, seed)?;
    let calib =
        synth_calibration(D, CALIB_TOKENS, calibration_seed(seed)).map_err(|e| e.to_string())?;
    let config = PipelineConfig {
        alpha,
        ratio,
        seed,
        cluster: ClusterConfig {
            seed,
            ..ClusterConfig::default()
        },
        ..PipelineConfig::new(retain)
    };
    let (_, dern) = run_dern(&model, &calib, &config, PROBES).map_err(|e| e.to_string())?;
    let (_, prune) = run_prune_only(&model, &calib, &config, PROBES).map_err(|e| e.to_string())?;
    let (_, average) =
        run_expert_average(&model, &calib, &config, PROBES).map_err(|e| e.to_string())?;
    let row = |method, r: &dern_core::EvalReport| Row {
        method,
        mse: r.mse,
        cosine: r.cosine,
        params: r.params_after,
    };
    serde_json::to_string(&Comparison {
        params_before: dern.params_before,
        retained_ratio: dern.layers[0].retained_ratio,
        rows: vec![
            row("dern", &dern),
            row("prune", &prune),
            row("average", &average),
        ],
    })
    .map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn alpha_sweep(
    groups: &str,
    noise: f64,
    seed: u32,
    retain: u32,
    mask: &str,
    steps: u32,
) -> Result<String, JsValue> {
    alpha_sweep_json(
        groups,
        noise,
        seed.into(),
        retain as usize,
        mask,
        steps as usize,
    )
    .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn similarity(groups: &str, noise: f64, seed: u32) -> Result<String, JsValue> {
    similarity_json(groups, noise, seed.into()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn compare(
    groups: &str,
    noise: f64,
    seed: u32,
    retain: u32,
    alpha: f64,
    ratio: f64,
) -> Result<String, JsValue> {
    compare_json(groups, noise, seed.into(), retain as usize, alpha, ratio)
        .map_err(|e| JsValue::from_str(&e))
}
