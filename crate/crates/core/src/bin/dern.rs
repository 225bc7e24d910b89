//! `dern`: command-line front end for synthetic model generation,
//! calibration, compression, evaluation and similarity analysis.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dern_core::calibration::StatsFile;
use dern_core::clustering::SeedPool;
use dern_core::numfmt;
use dern_core::pipeline::{
    calibration_seed, compress, parse_groups, probe_set, write_assignments_csv, write_clusters_csv,
    write_expert_sim_csv, write_neuron_sim_csv,
};
use dern_core::{
    collect_stats, evaluate, gen_synthetic_model, load_calibration, load_model, save_model,
    similarity_report, synth_calibration, Baseline, ComponentMask, DernError, EvalReport,
    InitStrategy, PipelineConfig, Result, SyntheticSpec,
};

#[derive(Parser)]
#[command(
    name = "dern",
    version,
    about = "Expert pruning with neuron-segment reuse for GLU MoE layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic model whose experts come in redundancy groups.
    Gen(GenArgs),
    /// Collect routing statistics and importance scores.
    Calibrate(CalibrateArgs),
    /// Prune and rebuild experts.
    Compress(Box<CompressArgs>),
    /// Compare a compressed model with its original on random probes.
    Eval(EvalArgs),
    /// Expert- and neuron-level cosine similarity of one layer.
    AnalyzeSim(AnalyzeArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long)]
    d: usize,
    #[arg(long)]
    h: usize,
    #[arg(long)]
    experts: usize,
    #[arg(long)]
    top_k: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    /// `0,1,2,3/4,5,6,7` or `chunks:<g>`; defaults to one group per expert.
    #[arg(long)]
    groups: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
#[command(group(ArgGroup::new("source").required(true).args(["synth_tokens", "calib"])))]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Number of Gaussian calibration vectors to draw.
    #[arg(long)]
    synth_tokens: Option<usize>,
    /// Calibration file (`.cal`).
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(clap::Args)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stats: PathBuf,
    /// JSON file with defaults for any of the options below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experts kept in every layer.
    #[arg(long)]
    retain: Option<usize>,
    /// Comma-separated per-layer retain counts; overrides `--retain`.
    #[arg(long)]
    retain_per_layer: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    ratio: Option<f64>,
    /// `gate,up,down` or any subset such as `up,down`.
    #[arg(long)]
    mask: Option<String>,
    /// `gate`, `random` or `equidistant`.
    #[arg(long)]
    init: Option<String>,
    #[arg(long, value_enum)]
    weighting: Option<Switch>,
    /// `dern`, `prune` or `average`.
    #[arg(long)]
    baseline: Option<String>,
    /// `internal` (seed from the expert's own neurons) or `all`.
    #[arg(long)]
    seed_pool: Option<String>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Probe count for the evaluation section of the report.
    #[arg(long, default_value_t = 256)]
    probes: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    dump_assignments: Option<PathBuf>,
    #[arg(long)]
    dump_clusters: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    compressed: PathBuf,
    #[arg(long, default_value_t = 256)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    out_expert: PathBuf,
    #[arg(long)]
    out_neuron: PathBuf,
}

/// Optional values read from `--config`.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    retain: Option<usize>,
    retain_per_layer: Option<Vec<usize>>,
    alpha: Option<f64>,
    ratio: Option<f64>,
    mask: Option<String>,
    init: Option<String>,
    weighting: Option<bool>,
    baseline: Option<String>,
    seed_pool: Option<String>,
    max_iters: Option<usize>,
    tol: Option<f64>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct LayerSummary {
    retained: Vec<usize>,
    pruned: Vec<usize>,
    #[serde(serialize_with = "numfmt::ser_vec")]
    scores: Vec<f64>,
    #[serde(serialize_with = "numfmt::ser")]
    retained_ratio: f64,
    assigned_segments: usize,
    merged_into: BTreeMap<usize, usize>,
}

#[derive(Serialize)]
struct CompressReport {
    baseline: String,
    #[serde(serialize_with = "numfmt::ser")]
    alpha: f64,
    #[serde(serialize_with = "numfmt::ser")]
    ratio: f64,
    mask: String,
    init: String,
    weighting: bool,
    seed_pool: String,
    seed: u64,
    retain: Vec<usize>,
    layers: Vec<LayerSummary>,
    eval: EvalReport,
}

fn parse<T: FromStr<Err = DernError>>(s: &str) -> Result<T> {
    s.parse()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| DernError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| DernError::io(path, e))
}

fn model_dim(model: &dern_core::MoeModel) -> Result<usize> {
    model
        .dim()
        .ok_or_else(|| DernError::MalformedHeader("model has no layers".into()))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let groups = match &a.groups {
        Some(g) => parse_groups(g, a.experts)?,
        None => (0..a.experts).map(|i| vec![i]).collect(),
    };
    let model = gen_synthetic_model(&SyntheticSpec {
        d: a.d,
        h: a.h,
        experts: a.experts,
        top_k: a.top_k,
        layers: a.layers,
        groups,
        noise_sigma: a.noise,
        seed: a.seed,
    })?;
    save_model(&model, &a.out)
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let d = model_dim(&model)?;
    let calib = match (a.synth_tokens, &a.calib) {
        (Some(m), _) => synth_calibration(d, m, calibration_seed(a.seed))?,
        (None, Some(path)) => load_calibration(path)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    if calib.dim() != d {
        return Err(DernError::ShapeMismatch(format!(
            "calibration vectors have dimension {}, model expects {d}",
            calib.dim()
        )));
    }
    let stats = collect_stats(&model, &calib)?;
    write_json(&a.out, &StatsFile::new(&stats, &calib.source)?)
}

fn pipeline_config(a: &CompressArgs) -> Result<PipelineConfig> {
    let file: ConfigFile = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| DernError::io(path, e))?;
            serde_json::from_str(&text)?
        }
        None => ConfigFile::default(),
    };
    let per_layer = match &a.retain_per_layer {
        Some(s) => Some(
            s.split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| DernError::InvalidArgument(format!("bad retain count '{t}'")))
                })
                .collect::<Result<Vec<usize>>>()?,
        ),
        None => file.retain_per_layer,
    };
    let retain = a.retain.or(file.retain);
    let k_retain = match (retain, &per_layer) {
        (Some(k), _) => k,
        (None, Some(v)) => v.first().copied().unwrap_or(0),
        (None, None) => {
            return Err(DernError::InvalidArgument(
                "one of --retain or --retain-per-layer is required".into(),
            ))
        }
    };

    let mut config = PipelineConfig::new(k_retain);
    config.k_retain_per_layer = per_layer;
    if let Some(v) = a.alpha.or(file.alpha) {
        config.alpha = v;
    }
    if let Some(v) = a.ratio.or(file.ratio) {
        config.ratio = v;
    }
    if let Some(v) = a.mask.as_deref().or(file.mask.as_deref()) {
        config.cluster.mask = parse::<ComponentMask>(v)?;
    }
    if let Some(v) = a.init.as_deref().or(file.init.as_deref()) {
        config.cluster.init = parse::<InitStrategy>(v)?;
    }
    if let Some(v) = a
        .weighting
        .map(|w| matches!(w, Switch::On))
        .or(file.weighting)
    {
        config.cluster.use_weights = v;
    }
    if let Some(v) = a.baseline.as_deref().or(file.baseline.as_deref()) {
        config.baseline = parse::<Baseline>(v)?;
    }
    if let Some(v) = a.seed_pool.as_deref().or(file.seed_pool.as_deref()) {
        config.cluster.seed_pool = parse::<SeedPool>(v)?;
    }
    if let Some(v) = a.max_iters.or(file.max_iters) {
        config.cluster.max_iters = v;
    }
    if let Some(v) = a.tol.or(file.tol) {
        config.cluster.tol = v;
    }
    let seed = a.seed.or(file.seed).unwrap_or(0);
    config.seed = seed;
    config.cluster.seed = seed;
    Ok(config)
}

fn cmd_compress(a: &CompressArgs) -> Result<()> {
    let config = pipeline_config(a)?;
    let model = load_model(&a.model)?;
    let stats_text = std::fs::read_to_string(&a.stats).map_err(|e| DernError::io(&a.stats, e))?;
    let stats: StatsFile = serde_json::from_str(&stats_text)?;
    let scores = stats.scores();
    if scores.iter().flatten().any(|s| !s.is_finite()) {
        return Err(DernError::Numerical(
            "importance scores contain NaN or Inf".into(),
        ));
    }
    let out = compress(&model, &scores, &config)?;
    save_model(&out.model, &a.out)?;

    if let Some(path) = &a.dump_assignments {
        write_assignments_csv(create(path)?, &out.layers)?;
    }
    if let Some(path) = &a.dump_clusters {
        write_clusters_csv(create(path)?, &out.layers)?;
    }
    if let Some(path) = &a.report {
        let probes = probe_set(model_dim(&model)?, a.probes, config.seed)?;
        let mut eval = evaluate(&model, &out.model, &probes)?;
        for (l, o) in eval.layers.iter_mut().zip(&out.layers) {
            l.retained_ratio = o.retained_ratio;
        }
        let report = CompressReport {
            baseline: config.baseline.to_string(),
            alpha: config.alpha,
            ratio: config.ratio,
            mask: config.cluster.mask.to_string(),
            init: config.cluster.init.to_string(),
            weighting: config.cluster.use_weights,
            seed_pool: config.cluster.seed_pool.to_string(),
            seed: config.seed,
            retain: config.retain_counts(model.layers.len())?,
            layers: out
                .layers
                .iter()
                .zip(&scores)
                .map(|(o, s)| LayerSummary {
                    retained: o.retained.clone(),
                    pruned: o.pruned.clone(),
                    scores: s.clone(),
                    retained_ratio: o.retained_ratio,
                    assigned_segments: o.assignments.iter().filter(|x| x.target.is_some()).count(),
                    merged_into: o.merged_into.clone(),
                })
                .collect(),
            eval,
        };
        write_json(path, &report)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let original = load_model(&a.original)?;
    let compressed = load_model(&a.compressed)?;
    let d = model_dim(&original)?;
    if compressed.dim() != Some(d) {
        return Err(DernError::ShapeMismatch(
            "models differ in hidden dimension".into(),
        ));
    }
    let probes = probe_set(d, a.probes, a.seed)?;
    write_json(&a.out, &evaluate(&original, &compressed, &probes)?)
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let report = similarity_report(&model, a.layer)?;
    write_expert_sim_csv(create(&a.out_expert)?, &report)?;
    write_neuron_sim_csv(create(&a.out_neuron)?, &report)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Compress(a) => cmd_compress(&a),
        Command::Eval(a) => cmd_eval(a),
        Command::AnalyzeSim(a) => cmd_analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
