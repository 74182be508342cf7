//! Command-line front end: `synth`, `train`, `evaluate`, `predict`, `interpret`.

use std::path::{Path, PathBuf};

use chrono::{NaiveTime, Timelike};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{PreparedData, RunConfig, SplitName};
use crate::dataset::{
    format_timestamp, generate_synthetic, make_windows, synthetic_epoch, synthetic_node_ids,
    zscore_apply, FeatureTensor, PlantedLink, SpeedTable, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::graph::load_adjacency;
use crate::interpret::{
    compare_periods, join_coordinates, layer_report, load_coordinates, matrix_to_csv,
    scale_unit_interval, top_influencers, AttentionKind, InfluenceQuery, LayerReport,
    LayerSelector, Ranking,
};
use crate::metrics::{format_table, horizon_report, HorizonLabels, HorizonMode, MetricReport};
use crate::model::{
    build_variant, read_checkpoint, save_parameters, AttentionRecord, Checkpoint, Pipeline, Variant,
};
use crate::tensor::Matrix;
use crate::training::train;

#[derive(Debug, Parser)]
#[command(
    name = "traffic-transformer",
    version,
    about = "Graph-masked transformer for traffic speed forecasting"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic speeds table, path-graph adjacency and metadata.
    Synth(SynthArgs),
    /// Train one model variant from a run config.
    Train(TrainArgs),
    /// Score checkpoints on a data split.
    Evaluate(EvaluateArgs),
    /// Forecast from a single input window.
    Predict(PredictArgs),
    /// Export attention heatmaps and influence reports for chosen periods.
    Interpret(InterpretArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub nodes: usize,
    #[arg(long, default_value_t = 512)]
    pub steps: usize,
    /// `driver:follower:lag`, repeatable.
    #[arg(long = "planted")]
    pub planted: Vec<PlantedLink>,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `model.variant`.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.max_epochs`.
    #[arg(long = "max-epochs")]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Repeat to compare several models in one table.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    /// Average every step up to each labeled horizon instead of the single step.
    #[arg(long)]
    pub through: bool,
    /// Defaults to the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `m` rows of speeds in physical units, same layout as the training table.
    #[arg(long)]
    pub window: PathBuf,
    /// Needed by variants with a decoder.
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InterpretArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `HH:MM` (matched against the last input step of a test window) or a
    /// test window index. Repeatable.
    #[arg(long = "period")]
    pub periods: Vec<String>,
    /// Target nodes for influencer lists; every node when omitted.
    #[arg(long = "target")]
    pub targets: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// `src|tgt|mem` with an optional `-<layer>` or `-last`.
    #[arg(long, default_value = "mem-last")]
    pub layer: LayerSelector,
    /// `column` or `row-plus-column`.
    #[arg(long, default_value = "column")]
    pub ranking: Ranking,
    /// `id,lon,lat` table joined onto the importance of the selected layer.
    #[arg(long)]
    pub coordinates: Option<PathBuf>,
    /// Also export each head's matrix.
    #[arg(long = "per-head")]
    pub per_head: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Evaluate(a) => {
            let table = cmd_evaluate(&a)?;
            print!("{table}");
            Ok(())
        }
        Command::Predict(a) => cmd_predict(&a),
        Command::Interpret(a) => cmd_interpret(&a).map(|_| ()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn to_json(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable report")
}

#[derive(Debug, Serialize)]
struct SynthMetadata<'a> {
    spec: &'a SyntheticSpec,
    node_ids: Vec<String>,
    timestep_minutes: f64,
    start: String,
    speeds: &'static str,
    adjacency: &'static str,
}

pub const SPEEDS_FILE: &str = "speeds.csv";
pub const ADJACENCY_FILE: &str = "adjacency.csv";
pub const METADATA_FILE: &str = "metadata.json";

/// Writes `speeds.csv`, `adjacency.csv` and `metadata.json` into the output directory.
pub fn cmd_synth(args: &SynthArgs) -> Result<[PathBuf; 3]> {
    let spec = SyntheticSpec {
        nodes: args.nodes,
        steps: args.steps,
        planted: args.planted.clone(),
        noise_std: args.noise,
        seed: args.seed,
    };
    let (tensor, graph) = generate_synthetic(&spec)?;
    create_dir(&args.out_dir)?;
    let table = SpeedTable {
        node_ids: Some(synthetic_node_ids(spec.nodes)),
        timestamps: tensor.timestamps.clone(),
        speeds: tensor.speeds(),
    };
    let paths = [
        args.out_dir.join(SPEEDS_FILE),
        args.out_dir.join(ADJACENCY_FILE),
        args.out_dir.join(METADATA_FILE),
    ];
    write(&paths[0], table.to_csv())?;
    write(&paths[1], graph.to_csv())?;
    let meta = SynthMetadata {
        spec: &spec,
        node_ids: synthetic_node_ids(spec.nodes),
        timestep_minutes: tensor.timestep_minutes,
        start: format_timestamp(&synthetic_epoch()),
        speeds: SPEEDS_FILE,
        adjacency: ADJACENCY_FILE,
    };
    write(&paths[2], to_json(&meta))?;
    log::info!("wrote synthetic data to {}", args.out_dir.display());
    Ok(paths)
}

/// Files written by one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub timing: PathBuf,
    pub report: PathBuf,
}

/// Trains, then writes `<variant>.ckpt`, `<variant>.train.log` (per-epoch
/// losses, identical for identical seeds), `<variant>.timing.csv` and
/// `<variant>.report.json` into the output directory.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutputs> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(v) = args.variant {
        config.model.variant = v;
    }
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    if let Some(e) = args.max_epochs {
        config.train.max_epochs = e;
    }
    config.validate()?;
    let data = PreparedData::load(&config)?;
    let pipeline = build_variant(&config.model, data.nodes(), data.graph.as_ref())?;
    let train_set = data.windows(SplitName::Train, &config.model)?;
    let validation = data.windows(SplitName::Validation, &config.model)?;
    log::info!(
        "training {} on {} nodes: {} training and {} validation windows",
        config.model.variant,
        data.nodes(),
        train_set.len(),
        validation.len()
    );
    let (params, report) = train(&pipeline, &train_set, &validation, &config.train)?;

    create_dir(&config.output.dir)?;
    let name = config.model.variant.name();
    let outputs = TrainOutputs {
        checkpoint: config.output.dir.join(format!("{name}.ckpt")),
        log: config.output.dir.join(format!("{name}.train.log")),
        timing: config.output.dir.join(format!("{name}.timing.csv")),
        report: config.output.dir.join(format!("{name}.report.json")),
    };
    save_parameters(
        &outputs.checkpoint,
        &config.model,
        data.nodes(),
        &data.stats,
        &params,
    )?;
    write(&outputs.log, report.log())?;
    write(&outputs.timing, report.timing())?;
    write(&outputs.report, to_json(&report))?;
    log::info!(
        "best epoch {} (val MAE {:.6}); checkpoint {}",
        report.best_epoch,
        report.best_val_mae,
        outputs.checkpoint.display()
    );
    Ok(outputs)
}

/// Denormalized forecasts and actuals for every window of `split`.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint<f64>,
    data: &PreparedData,
    split: SplitName,
    labels: &HorizonLabels,
    mode: HorizonMode,
) -> Result<MetricReport> {
    let pipeline = build_variant(&checkpoint.config, checkpoint.nodes, data.graph.as_ref())?;
    if checkpoint.nodes != data.nodes() {
        return Err(Error::Data(format!(
            "checkpoint has {} nodes, data has {}",
            checkpoint.nodes,
            data.nodes()
        )));
    }
    let raw = data.raw(split);
    let inputs = zscore_apply(raw, &checkpoint.stats);
    let config = &checkpoint.config;
    let windows = make_windows(&inputs, config.window, config.horizon)?;
    let actual = make_windows(raw, config.window, config.horizon)?;
    let predicted = forecast_all(&pipeline, checkpoint, windows.iter().map(|w| &w.input))?;
    let actual: Vec<Matrix<f64>> = actual.into_iter().map(|w| w.target).collect();
    horizon_report(&actual, &predicted, labels, mode)
}

fn forecast_all<'a>(
    pipeline: &Pipeline,
    checkpoint: &Checkpoint<f64>,
    inputs: impl Iterator<Item = &'a crate::tensor::Tensor3<f64>>,
) -> Result<Vec<Matrix<f64>>> {
    use rayon::prelude::*;
    let inputs: Vec<_> = inputs.collect();
    inputs
        .par_iter()
        .map(|x| {
            pipeline
                .forecast(&checkpoint.params, x, &checkpoint.stats)
                .map(|f| f.predictions)
        })
        .collect()
}

fn checkpoint_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Writes `<checkpoint-stem>.metrics.json` per checkpoint and
/// `metrics_table.txt`; returns the table.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<String> {
    let config = RunConfig::load(&args.config)?;
    let data = PreparedData::load(&config)?;
    let labels = config.horizon_labels(data.timestep_minutes())?;
    let mode = if args.through {
        HorizonMode::Through
    } else {
        config.eval.mode
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| config.output.dir.clone());
    create_dir(&out)?;
    let mut rows = Vec::with_capacity(args.checkpoints.len());
    for path in &args.checkpoints {
        let checkpoint: Checkpoint<f64> = read_checkpoint(path)?;
        let report = evaluate_checkpoint(&checkpoint, &data, args.split, &labels, mode)?;
        let label = checkpoint_label(path);
        write(&out.join(format!("{label}.metrics.json")), report.to_json())?;
        rows.push((label, report));
    }
    let table = format_table(&rows, &labels);
    write(&out.join("metrics_table.txt"), &table)?;
    Ok(table)
}

/// Loads a window file as the model's normalized input tensor.
pub fn load_window(
    path: &Path,
    checkpoint: &Checkpoint<f64>,
) -> Result<crate::tensor::Tensor3<f64>> {
    let table = SpeedTable::load(path)?;
    let calendar = match checkpoint.config.input_channels {
        1 => false,
        3 => true,
        c => {
            return Err(Error::Config(format!(
                "model expects {c} input channels; windows provide 1 or 3"
            )))
        }
    };
    let tensor: FeatureTensor<f64> = table.to_tensor(calendar)?;
    if tensor.steps() != checkpoint.config.window || tensor.nodes() != checkpoint.nodes {
        return Err(Error::Data(format!(
            "window file is {}x{}, model expects {} steps of {} nodes",
            tensor.steps(),
            tensor.nodes(),
            checkpoint.config.window,
            checkpoint.nodes
        )));
    }
    Ok(zscore_apply(&tensor, &checkpoint.stats).values)
}

pub fn predictions_to_csv(predictions: &Matrix<f64>) -> String {
    matrix_to_csv(predictions)
}

/// Writes the `n × N` forecast in physical units.
pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let checkpoint: Checkpoint<f64> = read_checkpoint(&args.checkpoint)?;
    let graph = args.adjacency.as_deref().map(load_adjacency).transpose()?;
    let pipeline = build_variant(&checkpoint.config, checkpoint.nodes, graph.as_ref())?;
    let window = load_window(&args.window, &checkpoint)?;
    let forecast = pipeline.forecast(&checkpoint.params, &window, &checkpoint.stats)?;
    write(&args.out, predictions_to_csv(&forecast.predictions))
}

/// A period label resolved to a test window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedPeriod {
    pub label: String,
    pub window: usize,
    /// Timestamp of the window's last input step, when known.
    pub timestamp: Option<String>,
}

/// Resolves `HH:MM` against the last input step of each window, or takes a
/// window index directly.
pub fn resolve_period(
    label: &str,
    tensor: &FeatureTensor<f64>,
    window: usize,
    windows: usize,
) -> Result<ResolvedPeriod> {
    let stamp = |k: usize| {
        tensor
            .timestamps
            .as_ref()
            .map(|ts| format_timestamp(&ts[k + window - 1]))
    };
    if let Ok(k) = label.parse::<usize>() {
        if k >= windows {
            return Err(Error::InvalidParameter(format!(
                "window index {k} out of range ({windows} test windows)"
            )));
        }
        return Ok(ResolvedPeriod {
            label: label.to_string(),
            window: k,
            timestamp: stamp(k),
        });
    }
    let time = NaiveTime::parse_from_str(label, "%H:%M").map_err(|_| {
        Error::Config(format!(
            "period {label:?} is neither HH:MM nor a window index"
        ))
    })?;
    let ts = tensor.timestamps.as_ref().ok_or_else(|| {
        Error::Data(format!(
            "period {label:?} needs timestamps; use a window index"
        ))
    })?;
    (0..windows)
        .find(|&k| {
            let t = ts[k + window - 1];
            t.hour() == time.hour() && t.minute() == time.minute()
        })
        .map(|k| ResolvedPeriod {
            label: label.to_string(),
            window: k,
            timestamp: stamp(k),
        })
        .ok_or_else(|| Error::Data(format!("no test window ends at {label}")))
}

#[derive(Debug, Clone, Serialize)]
struct InfluenceList {
    target: usize,
    influencers: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Serialize)]
struct PeriodReport {
    period: ResolvedPeriod,
    layers: Vec<LayerReport>,
    query_layer: String,
    k: usize,
    ranking: Ranking,
    influencers: Vec<InfluenceList>,
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn write_heatmap(path: &Path, matrix: &Matrix<f64>) -> Result<()> {
    let scaled = match scale_unit_interval(matrix) {
        Ok(s) => s,
        Err(Error::DegenerateScale(v)) => {
            log::warn!("{} is constant ({v}); written unscaled", path.display());
            matrix.clone()
        }
        Err(e) => return Err(e),
    };
    write(path, matrix_to_csv(&scaled))
}

/// Summary of an interpret run.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpretOutputs {
    pub dir: PathBuf,
    /// Heatmap files per period, in period order.
    pub heatmaps: Vec<Vec<PathBuf>>,
    pub comparison: Option<PathBuf>,
}

/// `00:00`, `08:00` and `16:00` where the test split has them, else the
/// first and middle window.
pub fn default_periods(tensor: &FeatureTensor<f64>, window: usize, windows: usize) -> Vec<String> {
    let found: Vec<String> = ["00:00", "08:00", "16:00"]
        .into_iter()
        .filter(|l| resolve_period(l, tensor, window, windows).is_ok())
        .map(String::from)
        .collect();
    if found.len() >= 2 {
        found
    } else {
        vec!["0".into(), (windows / 2).to_string()]
    }
}

/// For each period: scaled `src_<l>.csv` / `tgt_<l>.csv` / `mem_<l>.csv`
/// heatmaps and a `report.json` with importance, influential nodes and top-k
/// influencers. With two or more periods, `comparison.json` holds the
/// cross-period Jaccard overlaps.
pub fn cmd_interpret(args: &InterpretArgs) -> Result<InterpretOutputs> {
    let config = RunConfig::load(&args.config)?;
    let data = PreparedData::load(&config)?;
    let checkpoint: Checkpoint<f64> = read_checkpoint(&args.checkpoint)?;
    let pipeline = build_variant(&checkpoint.config, checkpoint.nodes, data.graph.as_ref())?;
    let raw = data.raw(SplitName::Test);
    let inputs = zscore_apply(raw, &checkpoint.stats);
    let windows = make_windows(&inputs, checkpoint.config.window, checkpoint.config.horizon)?;
    let nodes = checkpoint.nodes;
    let targets: Vec<usize> = if args.targets.is_empty() {
        (0..nodes).collect()
    } else {
        args.targets.clone()
    };
    if let Some(&t) = targets.iter().find(|&&t| t >= nodes) {
        return Err(Error::InvalidParameter(format!(
            "target {t} out of range for {nodes} nodes"
        )));
    }
    let labels = if args.periods.is_empty() {
        default_periods(raw, checkpoint.config.window, windows.len())
    } else {
        args.periods.clone()
    };
    let coordinates = args
        .coordinates
        .as_deref()
        .map(load_coordinates)
        .transpose()?;
    let node_ids = data
        .node_ids
        .clone()
        .or_else(|| data.graph.as_ref().map(|g| g.node_ids().to_vec()))
        .unwrap_or_else(|| (0..nodes).map(|i| i.to_string()).collect());

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| config.output.dir.join("interpret"));
    create_dir(&out)?;
    let mut records: Vec<(String, AttentionRecord<f64>)> = Vec::new();
    let mut heatmaps = Vec::new();
    for label in &labels {
        let period = resolve_period(label, raw, checkpoint.config.window, windows.len())?;
        let forecast = pipeline.forward(&checkpoint.params, &windows[period.window].input)?;
        let record = forecast.attention;
        let dir = out.join(sanitize(label));
        create_dir(&dir)?;
        let mut files = Vec::new();
        let mut layers = Vec::new();
        for (kind, layer, matrix) in record.layers() {
            let path = dir.join(format!("{kind}_{layer}.csv"));
            write_heatmap(&path, matrix)?;
            files.push(path);
            let kind = match kind {
                "src" => AttentionKind::Src,
                "tgt" => AttentionKind::Tgt,
                _ => AttentionKind::Mem,
            };
            layers.push(layer_report(kind, layer, matrix)?);
        }
        if args.per_head {
            let ph = &record.per_head;
            for (kind, blocks) in [("src", &ph.src), ("tgt", &ph.tgt), ("mem", &ph.mem)] {
                for (l, heads) in blocks.iter().enumerate() {
                    for (h, m) in heads.iter().enumerate() {
                        write_heatmap(&dir.join(format!("{kind}_{}_head{}.csv", l + 1, h + 1)), m)?;
                    }
                }
            }
        }
        let (layer, matrix) = args.layer.select(&record)?;
        let mut influencers = Vec::with_capacity(targets.len());
        for &target in &targets {
            influencers.push(InfluenceList {
                target,
                influencers: top_influencers(matrix, target, args.k, args.ranking)?,
            });
        }
        if let Some(coords) = &coordinates {
            let report = layer_report(args.layer.kind, layer, matrix)?;
            let points = join_coordinates(&node_ids, coords, &report);
            let mut csv = String::from("node,id,lon,lat,importance,influential\n");
            for p in points {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    p.node, p.id, p.lon, p.lat, p.importance, p.influential
                ));
            }
            write(&dir.join("points.csv"), csv)?;
        }
        let report = PeriodReport {
            period,
            layers,
            query_layer: format!("{}-{layer}", args.layer.kind.name()),
            k: args.k,
            ranking: args.ranking,
            influencers,
        };
        write(&dir.join("report.json"), to_json(&report))?;
        heatmaps.push(files);
        records.push((label.clone(), record));
    }

    let comparison = if records.len() >= 2 {
        let mut all = Vec::with_capacity(targets.len());
        for &target in &targets {
            let query = InfluenceQuery {
                target,
                layer: args.layer,
                k: args.k,
                ranking: args.ranking,
            };
            all.push(compare_periods(&records, &query)?);
        }
        let path = out.join("comparison.json");
        write(&path, to_json(&all))?;
        Some(path)
    } else {
        None
    };
    Ok(InterpretOutputs {
        dir: out,
        heatmaps,
        comparison,
    })
}
