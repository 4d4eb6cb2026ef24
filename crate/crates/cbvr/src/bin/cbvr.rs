//! Command-line front end: every subcommand is a thin wrapper over the
//! library, reads a flat `key = value` config, and writes a run manifest
//! next to its outputs so any run can be replayed byte-for-byte with
//! `cbvr rerun`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use cbvr::descriptors::{mifs_pool, read_descriptor_file, DescriptorSet, MifsConfig};
use cbvr::encode::{bow_encode, fv_encode, post_normalize, vlad_encode, NormScheme, Pyramid};
use cbvr::experiment::{
    degradation_experiment, robustness_experiment, write_degradation_csv,
    write_degradation_timings_csv, write_robustness_csv, DegradationConfig, RobustnessConfig,
};
use cbvr::fusion::{
    baseline_fuse, mhlf_fuse, write_fusion_report, BaselineMethod, MhlfConfig, ScoreMatrix,
};
use cbvr::gmm::gmm_fit;
use cbvr::kernel_map::HomogeneousMapConfig;
use cbvr::kmeans::kmeans_fit;
use cbvr::learn::{
    default_lambda_grid, predict_scores, read_models_jsonl, train_event, write_models_jsonl,
    ClassifierKind, LinearModel, TrainSpec,
};
use cbvr::manifest::{get_parsed, read_kv_file, reject_unknown_keys, RunManifest};
use cbvr::model::{
    read_ranked_tsv, read_scores_tsv, write_ranked_tsv, write_scores_tsv, FeatureMatrix,
    ScoreList, VideoId,
};
use cbvr::quantize::{
    index_read, index_write, pq_dot_scores, pq_encode, pq_train, uq_encode, uq_train_with_mode,
    IndexData, UqEdgeMode,
};
use cbvr::rerank::{spar_rerank_traced, write_rerank_trace, PrfConfig};
use cbvr::scenario::{
    evaluate_lists, run_scenario, write_map_report, Scenario, ScenarioOptions,
};
use cbvr::synth::{read_dataset, synth_generate, write_dataset, SynthConfig, SynthDataset};
use cbvr::{derive_seed, Error, Result};

#[derive(Parser)]
#[command(
    name = "cbvr",
    version,
    about = "Content-based video retrieval over precomputed features: generate a benchmark, \
             train and fuse per-feature models, rerank, search by text, and run the robustness \
             and compression experiments.",
    after_help = "Config files are flat `key = value` text; unknown keys are rejected. Every \
                  run writes <out>/manifest.txt, and `cbvr rerun --manifest <file>` replays it \
                  byte-for-byte (timings.csv is informational and exempt).\n\
                  Exit codes: 0 ok, 2 config error, 3 data error, 4 internal assertion."
)]
struct Cli {
    /// Master seed; all randomized stages derive their own seeds from it.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Flat key = value config file overriding the subcommand's defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = one per core). Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset.
    Gen,
    /// Encode local-descriptor files into a feature matrix.
    Encode,
    /// Build a compressed index over a dataset's features.
    Index,
    /// Train per-feature event models from exemplars.
    Train,
    /// Score the collection with trained models (dense or via an index).
    Score,
    /// Fuse per-feature score files into one ranking per event.
    Fuse,
    /// Rerank rankings by pseudo-relevance feedback with self-paced weights.
    Rerank,
    /// Text-to-concept search producing one ranking per event.
    Search,
    /// Evaluate rankings against the dataset ground truth.
    Eval,
    /// Feature-subset robustness experiment (fusion method comparison).
    ExpRobustness,
    /// Approximation/compression degradation experiment.
    ExpDegradation,
    /// Replay a previous run from its manifest.
    Rerun {
        /// Manifest written by the run to replay.
        #[arg(long)]
        manifest: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Encode => "encode",
            Command::Index => "index",
            Command::Train => "train",
            Command::Score => "score",
            Command::Fuse => "fuse",
            Command::Rerank => "rerank",
            Command::Search => "search",
            Command::Eval => "eval",
            Command::ExpRobustness => "exp-robustness",
            Command::ExpDegradation => "exp-degradation",
            Command::Rerun { .. } => "rerun",
        }
    }
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(i32::from(e.exit_code()));
    }
}

fn run(cli: &Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot configure thread pool: {e}")))?;
    let config = match &cli.config {
        Some(path) => read_kv_file(path)?,
        None => BTreeMap::new(),
    };
    if let Command::Rerun { manifest } = &cli.command {
        if cli.config.is_some() {
            return Err(Error::Config(
                "rerun takes its config from the manifest; drop --config".into(),
            ));
        }
        let m = RunManifest::read(manifest)?;
        log::info!("replaying '{}' (seed {}, manifest {})", m.command, m.seed, m.hash());
        return dispatch(&m.command, m.seed, &m.config, &cli.out);
    }
    dispatch(cli.command.name(), cli.seed, &config, &cli.out)
}

fn dispatch(command: &str, seed: u64, config: &BTreeMap<String, String>, out: &Path) -> Result<()> {
    match command {
        "gen" => cmd_gen(seed, config, out),
        "encode" => cmd_encode(seed, config, out),
        "index" => cmd_index(seed, config, out),
        "train" => cmd_train(seed, config, out),
        "score" => cmd_score(seed, config, out),
        "fuse" => cmd_fuse(seed, config, out),
        "rerank" => cmd_rerank(seed, config, out),
        "search" => cmd_search(seed, config, out),
        "eval" => cmd_eval(seed, config, out),
        "exp-robustness" => cmd_exp_robustness(seed, config, out),
        "exp-degradation" => cmd_exp_degradation(seed, config, out),
        other => Err(Error::Config(format!("manifest names unknown command '{other}'"))),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Builds and writes the manifest from the fully-resolved key set, so a
/// rerun resolves to the same bytes.
fn write_manifest(
    command: &str,
    seed: u64,
    scenario: Option<&str>,
    resolved: &BTreeMap<String, String>,
    inputs: &[(&str, &Path)],
    out: &Path,
) -> Result<()> {
    let mut m = RunManifest::new(command, seed);
    m.scenario = scenario.map(String::from);
    m.config = resolved.clone();
    for (key, path) in inputs {
        m.inputs.insert((*key).to_string(), path.display().to_string());
    }
    m.write(&out.join("manifest.txt"))
}

fn required_path(config: &BTreeMap<String, String>, key: &str) -> Result<PathBuf> {
    config
        .get(key)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("missing required config key '{key}'")))
}

fn parse_list<T: std::str::FromStr>(raw: &str, key: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| Error::Config(format!("bad entry '{s}' in list key '{key}'")))
        })
        .collect()
}

fn lambda_grid_from(config: &BTreeMap<String, String>) -> Result<Vec<f64>> {
    match config.get("lambdas") {
        Some(raw) => parse_list(raw, "lambdas"),
        None => Ok(default_lambda_grid()),
    }
}

fn lambda_grid_string(grid: &[f64]) -> String {
    grid.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

/// `feature/classifier` → `feature__classifier.tsv`.
fn source_file_name(source: &str) -> String {
    format!("{}.tsv", source.replace('/', "__"))
}

fn file_source_name(file_stem: &str) -> String {
    file_stem.replace("__", "/")
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

/// Sorted `*.suffix` entries of a directory.
fn sorted_dir(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let path = entry.path();
        if path.is_file() && path.file_name().is_some_and(|n| n.to_string_lossy().ends_with(suffix))
        {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

fn file_stem_string(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Slices the first `n` exemplars of an event, or reports the shortfall.
fn exemplar_slice<'a>(
    ds: &'a SynthDataset,
    event: &str,
    n: usize,
) -> Result<&'a [VideoId]> {
    let pos = ds
        .train_positives
        .get(event)
        .ok_or_else(|| Error::Data(format!("dataset has no exemplars for event {event}")))?;
    if pos.len() < n {
        return Err(Error::Data(format!(
            "insufficient exemplars: event {event} has {} of {n}",
            pos.len()
        )));
    }
    Ok(&pos[..n])
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn cmd_gen(seed: u64, config: &BTreeMap<String, String>, out: &Path) -> Result<()> {
    let mut map = config.clone();
    map.entry("seed".into()).or_insert_with(|| seed.to_string());
    let sc = SynthConfig::from_map(&map)?;
    let ds = synth_generate(&sc)?;
    let dir = out.join("dataset");
    write_dataset(&dir, &ds)?;
    log::info!(
        "generated {} events × {} collection videos × {} features into {}",
        sc.n_events,
        sc.n_videos,
        sc.n_features,
        dir.display()
    );
    write_manifest("gen", seed, None, &sc.to_map(), &[], out)
}

// ---------------------------------------------------------------------------
// encode
// ---------------------------------------------------------------------------

const ENCODE_KEYS: &[&str] =
    &["input", "method", "k", "pyramid", "norm", "name", "skips", "max_iter"];

fn cmd_encode(seed: u64, config: &BTreeMap<String, String>, out: &Path) -> Result<()> {
    reject_unknown_keys(config, ENCODE_KEYS)?;
    let input = required_path(config, "input")?;
    let method = config.get("method").map_or("bow", String::as_str);
    let k: usize = get_parsed(config, "k", 64)?;
    let pyramid_key = config.get("pyramid").map_or("flat", String::as_str);
    let pyramid = match pyramid_key {
        "flat" => Pyramid::flat(),
        "spatial" => Pyramid::default(),
        other => return Err(Error::Config(format!("unknown pyramid '{other}'"))),
    };
    let norm: NormScheme = config.get("norm").map_or("l1", String::as_str).parse()?;
    let name = config.get("name").map_or(method, String::as_str).to_string();
    let max_iter: usize = get_parsed(config, "max_iter", 25)?;
    let skips: Vec<u32> = match config.get("skips") {
        Some(raw) => parse_list(raw, "skips")?,
        None => vec![0],
    };

    // One descriptor file per (video, skip level): `<id>.s<level>.desc`, or
    // plain `<id>.desc` when only level 0 is requested.
    let files = sorted_dir(&input, ".desc")?;
    if files.is_empty() {
        return Err(Error::Data(format!("no .desc files under {}", input.display())));
    }
    let mut by_video: BTreeMap<VideoId, Vec<DescriptorSet>> = BTreeMap::new();
    for path in &files {
        let set = read_descriptor_file(path)?;
        by_video.entry(set.video_id.clone()).or_default().push(set);
    }
    let mifs = MifsConfig::new(skips.clone())?;
    let pooled: Vec<DescriptorSet> = by_video
        .into_values()
        .map(|sets| {
            if sets.len() == 1 && mifs.skip_levels.len() == 1 {
                Ok(sets.into_iter().next().expect("one set"))
            } else {
                mifs_pool(&sets, &mifs)
            }
        })
        .collect::<Result<_>>()?;

    // Pool all descriptors for codebook estimation.
    let d_loc = pooled[0].d_loc;
    let mut train: Vec<f32> = Vec::new();
    for set in &pooled {
        train.extend_from_slice(&set.descriptors);
    }
    let n_train = train.len() / d_loc;

    let rows: Vec<Vec<f32>> = match method {
        "bow" | "vlad" => {
            let fit = kmeans_fit(&train, n_train, d_loc, k, derive_seed(seed, "codebook", 0), max_iter)?;
            pooled
                .par_iter()
                .map(|set| {
                    let v = if method == "bow" {
                        bow_encode(set, &fit.codebook, &pyramid)?
                    } else {
                        vlad_encode(set, &fit.codebook)?
                    };
                    Ok(post_normalize(&v, norm))
                })
                .collect::<Result<_>>()?
        }
        "fv" => {
            let fit = gmm_fit(&train, n_train, d_loc, k, derive_seed(seed, "codebook", 0), max_iter, None)?;
            pooled
                .par_iter()
                .map(|set| Ok(post_normalize(&fv_encode(set, &fit.model)?, norm)))
                .collect::<Result<_>>()?
        }
        other => return Err(Error::Config(format!("unknown encoding method '{other}'"))),
    };

    let d = rows[0].len();
    let mut values = Vec::with_capacity(rows.len() * d);
    for row in &rows {
        values.extend_from_slice(row);
    }
    let ids: Vec<VideoId> = pooled.iter().map(|s| s.video_id.clone()).collect();
    let matrix = FeatureMatrix::new(name.clone(), ids, values, d)?;
    cbvr::model::write_feature_tsv(&out.join("features").join(format!("{name}.tsv")), &matrix)?;
    log::info!("encoded {} videos into {d}-dim '{name}' vectors", matrix.n());

    let mut resolved = BTreeMap::new();
    resolved.insert("input".into(), input.display().to_string());
    resolved.insert("method".into(), method.to_string());
    resolved.insert("k".into(), k.to_string());
    resolved.insert("pyramid".into(), pyramid_key.to_string());
    resolved.insert("norm".into(), config.get("norm").map_or("l1", String::as_str).to_string());
    resolved.insert("name".into(), name);
    resolved.insert(
        "skips".into(),
        skips.iter().map(u32::to_string).collect::<Vec<_>>().join(","),
    );
    resolved.insert("max_iter".into(), max_iter.to_string());
    write_manifest("encode", seed, None, &resolved, &[("input", &input)], out)
}

// ---------------------------------------------------------------------------
// index
// ---------------------------------------------------------------------------

const INDEX_KEYS: &[&str] = &["dataset", "method", "d_sub", "k", "k_uq", "uq_edges"];

fn cmd_index(seed: u64, config: &BTreeMap<String, String>, out: &Path) -> Result<()> {
    reject_unknown_keys(config, INDEX_KEYS)?;
    let dataset = required_path(config, "dataset")?;
    let method = config.get("method").map_or("pq", String::as_str);
    let d_sub: usize = get_parsed(config, "d_sub", 8)?;
    let k: usize = get_parsed(config, "k", 256)?;
    let k_uq: usize = get_parsed(config, "k_uq", 16)?;
    let uq_edges: UqEdgeMode = get_parsed(config, "uq_edges", UqEdgeMode::Quantile)?;
    let ds = read_dataset(&dataset)?;

    let dir = out.join("index");
    let ratios: Vec<f64> = ds
        .features
        .par_iter()
        .enumerate()
        .map(|(f, feat)| -> Result<f64> {
            let collection = feat.select(&ds.collection)?;
            let data = match method {
                "pq" => {
                    let cb = pq_train(&collection, d_sub, k, derive_seed(seed, "pq", f as u64))?;
                    let codes = pq_encode(&cb, &collection)?;
                    IndexData::Pq { codebook: cb, codes }
                }
                "uq" => {
                    let model = uq_train_with_mode(&collection, k_uq, uq_edges)?;
                    let codes = uq_encode(&model, &collection)?;
                    IndexData::Uq { model, codes }
                }
                other => return Err(Error::Config(format!("unknown index method '{other}'"))),
            };
            let ratio = data.compression_ratio();
            index_write(&dir.join(format!("{}.idx", feat.feature_name)), &data)?;
            Ok(ratio)
        })
        .collect::<Result<_>>()?;
    log::info!(
        "indexed {} features at {:.1}× compression into {}",
        ratios.len(),
        ratios.first().copied().unwrap_or(1.0),
        dir.display()
    );

    let mut resolved = BTreeMap::new();
    resolved.insert("dataset".into(), dataset.display().to_string());
    resolved.insert("method".into(), method.to_string());
    resolved.insert("d_sub".into(), d_sub.to_string());
    resolved.insert("k".into(), k.to_string());
    resolved.insert("k_uq".into(), k_uq.to_string());
    resolved.insert("uq_edges".into(), uq_edges.as_str().to_string());
    write_manifest("index", seed, None, &resolved, &[("dataset", &dataset)], out)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

const TRAIN_KEYS: &[&str] = &["dataset", "scenario", "folds", "lambdas"];

fn cmd_train(seed: u64, config: &BTreeMap<String, String>, out: &Path) -> Result<()> {
    reject_unknown_keys(config, TRAIN_KEYS)?;
    let dataset = required_path(config, "dataset")?;
    let scenario: Scenario = config.get("scenario").map_or("100Ex", String::as_str).parse()?;
    if !scenario.uses_exemplars() {
        return Err(Error::Config(format!(
            "scenario {scenario} has no exemplars to train from"
        )));
    }
    let folds: usize = get_parsed(config, "folds", 5)?;
    let grid = lambda_grid_from(config)?;
    let ds = read_dataset(&dataset)?;
    let classifier = match scenario {
        Scenario::Ex010 => ClassifierKind::Krr,
        _ => ClassifierKind::Both,
    };

    let events = ds.event_ids();
    let summaries: Vec<Vec<String>> = events
        .par_iter()
        .enumerate()
        .map(|(idx, event)| -> Result<Vec<String>> {
            let positives: BTreeSet<VideoId> =
                exemplar_slice(&ds, event, scenario.exemplars())?.iter().cloned().collect();
            let spec = TrainSpec {
                event_id: event.clone(),
                positives,
                negatives: ds.train_negatives.iter().cloned().collect(),
                scenario,
                classifier,
            };
            let training = train_event(
                &ds.features,
                &spec,
                &grid,
                folds,
                derive_seed(seed, "train", idx as u64),
            )?;
            // Models grouped per classifier so sources stay unambiguous.
            let mut by_classifier: BTreeMap<&str, Vec<LinearModel>> = BTreeMap::new();
            let mut lines = Vec::new();
            for scorer in &training.scorers {
                let (_, classifier_name) = scorer.source.rsplit_once('/').ok_or_else(|| {
                    Error::Internal(format!("scorer source '{}' lacks classifier", scorer.source))
                })?;
                by_classifier.entry(classifier_name).or_default().push(scorer.model.clone());
                write_scores_tsv(
                    &out.join("heldout").join(event).join(source_file_name(&scorer.source)),
                    &scorer.held_out,
                )?;
                lines.push(format!(
                    "{event},{},{},{}",
                    scorer.source, scorer.model.lambda, scorer.cv_ap
                ));
            }
            for (classifier_name, models) in &by_classifier {
                write_models_jsonl(
                    &out.join("models").join(format!("{event}.{classifier_name}.jsonl")),
                    models,
                )?;
            }
            Ok(lines)
        })
        .collect::<Result<_>>()?;

    let mut summary = String::from("event,source,lambda,cv_ap\n");
    for lines in &summaries {
        for line in lines {
            summary.push_str(line);
            summary.push('\n');
        }
    }
    cbvr::model::write_atomic(&out.join("train_summary.csv"), summary.as_bytes())?;
    log::info!("trained {} events for {scenario}", events.len());

    let mut resolved = BTreeMap::new();
    resolved.insert("dataset".into(), dataset.display().to_string());
    resolved.insert("scenario".into(), scenario.to_string());
    resolved.insert("folds".into(), folds.to_string());
    resolved.insert("lambdas".into(), lambda_grid_string(&grid));
    write_manifest("train", seed, Some(scenario.as_str()), &resolved, &[("dataset", &dataset)], out)
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

const SCORE_KEYS: &[&str] = &["dataset", "models", "index"];

fn cmd_score(seed: u64, config: &BTreeMap<String, String>, out: &Path) -> Result<()> {
    reject_unknown_keys(config, SCORE_KEYS)?;
    let dataset = required_path(config, "dataset")?;
    let models_dir = required_path(config, "models")?;
    let index_dir = config.get("index").map(PathBuf::from);
    let ds = read_dataset(&dataset)?;

    // Dense collection features, or the compressed index when given.
    let mut dense: BTreeMap<String, FeatureMatrix> = BTreeMap::new();
    let mut compressed: BTreeMap<String, IndexData> = BTreeMap::new();
    if let Some(dir) = &index_dir {
        for path in sorted_dir(dir, ".idx")? {
            compressed.insert(file_stem_string(&path), index_read(&path)?);
        }
        if compressed.is_empty() {
            return Err(Error::Data(format!("no .idx files under {}", dir.display())));
        }
    } else {
        for feat in &ds.features {
            dense.insert(feat.feature_name.clone(), feat.select(&ds.collection)?);
        }
    }
    // Uniform-quantized indexes are decoded once up front.
    let uq_dense: BTreeMap<String, FeatureMatrix> = compressed
        .iter()
        .filter_map(|(name, data)| match data {
            IndexData::Uq { .. } => Some(data.decode().map(|m| (name.clone(), m))),
            IndexData::Pq { .. } => None,
        })
        .collect::<Result<_>>()?;

    let model_files = sorted_dir(&models_dir, ".jsonl")?;
    if model_files.is_empty() {
        return Err(Error::Data(format!("no .jsonl model files under {}", models_dir.display())));
    }
    let mut n_lists = 0usize;
    for path in &model_files {
        // `<event>.<classifier>.jsonl`
        let stem = file_stem_string(path);
        let (_, classifier_name) = stem.rsplit_once('.').ok_or_else(|| {
            Error::Data(format!("{}: expected <event>.<classifier>.jsonl", path.display()))
        })?;
        for model in read_models_jsonl(path)? {
            let source = format!("{}/{classifier_name}", model.feature_name);
            let mut scores = match (dense.get(&model.feature_name), compressed.get(&model.feature_name)) {
                (Some(feat), _) => predict_scores(&model, feat)?,
                (None, Some(IndexData::Pq { codebook, codes })) => pq_dot_scores(
                    &model.w,
                    model.b,
                    codebook,
                    codes,
                    &model.event_id,
                    &source,
                )?,
                (None, Some(IndexData::Uq { .. })) => {
                    predict_scores(&model, &uq_dense[&model.feature_name])?
                }
                (None, None) => {
                    return Err(Error::Data(format!(
                        "no collection data for feature '{}'",
                        model.feature_name
                    )))
                }
            };
            scores.source = source.clone();
            write_scores_tsv(
                &out.join("scores").join(&model.event_id).join(source_file_name(&source)),
                &scores,
            )?;
            n_lists += 1;
        }
    }
    log::info!("wrote {n_lists} score lists");

    let mut resolved = BTreeMap::new();
    resolved.insert("dataset".into(), dataset.display().to_string());
    resolved.insert("models".into(), models_dir.display().to_string());
    let mut inputs: Vec<(&str, &Path)> = vec![("dataset", &dataset), ("models", &models_dir)];
    if let Some(dir) = &index_dir {
        resolved.insert("index".into(), dir.display().to_string());
        inputs.push(("index", dir));
    }
    write_manifest("score", seed, None, &resolved, &inputs, out)
}

// ---------------------------------------------------------------------------
// fuse
// ---------------------------------------------------------------------------

const FUSE_KEYS: &[&str] = &["dataset", "heldout", "scores", "method", "scenario"];

/// Reads every score file of one event directory into a matrix, row order =
/// sorted file order.
fn read_score_matrix(dir: &Path, event: &str) -> Result<ScoreMatrix> {
    let files = sorted_dir(dir, ".tsv")?;
    if files.is_empty() {
        return Err(Error::Data(format!("no score files under {}", dir.display())));
    }
    let lists: Vec<ScoreList> = files
        .iter()
        .map(|path| read_scores_tsv(path, event, &file_source_name(&file_stem_string(path))))
        .collect::<Result<_>>()?;
    ScoreMatrix::from_score_lists(&lists)
}

fn cmd_fuse(seed: u64, config: &BTreeMap<String, String>, out: &Path) -> Result<()> {
    reject_unknown_keys(config, FUSE_KEYS)?;
    let dataset = required_path(config, "dataset")?;
    let heldout = required_path(config, "heldout")?;
    let scores = required_path(config, "scores")?;
    let method = config.get("method").map_or("mhlf", String::as_str);
    let scenario: Scenario = config.get("scenario").map_or("100Ex", String::as_str).parse()?;
    if !scenario.uses_exemplars() {
        return Err(Error::Config(format!("scenario {scenario} has no exemplar positives")));
    }
    let ds = read_dataset(&dataset)?;

    let mut event_dirs = Vec::new();
    for entry in std::fs::read_dir(&heldout).map_err(|e| io_err(&heldout, e))? {
        let entry = entry.map_err(|e| io_err(&heldout, e))?;
        if entry.path().is_dir() {
            event_dirs.push(entry.path());
        }
    }
    event_dirs.sort();
    if event_dirs.is_empty() {
        return Err(Error::Data(format!("no event directories under {}", heldout.display())));
    }

    for dir in &event_dirs {
        let event = file_stem_string(dir);
        let train = read_score_matrix(dir, &event)?;
        let test = read_score_matrix(&scores.join(&event), &event)?;
        let positives: BTreeSet<VideoId> =
            exemplar_slice(&ds, &event, scenario.exemplars())?.iter().cloned().collect();
        let ranked = match method {
            "mhlf" => {
                let outcome = mhlf_fuse(&train, &positives, &test, &MhlfConfig::default(), &event)?;
                write_fusion_report(&out.join("fusion").join(format!("{event}.json")), &outcome.report)?;
                outcome.ranked
            }
            baseline => baseline_fuse(&train, &positives, &test, baseline.parse::<BaselineMethod>()?, &event)?,
        };
        write_ranked_tsv(&out.join("ranked").join(format!("{event}.tsv")), &ranked)?;
    }
    log::info!("fused {} events with {method}", event_dirs.len());

    let mut resolved = BTreeMap::new();
    resolved.insert("dataset".into(), dataset.display().to_string());
    resolved.insert("heldout".into(), heldout.display().to_string());
    resolved.insert("scores".into(), scores.display().to_string());
    resolved.insert("method".into(), method.to_string());
    resolved.insert("scenario".into(), scenario.to_string());
    write_manifest(
        "fuse",
        seed,
        Some(scenario.as_str()),
        &resolved,
        &[("dataset", &dataset), ("heldout", &heldout), ("scores", &scores)],
        out,
    )
}

// ---------------------------------------------------------------------------
// rerank
// ---------------------------------------------------------------------------

const RERANK_KEYS: &[&str] =
    &["dataset", "ranked", "k_pos", "k_neg", "iterations", "scheme", "blend"];

fn cmd_rerank(seed: u64, config: &BTreeMap<String, String>, out: &Path) -> Result<()> {
    reject_unknown_keys(config, RERANK_KEYS)?;
    let dataset = required_path(config, "dataset")?;
    let ranked_dir = required_path(config, "ranked")?;
    let mut prf = PrfConfig::default();
    prf.k_pos = get_parsed(config, "k_pos", prf.k_pos)?;
    prf.k_neg = get_parsed(config, "k_neg", prf.k_neg)?;
    prf.iterations = get_parsed(config, "iterations", prf.iterations)?;
    if let Some(raw) = config.get("scheme") {
        prf.scheme = raw.parse()?;
    }
    if let Some(raw) = config.get("blend") {
        prf.blend = raw.parse()?;
    }
    let ds = read_dataset(&dataset)?;
    let features: Vec<FeatureMatrix> =
        ds.features.iter().map(|f| f.select(&ds.collection)).collect::<Result<_>>()?;

    let files = sorted_dir(&ranked_dir, ".tsv")?;
    if files.is_empty() {
        return Err(Error::Data(format!("no ranked lists under {}", ranked_dir.display())));
    }
    files
        .par_iter()
        .enumerate()
        .map(|(idx, path)| -> Result<()> {
            let event = file_stem_string(path);
            let initial = read_ranked_tsv(path, &event)?;
            let (reranked, trace) = spar_rerank_traced(
                &initial,
                &features,
                &prf,
                derive_seed(seed, "prf", idx as u64),
                None,
            )?;
            write_ranked_tsv(&out.join("reranked").join(format!("{event}.tsv")), &reranked)?;
            write_rerank_trace(&out.join("trace").join(format!("{event}.jsonl")), &trace)
        })
        .collect::<Result<Vec<()>>>()?;
    log::info!("reranked {} lists", files.len());

    let mut resolved = BTreeMap::new();
    resolved.insert("dataset".into(), dataset.display().to_string());
    resolved.insert("ranked".into(), ranked_dir.display().to_string());
    resolved.insert("k_pos".into(), prf.k_pos.to_string());
    resolved.insert("k_neg".into(), prf.k_neg.to_string());
    resolved.insert("iterations".into(), prf.iterations.to_string());
    resolved.insert("scheme".into(), prf.scheme.as_str().to_string());
    resolved.insert("blend".into(), prf.blend.as_str().to_string());
    write_manifest(
        "rerank",
        seed,
        None,
        &resolved,
        &[("dataset", &dataset), ("ranked", &ranked_dir)],
        out,
    )
}

// ---------------------------------------------------------------------------
// search
// ---------------------------------------------------------------------------

const SEARCH_KEYS: &[&str] = &["dataset", "model", "tau"];

fn cmd_search(seed: u64, config: &BTreeMap<String, String>, out: &Path) -> Result<()> {
    reject_unknown_keys(config, SEARCH_KEYS)?;
    let dataset = required_path(config, "dataset")?;
    let model_key = config.get("model").map_or("bm25", String::as_str);
    let tau: f64 = get_parsed(config, "tau", 0.3)?;
    let ds = read_dataset(&dataset)?;
    let options = ScenarioOptions {
        retrieval_model: model_key.parse()?,
        tau,
        ..ScenarioOptions::default()
    };
    let run = run_scenario(&ds, Scenario::Sq, &options, seed)?;
    for (event, list) in &run.lists {
        write_ranked_tsv(&out.join("ranked").join(format!("{event}.tsv")), list)?;
    }
    log::info!("searched {} events with {model_key} at τ = {tau}", run.lists.len());

    let mut resolved = BTreeMap::new();
    resolved.insert("dataset".into(), dataset.display().to_string());
    resolved.insert("model".into(), model_key.to_string());
    resolved.insert("tau".into(), tau.to_string());
    write_manifest("search", seed, Some("SQ"), &resolved, &[("dataset", &dataset)], out)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

const EVAL_KEYS: &[&str] = &["dataset", "ranked"];

fn cmd_eval(seed: u64, config: &BTreeMap<String, String>, out: &Path) -> Result<()> {
    reject_unknown_keys(config, EVAL_KEYS)?;
    let dataset = required_path(config, "dataset")?;
    let ranked_dir = required_path(config, "ranked")?;
    let ds = read_dataset(&dataset)?;
    let files = sorted_dir(&ranked_dir, ".tsv")?;
    if files.is_empty() {
        return Err(Error::Data(format!("no ranked lists under {}", ranked_dir.display())));
    }
    let mut lists = BTreeMap::new();
    for path in &files {
        let event = file_stem_string(path);
        lists.insert(event.clone(), read_ranked_tsv(path, &event)?);
    }
    let report = evaluate_lists(&lists, &ds.ground_truth)?;

    let mut resolved = BTreeMap::new();
    resolved.insert("dataset".into(), dataset.display().to_string());
    resolved.insert("ranked".into(), ranked_dir.display().to_string());
    let mut m = RunManifest::new("eval", seed);
    m.config = resolved;
    m.inputs.insert("dataset".into(), dataset.display().to_string());
    m.inputs.insert("ranked".into(), ranked_dir.display().to_string());
    write_map_report(&out.join("map_report.json"), &report, &m.hash())?;
    m.write(&out.join("manifest.txt"))?;
    log::info!("MAP over {} events: {:.4}", report.per_event_ap.len(), report.map);
    println!("map\t{}", report.map);
    Ok(())
}

// ---------------------------------------------------------------------------
// experiments
// ---------------------------------------------------------------------------

const ROBUSTNESS_KEYS: &[&str] = &["dataset", "fractions", "trials", "folds", "lambdas"];

fn cmd_exp_robustness(seed: u64, config: &BTreeMap<String, String>, out: &Path) -> Result<()> {
    reject_unknown_keys(config, ROBUSTNESS_KEYS)?;
    let dataset = required_path(config, "dataset")?;
    let mut rc = RobustnessConfig::default();
    if let Some(raw) = config.get("fractions") {
        rc.fractions = parse_list(raw, "fractions")?;
    }
    rc.trials = get_parsed(config, "trials", rc.trials)?;
    let mut options = ScenarioOptions::default();
    options.folds = get_parsed(config, "folds", options.folds)?;
    options.lambda_grid = lambda_grid_from(config)?;
    let ds = read_dataset(&dataset)?;
    let result = robustness_experiment(&ds, &rc, &options, seed)?;
    write_robustness_csv(&out.join("robustness.csv"), &result)?;
    log::info!("robustness table: {} rows", result.rows.len());

    let mut resolved = BTreeMap::new();
    resolved.insert("dataset".into(), dataset.display().to_string());
    resolved.insert(
        "fractions".into(),
        rc.fractions.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
    );
    resolved.insert("trials".into(), rc.trials.to_string());
    resolved.insert("folds".into(), options.folds.to_string());
    resolved.insert("lambdas".into(), lambda_grid_string(&options.lambda_grid));
    write_manifest("exp-robustness", seed, None, &resolved, &[("dataset", &dataset)], out)
}

const DEGRADATION_KEYS: &[&str] = &[
    "dataset", "d_sub", "k_pq", "k_uq", "sweep", "sweep_d_sub", "sweep_k_uq", "efm_n", "efm_l",
    "folds", "lambdas",
];

fn cmd_exp_degradation(seed: u64, config: &BTreeMap<String, String>, out: &Path) -> Result<()> {
    reject_unknown_keys(config, DEGRADATION_KEYS)?;
    let dataset = required_path(config, "dataset")?;
    let mut dc = DegradationConfig::default();
    dc.d_sub = get_parsed(config, "d_sub", dc.d_sub)?;
    dc.k_pq = get_parsed(config, "k_pq", dc.k_pq)?;
    dc.k_uq = get_parsed(config, "k_uq", dc.k_uq)?;
    dc.run_sweep = get_parsed(config, "sweep", dc.run_sweep)?;
    if let Some(raw) = config.get("sweep_d_sub") {
        dc.sweep_d_sub = parse_list(raw, "sweep_d_sub")?;
    }
    if let Some(raw) = config.get("sweep_k_uq") {
        dc.sweep_k_uq = parse_list(raw, "sweep_k_uq")?;
    }
    dc.efm = HomogeneousMapConfig {
        n: get_parsed(config, "efm_n", 1usize)?,
        l: get_parsed(config, "efm_l", 0.5f64)?,
        ..HomogeneousMapConfig::default()
    };
    let mut options = ScenarioOptions::default();
    options.folds = get_parsed(config, "folds", options.folds)?;
    options.lambda_grid = lambda_grid_from(config)?;
    let ds = read_dataset(&dataset)?;
    let result = degradation_experiment(&ds, &dc, &options, seed)?;
    write_degradation_csv(&out.join("degradation.csv"), &result)?;
    write_degradation_timings_csv(&out.join("timings.csv"), &result)?;
    log::info!("degradation table: {} variants, exact MAP {:.4}", result.rows.len(), result.exact_map);

    let mut resolved = BTreeMap::new();
    resolved.insert("dataset".into(), dataset.display().to_string());
    resolved.insert("d_sub".into(), dc.d_sub.to_string());
    resolved.insert("k_pq".into(), dc.k_pq.to_string());
    resolved.insert("k_uq".into(), dc.k_uq.to_string());
    resolved.insert("sweep".into(), dc.run_sweep.to_string());
    resolved.insert(
        "sweep_d_sub".into(),
        dc.sweep_d_sub.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
    );
    resolved.insert(
        "sweep_k_uq".into(),
        dc.sweep_k_uq.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
    );
    resolved.insert("efm_n".into(), dc.efm.n.to_string());
    resolved.insert("efm_l".into(), dc.efm.l.to_string());
    resolved.insert("folds".into(), options.folds.to_string());
    resolved.insert("lambdas".into(), lambda_grid_string(&options.lambda_grid));
    write_manifest("exp-degradation", seed, None, &resolved, &[("dataset", &dataset)], out)
}
