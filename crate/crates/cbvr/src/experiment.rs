//! Feature-robustness and compression-degradation experiments.
//!
//! Both experiments reuse the exemplar-training pipeline: per-feature models
//! are trained once on uncompressed data, and the collection is then
//! re-scored or re-fused under each experimental condition, which keeps a
//! full sweep at desk scale.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rayon::prelude::*;

use crate::fusion::{baseline_fuse, mhlf_fuse, BaselineMethod, ScoreMatrix};
use crate::kernel_map::{efm_map_matrix, HomogeneousMapConfig};
use crate::learn::{predict_scores, train_event, ClassifierKind, TrainSpec, TrainedScorer};
use crate::model::{average_precision, write_atomic, FeatureMatrix, ScoreList, VideoId};
use crate::quantize::{
    pq_dot_scores, pq_encode, pq_train, uq_decode, uq_encode, uq_train_with_mode, PqCodebook,
    PqCodes, UqEdgeMode,
};
use crate::scenario::{Scenario, ScenarioOptions};
use crate::synth::SynthDataset;
use crate::{derive_seed, Error, Result};

// ---------------------------------------------------------------------------
// Shared training bank
// ---------------------------------------------------------------------------

/// Models and held-out training scores for one event.
struct EventModels {
    event: String,
    /// Exemplar ids; fusion weights are learned against these.
    exemplars: BTreeSet<VideoId>,
    scorers: Vec<TrainedScorer>,
    /// Held-out training scores, rows aligned with `scorers`.
    train: ScoreMatrix,
}

/// Trains per-feature models for every event over the given feature set,
/// using the exemplar budget of `scenario`.
fn train_all_events(
    ds: &SynthDataset,
    features: &[FeatureMatrix],
    scenario: Scenario,
    classifier: ClassifierKind,
    options: &ScenarioOptions,
    seed: u64,
) -> Result<Vec<EventModels>> {
    let need = scenario.exemplars();
    ds.event_ids()
        .par_iter()
        .enumerate()
        .map(|(idx, event)| -> Result<EventModels> {
            let pos_all = ds.train_positives.get(event).ok_or_else(|| {
                Error::Data(format!("dataset has no exemplars for event {event}"))
            })?;
            if pos_all.len() < need {
                return Err(Error::Data(format!(
                    "insufficient exemplars: event {event} has {} of {need}",
                    pos_all.len()
                )));
            }
            let exemplars: BTreeSet<VideoId> = pos_all[..need].iter().cloned().collect();
            let spec = TrainSpec {
                event_id: event.clone(),
                positives: exemplars.clone(),
                negatives: ds.train_negatives.iter().cloned().collect(),
                scenario,
                classifier,
            };
            let training = train_event(
                features,
                &spec,
                &options.lambda_grid,
                options.folds,
                derive_seed(seed, "train", idx as u64),
            )?;
            let held: Vec<ScoreList> =
                training.scorers.iter().map(|s| s.held_out.clone()).collect();
            let train = ScoreMatrix::from_score_lists(&held)?;
            Ok(EventModels { event: event.clone(), exemplars, scorers: training.scorers, train })
        })
        .collect()
}

/// Scores the collection with every model of an event; rows align with the
/// event's scorers so train/test matrices match.
fn collection_matrix(
    bank: &EventModels,
    collection: &[FeatureMatrix],
) -> Result<ScoreMatrix> {
    let mut lists = Vec::with_capacity(bank.scorers.len());
    for scorer in &bank.scorers {
        let feature = collection
            .iter()
            .find(|f| f.feature_name == scorer.model.feature_name)
            .ok_or_else(|| {
                Error::Internal(format!(
                    "trained on unknown feature '{}'",
                    scorer.model.feature_name
                ))
            })?;
        let mut scores = predict_scores(&scorer.model, feature)?;
        scores.source = scorer.source.clone();
        lists.push(scores);
    }
    ScoreMatrix::from_score_lists(&lists)
}

fn subset_rows(m: &ScoreMatrix, rows: &[usize]) -> Result<ScoreMatrix> {
    let names = rows.iter().map(|&r| m.row_names[r].clone()).collect();
    let mut values = Vec::with_capacity(rows.len() * m.n_cols());
    for &r in rows {
        values.extend_from_slice(m.row(r));
    }
    ScoreMatrix::new(names, m.video_ids.clone(), values)
}

fn eval_positives<'a>(
    ds: &'a SynthDataset,
    banks: &[EventModels],
) -> Result<Vec<&'a BTreeSet<VideoId>>> {
    banks
        .iter()
        .map(|bank| {
            ds.ground_truth.positives(&bank.event).ok_or_else(|| {
                Error::Data(format!("ground truth lists no positives for event {}", bank.event))
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Robustness to dropped features
// ---------------------------------------------------------------------------

/// Fusion methods compared by the robustness experiment, in output order.
pub const ROBUSTNESS_METHODS: [&str; 3] = ["mhlf", "average", "linreg"];

#[derive(Clone, Debug)]
pub struct RobustnessConfig {
    /// Fractions of the feature set to keep, each in (0, 1].
    pub fractions: Vec<f64>,
    /// Random subsets drawn per fraction.
    pub trials: usize,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            fractions: vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3],
            trials: 60,
        }
    }
}

impl RobustnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("robustness trials must be positive".into()));
        }
        if self.fractions.is_empty() {
            return Err(Error::Config("no subset fractions given".into()));
        }
        for &f in &self.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("subset fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// One (fraction, fusion method) aggregate.
#[derive(Clone, Debug)]
pub struct RobustnessRow {
    pub fraction: f64,
    /// Features kept per trial at this fraction.
    pub n_features: usize,
    pub method: String,
    pub trials: usize,
    pub mean_map: f64,
    /// Normal-approximation 95% interval bounds around the mean.
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Per-trial MAPs behind the aggregate (not serialized).
    pub trial_maps: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RobustnessResult {
    pub rows: Vec<RobustnessRow>,
}

fn mean_ci95(xs: &[f64]) -> (f64, f64, f64) {
    // Identical trials carry no sampling variance; report the value itself
    // so the interval is exactly zero-width.
    if xs.windows(2).all(|w| w[0] == w[1]) {
        return (xs[0], xs[0], xs[0]);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = 1.96 * var.sqrt() / n.sqrt();
    (mean, mean - half, mean + half)
}

/// Measures how gracefully each fusion method degrades as features are
/// dropped: for every fraction, `trials` seeded subsets of
/// `⌈fraction · n_features⌉` features are re-fused three ways and the mean
/// MAP with a 95% confidence interval is reported. Fractions keeping fewer
/// than two features are skipped with a warning.
pub fn robustness_experiment(
    ds: &SynthDataset,
    config: &RobustnessConfig,
    options: &ScenarioOptions,
    seed: u64,
) -> Result<RobustnessResult> {
    config.validate()?;
    let n_features = ds.features.len();
    if n_features < 2 {
        return Err(Error::Data(format!(
            "robustness experiment needs at least 2 features, got {n_features}"
        )));
    }
    // One ridge scorer per feature, so matrix rows correspond 1:1 to
    // features. Ten exemplars: scarce supervision is where the fusion
    // methods genuinely part ways, and the regime event search cares about.
    let banks =
        train_all_events(ds, &ds.features, Scenario::Ex010, ClassifierKind::Krr, options, seed)?;
    let collection: Vec<FeatureMatrix> =
        ds.features.iter().map(|f| f.select(&ds.collection)).collect::<Result<_>>()?;
    let tests: Vec<ScoreMatrix> =
        banks.par_iter().map(|bank| collection_matrix(bank, &collection)).collect::<Result<_>>()?;
    let positives = eval_positives(ds, &banks)?;

    let mut rows = Vec::new();
    for (fi, &fraction) in config.fractions.iter().enumerate() {
        let n_sub = ((fraction * n_features as f64).ceil() as usize).min(n_features);
        if n_sub < 2 {
            log::warn!(
                "skipping fraction {fraction}: {n_sub} of {n_features} features is too few to fuse"
            );
            continue;
        }
        let per_trial: Vec<[f64; 3]> = (0..config.trials)
            .into_par_iter()
            .map(|t| -> Result<[f64; 3]> {
                let trial_seed = derive_seed(seed, "subset", ((fi as u64) << 32) | t as u64);
                let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(trial_seed);
                let mut kept = rand::seq::index::sample(&mut rng, n_features, n_sub).into_vec();
                kept.sort_unstable();
                let mut sums = [0.0f64; 3];
                for (b, bank) in banks.iter().enumerate() {
                    let train = subset_rows(&bank.train, &kept)?;
                    let test = subset_rows(&tests[b], &kept)?;
                    let fused = [
                        mhlf_fuse(&train, &bank.exemplars, &test, &options.mhlf, &bank.event)?
                            .ranked,
                        baseline_fuse(
                            &train,
                            &bank.exemplars,
                            &test,
                            BaselineMethod::Average,
                            &bank.event,
                        )?,
                        baseline_fuse(
                            &train,
                            &bank.exemplars,
                            &test,
                            BaselineMethod::Linreg,
                            &bank.event,
                        )?,
                    ];
                    for (s, list) in sums.iter_mut().zip(&fused) {
                        *s += average_precision(list, positives[b])?;
                    }
                }
                Ok(sums.map(|s| s / banks.len() as f64))
            })
            .collect::<Result<_>>()?;
        for (mi, method) in ROBUSTNESS_METHODS.iter().enumerate() {
            let maps: Vec<f64> = per_trial.iter().map(|m| m[mi]).collect();
            let (mean_map, ci_lo, ci_hi) = mean_ci95(&maps);
            rows.push(RobustnessRow {
                fraction,
                n_features: n_sub,
                method: method.to_string(),
                trials: config.trials,
                mean_map,
                ci_lo,
                ci_hi,
                trial_maps: maps,
            });
        }
    }
    Ok(RobustnessResult { rows })
}

/// Writes the robustness table as CSV with a header row.
pub fn write_robustness_csv(path: &Path, result: &RobustnessResult) -> Result<()> {
    let mut out = String::from("fraction,n_features,method,trials,mean_map,ci_lo,ci_hi\n");
    for r in &result.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.fraction, r.n_features, r.method, r.trials, r.mean_map, r.ci_lo, r.ci_hi
        ));
    }
    write_atomic(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// Degradation under approximation and compression
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DegradationConfig {
    /// Subvector width of the headline product-quantized variants.
    pub d_sub: usize,
    /// Codebook size per subquantizer.
    pub k_pq: usize,
    /// Levels of the headline uniform-quantized variant.
    pub k_uq: usize,
    pub efm: HomogeneousMapConfig,
    /// Extra subvector widths for the compression-ratio sweep (may repeat
    /// the headline width; duplicates share one codebook).
    pub sweep_d_sub: Vec<usize>,
    /// Extra level counts for the uniform-quantization sweep.
    pub sweep_k_uq: Vec<usize>,
    pub run_sweep: bool,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            d_sub: 8,
            k_pq: 256,
            k_uq: 2,
            efm: HomogeneousMapConfig::default(),
            sweep_d_sub: vec![2, 4, 8, 16],
            sweep_k_uq: vec![2, 4, 16, 256],
            run_sweep: true,
        }
    }
}

/// One pipeline variant's outcome.
#[derive(Clone, Debug)]
pub struct DegradationRow {
    pub variant: String,
    /// Bytes saved over raw 32-bit storage (1 = uncompressed).
    pub compression_ratio: f64,
    pub map: f64,
    /// Relative MAP change versus the exact pipeline.
    pub rel_delta: f64,
    /// Wall-clock seconds spent scoring the collection across all events.
    pub scoring_wall_s: f64,
}

#[derive(Clone, Debug)]
pub struct DegradationResult {
    pub exact_map: f64,
    pub rows: Vec<DegradationRow>,
}

impl DegradationResult {
    pub fn row(&self, variant: &str) -> Option<&DegradationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// A prepared compressed copy of the collection for one feature.
enum Compressed {
    Pq { cb: PqCodebook, codes: PqCodes },
    /// Uniform quantization is decoded ahead of scoring; the decode cost is
    /// part of index loading, not of per-event scoring.
    UqDense(FeatureMatrix),
}

fn fuse_variant(
    banks: &[EventModels],
    tests: &[ScoreMatrix],
    positives: &[&BTreeSet<VideoId>],
    mhlf: &crate::fusion::MhlfConfig,
) -> Result<f64> {
    let aps: Vec<f64> = banks
        .par_iter()
        .enumerate()
        .map(|(b, bank)| -> Result<f64> {
            let fused =
                mhlf_fuse(&bank.train, &bank.exemplars, &tests[b], mhlf, &bank.event)?.ranked;
            average_precision(&fused, positives[b])
        })
        .collect::<Result<_>>()?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Scores all events against a compressed collection, timing only the
/// scoring loop (lookup tables or dense dot products), then fuses and
/// evaluates. Returns (MAP, scoring seconds).
fn run_compressed(
    banks: &[EventModels],
    compressed: &[(String, Compressed)],
    positives: &[&BTreeSet<VideoId>],
    mhlf: &crate::fusion::MhlfConfig,
) -> Result<(f64, f64)> {
    let start = Instant::now();
    let mut tests = Vec::with_capacity(banks.len());
    for bank in banks {
        let mut lists = Vec::with_capacity(bank.scorers.len());
        for scorer in &bank.scorers {
            let (_, data) = compressed
                .iter()
                .find(|(name, _)| *name == scorer.model.feature_name)
                .ok_or_else(|| {
                    Error::Internal(format!(
                        "no compressed collection for feature '{}'",
                        scorer.model.feature_name
                    ))
                })?;
            let mut scores = match data {
                Compressed::Pq { cb, codes } => pq_dot_scores(
                    &scorer.model.w,
                    scorer.model.b,
                    cb,
                    codes,
                    &bank.event,
                    &scorer.source,
                )?,
                Compressed::UqDense(dense) => predict_scores(&scorer.model, dense)?,
            };
            scores.source = scorer.source.clone();
            lists.push(scores);
        }
        tests.push(ScoreMatrix::from_score_lists(&lists)?);
    }
    let scoring_wall_s = start.elapsed().as_secs_f64();
    let map = fuse_variant(banks, &tests, positives, mhlf)?;
    Ok((map, scoring_wall_s))
}

/// Scores all events densely (no compression), timing the scoring loop.
fn run_dense(
    banks: &[EventModels],
    collection: &[FeatureMatrix],
    positives: &[&BTreeSet<VideoId>],
    mhlf: &crate::fusion::MhlfConfig,
) -> Result<(f64, f64)> {
    let start = Instant::now();
    let tests: Vec<ScoreMatrix> =
        banks.iter().map(|bank| collection_matrix(bank, collection)).collect::<Result<_>>()?;
    let scoring_wall_s = start.elapsed().as_secs_f64();
    let map = fuse_variant(banks, &tests, positives, mhlf)?;
    Ok((map, scoring_wall_s))
}

fn pq_collection(
    collection: &[FeatureMatrix],
    d_sub: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<(String, Compressed)>> {
    collection
        .par_iter()
        .enumerate()
        .map(|(f, feat)| -> Result<(String, Compressed)> {
            let cb = pq_train(feat, d_sub, k, derive_seed(seed, "pq", f as u64))?;
            let codes = pq_encode(&cb, feat)?;
            Ok((feat.feature_name.clone(), Compressed::Pq { cb, codes }))
        })
        .collect()
}

fn uq_collection(
    collection: &[FeatureMatrix],
    k_uq: usize,
) -> Result<Vec<(String, Compressed)>> {
    collection
        .par_iter()
        .map(|feat| -> Result<(String, Compressed)> {
            // Percentile edges: skewed histogram dimensions would otherwise
            // spend their few levels covering outliers.
            let model = uq_train_with_mode(feat, k_uq, UqEdgeMode::Quantile)?;
            let codes = uq_encode(&model, feat)?;
            Ok((feat.feature_name.clone(), Compressed::UqDense(uq_decode(&model, &codes)?)))
        })
        .collect()
}

fn pq_ratio(d_sub: usize, k: usize) -> f64 {
    32.0 * d_sub as f64 / (k as f64).log2()
}

fn uq_ratio(k_uq: usize) -> f64 {
    32.0 / (k_uq as f64).log2()
}

/// Compares the exact scoring pipeline against kernel-map and quantization
/// approximations, reporting MAP, the relative change versus exact, the
/// compression ratio and the scoring wall-clock per variant. With
/// `run_sweep`, additional rows cover a compression-ratio sweep for both
/// quantizers.
pub fn degradation_experiment(
    ds: &SynthDataset,
    config: &DegradationConfig,
    options: &ScenarioOptions,
    seed: u64,
) -> Result<DegradationResult> {
    if config.d_sub == 0 {
        return Err(Error::Config("d_sub must be positive".into()));
    }
    let collection: Vec<FeatureMatrix> =
        ds.features.iter().map(|f| f.select(&ds.collection)).collect::<Result<_>>()?;
    let banks_raw =
        train_all_events(ds, &ds.features, Scenario::Ex100, ClassifierKind::Both, options, seed)?;
    let positives = eval_positives(ds, &banks_raw)?;

    let efm_features: Vec<FeatureMatrix> = ds
        .features
        .par_iter()
        .map(|f| efm_map_matrix(f, &config.efm))
        .collect::<Result<_>>()?;
    let efm_collection: Vec<FeatureMatrix> = efm_features
        .iter()
        .map(|f| f.select(&ds.collection))
        .collect::<Result<_>>()?;
    let banks_efm =
        train_all_events(ds, &efm_features, Scenario::Ex100, ClassifierKind::Both, options, seed)?;

    let mut rows = Vec::new();
    let (exact_map, exact_wall) = run_dense(&banks_raw, &collection, &positives, &options.mhlf)?;
    rows.push(DegradationRow {
        variant: "exact".into(),
        compression_ratio: 1.0,
        map: exact_map,
        rel_delta: 0.0,
        scoring_wall_s: exact_wall,
    });
    let rel = |map: f64| (map - exact_map) / exact_map;

    let (efm_map, efm_wall) = run_dense(&banks_efm, &efm_collection, &positives, &options.mhlf)?;
    rows.push(DegradationRow {
        variant: "efm".into(),
        compression_ratio: 1.0,
        map: efm_map,
        rel_delta: rel(efm_map),
        scoring_wall_s: efm_wall,
    });

    let pq_head = pq_collection(&collection, config.d_sub, config.k_pq, seed)?;
    let (pq_map, pq_wall) = run_compressed(&banks_raw, &pq_head, &positives, &options.mhlf)?;
    rows.push(DegradationRow {
        variant: "pq".into(),
        compression_ratio: pq_ratio(config.d_sub, config.k_pq),
        map: pq_map,
        rel_delta: rel(pq_map),
        scoring_wall_s: pq_wall,
    });

    let efm_pq = pq_collection(&efm_collection, config.d_sub, config.k_pq, seed)?;
    let (efm_pq_map, efm_pq_wall) =
        run_compressed(&banks_efm, &efm_pq, &positives, &options.mhlf)?;
    rows.push(DegradationRow {
        variant: "efm+pq".into(),
        compression_ratio: pq_ratio(config.d_sub, config.k_pq),
        map: efm_pq_map,
        rel_delta: rel(efm_pq_map),
        scoring_wall_s: efm_pq_wall,
    });

    let uq_head = uq_collection(&collection, config.k_uq)?;
    let (uq_map, uq_wall) = run_compressed(&banks_raw, &uq_head, &positives, &options.mhlf)?;
    rows.push(DegradationRow {
        variant: "uq".into(),
        compression_ratio: uq_ratio(config.k_uq),
        map: uq_map,
        rel_delta: rel(uq_map),
        scoring_wall_s: uq_wall,
    });

    if config.run_sweep {
        for &d_sub in &config.sweep_d_sub {
            let (map, wall) = if d_sub == config.d_sub {
                (pq_map, pq_wall)
            } else {
                let data = pq_collection(&collection, d_sub, config.k_pq, seed)?;
                run_compressed(&banks_raw, &data, &positives, &options.mhlf)?
            };
            rows.push(DegradationRow {
                variant: format!("pq[d_sub={d_sub}]"),
                compression_ratio: pq_ratio(d_sub, config.k_pq),
                map,
                rel_delta: rel(map),
                scoring_wall_s: wall,
            });
        }
        for &k_uq in &config.sweep_k_uq {
            let (map, wall) = if k_uq == config.k_uq {
                (uq_map, uq_wall)
            } else {
                let data = uq_collection(&collection, k_uq)?;
                run_compressed(&banks_raw, &data, &positives, &options.mhlf)?
            };
            rows.push(DegradationRow {
                variant: format!("uq[k={k_uq}]"),
                compression_ratio: uq_ratio(k_uq),
                map,
                rel_delta: rel(map),
                scoring_wall_s: wall,
            });
        }
    }

    Ok(DegradationResult { exact_map, rows })
}

/// Writes the degradation table as CSV with a header row. Wall-clock
/// timings are deliberately left to [`write_degradation_timings_csv`] so
/// this file is reproducible byte-for-byte across reruns.
pub fn write_degradation_csv(path: &Path, result: &DegradationResult) -> Result<()> {
    let mut out = String::from("variant,compression_ratio,map,rel_delta\n");
    for r in &result.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.variant, r.compression_ratio, r.map, r.rel_delta
        ));
    }
    write_atomic(path, out.as_bytes())
}

/// Writes per-variant scoring wall-clock seconds. Timings vary from run to
/// run, so they live apart from the reproducible results table.
pub fn write_degradation_timings_csv(path: &Path, result: &DegradationResult) -> Result<()> {
    let mut out = String::from(
        "# informational; wall-clock varies between runs\nvariant,scoring_wall_s\n",
    );
    for r in &result.rows {
        out.push_str(&format!("{},{}\n", r.variant, r.scoring_wall_s));
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_generate, SynthConfig};

    fn tiny_dataset() -> SynthDataset {
        let config = SynthConfig {
            n_events: 2,
            n_videos: 160,
            n_features: 4,
            feature_dim: 8,
            group_sizes: vec![2, 2],
            collection_positives: 8,
            train_positives: 100,
            train_negatives: 80,
            n_visual_concepts: 10,
            n_asr_concepts: 6,
            n_ocr_concepts: 4,
            signature_visual: 2,
            signature_asr: 1,
            signature_ocr: 1,
            seed: 9,
            ..SynthConfig::default()
        };
        synth_generate(&config).unwrap()
    }

    fn tiny_options() -> ScenarioOptions {
        ScenarioOptions {
            folds: 3,
            lambda_grid: vec![0.1, 1.0, 10.0],
            ..ScenarioOptions::default()
        }
    }

    #[test]
    fn robustness_emits_three_rows_per_fraction() {
        let ds = tiny_dataset();
        let config = RobustnessConfig { fractions: vec![1.0, 0.5], trials: 4 };
        let result = robustness_experiment(&ds, &config, &tiny_options(), 3).unwrap();
        assert_eq!(result.rows.len(), 2 * 3);
        for row in &result.rows {
            assert_eq!(row.trial_maps.len(), 4);
            assert!(row.ci_lo <= row.mean_map && row.mean_map <= row.ci_hi);
            assert!(row.mean_map.is_finite() && row.mean_map > 0.0);
        }
    }

    #[test]
    fn full_fraction_has_zero_width_interval() {
        let ds = tiny_dataset();
        let config = RobustnessConfig { fractions: vec![1.0], trials: 5 };
        let result = robustness_experiment(&ds, &config, &tiny_options(), 1).unwrap();
        for row in &result.rows {
            assert_eq!(row.ci_lo, row.ci_hi, "{}: identical trials must have no spread", row.method);
            assert_eq!(row.ci_lo, row.mean_map);
        }
    }

    #[test]
    fn tiny_fractions_are_skipped() {
        let ds = tiny_dataset();
        // 0.1 of 4 features rounds up to 1, below the fusion minimum.
        let config = RobustnessConfig { fractions: vec![1.0, 0.1], trials: 2 };
        let result = robustness_experiment(&ds, &config, &tiny_options(), 1).unwrap();
        assert_eq!(result.rows.len(), 3, "the undersized fraction must be skipped");
        assert!(result.rows.iter().all(|r| r.fraction == 1.0));
    }

    #[test]
    fn robustness_rejects_bad_configs() {
        let ds = tiny_dataset();
        let options = tiny_options();
        let bad_fraction = RobustnessConfig { fractions: vec![1.2], trials: 2 };
        assert!(robustness_experiment(&ds, &bad_fraction, &options, 1).is_err());
        let no_trials = RobustnessConfig { fractions: vec![1.0], trials: 0 };
        assert!(robustness_experiment(&ds, &no_trials, &options, 1).is_err());
    }

    #[test]
    fn robustness_is_deterministic() {
        let ds = tiny_dataset();
        let config = RobustnessConfig { fractions: vec![0.5], trials: 3 };
        let a = robustness_experiment(&ds, &config, &tiny_options(), 17).unwrap();
        let b = robustness_experiment(&ds, &config, &tiny_options(), 17).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.trial_maps, rb.trial_maps);
        }
    }

    #[test]
    fn degradation_covers_all_variants() {
        let ds = tiny_dataset();
        let config = DegradationConfig {
            d_sub: 4,
            k_pq: 16, // the 160-video fixture cannot feed 256 codewords
            sweep_d_sub: vec![2, 4],
            sweep_k_uq: vec![2, 16],
            ..DegradationConfig::default()
        };
        let result = degradation_experiment(&ds, &config, &tiny_options(), 5).unwrap();
        let names: Vec<&str> = result.rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(
            names,
            [
                "exact",
                "efm",
                "pq",
                "efm+pq",
                "uq",
                "pq[d_sub=2]",
                "pq[d_sub=4]",
                "uq[k=2]",
                "uq[k=16]"
            ]
        );
        let exact = result.row("exact").unwrap();
        assert_eq!(exact.rel_delta, 0.0);
        assert_eq!(exact.compression_ratio, 1.0);
        assert!(result.rows.iter().all(|r| r.map.is_finite() && r.map > 0.0));
        // Headline rows reuse the sweep computation when parameters match.
        assert_eq!(result.row("pq").unwrap().map, result.row("pq[d_sub=4]").unwrap().map);
        assert_eq!(result.row("uq").unwrap().map, result.row("uq[k=2]").unwrap().map);
        // 32-bit inputs at 4 bits per 4-dim block shrink 32×.
        assert_eq!(result.row("pq").unwrap().compression_ratio, 32.0);
        assert_eq!(result.row("uq[k=16]").unwrap().compression_ratio, 8.0);
    }

    #[test]
    fn degradation_csv_has_header_and_rows() {
        let ds = tiny_dataset();
        let config = DegradationConfig {
            d_sub: 4,
            k_pq: 16,
            run_sweep: false,
            ..DegradationConfig::default()
        };
        let result = degradation_experiment(&ds, &config, &tiny_options(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("degradation.csv");
        write_degradation_csv(&path, &result).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "variant,compression_ratio,map,rel_delta");
        assert_eq!(lines.len(), 1 + result.rows.len());
        let timings = dir.path().join("timings.csv");
        write_degradation_timings_csv(&timings, &result).unwrap();
        let text = std::fs::read_to_string(&timings).unwrap();
        assert!(text.contains("variant,scoring_wall_s"));
        assert_eq!(text.lines().count(), 2 + result.rows.len());
    }

    #[test]
    fn robustness_csv_round_trip_shape() {
        let ds = tiny_dataset();
        let config = RobustnessConfig { fractions: vec![1.0], trials: 2 };
        let result = robustness_experiment(&ds, &config, &tiny_options(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("robustness.csv");
        write_robustness_csv(&path, &result).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("fraction,n_features,method,trials,mean_map,ci_lo,ci_hi\n"));
        assert_eq!(text.lines().count(), 1 + result.rows.len());
    }
}
