//! Evaluation scenarios (how much supervision a query gets) and the
//! end-to-end per-event retrieval pipeline built on top of them.
//!
//! The pipeline functions deliberately never touch collection relevance
//! labels: [`run_scenario`] consumes queries, features and exemplars only,
//! and [`evaluate_lists`] applies the ground truth afterwards. Training
//! therefore cannot leak test labels by construction.

use crate::fusion::{mhlf_fuse, MhlfConfig, ScoreMatrix};
use crate::learn::{default_lambda_grid, predict_scores, train_event, ClassifierKind, TrainSpec};
use crate::model::{
    average_precision, write_atomic, FeatureMatrix, GroundTruth, RankedList, ScoreList, VideoId,
};
use crate::rerank::{spar_rerank, PrfConfig};
use crate::semantic::{modality_fuse, retrieve, sqg_map, RetrievalModel};
use crate::synth::SynthDataset;
use crate::{derive_seed, Error, Result};
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Supervision level of a retrieval run.
///
/// * `SQ` — semantic query only: the event is described by text, no
///   example videos.
/// * `Ex000` — zero exemplars: like `SQ` but allows automatic query
///   refinement from the collection.
/// * `Ex010` — ten positive exemplar videos.
/// * `Ex100` — one hundred positive exemplar videos.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scenario {
    Sq,
    Ex000,
    Ex010,
    Ex100,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Sq => "SQ",
            Scenario::Ex000 => "000Ex",
            Scenario::Ex010 => "010Ex",
            Scenario::Ex100 => "100Ex",
        }
    }

    /// Number of exemplar positives this scenario trains on.
    pub fn exemplars(self) -> usize {
        match self {
            Scenario::Sq | Scenario::Ex000 => 0,
            Scenario::Ex010 => 10,
            Scenario::Ex100 => 100,
        }
    }

    /// Whether the scenario trains classifiers from exemplars (as opposed
    /// to pure text search).
    pub fn uses_exemplars(self) -> bool {
        self.exemplars() > 0
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SQ" => Ok(Scenario::Sq),
            "000Ex" => Ok(Scenario::Ex000),
            "010Ex" => Ok(Scenario::Ex010),
            "100Ex" => Ok(Scenario::Ex100),
            other => Err(Error::Config(format!(
                "unknown scenario '{other}' (expected SQ, 000Ex, 010Ex or 100Ex)"
            ))),
        }
    }
}

/// Knobs of the end-to-end pipeline.
#[derive(Clone, Debug)]
pub struct ScenarioOptions {
    pub retrieval_model: RetrievalModel,
    /// Similarity threshold for query-to-concept mapping.
    pub tau: f64,
    /// Rerank the text-search list in the zero-exemplar scenario.
    pub prf_000ex: bool,
    /// Also rerank the fused list in the ten-exemplar scenario.
    pub prf_010ex: bool,
    pub folds: usize,
    pub lambda_grid: Vec<f64>,
    pub mhlf: MhlfConfig,
    pub prf: PrfConfig,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        ScenarioOptions {
            retrieval_model: RetrievalModel::Bm25,
            tau: 0.3,
            prf_000ex: true,
            prf_010ex: false,
            folds: 5,
            lambda_grid: default_lambda_grid(),
            mhlf: MhlfConfig::default(),
            prf: PrfConfig::default(),
        }
    }
}

/// Final per-event rankings of one scenario run.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioRun {
    pub scenario: Scenario,
    pub lists: BTreeMap<String, RankedList>,
}

/// Evaluation of a run against ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioReport {
    pub per_event_ap: BTreeMap<String, f64>,
    pub map: f64,
}

fn text_search_list(
    ds: &SynthDataset,
    event: &str,
    options: &ScenarioOptions,
) -> Result<RankedList> {
    let words = ds.queries.get(event).ok_or_else(|| {
        Error::Data(format!("dataset has no query words for event {event}"))
    })?;
    let query = sqg_map(words, &ds.similarity, &ds.vocab, options.tau)?;
    let lists = retrieve(event, &query, &ds.doc_matrix, options.retrieval_model)?;
    modality_fuse(&lists, &query.modality_weights)
}

fn exemplar_list(
    ds: &SynthDataset,
    collection_features: &[FeatureMatrix],
    event: &str,
    event_idx: usize,
    scenario: Scenario,
    options: &ScenarioOptions,
    seed: u64,
) -> Result<RankedList> {
    let pos_all = ds.train_positives.get(event).ok_or_else(|| {
        Error::Data(format!("dataset has no exemplars for event {event}"))
    })?;
    let need = scenario.exemplars();
    if pos_all.len() < need {
        return Err(Error::Data(format!(
            "insufficient exemplars: event {event} has {} of {need}",
            pos_all.len()
        )));
    }
    let positives: BTreeSet<VideoId> = pos_all[..need].iter().cloned().collect();
    let classifier = match scenario {
        Scenario::Ex010 => ClassifierKind::Krr,
        Scenario::Ex100 => ClassifierKind::Both,
        _ => unreachable!("exemplar_list only handles exemplar scenarios"),
    };
    let spec = TrainSpec {
        event_id: event.to_string(),
        positives: positives.clone(),
        negatives: ds.train_negatives.iter().cloned().collect(),
        scenario,
        classifier,
    };
    let training = train_event(
        &ds.features,
        &spec,
        &options.lambda_grid,
        options.folds,
        derive_seed(seed, "train", event_idx as u64),
    )?;
    let held: Vec<ScoreList> = training.scorers.iter().map(|s| s.held_out.clone()).collect();
    let train_matrix = ScoreMatrix::from_score_lists(&held)?;
    let by_name: BTreeMap<&str, &FeatureMatrix> =
        collection_features.iter().map(|f| (f.feature_name.as_str(), f)).collect();
    let mut test_lists = Vec::with_capacity(training.scorers.len());
    for scorer in &training.scorers {
        let feature = by_name.get(scorer.model.feature_name.as_str()).ok_or_else(|| {
            Error::Internal(format!(
                "trained on unknown feature '{}'",
                scorer.model.feature_name
            ))
        })?;
        let mut scores = predict_scores(&scorer.model, feature)?;
        scores.source = scorer.source.clone();
        test_lists.push(scores);
    }
    let test_matrix = ScoreMatrix::from_score_lists(&test_lists)?;
    let fused = mhlf_fuse(&train_matrix, &positives, &test_matrix, &options.mhlf, event)?;
    let mut list = fused.ranked;
    if scenario == Scenario::Ex010 && options.prf_010ex {
        list = spar_rerank(
            &list,
            collection_features,
            &options.prf,
            derive_seed(seed, "prf", event_idx as u64),
        )?;
    }
    Ok(list)
}

/// Runs one scenario across every event. Only queries, features and
/// exemplars are consumed; collection labels stay untouched.
pub fn run_scenario(
    ds: &SynthDataset,
    scenario: Scenario,
    options: &ScenarioOptions,
    seed: u64,
) -> Result<ScenarioRun> {
    let events = ds.event_ids();
    if events.is_empty() {
        return Err(Error::Data("dataset has no events".into()));
    }
    // One row-selection per feature, shared by all events.
    let needs_features = scenario.uses_exemplars() || (scenario == Scenario::Ex000 && options.prf_000ex);
    let collection_features: Vec<FeatureMatrix> = if needs_features {
        ds.features.iter().map(|f| f.select(&ds.collection)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let lists: Vec<(String, RankedList)> = events
        .par_iter()
        .enumerate()
        .map(|(event_idx, event)| -> Result<(String, RankedList)> {
            let list = match scenario {
                Scenario::Sq => text_search_list(ds, event, options)?,
                Scenario::Ex000 => {
                    let initial = text_search_list(ds, event, options)?;
                    if options.prf_000ex {
                        spar_rerank(
                            &initial,
                            &collection_features,
                            &options.prf,
                            derive_seed(seed, "prf", event_idx as u64),
                        )?
                    } else {
                        initial
                    }
                }
                Scenario::Ex010 | Scenario::Ex100 => exemplar_list(
                    ds,
                    &collection_features,
                    event,
                    event_idx,
                    scenario,
                    options,
                    seed,
                )?,
            };
            Ok((event.clone(), list))
        })
        .collect::<Result<_>>()?;
    Ok(ScenarioRun { scenario, lists: lists.into_iter().collect() })
}

/// Scores finished rankings against the ground truth.
pub fn evaluate_lists(
    lists: &BTreeMap<String, RankedList>,
    truth: &GroundTruth,
) -> Result<ScenarioReport> {
    if lists.is_empty() {
        return Err(Error::Data("no ranked lists to evaluate".into()));
    }
    let mut per_event_ap = BTreeMap::new();
    for (event, list) in lists {
        let positives = truth.positives(event).ok_or_else(|| {
            Error::Data(format!("ground truth lists no positives for event {event}"))
        })?;
        per_event_ap.insert(event.clone(), average_precision(list, positives)?);
    }
    let map = per_event_ap.values().sum::<f64>() / per_event_ap.len() as f64;
    Ok(ScenarioReport { per_event_ap, map })
}

/// Writes the evaluation as flat JSON: every event's AP keyed by event id,
/// plus `map` and `manifest_hash`.
pub fn write_map_report(path: &Path, report: &ScenarioReport, manifest_hash: &str) -> Result<()> {
    let mut obj = serde_json::Map::new();
    for (event, ap) in &report.per_event_ap {
        obj.insert(event.clone(), serde_json::json!(ap));
    }
    obj.insert("map".to_string(), serde_json::json!(report.map));
    obj.insert("manifest_hash".to_string(), serde_json::json!(manifest_hash));
    let mut bytes = serde_json::to_vec_pretty(&serde_json::Value::Object(obj))
        .map_err(|e| Error::Internal(format!("cannot serialize report: {e}")))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Reads a report written by [`write_map_report`]; returns the report and
/// the recorded manifest hash.
pub fn read_map_report(path: &Path) -> Result<(ScenarioReport, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: bad report: {e}", path.display())))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Data(format!("{}: report is not an object", path.display())))?;
    let mut per_event_ap = BTreeMap::new();
    let mut map = None;
    let mut hash = None;
    for (k, v) in obj {
        match k.as_str() {
            "map" => map = v.as_f64(),
            "manifest_hash" => hash = v.as_str().map(String::from),
            event => {
                let ap = v.as_f64().ok_or_else(|| {
                    Error::Data(format!("{}: AP for {event} is not a number", path.display()))
                })?;
                per_event_ap.insert(event.to_string(), ap);
            }
        }
    }
    let map =
        map.ok_or_else(|| Error::Data(format!("{}: report lacks 'map'", path.display())))?;
    let hash = hash
        .ok_or_else(|| Error::Data(format!("{}: report lacks 'manifest_hash'", path.display())))?;
    Ok((ScenarioReport { per_event_ap, map }, hash))
}
