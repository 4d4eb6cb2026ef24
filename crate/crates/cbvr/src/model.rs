//! Core domain types shared by every stage: video identifiers, feature
//! matrices, score lists and their deterministic ranking, ground truth with
//! split labels, score normalization, and average-precision metrics.
//!
//! Determinism rules that the whole crate leans on:
//! - every ranking breaks score ties by ascending byte-wise [`VideoId`];
//! - z-scoring uses the population standard deviation, and zero-variance
//!   lists normalize to all zeros instead of erroring;
//! - rank normalization assigns the item at 1-based rank `r` the score
//!   `1 − (r−1)/(n−1)`, so re-ranking a rank-normalized list reproduces the
//!   original ranking exactly.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

// ---------------------------------------------------------------------------
// Identifiers
// ---------------------------------------------------------------------------

/// Non-empty UTF-8 token identifying one video. The derived `Ord` is
/// byte-wise and is the tie-break order used by every ranking in the crate.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VideoId(String);

impl VideoId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Data("video id must be non-empty".into()));
        }
        Ok(VideoId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VideoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

// ---------------------------------------------------------------------------
// Feature matrices
// ---------------------------------------------------------------------------

/// Dense per-video feature vectors for one feature type. Rows align with
/// `video_ids`; all values are finite 32-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub feature_name: String,
    pub video_ids: Vec<VideoId>,
    /// Row-major `n × d` values.
    pub values: Vec<f32>,
    pub d: usize,
}

impl FeatureMatrix {
    /// Builds a matrix after checking the invariants: unique ids, row count
    /// times `d` matching the buffer, and no NaN/Inf entries.
    pub fn new(
        feature_name: impl Into<String>,
        video_ids: Vec<VideoId>,
        values: Vec<f32>,
        d: usize,
    ) -> Result<Self> {
        if video_ids.len() * d != values.len() {
            return Err(Error::Data(format!(
                "feature matrix shape mismatch: {} ids × {} dims ≠ {} values",
                video_ids.len(),
                d,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature matrix contains NaN/Inf".into()));
        }
        let unique: BTreeSet<_> = video_ids.iter().collect();
        if unique.len() != video_ids.len() {
            return Err(Error::Data("duplicate video ids in feature matrix".into()));
        }
        Ok(FeatureMatrix { feature_name: feature_name.into(), video_ids, values, d })
    }

    pub fn n(&self) -> usize {
        self.video_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    /// Index of a video's row, if present.
    pub fn row_of(&self, id: &VideoId) -> Option<usize> {
        self.video_ids.iter().position(|v| v == id)
    }

    /// Returns a new matrix containing the rows for `ids`, in `ids` order.
    pub fn select(&self, ids: &[VideoId]) -> Result<FeatureMatrix> {
        let by_id: BTreeMap<&VideoId, usize> =
            self.video_ids.iter().enumerate().map(|(i, v)| (v, i)).collect();
        let mut values = Vec::with_capacity(ids.len() * self.d);
        for id in ids {
            let &i = by_id.get(id).ok_or_else(|| {
                Error::Data(format!("video {id} missing from feature {}", self.feature_name))
            })?;
            values.extend_from_slice(self.row(i));
        }
        FeatureMatrix::new(self.feature_name.clone(), ids.to_vec(), values, self.d)
    }
}

// ---------------------------------------------------------------------------
// Scores and rankings
// ---------------------------------------------------------------------------

/// Per-event, per-source scores keyed by video. Iteration order is the id
/// order (BTreeMap), so downstream consumers are deterministic by default.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreList {
    pub event_id: String,
    /// Feature or system name that produced the scores.
    pub source: String,
    entries: BTreeMap<VideoId, f64>,
}

impl ScoreList {
    pub fn new(event_id: impl Into<String>, source: impl Into<String>) -> Self {
        ScoreList { event_id: event_id.into(), source: source.into(), entries: BTreeMap::new() }
    }

    pub fn from_pairs(
        event_id: impl Into<String>,
        source: impl Into<String>,
        pairs: impl IntoIterator<Item = (VideoId, f64)>,
    ) -> Result<Self> {
        let mut list = ScoreList::new(event_id, source);
        for (id, s) in pairs {
            list.try_insert(id, s)?;
        }
        Ok(list)
    }

    /// Inserts or replaces a score. Panics on non-finite scores in debug
    /// builds; use [`ScoreList::try_insert`] for checked insertion.
    pub fn insert(&mut self, id: VideoId, score: f64) {
        debug_assert!(score.is_finite(), "score for {id} must be finite");
        self.entries.insert(id, score);
    }

    pub fn try_insert(&mut self, id: VideoId, score: f64) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::Data(format!("non-finite score for video {id}")));
        }
        self.entries.insert(id, score);
        Ok(())
    }

    pub fn get(&self, id: &VideoId) -> Option<f64> {
        self.entries.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VideoId, f64)> {
        self.entries.iter().map(|(id, &s)| (id, s))
    }

    pub fn ids(&self) -> impl Iterator<Item = &VideoId> {
        self.entries.keys()
    }
}

/// An ordering of a collection: entries descending by score, ties broken
/// ascending by video id. Constructed through [`to_ranked_list`] so the
/// ordering invariant always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub event_id: String,
    entries: Vec<(VideoId, f64)>,
}

impl RankedList {
    /// Ordered entries, best first.
    pub fn entries(&self) -> &[(VideoId, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The scores as a list again (used when a ranking feeds a normalizer).
    pub fn to_score_list(&self, source: impl Into<String>) -> ScoreList {
        let mut list = ScoreList::new(self.event_id.clone(), source);
        for (id, s) in &self.entries {
            list.insert(id.clone(), *s);
        }
        list
    }
}

/// Sorts scores into a [`RankedList`]: descending score, ties ascending by
/// id. Deterministic under permutation of the input entries, and idempotent.
pub fn to_ranked_list(scores: &ScoreList) -> RankedList {
    let mut entries: Vec<(VideoId, f64)> =
        scores.iter().map(|(id, s)| (id.clone(), s)).collect();
    entries.sort_by(|(ida, sa), (idb, sb)| {
        sb.partial_cmp(sa).expect("scores are finite").then_with(|| ida.cmp(idb))
    });
    RankedList { event_id: scores.event_id.clone(), entries }
}

/// Score normalization methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMethod {
    /// Subtract the mean, divide by the population standard deviation.
    /// Zero-variance lists map to all zeros.
    Zscore,
    /// Affine map onto [0, 1]; degenerate (constant) lists map to all zeros.
    Minmax,
    /// The item at 1-based rank `r` (best = 1) scores `1 − (r−1)/(n−1)`.
    Rank,
}

impl std::str::FromStr for NormMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(NormMethod::Zscore),
            "minmax" => Ok(NormMethod::Minmax),
            "rank" => Ok(NormMethod::Rank),
            other => Err(Error::Config(format!("unknown normalization method '{other}'"))),
        }
    }
}

/// Normalizes a score list with the requested method. Requires at least two
/// videos (an empty list is reported as such).
pub fn normalize_scores(scores: &ScoreList, method: NormMethod) -> Result<ScoreList> {
    if scores.is_empty() {
        return Err(Error::Data("empty score list".into()));
    }
    if scores.len() < 2 {
        return Err(Error::Data("normalization needs at least 2 videos".into()));
    }
    let mut out = ScoreList::new(scores.event_id.clone(), scores.source.clone());
    match method {
        NormMethod::Zscore => {
            let n = scores.len() as f64;
            let mean = scores.iter().map(|(_, s)| s).sum::<f64>() / n;
            let var = scores.iter().map(|(_, s)| (s - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            for (id, s) in scores.iter() {
                let z = if std > 0.0 { (s - mean) / std } else { 0.0 };
                out.insert(id.clone(), z);
            }
        }
        NormMethod::Minmax => {
            let min = scores.iter().map(|(_, s)| s).fold(f64::INFINITY, f64::min);
            let max = scores.iter().map(|(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
            let range = max - min;
            for (id, s) in scores.iter() {
                let v = if range > 0.0 { (s - min) / range } else { 0.0 };
                out.insert(id.clone(), v);
            }
        }
        NormMethod::Rank => {
            let ranked = to_ranked_list(scores);
            let n = ranked.len() as f64;
            for (r, (id, _)) in ranked.entries().iter().enumerate() {
                out.insert(id.clone(), 1.0 - r as f64 / (n - 1.0));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

/// Collection split labels. Training positives are labeled per event in
/// [`GroundTruth::positives`]; the split label records which partition a
/// video belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Positive,
    Background,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Positive => "positive",
            Split::Background => "background",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Split::Positive),
            "background" => Ok(Split::Background),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split label '{other}'"))),
        }
    }
}

/// Ground truth: per-event positive sets plus a split label per video.
/// Positive sets are disjoint from the background split by construction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    positives: BTreeMap<String, BTreeSet<VideoId>>,
    splits: BTreeMap<VideoId, Split>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a training positive for an event (split label implied).
    pub fn add_positive(&mut self, event_id: impl Into<String>, id: VideoId) -> Result<()> {
        if self.splits.get(&id) == Some(&Split::Background) {
            return Err(Error::Data(format!(
                "video {id} is in the background split and cannot be a positive"
            )));
        }
        self.splits.insert(id.clone(), Split::Positive);
        self.positives.entry(event_id.into()).or_default().insert(id);
        Ok(())
    }

    /// Assigns a non-positive split label to a video.
    pub fn set_split(&mut self, id: VideoId, split: Split) -> Result<()> {
        if split == Split::Background
            && self.positives.values().any(|set| set.contains(&id))
        {
            return Err(Error::Data(format!(
                "video {id} is a positive and cannot join the background split"
            )));
        }
        self.splits.insert(id, split);
        Ok(())
    }

    pub fn positives(&self, event_id: &str) -> Option<&BTreeSet<VideoId>> {
        self.positives.get(event_id)
    }

    pub fn events(&self) -> impl Iterator<Item = &str> {
        self.positives.keys().map(String::as_str)
    }

    pub fn split_of(&self, id: &VideoId) -> Option<Split> {
        self.splits.get(id).copied()
    }

    pub fn videos_in_split(&self, split: Split) -> Vec<VideoId> {
        self.splits
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Checks that every labeled id exists in `collection`.
    pub fn validate_against(&self, collection: &BTreeSet<VideoId>) -> Result<()> {
        for id in self.splits.keys() {
            if !collection.contains(id) {
                return Err(Error::Data(format!("labeled video {id} missing from collection")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

/// Non-interpolated average precision:
/// `AP = (1/R) Σ_{k: item at rank k relevant} (relevant in top k) / k`.
///
/// Requires a non-empty positive set fully contained in the ranked
/// collection.
pub fn average_precision(ranked: &RankedList, positives: &BTreeSet<VideoId>) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Data("no positives".into()));
    }
    let collection: BTreeSet<&VideoId> = ranked.entries().iter().map(|(id, _)| id).collect();
    for p in positives {
        if !collection.contains(p) {
            return Err(Error::Data(format!("positive {p} missing from ranked collection")));
        }
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, (id, _)) in ranked.entries().iter().enumerate() {
        if positives.contains(id) {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / positives.len() as f64)
}

/// Unweighted mean of per-event AP. Every ranked list's event must have
/// ground-truth positives.
pub fn mean_average_precision(lists: &[RankedList], gt: &GroundTruth) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::Data("no ranked lists to evaluate".into()));
    }
    let mut sum = 0.0;
    for list in lists {
        let positives = gt
            .positives(&list.event_id)
            .ok_or_else(|| Error::Data(format!("no ground truth for event {}", list.event_id)))?;
        sum += average_precision(list, positives)?;
    }
    Ok(sum / lists.len() as f64)
}

// ---------------------------------------------------------------------------
// File interchange
// ---------------------------------------------------------------------------

/// Formats a score with 9 significant digits, the interchange precision.
pub fn format_score(s: f64) -> String {
    format!("{s:.8e}")
}

/// Writes a ranked list as TSV (`video_id<TAB>score`, LF endings, 9
/// significant digits), best first.
pub fn write_ranked_tsv(path: &Path, ranked: &RankedList) -> Result<()> {
    let mut out = Vec::new();
    for (id, s) in ranked.entries() {
        out.extend_from_slice(id.as_str().as_bytes());
        out.push(b'\t');
        out.extend_from_slice(format_score(*s).as_bytes());
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Writes a score list as TSV in id order (used for unranked score dumps).
pub fn write_scores_tsv(path: &Path, scores: &ScoreList) -> Result<()> {
    let mut out = Vec::new();
    for (id, s) in scores.iter() {
        out.extend_from_slice(id.as_str().as_bytes());
        out.push(b'\t');
        out.extend_from_slice(format_score(s).as_bytes());
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Reads a TSV score file back into a [`ScoreList`].
pub fn read_scores_tsv(path: &Path, event_id: &str, source: &str) -> Result<ScoreList> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut list = ScoreList::new(event_id, source);
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let (id, score) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected video_id<TAB>score", path.display(), lineno + 1))
        })?;
        let score: f64 = score.parse().map_err(|_| {
            Error::Data(format!("{}:{}: bad score '{score}'", path.display(), lineno + 1))
        })?;
        list.try_insert(VideoId::new(id)?, score)?;
    }
    Ok(list)
}

/// Reads a ranked TSV back into a [`RankedList`]. The ordering is
/// recomputed from the parsed scores, so hand-edited files still yield the
/// canonical order (descending score, ties ascending by id).
pub fn read_ranked_tsv(path: &Path, event_id: &str) -> Result<RankedList> {
    let scores = read_scores_tsv(path, event_id, "file")?;
    if scores.is_empty() {
        return Err(Error::Data(format!("{}: empty ranked list", path.display())));
    }
    Ok(to_ranked_list(&scores))
}

/// Writes a feature matrix as TSV: a `#feature=<name>	d=<dims>` header
/// line, then one `video_id<TAB>v1..vd` row per video. Values use Rust's
/// shortest round-trip float formatting, so write → read → write is
/// byte-identical.
pub fn write_feature_tsv(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "#feature={}\td={}", m.feature_name, m.d).expect("vec write");
    for (i, id) in m.video_ids.iter().enumerate() {
        out.extend_from_slice(id.as_str().as_bytes());
        for v in m.row(i) {
            out.push(b'\t');
            write!(out, "{v}").expect("vec write");
        }
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Reads the TSV form written by [`write_feature_tsv`].
pub fn read_feature_tsv(path: &Path) -> Result<FeatureMatrix> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut name = String::new();
    let mut d = 0usize;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if lineno == 0 {
            let rest = line.strip_prefix("#feature=").ok_or_else(|| {
                Error::Data(format!("{}: missing #feature header", path.display()))
            })?;
            let (n, dim) = rest.split_once('\t').ok_or_else(|| {
                Error::Data(format!("{}: malformed feature header", path.display()))
            })?;
            name = n.to_string();
            d = dim
                .strip_prefix("d=")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: bad dimension field", path.display())))?;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields
            .next()
            .ok_or_else(|| Error::Data(format!("{}:{}: empty row", path.display(), lineno + 1)))?;
        ids.push(VideoId::new(id)?);
        let before = values.len();
        for f in fields {
            let v: f32 = f.parse().map_err(|_| {
                Error::Data(format!("{}:{}: bad value '{f}'", path.display(), lineno + 1))
            })?;
            values.push(v);
        }
        if values.len() - before != d {
            return Err(Error::Data(format!(
                "{}:{}: {} values for d={d}",
                path.display(),
                lineno + 1,
                values.len() - before
            )));
        }
    }
    FeatureMatrix::new(name, ids, values, d)
}

/// Writes ground truth as CSV (`event_id,video_id,label`). Positive rows
/// carry their event id; pure split rows use `-` as the event field.
pub fn write_ground_truth_csv(path: &Path, gt: &GroundTruth) -> Result<()> {
    let mut out = String::from("event_id,video_id,label\n");
    for event in gt.events() {
        for id in gt.positives(event).expect("event exists") {
            out.push_str(&format!("{event},{id},positive\n"));
        }
    }
    for (id, split) in &gt.splits {
        if *split != Split::Positive {
            out.push_str(&format!("-,{id},{}\n", split.as_str()));
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Reads the CSV form written by [`write_ground_truth_csv`].
pub fn read_ground_truth_csv(path: &Path) -> Result<GroundTruth> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut gt = GroundTruth::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if lineno == 0 || line.is_empty() {
            continue; // header
        }
        let mut parts = line.splitn(3, ',');
        let (event, id, label) = match (parts.next(), parts.next(), parts.next()) {
            (Some(e), Some(i), Some(l)) => (e, i, l),
            _ => {
                return Err(Error::Data(format!(
                    "{}:{}: expected event_id,video_id,label",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        let id = VideoId::new(id)?;
        match label.parse::<Split>()? {
            Split::Positive => {
                if event == "-" {
                    return Err(Error::Data(format!(
                        "{}:{}: positive row needs an event id",
                        path.display(),
                        lineno + 1
                    )));
                }
                gt.add_positive(event, id)?;
            }
            split => gt.set_split(id, split)?,
        }
    }
    Ok(gt)
}

/// Writes bytes atomically: a unique temp file in the target directory,
/// flushed and renamed over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vid(s: &str) -> VideoId {
        VideoId::new(s).unwrap()
    }

    fn list(pairs: &[(&str, f64)]) -> ScoreList {
        ScoreList::from_pairs("E1", "t", pairs.iter().map(|(id, s)| (vid(id), *s))).unwrap()
    }

    #[test]
    fn minmax_two_point_range() {
        let out = normalize_scores(&list(&[("a", 3.0), ("b", 1.0)]), NormMethod::Minmax).unwrap();
        assert_eq!(out.get(&vid("a")), Some(1.0));
        assert_eq!(out.get(&vid("b")), Some(0.0));
    }

    #[test]
    fn zscore_zero_variance_maps_to_zero() {
        let out = normalize_scores(
            &list(&[("a", 5.0), ("b", 5.0), ("c", 5.0)]),
            NormMethod::Zscore,
        )
        .unwrap();
        for (_, s) in out.iter() {
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn zscore_population_moments() {
        let out = normalize_scores(&list(&[("a", 1.0), ("b", 3.0)]), NormMethod::Zscore).unwrap();
        // Population std of {1,3} is 1, so outputs are ±1.
        assert!((out.get(&vid("b")).unwrap() - 1.0).abs() < 1e-12);
        assert!((out.get(&vid("a")).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_normalization_formula() {
        let out = normalize_scores(
            &list(&[("a", 0.9), ("b", 0.5), ("c", 0.1)]),
            NormMethod::Rank,
        )
        .unwrap();
        assert_eq!(out.get(&vid("a")), Some(1.0));
        assert_eq!(out.get(&vid("b")), Some(0.5));
        assert_eq!(out.get(&vid("c")), Some(0.0));
    }

    #[test]
    fn normalize_rejects_empty_and_singleton() {
        let empty = ScoreList::new("E1", "t");
        assert!(matches!(
            normalize_scores(&empty, NormMethod::Rank),
            Err(Error::Data(msg)) if msg.contains("empty score list")
        ));
        assert!(normalize_scores(&list(&[("a", 1.0)]), NormMethod::Rank).is_err());
    }

    #[test]
    fn ranking_orders_and_breaks_ties_by_id() {
        let ranked = to_ranked_list(&list(&[("a", 0.2), ("b", 0.8)]));
        assert_eq!(ranked.entries()[0].0, vid("b"));
        let tied = to_ranked_list(&list(&[("b", 0.5), ("a", 0.5)]));
        assert_eq!(tied.entries()[0].0, vid("a"));
    }

    #[test]
    fn ap_hand_cases() {
        // [pos, neg, pos] with R=2 → (1 + 2/3)/2.
        let ranked = to_ranked_list(&list(&[("a", 3.0), ("b", 2.0), ("c", 1.0)]));
        let pos: BTreeSet<_> = [vid("a"), vid("c")].into();
        let ap = average_precision(&ranked, &pos).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);

        // Single positive at rank 4 of 10 → 0.25.
        let pairs: Vec<(&str, f64)> = vec![
            ("v0", 10.0), ("v1", 9.0), ("v2", 8.0), ("v3", 7.0), ("v4", 6.0),
            ("v5", 5.0), ("v6", 4.0), ("v7", 3.0), ("v8", 2.0), ("v9", 1.0),
        ];
        let ranked = to_ranked_list(&list(&pairs));
        let pos: BTreeSet<_> = [vid("v3")].into();
        assert!((average_precision(&ranked, &pos).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ap_perfect_ranking_is_one() {
        let ranked = to_ranked_list(&list(&[("a", 3.0), ("b", 2.0), ("c", 1.0)]));
        let pos: BTreeSet<_> = [vid("a"), vid("b")].into();
        assert_eq!(average_precision(&ranked, &pos).unwrap(), 1.0);
    }

    #[test]
    fn ap_requires_positives_in_collection() {
        let ranked = to_ranked_list(&list(&[("a", 1.0), ("b", 0.5)]));
        assert!(average_precision(&ranked, &BTreeSet::new()).is_err());
        let stray: BTreeSet<_> = [vid("zz")].into();
        assert!(average_precision(&ranked, &stray).is_err());
    }

    #[test]
    fn map_is_mean_of_aps() {
        let mut gt = GroundTruth::new();
        gt.add_positive("E1", vid("a")).unwrap();
        gt.add_positive("E2", vid("b")).unwrap();
        let l1 = to_ranked_list(&ScoreList::from_pairs("E1", "t", [(vid("a"), 1.0), (vid("b"), 0.0)]).unwrap());
        let l2 = to_ranked_list(&ScoreList::from_pairs("E2", "t", [(vid("a"), 1.0), (vid("b"), 0.0)]).unwrap());
        // E1 AP = 1.0; E2 AP = 0.5 (positive at rank 2).
        let map = mean_average_precision(&[l1, l2], &gt).unwrap();
        assert!((map - 0.75).abs() < 1e-12);
    }

    #[test]
    fn map_names_missing_event() {
        let gt = GroundTruth::new();
        let l = to_ranked_list(&list(&[("a", 1.0), ("b", 0.0)]));
        let err = mean_average_precision(&[l], &gt).unwrap_err();
        assert!(err.to_string().contains("E1"));
    }

    #[test]
    fn ground_truth_positive_background_disjoint() {
        let mut gt = GroundTruth::new();
        gt.add_positive("E1", vid("a")).unwrap();
        assert!(gt.set_split(vid("a"), Split::Background).is_err());
        gt.set_split(vid("b"), Split::Background).unwrap();
        assert!(gt.add_positive("E1", vid("b")).is_err());
    }

    #[test]
    fn tsv_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ranked = to_ranked_list(&list(&[("a", 0.25), ("b", -1.5), ("c", 3.0e-7)]));
        let path = dir.path().join("scores.tsv");
        write_ranked_tsv(&path, &ranked).unwrap();
        let back = read_scores_tsv(&path, "E1", "t").unwrap();
        for (id, s) in ranked.entries() {
            assert!((back.get(id).unwrap() - s).abs() <= s.abs() * 1e-8 + 1e-12);
        }

        let mut gt = GroundTruth::new();
        gt.add_positive("E1", vid("a")).unwrap();
        gt.set_split(vid("b"), Split::Test).unwrap();
        gt.set_split(vid("c"), Split::Background).unwrap();
        let gpath = dir.path().join("gt.csv");
        write_ground_truth_csv(&gpath, &gt).unwrap();
        assert_eq!(read_ground_truth_csv(&gpath).unwrap(), gt);
    }

    #[test]
    fn feature_tsv_round_trips_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let m = FeatureMatrix::new(
            "color",
            vec![vid("a"), vid("b")],
            vec![0.1, -2.5e-8, 3.0, f32::MAX, 1.0 / 3.0, 0.0],
            3,
        )
        .unwrap();
        let p1 = dir.path().join("f1.tsv");
        let p2 = dir.path().join("f2.tsv");
        write_feature_tsv(&p1, &m).unwrap();
        let back = read_feature_tsv(&p1).unwrap();
        assert_eq!(back, m);
        write_feature_tsv(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn feature_matrix_checks_shape_and_ids() {
        assert!(FeatureMatrix::new("f", vec![vid("a")], vec![1.0, 2.0], 2).is_ok());
        assert!(FeatureMatrix::new("f", vec![vid("a")], vec![1.0], 2).is_err());
        assert!(FeatureMatrix::new("f", vec![vid("a"), vid("a")], vec![1.0, 2.0], 1).is_err());
        assert!(FeatureMatrix::new("f", vec![vid("a")], vec![f32::NAN], 1).is_err());
    }

    proptest! {
        /// Ranking is invariant under any strictly monotone score transform.
        #[test]
        fn ranking_argsort_invariance(scores in proptest::collection::vec(-1e3..1e3f64, 2..40)) {
            let pairs: Vec<(VideoId, f64)> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| (vid(&format!("v{i:03}")), s))
                .collect();
            let base = ScoreList::from_pairs("E", "t", pairs.clone()).unwrap();
            // Strictly monotone transform: affine with positive slope plus tanh bend.
            let transformed = ScoreList::from_pairs(
                "E",
                "t",
                pairs.iter().map(|(id, s)| (id.clone(), 3.0 * s + (s / 1e3).tanh() + 7.0)),
            )
            .unwrap();
            let ra = to_ranked_list(&base);
            let rb = to_ranked_list(&transformed);
            let ids_a: Vec<_> = ra.entries().iter().map(|(id, _)| id.clone()).collect();
            let ids_b: Vec<_> = rb.entries().iter().map(|(id, _)| id.clone()).collect();
            prop_assert_eq!(ids_a, ids_b);
        }

        /// AP only depends on the ordering, not the score values.
        #[test]
        fn ap_order_invariance(
            scores in proptest::collection::vec(-1e3..1e3f64, 3..30),
            flags in proptest::collection::vec(proptest::bool::ANY, 30),
        ) {
            let pairs: Vec<(VideoId, f64)> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| (vid(&format!("v{i:03}")), s))
                .collect();
            let positives: BTreeSet<VideoId> = pairs
                .iter()
                .zip(&flags)
                .filter(|(_, &f)| f)
                .map(|((id, _), _)| id.clone())
                .collect();
            prop_assume!(!positives.is_empty());
            let base = ScoreList::from_pairs("E", "t", pairs.clone()).unwrap();
            let shifted = ScoreList::from_pairs(
                "E",
                "t",
                pairs.iter().map(|(id, s)| (id.clone(), s * 0.5 + 100.0)),
            )
            .unwrap();
            let ap_a = average_precision(&to_ranked_list(&base), &positives).unwrap();
            let ap_b = average_precision(&to_ranked_list(&shifted), &positives).unwrap();
            prop_assert!((ap_a - ap_b).abs() < 1e-15);
        }

        /// Rank normalization followed by re-ranking reproduces the ranking.
        #[test]
        fn rank_normalize_then_rank_is_identity(scores in proptest::collection::vec(-50.0..50.0f64, 2..40)) {
            let pairs: Vec<(VideoId, f64)> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| (vid(&format!("v{i:03}")), s))
                .collect();
            let base = ScoreList::from_pairs("E", "t", pairs).unwrap();
            let original = to_ranked_list(&base);
            let normalized = normalize_scores(&base, NormMethod::Rank).unwrap();
            let re_ranked = to_ranked_list(&normalized);
            let ids_a: Vec<_> = original.entries().iter().map(|(id, _)| id.clone()).collect();
            let ids_b: Vec<_> = re_ranked.entries().iter().map(|(id, _)| id.clone()).collect();
            prop_assert_eq!(ids_a, ids_b);
        }

        /// Minmax lands in [0,1] with both endpoints attained.
        #[test]
        fn minmax_range(scores in proptest::collection::vec(-1e6..1e6f64, 2..50)) {
            let pairs: Vec<(VideoId, f64)> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| (vid(&format!("v{i:03}")), s))
                .collect();
            let base = ScoreList::from_pairs("E", "t", pairs).unwrap();
            let out = normalize_scores(&base, NormMethod::Minmax).unwrap();
            let values: Vec<f64> = out.iter().map(|(_, s)| s).collect();
            prop_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    /// AP of a uniformly random ranking concentrates near R/n. (The exact
    /// expectation carries a +O(H_n/n) correction, so the ±0.02 band needs a
    /// collection large enough for that term to be small.)
    #[test]
    fn random_ranking_ap_converges_to_prior() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(42);
        let n = 1000usize;
        let r = 100usize;
        let positives: BTreeSet<VideoId> = (0..r).map(|i| vid(&format!("v{i:03}"))).collect();
        let mut total = 0.0;
        let trials = 1000;
        for _ in 0..trials {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let scores = ScoreList::from_pairs(
                "E",
                "t",
                order.iter().enumerate().map(|(rank, &v)| {
                    (vid(&format!("v{v:03}")), (n - rank) as f64)
                }),
            )
            .unwrap();
            total += average_precision(&to_ranked_list(&scores), &positives).unwrap();
        }
        let mean = total / trials as f64;
        let prior = r as f64 / n as f64;
        assert!(
            (mean - prior).abs() < 0.02,
            "mean AP {mean} strays from prior {prior}"
        );
    }
}
