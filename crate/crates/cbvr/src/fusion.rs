//! Late fusion of per-source score lists: a multistage pipeline (normalize,
//! augment with rank rows, recover essential features by PCA-tree
//! clustering, blend four weighting strategies) plus average and
//! linear-regression baselines.

use crate::model::{
    average_precision, normalize_scores, to_ranked_list, NormMethod, RankedList, ScoreList,
    VideoId,
};
use crate::{Error, Result};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// A rectangular block of scores: one row per source (feature × classifier),
/// one column per video.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub row_names: Vec<String>,
    pub video_ids: Vec<VideoId>,
    /// Row-major `rows × cols` scores.
    pub values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(row_names: Vec<String>, video_ids: Vec<VideoId>, values: Vec<f64>) -> Result<Self> {
        if row_names.is_empty() || video_ids.is_empty() {
            return Err(Error::Data("score matrix must have rows and columns".into()));
        }
        if values.len() != row_names.len() * video_ids.len() {
            return Err(Error::Data(format!(
                "score matrix has {} values, want {}×{}",
                values.len(),
                row_names.len(),
                video_ids.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("score matrix contains non-finite values".into()));
        }
        let mut seen = BTreeSet::new();
        for name in &row_names {
            if !seen.insert(name.clone()) {
                return Err(Error::Data(format!("duplicate row name '{name}'")));
            }
        }
        let mut ids = BTreeSet::new();
        for id in &video_ids {
            if !ids.insert(id.clone()) {
                return Err(Error::Data(format!("duplicate video id '{id}'")));
            }
        }
        Ok(ScoreMatrix { row_names, video_ids, values })
    }

    /// Builds a matrix from score lists that all cover the same videos.
    pub fn from_score_lists(lists: &[ScoreList]) -> Result<Self> {
        if lists.is_empty() {
            return Err(Error::Data("no score lists to stack".into()));
        }
        let ids: Vec<VideoId> = lists[0].ids().cloned().collect();
        let mut values = Vec::with_capacity(lists.len() * ids.len());
        let mut names = Vec::with_capacity(lists.len());
        for list in lists {
            names.push(list.source.clone());
            for id in &ids {
                match list.get(id) {
                    Some(s) => values.push(s),
                    None => {
                        return Err(Error::Data(format!(
                            "source {} is missing video {id}",
                            list.source
                        )))
                    }
                }
            }
            if list.len() != ids.len() {
                return Err(Error::Data(format!(
                    "source {} scores {} videos, expected {}",
                    list.source,
                    list.len(),
                    ids.len()
                )));
            }
        }
        ScoreMatrix::new(names, ids, values)
    }

    pub fn n_rows(&self) -> usize {
        self.row_names.len()
    }

    pub fn n_cols(&self) -> usize {
        self.video_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols()..(i + 1) * self.n_cols()]
    }

    /// One row as a score list.
    pub fn row_scores(&self, i: usize, event_id: &str) -> ScoreList {
        let mut out = ScoreList::new(event_id, &self.row_names[i]);
        for (id, &s) in self.video_ids.iter().zip(self.row(i)) {
            out.insert(id.clone(), s);
        }
        out
    }
}

/// True when ids strictly ascend, i.e. columns already sit in ranked-list
/// tie-break order.
fn ascending_ids(ids: &[VideoId]) -> bool {
    ids.windows(2).all(|w| w[0] < w[1])
}

/// Normalizes every row independently with the given method.
pub fn normalize_rows(m: &ScoreMatrix, method: NormMethod) -> Result<ScoreMatrix> {
    if m.n_cols() >= 2 && ascending_ids(&m.video_ids) {
        return normalize_rows_fast(m, method);
    }
    normalize_rows_lists(m, method)
}

/// Per-list path for arbitrary column orders (and the reference the fast
/// path is tested against).
fn normalize_rows_lists(m: &ScoreMatrix, method: NormMethod) -> Result<ScoreMatrix> {
    let mut values = Vec::with_capacity(m.values.len());
    for i in 0..m.n_rows() {
        let normalized = normalize_scores(&m.row_scores(i, "norm"), method)?;
        for id in &m.video_ids {
            values.push(normalized.get(id).expect("normalization preserves ids"));
        }
    }
    ScoreMatrix::new(m.row_names.clone(), m.video_ids.clone(), values)
}

/// Equivalent of [`normalize_rows_lists`] on slices, skipping the per-row
/// score-list round trip; requires ascending columns so that the stable
/// sort reproduces the ranked-list tie-break.
fn normalize_rows_fast(m: &ScoreMatrix, method: NormMethod) -> Result<ScoreMatrix> {
    let cols = m.n_cols();
    let mut values = Vec::with_capacity(m.values.len());
    let mut order: Vec<u32> = Vec::with_capacity(cols);
    for i in 0..m.n_rows() {
        let row = m.row(i);
        match method {
            NormMethod::Zscore => {
                let n = cols as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
                let std = var.sqrt();
                values.extend(
                    row.iter().map(|&s| if std > 0.0 { (s - mean) / std } else { 0.0 }),
                );
            }
            NormMethod::Minmax => {
                let min = row.iter().copied().fold(f64::INFINITY, f64::min);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let range = max - min;
                values.extend(
                    row.iter().map(|&s| if range > 0.0 { (s - min) / range } else { 0.0 }),
                );
            }
            NormMethod::Rank => {
                order.clear();
                order.extend(0..cols as u32);
                order.sort_by(|&a, &b| {
                    row[b as usize].partial_cmp(&row[a as usize]).expect("scores are finite")
                });
                let n = cols as f64;
                let start = values.len();
                values.resize(start + cols, 0.0);
                for (r, &c) in order.iter().enumerate() {
                    values[start + c as usize] = 1.0 - r as f64 / (n - 1.0);
                }
            }
        }
    }
    ScoreMatrix::new(m.row_names.clone(), m.video_ids.clone(), values)
}

/// Appends a rank-normalized companion row (`name:rank`) for every row.
pub fn rank_augment(m: &ScoreMatrix) -> Result<ScoreMatrix> {
    let companions = normalize_rows(m, NormMethod::Rank)?;
    let mut names = m.row_names.clone();
    names.extend(m.row_names.iter().map(|n| format!("{n}:rank")));
    let mut values = m.values.clone();
    values.extend_from_slice(&companions.values);
    ScoreMatrix::new(names, m.video_ids.clone(), values)
}

/// Output of [`pca_tree_cluster`]: the essential (leaf-mean) rows plus which
/// input rows fell into each leaf, in emission order.
#[derive(Clone, Debug)]
pub struct PcaTreeResult {
    pub essentials: ScoreMatrix,
    pub leaves: Vec<Vec<usize>>,
}

/// Recursively splits the set of rows at the median of their projections
/// onto the subset's first principal component, stopping at `leaf_size`
/// rows or `max_depth`; each leaf contributes its mean row ("essential
/// feature"). Duplicated or highly redundant rows collapse into shared
/// leaves, so the essentials form a cleaner, smaller basis than the input.
pub fn pca_tree_cluster(m: &ScoreMatrix, leaf_size: usize, max_depth: usize) -> Result<PcaTreeResult> {
    if leaf_size == 0 {
        return Err(Error::Config("leaf_size must be ≥ 1".into()));
    }
    let mut leaves: Vec<Vec<usize>> = Vec::new();
    split_rows(m, (0..m.n_rows()).collect(), leaf_size, max_depth, 0, &mut leaves);
    let cols = m.n_cols();
    let mut values = Vec::with_capacity(leaves.len() * cols);
    let mut names = Vec::with_capacity(leaves.len());
    for (li, members) in leaves.iter().enumerate() {
        names.push(format!("essential:{li}"));
        for c in 0..cols {
            let sum: f64 = members.iter().map(|&r| m.row(r)[c]).sum();
            values.push(sum / members.len() as f64);
        }
    }
    let essentials = ScoreMatrix::new(names, m.video_ids.clone(), values)?;
    Ok(PcaTreeResult { essentials, leaves })
}

fn split_rows(
    m: &ScoreMatrix,
    subset: Vec<usize>,
    leaf_size: usize,
    max_depth: usize,
    depth: usize,
    leaves: &mut Vec<Vec<usize>>,
) {
    if subset.len() <= leaf_size || depth >= max_depth {
        leaves.push(subset);
        return;
    }
    let rows: Vec<&[f64]> = subset.iter().map(|&r| m.row(r)).collect();
    let dir = match crate::linalg::first_principal_direction(&rows) {
        Some(d) => d,
        None => {
            // No variance among the rows — nothing to split on.
            leaves.push(subset);
            return;
        }
    };
    let cols = m.n_cols();
    let mut mean = vec![0.0f64; cols];
    for r in &rows {
        for (mv, &v) in mean.iter_mut().zip(*r) {
            *mv += v;
        }
    }
    for mv in &mut mean {
        *mv /= rows.len() as f64;
    }
    let proj: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).zip(&dir).map(|((&v, &mu), &d)| (v - mu) * d).sum())
        .collect();
    let mut sorted = proj.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[(sorted.len() - 1) / 2];
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (local, &row) in subset.iter().enumerate() {
        if proj[local] <= median {
            left.push(row);
        } else {
            right.push(row);
        }
    }
    if left.is_empty() || right.is_empty() {
        leaves.push(subset);
        return;
    }
    split_rows(m, left, leaf_size, max_depth, depth + 1, leaves);
    split_rows(m, right, leaf_size, max_depth, depth + 1, leaves);
}

/// Per-row fusion weights produced by one strategy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusionWeights {
    pub weights: Vec<f64>,
    pub strategy: String,
}

/// The four weighting strategies blended by the multistage fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyKind {
    /// Uniform weights.
    Average,
    /// Weight each row by its own held-out average precision.
    SingleAp,
    /// Weight each row by how much removing it hurts average fusion
    /// (leave-one-out delta, clamped at zero).
    Loo,
    /// Ascend a smoothed average precision with weights kept on the
    /// probability simplex.
    SgdAp,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Average => "average",
            StrategyKind::SingleAp => "single_ap",
            StrategyKind::Loo => "loo",
            StrategyKind::SgdAp => "sgd_ap",
        }
    }

    pub fn all() -> Vec<StrategyKind> {
        vec![StrategyKind::Average, StrategyKind::SingleAp, StrategyKind::Loo, StrategyKind::SgdAp]
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(StrategyKind::Average),
            "single_ap" => Ok(StrategyKind::SingleAp),
            "loo" => Ok(StrategyKind::Loo),
            "sgd_ap" => Ok(StrategyKind::SgdAp),
            other => Err(Error::Config(format!("unknown fusion strategy '{other}'"))),
        }
    }
}

fn ap_of_weighted_sum(
    m: &ScoreMatrix,
    weights: &[f64],
    positives: &BTreeSet<VideoId>,
) -> Result<f64> {
    let scores = weighted_row_sum(m, weights, "fused", "fused")?;
    average_precision(&to_ranked_list(&scores), positives)
}

/// Scores candidate weight vectors against the held-out positives. On
/// matrices whose columns ascend by id, the AP comes from a stable index
/// sort — exactly the ranked-list tie-break — with no per-candidate
/// allocation; other column orders take the score-list path.
struct WeightScorer<'a> {
    m: &'a ScoreMatrix,
    positives: &'a BTreeSet<VideoId>,
    is_pos: Vec<bool>,
    fast: bool,
    scores: Vec<f64>,
    order: Vec<u32>,
}

impl<'a> WeightScorer<'a> {
    fn new(m: &'a ScoreMatrix, positives: &'a BTreeSet<VideoId>) -> WeightScorer<'a> {
        WeightScorer {
            m,
            positives,
            is_pos: m.video_ids.iter().map(|id| positives.contains(id)).collect(),
            fast: ascending_ids(&m.video_ids),
            scores: vec![0.0; m.n_cols()],
            order: Vec::with_capacity(m.n_cols()),
        }
    }

    /// AP of one row of the matrix.
    fn row_ap(&mut self, r: usize) -> Result<f64> {
        if !self.fast {
            return average_precision(
                &to_ranked_list(&self.m.row_scores(r, "w")),
                self.positives,
            );
        }
        self.scores.copy_from_slice(self.m.row(r));
        self.sorted_ap()
    }

    /// AP of the fused row `Σ_k w_k · row_k`.
    fn weighted_ap(&mut self, weights: &[f64]) -> Result<f64> {
        if !self.fast {
            return ap_of_weighted_sum(self.m, weights, self.positives);
        }
        for c in 0..self.scores.len() {
            self.scores[c] = weights.iter().enumerate().map(|(r, &w)| w * self.m.row(r)[c]).sum();
        }
        self.sorted_ap()
    }

    fn sorted_ap(&mut self) -> Result<f64> {
        if self.positives.is_empty() {
            return Err(Error::Data("no positives".into()));
        }
        let present = self.is_pos.iter().filter(|&&p| p).count();
        if present != self.positives.len() {
            // Cold path: reproduce the exact missing-positive diagnostic.
            let cols: BTreeSet<&VideoId> = self.m.video_ids.iter().collect();
            for p in self.positives {
                if !cols.contains(p) {
                    return Err(Error::Data(format!(
                        "positive {p} missing from ranked collection"
                    )));
                }
            }
        }
        let (order, scores) = (&mut self.order, &self.scores);
        order.clear();
        order.extend(0..scores.len() as u32);
        order.sort_by(|&a, &b| {
            scores[b as usize].partial_cmp(&scores[a as usize]).expect("scores are finite")
        });
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (k, &c) in order.iter().enumerate() {
            if self.is_pos[c as usize] {
                hits += 1;
                sum += hits as f64 / (k + 1) as f64;
            }
        }
        Ok(sum / self.positives.len() as f64)
    }
}

/// Fuses rows into one score list: `score(video) = Σ_k w_k · row_k(video)`.
pub fn weighted_row_sum(
    m: &ScoreMatrix,
    weights: &[f64],
    event_id: &str,
    source: &str,
) -> Result<ScoreList> {
    if weights.len() != m.n_rows() {
        return Err(Error::Data(format!(
            "{} weights for {} rows",
            weights.len(),
            m.n_rows()
        )));
    }
    let mut out = ScoreList::new(event_id, source);
    for (c, id) in m.video_ids.iter().enumerate() {
        let s: f64 = weights.iter().enumerate().map(|(r, &w)| w * m.row(r)[c]).sum();
        out.insert(id.clone(), s);
    }
    Ok(out)
}

fn normalize_weights(mut w: Vec<f64>, strategy: &str) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        log::warn!("{strategy}: all weights zero, falling back to uniform");
        let u = 1.0 / w.len() as f64;
        return vec![u; w.len()];
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Smoothing temperature for the differentiable average precision.
const SGD_AP_BETA: f64 = 10.0;
const SGD_AP_LR: f64 = 0.05;
const SGD_AP_EPOCHS: usize = 200;
/// Ascent stops once no weight moves more than this in an epoch.
const SGD_AP_TOL: f64 = 1e-7;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Differentiable surrogate for average precision: the rank indicator
/// `[s_j > s_i]` becomes a logistic `σ(β(s_j − s_i))`.
pub fn smoothed_ap(scores: &[f64], is_pos: &[bool]) -> f64 {
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| is_pos[i]).collect();
    let r = pos.len() as f64;
    let mut total = 0.0;
    for &p in &pos {
        let mut num = 1.0;
        let mut den = 1.0;
        for j in 0..scores.len() {
            if j == p {
                continue;
            }
            let s = sigmoid(SGD_AP_BETA * (scores[j] - scores[p]));
            den += s;
            if is_pos[j] {
                num += s;
            }
        }
        total += num / den;
    }
    total / r
}

/// Analytic gradient of [`smoothed_ap`] with respect to the scores.
fn smoothed_ap_score_gradient(scores: &[f64], is_pos: &[bool]) -> Vec<f64> {
    let n = scores.len();
    let pos: Vec<usize> = (0..n).filter(|&i| is_pos[i]).collect();
    let r = pos.len() as f64;
    let mut grad = vec![0.0f64; n];
    for &p in &pos {
        let mut num = 1.0;
        let mut den = 1.0;
        let mut sig = vec![0.0f64; n];
        let mut dsig = vec![0.0f64; n];
        for j in 0..n {
            if j == p {
                continue;
            }
            let s = sigmoid(SGD_AP_BETA * (scores[j] - scores[p]));
            sig[j] = s;
            dsig[j] = SGD_AP_BETA * s * (1.0 - s);
            den += s;
            if is_pos[j] {
                num += s;
            }
        }
        let den2 = den * den;
        // ∂(num/den)/∂s_j for j ≠ p, and the balancing term for j = p.
        let mut dp = 0.0;
        for j in 0..n {
            if j == p {
                continue;
            }
            let dn = if is_pos[j] { dsig[j] } else { 0.0 };
            grad[j] += (dn * den - num * dsig[j]) / den2;
            let dn_p = if is_pos[j] { -dsig[j] } else { 0.0 };
            dp += (dn_p * den - num * (-dsig[j])) / den2;
        }
        grad[p] += dp;
    }
    for g in &mut grad {
        *g /= r;
    }
    grad
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(w: &mut [f64]) {
    let mut u: Vec<f64> = w.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut rho = 0usize;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        css += uj;
        let t = (css - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            rho = j + 1;
            tau = t;
        }
    }
    debug_assert!(rho > 0);
    for v in w.iter_mut() {
        *v = (*v - tau).max(0.0);
    }
}

fn sgd_ap_weights(m: &ScoreMatrix, positives: &BTreeSet<VideoId>) -> Vec<f64> {
    let rows = m.n_rows();
    let cols = m.n_cols();
    let is_pos: Vec<bool> = m.video_ids.iter().map(|id| positives.contains(id)).collect();
    let mut w = vec![1.0 / rows as f64; rows];
    let mut scores = vec![0.0f64; cols];
    for _ in 0..SGD_AP_EPOCHS {
        for (c, s) in scores.iter_mut().enumerate() {
            *s = (0..rows).map(|r| w[r] * m.row(r)[c]).sum();
        }
        let g_scores = smoothed_ap_score_gradient(&scores, &is_pos);
        let before = w.clone();
        for (r, wr) in w.iter_mut().enumerate() {
            let g: f64 = g_scores.iter().zip(m.row(r)).map(|(&g, &v)| g * v).sum();
            *wr += SGD_AP_LR * g;
        }
        project_simplex(&mut w);
        let step =
            w.iter().zip(&before).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        if step < SGD_AP_TOL {
            break;
        }
    }
    w
}

/// Computes one strategy's weight vector over the rows of `m`, normalized
/// to sum to one.
pub fn strategy_weights(
    m: &ScoreMatrix,
    positives: &BTreeSet<VideoId>,
    strategy: StrategyKind,
) -> Result<FusionWeights> {
    if !m.video_ids.iter().any(|id| positives.contains(id)) {
        return Err(Error::Data("no positives among the held-out videos".into()));
    }
    let rows = m.n_rows();
    let mut scorer = WeightScorer::new(m, positives);
    let weights = match strategy {
        StrategyKind::Average => vec![1.0 / rows as f64; rows],
        StrategyKind::SingleAp => {
            let mut w = Vec::with_capacity(rows);
            for i in 0..rows {
                w.push(scorer.row_ap(i)?);
            }
            normalize_weights(w, "single_ap")
        }
        StrategyKind::Loo => {
            let uniform = vec![1.0; rows];
            let base = scorer.weighted_ap(&uniform)?;
            let mut w = Vec::with_capacity(rows);
            for i in 0..rows {
                let mut wo: Vec<f64> = uniform.clone();
                wo[i] = 0.0;
                let ap = scorer.weighted_ap(&wo)?;
                w.push((base - ap).max(0.0));
            }
            normalize_weights(w, "loo")
        }
        StrategyKind::SgdAp => normalize_weights(sgd_ap_weights(m, positives), "sgd_ap"),
    };
    Ok(FusionWeights { weights, strategy: strategy.as_str().to_string() })
}

/// Configuration of the multistage fusion pipeline. The `rank_stage` and
/// `clustering` switches exist for ablations.
#[derive(Clone, Debug)]
pub struct MhlfConfig {
    pub leaf_size: usize,
    pub max_depth: usize,
    pub strategies: Vec<StrategyKind>,
    pub normalization: NormMethod,
    pub rank_stage: bool,
    pub clustering: bool,
}

impl Default for MhlfConfig {
    fn default() -> Self {
        MhlfConfig {
            leaf_size: 4,
            max_depth: 6,
            strategies: StrategyKind::all(),
            normalization: NormMethod::Rank,
            rank_stage: true,
            clustering: true,
        }
    }
}

/// Everything the multistage fusion produced for one event.
#[derive(Clone, Debug)]
pub struct MhlfOutcome {
    pub ranked: RankedList,
    pub report: FusionReport,
}

/// Per-event fusion report.
#[derive(Clone, Debug, Serialize)]
pub struct FusionReport {
    pub event_id: String,
    /// Row names at each pipeline stage.
    pub stage_row_names: BTreeMap<String, Vec<String>>,
    /// Strategy name → weight vector over the joint rows.
    pub strategy_weights: BTreeMap<String, Vec<f64>>,
    /// Mean of the strategy weight vectors.
    pub final_weights: Vec<f64>,
    /// AP of the fused held-out scores under the final weights.
    pub held_out_ap: f64,
}

pub fn write_fusion_report(path: &Path, report: &FusionReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("cannot serialize fusion report: {e}")))?;
    crate::model::write_atomic(path, json.as_bytes())
}

fn check_same_rows(train: &ScoreMatrix, test: &ScoreMatrix) -> Result<()> {
    if train.row_names != test.row_names {
        return Err(Error::Data(
            "train and test score matrices have different sources".into(),
        ));
    }
    Ok(())
}

/// Drops rows whose (train, test) value pairs are bit-identical to an
/// earlier row, so duplicated sources cannot dominate the weighting.
fn dedup_rows(train: &ScoreMatrix, test: &ScoreMatrix) -> Result<(ScoreMatrix, ScoreMatrix)> {
    let mut seen: BTreeSet<Vec<u64>> = BTreeSet::new();
    let mut keep = Vec::new();
    for i in 0..train.n_rows() {
        let key: Vec<u64> = train
            .row(i)
            .iter()
            .chain(test.row(i))
            .map(|v| v.to_bits())
            .collect();
        if seen.insert(key) {
            keep.push(i);
        }
    }
    if keep.len() == train.n_rows() {
        return Ok((train.clone(), test.clone()));
    }
    let take = |m: &ScoreMatrix| -> Result<ScoreMatrix> {
        let names: Vec<String> = keep.iter().map(|&i| m.row_names[i].clone()).collect();
        let mut values = Vec::with_capacity(keep.len() * m.n_cols());
        for &i in &keep {
            values.extend_from_slice(m.row(i));
        }
        ScoreMatrix::new(names, m.video_ids.clone(), values)
    };
    Ok((take(train)?, take(test)?))
}

fn append_rows(a: &ScoreMatrix, b: &ScoreMatrix) -> Result<ScoreMatrix> {
    let mut names = a.row_names.clone();
    names.extend(b.row_names.iter().cloned());
    let mut values = a.values.clone();
    values.extend_from_slice(&b.values);
    ScoreMatrix::new(names, a.video_ids.clone(), values)
}

/// Multistage fusion: normalize rows, collapse duplicates, append rank
/// companions, append PCA-tree essential features, learn one weight vector
/// per strategy on the held-out labels, average the strategies, and apply
/// the final weights to the test matrix.
pub fn mhlf_fuse(
    train: &ScoreMatrix,
    positives: &BTreeSet<VideoId>,
    test: &ScoreMatrix,
    config: &MhlfConfig,
    event_id: &str,
) -> Result<MhlfOutcome> {
    check_same_rows(train, test)?;
    if config.strategies.is_empty() {
        return Err(Error::Config("no fusion strategies enabled".into()));
    }
    let mut tr = normalize_rows(train, config.normalization)?;
    let mut te = normalize_rows(test, config.normalization)?;
    let mut stage_row_names = BTreeMap::new();
    stage_row_names.insert("normalized".to_string(), tr.row_names.clone());
    if config.clustering {
        let (dtr, dte) = dedup_rows(&tr, &te)?;
        tr = dtr;
        te = dte;
    }
    if config.rank_stage {
        tr = rank_augment(&tr)?;
        te = rank_augment(&te)?;
    }
    stage_row_names.insert("augmented".to_string(), tr.row_names.clone());
    let (joint_tr, joint_te) = if config.clustering {
        let tree = pca_tree_cluster(&tr, config.leaf_size, config.max_depth)?;
        // Build the matching essential rows on the test side from the same
        // leaf memberships.
        let cols = te.n_cols();
        let mut values = Vec::with_capacity(tree.leaves.len() * cols);
        for members in &tree.leaves {
            for c in 0..cols {
                let sum: f64 = members.iter().map(|&r| te.row(r)[c]).sum();
                values.push(sum / members.len() as f64);
            }
        }
        let te_essentials = ScoreMatrix::new(
            tree.essentials.row_names.clone(),
            te.video_ids.clone(),
            values,
        )?;
        (append_rows(&tr, &tree.essentials)?, append_rows(&te, &te_essentials)?)
    } else {
        (tr, te)
    };
    stage_row_names.insert("joint".to_string(), joint_tr.row_names.clone());

    let mut per_strategy = BTreeMap::new();
    let rows = joint_tr.n_rows();
    let mut final_weights = vec![0.0f64; rows];
    for &strategy in &config.strategies {
        let fw = strategy_weights(&joint_tr, positives, strategy)?;
        for (acc, &w) in final_weights.iter_mut().zip(&fw.weights) {
            *acc += w;
        }
        per_strategy.insert(fw.strategy.clone(), fw.weights);
    }
    for w in &mut final_weights {
        *w /= config.strategies.len() as f64;
    }
    let held_out_scores = weighted_row_sum(&joint_tr, &final_weights, event_id, "mhlf")?;
    let held_out_ap = average_precision(&to_ranked_list(&held_out_scores), positives)?;
    let fused = weighted_row_sum(&joint_te, &final_weights, event_id, "mhlf")?;
    Ok(MhlfOutcome {
        ranked: to_ranked_list(&fused),
        report: FusionReport {
            event_id: event_id.to_string(),
            stage_row_names,
            strategy_weights: per_strategy,
            final_weights,
            held_out_ap,
        },
    })
}

/// Baseline fusion methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMethod {
    Average,
    Linreg,
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(BaselineMethod::Average),
            "linreg" => Ok(BaselineMethod::Linreg),
            other => Err(Error::Config(format!("unknown baseline fusion '{other}'"))),
        }
    }
}

/// Ridge weights over rows-as-features for the linear-regression baseline:
/// every held-out video is a sample whose features are the normalized row
/// scores. λ is selected by 3-fold cross-validated AP. Weights may be
/// negative.
pub fn linreg_weights(
    train: &ScoreMatrix,
    positives: &BTreeSet<VideoId>,
) -> Result<(Vec<f64>, f64)> {
    let cols = train.n_cols();
    let rows = train.n_rows();
    let mut values = Vec::with_capacity(cols * rows);
    for c in 0..cols {
        for r in 0..rows {
            values.push(train.row(r)[c] as f32);
        }
    }
    let x = crate::model::FeatureMatrix::new(
        "fusion-rows",
        train.video_ids.clone(),
        values,
        rows,
    )?;
    let y: Vec<f64> = train
        .video_ids
        .iter()
        .map(|id| if positives.contains(id) { 1.0 } else { -1.0 })
        .collect();
    if !y.iter().any(|&v| v > 0.0) {
        return Err(Error::Data("no positives among the held-out videos".into()));
    }
    // 3-fold CV over sorted ids, stratified by label.
    let folds = 3usize;
    let mut fold_of = vec![0usize; cols];
    let mut pos_seen = 0usize;
    let mut neg_seen = 0usize;
    for (i, &label) in y.iter().enumerate() {
        if label > 0.0 {
            fold_of[i] = pos_seen % folds;
            pos_seen += 1;
        } else {
            fold_of[i] = neg_seen % folds;
            neg_seen += 1;
        }
    }
    let mut best: Option<(f64, f64)> = None; // (ap, λ)
    for &lambda in &crate::learn::default_lambda_grid() {
        let mut held = ScoreList::new("cv", "linreg");
        for fold in 0..folds {
            let tr_ids: Vec<VideoId> = (0..cols)
                .filter(|&i| fold_of[i] != fold)
                .map(|i| x.video_ids[i].clone())
                .collect();
            let tr_y: Vec<f64> =
                (0..cols).filter(|&i| fold_of[i] != fold).map(|i| y[i]).collect();
            if !tr_y.iter().any(|&v| v > 0.0) || !tr_y.iter().any(|&v| v < 0.0) {
                continue;
            }
            let tr_x = x.select(&tr_ids)?;
            let weights = vec![1.0; tr_y.len()];
            let model = crate::learn::weighted_ridge_train(&tr_x, &tr_y, &weights, lambda, "cv")?;
            for i in (0..cols).filter(|&i| fold_of[i] == fold) {
                let s: f64 = x
                    .row(i)
                    .iter()
                    .zip(&model.w)
                    .map(|(&a, &w)| f64::from(a) * w)
                    .sum::<f64>()
                    + model.b;
                held.try_insert(x.video_ids[i].clone(), s)?;
            }
        }
        let ap = average_precision(&to_ranked_list(&held), positives)?;
        if best.map_or(true, |(b_ap, _)| ap > b_ap) {
            best = Some((ap, lambda));
        }
    }
    let (_, lambda) = best.expect("nonempty λ grid");
    let weights = vec![1.0; cols];
    let model = crate::learn::weighted_ridge_train(&x, &y, &weights, lambda, "fusion")?;
    Ok((model.w, model.b))
}

/// Average or linear-regression fusion over normalized rows.
pub fn baseline_fuse(
    train: &ScoreMatrix,
    positives: &BTreeSet<VideoId>,
    test: &ScoreMatrix,
    method: BaselineMethod,
    event_id: &str,
) -> Result<RankedList> {
    check_same_rows(train, test)?;
    let tr = normalize_rows(train, NormMethod::Rank)?;
    let te = normalize_rows(test, NormMethod::Rank)?;
    match method {
        BaselineMethod::Average => {
            let w = vec![1.0 / te.n_rows() as f64; te.n_rows()];
            let fused = weighted_row_sum(&te, &w, event_id, "average")?;
            Ok(to_ranked_list(&fused))
        }
        BaselineMethod::Linreg => {
            let (w, b) = linreg_weights(&tr, positives)?;
            let mut fused = ScoreList::new(event_id, "linreg");
            for (c, id) in te.video_ids.iter().enumerate() {
                let s: f64 = w.iter().enumerate().map(|(r, &wr)| wr * te.row(r)[c]).sum::<f64>() + b;
                fused.insert(id.clone(), s);
            }
            Ok(to_ranked_list(&fused))
        }
    }
}
