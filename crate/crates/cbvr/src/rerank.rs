//! Pseudo-relevance-feedback reranking: take the top of an initial ranked
//! list as pseudo-positives and a seeded sample of the bottom half as
//! pseudo-negatives, fit weighted regressors per feature, and let a
//! self-paced weighting scheme decide how much each pseudo-labeled sample
//! counts, easiest (lowest-loss) samples first. The final list optionally
//! blends the reranked scores back with the initial ranking.

use crate::learn::{predict_scores, weighted_ridge_train};
use crate::model::{
    average_precision, normalize_scores, to_ranked_list, FeatureMatrix, NormMethod, RankedList,
    ScoreList, VideoId,
};
use crate::{derive_seed, Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

/// Ridge strength of the per-feature model step (fixed; model selection
/// here would leak the pseudo-labels' noise into the schedule).
const MODEL_STEP_LAMBDA: f64 = 1.0;

/// Self-paced weighting schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SparScheme {
    /// v = 1 if ℓ < λ₁, else 0.
    Binary,
    /// Soft weighting with ζ = λ₁λ₂/(λ₁−λ₂):
    /// v = 1 for ℓ ≤ λ₂, v = 0 for ℓ ≥ λ₁, else ζ/ℓ − ζ/λ₁.
    Mixture,
}

impl SparScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            SparScheme::Binary => "binary",
            SparScheme::Mixture => "mixture",
        }
    }
}

impl std::str::FromStr for SparScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(SparScheme::Binary),
            "mixture" => Ok(SparScheme::Mixture),
            other => Err(Error::Config(format!("unknown self-paced scheme '{other}'"))),
        }
    }
}

/// How to combine the reranked list with the initial list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlendMode {
    Average,
    None,
}

impl BlendMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BlendMode::Average => "average",
            BlendMode::None => "none",
        }
    }
}

impl std::str::FromStr for BlendMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(BlendMode::Average),
            "none" => Ok(BlendMode::None),
            other => Err(Error::Config(format!("unknown blend mode '{other}'"))),
        }
    }
}

/// Configuration of the rerank loop.
#[derive(Clone, Debug)]
pub struct PrfConfig {
    pub k_pos: usize,
    pub k_neg: usize,
    /// Outer iterations; capped at 2.
    pub iterations: usize,
    pub scheme: SparScheme,
    pub blend: BlendMode,
    /// Percentiles of the current losses used as (λ₁, λ₂) per iteration.
    /// The schedule grows so later iterations admit harder samples.
    pub lambda_percentiles: Vec<(f64, f64)>,
    /// Explicit (λ₁, λ₂) per iteration, overriding the percentile schedule
    /// (used by reductions and ablations).
    pub lambda_override: Option<Vec<(f64, f64)>>,
}

impl Default for PrfConfig {
    fn default() -> Self {
        PrfConfig {
            k_pos: 10,
            k_neg: 50,
            iterations: 2,
            scheme: SparScheme::Mixture,
            blend: BlendMode::Average,
            lambda_percentiles: vec![(90.0, 60.0), (95.0, 70.0)],
            lambda_override: None,
        }
    }
}

impl PrfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.iterations > 2 {
            return Err(Error::Config(format!(
                "iterations must be 1 or 2, got {}",
                self.iterations
            )));
        }
        if self.k_pos == 0 {
            return Err(Error::Config("k_pos must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Pseudo-labels picked from a ranked list.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    /// Top-ranked videos, in rank order.
    pub positives: Vec<VideoId>,
    /// Sampled low-ranked videos, in rank order.
    pub negatives: Vec<VideoId>,
}

/// Picks starting pseudo-labels: the top `k_pos` videos are positive and
/// `k_neg` videos sampled uniformly (seeded) from the bottom half are
/// negative. The sets are disjoint by construction.
pub fn mmprf_init(
    initial: &RankedList,
    k_pos: usize,
    k_neg: usize,
    seed: u64,
) -> Result<PseudoLabels> {
    let n = initial.len();
    if n < k_pos + k_neg {
        return Err(Error::Data(format!(
            "collection of {n} videos is too small for k_pos={k_pos} + k_neg={k_neg}"
        )));
    }
    let entries = initial.entries();
    let positives: Vec<VideoId> = entries[..k_pos].iter().map(|(id, _)| id.clone()).collect();
    let bottom_start = (n / 2).max(k_pos);
    let pool = n - bottom_start;
    if pool < k_neg {
        return Err(Error::Data(format!(
            "bottom half has only {pool} videos, need k_neg={k_neg}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, pool, k_neg).into_vec();
    picks.sort_unstable();
    let negatives: Vec<VideoId> = picks
        .into_iter()
        .map(|i| entries[bottom_start + i].0.clone())
        .collect();
    Ok(PseudoLabels { positives, negatives })
}

/// Closed-form self-paced weights for the given losses. A sample's weight
/// falls with its loss: easy (low-loss) samples get full weight, hard ones
/// are discounted or dropped.
pub fn spar_weights(
    losses: &[f64],
    lambda1: f64,
    lambda2: f64,
    scheme: SparScheme,
) -> Result<Vec<f64>> {
    if losses.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::Data("losses must be finite and nonnegative".into()));
    }
    match scheme {
        SparScheme::Binary => {
            if lambda1 <= 0.0 {
                return Err(Error::Config("binary scheme needs λ₁ > 0".into()));
            }
            Ok(losses.iter().map(|&l| if l < lambda1 { 1.0 } else { 0.0 }).collect())
        }
        SparScheme::Mixture => {
            if !(lambda1 > lambda2 && lambda2 > 0.0) {
                return Err(Error::Config(format!(
                    "mixture scheme needs λ₁ > λ₂ > 0, got λ₁={lambda1}, λ₂={lambda2}"
                )));
            }
            let zeta = lambda1 * lambda2 / (lambda1 - lambda2);
            Ok(losses
                .iter()
                .map(|&l| {
                    if l <= lambda2 {
                        1.0
                    } else if l >= lambda1 {
                        0.0
                    } else {
                        zeta / l - zeta / lambda1
                    }
                })
                .collect())
        }
    }
}

/// Self-paced regularizer value f(v); the v-step minimizes `v·ℓ + f(v)`
/// per sample, and [`spar_weights`] is that minimizer in closed form.
fn spar_regularizer(v: f64, lambda1: f64, lambda2: f64, scheme: SparScheme) -> f64 {
    match scheme {
        SparScheme::Binary => -lambda1 * v,
        SparScheme::Mixture => {
            let zeta = lambda1 * lambda2 / (lambda1 - lambda2);
            -zeta * (v + zeta / lambda1).ln()
        }
    }
}

/// One iteration's worth of rerank diagnostics.
#[derive(Clone, Debug, Serialize)]
pub struct RerankTraceEntry {
    pub iteration: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub pseudo_positives: Vec<String>,
    pub pseudo_negatives: Vec<String>,
    /// Count of sample weights per tenth of [0, 1].
    pub weight_histogram: [usize; 10],
    /// Alternating objective after the model step (with the previous
    /// weights) and after the v-step; the v-step may only lower it.
    pub objective_model_step: f64,
    pub objective_v_step: f64,
    /// AP of the current ranking against known relevance, when provided.
    pub ap_if_known: Option<f64>,
}

/// Writes the rerank trace as JSON lines, one entry per iteration.
pub fn write_rerank_trace(path: &Path, trace: &[RerankTraceEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for entry in trace {
        serde_json::to_writer(&mut buf, entry)
            .map_err(|e| Error::Data(format!("cannot serialize trace: {e}")))?;
        buf.write_all(b"\n").expect("vec write");
    }
    crate::model::write_atomic(path, &buf)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// λs from the loss distribution, with fallbacks that keep λ₁ > λ₂ > 0
/// even when many losses tie or vanish.
fn schedule_lambdas(losses: &[f64], p1: f64, p2: f64) -> (f64, f64) {
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut l1 = percentile(&sorted, p1);
    let mut l2 = percentile(&sorted, p2);
    if !(l1 > 0.0) {
        l1 = 1e-6;
    }
    if !(l2 > 0.0) || l2 >= l1 {
        l2 = l1 * 0.5;
    }
    (l1, l2)
}

/// Reranks an initial list by alternating weighted model fits and
/// self-paced weight updates over pseudo-labeled samples; see the module
/// docs. Returns the final list and a per-iteration trace.
pub fn spar_rerank_traced(
    initial: &RankedList,
    features: &[FeatureMatrix],
    config: &PrfConfig,
    seed: u64,
    known_positives: Option<&BTreeSet<VideoId>>,
) -> Result<(RankedList, Vec<RerankTraceEntry>)> {
    config.validate()?;
    if features.is_empty() {
        return Err(Error::Data("no features to rerank with".into()));
    }
    let event_id = &initial.event_id;
    let collection: Vec<VideoId> = initial.entries().iter().map(|(id, _)| id.clone()).collect();
    let subs: Vec<FeatureMatrix> =
        features.iter().map(|f| f.select(&collection)).collect::<Result<_>>()?;

    let mut labels = match mmprf_init(initial, config.k_pos, config.k_neg, derive_seed(seed, "mmprf", 0)) {
        Ok(l) => l,
        Err(e) => return Err(e),
    };
    let iterations = config.iterations.min(2);
    let mut trace = Vec::with_capacity(iterations);
    let mut current: RankedList = initial.clone();
    // Self-paced weights persist across iterations, keyed by video so they
    // survive the pseudo-label refresh; unseen samples start at full weight.
    let mut weight_by_id: std::collections::BTreeMap<VideoId, f64> = std::collections::BTreeMap::new();

    for it in 0..iterations {
        if labels.positives.is_empty() || labels.negatives.is_empty() {
            log::warn!(
                "event {event_id}: degenerate pseudo-labels at iteration {it}; keeping initial list"
            );
            return Ok((initial.clone(), trace));
        }
        let labeled_ids: Vec<VideoId> = labels
            .positives
            .iter()
            .chain(labels.negatives.iter())
            .cloned()
            .collect();
        let y: Vec<f64> = labels
            .positives
            .iter()
            .map(|_| 1.0)
            .chain(labels.negatives.iter().map(|_| -1.0))
            .collect();
        let v: Vec<f64> =
            labeled_ids.iter().map(|id| weight_by_id.get(id).copied().unwrap_or(1.0)).collect();

        // Model step: weighted ridge per feature on the pseudo-labels.
        let mut models = Vec::with_capacity(subs.len());
        let mut ridge_norm2 = 0.0f64;
        for sub in &subs {
            let labeled = sub.select(&labeled_ids)?;
            let model = weighted_ridge_train(&labeled, &y, &v, MODEL_STEP_LAMBDA, event_id)?;
            ridge_norm2 += model.w.iter().map(|w| w * w).sum::<f64>();
            models.push(model);
        }

        // Collection scores: rank-normalized per feature, then averaged.
        let mut avg = ScoreList::new(event_id.clone(), "spar");
        let mut per_feature: Vec<ScoreList> = Vec::with_capacity(models.len());
        for (model, sub) in models.iter().zip(&subs) {
            per_feature.push(normalize_scores(&predict_scores(model, sub)?, NormMethod::Rank)?);
        }
        for id in &collection {
            let s: f64 =
                per_feature.iter().map(|f| f.get(id).expect("normalized over collection")).sum();
            avg.insert(id.clone(), s / per_feature.len() as f64);
        }
        current = to_ranked_list(&avg);

        // Losses: mean squared pseudo-label residual over features.
        let mut losses = vec![0.0f64; labeled_ids.len()];
        for (model, sub) in models.iter().zip(&subs) {
            let labeled = sub.select(&labeled_ids)?;
            let preds = predict_scores(model, &labeled)?;
            for (i, id) in labeled_ids.iter().enumerate() {
                let r = preds.get(id).expect("prediction covers labeled ids") - y[i];
                losses[i] += r * r;
            }
        }
        for l in &mut losses {
            *l /= models.len() as f64;
        }

        let (l1, l2) = match config.lambda_override.as_ref() {
            Some(sched) => sched[it.min(sched.len() - 1)],
            None => {
                let (p1, p2) = config.lambda_percentiles
                    [it.min(config.lambda_percentiles.len() - 1)];
                schedule_lambdas(&losses, p1, p2)
            }
        };

        // Alternating objective bookkeeping with this iteration's λs: the
        // v-step minimizes each sample's v·ℓ + f(v) exactly, so the total
        // may only go down.
        let obj = |vv: &[f64]| -> f64 {
            MODEL_STEP_LAMBDA * ridge_norm2 / models.len() as f64
                + vv.iter()
                    .zip(&losses)
                    .map(|(&vi, &li)| vi * li + spar_regularizer(vi, l1, l2, config.scheme))
                    .sum::<f64>()
        };
        let objective_model_step = obj(&v);
        let v_new = spar_weights(&losses, l1, l2, config.scheme)?;
        let objective_v_step = obj(&v_new);
        if objective_v_step > objective_model_step + 1e-9 {
            return Err(Error::Internal(format!(
                "self-paced objective rose at iteration {it}: {objective_model_step} -> {objective_v_step}"
            )));
        }
        for (id, &w) in labeled_ids.iter().zip(&v_new) {
            weight_by_id.insert(id.clone(), w);
        }

        let mut weight_histogram = [0usize; 10];
        for &w in &v_new {
            let bin = ((w * 10.0) as usize).min(9);
            weight_histogram[bin] += 1;
        }
        let ap_if_known = match known_positives {
            Some(pos) if current.entries().iter().any(|(id, _)| pos.contains(id)) => {
                Some(average_precision(&current, pos)?)
            }
            _ => None,
        };
        trace.push(RerankTraceEntry {
            iteration: it,
            lambda1: l1,
            lambda2: l2,
            pseudo_positives: labels.positives.iter().map(|id| id.to_string()).collect(),
            pseudo_negatives: labels.negatives.iter().map(|id| id.to_string()).collect(),
            weight_histogram,
            objective_model_step,
            objective_v_step,
            ap_if_known,
        });

        // Refresh pseudo-labels from the new ranking for the next pass;
        // carried weights apply wherever a video stays labeled.
        if it + 1 < iterations {
            labels = mmprf_init(
                &current,
                config.k_pos,
                config.k_neg,
                derive_seed(seed, "mmprf", it as u64 + 1),
            )?;
        }
    }

    let final_list = match config.blend {
        BlendMode::Average => blend_final(initial, &current)?,
        BlendMode::None => current,
    };
    Ok((final_list, trace))
}

/// [`spar_rerank_traced`] without diagnostics.
pub fn spar_rerank(
    initial: &RankedList,
    features: &[FeatureMatrix],
    config: &PrfConfig,
    seed: u64,
) -> Result<RankedList> {
    Ok(spar_rerank_traced(initial, features, config, seed, None)?.0)
}

/// Averages the rank-normalized initial and reranked lists.
pub fn blend_final(initial: &RankedList, reranked: &RankedList) -> Result<RankedList> {
    let ids_a: BTreeSet<&VideoId> = initial.entries().iter().map(|(id, _)| id).collect();
    let ids_b: BTreeSet<&VideoId> = reranked.entries().iter().map(|(id, _)| id).collect();
    if ids_a != ids_b {
        return Err(Error::Data("blend inputs cover different collections".into()));
    }
    let norm_a = normalize_scores(&initial.to_score_list("initial"), NormMethod::Rank)?;
    let norm_b = normalize_scores(&reranked.to_score_list("reranked"), NormMethod::Rank)?;
    let mut blended = ScoreList::new(&initial.event_id, "blend");
    for (id, s) in norm_a.iter() {
        blended.insert(id.clone(), 0.5 * (s + norm_b.get(id).expect("same ids")));
    }
    Ok(to_ranked_list(&blended))
}
