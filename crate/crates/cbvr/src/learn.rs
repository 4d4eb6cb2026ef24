//! Event-model training: ridge regression (primal and dual), kernel ridge
//! regression, linear SVM via stochastic subgradient descent, prediction
//! over dense or compressed feature stores, and per-event cross-validated
//! training that also yields leakage-free held-out scores for fusion.

use crate::model::{average_precision, to_ranked_list, FeatureMatrix, ScoreList, VideoId};
use crate::quantize::IndexData;
use crate::scenario::Scenario;
use crate::{derive_seed, Error, Result};
use base64::Engine;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write as _};
use std::path::Path;

/// A trained linear scorer: `score(x) = ⟨w, x⟩ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub feature_name: String,
    pub event_id: String,
    /// Regularization strength the model was trained with.
    pub lambda: f64,
}

impl LinearModel {
    pub fn validate(&self) -> Result<()> {
        if self.w.iter().any(|v| !v.is_finite()) || !self.b.is_finite() {
            return Err(Error::Data("model weights must be finite".into()));
        }
        Ok(())
    }
}

/// Which classifier family to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierKind {
    Krr,
    Svm,
    Both,
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "krr" => Ok(ClassifierKind::Krr),
            "svm" => Ok(ClassifierKind::Svm),
            "both" => Ok(ClassifierKind::Both),
            other => Err(Error::Config(format!("unknown classifier '{other}'"))),
        }
    }
}

/// What to train an event model from.
#[derive(Clone, Debug)]
pub struct TrainSpec {
    pub event_id: String,
    pub positives: BTreeSet<VideoId>,
    pub negatives: BTreeSet<VideoId>,
    pub scenario: Scenario,
    pub classifier: ClassifierKind,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.positives.is_empty() || self.negatives.is_empty() {
            return Err(Error::Data(format!(
                "event {}: training needs both positives and negatives",
                self.event_id
            )));
        }
        if !self.positives.is_disjoint(&self.negatives) {
            return Err(Error::Data(format!(
                "event {}: positive and negative sets overlap",
                self.event_id
            )));
        }
        if self.scenario == Scenario::Ex010 && self.classifier != ClassifierKind::Krr {
            return Err(Error::Config("010Ex requires krr".into()));
        }
        if !self.scenario.uses_exemplars() {
            return Err(Error::Config(format!(
                "scenario {} has no exemplars to train classifiers from",
                self.scenario
            )));
        }
        Ok(())
    }
}

/// Default regularization grid for model selection.
pub fn default_lambda_grid() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3]
}

fn check_labels(y: &[f64]) -> Result<()> {
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Data("labels must be +1 or -1".into()));
    }
    Ok(())
}

/// Trains ridge regression with an unregularized bias: minimizes
/// `Σ (⟨w, x_i⟩ + b − y_i)² + λ‖w‖²`. Solved via centered normal equations,
/// or the equivalent dual when there are fewer rows than dimensions.
pub fn ridge_train(
    x: &FeatureMatrix,
    y: &[f64],
    lambda: f64,
    event_id: &str,
) -> Result<LinearModel> {
    check_labels(y)?;
    let weights = vec![1.0; y.len()];
    weighted_ridge_train(x, y, &weights, lambda, event_id)
}

/// Ridge regression with per-sample weights `v_i ≥ 0` and real-valued
/// targets: minimizes `Σ v_i (⟨w, x_i⟩ + b − y_i)² + λ‖w‖²` with weighted
/// centering for the unregularized bias.
pub fn weighted_ridge_train(
    x: &FeatureMatrix,
    y: &[f64],
    sample_weights: &[f64],
    lambda: f64,
    event_id: &str,
) -> Result<LinearModel> {
    let n = x.n();
    if y.len() != n || sample_weights.len() != n {
        return Err(Error::Data(format!(
            "ridge: {n} rows but {} labels / {} weights",
            y.len(),
            sample_weights.len()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::Config("λ must be nonnegative".into()));
    }
    if sample_weights.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Data("sample weights must be finite and nonnegative".into()));
    }
    let total_w: f64 = sample_weights.iter().sum();
    if total_w <= 0.0 {
        return Err(Error::Data("all sample weights are zero".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("targets must be finite".into()));
    }
    let d = x.d;
    // Weighted means for centering.
    let mut x_mean = vec![0.0f64; d];
    let mut y_mean = 0.0f64;
    for i in 0..n {
        let v = sample_weights[i];
        if v == 0.0 {
            continue;
        }
        for (j, &xv) in x.row(i).iter().enumerate() {
            x_mean[j] += v * f64::from(xv);
        }
        y_mean += v * y[i];
    }
    for m in &mut x_mean {
        *m /= total_w;
    }
    y_mean /= total_w;

    let effective_rows = sample_weights.iter().filter(|&&v| v > 0.0).count();
    let w = if effective_rows < d {
        ridge_dual(x, y, sample_weights, lambda, &x_mean, y_mean)?
    } else {
        ridge_primal(x, y, sample_weights, lambda, &x_mean, y_mean)?
    };
    let b = y_mean - crate::linalg::dot(&w, &x_mean);
    let model = LinearModel {
        w,
        b,
        feature_name: x.feature_name.clone(),
        event_id: event_id.to_string(),
        lambda,
    };
    model.validate()?;
    Ok(model)
}

fn ridge_primal(
    x: &FeatureMatrix,
    y: &[f64],
    v: &[f64],
    lambda: f64,
    x_mean: &[f64],
    y_mean: f64,
) -> Result<Vec<f64>> {
    let (n, d) = (x.n(), x.d);
    // A = Xcᵀ V Xc + λI (upper triangle accumulated, then mirrored),
    // rhs = Xcᵀ V yc.
    let mut a = vec![0.0f64; d * d];
    let mut rhs = vec![0.0f64; d];
    let mut xc = vec![0.0f64; d];
    for i in 0..n {
        let vi = v[i];
        if vi == 0.0 {
            continue;
        }
        for (j, &xv) in x.row(i).iter().enumerate() {
            xc[j] = f64::from(xv) - x_mean[j];
        }
        let yc = y[i] - y_mean;
        for j in 0..d {
            let vj = vi * xc[j];
            rhs[j] += vj * yc;
            for jj in j..d {
                a[j * d + jj] += vj * xc[jj];
            }
        }
    }
    for j in 0..d {
        for jj in (j + 1)..d {
            a[jj * d + j] = a[j * d + jj];
        }
        a[j * d + j] += lambda;
    }
    crate::linalg::solve_spd(&a, d, &rhs)
}

fn ridge_dual(
    x: &FeatureMatrix,
    y: &[f64],
    v: &[f64],
    lambda: f64,
    x_mean: &[f64],
    y_mean: f64,
) -> Result<Vec<f64>> {
    // With X̃ = V^{1/2} Xc and ỹ = V^{1/2} yc, the minimizer of
    // ‖X̃w − ỹ‖² + λ‖w‖² is w = X̃ᵀ (X̃X̃ᵀ + λI)⁻¹ ỹ — an n×n solve.
    let d = x.d;
    let active: Vec<usize> = (0..x.n()).filter(|&i| v[i] > 0.0).collect();
    let m = active.len();
    let rows: Vec<Vec<f64>> = active
        .iter()
        .map(|&i| {
            let s = v[i].sqrt();
            x.row(i)
                .iter()
                .zip(x_mean)
                .map(|(&xv, &mu)| s * (f64::from(xv) - mu))
                .collect()
        })
        .collect();
    let ytil: Vec<f64> = active.iter().map(|&i| v[i].sqrt() * (y[i] - y_mean)).collect();
    let mut gram = vec![0.0f64; m * m];
    for i in 0..m {
        for j in i..m {
            let g = crate::linalg::dot(&rows[i], &rows[j]);
            gram[i * m + j] = g;
            gram[j * m + i] = g;
        }
        gram[i * m + i] += lambda;
    }
    let alpha = crate::linalg::solve_spd(&gram, m, &ytil)?;
    let mut w = vec![0.0f64; d];
    for (i, row) in rows.iter().enumerate() {
        let a = alpha[i];
        for (j, &r) in row.iter().enumerate() {
            w[j] += a * r;
        }
    }
    Ok(w)
}

/// Solves kernel ridge regression: `α = (K + λI)⁻¹ y`. `K` must be
/// symmetric (checked to 1e-8) and positive semidefinite.
pub fn krr_train(k: &[f64], n: usize, y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if k.len() != n * n || y.len() != n {
        return Err(Error::Data("kernel matrix shape mismatch".into()));
    }
    if lambda <= 0.0 {
        return Err(Error::Config("kernel ridge needs λ > 0".into()));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (k[i * n + j] - k[j * n + i]).abs() > 1e-8 {
                return Err(Error::Data(format!(
                    "asymmetric kernel matrix at ({i}, {j})"
                )));
            }
        }
    }
    let mut a = k.to_vec();
    // Symmetrize tiny asymmetries and add the ridge.
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = s;
            a[j * n + i] = s;
        }
        a[i * n + i] += lambda;
    }
    crate::linalg::solve_spd(&a, n, y)
}

/// Predicts from dual coefficients: each row of `k_test` holds the kernel
/// values between one test point and the training points.
pub fn krr_predict(k_test: &[f64], n_train: usize, alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.len() != n_train || k_test.len() % n_train != 0 {
        return Err(Error::Data("test kernel shape mismatch".into()));
    }
    Ok(k_test
        .chunks_exact(n_train)
        .map(|row| crate::linalg::dot(row, alpha))
        .collect())
}

/// Linear SVM objective: `λ/2·‖w‖² + mean hinge loss`.
pub fn svm_objective(x: &FeatureMatrix, y: &[f64], w: &[f64], b: f64, lambda_reg: f64) -> f64 {
    let n = x.n();
    let mut hinge = 0.0f64;
    for i in 0..n {
        let margin = y[i]
            * (x.row(i).iter().zip(w).map(|(&xv, &wv)| f64::from(xv) * wv).sum::<f64>() + b);
        hinge += (1.0 - margin).max(0.0);
    }
    0.5 * lambda_reg * w.iter().map(|v| v * v).sum::<f64>() + hinge / n as f64
}

/// Trains a linear SVM by epoch-shuffled stochastic subgradient descent
/// with step size `1/(λ_reg · t)` (bias updated but not regularized).
pub fn svm_train_sgd(
    x: &FeatureMatrix,
    y: &[f64],
    lambda_reg: f64,
    epochs: usize,
    seed: u64,
    event_id: &str,
) -> Result<LinearModel> {
    let n = x.n();
    if y.len() != n {
        return Err(Error::Data("label count does not match rows".into()));
    }
    check_labels(y)?;
    if lambda_reg <= 0.0 {
        return Err(Error::Config("SVM needs λ_reg > 0".into()));
    }
    let pos = y.iter().filter(|&&v| v > 0.0).count();
    if pos == 0 || pos == n {
        return Err(Error::Data("SVM training needs both classes".into()));
    }
    let d = x.d;
    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut t = 1u64;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let eta = 1.0 / (lambda_reg * t as f64);
            let row = x.row(i);
            let margin = y[i]
                * (row.iter().zip(&w).map(|(&xv, &wv)| f64::from(xv) * wv).sum::<f64>() + b);
            let shrink = 1.0 - eta * lambda_reg;
            for wv in &mut w {
                *wv *= shrink;
            }
            if margin < 1.0 {
                let step = eta * y[i];
                for (wv, &xv) in w.iter_mut().zip(row) {
                    *wv += step * f64::from(xv);
                }
                b += step;
            }
            t += 1;
        }
    }
    let model = LinearModel {
        w,
        b,
        feature_name: x.feature_name.clone(),
        event_id: event_id.to_string(),
        lambda: lambda_reg,
    };
    model.validate()?;
    Ok(model)
}

/// Scores every row of a dense feature matrix: `⟨w, x⟩ + b`.
pub fn predict_scores(model: &LinearModel, x: &FeatureMatrix) -> Result<ScoreList> {
    if x.d != model.w.len() {
        return Err(Error::Data(format!(
            "model expects {} dims, matrix has {}",
            model.w.len(),
            x.d
        )));
    }
    let mut out = ScoreList::new(&model.event_id, &model.feature_name);
    for i in 0..x.n() {
        let s = x
            .row(i)
            .iter()
            .zip(&model.w)
            .map(|(&xv, &wv)| f64::from(xv) * wv)
            .sum::<f64>()
            + model.b;
        out.try_insert(x.video_ids[i].clone(), s)?;
    }
    Ok(out)
}

/// Scores a compressed index: the product-quantized path uses per-subblock
/// lookup tables without decoding; the uniform-quantized path decodes to
/// bin centers first.
pub fn predict_scores_index(model: &LinearModel, index: &IndexData) -> Result<ScoreList> {
    match index {
        IndexData::Pq { codebook, codes } => crate::quantize::pq_dot_scores(
            &model.w,
            model.b,
            codebook,
            codes,
            &model.event_id,
            &model.feature_name,
        ),
        IndexData::Uq { model: uq, codes } => {
            let decoded = crate::quantize::uq_decode(uq, codes)?;
            predict_scores(model, &decoded)
        }
    }
}

/// One trained scorer plus its leakage-free held-out scores.
#[derive(Clone, Debug)]
pub struct TrainedScorer {
    /// Row label for fusion, e.g. `color/krr`.
    pub source: String,
    /// Model refit on all training rows at the selected λ.
    pub model: LinearModel,
    /// Concatenated out-of-fold predictions over the training videos.
    pub held_out: ScoreList,
    /// Cross-validated AP of the held-out predictions at the selected λ.
    pub cv_ap: f64,
}

/// Output of [`train_event`].
#[derive(Clone, Debug)]
pub struct EventTraining {
    pub scorers: Vec<TrainedScorer>,
}

fn fold_assignments(ids: &[&VideoId], folds: usize) -> Vec<usize> {
    // ids are already sorted (BTreeSet order); stratification assigns
    // consecutive sorted ids round-robin so every fold sees each class.
    (0..ids.len()).map(|i| i % folds).collect()
}

/// Trains one event against every feature: selects λ per (feature,
/// classifier) by cross-validated average precision of the concatenated
/// out-of-fold predictions, refits on all training rows, and returns the
/// held-out scores for downstream fusion-weight learning.
///
/// The kernel-ridge path uses the linear kernel, which is solved in primal
/// form (identical predictions, lower cost once features have been through
/// an explicit kernel map).
pub fn train_event(
    features: &[FeatureMatrix],
    spec: &TrainSpec,
    lambda_grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<EventTraining> {
    spec.validate()?;
    if features.is_empty() {
        return Err(Error::Data("no features to train on".into()));
    }
    if lambda_grid.is_empty() {
        return Err(Error::Config("empty λ grid".into()));
    }
    let pos: Vec<&VideoId> = spec.positives.iter().collect();
    let neg: Vec<&VideoId> = spec.negatives.iter().collect();
    let mut folds = folds.max(2);
    if pos.len() < folds {
        folds = pos.len().max(2).min(folds);
        if pos.len() >= 2 {
            folds = pos.len().min(5);
        }
        log::warn!(
            "event {}: only {} positives; reducing to {} folds",
            spec.event_id,
            pos.len(),
            folds
        );
    }
    if pos.len() < 2 {
        return Err(Error::Data(format!(
            "event {}: need at least 2 positives for cross-validation",
            spec.event_id
        )));
    }
    let pos_folds = fold_assignments(&pos, folds);
    let neg_folds = fold_assignments(&neg, folds);
    // Training rows in a fixed order: positives then negatives, each sorted.
    let train_ids: Vec<VideoId> =
        pos.iter().chain(neg.iter()).map(|id| (*id).clone()).collect();
    let labels: Vec<f64> = pos
        .iter()
        .map(|_| 1.0)
        .chain(neg.iter().map(|_| -1.0))
        .collect();
    let fold_of: Vec<usize> = pos_folds.iter().chain(neg_folds.iter()).copied().collect();

    let classifiers: Vec<(&str, ClassifierKind)> = match spec.classifier {
        ClassifierKind::Krr => vec![("krr", ClassifierKind::Krr)],
        ClassifierKind::Svm => vec![("svm", ClassifierKind::Svm)],
        ClassifierKind::Both => {
            vec![("krr", ClassifierKind::Krr), ("svm", ClassifierKind::Svm)]
        }
    };

    let mut scorers = Vec::new();
    for (f_idx, feat) in features.iter().enumerate() {
        let sub = feat.select(&train_ids)?;
        // Fold partitions depend only on the row split, so build each fold's
        // training submatrix once and share it across classifiers and λ.
        let mut splits = Vec::with_capacity(folds);
        for fold in 0..folds {
            let tr_rows: Vec<usize> = (0..sub.n()).filter(|&i| fold_of[i] != fold).collect();
            let te_rows: Vec<usize> = (0..sub.n()).filter(|&i| fold_of[i] == fold).collect();
            let tr_ids: Vec<VideoId> =
                tr_rows.iter().map(|&i| sub.video_ids[i].clone()).collect();
            let tr_x = sub.select(&tr_ids)?;
            let tr_y: Vec<f64> = tr_rows.iter().map(|&i| labels[i]).collect();
            splits.push((tr_x, tr_y, te_rows));
        }
        for (cname, ckind) in &classifiers {
            let mut best: Option<(f64, f64, ScoreList)> = None; // (ap, λ, held-out)
            for (l_idx, &lambda) in lambda_grid.iter().enumerate() {
                let mut held = ScoreList::new(&spec.event_id, format!("{}/{cname}", feat.feature_name));
                for (fold, (tr_x, tr_y, te_rows)) in splits.iter().enumerate() {
                    let model = fit_one(
                        tr_x,
                        tr_y,
                        *ckind,
                        lambda,
                        derive_seed(seed, "cv-fit", (f_idx * 100 + l_idx * 10 + fold) as u64),
                        &spec.event_id,
                    )?;
                    for &i in te_rows {
                        let row = sub.row(i);
                        let s = row
                            .iter()
                            .zip(&model.w)
                            .map(|(&xv, &wv)| f64::from(xv) * wv)
                            .sum::<f64>()
                            + model.b;
                        held.try_insert(sub.video_ids[i].clone(), s)?;
                    }
                }
                let ap = average_precision(&to_ranked_list(&held), &spec.positives)?;
                let better = match &best {
                    None => true,
                    Some((best_ap, _, _)) => ap > *best_ap,
                };
                if better {
                    best = Some((ap, lambda, held));
                }
            }
            let (cv_ap, lambda, held_out) = best.expect("nonempty λ grid");
            let model = fit_one(
                &sub,
                &labels,
                *ckind,
                lambda,
                derive_seed(seed, "final-fit", f_idx as u64),
                &spec.event_id,
            )?;
            scorers.push(TrainedScorer {
                source: format!("{}/{cname}", feat.feature_name),
                model,
                held_out,
                cv_ap,
            });
        }
    }
    Ok(EventTraining { scorers })
}

fn fit_one(
    x: &FeatureMatrix,
    y: &[f64],
    kind: ClassifierKind,
    lambda: f64,
    seed: u64,
    event_id: &str,
) -> Result<LinearModel> {
    match kind {
        ClassifierKind::Krr => ridge_train(x, y, lambda, event_id),
        ClassifierKind::Svm => svm_train_sgd(x, y, lambda, 40, seed, event_id),
        ClassifierKind::Both => Err(Error::Internal("fit_one takes a single classifier".into())),
    }
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    event_id: String,
    feature_name: String,
    b: f64,
    lambda: f64,
    /// Base64 of the weights as little-endian 32-bit floats.
    w: String,
}

/// Writes models as JSON lines, one model per line; weights are stored as
/// base64-encoded little-endian 32-bit floats.
pub fn write_models_jsonl(path: &Path, models: &[LinearModel]) -> Result<()> {
    let mut buf = Vec::new();
    for m in models {
        m.validate()?;
        let mut wbytes = Vec::with_capacity(4 * m.w.len());
        for &v in &m.w {
            wbytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let rec = ModelRecord {
            event_id: m.event_id.clone(),
            feature_name: m.feature_name.clone(),
            b: m.b,
            lambda: m.lambda,
            w: base64::engine::general_purpose::STANDARD.encode(&wbytes),
        };
        serde_json::to_writer(&mut buf, &rec)
            .map_err(|e| Error::Data(format!("cannot serialize model: {e}")))?;
        buf.write_all(b"\n").expect("vec write");
    }
    crate::model::write_atomic(path, &buf)
}

/// Reads a model file written by [`write_models_jsonl`]. Weights come back
/// at 32-bit precision.
pub fn read_models_jsonl(path: &Path) -> Result<Vec<LinearModel>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut models = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ModelRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: bad model record: {e}", path.display(), lineno + 1))
        })?;
        let wbytes = base64::engine::general_purpose::STANDARD
            .decode(rec.w.as_bytes())
            .map_err(|e| Error::Data(format!("bad weight encoding: {e}")))?;
        if wbytes.len() % 4 != 0 {
            return Err(Error::Data("weight bytes not a multiple of 4".into()));
        }
        let w: Vec<f64> = wbytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let model = LinearModel {
            w,
            b: rec.b,
            feature_name: rec.feature_name,
            event_id: rec.event_id,
            lambda: rec.lambda,
        };
        model.validate()?;
        models.push(model);
    }
    Ok(models)
}
