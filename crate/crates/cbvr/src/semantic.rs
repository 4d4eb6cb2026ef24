//! Text-query retrieval: map free-text query words onto the system's
//! concept vocabulary through a word-to-concept similarity matrix, score
//! videos per modality with classical retrieval models over concept
//! detector outputs (visual) and sparse term counts (speech/on-screen
//! text), and fuse the per-modality lists with the query's weights.

use crate::model::{
    normalize_scores, to_ranked_list, write_atomic, FeatureMatrix, NormMethod, RankedList,
    ScoreList, VideoId,
};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

/// BM25 term-frequency saturation.
const BM25_K1: f64 = 1.2;
/// BM25 length normalization.
const BM25_B: f64 = 0.75;
/// Weight on the collection model in Jelinek-Mercer smoothing.
const LM_JM_LAMBDA: f64 = 0.5;

/// Where a concept's evidence comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Asr,
    Ocr,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Asr => "asr",
            Modality::Ocr => "ocr",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" => Ok(Modality::Visual),
            "asr" => Ok(Modality::Asr),
            "ocr" => Ok(Modality::Ocr),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }
}

/// Ordered, unique concept tokens with the modality each belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptVocabulary {
    entries: Vec<(String, Modality)>,
    index: BTreeMap<String, usize>,
}

impl ConceptVocabulary {
    pub fn new(entries: Vec<(String, Modality)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Data("empty concept vocabulary".into()));
        }
        let mut index = BTreeMap::new();
        for (i, (concept, _)) in entries.iter().enumerate() {
            if concept.is_empty() {
                return Err(Error::Data("empty concept token".into()));
            }
            if index.insert(concept.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate concept '{concept}'")));
            }
        }
        Ok(ConceptVocabulary { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Position and modality of a concept, if present.
    pub fn get(&self, concept: &str) -> Option<(usize, Modality)> {
        self.index.get(concept).map(|&i| (i, self.entries[i].1))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Modality)> {
        self.entries.iter().map(|(c, m)| (c.as_str(), *m))
    }

    pub fn concept(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn modality(&self, i: usize) -> Modality {
        self.entries[i].1
    }
}

/// Videos × concepts evidence: detector confidences for visual concepts,
/// term counts for speech/text concepts. Columns follow vocabulary order.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticDocMatrix {
    videos: Vec<VideoId>,
    concepts: Vec<String>,
    modalities: Vec<Modality>,
    /// Row-major, `videos.len() × concepts.len()`.
    values: Vec<f64>,
}

/// How detector confidences enter the retrieval models.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TfMode {
    /// Raw nonnegative scores act as fractional term frequencies.
    Fractional,
    /// Scores at or above the threshold count as frequency 1, others 0.
    Thresholded(f64),
}

impl SemanticDocMatrix {
    pub fn new(
        vocab: &ConceptVocabulary,
        videos: Vec<VideoId>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let c = vocab.len();
        if values.len() != videos.len() * c {
            return Err(Error::Data(format!(
                "document matrix of {} values does not match {} videos × {} concepts",
                values.len(),
                videos.len(),
                c
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data("document matrix values must be finite and ≥ 0".into()));
        }
        Ok(SemanticDocMatrix {
            videos,
            concepts: vocab.iter().map(|(c, _)| c.to_string()).collect(),
            modalities: vocab.iter().map(|(_, m)| m).collect(),
            values,
        })
    }

    /// Builds the matrix from a visual score block plus sparse term counts.
    /// `visual` columns must line up with the vocabulary's visual concepts
    /// in order; sparse terms not in the vocabulary are ignored (documents
    /// carry plenty of out-of-vocabulary noise; only system concepts can
    /// ever be queried).
    pub fn assemble(
        vocab: &ConceptVocabulary,
        videos: &[VideoId],
        visual: Option<&FeatureMatrix>,
        sparse: &[(Modality, Vec<(VideoId, BTreeMap<String, f64>)>)],
    ) -> Result<Self> {
        let c = vocab.len();
        let n = videos.len();
        let row_of: BTreeMap<&VideoId, usize> =
            videos.iter().enumerate().map(|(i, id)| (id, i)).collect();
        let mut values = vec![0.0f64; n * c];
        if let Some(vis) = visual {
            let vis_cols: Vec<usize> = (0..c).filter(|&i| vocab.modality(i) == Modality::Visual).collect();
            if vis.d != vis_cols.len() {
                return Err(Error::Data(format!(
                    "visual block has {} columns but the vocabulary lists {} visual concepts",
                    vis.d,
                    vis_cols.len()
                )));
            }
            for (r, id) in vis.video_ids.iter().enumerate() {
                let Some(&row) = row_of.get(id) else { continue };
                let src = vis.row(r);
                for (j, &col) in vis_cols.iter().enumerate() {
                    values[row * c + col] = src[j] as f64;
                }
            }
        }
        for (modality, rows) in sparse {
            for (id, terms) in rows {
                let Some(&row) = row_of.get(id) else { continue };
                for (term, &count) in terms {
                    if let Some((col, m)) = vocab.get(term) {
                        if m == *modality {
                            values[row * c + col] = count;
                        }
                    }
                }
            }
        }
        SemanticDocMatrix::new(vocab, videos.to_vec(), values)
    }

    pub fn n_videos(&self) -> usize {
        self.videos.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn videos(&self) -> &[VideoId] {
        &self.videos
    }

    /// Raw evidence value for one (video row, concept column).
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.concepts.len() + col]
    }

    fn tf(&self, row: usize, col: usize, mode: TfMode) -> f64 {
        let v = self.values[row * self.concepts.len() + col];
        match mode {
            TfMode::Fractional => v,
            TfMode::Thresholded(t) => {
                if v >= t {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Per-document length (sum of term frequencies) over one modality.
    pub fn doc_lengths(&self, modality: Modality, mode: TfMode) -> Vec<f64> {
        let cols: Vec<usize> = self.modality_columns(modality);
        (0..self.videos.len())
            .map(|r| cols.iter().map(|&c| self.tf(r, c, mode)).sum())
            .collect()
    }

    fn modality_columns(&self, modality: Modality) -> Vec<usize> {
        (0..self.concepts.len()).filter(|&i| self.modalities[i] == modality).collect()
    }
}

/// Query-word × concept similarities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityProvider {
    words: Vec<String>,
    word_index: BTreeMap<String, usize>,
    concepts: Vec<String>,
    /// Row-major, `words.len() × concepts.len()`.
    values: Vec<f64>,
}

impl SimilarityProvider {
    pub fn new(words: Vec<String>, concepts: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != words.len() * concepts.len() {
            return Err(Error::Data("similarity matrix shape mismatch".into()));
        }
        if values.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("similarities must lie in [0, 1]".into()));
        }
        let mut word_index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if word_index.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate similarity row for word '{w}'")));
            }
        }
        Ok(SimilarityProvider { words, word_index, concepts, values })
    }

    /// Similarity of `word` to `concept`; 0 when either is unknown.
    pub fn similarity(&self, word: &str, concept: &str) -> f64 {
        let Some(&w) = self.word_index.get(word) else { return 0.0 };
        match self.concepts.iter().position(|c| c == concept) {
            Some(c) => self.values[w * self.concepts.len() + c],
            None => 0.0,
        }
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    fn row(&self, word: &str) -> Option<&[f64]> {
        let &w = self.word_index.get(word)?;
        let c = self.concepts.len();
        Some(&self.values[w * c..(w + 1) * c])
    }
}

/// A text query mapped onto the concept vocabulary: weighted concepts and
/// the per-modality aggregate weights used for fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticQuery {
    /// `(concept, modality, weight > 0)` in vocabulary order.
    pub terms: Vec<(String, Modality, f64)>,
    /// Sum of term weights per modality.
    pub modality_weights: BTreeMap<Modality, f64>,
}

/// Maps query words to vocabulary concepts: every concept with similarity
/// ≥ τ to some query word is included with that similarity as its weight,
/// and weights from multiple words hitting the same concept are summed.
pub fn sqg_map(
    query_words: &[String],
    provider: &SimilarityProvider,
    vocab: &ConceptVocabulary,
    tau: f64,
) -> Result<SemanticQuery> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("τ must lie in [0, 1], got {tau}")));
    }
    if query_words.is_empty() {
        return Err(Error::Data("empty query".into()));
    }
    let mut weight_by_concept: BTreeMap<usize, f64> = BTreeMap::new();
    for word in query_words {
        let Some(row) = provider.row(word) else { continue };
        for (j, concept) in provider.concepts().iter().enumerate() {
            let sim = row[j];
            if sim >= tau {
                if let Some((idx, _)) = vocab.get(concept) {
                    *weight_by_concept.entry(idx).or_insert(0.0) += sim;
                }
            }
        }
    }
    if weight_by_concept.is_empty() {
        // Name each word's best near-miss so the caller can lower τ or
        // rephrase.
        let misses: Vec<String> = query_words
            .iter()
            .map(|word| match provider.row(word) {
                Some(row) => {
                    let (best_j, best) = row
                        .iter()
                        .enumerate()
                        .fold((0usize, f64::NEG_INFINITY), |acc, (j, &s)| {
                            if s > acc.1 {
                                (j, s)
                            } else {
                                acc
                            }
                        });
                    format!("'{word}' → '{}' at {:.3}", provider.concepts()[best_j], best)
                }
                None => format!("'{word}' → no similarity row"),
            })
            .collect();
        return Err(Error::Data(format!(
            "query outside vocabulary (τ={tau}); nearest misses: {}",
            misses.join(", ")
        )));
    }
    let mut terms = Vec::with_capacity(weight_by_concept.len());
    let mut modality_weights: BTreeMap<Modality, f64> = BTreeMap::new();
    let mut ordered: Vec<(usize, f64)> = weight_by_concept.into_iter().collect();
    ordered.sort_by_key(|(idx, _)| *idx);
    for (idx, weight) in ordered {
        let modality = vocab.modality(idx);
        terms.push((vocab.concept(idx).to_string(), modality, weight));
        *modality_weights.entry(modality).or_insert(0.0) += weight;
    }
    Ok(SemanticQuery { terms, modality_weights })
}

/// Classical retrieval models over the concept document matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetrievalModel {
    Vsm,
    Tfidf,
    Bm25,
    Lm,
}

impl std::str::FromStr for RetrievalModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vsm" => Ok(RetrievalModel::Vsm),
            "tfidf" => Ok(RetrievalModel::Tfidf),
            "bm25" => Ok(RetrievalModel::Bm25),
            "lm" => Ok(RetrievalModel::Lm),
            other => Err(Error::Config(format!("unknown retrieval model '{other}'"))),
        }
    }
}

impl RetrievalModel {
    pub fn as_str(&self) -> &'static str {
        match self {
            RetrievalModel::Vsm => "vsm",
            RetrievalModel::Tfidf => "tfidf",
            RetrievalModel::Bm25 => "bm25",
            RetrievalModel::Lm => "lm",
        }
    }
}

/// Scores every video against the query, one ranked list per modality the
/// query touches. Query weights scale each term's contribution.
pub fn retrieve(
    query_id: &str,
    query: &SemanticQuery,
    docs: &SemanticDocMatrix,
    model: RetrievalModel,
) -> Result<BTreeMap<Modality, RankedList>> {
    retrieve_with_mode(query_id, query, docs, model, TfMode::Fractional)
}

pub fn retrieve_with_mode(
    query_id: &str,
    query: &SemanticQuery,
    docs: &SemanticDocMatrix,
    model: RetrievalModel,
    mode: TfMode,
) -> Result<BTreeMap<Modality, RankedList>> {
    let mut out = BTreeMap::new();
    for (&modality, _) in &query.modality_weights {
        let terms: Vec<(usize, f64)> = query
            .terms
            .iter()
            .filter(|(_, m, _)| *m == modality)
            .map(|(concept, _, w)| {
                docs.concepts
                    .iter()
                    .position(|c| c == concept)
                    .map(|idx| (idx, *w))
                    .ok_or_else(|| {
                        Error::Data(format!("query concept '{concept}' missing from documents"))
                    })
            })
            .collect::<Result<_>>()?;
        let scores = match model {
            RetrievalModel::Vsm => vsm_scores(docs, modality, &terms, mode),
            RetrievalModel::Tfidf => tfidf_scores(docs, modality, &terms, mode),
            RetrievalModel::Bm25 => bm25_scores(docs, modality, &terms, mode),
            RetrievalModel::Lm => lm_scores(docs, modality, &terms, mode, LM_JM_LAMBDA),
        };
        let mut list = ScoreList::new(query_id, model.as_str());
        for (i, id) in docs.videos.iter().enumerate() {
            list.insert(id.clone(), scores[i]);
        }
        out.insert(modality, to_ranked_list(&list));
    }
    Ok(out)
}

/// Cosine between the query weight vector and each document's modality
/// slice.
fn vsm_scores(
    docs: &SemanticDocMatrix,
    modality: Modality,
    terms: &[(usize, f64)],
    mode: TfMode,
) -> Vec<f64> {
    let cols = docs.modality_columns(modality);
    let qnorm = terms.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    (0..docs.n_videos())
        .map(|r| {
            let dnorm =
                cols.iter().map(|&c| docs.tf(r, c, mode).powi(2)).sum::<f64>().sqrt();
            if dnorm == 0.0 || qnorm == 0.0 {
                return 0.0;
            }
            let dot: f64 = terms.iter().map(|&(c, w)| w * docs.tf(r, c, mode)).sum();
            dot / (dnorm * qnorm)
        })
        .collect()
}

/// Cosine against tf·idf document vectors with idf = ln(N/df).
fn tfidf_scores(
    docs: &SemanticDocMatrix,
    modality: Modality,
    terms: &[(usize, f64)],
    mode: TfMode,
) -> Vec<f64> {
    let cols = docs.modality_columns(modality);
    let n = docs.n_videos();
    let idf: BTreeMap<usize, f64> = cols
        .iter()
        .map(|&c| {
            let df = (0..n).filter(|&r| docs.tf(r, c, mode) > 0.0).count();
            let idf = if df == 0 { 0.0 } else { (n as f64 / df as f64).ln() };
            (c, idf)
        })
        .collect();
    let qnorm = terms.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    (0..n)
        .map(|r| {
            let dnorm = cols
                .iter()
                .map(|&c| (docs.tf(r, c, mode) * idf[&c]).powi(2))
                .sum::<f64>()
                .sqrt();
            if dnorm == 0.0 || qnorm == 0.0 {
                return 0.0;
            }
            let dot: f64 =
                terms.iter().map(|&(c, w)| w * docs.tf(r, c, mode) * idf[&c]).sum();
            dot / (dnorm * qnorm)
        })
        .collect()
}

/// Okapi BM25 with k₁ = 1.2, b = 0.75 and
/// idf = ln((N − df + 0.5)/(df + 0.5) + 1).
fn bm25_scores(
    docs: &SemanticDocMatrix,
    modality: Modality,
    terms: &[(usize, f64)],
    mode: TfMode,
) -> Vec<f64> {
    let n = docs.n_videos();
    let dl = docs.doc_lengths(modality, mode);
    let avgdl = dl.iter().sum::<f64>() / n.max(1) as f64;
    (0..n)
        .map(|r| {
            terms
                .iter()
                .map(|&(c, w)| {
                    let tf = docs.tf(r, c, mode);
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let df = (0..n).filter(|&rr| docs.tf(rr, c, mode) > 0.0).count() as f64;
                    let idf = ((n as f64 - df + 0.5) / (df + 0.5) + 1.0).ln();
                    let ratio = if avgdl > 0.0 { dl[r] / avgdl } else { 0.0 };
                    let tf_part =
                        tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * ratio));
                    w * idf * tf_part
                })
                .sum()
        })
        .collect()
}

/// Query log-likelihood with Jelinek-Mercer smoothing:
/// ln[(1−λ)·p(t|d) + λ·p(t|collection)] summed over query terms. Terms
/// absent from the whole collection cannot discriminate and are skipped.
pub fn lm_scores(
    docs: &SemanticDocMatrix,
    modality: Modality,
    terms: &[(usize, f64)],
    mode: TfMode,
    lambda_jm: f64,
) -> Vec<f64> {
    let n = docs.n_videos();
    let dl = docs.doc_lengths(modality, mode);
    let cols = docs.modality_columns(modality);
    let total_cf: f64 =
        cols.iter().map(|&c| (0..n).map(|r| docs.tf(r, c, mode)).sum::<f64>()).sum();
    (0..n)
        .map(|r| {
            terms
                .iter()
                .map(|&(c, w)| {
                    let cf: f64 = (0..n).map(|rr| docs.tf(rr, c, mode)).sum();
                    if cf == 0.0 || total_cf == 0.0 {
                        return 0.0;
                    }
                    let p_coll = cf / total_cf;
                    let p_doc = if dl[r] > 0.0 { docs.tf(r, c, mode) / dl[r] } else { 0.0 };
                    w * ((1.0 - lambda_jm) * p_doc + lambda_jm * p_coll).ln()
                })
                .sum()
        })
        .collect()
}

/// Rank-normalizes each modality's list and averages with the given
/// weights (normalized to sum 1 over the modalities present).
pub fn modality_fuse(
    lists: &BTreeMap<Modality, RankedList>,
    weights: &BTreeMap<Modality, f64>,
) -> Result<RankedList> {
    if lists.is_empty() {
        return Err(Error::Data("no modality lists to fuse".into()));
    }
    let mut total = 0.0;
    for (modality, _) in lists {
        let w = weights.get(modality).copied().unwrap_or(0.0);
        if w < 0.0 || !w.is_finite() {
            return Err(Error::Data(format!("invalid weight for modality {modality}")));
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(Error::Data("modality weights are all zero".into()));
    }
    let first = lists.values().next().expect("nonempty");
    let ids: std::collections::BTreeSet<&VideoId> =
        first.entries().iter().map(|(id, _)| id).collect();
    let mut fused = ScoreList::new(&first.event_id, "modality-fuse");
    let mut acc: BTreeMap<&VideoId, f64> = ids.iter().map(|&id| (id, 0.0)).collect();
    for (modality, list) in lists {
        let this_ids: std::collections::BTreeSet<&VideoId> =
            list.entries().iter().map(|(id, _)| id).collect();
        if this_ids != ids {
            return Err(Error::Data("modality lists cover different collections".into()));
        }
        let w = weights.get(modality).copied().unwrap_or(0.0) / total;
        let normalized = normalize_scores(&list.to_score_list("norm"), NormMethod::Rank)?;
        for (id, s) in normalized.iter() {
            *acc.get_mut(id).expect("same ids") += w * s;
        }
    }
    for (id, s) in acc {
        fused.insert(id.clone(), s);
    }
    Ok(to_ranked_list(&fused))
}

// --- file formats ---------------------------------------------------------

/// Writes the vocabulary as CSV with a `concept,modality` header.
pub fn write_vocab_csv(path: &Path, vocab: &ConceptVocabulary) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"concept,modality\n");
    for (concept, modality) in vocab.iter() {
        writeln!(buf, "{concept},{modality}").expect("vec write");
    }
    write_atomic(path, &buf)
}

pub fn read_vocab_csv(path: &Path) -> Result<ConceptVocabulary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "concept,modality" {
                return Err(Error::Data(format!(
                    "{}: expected header 'concept,modality'",
                    path.display()
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (concept, modality) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected 'concept,modality'", path.display(), lineno + 1))
        })?;
        entries.push((concept.trim().to_string(), modality.trim().parse()?));
    }
    ConceptVocabulary::new(entries)
}

/// Writes the similarity matrix as TSV: a `word` + concepts header row,
/// then one row of similarities per word.
pub fn write_similarity_tsv(path: &Path, provider: &SimilarityProvider) -> Result<()> {
    let mut buf = Vec::new();
    write!(buf, "word").expect("vec write");
    for concept in provider.concepts() {
        write!(buf, "\t{concept}").expect("vec write");
    }
    buf.push(b'\n');
    let c = provider.concepts().len();
    for (i, word) in provider.words().iter().enumerate() {
        write!(buf, "{word}").expect("vec write");
        for j in 0..c {
            write!(buf, "\t{}", provider.values[i * c + j]).expect("vec write");
        }
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_similarity_tsv(path: &Path) -> Result<SimilarityProvider> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty similarity file", path.display())))?;
    let mut fields = header.split('\t');
    if fields.next() != Some("word") {
        return Err(Error::Data(format!(
            "{}: similarity header must start with 'word'",
            path.display()
        )));
    }
    let concepts: Vec<String> = fields.map(|s| s.to_string()).collect();
    if concepts.is_empty() {
        return Err(Error::Data(format!("{}: no concepts in header", path.display())));
    }
    let mut words = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        words.push(
            fields
                .next()
                .ok_or_else(|| Error::Data(format!("{}:{}: empty row", path.display(), lineno + 2)))?
                .to_string(),
        );
        let row: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|e| {
                    Error::Data(format!("{}:{}: bad similarity: {e}", path.display(), lineno + 2))
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != concepts.len() {
            return Err(Error::Data(format!(
                "{}:{}: {} similarities for {} concepts",
                path.display(),
                lineno + 2,
                row.len(),
                concepts.len()
            )));
        }
        values.extend(row);
    }
    SimilarityProvider::new(words, concepts, values)
}

#[derive(Serialize, Deserialize)]
struct SparseRow {
    video_id: String,
    terms: BTreeMap<String, f64>,
}

/// Writes sparse per-video term counts as JSON lines.
pub fn write_sparse_terms_jsonl(
    path: &Path,
    rows: &[(VideoId, BTreeMap<String, f64>)],
) -> Result<()> {
    let mut buf = Vec::new();
    for (id, terms) in rows {
        let row = SparseRow { video_id: id.to_string(), terms: terms.clone() };
        serde_json::to_writer(&mut buf, &row)
            .map_err(|e| Error::Data(format!("cannot serialize term row: {e}")))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_sparse_terms_jsonl(path: &Path) -> Result<Vec<(VideoId, BTreeMap<String, f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: SparseRow = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{}:{}: bad term row: {e}", path.display(), lineno + 1))
        })?;
        for (term, count) in &row.terms {
            if !count.is_finite() || *count < 0.0 {
                return Err(Error::Data(format!(
                    "{}:{}: term '{term}' has invalid count {count}",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        rows.push((VideoId::new(row.video_id)?, row.terms));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::average_precision;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::collections::BTreeSet;

    fn vid(i: usize) -> VideoId {
        VideoId::new(format!("v{i:03}")).unwrap()
    }

    fn toy_vocab() -> ConceptVocabulary {
        ConceptVocabulary::new(vec![
            ("dog".into(), Modality::Visual),
            ("bike".into(), Modality::Visual),
            ("music".into(), Modality::Asr),
            ("title".into(), Modality::Ocr),
        ])
        .unwrap()
    }

    fn identity_provider(vocab: &ConceptVocabulary) -> SimilarityProvider {
        let concepts: Vec<String> = vocab.iter().map(|(c, _)| c.to_string()).collect();
        let n = concepts.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        SimilarityProvider::new(concepts.clone(), concepts, values).unwrap()
    }

    #[test]
    fn vocab_rejects_duplicates_and_empty() {
        assert!(ConceptVocabulary::new(vec![]).is_err());
        assert!(ConceptVocabulary::new(vec![
            ("a".into(), Modality::Visual),
            ("a".into(), Modality::Asr),
        ])
        .is_err());
    }

    #[test]
    fn identity_similarity_at_tau_one_matches_exact_tokens() {
        let vocab = toy_vocab();
        let provider = identity_provider(&vocab);
        let q = sqg_map(&["dog".into(), "music".into()], &provider, &vocab, 1.0).unwrap();
        let concepts: Vec<&str> = q.terms.iter().map(|(c, _, _)| c.as_str()).collect();
        assert_eq!(concepts, vec!["dog", "music"]);
        assert!(q.terms.iter().all(|(_, _, w)| *w == 1.0));
        assert_eq!(q.modality_weights[&Modality::Visual], 1.0);
        assert_eq!(q.modality_weights[&Modality::Asr], 1.0);
    }

    #[test]
    fn word_hitting_two_concepts_keeps_both_weights() {
        let vocab = toy_vocab();
        let provider = SimilarityProvider::new(
            vec!["puppy".into()],
            vec!["dog".into(), "bike".into(), "music".into(), "title".into()],
            vec![0.9, 0.6, 0.1, 0.0],
        )
        .unwrap();
        let q = sqg_map(&["puppy".into()], &provider, &vocab, 0.5).unwrap();
        assert_eq!(q.terms.len(), 2);
        assert_eq!(q.terms[0], ("dog".into(), Modality::Visual, 0.9));
        assert_eq!(q.terms[1], ("bike".into(), Modality::Visual, 0.6));
    }

    #[test]
    fn weights_from_two_words_sum_per_concept() {
        let vocab = toy_vocab();
        let provider = SimilarityProvider::new(
            vec!["hound".into(), "puppy".into()],
            vec!["dog".into(), "bike".into(), "music".into(), "title".into()],
            vec![0.6, 0.0, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let q = sqg_map(&["hound".into(), "puppy".into()], &provider, &vocab, 0.2).unwrap();
        assert_eq!(q.terms.len(), 1);
        let (c, _, w) = &q.terms[0];
        assert_eq!(c, "dog");
        assert!((w - 0.9).abs() < 1e-12);
    }

    #[test]
    fn unmatched_query_names_nearest_misses() {
        let vocab = toy_vocab();
        let provider = SimilarityProvider::new(
            vec!["cat".into()],
            vec!["dog".into(), "bike".into(), "music".into(), "title".into()],
            vec![0.28, 0.1, 0.0, 0.0],
        )
        .unwrap();
        let err = sqg_map(&["cat".into()], &provider, &vocab, 0.5).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("query outside vocabulary"), "{msg}");
        assert!(msg.contains("dog") && msg.contains("0.280"), "{msg}");
    }

    proptest! {
        /// Raising τ can only shrink the mapped concept set.
        #[test]
        fn sqg_monotone_in_tau(seed in 0u64..200, t_lo in 0.0f64..0.5, gap in 0.0f64..0.5) {
            let vocab = toy_vocab();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let concepts: Vec<String> = vocab.iter().map(|(c, _)| c.to_string()).collect();
            let values: Vec<f64> = (0..2 * concepts.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let provider = SimilarityProvider::new(
                vec!["w1".into(), "w2".into()], concepts, values,
            ).unwrap();
            let words = vec!["w1".to_string(), "w2".to_string()];
            let lo = sqg_map(&words, &provider, &vocab, t_lo);
            let hi = sqg_map(&words, &provider, &vocab, t_lo + gap);
            if let Ok(hi) = hi {
                let lo = lo.expect("lower τ must also match");
                let lo_set: BTreeSet<&str> = lo.terms.iter().map(|(c, _, _)| c.as_str()).collect();
                let hi_set: BTreeSet<&str> = hi.terms.iter().map(|(c, _, _)| c.as_str()).collect();
                prop_assert!(hi_set.is_subset(&lo_set));
            }
        }
    }

    /// Vocabulary with `n` visual concepts c0..c{n-1}.
    fn visual_vocab(n: usize) -> ConceptVocabulary {
        ConceptVocabulary::new((0..n).map(|i| (format!("c{i}"), Modality::Visual)).collect())
            .unwrap()
    }

    fn query_of(vocab: &ConceptVocabulary, weights: &[(usize, f64)]) -> SemanticQuery {
        let mut modality_weights = BTreeMap::new();
        let terms: Vec<(String, Modality, f64)> = weights
            .iter()
            .map(|&(i, w)| {
                let m = vocab.modality(i);
                *modality_weights.entry(m).or_insert(0.0) += w;
                (vocab.concept(i).to_string(), m, w)
            })
            .collect();
        SemanticQuery { terms, modality_weights }
    }

    #[test]
    fn proportional_document_ranks_first_under_vsm() {
        let vocab = visual_vocab(3);
        let docs = SemanticDocMatrix::new(
            &vocab,
            (0..3).map(vid).collect(),
            vec![
                2.0, 4.0, 0.0, // ∝ query (1, 2, 0)
                1.0, 0.0, 3.0, //
                0.0, 1.0, 1.0,
            ],
        )
        .unwrap();
        let q = query_of(&vocab, &[(0, 1.0), (1, 2.0)]);
        let lists = retrieve("Q", &q, &docs, RetrievalModel::Vsm).unwrap();
        let top = &lists[&Modality::Visual].entries()[0];
        assert_eq!(top.0, vid(0));
        assert!((top.1 - 1.0).abs() < 1e-12, "cosine of proportional doc should be 1");
    }

    #[test]
    fn bm25_toy_score_matches_hand_computation() {
        // Two docs, query term with df=1, tf=2, and equal lengths so
        // dl = avgdl: idf = ln 2, tf-part = 2·2.2/3.2 = 1.375.
        let vocab = visual_vocab(2);
        let docs = SemanticDocMatrix::new(
            &vocab,
            vec![vid(0), vid(1)],
            vec![2.0, 0.0, 0.0, 2.0],
        )
        .unwrap();
        let q = query_of(&vocab, &[(0, 1.0)]);
        let lists = retrieve("Q", &q, &docs, RetrievalModel::Bm25).unwrap();
        let score = lists[&Modality::Visual].entries()[0].1;
        let expected = 2.0f64.ln() * 1.375;
        assert!((score - expected).abs() < 1e-15, "{score} vs {expected}");
        assert!((score - 0.95307).abs() < 1e-5);
    }

    #[test]
    fn pure_collection_language_model_ties_all_documents() {
        let vocab = visual_vocab(3);
        let docs = SemanticDocMatrix::new(
            &vocab,
            (0..3).map(vid).collect(),
            vec![5.0, 1.0, 0.0, 0.0, 2.0, 1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let scores = lm_scores(
            &docs,
            Modality::Visual,
            &[(0, 1.0), (1, 0.5)],
            TfMode::Fractional,
            1.0,
        );
        for s in &scores {
            assert!((s - scores[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn retrieval_is_invariant_to_document_order() {
        let vocab = visual_vocab(4);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 12;
        let values: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(0.0..3.0)).collect();
        let docs =
            SemanticDocMatrix::new(&vocab, (0..n).map(vid).collect(), values.clone()).unwrap();
        // Reversed row order.
        let mut rev_values = Vec::with_capacity(values.len());
        for r in (0..n).rev() {
            rev_values.extend_from_slice(&values[r * 4..(r + 1) * 4]);
        }
        let rev_docs =
            SemanticDocMatrix::new(&vocab, (0..n).rev().map(vid).collect(), rev_values).unwrap();
        let q = query_of(&vocab, &[(0, 1.0), (2, 2.0)]);
        for model in [
            RetrievalModel::Vsm,
            RetrievalModel::Tfidf,
            RetrievalModel::Bm25,
            RetrievalModel::Lm,
        ] {
            let a = retrieve("Q", &q, &docs, model).unwrap();
            let b = retrieve("Q", &q, &rev_docs, model).unwrap();
            let la = &a[&Modality::Visual];
            let lb = &b[&Modality::Visual];
            for (id, s) in la.entries() {
                let sb = lb
                    .entries()
                    .iter()
                    .find(|(ib, _)| ib == id)
                    .map(|(_, sb)| *sb)
                    .unwrap();
                assert!((s - sb).abs() < 1e-12, "{model:?} differs for {id}");
            }
        }
    }

    /// Straight-line reference implementations over dictionary documents,
    /// written independently of the production code paths.
    mod reference {
        use std::collections::BTreeMap;

        pub fn tfidf(docs: &[BTreeMap<&str, f64>], query: &[(&str, f64)]) -> Vec<f64> {
            let n = docs.len() as f64;
            let vocab: Vec<&str> = {
                let mut v: Vec<&str> = docs.iter().flat_map(|d| d.keys().copied()).collect();
                v.sort_unstable();
                v.dedup();
                v
            };
            let idf = |t: &str| {
                let df = docs.iter().filter(|d| d.get(t).copied().unwrap_or(0.0) > 0.0).count();
                if df == 0 {
                    0.0
                } else {
                    (n / df as f64).ln()
                }
            };
            let qn = query.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            docs.iter()
                .map(|d| {
                    let dn = vocab
                        .iter()
                        .map(|t| (d.get(t).copied().unwrap_or(0.0) * idf(t)).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if dn == 0.0 {
                        return 0.0;
                    }
                    let dot: f64 = query
                        .iter()
                        .map(|(t, w)| w * d.get(t).copied().unwrap_or(0.0) * idf(t))
                        .sum();
                    dot / (dn * qn)
                })
                .collect()
        }

        pub fn bm25(docs: &[BTreeMap<&str, f64>], query: &[(&str, f64)]) -> Vec<f64> {
            let n = docs.len() as f64;
            let dls: Vec<f64> = docs.iter().map(|d| d.values().sum()).collect();
            let avgdl = dls.iter().sum::<f64>() / n;
            docs.iter()
                .enumerate()
                .map(|(i, d)| {
                    query
                        .iter()
                        .map(|(t, w)| {
                            let tf = d.get(t).copied().unwrap_or(0.0);
                            if tf == 0.0 {
                                return 0.0;
                            }
                            let df = docs
                                .iter()
                                .filter(|dd| dd.get(t).copied().unwrap_or(0.0) > 0.0)
                                .count() as f64;
                            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                            let denom = tf + 1.2 * (1.0 - 0.75 + 0.75 * dls[i] / avgdl);
                            w * idf * tf * 2.2 / denom
                        })
                        .sum()
                })
                .collect()
        }

        pub fn lm(docs: &[BTreeMap<&str, f64>], query: &[(&str, f64)], lambda: f64) -> Vec<f64> {
            let cf = |t: &str| -> f64 {
                docs.iter().map(|d| d.get(t).copied().unwrap_or(0.0)).sum()
            };
            let total: f64 = docs.iter().map(|d| d.values().sum::<f64>()).sum();
            docs.iter()
                .map(|d| {
                    let dl: f64 = d.values().sum();
                    query
                        .iter()
                        .map(|(t, w)| {
                            if cf(t) == 0.0 {
                                return 0.0;
                            }
                            let p_d = if dl > 0.0 { d.get(t).copied().unwrap_or(0.0) / dl } else { 0.0 };
                            w * ((1.0 - lambda) * p_d + lambda * cf(t) / total).ln()
                        })
                        .sum()
                })
                .collect()
        }
    }

    #[test]
    fn retrieval_models_match_independent_reference_on_fixture() {
        // 5 docs × 4 terms with assorted zero patterns.
        let raw: [[f64; 4]; 5] = [
            [3.0, 0.0, 1.0, 0.0],
            [0.0, 2.0, 0.0, 1.0],
            [1.0, 1.0, 1.0, 1.0],
            [0.0, 0.0, 4.0, 0.0],
            [2.0, 3.0, 0.0, 0.5],
        ];
        let vocab = visual_vocab(4);
        let values: Vec<f64> = raw.iter().flatten().copied().collect();
        let docs = SemanticDocMatrix::new(&vocab, (0..5).map(vid).collect(), values).unwrap();
        let q = query_of(&vocab, &[(0, 1.0), (1, 0.5), (3, 2.0)]);
        let names = ["c0", "c1", "c2", "c3"];
        let ref_docs: Vec<BTreeMap<&str, f64>> = raw
            .iter()
            .map(|row| names.iter().copied().zip(row.iter().copied()).collect())
            .collect();
        let ref_query = [("c0", 1.0), ("c1", 0.5), ("c3", 2.0)];

        let pairs: [(RetrievalModel, Vec<f64>); 3] = [
            (RetrievalModel::Tfidf, reference::tfidf(&ref_docs, &ref_query)),
            (RetrievalModel::Bm25, reference::bm25(&ref_docs, &ref_query)),
            (RetrievalModel::Lm, reference::lm(&ref_docs, &ref_query, 0.5)),
        ];
        for (model, expected) in pairs {
            let lists = retrieve("Q", &q, &docs, model).unwrap();
            let list = &lists[&Modality::Visual];
            for (i, want) in expected.iter().enumerate() {
                let got = list
                    .entries()
                    .iter()
                    .find(|(id, _)| *id == vid(i))
                    .map(|(_, s)| *s)
                    .unwrap();
                assert!(
                    (got - want).abs() < 1e-9,
                    "{model:?} doc {i}: got {got}, reference {want}"
                );
            }
        }
    }

    #[test]
    fn thresholded_mode_binarizes_frequencies() {
        let vocab = visual_vocab(2);
        let docs = SemanticDocMatrix::new(
            &vocab,
            vec![vid(0), vid(1)],
            vec![0.9, 0.1, 0.4, 0.0],
        )
        .unwrap();
        assert_eq!(docs.doc_lengths(Modality::Visual, TfMode::Thresholded(0.5)), vec![1.0, 0.0]);
        assert_eq!(docs.doc_lengths(Modality::Visual, TfMode::Fractional), vec![1.0, 0.4]);
    }

    fn ranked(scores: &[f64], event: &str) -> RankedList {
        let mut list = ScoreList::new(event, "s");
        for (i, &s) in scores.iter().enumerate() {
            list.insert(vid(i), s);
        }
        to_ranked_list(&list)
    }

    #[test]
    fn single_modality_fuse_preserves_order() {
        let list = ranked(&[0.3, 0.9, 0.1, 0.5], "Q");
        let lists: BTreeMap<Modality, RankedList> =
            [(Modality::Visual, list.clone())].into_iter().collect();
        let weights: BTreeMap<Modality, f64> = [(Modality::Visual, 1.0)].into_iter().collect();
        let fused = modality_fuse(&lists, &weights).unwrap();
        let order_a: Vec<&VideoId> = list.entries().iter().map(|(id, _)| id).collect();
        let order_b: Vec<&VideoId> = fused.entries().iter().map(|(id, _)| id).collect();
        assert_eq!(order_a, order_b);
    }

    #[test]
    fn equal_weights_on_identical_lists_change_nothing() {
        let list = ranked(&[0.3, 0.9, 0.1, 0.5], "Q");
        let lists: BTreeMap<Modality, RankedList> =
            [(Modality::Visual, list.clone()), (Modality::Asr, list.clone())]
                .into_iter()
                .collect();
        let weights: BTreeMap<Modality, f64> =
            [(Modality::Visual, 0.5), (Modality::Asr, 0.5)].into_iter().collect();
        let fused = modality_fuse(&lists, &weights).unwrap();
        let order_a: Vec<&VideoId> = list.entries().iter().map(|(id, _)| id).collect();
        let order_b: Vec<&VideoId> = fused.entries().iter().map(|(id, _)| id).collect();
        assert_eq!(order_a, order_b);
    }

    #[test]
    fn lopsided_weights_keep_good_list_ahead_of_random() {
        let n = 40;
        let pos: BTreeSet<VideoId> = (0..6).map(vid).collect();
        let good = ranked(
            &(0..n).map(|i| if i < 6 { 10.0 - i as f64 } else { -(i as f64) }).collect::<Vec<_>>(),
            "Q",
        );
        let mut wins = 0;
        for seed in 0..50u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let random =
                ranked(&(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(), "Q");
            let lists: BTreeMap<Modality, RankedList> =
                [(Modality::Visual, good.clone()), (Modality::Asr, random.clone())]
                    .into_iter()
                    .collect();
            let weights: BTreeMap<Modality, f64> =
                [(Modality::Visual, 0.9), (Modality::Asr, 0.1)].into_iter().collect();
            let fused = modality_fuse(&lists, &weights).unwrap();
            if average_precision(&fused, &pos).unwrap()
                >= average_precision(&random, &pos).unwrap()
            {
                wins += 1;
            }
        }
        assert!(wins >= 48, "fusion beat random in only {wins}/50 trials");
    }

    #[test]
    fn all_zero_weights_are_rejected() {
        let list = ranked(&[0.3, 0.9], "Q");
        let lists: BTreeMap<Modality, RankedList> =
            [(Modality::Visual, list)].into_iter().collect();
        let weights: BTreeMap<Modality, f64> = [(Modality::Visual, 0.0)].into_iter().collect();
        assert!(modality_fuse(&lists, &weights).is_err());
    }

    #[test]
    fn negative_document_values_are_rejected() {
        let vocab = visual_vocab(2);
        assert!(SemanticDocMatrix::new(&vocab, vec![vid(0)], vec![1.0, -0.1]).is_err());
        assert!(SemanticDocMatrix::new(&vocab, vec![vid(0)], vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn vocab_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.csv");
        let vocab = toy_vocab();
        write_vocab_csv(&path, &vocab).unwrap();
        assert_eq!(read_vocab_csv(&path).unwrap(), vocab);
    }

    #[test]
    fn similarity_tsv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sim.tsv");
        let provider = SimilarityProvider::new(
            vec!["puppy".into(), "song".into()],
            vec!["dog".into(), "music".into()],
            vec![0.9, 0.0, 0.125, 0.75],
        )
        .unwrap();
        write_similarity_tsv(&path, &provider).unwrap();
        assert_eq!(read_similarity_tsv(&path).unwrap(), provider);
    }

    #[test]
    fn sparse_terms_jsonl_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("asr.jsonl");
        let rows = vec![
            (vid(0), [("music".to_string(), 2.0)].into_iter().collect::<BTreeMap<_, _>>()),
            (vid(1), BTreeMap::new()),
        ];
        write_sparse_terms_jsonl(&path, &rows).unwrap();
        assert_eq!(read_sparse_terms_jsonl(&path).unwrap(), rows);
    }

    #[test]
    fn assemble_merges_visual_and_sparse_blocks() {
        let vocab = toy_vocab(); // dog, bike visual; music asr; title ocr
        let videos: Vec<VideoId> = (0..2).map(vid).collect();
        let visual =
            FeatureMatrix::new("detect", videos.clone(), vec![0.75, 0.25, 0.125, 0.5], 2).unwrap();
        let asr_rows = vec![(vid(1), [("music".to_string(), 3.0)].into_iter().collect())];
        let docs = SemanticDocMatrix::assemble(
            &vocab,
            &videos,
            Some(&visual),
            &[(Modality::Asr, asr_rows)],
        )
        .unwrap();
        assert_eq!(docs.values, vec![0.75, 0.25, 0.0, 0.0, 0.125, 0.5, 3.0, 0.0]);
    }
}
