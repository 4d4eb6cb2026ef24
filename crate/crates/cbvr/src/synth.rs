//! Synthetic benchmark generation. Each event plants a latent direction in
//! feature space; informative features observe it through noise at a
//! configurable signal-to-noise ratio, and features inside a redundancy
//! group share a latent corruption so their score lists correlate the way
//! families of near-duplicate descriptors do. The generator also derives a
//! concept-detector matrix, sparse speech/text term counts, and a
//! word-to-concept similarity matrix so the text-query path runs on the
//! same ground truth.
//!
//! Everything is seeded: the same config yields byte-identical files.

use crate::manifest::{get_parsed, reject_unknown_keys};
use crate::model::{
    read_feature_tsv, read_ground_truth_csv, write_atomic, write_feature_tsv,
    write_ground_truth_csv, FeatureMatrix, GroundTruth, Split, VideoId,
};
use crate::semantic::{
    read_similarity_tsv, read_sparse_terms_jsonl, read_vocab_csv, write_similarity_tsv,
    write_sparse_terms_jsonl, write_vocab_csv, ConceptVocabulary, Modality, SemanticDocMatrix,
    SimilarityProvider,
};
use crate::{derive_seed, Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// One standard normal draw (Box-Muller, cosine branch only so each draw
/// consumes a fixed number of uniforms).
fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Benchmark shape and signal strengths.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_events: usize,
    /// Size of the ranked collection (the simulated test split).
    pub n_videos: usize,
    pub n_features: usize,
    pub feature_dim: usize,
    /// Redundancy group sizes; must sum to `n_features`.
    pub group_sizes: Vec<usize>,
    /// Per-feature SNR; empty means "draw uniformly from [snr_lo, snr_hi]".
    pub snr: Vec<f64>,
    pub snr_lo: f64,
    pub snr_hi: f64,
    /// Fraction of noise variance shared within a redundancy group.
    pub group_noise_share: f64,
    /// Relevant videos per event inside the ranked collection.
    pub collection_positives: usize,
    /// Positive exemplars generated per event (outside the collection).
    pub train_positives: usize,
    /// Shared background negatives (outside the collection).
    pub train_negatives: usize,
    pub n_visual_concepts: usize,
    pub n_asr_concepts: usize,
    pub n_ocr_concepts: usize,
    /// Signature concepts each event owns per modality.
    pub signature_visual: usize,
    pub signature_asr: usize,
    pub signature_ocr: usize,
    /// Strength of the planted concept-detector signal.
    pub concept_snr: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_events: 20,
            n_videos: 2000,
            n_features: 47,
            feature_dim: 16,
            group_sizes: default_group_sizes(47),
            snr: Vec::new(),
            snr_lo: 0.1,
            snr_hi: 2.0,
            group_noise_share: 0.8,
            collection_positives: 20,
            train_positives: 100,
            train_negatives: 300,
            n_visual_concepts: 60,
            n_asr_concepts: 40,
            n_ocr_concepts: 20,
            signature_visual: 3,
            signature_asr: 2,
            signature_ocr: 1,
            concept_snr: 0.5,
            seed: 42,
        }
    }
}

/// Group layout echoing descriptor families: a few 5/4/3-sized families,
/// the rest in pairs (plus one singleton when the count is odd).
pub fn default_group_sizes(n_features: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut left = n_features;
    for s in [5usize, 5, 4, 4, 3, 3, 3] {
        if left == s || left >= s + 2 {
            sizes.push(s);
            left -= s;
            if left == 0 {
                return sizes;
            }
        }
    }
    while left >= 2 {
        sizes.push(2);
        left -= 2;
    }
    if left == 1 {
        sizes.push(1);
    }
    sizes
}

const CONFIG_KEYS: &[&str] = &[
    "n_events",
    "n_videos",
    "n_features",
    "feature_dim",
    "group_sizes",
    "snr",
    "snr_lo",
    "snr_hi",
    "group_noise_share",
    "collection_positives",
    "train_positives",
    "train_negatives",
    "n_visual_concepts",
    "n_asr_concepts",
    "n_ocr_concepts",
    "signature_visual",
    "signature_asr",
    "signature_ocr",
    "concept_snr",
    "seed",
];

fn join_list<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split_list<T: std::str::FromStr>(raw: &str, key: &str) -> Result<Vec<T>> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|f| {
            f.trim()
                .parse()
                .map_err(|_| Error::Config(format!("config key '{key}': cannot parse '{f}'")))
        })
        .collect()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_events == 0 || self.n_videos == 0 || self.n_features == 0 {
            return Err(Error::Config("events, videos and features must be ≥ 1".into()));
        }
        if self.n_features > 999 {
            return Err(Error::Config("at most 999 features supported".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("feature_dim must be ≥ 2".into()));
        }
        let total: usize = self.group_sizes.iter().sum();
        if total != self.n_features {
            return Err(Error::Data(format!(
                "inconsistent redundancy group sizes: sum {} ≠ {} features",
                total, self.n_features
            )));
        }
        if self.group_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Data("empty redundancy group".into()));
        }
        if !self.snr.is_empty() {
            if self.snr.len() != self.n_features {
                return Err(Error::Config(format!(
                    "snr list has {} entries for {} features",
                    self.snr.len(),
                    self.n_features
                )));
            }
            if self.snr.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                return Err(Error::Config("snr values must be positive".into()));
            }
        }
        if !(self.snr_lo > 0.0 && self.snr_hi >= self.snr_lo) {
            return Err(Error::Config("need 0 < snr_lo ≤ snr_hi".into()));
        }
        if !(0.0..=1.0).contains(&self.group_noise_share) {
            return Err(Error::Config("group_noise_share must lie in [0, 1]".into()));
        }
        if self.collection_positives == 0
            || self.collection_positives * self.n_events > self.n_videos
        {
            return Err(Error::Config(format!(
                "{} events × {} positives exceed the {}-video collection",
                self.n_events, self.collection_positives, self.n_videos
            )));
        }
        if self.train_positives < 2 || self.train_negatives < 2 {
            return Err(Error::Config("need at least 2 exemplars and 2 negatives".into()));
        }
        if self.signature_visual * self.n_events > self.n_visual_concepts
            || self.signature_asr * self.n_events > self.n_asr_concepts
            || self.signature_ocr * self.n_events > self.n_ocr_concepts
        {
            return Err(Error::Config(
                "not enough concepts for every event's signature set".into(),
            ));
        }
        if !(self.concept_snr > 0.0) {
            return Err(Error::Config("concept_snr must be positive".into()));
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("n_events".into(), self.n_events.to_string());
        m.insert("n_videos".into(), self.n_videos.to_string());
        m.insert("n_features".into(), self.n_features.to_string());
        m.insert("feature_dim".into(), self.feature_dim.to_string());
        m.insert("group_sizes".into(), join_list(&self.group_sizes));
        m.insert("snr".into(), join_list(&self.snr));
        m.insert("snr_lo".into(), self.snr_lo.to_string());
        m.insert("snr_hi".into(), self.snr_hi.to_string());
        m.insert("group_noise_share".into(), self.group_noise_share.to_string());
        m.insert("collection_positives".into(), self.collection_positives.to_string());
        m.insert("train_positives".into(), self.train_positives.to_string());
        m.insert("train_negatives".into(), self.train_negatives.to_string());
        m.insert("n_visual_concepts".into(), self.n_visual_concepts.to_string());
        m.insert("n_asr_concepts".into(), self.n_asr_concepts.to_string());
        m.insert("n_ocr_concepts".into(), self.n_ocr_concepts.to_string());
        m.insert("signature_visual".into(), self.signature_visual.to_string());
        m.insert("signature_asr".into(), self.signature_asr.to_string());
        m.insert("signature_ocr".into(), self.signature_ocr.to_string());
        m.insert("concept_snr".into(), self.concept_snr.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m
    }

    /// Builds a config from flat pairs, starting at the defaults; unknown
    /// keys are rejected. `group_sizes` defaults follow `n_features` when
    /// not given explicitly.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<SynthConfig> {
        reject_unknown_keys(map, CONFIG_KEYS)?;
        let d = SynthConfig::default();
        let n_features = get_parsed(map, "n_features", d.n_features)?;
        let group_sizes = match map.get("group_sizes") {
            Some(raw) => split_list(raw, "group_sizes")?,
            None => default_group_sizes(n_features),
        };
        let snr = match map.get("snr") {
            Some(raw) => split_list(raw, "snr")?,
            None => Vec::new(),
        };
        Ok(SynthConfig {
            n_events: get_parsed(map, "n_events", d.n_events)?,
            n_videos: get_parsed(map, "n_videos", d.n_videos)?,
            n_features,
            feature_dim: get_parsed(map, "feature_dim", d.feature_dim)?,
            group_sizes,
            snr,
            snr_lo: get_parsed(map, "snr_lo", d.snr_lo)?,
            snr_hi: get_parsed(map, "snr_hi", d.snr_hi)?,
            group_noise_share: get_parsed(map, "group_noise_share", d.group_noise_share)?,
            collection_positives: get_parsed(map, "collection_positives", d.collection_positives)?,
            train_positives: get_parsed(map, "train_positives", d.train_positives)?,
            train_negatives: get_parsed(map, "train_negatives", d.train_negatives)?,
            n_visual_concepts: get_parsed(map, "n_visual_concepts", d.n_visual_concepts)?,
            n_asr_concepts: get_parsed(map, "n_asr_concepts", d.n_asr_concepts)?,
            n_ocr_concepts: get_parsed(map, "n_ocr_concepts", d.n_ocr_concepts)?,
            signature_visual: get_parsed(map, "signature_visual", d.signature_visual)?,
            signature_asr: get_parsed(map, "signature_asr", d.signature_asr)?,
            signature_ocr: get_parsed(map, "signature_ocr", d.signature_ocr)?,
            concept_snr: get_parsed(map, "concept_snr", d.concept_snr)?,
            seed: get_parsed(map, "seed", d.seed)?,
        })
    }

    /// Resolved per-feature SNRs (drawn from the seed when `snr` is empty).
    ///
    /// Quality is drawn per redundancy group, with only a small per-sibling
    /// spread: descriptor families rise and fall together, while entire
    /// families can be strong or near-useless.
    pub fn resolved_snr(&self) -> Vec<f64> {
        if !self.snr.is_empty() {
            return self.snr.clone();
        }
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(self.seed, "snr", 0));
        let bases: Vec<f64> =
            self.group_sizes.iter().map(|_| rng.gen_range(self.snr_lo..=self.snr_hi)).collect();
        let mut snr = Vec::with_capacity(self.n_features);
        for (g, &size) in self.group_sizes.iter().enumerate() {
            for _ in 0..size {
                snr.push(bases[g] * rng.gen_range(0.85..=1.15));
            }
        }
        snr
    }
}

/// A complete generated benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    /// One matrix per feature covering collection + exemplars + negatives.
    pub features: Vec<FeatureMatrix>,
    /// Feature index → redundancy group index.
    pub feature_groups: Vec<usize>,
    /// The ranked collection, in id order of generation.
    pub collection: Vec<VideoId>,
    /// Collection relevance labels — evaluation only; pipelines must not
    /// read these while producing rankings.
    pub ground_truth: GroundTruth,
    pub train_positives: BTreeMap<String, Vec<VideoId>>,
    pub train_negatives: Vec<VideoId>,
    pub vocab: ConceptVocabulary,
    /// Concept evidence over the collection.
    pub doc_matrix: SemanticDocMatrix,
    pub similarity: SimilarityProvider,
    /// Event id → query words.
    pub queries: BTreeMap<String, Vec<String>>,
}

impl SynthDataset {
    pub fn event_ids(&self) -> Vec<String> {
        self.train_positives.keys().cloned().collect()
    }
}

/// Modality block layout inside the vocabulary: visual, then asr, then ocr.
fn concept_token(modality: Modality, i: usize) -> String {
    format!("{}{:03}", modality.as_str(), i)
}

struct ConceptLayout {
    /// (modality, index within modality) per vocabulary position.
    slots: Vec<(Modality, usize)>,
    sig_visual: usize,
    sig_asr: usize,
    sig_ocr: usize,
}

impl ConceptLayout {
    fn new(config: &SynthConfig) -> Self {
        let mut slots = Vec::new();
        for i in 0..config.n_visual_concepts {
            slots.push((Modality::Visual, i));
        }
        for i in 0..config.n_asr_concepts {
            slots.push((Modality::Asr, i));
        }
        for i in 0..config.n_ocr_concepts {
            slots.push((Modality::Ocr, i));
        }
        ConceptLayout {
            slots,
            sig_visual: config.signature_visual,
            sig_asr: config.signature_asr,
            sig_ocr: config.signature_ocr,
        }
    }

    /// The event owning this concept as a signature, if any. Event `e`
    /// owns the `e`-th block of each modality's leading concepts.
    fn signature_owner(&self, concept: usize, n_events: usize) -> Option<usize> {
        let (modality, i) = self.slots[concept];
        let per_event = match modality {
            Modality::Visual => self.sig_visual,
            Modality::Asr => self.sig_asr,
            Modality::Ocr => self.sig_ocr,
        };
        if per_event == 0 {
            return None;
        }
        let owner = i / per_event;
        (owner < n_events).then_some(owner)
    }
}

/// Generates the full benchmark for `config`. Deterministic in the seed.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let events: Vec<String> = (1..=config.n_events).map(|e| format!("E{e:02}")).collect();
    let collection: Vec<VideoId> = (0..config.n_videos)
        .map(|i| VideoId::new(format!("T{i:05}")).expect("valid id"))
        .collect();

    // Plant disjoint positive sets inside the collection.
    let mut order: Vec<usize> = (0..config.n_videos).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "labels", 0)));
    let mut ground_truth = GroundTruth::new();
    let mut event_of: BTreeMap<VideoId, usize> = BTreeMap::new();
    for (e, event) in events.iter().enumerate() {
        for k in 0..config.collection_positives {
            let id = collection[order[e * config.collection_positives + k]].clone();
            ground_truth.add_positive(event.clone(), id.clone())?;
            event_of.insert(id, e);
        }
    }
    for id in &collection {
        if !event_of.contains_key(id) {
            ground_truth.set_split(id.clone(), Split::Test)?;
        }
    }

    // Exemplars and shared negatives live outside the ranked collection.
    let mut train_positives: BTreeMap<String, Vec<VideoId>> = BTreeMap::new();
    for (e, event) in events.iter().enumerate() {
        let ids: Vec<VideoId> = (0..config.train_positives)
            .map(|k| VideoId::new(format!("P{event}x{k:03}")).expect("valid id"))
            .collect();
        for id in &ids {
            event_of.insert(id.clone(), e);
        }
        train_positives.insert(event.clone(), ids);
    }
    let train_negatives: Vec<VideoId> = (0..config.train_negatives)
        .map(|k| VideoId::new(format!("N{k:04}")).expect("valid id"))
        .collect();

    // Canonical row order shared by every feature matrix.
    let mut all: Vec<VideoId> = collection.clone();
    for event in &events {
        all.extend(train_positives[event].iter().cloned());
    }
    all.extend(train_negatives.iter().cloned());

    // Group structure and latent directions.
    let mut feature_groups = Vec::with_capacity(config.n_features);
    for (g, &size) in config.group_sizes.iter().enumerate() {
        feature_groups.extend(std::iter::repeat(g).take(size));
    }
    let dim = config.feature_dim;
    let unit = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            for x in v.iter_mut() {
                *x /= n;
            }
        }
    };
    let n_groups = config.group_sizes.len();
    let mut group_dirs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let mut dirs = Vec::with_capacity(config.n_events);
        for e in 0..config.n_events {
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(
                config.seed,
                "latent-dir",
                (g * 10_000 + e) as u64,
            ));
            let mut v: Vec<f64> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
            unit(&mut v);
            dirs.push(v);
        }
        group_dirs.push(dirs);
    }

    // Spread of the per-video gain each sibling applies to the shared group
    // corruption (mean 1).
    const GROUP_GAIN_JITTER: f64 = 0.8;
    let snr = config.resolved_snr();
    let rho = config.group_noise_share;
    let mut features = Vec::with_capacity(config.n_features);
    for f in 0..config.n_features {
        let g = feature_groups[f];
        // Per-feature signal directions: the group's latent direction with
        // a small private jitter, so siblings stay aligned but not equal.
        let mut dir_rng =
            ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "feat-dir", f as u64));
        let dirs: Vec<Vec<f64>> = (0..config.n_events)
            .map(|e| {
                let mut v: Vec<f64> = group_dirs[g][e]
                    .iter()
                    .map(|&x| x + 0.15 * standard_normal(&mut dir_rng))
                    .collect();
                unit(&mut v);
                v
            })
            .collect();
        // The group-noise stream restarts from the same seed for every
        // sibling, so features in one group share the corruption — but each
        // sibling applies it with its own per-video gain. Shared corruption
        // keeps the group's ranked lists highly correlated, while the varying
        // gain denies any fixed linear combination an exact cancellation.
        let mut group_rng =
            ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "group-noise", g as u64));
        let mut feat_rng =
            ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "feat-noise", f as u64));
        let mut values = Vec::with_capacity(all.len() * dim);
        for id in &all {
            let event = event_of.get(id).copied();
            let mut row = vec![0.0f64; dim];
            let gain = 1.0 + GROUP_GAIN_JITTER * standard_normal(&mut feat_rng);
            for (j, r) in row.iter_mut().enumerate() {
                let eta = standard_normal(&mut group_rng);
                let eps = standard_normal(&mut feat_rng);
                let signal = match event {
                    Some(e) => snr[f] * dirs[e][j],
                    None => 0.0,
                };
                *r = (1.0 + signal + rho.sqrt() * gain * eta + (1.0 - rho).sqrt() * eps)
                    .max(0.0);
            }
            // Histogram-like rows: nonnegative and L1-normalized, so both
            // linear learners and the χ² map apply.
            let sum: f64 = row.iter().sum();
            if sum > 1e-9 {
                for r in &mut row {
                    *r /= sum;
                }
            } else {
                row = vec![1.0 / dim as f64; dim];
            }
            values.extend(row.iter().map(|&x| x as f32));
        }
        features.push(FeatureMatrix::new(
            format!("feat{f:03}g{g:03}"),
            all.clone(),
            values,
            dim,
        )?);
    }

    // Concept vocabulary plus planted detector evidence.
    let layout = ConceptLayout::new(config);
    let vocab = ConceptVocabulary::new(
        layout.slots.iter().map(|&(m, i)| (concept_token(m, i), m)).collect(),
    )?;
    let c_total = vocab.len();
    let mut doc_values = vec![0.0f64; config.n_videos * c_total];
    for c in 0..c_total {
        let (modality, _) = layout.slots[c];
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "concept", c as u64));
        let strength = config.concept_snr * rng.gen_range(0.6..1.0);
        let owner = layout.signature_owner(c, config.n_events);
        for (v, id) in collection.iter().enumerate() {
            let z = matches!((owner, event_of.get(id)), (Some(o), Some(&e)) if o == e);
            let noise = standard_normal(&mut rng);
            let val = match modality {
                Modality::Visual => {
                    let x = if z { strength + 0.35 * noise } else { 0.15 * noise.abs() };
                    // Round through f32 so file round-trips are exact.
                    (x.max(0.0) as f32) as f64
                }
                Modality::Asr | Modality::Ocr => {
                    let x = if z { 2.0 * strength + 0.9 * noise } else { 0.45 * noise };
                    x.max(0.0).round()
                }
            };
            doc_values[v * c_total + c] = val;
        }
    }
    let doc_matrix = SemanticDocMatrix::new(&vocab, collection.clone(), doc_values)?;

    // Two query words per event: a strong synonym and a weaker paraphrase
    // that overlap on the signature concepts, exercising weight summation.
    let mut sim_rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "sim", 0));
    let mut words = Vec::with_capacity(2 * config.n_events);
    let mut sim_values = Vec::with_capacity(2 * config.n_events * c_total);
    let mut queries: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (e, event) in events.iter().enumerate() {
        let mut event_words = Vec::new();
        for (suffix, hi, lo) in
            [("a", (0.70, 0.95), (0.00, 0.25)), ("b", (0.35, 0.65), (0.00, 0.20))]
        {
            let word = format!("seek{:02}{}", e + 1, suffix);
            for c in 0..c_total {
                let is_sig = layout.signature_owner(c, config.n_events) == Some(e);
                let (a, b) = if is_sig { hi } else { lo };
                sim_values.push(sim_rng.gen_range(a..b));
            }
            event_words.push(word.clone());
            words.push(word);
        }
        queries.insert(event.clone(), event_words);
    }
    let similarity = SimilarityProvider::new(
        words,
        (0..c_total).map(|c| vocab.concept(c).to_string()).collect(),
        sim_values,
    )?;

    Ok(SynthDataset {
        config: config.clone(),
        features,
        feature_groups,
        collection,
        ground_truth,
        train_positives,
        train_negatives,
        vocab,
        doc_matrix,
        similarity,
        queries,
    })
}

// --- dataset directory layout ---------------------------------------------

fn lines_file(ids: &[VideoId]) -> Vec<u8> {
    let mut buf = Vec::new();
    for id in ids {
        buf.extend_from_slice(id.as_str().as_bytes());
        buf.push(b'\n');
    }
    buf
}

/// Writes a dataset under `dir`:
/// `synth_config.txt`, `ground_truth.csv`, `collection.txt`,
/// `exemplars.csv`, `train_negatives.txt`, `queries.csv`,
/// `features/<name>.tsv`, and `semantic/{vocab.csv, similarity.tsv,
/// visual.tsv, asr.jsonl, ocr.jsonl}`.
pub fn write_dataset(dir: &Path, ds: &SynthDataset) -> Result<()> {
    crate::manifest::write_kv_file(&dir.join("synth_config.txt"), &ds.config.to_map())?;
    write_ground_truth_csv(&dir.join("ground_truth.csv"), &ds.ground_truth)?;
    write_atomic(&dir.join("collection.txt"), &lines_file(&ds.collection))?;
    let mut ex = String::from("event_id,video_id\n");
    for (event, ids) in &ds.train_positives {
        for id in ids {
            ex.push_str(&format!("{event},{id}\n"));
        }
    }
    write_atomic(&dir.join("exemplars.csv"), ex.as_bytes())?;
    write_atomic(&dir.join("train_negatives.txt"), &lines_file(&ds.train_negatives))?;
    let mut q = String::from("event_id,word\n");
    for (event, words) in &ds.queries {
        for word in words {
            q.push_str(&format!("{event},{word}\n"));
        }
    }
    write_atomic(&dir.join("queries.csv"), q.as_bytes())?;
    for m in &ds.features {
        write_feature_tsv(&dir.join("features").join(format!("{}.tsv", m.feature_name)), m)?;
    }
    let sem = dir.join("semantic");
    write_vocab_csv(&sem.join("vocab.csv"), &ds.vocab)?;
    write_similarity_tsv(&sem.join("similarity.tsv"), &ds.similarity)?;
    write_feature_tsv(&sem.join("visual.tsv"), &visual_block(ds))?;
    for (modality, file) in [(Modality::Asr, "asr.jsonl"), (Modality::Ocr, "ocr.jsonl")] {
        write_sparse_terms_jsonl(&sem.join(file), &sparse_block(ds, modality))?;
    }
    Ok(())
}

/// The doc matrix's visual columns as a feature matrix (detector scores).
fn visual_block(ds: &SynthDataset) -> FeatureMatrix {
    let cols: Vec<usize> =
        (0..ds.vocab.len()).filter(|&c| ds.vocab.modality(c) == Modality::Visual).collect();
    let mut values = Vec::with_capacity(ds.collection.len() * cols.len());
    for v in 0..ds.collection.len() {
        for &c in &cols {
            values.push(ds.doc_matrix.at(v, c) as f32);
        }
    }
    FeatureMatrix::new("visual-concepts", ds.collection.clone(), values, cols.len())
        .expect("valid visual block")
}

fn sparse_block(ds: &SynthDataset, modality: Modality) -> Vec<(VideoId, BTreeMap<String, f64>)> {
    let cols: Vec<usize> =
        (0..ds.vocab.len()).filter(|&c| ds.vocab.modality(c) == modality).collect();
    ds.collection
        .iter()
        .enumerate()
        .map(|(v, id)| {
            let terms: BTreeMap<String, f64> = cols
                .iter()
                .filter_map(|&c| {
                    let val = ds.doc_matrix.at(v, c);
                    (val > 0.0).then(|| (ds.vocab.concept(c).to_string(), val))
                })
                .collect();
            (id.clone(), terms)
        })
        .collect()
}

fn read_id_lines(path: &Path) -> Result<Vec<VideoId>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(VideoId::new).collect()
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<SynthDataset> {
    let config =
        SynthConfig::from_map(&crate::manifest::read_kv_file(&dir.join("synth_config.txt"))?)?;
    let ground_truth = read_ground_truth_csv(&dir.join("ground_truth.csv"))?;
    let collection = read_id_lines(&dir.join("collection.txt"))?;
    let train_negatives = read_id_lines(&dir.join("train_negatives.txt"))?;

    let ex_path = dir.join("exemplars.csv");
    let ex_text = std::fs::read_to_string(&ex_path).map_err(|e| Error::io(&ex_path, e))?;
    let mut train_positives: BTreeMap<String, Vec<VideoId>> = BTreeMap::new();
    for (lineno, line) in ex_text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let (event, id) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected event_id,video_id", ex_path.display(), lineno + 1))
        })?;
        train_positives.entry(event.to_string()).or_default().push(VideoId::new(id)?);
    }

    let q_path = dir.join("queries.csv");
    let q_text = std::fs::read_to_string(&q_path).map_err(|e| Error::io(&q_path, e))?;
    let mut queries: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (lineno, line) in q_text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let (event, word) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected event_id,word", q_path.display(), lineno + 1))
        })?;
        queries.entry(event.to_string()).or_default().push(word.to_string());
    }

    let feat_dir = dir.join("features");
    let mut names: Vec<String> = std::fs::read_dir(&feat_dir)
        .map_err(|e| Error::io(&feat_dir, e))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().into_string().ok()?;
            name.ends_with(".tsv").then_some(name)
        })
        .collect();
    names.sort();
    let mut features = Vec::with_capacity(names.len());
    let mut feature_groups = Vec::with_capacity(names.len());
    for name in &names {
        let m = read_feature_tsv(&feat_dir.join(name))?;
        let group: usize = m
            .feature_name
            .rsplit_once('g')
            .and_then(|(_, g)| g.parse().ok())
            .ok_or_else(|| {
                Error::Data(format!("feature name '{}' lacks a group suffix", m.feature_name))
            })?;
        feature_groups.push(group);
        features.push(m);
    }

    let sem = dir.join("semantic");
    let vocab = read_vocab_csv(&sem.join("vocab.csv"))?;
    let similarity = read_similarity_tsv(&sem.join("similarity.tsv"))?;
    let visual = read_feature_tsv(&sem.join("visual.tsv"))?;
    let asr = read_sparse_terms_jsonl(&sem.join("asr.jsonl"))?;
    let ocr = read_sparse_terms_jsonl(&sem.join("ocr.jsonl"))?;
    let doc_matrix = SemanticDocMatrix::assemble(
        &vocab,
        &collection,
        Some(&visual),
        &[(Modality::Asr, asr), (Modality::Ocr, ocr)],
    )?;

    Ok(SynthDataset {
        config,
        features,
        feature_groups,
        collection,
        ground_truth,
        train_positives,
        train_negatives,
        vocab,
        doc_matrix,
        similarity,
        queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::{predict_scores, ridge_train};
    use crate::linalg::pearson;
    use crate::model::average_precision;
    use crate::model::to_ranked_list;
    use std::collections::BTreeSet;

    /// A small config that generates in milliseconds.
    fn small_config(seed: u64) -> SynthConfig {
        SynthConfig {
            n_events: 3,
            n_videos: 150,
            n_features: 4,
            feature_dim: 10,
            group_sizes: vec![2, 2],
            collection_positives: 8,
            train_positives: 12,
            train_negatives: 40,
            n_visual_concepts: 9,
            n_asr_concepts: 6,
            n_ocr_concepts: 3,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        let c = SynthConfig::default();
        c.validate().unwrap();
        assert_eq!(c.group_sizes.iter().sum::<usize>(), 47);
    }

    #[test]
    fn group_layout_always_sums_to_feature_count() {
        for n in 1..=80 {
            let sizes = default_group_sizes(n);
            assert_eq!(sizes.iter().sum::<usize>(), n, "n={n}");
            assert!(sizes.iter().all(|&s| s >= 1));
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = small_config(1);
        c.group_sizes = vec![3, 2];
        assert!(c.validate().is_err(), "group sizes must sum to n_features");
        let mut c = small_config(1);
        c.snr = vec![1.0, -0.5, 1.0, 1.0];
        assert!(c.validate().is_err(), "negative snr");
        let mut c = small_config(1);
        c.collection_positives = 60;
        assert!(c.validate().is_err(), "positives exceed collection");
    }

    #[test]
    fn config_map_round_trips() {
        let c = small_config(7);
        let back = SynthConfig::from_map(&c.to_map()).unwrap();
        assert_eq!(back, c);
        let mut m = c.to_map();
        m.insert("bogus".into(), "1".into());
        assert!(SynthConfig::from_map(&m).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let c = small_config(11);
        let a = synth_generate(&c).unwrap();
        let b = synth_generate(&c).unwrap();
        assert_eq!(a, b);
        let c2 = small_config(12);
        let d = synth_generate(&c2).unwrap();
        assert_ne!(a.features[0].values, d.features[0].values);
    }

    fn dir_snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
            for entry in std::fs::read_dir(dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    walk(base, &path, out);
                } else {
                    let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                    out.insert(rel, std::fs::read(&path).unwrap());
                }
            }
        }
        let mut out = BTreeMap::new();
        walk(dir, dir, &mut out);
        out
    }

    #[test]
    fn same_seed_writes_byte_identical_files() {
        let c = small_config(13);
        let ds = synth_generate(&c).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_dataset(d1.path(), &ds).unwrap();
        write_dataset(d2.path(), &synth_generate(&c).unwrap()).unwrap();
        let s1 = dir_snapshot(d1.path());
        let s2 = dir_snapshot(d2.path());
        assert_eq!(s1.keys().collect::<Vec<_>>(), s2.keys().collect::<Vec<_>>());
        for (name, bytes) in &s1 {
            assert_eq!(bytes, &s2[name], "file {name} differs");
        }
    }

    #[test]
    fn dataset_round_trips_through_directory() {
        let c = small_config(17);
        let ds = synth_generate(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn huge_snr_feature_is_almost_perfect_alone() {
        let mut c = small_config(19);
        c.n_features = 1;
        c.group_sizes = vec![1];
        c.snr = vec![60.0];
        let ds = synth_generate(&c).unwrap();
        let feature = &ds.features[0];
        let mut aps = Vec::new();
        for (event, pos) in &ds.train_positives {
            let train_ids: Vec<VideoId> =
                pos.iter().chain(ds.train_negatives.iter()).cloned().collect();
            let y: Vec<f64> = pos
                .iter()
                .map(|_| 1.0)
                .chain(ds.train_negatives.iter().map(|_| -1.0))
                .collect();
            let model = ridge_train(&feature.select(&train_ids).unwrap(), &y, 1.0, event).unwrap();
            let scores = predict_scores(&model, &feature.select(&ds.collection).unwrap()).unwrap();
            let ranked = to_ranked_list(&scores);
            aps.push(
                average_precision(&ranked, ds.ground_truth.positives(event).unwrap()).unwrap(),
            );
        }
        let map = aps.iter().sum::<f64>() / aps.len() as f64;
        assert!(map >= 0.99, "single-feature MAP {map} with huge SNR");
    }

    #[test]
    fn within_group_score_correlation_beats_between() {
        let mut within_all = Vec::new();
        let mut between_all = Vec::new();
        for seed in 0..10u64 {
            let mut c = small_config(100 + seed);
            c.n_features = 6;
            c.group_sizes = vec![3, 3];
            c.snr = vec![1.2; 6];
            let ds = synth_generate(&c).unwrap();
            let event = "E01";
            let pos = &ds.train_positives[event];
            let train_ids: Vec<VideoId> =
                pos.iter().chain(ds.train_negatives.iter()).cloned().collect();
            let y: Vec<f64> = pos
                .iter()
                .map(|_| 1.0)
                .chain(ds.train_negatives.iter().map(|_| -1.0))
                .collect();
            let score_vecs: Vec<Vec<f64>> = ds
                .features
                .iter()
                .map(|f| {
                    let model =
                        ridge_train(&f.select(&train_ids).unwrap(), &y, 1.0, event).unwrap();
                    let s =
                        predict_scores(&model, &f.select(&ds.collection).unwrap()).unwrap();
                    ds.collection.iter().map(|id| s.get(id).unwrap()).collect()
                })
                .collect();
            for i in 0..6 {
                for j in (i + 1)..6 {
                    let r = pearson(&score_vecs[i], &score_vecs[j]);
                    if ds.feature_groups[i] == ds.feature_groups[j] {
                        within_all.push(r);
                    } else {
                        between_all.push(r);
                    }
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (w, b) = (mean(&within_all), mean(&between_all));
        assert!(w > b, "within-group mean correlation {w} ≤ between-group {b}");
    }

    #[test]
    fn positives_are_disjoint_across_events() {
        let ds = synth_generate(&small_config(23)).unwrap();
        let mut seen = BTreeSet::new();
        for event in ds.event_ids() {
            for id in ds.ground_truth.positives(&event).unwrap() {
                assert!(seen.insert(id.clone()), "{id} positive for two events");
            }
        }
    }
}
