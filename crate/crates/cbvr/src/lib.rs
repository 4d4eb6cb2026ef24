//! Content-based video retrieval engine and evaluation harness.
//!
//! The crate covers the full retrieval pipeline for event search over video
//! collections, operating on precomputed or synthetic feature matrices:
//!
//! - **Encoding** ([`descriptors`], [`kmeans`], [`gmm`], [`pca`], [`encode`]):
//!   turn variable-length local-descriptor sets into fixed-length vectors via
//!   bag-of-words, spatial-pyramid BoW, VLAD, and Fisher vectors, with PCA
//!   projection, space-time coordinate augmentation, and multi-skip pooling.
//! - **Kernel maps** ([`kernel_map`]): explicit finite-dimensional feature
//!   maps approximating additive kernels (χ², histogram intersection) so
//!   linear models can stand in for kernel models.
//! - **Compression** ([`quantize`]): product quantization and per-dimension
//!   uniform quantization with lookup-table linear scoring directly on codes,
//!   plus a persisted binary index format.
//! - **Learning** ([`learn`]): ridge regression, kernel ridge regression, and
//!   a linear SVM trained from exemplar positives against background
//!   negatives, with cross-validated model selection producing leak-free
//!   held-out scores for fusion.
//! - **Fusion** ([`fusion`]): multistage hybrid late fusion — rank
//!   augmentation, PCA-tree recovery of essential features, four weighting
//!   strategies averaged into final weights — plus average and linear
//!   regression baselines.
//! - **Reranking** ([`rerank`]): pseudo-relevance feedback with self-paced
//!   sample weighting (binary and mixture schemes), capped iterations, and
//!   blending with the initial list.
//! - **Text search** ([`semantic`]): query-word-to-concept mapping and
//!   classical retrieval models (VSM, tf-idf, BM25, query-likelihood LM) over
//!   per-modality concept/term matrices, fused by mapped weights.
//! - **Harness** ([`synth`], [`scenario`], [`experiment`], [`manifest`]):
//!   a seeded synthetic benchmark with planted event structure, the four
//!   query scenarios (text-only through 100 exemplars), and robustness /
//!   compression-degradation experiments with manifest-based reproducibility.
//!
//! # Quick start
//!
//! Score three videos for one event and evaluate the ranking:
//!
//! ```
//! use cbvr::model::{average_precision, to_ranked_list, ScoreList, VideoId};
//! use std::collections::BTreeSet;
//!
//! let mut scores = ScoreList::new("E001", "demo");
//! scores.insert(VideoId::new("v1").unwrap(), 0.9);
//! scores.insert(VideoId::new("v2").unwrap(), 0.4);
//! scores.insert(VideoId::new("v3").unwrap(), 0.7);
//!
//! let ranked = to_ranked_list(&scores);
//! let positives: BTreeSet<_> = [VideoId::new("v3").unwrap()].into();
//! let ap = average_precision(&ranked, &positives).unwrap();
//! assert!((ap - 0.5).abs() < 1e-12); // v3 sits at rank 2
//! ```
//!
//! The `examples/` directory walks through each capability end to end; the
//! `cbvr` binary exposes the same pipeline as subcommands (`gen`, `encode`,
//! `index`, `train`, `score`, `fuse`, `rerank`, `search`, `eval`,
//! `exp-robustness`, `exp-degradation`, `rerun`).

pub mod descriptors;
pub mod encode;
pub mod experiment;
pub mod fusion;
pub mod gmm;
pub mod kernel_map;
pub mod kmeans;
pub mod learn;
pub mod linalg;
pub mod manifest;
pub mod model;
pub mod pca;
pub mod quantize;
pub mod rerank;
pub mod scenario;
pub mod semantic;
pub mod synth;

use std::path::PathBuf;

/// Crate-wide error type. The three non-I/O categories map onto the CLI exit
/// codes (config → 2, data → 3, internal → 4); I/O failures count as data
/// errors since they surface from input files.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: bad flag values, unknown config keys,
    /// scenario/classifier combinations that the contract forbids.
    #[error("config error: {0}")]
    Config(String),
    /// Invalid data: malformed files, dimension mismatches, empty inputs,
    /// preconditions violated by caller-supplied values.
    #[error("data error: {0}")]
    Data(String),
    /// A violated internal invariant (a bug, not a user error).
    #[error("internal assertion: {0}")]
    Internal(String),
    /// Filesystem failure while reading or writing `path`.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for this error per the CLI contract.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Internal(_) => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Derives an independent sub-seed from a master seed, a purpose tag, and an
/// index (FNV-1a over the three). Every randomized stage draws its seed this
/// way so results never depend on scheduling or worker-thread count.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h = (h ^ u64::from(b)).wrapping_mul(PRIME);
        }
    };
    eat(&master.to_le_bytes());
    eat(tag.as_bytes());
    eat(&index.to_le_bytes());
    h
}

/// Stable 64-bit content hash (FNV-1a) used for config and manifest hashing.
pub fn content_hash(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for &b in bytes {
        h = (h ^ u64::from(b)).wrapping_mul(PRIME);
    }
    h
}
