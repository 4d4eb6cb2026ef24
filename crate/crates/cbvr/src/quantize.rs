//! Feature compression: product quantization (PQ) and per-dimension uniform
//! quantization (UQ), compressed-domain linear scoring via lookup tables,
//! and the persisted index format.
//!
//! PQ splits each vector into `m` subblocks of `d_sub` dimensions and
//! quantizes each subblock against its own `k`-word codebook, so one
//! subblock is stored as a single byte (`k ≤ 256`). At `d_sub = 8` this
//! compresses 32-bit floats 32×. UQ instead quantizes every dimension into
//! `k_uq` equal-width bins between the observed per-dimension min and max,
//! packing `log2(k_uq)` bits per dimension.

use crate::kmeans::kmeans_fit;
use crate::model::{FeatureMatrix, ScoreList, VideoId};
use crate::{derive_seed, Error, Result};
use std::path::Path;

/// Magic bytes of the persisted index format.
pub const INDEX_MAGIC: &[u8; 8] = b"CBVRIDX1";
/// Format version written and accepted.
pub const INDEX_VERSION: u16 = 1;

const PQ_TRAIN_MAX_ROWS: usize = 100_000;
const PQ_TRAIN_ITERS: usize = 20;

/// Per-subblock codebooks of a product quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct PqCodebook {
    /// Number of subblocks.
    pub m: usize,
    /// Dimensions per subblock.
    pub d_sub: usize,
    /// Codewords per subblock (≤ 256 so one code fits in a byte).
    pub k: usize,
    /// Zero dimensions appended during training so `d_sub` divides the
    /// padded dimension; `logical_d = m·d_sub − pad_dims`.
    pub pad_dims: usize,
    /// Centroids, `m × k × d_sub` row-major.
    pub centroids: Vec<f32>,
}

impl PqCodebook {
    pub fn new(
        m: usize,
        d_sub: usize,
        k: usize,
        pad_dims: usize,
        centroids: Vec<f32>,
    ) -> Result<Self> {
        if m == 0 || d_sub == 0 || k == 0 {
            return Err(Error::Config("codebook shape must be nonzero".into()));
        }
        if k > 256 {
            return Err(Error::Config(format!("k = {k} > 256 does not fit one byte")));
        }
        if pad_dims >= d_sub {
            return Err(Error::Config(format!("pad_dims {pad_dims} must be < d_sub {d_sub}")));
        }
        if centroids.len() != m * k * d_sub {
            return Err(Error::Data(format!(
                "codebook has {} values, want m·k·d_sub = {}",
                centroids.len(),
                m * k * d_sub
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("codebook contains non-finite values".into()));
        }
        Ok(PqCodebook { m, d_sub, k, pad_dims, centroids })
    }

    /// Dimension of vectors this codebook encodes (before padding).
    pub fn logical_d(&self) -> usize {
        self.m * self.d_sub - self.pad_dims
    }

    /// Centroid `c` of subblock `s`.
    pub fn centroid(&self, s: usize, c: usize) -> &[f32] {
        let start = (s * self.k + c) * self.d_sub;
        &self.centroids[start..start + self.d_sub]
    }

    /// Bytes of one uncompressed row over bytes of one code row.
    pub fn compression_ratio(&self) -> f64 {
        4.0 * self.logical_d() as f64 / self.m as f64
    }
}

/// Encoded rows: one byte per subblock per video.
#[derive(Clone, Debug, PartialEq)]
pub struct PqCodes {
    /// `n × m` codes, row-major.
    pub codes: Vec<u8>,
    pub m: usize,
    pub video_ids: Vec<VideoId>,
    pub feature_name: String,
}

impl PqCodes {
    pub fn n(&self) -> usize {
        self.video_ids.len()
    }

    /// Code row for video `i`.
    pub fn row(&self, i: usize) -> &[u8] {
        &self.codes[i * self.m..(i + 1) * self.m]
    }
}

/// Trains per-subblock codebooks with k-means. The dimension must be a
/// multiple of `d_sub`; see [`pq_train_padded`] for automatic zero-padding.
pub fn pq_train(x: &FeatureMatrix, d_sub: usize, k: usize, seed: u64) -> Result<PqCodebook> {
    if d_sub == 0 || x.d % d_sub != 0 {
        return Err(Error::Config(format!(
            "dimension {} is not a multiple of d_sub {d_sub}; pad or choose divisor",
            x.d
        )));
    }
    pq_train_impl(x, d_sub, k, 0, seed)
}

/// Like [`pq_train`] but zero-pads the dimension up to the next multiple of
/// `d_sub`; the padding amount is recorded in the codebook (and the index
/// header) so decode can strip it.
pub fn pq_train_padded(x: &FeatureMatrix, d_sub: usize, k: usize, seed: u64) -> Result<PqCodebook> {
    if d_sub == 0 {
        return Err(Error::Config("d_sub must be positive".into()));
    }
    let pad = (d_sub - x.d % d_sub) % d_sub;
    pq_train_impl(x, d_sub, k, pad, seed)
}

fn pq_train_impl(
    x: &FeatureMatrix,
    d_sub: usize,
    k: usize,
    pad: usize,
    seed: u64,
) -> Result<PqCodebook> {
    let n = x.n();
    if n < k {
        return Err(Error::Data(format!("{n} training rows < k = {k} codewords")));
    }
    if k > 256 {
        return Err(Error::Config(format!("k = {k} > 256 does not fit one byte")));
    }
    let rows: Vec<usize> = if n > PQ_TRAIN_MAX_ROWS {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(derive_seed(seed, "pq-subsample", 0));
        let mut idx = rand::seq::index::sample(&mut rng, n, PQ_TRAIN_MAX_ROWS).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let padded_d = x.d + pad;
    let m = padded_d / d_sub;
    let mut centroids = Vec::with_capacity(m * k * d_sub);
    let mut sub = vec![0.0f32; rows.len() * d_sub];
    for s in 0..m {
        let start = s * d_sub;
        for (ri, &r) in rows.iter().enumerate() {
            let row = x.row(r);
            for j in 0..d_sub {
                let col = start + j;
                sub[ri * d_sub + j] = if col < x.d { row[col] } else { 0.0 };
            }
        }
        let fit = kmeans_fit(
            &sub,
            rows.len(),
            d_sub,
            k,
            derive_seed(seed, "pq-subblock", s as u64),
            PQ_TRAIN_ITERS,
        )?;
        centroids.extend(fit.codebook.centroids.iter().map(|&v| v as f32));
    }
    PqCodebook::new(m, d_sub, k, pad, centroids)
}

/// Assigns every row to its nearest centroid per subblock (ties go to the
/// lowest centroid index).
pub fn pq_encode(cb: &PqCodebook, x: &FeatureMatrix) -> Result<PqCodes> {
    if x.d != cb.logical_d() {
        return Err(Error::Data(format!(
            "matrix dimension {} does not match codebook dimension {}",
            x.d,
            cb.logical_d()
        )));
    }
    let mut codes = Vec::with_capacity(x.n() * cb.m);
    let mut padded = vec![0.0f32; cb.m * cb.d_sub];
    for i in 0..x.n() {
        padded[..x.d].copy_from_slice(x.row(i));
        for s in 0..cb.m {
            let block = &padded[s * cb.d_sub..(s + 1) * cb.d_sub];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..cb.k {
                let cent = cb.centroid(s, c);
                let d2: f64 = block
                    .iter()
                    .zip(cent)
                    .map(|(&a, &b)| {
                        let diff = f64::from(a) - f64::from(b);
                        diff * diff
                    })
                    .sum();
                if d2 < best_d {
                    best_d = d2;
                    best = c;
                }
            }
            codes.push(best as u8);
        }
    }
    Ok(PqCodes { codes, m: cb.m, video_ids: x.video_ids.clone(), feature_name: x.feature_name.clone() })
}

/// Reconstructs rows by concatenating the selected centroids (padding
/// dimensions are stripped).
pub fn pq_decode(cb: &PqCodebook, codes: &PqCodes) -> Result<FeatureMatrix> {
    if codes.m != cb.m {
        return Err(Error::Data(format!(
            "codes have {} subblocks, codebook has {}",
            codes.m, cb.m
        )));
    }
    let d = cb.logical_d();
    let mut values = Vec::with_capacity(codes.n() * d);
    for i in 0..codes.n() {
        let row = codes.row(i);
        for (s, &c) in row.iter().enumerate() {
            if usize::from(c) >= cb.k {
                return Err(Error::Data(format!(
                    "corrupt index: code {c} ≥ k = {} in row {i}",
                    cb.k
                )));
            }
            let cent = cb.centroid(s, usize::from(c));
            let end = if s == cb.m - 1 { cb.d_sub - cb.pad_dims } else { cb.d_sub };
            values.extend_from_slice(&cent[..end]);
        }
    }
    FeatureMatrix::new(codes.feature_name.clone(), codes.video_ids.clone(), values, d)
}

/// Scores every encoded video under a linear model without decoding: one
/// lookup table per subblock (`LUT[s][c] = ⟨w_s, centroid_{s,c}⟩`), then each
/// video costs `m` table lookups. Matches decode-then-dot scoring up to
/// floating-point associativity.
pub fn pq_dot_scores(
    w: &[f64],
    b: f64,
    cb: &PqCodebook,
    codes: &PqCodes,
    event_id: &str,
    source: &str,
) -> Result<ScoreList> {
    if w.len() != cb.logical_d() {
        return Err(Error::Data(format!(
            "weight vector has {} dims, codebook encodes {}",
            w.len(),
            cb.logical_d()
        )));
    }
    if codes.m != cb.m {
        return Err(Error::Data("codes do not match codebook".into()));
    }
    let mut lut = vec![0.0f64; cb.m * cb.k];
    for s in 0..cb.m {
        let w_start = s * cb.d_sub;
        for c in 0..cb.k {
            let cent = cb.centroid(s, c);
            let mut acc = 0.0f64;
            for j in 0..cb.d_sub {
                let col = w_start + j;
                if col < w.len() {
                    acc += w[col] * f64::from(cent[j]);
                }
            }
            lut[s * cb.k + c] = acc;
        }
    }
    let mut scores = ScoreList::new(event_id, source);
    for i in 0..codes.n() {
        let mut acc = b;
        for (s, &c) in codes.row(i).iter().enumerate() {
            if usize::from(c) >= cb.k {
                return Err(Error::Data(format!("corrupt index: code {c} ≥ k = {}", cb.k)));
            }
            acc += lut[s * cb.k + usize::from(c)];
        }
        scores.try_insert(codes.video_ids[i].clone(), acc)?;
    }
    Ok(scores)
}

/// How uniform quantization picks its per-dimension range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UqEdgeMode {
    /// Range = observed min..max (default).
    MinMax,
    /// Range = 1st..99th percentile, clipping outliers into the end bins.
    Quantile,
}

impl UqEdgeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            UqEdgeMode::MinMax => "minmax",
            UqEdgeMode::Quantile => "quantile",
        }
    }
}

impl std::str::FromStr for UqEdgeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(UqEdgeMode::MinMax),
            "quantile" => Ok(UqEdgeMode::Quantile),
            other => Err(Error::Config(format!("unknown edge mode '{other}'"))),
        }
    }
}

/// Per-dimension uniform quantizer: `k_uq` equal-width bins over `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UqModel {
    pub lo: Vec<f32>,
    pub hi: Vec<f32>,
    /// Bin count; must be one of {2, 4, 16, 256}.
    pub k_uq: usize,
}

impl UqModel {
    pub fn d(&self) -> usize {
        self.lo.len()
    }

    /// Bits per stored dimension.
    pub fn bits(&self) -> u32 {
        self.k_uq.trailing_zeros()
    }

    pub fn compression_ratio(&self) -> f64 {
        32.0 / f64::from(self.bits())
    }
}

fn check_k_uq(k_uq: usize) -> Result<()> {
    if ![2, 4, 16, 256].contains(&k_uq) {
        return Err(Error::Config(format!("k_uq must be one of 2, 4, 16, 256; got {k_uq}")));
    }
    Ok(())
}

/// Fits per-dimension ranges from the data (min/max by default).
pub fn uq_train(x: &FeatureMatrix, k_uq: usize) -> Result<UqModel> {
    uq_train_with_mode(x, k_uq, UqEdgeMode::MinMax)
}

pub fn uq_train_with_mode(x: &FeatureMatrix, k_uq: usize, mode: UqEdgeMode) -> Result<UqModel> {
    check_k_uq(k_uq)?;
    if x.n() == 0 {
        return Err(Error::Data("no rows to train quantizer".into()));
    }
    let mut lo = vec![f32::INFINITY; x.d];
    let mut hi = vec![f32::NEG_INFINITY; x.d];
    match mode {
        UqEdgeMode::MinMax => {
            for i in 0..x.n() {
                for (j, &v) in x.row(i).iter().enumerate() {
                    lo[j] = lo[j].min(v);
                    hi[j] = hi[j].max(v);
                }
            }
        }
        UqEdgeMode::Quantile => {
            let n = x.n();
            let lo_idx = ((n - 1) as f64 * 0.01).round() as usize;
            let hi_idx = ((n - 1) as f64 * 0.99).round() as usize;
            let mut col = vec![0.0f32; n];
            for j in 0..x.d {
                for i in 0..n {
                    col[i] = x.row(i)[j];
                }
                col.sort_by(|a, b| a.partial_cmp(b).unwrap());
                lo[j] = col[lo_idx];
                hi[j] = col[hi_idx];
            }
        }
    }
    Ok(UqModel { lo, hi, k_uq })
}

/// Bit-packed uniform-quantization codes.
#[derive(Clone, Debug, PartialEq)]
pub struct UqCodes {
    /// `n` rows of `ceil(d·bits/8)` bytes each; values packed little-endian
    /// within each byte (first dimension in the lowest bits).
    pub packed: Vec<u8>,
    pub d: usize,
    pub k_uq: usize,
    pub video_ids: Vec<VideoId>,
    pub feature_name: String,
}

impl UqCodes {
    pub fn n(&self) -> usize {
        self.video_ids.len()
    }

    pub fn bytes_per_row(&self) -> usize {
        (self.d * self.k_uq.trailing_zeros() as usize + 7) / 8
    }

    /// Unpacks the bin indices of row `i`.
    pub fn row_bins(&self, i: usize) -> Vec<u8> {
        let bits = self.k_uq.trailing_zeros() as usize;
        let mask = ((1usize << bits) - 1) as u8;
        let bpr = self.bytes_per_row();
        let row = &self.packed[i * bpr..(i + 1) * bpr];
        (0..self.d)
            .map(|j| {
                let bit = j * bits;
                (row[bit / 8] >> (bit % 8)) & mask
            })
            .collect()
    }
}

/// Quantizes every value into its equal-width bin. Values at or above the
/// top edge land in the top bin; at or below the bottom edge, in bin 0. A
/// degenerate dimension (`lo == hi`) always codes to 0.
pub fn uq_encode(model: &UqModel, x: &FeatureMatrix) -> Result<UqCodes> {
    if x.d != model.d() {
        return Err(Error::Data(format!(
            "matrix dimension {} does not match quantizer dimension {}",
            x.d,
            model.d()
        )));
    }
    let bits = model.bits() as usize;
    let bpr = (x.d * bits + 7) / 8;
    let mut packed = vec![0u8; x.n() * bpr];
    let k = model.k_uq as f32;
    for i in 0..x.n() {
        let row = x.row(i);
        let out = &mut packed[i * bpr..(i + 1) * bpr];
        for (j, &v) in row.iter().enumerate() {
            let (lo, hi) = (model.lo[j], model.hi[j]);
            let bin = if hi <= lo {
                0usize
            } else {
                let t = (v - lo) / (hi - lo) * k;
                (t.max(0.0) as usize).min(model.k_uq - 1)
            };
            let bit = j * bits;
            out[bit / 8] |= (bin as u8) << (bit % 8);
        }
    }
    Ok(UqCodes {
        packed,
        d: x.d,
        k_uq: model.k_uq,
        video_ids: x.video_ids.clone(),
        feature_name: x.feature_name.clone(),
    })
}

/// Reconstructs each value as the center of its bin (degenerate dimensions
/// decode to `lo`).
pub fn uq_decode(model: &UqModel, codes: &UqCodes) -> Result<FeatureMatrix> {
    if codes.d != model.d() || codes.k_uq != model.k_uq {
        return Err(Error::Data("codes do not match quantizer".into()));
    }
    let width: Vec<f32> = model
        .lo
        .iter()
        .zip(&model.hi)
        .map(|(&lo, &hi)| (hi - lo) / model.k_uq as f32)
        .collect();
    let mut values = Vec::with_capacity(codes.n() * codes.d);
    for i in 0..codes.n() {
        for (j, bin) in codes.row_bins(i).into_iter().enumerate() {
            let v = if model.hi[j] <= model.lo[j] {
                model.lo[j]
            } else {
                model.lo[j] + (f32::from(bin) + 0.5) * width[j]
            };
            values.push(v);
        }
    }
    FeatureMatrix::new(codes.feature_name.clone(), codes.video_ids.clone(), values, codes.d)
}

/// A persisted compressed index: codebooks plus encoded rows plus ids.
#[derive(Clone, Debug, PartialEq)]
pub enum IndexData {
    Pq { codebook: PqCodebook, codes: PqCodes },
    Uq { model: UqModel, codes: UqCodes },
}

impl IndexData {
    pub fn video_ids(&self) -> &[VideoId] {
        match self {
            IndexData::Pq { codes, .. } => &codes.video_ids,
            IndexData::Uq { codes, .. } => &codes.video_ids,
        }
    }

    pub fn n(&self) -> usize {
        self.video_ids().len()
    }

    pub fn compression_ratio(&self) -> f64 {
        match self {
            IndexData::Pq { codebook, .. } => codebook.compression_ratio(),
            IndexData::Uq { model, .. } => model.compression_ratio(),
        }
    }

    /// Decodes the index back into an approximate feature matrix.
    pub fn decode(&self) -> Result<FeatureMatrix> {
        match self {
            IndexData::Pq { codebook, codes } => pq_decode(codebook, codes),
            IndexData::Uq { model, codes } => uq_decode(model, codes),
        }
    }
}

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("index field fits u32").to_le_bytes());
}

/// Serializes an index. Layout (little-endian): magic `CBVRIDX1`, u16
/// version, u8 codec (1 = PQ, 2 = UQ), u32 `n`, `d`, `m`, `d_sub`, `k`,
/// `pad_dims`, then the codebook as f32s (PQ: `m·k·d_sub` centroids; UQ:
/// interleaved `lo, hi` per dimension), then code rows, then the id table
/// (u32 count, per id u16 length + UTF-8 bytes).
pub fn index_to_bytes(data: &IndexData) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(INDEX_MAGIC);
    buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    match data {
        IndexData::Pq { codebook, codes } => {
            buf.push(1u8);
            push_u32(&mut buf, codes.n());
            push_u32(&mut buf, codebook.logical_d());
            push_u32(&mut buf, codebook.m);
            push_u32(&mut buf, codebook.d_sub);
            push_u32(&mut buf, codebook.k);
            push_u32(&mut buf, codebook.pad_dims);
            for &v in &codebook.centroids {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&codes.codes);
        }
        IndexData::Uq { model, codes } => {
            buf.push(2u8);
            push_u32(&mut buf, codes.n());
            push_u32(&mut buf, model.d());
            push_u32(&mut buf, model.d());
            push_u32(&mut buf, 1);
            push_u32(&mut buf, model.k_uq);
            push_u32(&mut buf, 0);
            for (lo, hi) in model.lo.iter().zip(&model.hi) {
                buf.extend_from_slice(&lo.to_le_bytes());
                buf.extend_from_slice(&hi.to_le_bytes());
            }
            buf.extend_from_slice(&codes.packed);
        }
    }
    let ids = data.video_ids();
    push_u32(&mut buf, ids.len());
    for id in ids {
        let bytes = id.as_str().as_bytes();
        buf.extend_from_slice(&u16::try_from(bytes.len()).expect("id fits u16").to_le_bytes());
        buf.extend_from_slice(bytes);
    }
    buf
}

/// Writes an index atomically (temp file + rename).
pub fn index_write(path: &Path, data: &IndexData) -> Result<()> {
    crate::model::write_atomic(path, &index_to_bytes(data))
}

/// Parses index bytes; see [`index_to_bytes`] for the layout.
pub fn index_from_bytes(bytes: &[u8]) -> Result<IndexData> {
    let fail = |msg: &str| Error::Data(format!("{msg}"));
    let need = |end: usize| -> Result<()> {
        if bytes.len() < end {
            Err(fail("truncated index"))
        } else {
            Ok(())
        }
    };
    need(11)?;
    if &bytes[..8] != INDEX_MAGIC {
        return Err(fail("bad magic (not an index file)"));
    }
    let version = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
    if version != INDEX_VERSION {
        return Err(fail(&format!("unsupported index version {version}")));
    }
    let codec = bytes[10];
    need(11 + 24)?;
    let mut fields = [0usize; 6];
    for (i, f) in fields.iter_mut().enumerate() {
        let start = 11 + 4 * i;
        *f = u32::from_le_bytes(bytes[start..start + 4].try_into().unwrap()) as usize;
    }
    let [n, d, m, d_sub, k, pad_dims] = fields;
    let mut off = 35usize;
    let take_f32s = |count: usize, off: &mut usize| -> Result<Vec<f32>> {
        let end = *off + 4 * count;
        need(end)?;
        let vals = bytes[*off..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *off = end;
        Ok(vals)
    };
    let (codebook_part, code_bytes) = match codec {
        1 => {
            let centroids = take_f32s(m * k * d_sub, &mut off)?;
            let cb = PqCodebook::new(m, d_sub, k, pad_dims, centroids)?;
            if cb.logical_d() != d {
                return Err(fail("inconsistent index dimensions"));
            }
            (IndexData::Pq {
                codebook: cb,
                codes: PqCodes {
                    codes: Vec::new(),
                    m,
                    video_ids: Vec::new(),
                    feature_name: String::new(),
                },
            }, n * m)
        }
        2 => {
            check_k_uq(k)?;
            let pairs = take_f32s(2 * d, &mut off)?;
            let lo: Vec<f32> = pairs.iter().step_by(2).copied().collect();
            let hi: Vec<f32> = pairs.iter().skip(1).step_by(2).copied().collect();
            let model = UqModel { lo, hi, k_uq: k };
            let bpr = (d * model.bits() as usize + 7) / 8;
            (IndexData::Uq {
                model,
                codes: UqCodes {
                    packed: Vec::new(),
                    d,
                    k_uq: k,
                    video_ids: Vec::new(),
                    feature_name: String::new(),
                },
            }, n * bpr)
        }
        other => return Err(fail(&format!("unknown codec {other}"))),
    };
    need(off + code_bytes)?;
    let raw_codes = bytes[off..off + code_bytes].to_vec();
    off += code_bytes;
    need(off + 4)?;
    let id_count = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    off += 4;
    if id_count != n {
        return Err(fail("id table does not match row count"));
    }
    let mut ids = Vec::with_capacity(id_count);
    for _ in 0..id_count {
        need(off + 2)?;
        let len = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
        off += 2;
        need(off + len)?;
        let s = std::str::from_utf8(&bytes[off..off + len])
            .map_err(|_| fail("id is not valid UTF-8"))?;
        ids.push(VideoId::new(s)?);
        off += len;
    }
    if off != bytes.len() {
        return Err(fail("trailing bytes after index"));
    }
    let mut data = codebook_part;
    match &mut data {
        IndexData::Pq { codes, .. } => {
            codes.codes = raw_codes;
            codes.video_ids = ids;
            codes.feature_name = "index".into();
        }
        IndexData::Uq { codes, .. } => {
            codes.packed = raw_codes;
            codes.video_ids = ids;
            codes.feature_name = "index".into();
        }
    }
    Ok(data)
}

/// Reads an index file written by [`index_write`].
pub fn index_read(path: &Path) -> Result<IndexData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    index_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ids(n: usize) -> Vec<VideoId> {
        (0..n).map(|i| VideoId::new(format!("v{i:04}")).unwrap()).collect()
    }

    fn random_matrix(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let values: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMatrix::new("feat", ids(n), values, d).unwrap()
    }

    fn toy_codebook() -> PqCodebook {
        // d = 4, d_sub = 2, k = 2, centroids {(0,0), (1,1)} per block.
        PqCodebook::new(2, 2, 2, 0, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn subblock_count_from_dims() {
        let x = random_matrix(20, 16, 1);
        let cb = pq_train(&x, 8, 4, 7).unwrap();
        assert_eq!(cb.m, 2);
        assert_eq!(cb.logical_d(), 16);
    }

    #[test]
    fn non_divisible_dimension_is_rejected_then_padded() {
        let x = random_matrix(20, 10, 2);
        let err = pq_train(&x, 8, 4, 7).unwrap_err().to_string();
        assert!(err.contains("pad or choose divisor"), "{err}");
        let cb = pq_train_padded(&x, 8, 4, 7).unwrap();
        assert_eq!((cb.m, cb.pad_dims, cb.logical_d()), (2, 6, 10));
        let codes = pq_encode(&cb, &x).unwrap();
        let decoded = pq_decode(&cb, &codes).unwrap();
        assert_eq!(decoded.d, 10);
    }

    #[test]
    fn exact_recovery_when_subvectors_match_codewords() {
        // Rows alternate between two distinct subvectors per block, so a
        // 2-word codebook reconstructs them exactly.
        let mut values = Vec::new();
        for i in 0..12 {
            if i % 2 == 0 {
                values.extend_from_slice(&[0.25f32, -1.0, 3.0, 0.5]);
            } else {
                values.extend_from_slice(&[2.0f32, 0.75, -0.5, 1.25]);
            }
        }
        let x = FeatureMatrix::new("f", ids(12), values, 4).unwrap();
        let cb = pq_train(&x, 2, 2, 3).unwrap();
        let decoded = pq_decode(&cb, &pq_encode(&cb, &x).unwrap()).unwrap();
        assert_eq!(decoded.values, x.values);
    }

    #[test]
    fn compression_ratios() {
        let x = random_matrix(300, 16, 4);
        let cb = pq_train(&x, 8, 16, 1).unwrap();
        assert_eq!(cb.compression_ratio(), 32.0);
        let uq = uq_train(&x, 2).unwrap();
        assert_eq!(uq.compression_ratio(), 32.0);
        assert_eq!(uq_train(&x, 256).unwrap().compression_ratio(), 4.0);
    }

    #[test]
    fn toy_encode_hand_check() {
        let cb = toy_codebook();
        let x = FeatureMatrix::new("f", ids(1), vec![0.9, 1.1, 0.1, 0.2], 4).unwrap();
        let codes = pq_encode(&cb, &x).unwrap();
        assert_eq!(codes.row(0), &[1, 0]);
    }

    #[test]
    fn reconstruction_error_non_increasing_in_k() {
        let x = random_matrix(300, 8, 9);
        let mut last = f64::INFINITY;
        for k in [2usize, 16, 256] {
            let cb = pq_train(&x, 4, k, 11).unwrap();
            let decoded = pq_decode(&cb, &pq_encode(&cb, &x).unwrap()).unwrap();
            let mse: f64 = x
                .values
                .iter()
                .zip(&decoded.values)
                .map(|(&a, &b)| {
                    let d = f64::from(a) - f64::from(b);
                    d * d
                })
                .sum::<f64>()
                / x.values.len() as f64;
            assert!(mse <= last + 1e-12, "MSE rose from {last} to {mse} at k={k}");
            last = mse;
        }
    }

    #[test]
    fn lut_scoring_hand_check_and_zero_weights() {
        let cb = toy_codebook();
        let codes = PqCodes {
            codes: vec![1, 0],
            m: 2,
            video_ids: ids(1),
            feature_name: "f".into(),
        };
        let s = pq_dot_scores(&[1.0, 1.0, 1.0, 1.0], 0.0, &cb, &codes, "E", "f").unwrap();
        assert_eq!(s.iter().next().unwrap().1, 2.0);
        let s0 = pq_dot_scores(&[0.0; 4], 0.5, &cb, &codes, "E", "f").unwrap();
        assert_eq!(s0.iter().next().unwrap().1, 0.5);
    }

    #[test]
    fn lut_path_matches_decode_path_on_thousand_videos() {
        let x = random_matrix(1000, 16, 21);
        let cb = pq_train(&x, 4, 16, 5).unwrap();
        let codes = pq_encode(&cb, &x).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let w: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = 0.3;
        let lut = pq_dot_scores(&w, b, &cb, &codes, "E", "f").unwrap();
        let decoded = pq_decode(&cb, &codes).unwrap();
        let mut max_diff = 0.0f64;
        let mut dense: Vec<f64> = Vec::with_capacity(1000);
        for i in 0..1000 {
            let dot: f64 = decoded
                .row(i)
                .iter()
                .zip(&w)
                .map(|(&v, &wi)| f64::from(v) * wi)
                .sum::<f64>()
                + b;
            dense.push(dot);
            let lut_score = lut.get(&decoded.video_ids[i]).unwrap();
            max_diff = max_diff.max((lut_score - dot).abs());
        }
        assert!(max_diff <= 1e-5, "max LUT/decode gap {max_diff}");
        // Pairs separated by more than the tolerance must rank identically.
        let lut_scores: Vec<f64> =
            decoded.video_ids.iter().map(|id| lut.get(id).unwrap()).collect();
        for i in 0..1000 {
            for j in (i + 1)..1000 {
                if (dense[i] - dense[j]).abs() > 1e-5 {
                    assert_eq!(
                        dense[i] > dense[j],
                        lut_scores[i] > lut_scores[j],
                        "order flip between rows {i} and {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn pq_train_is_deterministic() {
        let x = random_matrix(100, 8, 13);
        let a = pq_train(&x, 4, 8, 77).unwrap();
        let b = pq_train(&x, 4, 8, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uq_bin_arithmetic() {
        // Train on data whose column spans [0, 1] exactly.
        let x = FeatureMatrix::new("f", ids(3), vec![0.0, 0.3, 1.0], 1).unwrap();
        let model = uq_train(&x, 2).unwrap();
        assert_eq!((model.lo[0], model.hi[0]), (0.0, 1.0));
        let codes = uq_encode(&model, &x).unwrap();
        assert_eq!(codes.row_bins(0), vec![0]);
        assert_eq!(codes.row_bins(1), vec![0], "0.3 falls in the lower bin");
        assert_eq!(codes.row_bins(2), vec![1], "the max maps to the top bin");
        let decoded = uq_decode(&model, &codes).unwrap();
        assert_eq!(decoded.row(1), &[0.25]);
        assert_eq!(decoded.row(2), &[0.75]);
    }

    #[test]
    fn uq_degenerate_dimension() {
        let x = FeatureMatrix::new("f", ids(2), vec![0.7, 0.7], 1).unwrap();
        let model = uq_train(&x, 4).unwrap();
        let codes = uq_encode(&model, &x).unwrap();
        assert_eq!(codes.row_bins(0), vec![0]);
        let decoded = uq_decode(&model, &codes).unwrap();
        assert_eq!(decoded.row(0), &[0.7]);
    }

    #[test]
    fn uq_rejects_unsupported_bin_counts() {
        let x = random_matrix(5, 2, 1);
        assert!(uq_train(&x, 3).is_err());
        assert!(uq_train(&x, 512).is_err());
    }

    #[test]
    fn uq_packing_round_trip_all_widths() {
        let x = random_matrix(17, 11, 42);
        for k_uq in [2usize, 4, 16, 256] {
            let model = uq_train(&x, k_uq).unwrap();
            let codes = uq_encode(&model, &x).unwrap();
            let bits = model.bits() as usize;
            assert_eq!(codes.bytes_per_row(), (11 * bits + 7) / 8);
            // Reference (unpacked) bin computation.
            for i in 0..x.n() {
                let bins = codes.row_bins(i);
                for (j, &v) in x.row(i).iter().enumerate() {
                    let (lo, hi) = (model.lo[j], model.hi[j]);
                    let expect = if hi <= lo {
                        0usize
                    } else {
                        (((v - lo) / (hi - lo) * k_uq as f32).max(0.0) as usize).min(k_uq - 1)
                    };
                    assert_eq!(usize::from(bins[j]), expect, "row {i} dim {j} k={k_uq}");
                }
            }
        }
    }

    #[test]
    fn quantile_mode_narrows_range() {
        let mut values: Vec<f32> = (0..200).map(|i| i as f32 / 199.0).collect();
        values[0] = -100.0;
        values[199] = 100.0;
        let x = FeatureMatrix::new("f", ids(200), values, 1).unwrap();
        let minmax = uq_train(&x, 16).unwrap();
        let quant = uq_train_with_mode(&x, 16, UqEdgeMode::Quantile).unwrap();
        assert!(quant.hi[0] - quant.lo[0] < minmax.hi[0] - minmax.lo[0]);
        assert!(quant.lo[0] > -1.0 && quant.hi[0] < 2.0);
    }

    #[test]
    fn golden_index_bytes_for_toy_codebook() {
        let cb = toy_codebook();
        let codes = PqCodes {
            codes: vec![1, 0],
            m: 2,
            video_ids: vec![VideoId::new("v1").unwrap()],
            feature_name: "f".into(),
        };
        let got = index_to_bytes(&IndexData::Pq { codebook: cb, codes });
        // Expected bytes assembled independently, field by field.
        let mut want: Vec<u8> = Vec::new();
        want.extend_from_slice(b"CBVRIDX1");
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(1u8);
        for v in [1u32, 4, 2, 2, 2, 0] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        for f in [0.0f32, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0] {
            want.extend_from_slice(&f.to_le_bytes());
        }
        want.extend_from_slice(&[1u8, 0u8]);
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"v1");
        assert_eq!(got, want);
        // Frozen hex of the same fixture guards against accidental layout
        // drift.
        let hex: String = got.iter().map(|b| format!("{b:02x}")).collect();
        let want_hex = concat!(
            "4342565249445831", // magic
            "0100",             // version 1
            "01",               // codec PQ
            "010000000400000002000000020000000200000000000000", // n,d,m,d_sub,k,pad
            "00000000000000000000803f0000803f",                 // block 0 centroids
            "00000000000000000000803f0000803f",                 // block 1 centroids
            "0100",             // codes (1, 0)
            "01000000",         // id count
            "02007631",         // len 2, "v1"
        );
        assert_eq!(hex, want_hex);
    }

    #[test]
    fn index_round_trip_both_codecs() {
        let dir = tempfile::tempdir().unwrap();
        let x = random_matrix(30, 8, 55);
        let cb = pq_train(&x, 4, 4, 5).unwrap();
        let codes = pq_encode(&cb, &x).unwrap();
        let pq_data = IndexData::Pq { codebook: cb, codes };
        let path = dir.path().join("pq.idx");
        index_write(&path, &pq_data).unwrap();
        let read_back = index_read(&path).unwrap();
        assert_eq!(index_to_bytes(&read_back), index_to_bytes(&pq_data));
        if let (IndexData::Pq { codebook: a, codes: ca }, IndexData::Pq { codebook: b, codes: cb_ }) =
            (&pq_data, &read_back)
        {
            assert_eq!(a, b);
            assert_eq!(ca.codes, cb_.codes);
            assert_eq!(ca.video_ids, cb_.video_ids);
        } else {
            panic!("codec changed across round trip");
        }

        let model = uq_train(&x, 4).unwrap();
        let ucodes = uq_encode(&model, &x).unwrap();
        let uq_data = IndexData::Uq { model, codes: ucodes };
        let upath = dir.path().join("uq.idx");
        index_write(&upath, &uq_data).unwrap();
        let read_back = index_read(&upath).unwrap();
        assert_eq!(index_to_bytes(&read_back), index_to_bytes(&uq_data));
        let decoded_a = uq_data.decode().unwrap();
        let decoded_b = read_back.decode().unwrap();
        assert_eq!(decoded_a.values, decoded_b.values);
    }

    #[test]
    fn index_error_cases() {
        let x = random_matrix(10, 4, 8);
        let cb = pq_train(&x, 2, 4, 5).unwrap();
        let codes = pq_encode(&cb, &x).unwrap();
        let bytes = index_to_bytes(&IndexData::Pq { codebook: cb.clone(), codes: codes.clone() });

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(index_from_bytes(&bad_magic).unwrap_err().to_string().contains("bad magic"));

        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(index_from_bytes(&bad_version)
            .unwrap_err()
            .to_string()
            .contains("unsupported index version"));

        let truncated = &bytes[..bytes.len() / 2];
        assert!(index_from_bytes(truncated).unwrap_err().to_string().contains("truncated index"));

        let mut corrupt = codes;
        corrupt.codes[0] = 200;
        assert!(pq_decode(&cb, &corrupt).unwrap_err().to_string().contains("corrupt index"));
    }

    proptest! {
        /// Uniform quantization error is bounded by half a bin width per
        /// dimension.
        #[test]
        fn uq_error_within_half_bin(seed in 0u64..500, k_idx in 0usize..4) {
            let k_uq = [2usize, 4, 16, 256][k_idx];
            let x = random_matrix(20, 3, seed);
            let model = uq_train(&x, k_uq).unwrap();
            let decoded = uq_decode(&model, &uq_encode(&model, &x).unwrap()).unwrap();
            for i in 0..x.n() {
                for j in 0..x.d {
                    let width = (model.hi[j] - model.lo[j]) / k_uq as f32;
                    let err = (x.row(i)[j] - decoded.row(i)[j]).abs();
                    prop_assert!(err <= width / 2.0 + 1e-6,
                        "err {err} > half width {}", width / 2.0);
                }
            }
        }
    }
}
