//! Packed binary codes, Hamming ranking and MAP evaluation.
//!
//! Bit `b` of item `i` is 1 when the code entry is +1 and 0 when it is -1.
//! Bits past `d_bits` in the last word are always zero, so XOR-popcount over
//! whole words is the exact Hamming distance.
//!
//! Ranking sorts by ascending distance and breaks ties by ascending item
//! index. A query with no relevant item in the retrieval set has no defined
//! AP: it is left out of the mean and counted in [`EvalReport::skipped`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

pub const CMB_MAGIC: &[u8; 4] = b"CMB1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    n: usize,
    d_bits: usize,
    words_per_code: usize,
    words: Vec<u64>,
}

pub fn words_for(d_bits: usize) -> usize {
    d_bits.div_ceil(64)
}

impl PackedCodes {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d_bits(&self) -> usize {
        self.d_bits
    }

    pub fn words_per_code(&self) -> usize {
        self.words_per_code
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Wraps raw words, rejecting nonzero padding bits.
    pub fn from_words(n: usize, d_bits: usize, words: Vec<u64>) -> Result<Self> {
        if d_bits == 0 {
            return Err(Error::InvalidParameter("d_bits must be >= 1".into()));
        }
        let wpc = words_for(d_bits);
        if words.len() != n * wpc {
            return Err(Error::DimensionMismatch(format!(
                "{} words for {n} codes of {d_bits} bits",
                words.len()
            )));
        }
        let tail = d_bits % 64;
        if tail != 0 {
            let pad_mask = !((1u64 << tail) - 1);
            if let Some(i) = (0..n).find(|i| words[i * wpc + wpc - 1] & pad_mask != 0) {
                return Err(Error::Malformed(format!("padding bits set in code {i}")));
            }
        }
        Ok(Self {
            n,
            d_bits,
            words_per_code: wpc,
            words,
        })
    }

    /// ±1 matrix back from the packed bits.
    pub fn unpack(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n, self.d_bits), |(i, b)| {
            if self.row(i)[b / 64] >> (b % 64) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CMB_MAGIC)?;
        binio::write_u32(w, binio::dim_u32(self.n, "n")?)?;
        binio::write_u32(w, binio::dim_u32(self.d_bits, "d_bits")?)?;
        for word in &self.words {
            w.write_all(&word.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, CMB_MAGIC)?;
        let n = binio::read_u32(r, "n")? as usize;
        let d_bits = binio::read_u32(r, "d_bits")? as usize;
        if d_bits == 0 {
            return Err(Error::Malformed("zero code length".into()));
        }
        let words = binio::read_u64s(r, n * words_for(d_bits), "code words")?;
        binio::expect_eof(r)?;
        Self::from_words(n, d_bits, words)
    }
}

/// Packs a ±1 matrix, one row per item.
pub fn pack(signs: ArrayView2<f64>) -> Result<PackedCodes> {
    let (n, d_bits) = signs.dim();
    if d_bits == 0 {
        return Err(Error::InvalidParameter("d_bits must be >= 1".into()));
    }
    let wpc = words_for(d_bits);
    let mut words = vec![0u64; n * wpc];
    for ((i, b), &v) in signs.indexed_iter() {
        if v == 1.0 {
            words[i * wpc + b / 64] |= 1u64 << (b % 64);
        } else if v != -1.0 {
            return Err(Error::NotBinary { row: i, col: b, value: v });
        }
    }
    Ok(PackedCodes {
        n,
        d_bits,
        words_per_code: wpc,
        words,
    })
}

pub fn save_codes(codes: &PackedCodes, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * codes.words.len());
    codes.write_to(&mut buf)?;
    binio::write_atomic(path.as_ref(), |w| w.write_all(&buf))
}

pub fn load_codes(path: impl AsRef<Path>) -> Result<PackedCodes> {
    let mut r = binio::open(path.as_ref())?;
    PackedCodes::read_from(&mut r)
}

/// Popcount of the XOR of two packed codes.
pub fn hamming(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "codes of {} and {} words",
            a.len(),
            b.len()
        )));
    }
    Ok(hamming_unchecked(a, b))
}

#[inline]
fn hamming_unchecked(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Retrieval item indices ordered by ascending Hamming distance to `query`,
/// ties by ascending index. Counting sort over the `d_bits + 1` possible
/// distances.
pub fn hamming_ranking(query: &[u64], codes: &PackedCodes) -> Result<Vec<usize>> {
    if query.len() != codes.words_per_code {
        return Err(Error::DimensionMismatch(format!(
            "query of {} words against codes of {}",
            query.len(),
            codes.words_per_code
        )));
    }
    let dists: Vec<u32> = (0..codes.n)
        .map(|i| hamming_unchecked(query, codes.row(i)))
        .collect();
    let mut starts = vec![0usize; codes.d_bits + 2];
    for &d in &dists {
        starts[d as usize + 1] += 1;
    }
    for k in 1..starts.len() {
        starts[k] += starts[k - 1];
    }
    let mut order = vec![0usize; codes.n];
    for (i, &d) in dists.iter().enumerate() {
        let slot = &mut starts[d as usize];
        order[*slot] = i;
        *slot += 1;
    }
    Ok(order)
}

/// Item indices by descending score, ties by ascending index.
pub fn score_ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// AP of a ranked relevance list, optionally truncated to the top `cutoff`.
///
/// `None` when the full list holds no relevant item. With a cutoff, a query
/// whose relevant items all fall below it scores 0.
pub fn average_precision(ranked: &[bool], cutoff: Option<usize>) -> Option<f64> {
    if !ranked.iter().any(|&r| r) {
        return None;
    }
    let limit = cutoff.map_or(ranked.len(), |c| c.min(ranked.len()));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (q, &rel) in ranked[..limit].iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (q + 1) as f64;
        }
    }
    Some(if hits == 0 { 0.0 } else { sum / hits as f64 })
}

/// Hamming-ranks the retrieval set for one query and scores it.
pub fn rank_and_ap(
    query: &[u64],
    codes: &PackedCodes,
    relevance: &[bool],
    cutoff: Option<usize>,
) -> Result<Option<f64>> {
    if relevance.len() != codes.n {
        return Err(Error::DimensionMismatch(format!(
            "{} relevance flags for {} items",
            relevance.len(),
            codes.n
        )));
    }
    let order = hamming_ranking(query, codes)?;
    let ranked: Vec<bool> = order.iter().map(|&i| relevance[i]).collect();
    Ok(average_precision(&ranked, cutoff))
}

/// Multi-hot labels packed into words; two items are relevant to each other
/// when they share at least one label.
#[derive(Debug, Clone)]
pub struct LabelBits {
    n: usize,
    wpr: usize,
    words: Vec<u64>,
}

impl LabelBits {
    pub fn new(labels: ArrayView2<u8>) -> Self {
        let (n, c) = labels.dim();
        let wpr = c.div_ceil(64).max(1);
        let mut words = vec![0u64; n * wpr];
        for ((i, j), &v) in labels.indexed_iter() {
            if v != 0 {
                words[i * wpr + j / 64] |= 1 << (j % 64);
            }
        }
        Self { n, wpr, words }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.words[i * self.wpr..(i + 1) * self.wpr]
    }

    pub fn relevant(&self, i: usize, other: &LabelBits, j: usize) -> bool {
        self.row(i).iter().zip(other.row(j)).any(|(a, b)| a & b != 0)
    }

    pub fn relevance_row(&self, i: usize, other: &LabelBits) -> Vec<bool> {
        (0..other.n).map(|j| self.relevant(i, other, j)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// Image queries against text codes.
    I2T,
    /// Text queries against image codes.
    T2I,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::I2T => "I2T",
            Task::T2I => "T2I",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "i2t" => Ok(Task::I2T),
            "t2i" => Ok(Task::T2I),
            other => Err(format!("unknown task {other:?} (i2t or t2i)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub n_queries: usize,
    pub n_retrieval: usize,
    /// Per-query AP over the full ranking; `None` for skipped queries.
    pub per_query_ap: Vec<Option<f64>>,
    pub map: f64,
    /// MAP over the top-N items for each requested cutoff.
    pub map_at: BTreeMap<usize, f64>,
    /// Queries with no relevant retrieval item.
    pub skipped: usize,
}

impl EvalReport {
    /// Tab-separated rendering: a summary block then one line per query.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "task\t{}", self.task).unwrap();
        writeln!(s, "n_queries\t{}", self.n_queries).unwrap();
        writeln!(s, "n_retrieval\t{}", self.n_retrieval).unwrap();
        writeln!(s, "skipped\t{}", self.skipped).unwrap();
        writeln!(s, "map\t{:.10}", self.map).unwrap();
        for (n, v) in &self.map_at {
            writeln!(s, "map@{n}\t{v:.10}").unwrap();
        }
        writeln!(s, "query\tap").unwrap();
        for (q, ap) in self.per_query_ap.iter().enumerate() {
            match ap {
                Some(v) => writeln!(s, "{q}\t{v:.10}").unwrap(),
                None => writeln!(s, "{q}\tskipped").unwrap(),
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Hamming-ranks every retrieval item for every query and reports MAP plus
/// MAP@N for each cutoff.
pub fn evaluate(
    queries: &PackedCodes,
    query_labels: ArrayView2<u8>,
    retrieval: &PackedCodes,
    retrieval_labels: ArrayView2<u8>,
    cutoffs: &[usize],
    task: Task,
) -> Result<EvalReport> {
    if queries.n == 0 {
        return Err(Error::EmptyQuerySet);
    }
    if queries.d_bits != retrieval.d_bits {
        return Err(Error::DimensionMismatch(format!(
            "query codes have {} bits, retrieval codes {}",
            queries.d_bits, retrieval.d_bits
        )));
    }
    if query_labels.nrows() != queries.n || retrieval_labels.nrows() != retrieval.n {
        return Err(Error::DimensionMismatch("label rows differ from code rows".into()));
    }
    if query_labels.ncols() != retrieval_labels.ncols() {
        return Err(Error::DimensionMismatch("label class counts differ".into()));
    }
    let ql = LabelBits::new(query_labels);
    let rl = LabelBits::new(retrieval_labels);

    let per_query: Vec<(Option<f64>, Vec<f64>)> = (0..queries.n)
        .into_par_iter()
        .map(|q| {
            let order = hamming_ranking(queries.row(q), retrieval).expect("same width");
            let ranked: Vec<bool> = order.iter().map(|&j| ql.relevant(q, &rl, j)).collect();
            let full = average_precision(&ranked, None);
            let at = cutoffs
                .iter()
                .map(|&c| average_precision(&ranked, Some(c)).unwrap_or(0.0))
                .collect();
            (full, at)
        })
        .collect();

    Ok(summarize(task, queries.n, retrieval.n, per_query, cutoffs))
}

fn summarize(
    task: Task,
    n_queries: usize,
    n_retrieval: usize,
    per_query: Vec<(Option<f64>, Vec<f64>)>,
    cutoffs: &[usize],
) -> EvalReport {
    let counted: Vec<&(Option<f64>, Vec<f64>)> =
        per_query.iter().filter(|(ap, _)| ap.is_some()).collect();
    let denom = counted.len().max(1) as f64;
    let map = counted.iter().map(|(ap, _)| ap.unwrap()).sum::<f64>() / denom;
    let map_at = cutoffs
        .iter()
        .enumerate()
        .map(|(k, &c)| (c, counted.iter().map(|(_, at)| at[k]).sum::<f64>() / denom))
        .collect();
    EvalReport {
        task,
        n_queries,
        n_retrieval,
        skipped: n_queries - counted.len(),
        per_query_ap: per_query.into_iter().map(|(ap, _)| ap).collect(),
        map,
        map_at,
    }
}

/// MAP@N of ranking by a real-valued similarity matrix.
///
/// Row `i` of `sim` scores every candidate against query `i`. With
/// `exclude_self`, the query's own column is removed (used when queries and
/// candidates are the same set).
pub fn score_map(
    sim: ArrayView2<f64>,
    query_labels: ArrayView2<u8>,
    candidate_labels: ArrayView2<u8>,
    cutoffs: &[usize],
    exclude_self: bool,
) -> Result<BTreeMap<usize, f64>> {
    if sim.nrows() != query_labels.nrows() || sim.ncols() != candidate_labels.nrows() {
        return Err(Error::DimensionMismatch("similarity shape vs label rows".into()));
    }
    if sim.nrows() == 0 {
        return Err(Error::EmptyQuerySet);
    }
    let ql = LabelBits::new(query_labels);
    let cl = LabelBits::new(candidate_labels);
    let per_query: Vec<(Option<f64>, Vec<f64>)> = (0..sim.nrows())
        .into_par_iter()
        .map(|q| {
            let row = sim.row(q);
            let scores: Vec<f64> = row.iter().copied().collect();
            let ranked: Vec<bool> = score_ranking(&scores)
                .into_iter()
                .filter(|&j| !(exclude_self && j == q))
                .map(|j| ql.relevant(q, &cl, j))
                .collect();
            let full = average_precision(&ranked, None);
            let at = cutoffs
                .iter()
                .map(|&c| average_precision(&ranked, Some(c)).unwrap_or(0.0))
                .collect();
            (full, at)
        })
        .collect();
    Ok(summarize(Task::I2T, sim.nrows(), sim.ncols(), per_query, cutoffs).map_at)
}
