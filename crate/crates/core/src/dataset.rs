//! Paired image/text feature sets.
//!
//! A [`PairedDataset`] holds `m` coexistent pairs: row `i` of the image matrix
//! and row `i` of the text matrix describe the same item. Labels are optional
//! and only ever consumed by evaluation.
//!
//! On disk the dataset uses the CMF layout (all little-endian):
//!
//! ```text
//! "CMF1"            4 bytes
//! m, d_img, d_txt   u32 each
//! n_classes         u32 (0 = no labels)
//! image features    f32, row-major, m * d_img
//! text features     f32, row-major, m * d_txt
//! labels            u8 0/1, row-major, m * n_classes (only if n_classes > 0)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

pub const CMF_MAGIC: &[u8; 4] = b"CMF1";
pub const CMF_HEADER_BYTES: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    img: Array2<f32>,
    txt: Array2<f32>,
    labels: Option<Array2<u8>>,
}

impl PairedDataset {
    /// Validates and wraps the given matrices.
    ///
    /// Rejects empty sets, mismatched row counts, negative or non-finite
    /// features, label values other than 0/1 and label rows with no set bit.
    pub fn new(img: Array2<f32>, txt: Array2<f32>, labels: Option<Array2<u8>>) -> Result<Self> {
        let m = img.nrows();
        if m == 0 {
            return Err(Error::EmptyDataset);
        }
        if txt.nrows() != m {
            return Err(Error::DimensionMismatch(format!(
                "image rows {m} != text rows {}",
                txt.nrows()
            )));
        }
        if img.ncols() == 0 || txt.ncols() == 0 {
            return Err(Error::DimensionMismatch("zero feature dimension".into()));
        }
        check_features(&img)?;
        check_features(&txt)?;
        if let Some(l) = &labels {
            if l.nrows() != m {
                return Err(Error::DimensionMismatch(format!(
                    "label rows {} != {m}",
                    l.nrows()
                )));
            }
            if l.ncols() == 0 {
                return Err(Error::DimensionMismatch("label matrix has no classes".into()));
            }
            for (row, r) in l.outer_iter().enumerate() {
                let mut any = false;
                for (col, &v) in r.iter().enumerate() {
                    match v {
                        0 => {}
                        1 => any = true,
                        value => return Err(Error::InvalidLabel { row, col, value }),
                    }
                }
                if !any {
                    return Err(Error::UnlabeledItem(row));
                }
            }
        }
        Ok(Self { img, txt, labels })
    }

    pub fn m(&self) -> usize {
        self.img.nrows()
    }

    pub fn d_img(&self) -> usize {
        self.img.ncols()
    }

    pub fn d_txt(&self) -> usize {
        self.txt.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.as_ref().map_or(0, |l| l.ncols())
    }

    pub fn img(&self) -> &Array2<f32> {
        &self.img
    }

    pub fn txt(&self) -> &Array2<f32> {
        &self.txt
    }

    pub fn features(&self, modality: Modality) -> &Array2<f32> {
        match modality {
            Modality::Image => &self.img,
            Modality::Text => &self.txt,
        }
    }

    pub fn labels(&self) -> Option<&Array2<u8>> {
        self.labels.as_ref()
    }

    pub fn require_labels(&self, what: &str) -> Result<&Array2<u8>> {
        self.labels
            .as_ref()
            .ok_or_else(|| Error::MissingLabels(what.to_string()))
    }

    /// Rows `idx` (in the given order) as a new dataset.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.m()) {
            return Err(Error::InvalidParameter(format!(
                "index {bad} out of range for m = {}",
                self.m()
            )));
        }
        Self::new(
            self.img.select(Axis(0), idx),
            self.txt.select(Axis(0), idx),
            self.labels.as_ref().map(|l| l.select(Axis(0), idx)),
        )
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CMF_MAGIC)?;
        binio::write_u32(w, binio::dim_u32(self.m(), "m")?)?;
        binio::write_u32(w, binio::dim_u32(self.d_img(), "d_img")?)?;
        binio::write_u32(w, binio::dim_u32(self.d_txt(), "d_txt")?)?;
        binio::write_u32(w, binio::dim_u32(self.n_classes(), "n_classes")?)?;
        binio::write_f32s(w, self.img.iter().copied())?;
        binio::write_f32s(w, self.txt.iter().copied())?;
        if let Some(l) = &self.labels {
            let bytes: Vec<u8> = l.iter().copied().collect();
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, CMF_MAGIC)?;
        let m = binio::read_u32(r, "m")? as usize;
        let d_img = binio::read_u32(r, "d_img")? as usize;
        let d_txt = binio::read_u32(r, "d_txt")? as usize;
        let n_classes = binio::read_u32(r, "n_classes")? as usize;
        if m == 0 {
            return Err(Error::EmptyDataset);
        }
        if d_img == 0 || d_txt == 0 {
            return Err(Error::DimensionMismatch("zero feature dimension in header".into()));
        }
        let img = binio::read_f32s(r, m * d_img, "image features")?;
        let txt = binio::read_f32s(r, m * d_txt, "text features")?;
        let labels = if n_classes > 0 {
            let mut bytes = vec![0u8; m * n_classes];
            binio::read_exact(r, &mut bytes, "labels")?;
            Some(Array2::from_shape_vec((m, n_classes), bytes).expect("shape checked"))
        } else {
            None
        };
        binio::expect_eof(r)?;
        Self::new(
            Array2::from_shape_vec((m, d_img), img).expect("shape checked"),
            Array2::from_shape_vec((m, d_txt), txt).expect("shape checked"),
            labels,
        )
    }
}

fn check_features(x: &Array2<f32>) -> Result<()> {
    for ((row, col), &v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("feature at row {row}, column {col}")));
        }
        if v < 0.0 {
            return Err(Error::NegativeFeature { row, col, value: v });
        }
    }
    Ok(())
}

/// Reads a CMF file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<PairedDataset> {
    let mut r = binio::open(path.as_ref())?;
    PairedDataset::read_from(&mut r)
}

/// Writes a CMF file; the destination is replaced atomically.
pub fn save_dataset(ds: &PairedDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::with_capacity(cmf_size(ds.m(), ds.d_img(), ds.d_txt(), ds.n_classes()));
    ds.write_to(&mut buf)?;
    binio::write_atomic(path.as_ref(), |w| w.write_all(&buf))
}

/// Exact byte length of a CMF file with the given shape.
pub fn cmf_size(m: usize, d_img: usize, d_txt: usize, n_classes: usize) -> usize {
    CMF_HEADER_BYTES + 4 * m * (d_img + d_txt) + m * n_classes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Image => Modality::Text,
            Modality::Text => Modality::Image,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "image" | "img" => Ok(Modality::Image),
            "text" | "txt" => Ok(Modality::Text),
            other => Err(format!("unknown modality {other:?} (expected image or text)")),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Text => "text",
        })
    }
}

/// Parameters of the clustered synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_clusters: usize,
    pub per_cluster: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub noise: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_clusters: 5,
            per_cluster: 200,
            d_img: 32,
            d_txt: 32,
            noise: 0.2,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

/// Generates `n_clusters * per_cluster` pairs laid out cluster by cluster.
///
/// Each cluster owns an image prototype and an independent text prototype,
/// both uniform on `[0, 1]^d`. Items are prototype plus Gaussian noise,
/// clamped at zero. The label is the one-hot cluster id, moved to a uniformly
/// chosen other cluster with probability `label_noise`.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<PairedDataset> {
    if cfg.n_clusters < 2 {
        return Err(Error::InvalidParameter("n_clusters must be >= 2".into()));
    }
    if cfg.per_cluster < 2 {
        return Err(Error::InvalidParameter("per_cluster must be >= 2".into()));
    }
    if cfg.d_img == 0 || cfg.d_txt == 0 {
        return Err(Error::InvalidParameter("feature dimensions must be >= 1".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise {} must be >= 0", cfg.noise)));
    }
    if !(0.0..=1.0).contains(&cfg.label_noise) {
        return Err(Error::InvalidParameter(format!(
            "label_noise {} must lie in [0, 1]",
            cfg.label_noise
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos: Vec<(Vec<f32>, Vec<f32>)> = (0..cfg.n_clusters)
        .map(|_| {
            let img = (0..cfg.d_img).map(|_| rng.random::<f32>()).collect();
            let txt = (0..cfg.d_txt).map(|_| rng.random::<f32>()).collect();
            (img, txt)
        })
        .collect();

    let m = cfg.n_clusters * cfg.per_cluster;
    let normal = Normal::new(0.0f64, cfg.noise).expect("noise validated");
    let mut img = Array2::<f32>::zeros((m, cfg.d_img));
    let mut txt = Array2::<f32>::zeros((m, cfg.d_txt));
    let mut labels = Array2::<u8>::zeros((m, cfg.n_clusters));

    let jitter = |proto: &[f32], out: ndarray::ArrayViewMut1<f32>, rng: &mut ChaCha8Rng| {
        for (o, &p) in out.into_iter().zip(proto) {
            let v = f64::from(p) + normal.sample(rng);
            *o = v.max(0.0) as f32;
        }
    };

    for (c, (proto_img, proto_txt)) in protos.iter().enumerate() {
        for j in 0..cfg.per_cluster {
            let i = c * cfg.per_cluster + j;
            jitter(proto_img, img.row_mut(i), &mut rng);
            jitter(proto_txt, txt.row_mut(i), &mut rng);
            let mut label = c;
            if cfg.label_noise > 0.0 && rng.random::<f64>() < cfg.label_noise {
                let shift = rng.random_range(1..cfg.n_clusters);
                label = (c + shift) % cfg.n_clusters;
            }
            labels[[i, label]] = 1;
        }
    }

    PairedDataset::new(img, txt, Some(labels))
}

/// How many retrieval items are used for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainSize {
    All,
    Count(usize),
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub test_queries: f64,
    pub validation_queries: f64,
    pub train: TrainSize,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            test_queries: 0.0,
            validation_queries: 0.0,
            train: TrainSize::All,
        }
    }
}

/// Index lists into a dataset. Each list is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub retrieval: Vec<usize>,
    pub train: Vec<usize>,
    pub validation_query: Vec<usize>,
    pub test_query: Vec<usize>,
}

impl SplitSpec {
    /// Checks disjointness and `train ⊆ retrieval` against a dataset of `m` rows.
    pub fn validate(&self, m: usize) -> Result<()> {
        let mut owner = vec![0u8; m];
        for (tag, list) in [
            (1u8, &self.retrieval),
            (2, &self.validation_query),
            (3, &self.test_query),
        ] {
            for &i in list {
                if i >= m {
                    return Err(Error::InvalidParameter(format!("split index {i} >= m = {m}")));
                }
                if owner[i] != 0 {
                    return Err(Error::InvalidParameter(format!(
                        "index {i} appears in more than one split"
                    )));
                }
                owner[i] = tag;
            }
        }
        if let Some(&i) = self.train.iter().find(|&&i| i >= m || owner[i] != 1) {
            return Err(Error::InvalidParameter(format!(
                "train index {i} is not in the retrieval set"
            )));
        }
        if self.retrieval.is_empty() {
            return Err(Error::InvalidParameter("retrieval set is empty".into()));
        }
        Ok(())
    }
}

/// Seeded random split into test queries, validation queries and a retrieval
/// set from which the training subset is drawn.
pub fn make_split(m: usize, fractions: &SplitFractions, seed: u64) -> Result<SplitSpec> {
    let SplitFractions {
        test_queries,
        validation_queries,
        train,
    } = *fractions;
    for (name, f) in [("test", test_queries), ("validation", validation_queries)] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidParameter(format!("{name} fraction {f} not in [0, 1]")));
        }
    }
    if test_queries + validation_queries > 1.0 {
        return Err(Error::InvalidParameter("query fractions sum to more than 1".into()));
    }
    let n_test = (test_queries * m as f64).round() as usize;
    let n_val = (validation_queries * m as f64).round() as usize;
    if n_test + n_val >= m {
        return Err(Error::InvalidParameter("split leaves the retrieval set empty".into()));
    }
    let n_ret = m - n_test - n_val;
    let n_train = match train {
        TrainSize::All => n_ret,
        TrainSize::Count(c) if c >= 1 && c <= n_ret => c,
        TrainSize::Fraction(f) if f > 0.0 && f <= 1.0 => ((f * n_ret as f64).round() as usize).max(1),
        other => {
            return Err(Error::InvalidParameter(format!(
                "train size {other:?} incompatible with {n_ret} retrieval items"
            )))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut rng);
    let mut test_query = perm[..n_test].to_vec();
    let mut validation_query = perm[n_test..n_test + n_val].to_vec();
    let mut retrieval = perm[n_test + n_val..].to_vec();
    let mut train_idx = retrieval.clone();
    train_idx.shuffle(&mut rng);
    train_idx.truncate(n_train);

    for v in [&mut test_query, &mut validation_query, &mut retrieval, &mut train_idx] {
        v.sort_unstable();
    }
    Ok(SplitSpec {
        retrieval,
        train: train_idx,
        validation_query,
        test_query,
    })
}
