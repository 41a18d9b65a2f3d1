//! Binary cache of [`GcModel`]s keyed by a SHA-256 of the features and
//! parameters.
//!
//! Layout (little-endian): `"GCM1"`, `u32 m`, `f64 beta`, dist (`m*m` f64),
//! per-row neighbor counts (`m` u32), neighbor columns (u32), neighbor
//! weights (f64), prob (`m*m` f64), s_final (`m*m` f64).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::{GcModel, GcParams, RowSparse};
use crate::binio;
use crate::dataset::PairedDataset;
use crate::error::{Error, Result};

pub const GCM_MAGIC: &[u8; 4] = b"GCM1";

/// Hex SHA-256 over the training features and GC parameters.
pub fn cache_key(ds: &PairedDataset, params: &GcParams) -> String {
    let mut h = Sha256::new();
    h.update(b"gchash-gc-v1");
    for v in [ds.m(), ds.d_img(), ds.d_txt()] {
        h.update((v as u64).to_le_bytes());
    }
    for v in ds.img().iter().chain(ds.txt().iter()) {
        h.update(v.to_le_bytes());
    }
    h.update(serde_json::to_vec(params).expect("params serialize"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_gc_model(model: &GcModel, path: impl AsRef<Path>) -> Result<()> {
    let m = binio::dim_u32(model.m(), "m")?;
    binio::write_atomic(path.as_ref(), |w| {
        w.write_all(GCM_MAGIC)?;
        binio::write_u32(w, m)?;
        w.write_all(&model.beta.to_le_bytes())?;
        binio::write_f64s(w, model.dist.iter().copied())?;
        let (indptr, indices, values) = model.pcond.raw_parts();
        for win in indptr.windows(2) {
            binio::write_u32(w, (win[1] - win[0]) as u32)?;
        }
        for &c in indices {
            binio::write_u32(w, c)?;
        }
        binio::write_f64s(w, values.iter().copied())?;
        binio::write_f64s(w, model.prob.iter().copied())?;
        binio::write_f64s(w, model.s_final.iter().copied())
    })
}

pub fn load_gc_model(path: impl AsRef<Path>) -> Result<GcModel> {
    let mut r = binio::open(path.as_ref())?;
    read_gc_model(&mut r)
}

fn read_gc_model<R: Read>(r: &mut R) -> Result<GcModel> {
    binio::read_magic(r, GCM_MAGIC)?;
    let m = binio::read_u32(r, "m")? as usize;
    let beta = binio::read_f64s(r, 1, "beta")?[0];
    let square = |v: Vec<f64>| Array2::from_shape_vec((m, m), v).expect("sized read");
    let dist = square(binio::read_f64s(r, m * m, "dist")?);
    let mut counts = Vec::with_capacity(m);
    for _ in 0..m {
        counts.push(binio::read_u32(r, "neighbor count")? as usize);
    }
    let nnz: usize = counts.iter().sum();
    let mut cols = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        let c = binio::read_u32(r, "neighbor column")?;
        if c as usize >= m {
            return Err(Error::Malformed(format!("neighbor column {c} >= m = {m}")));
        }
        cols.push(c);
    }
    let vals = binio::read_f64s(r, nnz, "neighbor weights")?;
    let mut rows = Vec::with_capacity(m);
    let mut at = 0;
    for c in counts {
        rows.push(
            cols[at..at + c]
                .iter()
                .copied()
                .zip(vals[at..at + c].iter().copied())
                .collect(),
        );
        at += c;
    }
    let prob = square(binio::read_f64s(r, m * m, "prob")?);
    let s_final = square(binio::read_f64s(r, m * m, "s_final")?);
    binio::expect_eof(r)?;
    Ok(GcModel {
        dist,
        pcond: RowSparse::from_rows(m, rows),
        prob,
        s_final,
        beta,
    })
}

/// A directory of cached GC models.
#[derive(Debug, Clone)]
pub struct GcCache {
    dir: PathBuf,
}

impl GcCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.gcm"))
    }

    /// Loads the cached model for `(ds, params)` or builds and stores it.
    /// The flag reports whether the cache was hit.
    pub fn get_or_build(&self, ds: &PairedDataset, params: &GcParams) -> Result<(GcModel, bool)> {
        let path = self.path_for(&cache_key(ds, params));
        if path.exists() {
            return Ok((load_gc_model(&path)?, true));
        }
        let model = GcModel::build(ds, params)?;
        std::fs::create_dir_all(&self.dir)?;
        save_gc_model(&model, &path)?;
        Ok((model, false))
    }
}
