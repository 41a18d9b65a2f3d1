//! Save trained networks, reload them and confirm the codes are unchanged.
//!
//! cargo run --release --example checkpoints

use gchash::benchmark::Benchmark;
use gchash::dataset::Modality;
use gchash::net::{load_checkpoint, save_checkpoint, SgdConfig};
use gchash::retrieval::{load_codes, save_codes};
use gchash::trainer::{encode_codes, train};

fn main() -> gchash::Result<()> {
    let bench = Benchmark::new(2, 0.0)?;
    let mut cfg = Benchmark::train_config(2);
    cfg.sgd = SgdConfig { epochs: 5, ..cfg.sgd };
    let out = train(&bench.train, &bench.val_queries, &bench.train, &cfg).map_err(|a| a.source)?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("img.ckpt");
    save_checkpoint(&out.img, Modality::Image, &path)?;
    let (modality, img) = load_checkpoint(&path)?;
    println!(
        "{} checkpoint: {} -> {} -> {} bits, {} bytes",
        modality,
        img.d_in(),
        img.hidden(),
        img.d_bits(),
        std::fs::metadata(&path)?.len()
    );

    let before = encode_codes(&out.img, bench.test_queries.img())?;
    let after = encode_codes(&img, bench.test_queries.img())?;
    let codes = dir.path().join("q.cmb");
    save_codes(&after, &codes)?;
    println!("codes identical after reload: {}", before == load_codes(&codes)?);
    Ok(())
}
