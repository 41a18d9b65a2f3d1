//! Train both hashing networks on the synthetic benchmark and report test MAP.
//!
//! cargo run --release --example train_benchmark [seed]

use gchash::benchmark::Benchmark;
use gchash::trainer::{train, EpochRecord};

fn main() -> gchash::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let bench = Benchmark::new(seed, 0.0)?;
    let cfg = Benchmark::train_config(seed);

    let untrained = {
        let (img, txt) = cfg.init_nets(bench.train.d_img(), bench.train.d_txt())?;
        bench.test_map(&img, &txt)?
    };

    let out = train(&bench.train, &bench.val_queries, &bench.train, &cfg).map_err(|a| a.source)?;
    println!("{}", EpochRecord::TSV_HEADER);
    for rec in &out.report.epochs {
        println!("{}", rec.tsv_line());
    }
    let (i2t, t2i) = bench.test_map(&out.img, &out.txt)?;
    println!("best epoch {} ({:?})", out.report.best_epoch, out.report.stop);
    println!("test MAP  I2T {i2t:.4} (untrained {:.4})  T2I {t2i:.4} (untrained {:.4})", untrained.0, untrained.1);
    Ok(())
}
