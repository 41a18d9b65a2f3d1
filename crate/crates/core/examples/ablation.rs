//! Compare loss subsets and code-update strategies on one benchmark seed.
//!
//! cargo run --release --example ablation [seed]

use gchash::benchmark::Benchmark;
use gchash::trainer::{train, HashStrategy, LossSubset, TrainConfig};

fn main() -> gchash::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let bench = Benchmark::new(seed, 0.0)?;
    let base = Benchmark::train_config(seed);
    let variants: [(&str, TrainConfig); 5] = [
        ("full", base.clone()),
        ("gl+cl", TrainConfig { loss_subset: LossSubset::GlCl, ..base.clone() }),
        ("gl", TrainConfig { loss_subset: LossSubset::Gl, ..base.clone() }),
        ("no code update", TrainConfig { hash: HashStrategy::None, ..base.clone() }),
        ("value gap 0.1", TrainConfig { hash: HashStrategy::ValueGap { weight: 0.1 }, ..base.clone() }),
    ];
    println!("{:<16} {:>6} {:>8} {:>8} {:>8}", "variant", "epoch", "I2T", "T2I", "mean");
    for (name, cfg) in variants {
        let out = train(&bench.train, &bench.val_queries, &bench.train, &cfg).map_err(|a| a.source)?;
        let (i2t, t2i) = bench.test_map(&out.img, &out.txt)?;
        println!("{name:<16} {:>6} {i2t:>8.4} {t2i:>8.4} {:>8.4}", out.report.best_epoch, (i2t + t2i) / 2.0);
    }
    Ok(())
}
