//! Encode queries and a database into packed codes, list Hamming neighbors
//! and score the ranking with MAP@N.
//!
//! cargo run --release --example encode_and_search

use gchash::benchmark::Benchmark;
use gchash::net::SgdConfig;
use gchash::retrieval::{evaluate, hamming, hamming_ranking, Task};
use gchash::trainer::{encode_codes, train};

fn main() -> gchash::Result<()> {
    let bench = Benchmark::new(1, 0.0)?;
    let mut cfg = Benchmark::train_config(1);
    cfg.sgd = SgdConfig { epochs: 15, ..cfg.sgd };
    let out = train(&bench.train, &bench.val_queries, &bench.train, &cfg).map_err(|a| a.source)?;

    let q = encode_codes(&out.img, bench.test_queries.img())?;
    let db = encode_codes(&out.txt, bench.train.txt())?;
    println!("{} query codes, {} database codes, {} bits in {} word(s)", q.n(), db.n(), q.d_bits(), q.words_per_code());

    let labels = |ds: &gchash::dataset::PairedDataset| ds.labels().expect("benchmark is labeled").clone();
    let (ql, dl) = (labels(&bench.test_queries), labels(&bench.train));
    let order = hamming_ranking(q.row(0), &db)?;
    println!("query 0 (class {:?}):", ql.row(0).to_vec());
    for &j in order.iter().take(5) {
        println!("  item {j:4}  hamming {:2}  class {:?}", hamming(q.row(0), db.row(j))?, dl.row(j).to_vec());
    }

    let report = evaluate(&q, ql.view(), &db, dl.view(), &[50, 100, 500], Task::I2T)?;
    println!("I2T MAP {:.4} over {} queries", report.map, report.n_queries);
    for (n, v) in &report.map_at {
        println!("  MAP@{n} {v:.4}");
    }
    Ok(())
}
