//! Build the graph-coherence similarity of a noisy dataset and compare how
//! well each similarity ranks same-class items.
//!
//! cargo run --release --example similarity_graph

use gchash::benchmark::Benchmark;
use gchash::cli::{compare_similarities, similarity_table_tsv};
use gchash::simgraph::{GcModel, GcParams};

fn main() -> gchash::Result<()> {
    let ds = Benchmark::new(0, 0.2)?.train;
    let params = GcParams::default();
    let gc = GcModel::build(&ds, &params)?;
    println!("m = {}, k = {}, beta = {}, nnz(P_c) = {}", gc.m(), params.k, gc.beta, gc.pcond.nnz());

    let (cols, vals) = gc.pcond.row(0);
    let mut top: Vec<(u32, f64)> = cols.iter().copied().zip(vals.iter().copied()).collect();
    top.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("strongest neighbors of item 0:");
    for (j, p) in top.iter().take(5) {
        println!("  {j:4}  p = {p:.5}  d = {:.4}  s = {:.4}", gc.dist[[0, *j as usize]], gc.s_final[[0, *j as usize]]);
    }

    let rows = compare_similarities(&ds, &params, &[50, 100, 200, 500])?;
    print!("{}", similarity_table_tsv(&rows));
    Ok(())
}
