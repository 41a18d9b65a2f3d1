//! Generate a clustered paired dataset, split it and write the parts as CMF.
//!
//! cargo run --release --example synthetic_split

use gchash::dataset::{gen_synthetic, load_dataset, make_split, save_dataset, SplitFractions, SyntheticConfig, TrainSize};

fn main() -> gchash::Result<()> {
    let ds = gen_synthetic(&SyntheticConfig {
        n_clusters: 4,
        per_cluster: 150,
        d_img: 24,
        d_txt: 16,
        noise: 0.3,
        label_noise: 0.1,
        seed: 7,
    })?;
    println!("{} items, d_img {}, d_txt {}, {} classes", ds.m(), ds.d_img(), ds.d_txt(), ds.n_classes());

    let split = make_split(
        ds.m(),
        &SplitFractions {
            test_queries: 0.1,
            validation_queries: 0.1,
            train: TrainSize::Count(300),
        },
        7,
    )?;
    println!(
        "retrieval {}, train {}, validation queries {}, test queries {}",
        split.retrieval.len(),
        split.train.len(),
        split.validation_query.len(),
        split.test_query.len()
    );

    let dir = std::env::temp_dir().join("gchash-synthetic-split");
    std::fs::create_dir_all(&dir)?;
    for (name, idx) in [("retrieval", &split.retrieval), ("train", &split.train), ("test_query", &split.test_query)] {
        let path = dir.join(format!("{name}.cmf"));
        save_dataset(&ds.subset(idx)?, &path)?;
        let back = load_dataset(&path)?;
        assert_eq!(back, ds.subset(idx)?);
        println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());
    }
    Ok(())
}
