//! Drive the command-line pipeline in process: generate, split, train,
//! encode and evaluate.
//!
//! cargo run --release --example cli_pipeline

use gchash::cli::run;

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-synthetic".into(), "--out".into(), p("all.cmf"), "--noise".into(), "0.4".into()],
        vec!["split".into(), "--dataset".into(), p("all.cmf"), "--out-dir".into(), p("split")],
        vec![
            "train".into(), "--train".into(), p("split/train.cmf"), "--val-queries".into(), p("split/val_query.cmf"),
            "--out-dir".into(), p("run"), "--bits".into(), "32".into(), "--hidden".into(), "128".into(),
            "--epochs".into(), "10".into(), "--lambda2".into(), "0.5".into(),
        ],
        vec![
            "encode".into(), "--checkpoint".into(), p("run/img.ckpt"), "--dataset".into(), p("split/test_query.cmf"),
            "--modality".into(), "image".into(), "--out".into(), p("q.cmb"),
        ],
        vec![
            "encode".into(), "--checkpoint".into(), p("run/txt.ckpt"), "--dataset".into(), p("split/retrieval.cmf"),
            "--modality".into(), "text".into(), "--out".into(), p("r.cmb"),
        ],
        vec![
            "eval".into(), "--query-codes".into(), p("q.cmb"), "--retrieval-codes".into(), p("r.cmb"),
            "--query-labels".into(), p("split/test_query.cmf"), "--retrieval-labels".into(), p("split/retrieval.cmf"),
            "--cutoffs".into(), "50,100".into(), "--out-prefix".into(), p("eval"),
        ],
    ];
    for args in steps {
        eprintln!("$ gchash {}", args.join(" "));
        let code = run(std::iter::once("gchash".to_owned()).chain(args));
        if code != 0 {
            std::process::exit(code);
        }
    }
    let report = std::fs::read_to_string(p("eval.tsv")).unwrap();
    for line in report.lines().take_while(|l| !l.starts_with("query")) {
        println!("{line}");
    }
}
