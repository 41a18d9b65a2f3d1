//! The `gchash` command.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (one-line diagnostic on
//! stderr), 2 on a usage error.
//!
//! Training-related commands resolve a [`RunConfig`] from an optional TOML
//! file (`--config`) and then apply flags on top. The resolved configuration
//! is echoed to stderr, and `train` also writes it to `config.toml` in its
//! output directory before any work starts.
//!
//! Setting `GCHASH_CACHE_DIR` caches GC models between runs.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    gen_synthetic, load_dataset, make_split, save_dataset, Modality, SplitFractions, SyntheticConfig,
    TrainSize,
};
use crate::loss::{CoexistForm, NormMode};
use crate::net::{load_checkpoint, save_checkpoint, HiddenActivation, OutputActivation};
use crate::retrieval::{evaluate, hamming, hamming_ranking, load_codes, save_codes, score_map, Task};
use crate::simgraph::{pairwise_distance, save_gc_model, GcCache, GcMode, GcModel, GcParams};
use crate::trainer::{
    encode_codes, precompute_gc, train_with_gc, EpochRecord, ForwardMode, HashStrategy, LossSubset,
    TrainConfig,
};

/// Environment variable naming a GC model cache directory.
pub const CACHE_ENV: &str = "GCHASH_CACHE_DIR";

/// Default MAP@N cutoffs of `compare-similarities`.
pub const DEFAULT_COMPARE_CUTOFFS: [usize; 6] = [500, 1000, 2000, 3000, 4000, 5000];

#[derive(Debug, Parser)]
#[command(name = "gchash", version, about = "Unsupervised cross-modal hashing with graph-neighbor coherence")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded clustered synthetic dataset.
    GenSynthetic(GenArgs),
    /// Split a dataset into retrieval, train, validation and test sets.
    Split(SplitArgs),
    /// Compute and store the GC model of a training set.
    ComputeGc(ComputeGcArgs),
    /// Train both hashing networks.
    Train(TrainArgs),
    /// Encode one modality of a dataset into packed binary codes.
    Encode(EncodeArgs),
    /// Print the top Hamming neighbors of each query.
    Retrieve(RetrieveArgs),
    /// MAP and MAP@N of query codes against retrieval codes.
    Eval(EvalArgs),
    /// MAP@N of image, text, fused and GC similarities against labels.
    CompareSimilarities(CompareArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    clusters: usize,
    #[arg(long, default_value_t = 200)]
    per_cluster: usize,
    #[arg(long, default_value_t = 32)]
    d_img: usize,
    #[arg(long, default_value_t = 32)]
    d_txt: usize,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// An item count (`200`) or a fraction (`0.1`).
#[derive(Debug, Clone, Copy, PartialEq)]
enum Amount {
    Count(usize),
    Fraction(f64),
}

impl std::str::FromStr for Amount {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(n) = s.parse::<usize>() {
            return Ok(Amount::Count(n));
        }
        match s.parse::<f64>() {
            Ok(f) if (0.0..=1.0).contains(&f) => Ok(Amount::Fraction(f)),
            _ => Err(format!("{s:?} is neither a count nor a fraction in [0, 1]")),
        }
    }
}

impl Amount {
    fn fraction_of(self, m: usize) -> f64 {
        match self {
            Amount::Count(n) => n as f64 / m as f64,
            Amount::Fraction(f) => f,
        }
    }
}

fn parse_train_size(s: &str) -> Result<TrainSize, String> {
    if s == "all" {
        return Ok(TrainSize::All);
    }
    match s.parse::<Amount>()? {
        Amount::Count(n) => Ok(TrainSize::Count(n)),
        Amount::Fraction(f) => Ok(TrainSize::Fraction(f)),
    }
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Test queries, as a count or a fraction.
    #[arg(long, default_value = "0.1")]
    test_queries: Amount,
    /// Validation queries, as a count or a fraction.
    #[arg(long, default_value = "0.1")]
    val_queries: Amount,
    /// Training items drawn from the retrieval set: `all`, a count or a fraction.
    #[arg(long, default_value = "all", value_parser = parse_train_size)]
    train_size: TrainSize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_gc_mode(s: &str) -> Result<GcMode, String> {
    s.parse()
}

#[derive(Debug, Clone, Default, Args)]
struct GcFlags {
    /// Start from a reported benchmark setting: wikipedia, mirflickr or nus-wide.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// Set beta to 1 / mean(diag(P)).
    #[arg(long)]
    auto_beta: bool,
    /// Do not count a node among its own neighbors.
    #[arg(long)]
    exclude_self: bool,
    #[arg(long, value_parser = parse_gc_mode)]
    gc_mode: Option<GcMode>,
}

impl GcFlags {
    fn apply(&self, p: &mut GcParams) -> anyhow::Result<()> {
        if let Some(name) = &self.preset {
            *p = match name.as_str() {
                "wikipedia" => GcParams::wikipedia(),
                "mirflickr" => GcParams::mirflickr(),
                "nus-wide" => GcParams::nus_wide(),
                other => bail!("unknown preset {other:?} (wikipedia, mirflickr, nus-wide)"),
            };
        }
        set(&mut p.alpha, self.alpha);
        set(&mut p.gamma, self.gamma);
        set(&mut p.beta, self.beta);
        set(&mut p.k, self.k);
        set(&mut p.mode, self.gc_mode);
        if self.auto_beta {
            p.auto_beta = true;
        }
        if self.exclude_self {
            p.include_self = false;
        }
        Ok(())
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn parse_norm(s: &str) -> Result<NormMode, String> {
    match s {
        "frobenius" => Ok(NormMode::Frobenius),
        "squared" => Ok(NormMode::Squared),
        other => Err(format!("unknown norm {other:?} (frobenius, squared)")),
    }
}

fn parse_coexist_form(s: &str) -> Result<CoexistForm, String> {
    match s {
        "elementwise" => Ok(CoexistForm::Elementwise),
        "trace" => Ok(CoexistForm::Trace),
        other => Err(format!("unknown coexistence form {other:?} (elementwise, trace)")),
    }
}

fn parse_hidden_act(s: &str) -> Result<HiddenActivation, String> {
    match s {
        "relu" => Ok(HiddenActivation::Relu),
        "tanh" => Ok(HiddenActivation::Tanh),
        other => Err(format!("unknown hidden activation {other:?} (relu, tanh)")),
    }
}

fn parse_output_act(s: &str) -> Result<OutputActivation, String> {
    if s == "tanh" {
        return Ok(OutputActivation::Tanh);
    }
    match s.strip_prefix("scaled-tanh:").map(str::parse::<f64>) {
        Some(Ok(scale)) if scale > 0.0 => Ok(OutputActivation::ScaledTanh { scale }),
        _ => Err(format!("unknown output activation {s:?} (tanh, scaled-tanh:<scale>)")),
    }
}

fn parse_hash(s: &str) -> Result<HashStrategy, String> {
    match s {
        "triple" | "triple-update" => return Ok(HashStrategy::TripleUpdate),
        "none" => return Ok(HashStrategy::None),
        _ => {}
    }
    match s.strip_prefix("value-gap:").map(str::parse::<f64>) {
        Some(Ok(weight)) if weight >= 0.0 => Ok(HashStrategy::ValueGap { weight }),
        _ => Err(format!("unknown hashing strategy {s:?} (triple, none, value-gap:<weight>)")),
    }
}

fn parse_forward(s: &str) -> Result<ForwardMode, String> {
    match s {
        "recompute" => Ok(ForwardMode::Recompute),
        "reuse" => Ok(ForwardMode::Reuse),
        other => Err(format!("unknown forward mode {other:?} (recompute, reuse)")),
    }
}

#[derive(Debug, Clone, Default, Args)]
struct TrainFlags {
    /// TOML file with a `[train]` table; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    gc: GcFlags,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    coexist_weight: Option<f64>,
    #[arg(long)]
    coexist_target: Option<f64>,
    #[arg(long, value_parser = parse_norm)]
    norm: Option<NormMode>,
    #[arg(long, value_parser = parse_coexist_form)]
    coexist_form: Option<CoexistForm>,
    /// Loss terms: all, gl-cl or gl.
    #[arg(long)]
    loss_subset: Option<LossSubset>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, value_parser = parse_hidden_act)]
    hidden_act: Option<HiddenActivation>,
    /// tanh or scaled-tanh:<scale>.
    #[arg(long, value_parser = parse_output_act)]
    output_act: Option<OutputActivation>,
    /// triple, none or value-gap:<weight>.
    #[arg(long, value_parser = parse_hash)]
    hash: Option<HashStrategy>,
    #[arg(long, value_parser = parse_forward)]
    forward_mode: Option<ForwardMode>,
    #[arg(long)]
    no_shuffle: bool,
}

impl TrainFlags {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?.train,
            None => TrainConfig::default(),
        };
        self.gc.apply(&mut cfg.gc)?;
        let l = &mut cfg.loss;
        set(&mut l.lambda1, self.lambda1);
        set(&mut l.lambda2, self.lambda2);
        set(&mut l.coexist_weight, self.coexist_weight);
        set(&mut l.coexist_target, self.coexist_target);
        set(&mut l.norm, self.norm);
        set(&mut l.coexist_form, self.coexist_form);
        let s = &mut cfg.sgd;
        set(&mut s.lr, self.lr);
        set(&mut s.momentum, self.momentum);
        set(&mut s.weight_decay, self.weight_decay);
        set(&mut s.batch, self.batch);
        set(&mut s.epochs, self.epochs);
        set(&mut cfg.loss_subset, self.loss_subset);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.patience, self.patience);
        set(&mut cfg.bits, self.bits);
        set(&mut cfg.hidden, self.hidden);
        set(&mut cfg.hidden_act, self.hidden_act);
        set(&mut cfg.output_act, self.output_act);
        set(&mut cfg.hash, self.hash);
        set(&mut cfg.forward_mode, self.forward_mode);
        if self.no_shuffle {
            cfg.shuffle = false;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct ComputeGcArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output GC model file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training set (CMF).
    #[arg(long)]
    train: PathBuf,
    /// Validation queries (CMF, labeled).
    #[arg(long)]
    val_queries: PathBuf,
    /// Retrieval set for validation; defaults to the training set.
    #[arg(long)]
    val_retrieval: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// image or text.
    #[arg(long)]
    modality: Modality,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    #[arg(long)]
    query_codes: PathBuf,
    #[arg(long)]
    codes: PathBuf,
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Output TSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_cutoff(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("bad cutoff {s:?}")),
    }
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse()
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    query_codes: PathBuf,
    #[arg(long)]
    retrieval_codes: PathBuf,
    /// CMF file supplying the query labels.
    #[arg(long)]
    query_labels: PathBuf,
    /// CMF file supplying the retrieval labels.
    #[arg(long)]
    retrieval_labels: PathBuf,
    #[arg(long, value_parser = parse_task, default_value = "i2t")]
    task: Task,
    /// Comma-separated MAP@N cutoffs.
    #[arg(long, value_parser = parse_cutoff, value_delimiter = ',')]
    cutoffs: Vec<usize>,
    /// Writes `<prefix>.tsv` and `<prefix>.json`.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated MAP@N cutoffs; clamped to the candidate count.
    #[arg(long, value_parser = parse_cutoff, value_delimiter = ',')]
    cutoffs: Option<Vec<usize>>,
    /// Output TSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

/// Everything a training run depends on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub paths: RunPaths,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    pub train: Option<PathBuf>,
    pub val_queries: Option<PathBuf>,
    pub val_retrieval: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {:#}", e);
            1
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
        Command::Split(a) => cmd_split(a),
        Command::ComputeGc(a) => cmd_compute_gc(a),
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Eval(a) => cmd_eval(a),
        Command::CompareSimilarities(a) => cmd_compare(a),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_gen_synthetic(a: GenArgs) -> anyhow::Result<()> {
    let cfg = SyntheticConfig {
        n_clusters: a.clusters,
        per_cluster: a.per_cluster,
        d_img: a.d_img,
        d_txt: a.d_txt,
        noise: a.noise,
        label_noise: a.label_noise,
        seed: a.seed,
    };
    eprintln!("{}", toml::to_string(&cfg).expect("serializes").trim_end());
    let ds = gen_synthetic(&cfg)?;
    save_dataset(&ds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("wrote {} items to {}", ds.m(), a.out.display());
    Ok(())
}

fn cmd_split(a: SplitArgs) -> anyhow::Result<()> {
    let ds = load_dataset(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let fractions = SplitFractions {
        test_queries: a.test_queries.fraction_of(ds.m()),
        validation_queries: a.val_queries.fraction_of(ds.m()),
        train: a.train_size,
    };
    let split = make_split(ds.m(), &fractions, a.seed)?;
    fs::create_dir_all(&a.out_dir)?;
    for (name, idx) in [
        ("retrieval", &split.retrieval),
        ("train", &split.train),
        ("val_query", &split.validation_query),
        ("test_query", &split.test_query),
    ] {
        save_dataset(&ds.subset(idx)?, a.out_dir.join(format!("{name}.cmf")))?;
    }
    fs::write(a.out_dir.join("split.json"), serde_json::to_string_pretty(&split)?)?;
    eprintln!(
        "retrieval {} / train {} / validation {} / test {}",
        split.retrieval.len(),
        split.train.len(),
        split.validation_query.len(),
        split.test_query.len()
    );
    Ok(())
}

fn cache() -> Option<GcCache> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(GcCache::new)
}

fn cmd_compute_gc(a: ComputeGcArgs) -> anyhow::Result<()> {
    let cfg = a.flags.resolve()?;
    eprintln!("{}", toml::to_string(&cfg.gc).expect("serializes").trim_end());
    let ds = load_dataset(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let model = precompute_gc(&ds, &cfg.gc, cache().as_ref())?;
    save_gc_model(&model, &a.out)?;
    eprintln!("m = {}, beta = {}, wrote {}", model.m(), model.beta, a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let run = RunConfig {
        train: a.flags.resolve()?,
        paths: RunPaths {
            train: Some(a.train.clone()),
            val_queries: Some(a.val_queries.clone()),
            val_retrieval: a.val_retrieval.clone(),
            out_dir: Some(a.out_dir.clone()),
        },
    };
    let text = run.to_toml();
    if a.print_config {
        print!("{text}");
        return Ok(());
    }
    eprint!("{text}");
    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join("config.toml"), &text)?;

    let train = load_dataset(&a.train).with_context(|| format!("loading {}", a.train.display()))?;
    let val_q = load_dataset(&a.val_queries)
        .with_context(|| format!("loading {}", a.val_queries.display()))?;
    let val_r = match &a.val_retrieval {
        Some(p) => load_dataset(p).with_context(|| format!("loading {}", p.display()))?,
        None => train.clone(),
    };
    let cfg = &run.train;
    cfg.validate(train.m())?;
    let gc = precompute_gc(&train, &cfg.gc, cache().as_ref())?;

    let log_path = a.out_dir.join("metrics.tsv");
    let mut log = String::new();
    writeln!(log, "{}", EpochRecord::TSV_HEADER).unwrap();
    fs::write(&log_path, &log)?;
    let result = train_with_gc(&train, &gc, &val_q, &val_r, cfg, |rec| {
        writeln!(log, "{}", rec.tsv_line()).unwrap();
        let _ = fs::write(&log_path, &log);
        eprintln!("{}", rec.tsv_line());
    });
    let outcome = match result {
        Ok(o) => o,
        Err(abort) => {
            if let Some(good) = &abort.last_good {
                save_checkpoint(&good.img, Modality::Image, a.out_dir.join("img.last_good.ckpt"))?;
                save_checkpoint(&good.txt, Modality::Text, a.out_dir.join("txt.last_good.ckpt"))?;
            }
            return Err(abort.into());
        }
    };
    fs::write(&log_path, outcome.report.metrics_tsv())?;
    save_checkpoint(&outcome.img, Modality::Image, a.out_dir.join("img.ckpt"))?;
    save_checkpoint(&outcome.txt, Modality::Text, a.out_dir.join("txt.ckpt"))?;
    fs::write(a.out_dir.join("report.json"), serde_json::to_string_pretty(&outcome.report)?)?;
    eprintln!(
        "best epoch {} (mean validation MAP {:.4}), stop: {:?}",
        outcome.report.best_epoch, outcome.report.best_map, outcome.report.stop
    );
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> anyhow::Result<()> {
    let (modality, net) = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    if modality != a.modality {
        bail!("checkpoint {} is for {modality} features, not {}", a.checkpoint.display(), a.modality);
    }
    let ds = load_dataset(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let codes = encode_codes(&net, ds.features(a.modality))?;
    save_codes(&codes, &a.out)?;
    eprintln!("encoded {} items to {} bits", codes.n(), codes.d_bits());
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs) -> anyhow::Result<()> {
    let q = load_codes(&a.query_codes)?;
    let db = load_codes(&a.codes)?;
    if q.d_bits() != db.d_bits() {
        bail!("query codes have {} bits, database codes {}", q.d_bits(), db.d_bits());
    }
    let mut out = String::from("query\trank\titem\thamming\n");
    for i in 0..q.n() {
        let order = hamming_ranking(q.row(i), &db)?;
        for (rank, &j) in order.iter().take(a.top).enumerate() {
            let d = hamming(q.row(i), db.row(j))?;
            writeln!(out, "{i}\t{}\t{j}\t{d}", rank + 1).unwrap();
        }
    }
    write_or_print(a.out.as_deref(), &out)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let q = load_codes(&a.query_codes)?;
    let r = load_codes(&a.retrieval_codes)?;
    let ql = load_dataset(&a.query_labels)?;
    let rl = load_dataset(&a.retrieval_labels)?;
    let report = evaluate(
        &q,
        ql.require_labels("query labels")?.view(),
        &r,
        rl.require_labels("retrieval labels")?.view(),
        &a.cutoffs,
        a.task,
    )?;
    let prefix = a.out_prefix.as_os_str().to_owned();
    let with_ext = |ext: &str| {
        let mut p = prefix.clone();
        p.push(ext);
        PathBuf::from(p)
    };
    fs::write(with_ext(".tsv"), report.to_tsv())?;
    fs::write(with_ext(".json"), report.to_json())?;
    eprintln!("{} MAP {:.6} over {} queries ({} skipped)", report.task, report.map, report.n_queries, report.skipped);
    Ok(())
}

/// One row of the similarity comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityRow {
    pub variant: &'static str,
    pub map_at: std::collections::BTreeMap<usize, f64>,
}

/// MAP@N of ranking every item against all others by image cosine, text
/// cosine, the fused distance and the GC similarity.
pub fn compare_similarities(
    ds: &crate::dataset::PairedDataset,
    params: &GcParams,
    cutoffs: &[usize],
) -> crate::Result<Vec<SimilarityRow>> {
    let labels = ds.require_labels("compare-similarities")?.view();
    let mut cut: Vec<usize> = cutoffs.iter().map(|&c| c.min(ds.m().saturating_sub(1)).max(1)).collect();
    cut.sort_unstable();
    cut.dedup();
    let model = GcModel::build(ds, params)?;
    let image = pairwise_distance(ds, 0.0)?;
    let text = pairwise_distance(ds, 1.0)?;
    let mut rows = Vec::new();
    for (variant, sim) in [
        ("image", &image),
        ("text", &text),
        ("fused", &model.dist),
        ("gc", &model.s_final),
    ] {
        rows.push(SimilarityRow {
            variant,
            map_at: score_map(sim.view(), labels, labels, &cut, true)?,
        });
    }
    Ok(rows)
}

pub fn similarity_table_tsv(rows: &[SimilarityRow]) -> String {
    let mut out = String::from("variant");
    if let Some(first) = rows.first() {
        for c in first.map_at.keys() {
            write!(out, "\tmap@{c}").unwrap();
        }
    }
    out.push('\n');
    for r in rows {
        out.push_str(r.variant);
        for v in r.map_at.values() {
            write!(out, "\t{v:.6}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn cmd_compare(a: CompareArgs) -> anyhow::Result<()> {
    let cfg = a.flags.resolve()?;
    eprintln!("{}", toml::to_string(&cfg.gc).expect("serializes").trim_end());
    let ds = load_dataset(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let cutoffs = a.cutoffs.unwrap_or_else(|| DEFAULT_COMPARE_CUTOFFS.to_vec());
    let rows = compare_similarities(&ds, &cfg.gc, &cutoffs)?;
    write_or_print(a.out.as_deref(), &similarity_table_tsv(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("gchash").chain(args.iter().copied()))
            .unwrap()
            .cmd
    }

    #[test]
    fn flags_override_defaults() {
        let Command::Train(a) = parse(&[
            "train", "--train", "t.cmf", "--val-queries", "v.cmf", "--out-dir", "o",
            "--lambda1", "1", "--lambda2", "1", "--alpha", "0.01", "--gamma", "0.3",
            "--beta", "4000", "--k", "2000",
        ]) else {
            panic!()
        };
        let cfg = a.flags.resolve().unwrap();
        assert_eq!(cfg.gc, GcParams::mirflickr());
        assert_eq!((cfg.loss.lambda1, cfg.loss.lambda2), (1.0, 1.0));
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[train]\nbits = 32\nseed = 5\n[train.gc]\nk = 7\nalpha = 0.2\n").unwrap();
        let Command::Train(a) = parse(&[
            "train", "--train", "t", "--val-queries", "v", "--out-dir", "o",
            "--config", path.to_str().unwrap(), "--k", "9",
        ]) else {
            panic!()
        };
        let cfg = a.flags.resolve().unwrap();
        assert_eq!((cfg.bits, cfg.seed, cfg.gc.k, cfg.gc.alpha), (32, 5, 9, 0.2));
    }

    #[test]
    fn resolved_config_round_trips() {
        let run = RunConfig {
            train: TrainConfig {
                hash: HashStrategy::ValueGap { weight: 0.5 },
                output_act: OutputActivation::ScaledTanh { scale: 3.0 },
                ..TrainConfig::default()
            },
            paths: RunPaths {
                out_dir: Some("x".into()),
                ..RunPaths::default()
            },
        };
        let back: RunConfig = toml::from_str(&run.to_toml()).unwrap();
        assert_eq!(back, run);
    }

    #[test]
    fn unknown_config_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[train]\nbitz = 32\n").unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn amount_and_strategy_parsing() {
        assert_eq!("200".parse::<Amount>().unwrap(), Amount::Count(200));
        assert_eq!("0.25".parse::<Amount>().unwrap(), Amount::Fraction(0.25));
        assert!("1.5".parse::<Amount>().is_err());
        assert_eq!(parse_hash("value-gap:0.1").unwrap(), HashStrategy::ValueGap { weight: 0.1 });
        assert!(parse_hash("value-gap:x").is_err());
        assert_eq!(
            parse_output_act("scaled-tanh:2").unwrap(),
            OutputActivation::ScaledTanh { scale: 2.0 }
        );
    }

    #[test]
    fn cutoff_lists() {
        let Command::Eval(a) = parse(&[
            "eval", "--query-codes", "q", "--retrieval-codes", "r", "--query-labels", "a",
            "--retrieval-labels", "b", "--out-prefix", "o", "--cutoffs", "5,10",
        ]) else {
            panic!("expected eval");
        };
        assert_eq!(a.cutoffs, vec![5, 10]);
        let Command::CompareSimilarities(a) = parse(&["compare-similarities", "--dataset", "d"]) else {
            panic!("expected compare-similarities");
        };
        assert_eq!(a.cutoffs, None);
        assert!(Cli::try_parse_from(["gchash", "compare-similarities", "--dataset", "d", "--cutoffs", "3,0"]).is_err());
    }

    #[test]
    fn missing_required_flag_is_usage_error() {
        assert_eq!(run(["gchash", "gen-synthetic", "--clusters", "5"]), 2);
        assert_eq!(run(["gchash", "frobnicate"]), 2);
    }
}
