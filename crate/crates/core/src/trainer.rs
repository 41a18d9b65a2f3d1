//! Training loop.
//!
//! The GC target is computed once from the raw training features. Each
//! epoch shuffles the training indices and, for every batch, runs up to
//! three updates:
//!
//! 1. both networks on `L(H_I, H_T)`;
//! 2. the image network on `L(H_I, sign(H_T))`;
//! 3. the text network on `L(sign(H_I), H_T)`.
//!
//! The binary operand in steps 2 and 3 is a constant, so no gradient flows
//! through `sign`. After every epoch the validation MAP (mean of I2T and
//! T2I) decides early stopping, and the parameters of the best epoch are
//! returned.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PairedDataset;
use crate::error::{Error, Result};
use crate::loss::{total_loss_and_grads, value_gap, GradMask, LossBreakdown, LossParams};
use crate::net::{HashNet, HiddenActivation, OutputActivation, SgdConfig};
use crate::retrieval::{evaluate, pack, PackedCodes, Task};
use crate::simgraph::{GcCache, GcModel, GcParams};

/// How the gap between relaxed values and binary codes is handled.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum HashStrategy {
    /// Steps 1-3 per batch.
    #[default]
    TripleUpdate,
    /// Step 1 only.
    None,
    /// Step 1 plus `weight * (‖H_I - B_I‖_F + ‖H_T - B_T‖_F)`.
    ValueGap { weight: f64 },
}

/// Whether steps 2 and 3 see codes from the current parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardMode {
    /// Forward again after each update.
    #[default]
    Recompute,
    /// Use the codes (and backward caches) of step 1 for all three updates.
    Reuse,
}

/// Which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossSubset {
    #[default]
    All,
    /// `L_g + L_c`.
    GlCl,
    /// `L_g` alone.
    Gl,
}

impl std::str::FromStr for LossSubset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "all" => Ok(LossSubset::All),
            "gl-cl" | "gl+cl" => Ok(LossSubset::GlCl),
            "gl" => Ok(LossSubset::Gl),
            other => Err(format!("unknown loss subset {other:?} (all, gl-cl, gl)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gc: GcParams,
    pub loss: LossParams,
    pub sgd: SgdConfig,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub bits: usize,
    pub hidden: usize,
    pub hidden_act: HiddenActivation,
    pub output_act: OutputActivation,
    pub hash: HashStrategy,
    pub forward_mode: ForwardMode,
    pub loss_subset: LossSubset,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gc: GcParams::default(),
            loss: LossParams::default(),
            sgd: SgdConfig::default(),
            seed: 0,
            patience: 10,
            bits: 64,
            hidden: 4096,
            hidden_act: HiddenActivation::Relu,
            output_act: OutputActivation::Tanh,
            hash: HashStrategy::TripleUpdate,
            forward_mode: ForwardMode::Recompute,
            loss_subset: LossSubset::All,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        self.gc.validate(m)?;
        self.loss.validate()?;
        self.sgd.validate()?;
        if self.patience == 0 {
            return Err(Error::InvalidParameter("patience must be >= 1".into()));
        }
        if self.bits == 0 || self.hidden == 0 {
            return Err(Error::InvalidParameter("bits and hidden must be >= 1".into()));
        }
        if let HashStrategy::ValueGap { weight } = self.hash {
            if weight.is_nan() || weight < 0.0 {
                return Err(Error::InvalidParameter("value-gap weight must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Loss parameters after applying the loss-subset switch.
    pub fn effective_loss(&self) -> LossParams {
        let mut p = self.loss.clone();
        match self.loss_subset {
            LossSubset::All => {}
            LossSubset::GlCl => p.lambda2 = 0.0,
            LossSubset::Gl => {
                p.lambda2 = 0.0;
                p.coexist_weight = 0.0;
            }
        }
        p
    }

    /// Freshly initialized image and text networks for this configuration.
    pub fn init_nets(&self, d_img: usize, d_txt: usize) -> Result<(HashNet, HashNet)> {
        let img = HashNet::init(d_img, self.hidden, self.bits, self.seed.wrapping_mul(2).wrapping_add(1))?
            .with_activations(self.hidden_act, self.output_act);
        let txt = HashNet::init(d_txt, self.hidden, self.bits, self.seed.wrapping_mul(2).wrapping_add(2))?
            .with_activations(self.hidden_act, self.output_act);
        Ok((img, txt))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of the step-1 losses.
    pub l_c: f64,
    pub l_g: f64,
    pub l_i: f64,
    pub total: f64,
    pub map_i2t: f64,
    pub map_t2i: f64,
}

impl EpochRecord {
    pub fn mean_map(&self) -> f64 {
        0.5 * (self.map_i2t + self.map_t2i)
    }

    pub const TSV_HEADER: &'static str = "epoch\tl_c\tl_g\tl_i\ttotal\tmap_i2t\tmap_t2i";

    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.10}\t{:.10}\t{:.10}\t{:.10}\t{:.10}\t{:.10}",
            self.epoch, self.l_c, self.l_g, self.l_i, self.total, self.map_i2t, self.map_t2i
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_map: f64,
    pub stop: StopReason,
}

impl TrainReport {
    /// Per-epoch metrics log, header line first.
    pub fn metrics_tsv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{}", EpochRecord::TSV_HEADER).unwrap();
        for e in &self.epochs {
            writeln!(s, "{}", e.tsv_line()).unwrap();
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub img: HashNet,
    pub txt: HashNet,
    pub report: TrainReport,
}

/// Training stopped on a non-finite loss or gradient. `last_good` holds the
/// best parameters seen before the failure, if any epoch completed.
#[derive(Debug, thiserror::Error)]
#[error("training aborted at epoch {epoch}: {source}")]
pub struct TrainAbort {
    pub epoch: usize,
    #[source]
    pub source: Error,
    pub last_good: Option<Box<TrainOutcome>>,
}

/// `+1` for `h >= 0`, `-1` otherwise.
pub fn sign_quantize(h: ArrayView2<f64>) -> Result<Array2<f64>> {
    if let Some(((r, c), _)) = h.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("code entry ({r}, {c})")));
    }
    Ok(h.mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 }))
}

/// Forward, sign and pack a feature matrix.
pub fn encode_codes(net: &HashNet, features: &Array2<f32>) -> Result<PackedCodes> {
    let h = net.encode(features.mapv(f64::from).view())?;
    pack(sign_quantize(h.view())?.view())
}

/// The GC target of a training set, optionally through a cache directory.
pub fn precompute_gc(train: &PairedDataset, gc: &GcParams, cache: Option<&GcCache>) -> Result<GcModel> {
    match cache {
        Some(c) => Ok(c.get_or_build(train, gc)?.0),
        None => GcModel::build(train, gc),
    }
}

/// I2T and T2I MAP of the two networks over a query/retrieval pair.
pub fn validation_map(
    img: &HashNet,
    txt: &HashNet,
    queries: &PairedDataset,
    retrieval: &PairedDataset,
) -> Result<(f64, f64)> {
    let ql = queries.require_labels("validation queries")?;
    let rl = retrieval.require_labels("validation retrieval set")?;
    let q_img = encode_codes(img, queries.img())?;
    let q_txt = encode_codes(txt, queries.txt())?;
    let r_img = encode_codes(img, retrieval.img())?;
    let r_txt = encode_codes(txt, retrieval.txt())?;
    let i2t = evaluate(&q_img, ql.view(), &r_txt, rl.view(), &[], Task::I2T)?;
    let t2i = evaluate(&q_txt, ql.view(), &r_img, rl.view(), &[], Task::T2I)?;
    Ok((i2t.map, t2i.map))
}

fn check_finite(out: &LossBreakdown) -> Result<()> {
    if out.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss {}", out.total)))
    }
}

/// Step 1: both networks on `L(H_I, H_T)`, plus the value-gap penalty when
/// that strategy is selected.
#[allow(clippy::too_many_arguments)]
pub fn step_joint(
    img: &mut HashNet,
    txt: &mut HashNet,
    fi: ArrayView2<f64>,
    ft: ArrayView2<f64>,
    s: ArrayView2<f64>,
    loss: &LossParams,
    sgd: &SgdConfig,
    hash: HashStrategy,
) -> Result<LossBreakdown> {
    let (hi, ci) = img.forward(fi)?;
    let (ht, ct) = txt.forward(ft)?;
    let mut out = total_loss_and_grads(hi.view(), ht.view(), s, loss, GradMask::Both)?;
    check_finite(&out)?;
    if let HashStrategy::ValueGap { weight } = hash {
        let (_, gi) = value_gap(hi.view(), loss.eps);
        let (_, gt) = value_gap(ht.view(), loss.eps);
        out.grad_hi.scaled_add(weight, &gi);
        out.grad_ht.scaled_add(weight, &gt);
    }
    let gi = img.backward(&ci, out.grad_hi.view());
    let gt = txt.backward(&ct, out.grad_ht.view());
    img.apply_grads(&gi, sgd)?;
    txt.apply_grads(&gt, sgd)?;
    Ok(out)
}

/// Step 2: the image network on `L(H_I, sign(H_T))`. The text network is
/// only read.
pub fn step_img_half(
    img: &mut HashNet,
    txt: &HashNet,
    fi: ArrayView2<f64>,
    ft: ArrayView2<f64>,
    s: ArrayView2<f64>,
    loss: &LossParams,
    sgd: &SgdConfig,
) -> Result<LossBreakdown> {
    let (hi, ci) = img.forward(fi)?;
    let bt = sign_quantize(txt.encode(ft)?.view())?;
    let out = total_loss_and_grads(hi.view(), bt.view(), s, loss, GradMask::ImgOnly)?;
    check_finite(&out)?;
    img.apply_grads(&img.backward(&ci, out.grad_hi.view()), sgd)?;
    Ok(out)
}

/// Step 3: the text network on `L(sign(H_I), H_T)`. The image network is
/// only read.
pub fn step_txt_half(
    img: &HashNet,
    txt: &mut HashNet,
    fi: ArrayView2<f64>,
    ft: ArrayView2<f64>,
    s: ArrayView2<f64>,
    loss: &LossParams,
    sgd: &SgdConfig,
) -> Result<LossBreakdown> {
    let bi = sign_quantize(img.encode(fi)?.view())?;
    let (ht, ct) = txt.forward(ft)?;
    let out = total_loss_and_grads(bi.view(), ht.view(), s, loss, GradMask::TxtOnly)?;
    check_finite(&out)?;
    txt.apply_grads(&txt.backward(&ct, out.grad_ht.view()), sgd)?;
    Ok(out)
}

/// All three updates from a single forward pass of each network.
fn step_reuse(
    img: &mut HashNet,
    txt: &mut HashNet,
    fi: ArrayView2<f64>,
    ft: ArrayView2<f64>,
    s: ArrayView2<f64>,
    loss: &LossParams,
    sgd: &SgdConfig,
) -> Result<LossBreakdown> {
    let (hi, ci) = img.forward(fi)?;
    let (ht, ct) = txt.forward(ft)?;
    let bi = sign_quantize(hi.view())?;
    let bt = sign_quantize(ht.view())?;
    let joint = total_loss_and_grads(hi.view(), ht.view(), s, loss, GradMask::Both)?;
    check_finite(&joint)?;
    let half_i = total_loss_and_grads(hi.view(), bt.view(), s, loss, GradMask::ImgOnly)?;
    check_finite(&half_i)?;
    let half_t = total_loss_and_grads(bi.view(), ht.view(), s, loss, GradMask::TxtOnly)?;
    check_finite(&half_t)?;
    img.apply_grads(&img.backward(&ci, joint.grad_hi.view()), sgd)?;
    txt.apply_grads(&txt.backward(&ct, joint.grad_ht.view()), sgd)?;
    img.apply_grads(&img.backward(&ci, half_i.grad_hi.view()), sgd)?;
    txt.apply_grads(&txt.backward(&ct, half_t.grad_ht.view()), sgd)?;
    Ok(joint)
}

/// Splits a permutation into batches; a trailing batch of fewer than two
/// items is dropped.
pub fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    order.chunks(size).filter(|c| c.len() >= 2).collect()
}

/// Builds the GC target and trains.
pub fn train(
    train: &PairedDataset,
    val_queries: &PairedDataset,
    val_retrieval: &PairedDataset,
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutcome, TrainAbort> {
    let abort = |source| TrainAbort {
        epoch: 0,
        source,
        last_good: None,
    };
    cfg.validate(train.m()).map_err(abort)?;
    let gc = GcModel::build(train, &cfg.gc).map_err(abort)?;
    train_with_gc(train, &gc, val_queries, val_retrieval, cfg, |_| {})
}

/// Trains against a precomputed GC model. `on_epoch` sees each record as soon
/// as its validation MAP is known.
pub fn train_with_gc(
    train: &PairedDataset,
    gc: &GcModel,
    val_queries: &PairedDataset,
    val_retrieval: &PairedDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> std::result::Result<TrainOutcome, TrainAbort> {
    let mut best: Option<TrainOutcome> = None;
    let mut epoch = 0usize;
    let fail = |epoch: usize, source: Error, best: Option<TrainOutcome>| TrainAbort {
        epoch,
        source,
        last_good: best.map(Box::new),
    };

    if let Err(e) = cfg.validate(train.m()) {
        return Err(fail(0, e, None));
    }
    if gc.m() != train.m() {
        return Err(fail(
            0,
            Error::DimensionMismatch(format!("GC model for {} items, training set {}", gc.m(), train.m())),
            None,
        ));
    }
    let (mut img, mut txt) = cfg.init_nets(train.d_img(), train.d_txt()).map_err(|e| fail(0, e, None))?;
    let loss = cfg.effective_loss();
    let fi_all = train.img().mapv(f64::from);
    let ft_all = train.txt().mapv(f64::from);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.m()).collect();
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut since_best = 0usize;
    let mut stop = StopReason::MaxEpochs;

    while epoch < cfg.sgd.epochs {
        epoch += 1;
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let batch_list = batches(&order, cfg.sgd.batch);
        if batch_list.is_empty() {
            return Err(fail(epoch, Error::InvalidParameter("empty batch".into()), best));
        }
        let mut sums = [0.0f64; 4];
        for idx in &batch_list {
            let fi = fi_all.select(Axis(0), idx);
            let ft = ft_all.select(Axis(0), idx);
            let s = gc.batch_target(idx);
            let mut step = || -> Result<LossBreakdown> {
                match (cfg.hash, cfg.forward_mode) {
                    (HashStrategy::TripleUpdate, ForwardMode::Reuse) => {
                        step_reuse(&mut img, &mut txt, fi.view(), ft.view(), s.view(), &loss, &cfg.sgd)
                    }
                    (HashStrategy::TripleUpdate, ForwardMode::Recompute) => {
                        let out = step_joint(
                            &mut img, &mut txt, fi.view(), ft.view(), s.view(), &loss, &cfg.sgd, cfg.hash,
                        )?;
                        step_img_half(&mut img, &txt, fi.view(), ft.view(), s.view(), &loss, &cfg.sgd)?;
                        step_txt_half(&img, &mut txt, fi.view(), ft.view(), s.view(), &loss, &cfg.sgd)?;
                        Ok(out)
                    }
                    _ => step_joint(
                        &mut img, &mut txt, fi.view(), ft.view(), s.view(), &loss, &cfg.sgd, cfg.hash,
                    ),
                }
            };
            let out = match step() {
                Ok(o) => o,
                Err(e) => return Err(fail(epoch, e, best)),
            };
            sums[0] += out.l_c;
            sums[1] += out.l_g;
            sums[2] += out.l_i;
            sums[3] += out.total;
        }
        let nb = batch_list.len() as f64;
        let (map_i2t, map_t2i) = match validation_map(&img, &txt, val_queries, val_retrieval) {
            Ok(v) => v,
            Err(e) => return Err(fail(epoch, e, best)),
        };
        let rec = EpochRecord {
            epoch,
            l_c: sums[0] / nb,
            l_g: sums[1] / nb,
            l_i: sums[2] / nb,
            total: sums[3] / nb,
            map_i2t,
            map_t2i,
        };
        on_epoch(&rec);
        let improved = best
            .as_ref()
            .is_none_or(|b| rec.mean_map() > b.report.best_map);
        records.push(rec.clone());
        if improved {
            since_best = 0;
            best = Some(TrainOutcome {
                img: img.clone(),
                txt: txt.clone(),
                report: TrainReport {
                    epochs: Vec::new(),
                    best_epoch: epoch,
                    best_map: rec.mean_map(),
                    stop: StopReason::MaxEpochs,
                },
            });
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stop = StopReason::EarlyStopping;
                break;
            }
        }
    }

    let mut out = best.expect("at least one epoch ran");
    out.report.epochs = records;
    out.report.stop = stop;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_synthetic, SyntheticConfig};
    use ndarray::array;

    #[test]
    fn sign_convention() {
        let b = sign_quantize(array![[-0.3, 0.2, 0.0]].view()).unwrap();
        assert_eq!(b, array![[-1.0, 1.0, 1.0]]);
        assert_eq!(sign_quantize(b.view()).unwrap(), b);
        assert!(sign_quantize(array![[f64::NAN]].view()).is_err());
    }

    #[test]
    fn short_tail_batch_dropped() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.len(), 2);
        let order: Vec<usize> = (0..10).collect();
        assert_eq!(batches(&order, 4).len(), 3);
    }

    #[test]
    fn loss_subsets() {
        let mut cfg = TrainConfig { loss_subset: LossSubset::Gl, ..TrainConfig::default() };
        let p = cfg.effective_loss();
        assert_eq!((p.coexist_weight, p.lambda1, p.lambda2), (0.0, 1.0, 0.0));
        cfg.loss_subset = LossSubset::GlCl;
        let p = cfg.effective_loss();
        assert_eq!((p.coexist_weight, p.lambda2), (1.0, 0.0));
    }

    fn tiny() -> (PairedDataset, TrainConfig) {
        let ds = gen_synthetic(&SyntheticConfig {
            n_clusters: 3,
            per_cluster: 12,
            d_img: 6,
            d_txt: 5,
            noise: 0.1,
            label_noise: 0.0,
            seed: 4,
        })
        .unwrap();
        let cfg = TrainConfig {
            gc: GcParams { k: 8, beta: 20.0, ..GcParams::default() },
            sgd: SgdConfig { batch: 8, epochs: 3, ..SgdConfig::default() },
            bits: 8,
            hidden: 16,
            ..TrainConfig::default()
        };
        (ds, cfg)
    }

    #[test]
    fn half_steps_leave_the_other_network_untouched() {
        let (ds, cfg) = tiny();
        let gc = GcModel::build(&ds, &cfg.gc).unwrap();
        let (mut img, mut txt) = cfg.init_nets(ds.d_img(), ds.d_txt()).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let fi = ds.img().select(Axis(0), &idx).mapv(f64::from);
        let ft = ds.txt().select(Axis(0), &idx).mapv(f64::from);
        let s = gc.batch_target(&idx);
        let txt_before = txt.clone();
        let img_before = img.clone();
        step_img_half(&mut img, &txt, fi.view(), ft.view(), s.view(), &cfg.loss, &cfg.sgd).unwrap();
        assert_eq!(txt, txt_before);
        assert_ne!(img, img_before);
        let img_mid = img.clone();
        step_txt_half(&img, &mut txt, fi.view(), ft.view(), s.view(), &cfg.loss, &cfg.sgd).unwrap();
        assert_eq!(img, img_mid);
        assert_ne!(txt, txt_before);
    }

    #[test]
    fn batch_target_is_indexed_submatrix() {
        let (ds, cfg) = tiny();
        let gc = GcModel::build(&ds, &cfg.gc).unwrap();
        let idx = [5usize, 0, 17, 3];
        let s = gc.batch_target(&idx);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                assert_eq!(s[[a, b]], gc.s_final[[i, j]]);
            }
        }
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let (ds, mut cfg) = tiny();
        cfg.sgd.lr = 0.0;
        cfg.shuffle = false;
        let out = train(&ds, &ds, &ds, &cfg).unwrap();
        let (img0, txt0) = cfg.init_nets(ds.d_img(), ds.d_txt()).unwrap();
        assert_eq!(out.img.w1, img0.w1);
        assert_eq!(out.txt.w2, txt0.w2);
        let e = &out.report.epochs;
        assert!(e.windows(2).all(|w| w[0].total == w[1].total && w[0].map_i2t == w[1].map_i2t));
    }

    #[test]
    fn reuse_mode_runs() {
        let (ds, mut cfg) = tiny();
        cfg.forward_mode = ForwardMode::Reuse;
        let out = train(&ds, &ds, &ds, &cfg).unwrap();
        assert_eq!(out.report.epochs.len(), 3);
    }

    #[test]
    fn invalid_config_aborts_before_training() {
        let (ds, mut cfg) = tiny();
        cfg.patience = 0;
        let err = train(&ds, &ds, &ds, &cfg).unwrap_err();
        assert!(err.last_good.is_none());
        assert!(matches!(err.source, Error::InvalidParameter(_)));
    }

    #[test]
    fn unlabeled_validation_is_rejected() {
        let (ds, cfg) = tiny();
        let unlabeled = PairedDataset::new(ds.img().clone(), ds.txt().clone(), None).unwrap();
        let err = train(&ds, &unlabeled, &ds, &cfg).unwrap_err();
        assert!(matches!(err.source, Error::MissingLabels(_)));
    }
}
