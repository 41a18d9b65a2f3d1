mod common;

use gchash::dataset::{gen_synthetic, PairedDataset, SyntheticConfig};
use gchash::loss::{total_loss_and_grads, GradMask, LossParams};
use gchash::net::{HashNet, SgdConfig};
use gchash::retrieval::{average_precision, hamming, hamming_ranking, pack, PackedCodes};
use gchash::simgraph::{GcModel, GcParams};
use gchash::trainer::sign_quantize;
use ndarray::{Array2, Axis};
use proptest::prelude::*;

use common::*;

fn signs(bits: &[bool], d: usize) -> Array2<f64> {
    Array2::from_shape_fn((bits.len() / d, d), |(i, j)| if bits[i * d + j] { 1.0 } else { -1.0 })
}

fn small_dataset(seed: u64, m_per: usize) -> PairedDataset {
    gen_synthetic(&SyntheticConfig {
        n_clusters: 3,
        per_cluster: m_per,
        d_img: 5,
        d_txt: 4,
        noise: 0.3,
        label_noise: 0.1,
        seed,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cmf_round_trip_is_bit_exact(seed in 0u64..1000, per in 2usize..6) {
        let ds = small_dataset(seed, per);
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = PairedDataset::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn hamming_is_a_metric(d in 1usize..130, raw in prop::collection::vec(any::<bool>(), 390)) {
        let raw = &raw[..3 * d.min(130)];
        let d = raw.len() / 3;
        let c = pack(signs(raw, d).view()).unwrap();
        let h = |i: usize, j: usize| hamming(c.row(i), c.row(j)).unwrap();
        for i in 0..3 {
            prop_assert_eq!(h(i, i), 0);
            for j in 0..3 {
                prop_assert_eq!(h(i, j), h(j, i));
                for k in 0..3 {
                    prop_assert!(h(i, k) <= h(i, j) + h(j, k));
                }
            }
        }
        let s = signs(raw, d);
        prop_assert_eq!(h(0, 1), hamming_loop(s.row(0).as_slice().unwrap(), s.row(1).as_slice().unwrap()));
    }

    #[test]
    fn codes_round_trip(n in 1usize..20, d in 1usize..140, seed in 0u64..100) {
        let mut r = rng(seed);
        let s = random_signs(&mut r, n, d);
        let c = pack(s.view()).unwrap();
        prop_assert_eq!(c.unpack(), s.clone());
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        prop_assert_eq!(buf.len(), 12 + 8 * n * d.div_ceil(64));
        prop_assert_eq!(PackedCodes::read_from(&mut buf.as_slice()).unwrap(), c);
    }

    #[test]
    fn equal_distances_rank_by_index(n in 1usize..40, d in 1usize..70, seed in 0u64..100) {
        let mut r = rng(seed);
        let q = random_signs(&mut r, 1, d);
        let db = Array2::from_shape_fn((n, d), |(_, j)| q[[0, j]]);
        let pq = pack(q.view()).unwrap();
        let order = hamming_ranking(pq.row(0), &pack(db.view()).unwrap()).unwrap();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn ranking_matches_loop_oracle(n in 1usize..60, d in 1usize..40, seed in 0u64..100) {
        let mut r = rng(seed);
        let q = random_signs(&mut r, 1, d);
        let db = random_signs(&mut r, n, d);
        let order = hamming_ranking(pack(q.view()).unwrap().row(0), &pack(db.view()).unwrap()).unwrap();
        prop_assert_eq!(order, rank_loop(q.row(0).as_slice().unwrap(), &db));
    }

    #[test]
    fn promoting_a_relevant_item_never_lowers_ap(
        rel in prop::collection::vec(any::<bool>(), 2..40),
        pick in any::<prop::sample::Index>(),
    ) {
        let base = average_precision(&rel, None);
        let relevant: Vec<usize> = rel.iter().enumerate().filter(|(_, r)| **r).map(|(i, _)| i).collect();
        if relevant.is_empty() || relevant[0] == 0 && relevant.len() == rel.len() {
            return Ok(());
        }
        let i = relevant[pick.index(relevant.len())];
        if i == 0 {
            return Ok(());
        }
        let mut better = rel.clone();
        better.swap(i, i - 1);
        prop_assert!(average_precision(&better, None).unwrap() >= base.unwrap() - 1e-15);
        prop_assert_eq!(base, ap_oracle(&rel));
    }

    #[test]
    fn loss_is_row_scale_invariant(seed in 0u64..500, row in 0usize..6, c in 0.01f64..100.0) {
        let mut r = rng(seed);
        let hi = random_matrix(&mut r, 6, 4, -1.0, 1.0);
        let ht = random_matrix(&mut r, 6, 4, -1.0, 1.0);
        let s = random_matrix(&mut r, 6, 6, -1.0, 1.0);
        let p = LossParams::default();
        let a = total_loss_and_grads(hi.view(), ht.view(), s.view(), &p, GradMask::Both).unwrap();
        let mut scaled = hi.clone();
        scaled.row_mut(row).mapv_inplace(|v| v * c);
        let b = total_loss_and_grads(scaled.view(), ht.view(), s.view(), &p, GradMask::Both).unwrap();
        prop_assert!((a.total - b.total).abs() <= 1e-10 * a.total.max(1.0));
        prop_assert!(a.l_c >= 0.0 && a.l_g >= 0.0 && a.l_i >= 0.0);
        prop_assert_eq!(a.total, a.l_c + p.lambda1 * a.l_g + p.lambda2 * a.l_i);
    }

    #[test]
    fn sign_matches_loop(seed in 0u64..500) {
        let mut r = rng(seed);
        let mut h = random_matrix(&mut r, 7, 5, -1.0, 1.0);
        h[[0, 0]] = 0.0;
        let b = sign_quantize(h.view()).unwrap();
        for (x, y) in h.iter().zip(b.iter()) {
            prop_assert_eq!(*y, if *x >= 0.0 { 1.0 } else { -1.0 });
        }
    }
}

#[test]
fn gc_model_is_permutation_equivariant() {
    let ds = small_dataset(3, 12);
    let params = GcParams { k: 7, beta: 30.0, ..GcParams::default() };
    let base = GcModel::build(&ds, &params).unwrap();
    let mut perm: Vec<usize> = (0..ds.m()).collect();
    perm.reverse();
    perm.swap(3, 20);
    let moved = GcModel::build(&ds.subset(&perm).unwrap(), &params).unwrap();
    let mut dense = base.pcond.to_dense();
    let moved_dense = moved.pcond.to_dense();
    let re = |a: &Array2<f64>| a.select(Axis(0), &perm).select(Axis(1), &perm);
    let tol = |a: &Array2<f64>, b: &Array2<f64>| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    assert!(tol(&re(&base.dist), &moved.dist));
    dense = re(&dense);
    assert!(tol(&dense, &moved_dense));
    assert!(tol(&re(&base.prob), &moved.prob));
    assert!(tol(&re(&base.s_final), &moved.s_final));
}

#[test]
fn gc_model_invariants_on_synthetic() {
    let ds = small_dataset(9, 34);
    let params = GcParams { k: 10, ..GcParams::default() };
    let g = GcModel::build(&ds, &params).unwrap();
    let m = ds.m();
    let dense = g.pcond.to_dense();
    let maxp = g.prob.iter().copied().fold(0.0, f64::max);
    for i in 0..m {
        assert!((dense.row(i).sum() - 1.0).abs() < 1e-6);
        assert!(g.pcond.row(i).0.len() <= params.k);
        for j in 0..m {
            assert!(dense[[i, j]] >= 0.0);
            assert!((0.0..=1.0 + 1e-12).contains(&g.dist[[i, j]]));
            assert_eq!(g.prob[[i, j]], g.prob[[j, i]]);
            assert_eq!(g.s_final[[i, j]], g.s_final[[j, i]]);
            let s = g.s_final[[i, j]];
            assert!(s >= -1.0 - 1e-12 && s <= 2.0 * params.gamma * params.beta * maxp + 1.0 + 1e-12);
        }
    }
}

fn forward_oracle(net: &HashNet, f: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((f.nrows(), net.d_bits()));
    for r in 0..f.nrows() {
        let mut hidden = vec![0.0; net.hidden()];
        for (u, h) in hidden.iter_mut().enumerate() {
            let mut z = net.b1[u];
            for c in 0..net.d_in() {
                z += net.w1[[u, c]] * f[[r, c]];
            }
            *h = z.max(0.0);
        }
        for b in 0..net.d_bits() {
            let mut z = net.b2[b];
            for (u, h) in hidden.iter().enumerate() {
                z += net.w2[[b, u]] * h;
            }
            out[[r, b]] = z.tanh();
        }
    }
    out
}

#[test]
fn forward_matches_straight_line_oracle() {
    let mut r = rng(77);
    let mut net = HashNet::init(7, 11, 5, 4).unwrap();
    net.b1 = random_matrix(&mut r, 1, 11, -0.5, 0.5).row(0).to_owned();
    net.b2 = random_matrix(&mut r, 1, 5, -0.5, 0.5).row(0).to_owned();
    let f = random_matrix(&mut r, 9, 7, 0.0, 2.0);
    let h = net.encode(f.view()).unwrap();
    let o = forward_oracle(&net, &f);
    assert!(h.iter().zip(&o).all(|(a, b)| (a - b).abs() < 1e-6));
    assert!(h.iter().all(|v| *v > -1.0 && *v < 1.0));
}

#[test]
fn init_weight_mean_is_centered() {
    let net = HashNet::init(512, 4096, 8, 0).unwrap();
    let count = net.w1.len() as f64;
    let limit = (6.0f64 / (512.0 + 4096.0)).sqrt();
    let sigma = limit / 3f64.sqrt();
    let mean = net.w1.mean().unwrap();
    assert!(mean.abs() < 3.0 * sigma / count.sqrt(), "mean {mean}");
    assert!(net.w1.iter().all(|w| w.abs() <= limit));
    assert!(net.b1.iter().chain(net.b2.iter()).all(|b| *b == 0.0));
}

#[test]
fn momentum_unrolls_by_hand() {
    let mut net = HashNet::init(2, 2, 2, 1).unwrap();
    let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0, ..SgdConfig::default() };
    let (_, cache) = net.forward(Array2::from_elem((2, 2), 0.5).view()).unwrap();
    let grads = net.backward(&cache, Array2::from_elem((2, 2), 0.3).view());
    let p0 = net.w2.clone();
    net.apply_grads(&grads, &cfg).unwrap();
    let p1 = net.w2.clone();
    net.apply_grads(&grads, &cfg).unwrap();
    let p2 = net.w2.clone();
    for ((a, b), (c, g)) in p0.iter().zip(&p1).zip(p2.iter().zip(&grads.w2)) {
        assert!(((a - b) - 0.1 * g).abs() < 1e-15);
        assert!(((b - c) - 0.1 * 1.9 * g).abs() < 1e-15);
    }
}
