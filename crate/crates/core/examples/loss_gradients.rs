//! Evaluate the hashing loss on random relaxed codes and check the analytic
//! gradient against central differences.
//!
//! cargo run --release --example loss_gradients

use gchash::loss::{total_loss_and_grads, GradMask, LossParams};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gchash::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rand = |r, c| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
    let (hi, ht, s) = (rand(8, 6), rand(8, 6), rand(8, 8));
    let params = LossParams::default();
    let out = total_loss_and_grads(hi.view(), ht.view(), s.view(), &params, GradMask::Both)?;
    println!("L_c {:.6}  L_g {:.6}  L_i {:.6}  total {:.6}", out.l_c, out.l_g, out.l_i, out.total);

    let h = 1e-5;
    let mut worst = 0.0f64;
    for idx in [(0, 0), (3, 2), (7, 5)] {
        let value = |x: &Array2<f64>| {
            total_loss_and_grads(x.view(), ht.view(), s.view(), &params, GradMask::Both).map(|o| o.total)
        };
        let (mut up, mut down) = (hi.clone(), hi.clone());
        up[idx] += h;
        down[idx] -= h;
        let fd = (value(&up)? - value(&down)?) / (2.0 * h);
        println!("dL/dH_I{idx:?}  analytic {:+.8}  numeric {:+.8}", out.grad_hi[idx], fd);
        worst = worst.max((fd - out.grad_hi[idx]).abs());
    }
    println!("largest difference {worst:.2e}");

    let frozen = total_loss_and_grads(hi.view(), ht.view(), s.view(), &params, GradMask::ImgOnly)?;
    println!("text gradient with the text net frozen is zero: {}", frozen.grad_ht.iter().all(|g| *g == 0.0));
    Ok(())
}
