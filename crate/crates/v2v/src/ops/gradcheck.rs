//! Central finite-difference gradient checker.
//!
//! Works on a scalar projection of the op output: loss(x) = <f(x), r> with a
//! seeded random projection r. The analytic gradient comes from the op's
//! backward pass invoked with dy = r; the numeric gradient from central
//! differences. Projections accumulate in f64 to keep the difference quotient
//! out of f32 cancellation noise.

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn projection(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(dims, data).expect("dims")
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| *x as f64 * *y as f64)
        .sum()
}

/// Checks every coordinate of x; returns the worst relative error.
pub fn gradcheck<F, B>(forward: F, backward: B, x: &Tensor, eps: f32, seed: u64) -> f32
where
    F: Fn(&Tensor) -> Tensor,
    B: Fn(&Tensor, &Tensor) -> Tensor,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    gradcheck_coords(forward, backward, x, eps, seed, &coords)
}

/// Same check restricted to `max_coords` seeded-random coordinates; use for
/// large inputs where the full sweep is too slow.
pub fn gradcheck_sampled<F, B>(
    forward: F,
    backward: B,
    x: &Tensor,
    eps: f32,
    seed: u64,
    max_coords: usize,
) -> f32
where
    F: Fn(&Tensor) -> Tensor,
    B: Fn(&Tensor, &Tensor) -> Tensor,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let coords: Vec<usize> = if x.len() <= max_coords {
        (0..x.len()).collect()
    } else {
        (0..max_coords).map(|_| rng.gen_range(0..x.len())).collect()
    };
    gradcheck_coords(forward, backward, x, eps, seed, &coords)
}

fn gradcheck_coords<F, B>(
    forward: F,
    backward: B,
    x: &Tensor,
    eps: f32,
    seed: u64,
    coords: &[usize],
) -> f32
where
    F: Fn(&Tensor) -> Tensor,
    B: Fn(&Tensor, &Tensor) -> Tensor,
{
    let y = forward(x);
    let r = projection(y.dims(), seed);
    let analytic = backward(x, &r);
    assert_eq!(analytic.dims(), x.dims(), "backward must match input dims");

    let mut worst = 0.0f32;
    for &i in coords {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let num = (dot(&forward(&xp), &r) - dot(&forward(&xm), &r)) / (2.0 * eps as f64);
        let ana = analytic.data()[i] as f64;
        let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1.0);
        worst = worst.max(rel as f32);
    }
    worst
}
