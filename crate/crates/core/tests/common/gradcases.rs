//! Finite-difference gradient checks for the network ops and every loss.
//! Each case builds one random trial and returns its worst relative error.

use octsurf_autograd::{check_gradients, Graph, Tensor, Var};
use octsurf_core::losses::ops::{dice_ce, local_ncc, smooth_align, smooth_l1, smooth_surface, surface_ce, Reduction};
use octsurf_core::model::ops::{soft_argmax, stm_warp, topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TRIALS: u64 = 20;
pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random displacement with entries kept away from integers, so linear
/// interpolation is differentiable at every sample.
fn off_grid(n: usize, rng: &mut ChaCha8Rng, range: f64) -> Tensor<f64> {
    Tensor::from_fn(&[n], |_| {
        let v: f64 = rng.random_range(-range..range);
        let f = v - v.floor();
        if !(0.05..=0.95).contains(&f) { v.floor() + 0.5 } else { v }
    })
}

fn max_error(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    check_gradients(&inputs, EPS, build).max_relative_error()
}

fn weighted_sum_all(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    // random projection so every output element matters
    let shape = g.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&shape, &mut rng, -1.0, 1.0));
    let p = g.mul(x, w);
    g.sum(p)
}

pub fn stm(t: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(t);
    let x = random(&[3, 2, 7, 4], &mut rng, -1.0, 1.0);
    let d = off_grid(3, &mut rng, 3.0);
    max_error(vec![x, d], move |g, v| {
        let y = stm_warp(g, v[0], v[1]);
        weighted_sum_all(g, y, 100 + t)
    })
}

pub fn soft_argmax_case(t: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(t);
    let x = random(&[2, 2, 6, 3], &mut rng, -2.0, 2.0);
    max_error(vec![x], move |g, v| {
        let q = g.softmax(v[0], 2);
        let s = soft_argmax(g, q);
        weighted_sum_all(g, s, 200 + t)
    })
}

pub fn topology_case(t: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(t);
    // well separated values so no tie sits within the finite-difference step
    let x = Tensor::from_fn(&[2, 4, 3], |_| rng.random_range(0..20) as f64 * 0.5 + 0.1 * rng.random_range(0.0..1.0));
    max_error(vec![x], move |g, v| {
        let y = topology(g, v[0]);
        weighted_sum_all(g, y, 300 + t)
    })
}

pub fn ncc(t: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(t);
    let x = random(&[3, 1, 9, 7], &mut rng, 0.0, 1.0);
    let d = off_grid(3, &mut rng, 2.0);
    max_error(vec![x, d], |g, v| {
        let w = stm_warp(g, v[0], v[1]);
        local_ncc(g, w, 5)
    })
}

pub fn smooth_align_case(t: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(t);
    let (nb, k, w) = (4, 2, 3);
    let truth: Vec<f64> = (0..nb * k * w).map(|_| rng.random_range(5.0..30.0)).collect();
    let mask: Vec<f32> = (0..nb * k * w).map(|_| if rng.random_bool(0.8) { 1.0 } else { 0.0 }).collect();
    let d = random(&[nb], &mut rng, -3.0, 3.0);
    let reduction = if t % 2 == 0 { Reduction::Mean } else { Reduction::Sum };
    max_error(vec![d], move |g, v| smooth_align(g, v[0], &truth, &mask, k, reduction))
}

pub fn surface_ce_case(t: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(t);
    let (d, k, r, w) = (2, 2, 5, 3);
    let x = random(&[d, k, r, w], &mut rng, -2.0, 2.0);
    let targets: Vec<Option<usize>> =
        (0..d * k * w).map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..r))).collect();
    max_error(vec![x], move |g, v| {
        let q = g.softmax(v[0], 2);
        surface_ce(g, q, targets.clone(), Reduction::Mean)
    })
}

pub fn smooth_l1_case(t: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(t);
    let n = 2 * 3 * 4;
    let pred = random(&[2, 3, 4], &mut rng, 0.0, 10.0);
    // keep |pred - target| away from the kink at 1
    let target: Vec<f64> = pred
        .data()
        .iter()
        .map(|&p| {
            let off: f64 = rng.random_range(-3.0..3.0);
            p + if (off.abs() - 1.0).abs() < 0.05 { 0.5 } else { off }
        })
        .collect();
    let mask: Vec<f32> = (0..n).map(|_| if rng.random_bool(0.8) { 1.0 } else { 0.0 }).collect();
    max_error(vec![pred], move |g, v| smooth_l1(g, v[0], target.clone(), mask.clone(), Reduction::Mean))
}

pub fn smooth_surface_case(t: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(t);
    let p = random(&[3, 2, 4], &mut rng, 0.0, 10.0);
    max_error(vec![p], move |g, v| {
        let s = smooth_surface(g, v[0], Reduction::Mean);
        weighted_sum_all(g, s, 400 + t)
    })
}

pub fn dice_ce_case(t: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(t);
    let (d, c, h, w) = (2, 3, 4, 3);
    let x = random(&[d, c, h, w], &mut rng, -2.0, 2.0);
    let labels: Vec<u8> = (0..d * h * w).map(|_| rng.random_range(0..c as u8)).collect();
    max_error(vec![x], move |g, v| dice_ce(g, v[0], labels.clone()))
}

pub type Case = (&'static str, fn(u64) -> f64);

pub const CASES: [Case; 9] = [
    ("stm", stm),
    ("soft_argmax", soft_argmax_case),
    ("topology", topology_case),
    ("ncc", ncc),
    ("smooth_align", smooth_align_case),
    ("surface_ce", surface_ce_case),
    ("smooth_l1", smooth_l1_case),
    ("smooth_surface", smooth_surface_case),
    ("dice_ce", dice_ce_case),
];
