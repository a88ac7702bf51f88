#![allow(dead_code)]

use miniseq_core::blocks::{Labels, IGNORE_INDEX};
use miniseq_core::memtrack::Arena;
use miniseq_core::tensor::{Dtype, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn rand_tensor(arena: &Arena, shape: &[usize], rng: &mut ChaCha8Rng, scale: f64, label: &str) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_f64(arena, shape, Dtype::F64, &uniform(rng, n, scale), label).unwrap()
}

pub fn rand_param(arena: &Arena, shape: &[usize], rng: &mut ChaCha8Rng, scale: f64, label: &str) -> Tensor {
    let n = shape.iter().product();
    Tensor::new_param(arena, shape, Dtype::F64, &uniform(rng, n, scale), label).unwrap()
}

/// Labels in `[0, vocab)` with roughly `ignore_frac` of them ignored; at
/// least one stays valid.
pub fn rand_labels(rng: &mut ChaCha8Rng, n: usize, vocab: usize, ignore_frac: f64) -> Labels {
    let mut ids: Vec<i64> = (0..n)
        .map(|_| {
            if rng.random_bool(ignore_frac) {
                IGNORE_INDEX
            } else {
                rng.random_range(0..vocab as i64)
            }
        })
        .collect();
    if ids.iter().all(|&i| i == IGNORE_INDEX) {
        ids[0] = 0;
    }
    Labels::new(ids, vocab).unwrap()
}

/// Returns a copy of `t` with element `idx` shifted by `delta`.
pub fn perturbed(t: &Tensor, idx: usize, delta: f64) -> Tensor {
    let mut c = t.duplicate(t.label());
    c.set(idx, t.get(idx) + delta);
    c
}

/// Central-difference gradient of `f` with respect to every element of `t`.
pub fn numeric_grad(t: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    (0..t.numel())
        .map(|i| (f(&perturbed(t, i, h)) - f(&perturbed(t, i, -h))) / (2.0 * h))
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den == 0.0 {
        0.0
    } else {
        diff / den
    }
}

/// `Σ r ⊙ t`, the scalar loss used to drive backward passes in tests.
pub fn weighted_sum(t: &Tensor, r: &Tensor) -> f64 {
    t.to_vec().iter().zip(r.to_vec()).map(|(a, b)| a * b).sum()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
