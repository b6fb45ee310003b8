//! Randomized finite-difference checks for every differentiable graph op.

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck;
use crate::tensor::{ConvSpec, ConvTransposeSpec, Graph, PadMode, Tensor, TensorError, Var};

pub const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub trials: usize,
    pub worst: f64,
}

fn dims(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=max)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v: f64 = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>;
type Case = (Vec<Tensor<f64>>, OpFn);

fn case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let rank = rng.random_range(1..=3);
    let shape = dims(rng, rank, 4);
    match op {
        "add" | "sub" | "mul" => {
            let a = rand_tensor(rng, &shape, -2.0, 2.0);
            let b = rand_tensor(rng, &shape, -2.0, 2.0);
            let f: OpFn = match op {
                "add" => Box::new(|g, v| g.add(v[0], v[1])),
                "sub" => Box::new(|g, v| g.sub(v[0], v[1])),
                _ => Box::new(|g, v| g.mul(v[0], v[1])),
            };
            (vec![a, b], f)
        }
        "scale" => {
            let c = rng.random_range(-3.0..3.0);
            (vec![rand_tensor(rng, &shape, -2.0, 2.0)], Box::new(move |g, v| g.scale(v[0], c)))
        }
        "add_scalar" => {
            let c = rng.random_range(-3.0..3.0);
            (vec![rand_tensor(rng, &shape, -2.0, 2.0)], Box::new(move |g, v| g.add_scalar(v[0], c)))
        }
        "bias_add" => {
            let r = rng.random_range(2..=4);
            let shape = dims(rng, r, 3);
            let b = rand_tensor(rng, &[shape[1]], -1.0, 1.0);
            (vec![rand_tensor(rng, &shape, -2.0, 2.0), b], Box::new(|g, v| g.bias_add(v[0], v[1])))
        }
        "matmul" => {
            let (m, k, n) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=5));
            let a = rand_tensor(rng, &[m, k], -1.0, 1.0);
            let b = rand_tensor(rng, &[k, n], -1.0, 1.0);
            (vec![a, b], Box::new(|g, v| g.matmul(v[0], v[1])))
        }
        "conv2d" => {
            let n = rng.random_range(1..=2);
            let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let k = *[1usize, 2, 3, 4].choose(rng).unwrap();
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=k / 2 + 1);
            let mode = if rng.random_bool(0.5) { PadMode::Zero } else { PadMode::Reflect };
            let (h, w) = (rng.random_range(k.max(2)..=6), rng.random_range(k.max(2)..=6));
            let x = rand_tensor(rng, &[n, cin, h, w], -1.0, 1.0);
            let wt = rand_tensor(rng, &[cout, cin, k, k], -1.0, 1.0);
            let mut spec = ConvSpec::new(stride, pad, mode);
            if rng.random_bool(0.5) {
                let mask = Tensor::from_fn(vec![cout, cin, k, k], |_| if rng.random_bool(0.6) { 1.0 } else { 0.0 });
                spec = spec.with_mask(Arc::new(mask));
            }
            (vec![x, wt], Box::new(move |g, v| g.conv2d(v[0], v[1], &spec)))
        }
        "conv2d_wide" => {
            // Grids of at least 64 outputs take the per-sample GEMM path.
            let n = rng.random_range(1..=2);
            let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let k = *[1usize, 3].choose(rng).unwrap();
            let pad = if k == 1 { rng.random_range(0..=1) } else { 1 };
            let mode = if rng.random_bool(0.5) { PadMode::Zero } else { PadMode::Reflect };
            let (h, w) = (rng.random_range(8..=10), rng.random_range(8..=10));
            let x = rand_tensor(rng, &[n, cin, h, w], -1.0, 1.0);
            let wt = rand_tensor(rng, &[cout, cin, k, k], -1.0, 1.0);
            let mut spec = ConvSpec::new(1, pad, mode);
            if rng.random_bool(0.5) {
                let mask = Tensor::from_fn(vec![cout, cin, k, k], |_| if rng.random_bool(0.6) { 1.0 } else { 0.0 });
                spec = spec.with_mask(Arc::new(mask));
            }
            (vec![x, wt], Box::new(move |g, v| g.conv2d(v[0], v[1], &spec)))
        }
        "conv_transpose2d" => {
            let n = rng.random_range(1..=2);
            let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let k = rng.random_range(2..=4);
            let stride = rng.random_range(1..=2);
            let output_padding = rng.random_range(0..stride);
            let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let grow = |s: usize| (s - 1) * stride + k + output_padding;
            let max_pad = (grow(h).min(grow(w)) - 1) / 2;
            let padding = rng.random_range(0..=max_pad.min(k - 1));
            let spec = ConvTransposeSpec { stride, padding, output_padding };
            let x = rand_tensor(rng, &[n, cin, h, w], -1.0, 1.0);
            let wt = rand_tensor(rng, &[cin, cout, k, k], -1.0, 1.0);
            (vec![x, wt], Box::new(move |g, v| g.conv_transpose2d(v[0], v[1], spec)))
        }
        "relu" => (vec![away_from(rng, &shape, -2.0, 2.0, &[0.0], 1e-3)], Box::new(|g, v| g.relu(v[0]))),
        "tanh" => (vec![rand_tensor(rng, &shape, -3.0, 3.0)], Box::new(|g, v| g.tanh(v[0]))),
        "sigmoid" => (vec![rand_tensor(rng, &shape, -4.0, 4.0)], Box::new(|g, v| g.sigmoid(v[0]))),
        "exp" => (vec![rand_tensor(rng, &shape, -2.0, 2.0)], Box::new(|g, v| g.exp(v[0]))),
        "log" => (vec![rand_tensor(rng, &shape, 0.2, 3.0)], Box::new(|g, v| g.log(v[0]))),
        "softmax" | "log_softmax" => {
            let axis = rng.random_range(0..rank);
            let x = rand_tensor(rng, &shape, -3.0, 3.0);
            if op == "softmax" {
                (vec![x], Box::new(move |g, v| g.softmax(v[0], axis)))
            } else {
                (vec![x], Box::new(move |g, v| g.log_softmax(v[0], axis)))
            }
        }
        "sum" => (vec![rand_tensor(rng, &shape, -2.0, 2.0)], Box::new(|g, v| g.sum(v[0]))),
        "mean" => (vec![rand_tensor(rng, &shape, -2.0, 2.0)], Box::new(|g, v| g.mean(v[0]))),
        "sum_last" => (vec![rand_tensor(rng, &shape, -2.0, 2.0)], Box::new(|g, v| g.sum_last(v[0]))),
        "reshape" => {
            let numel: usize = shape.iter().product();
            let mut target = vec![numel];
            if numel.is_multiple_of(2) {
                target = vec![2, numel / 2];
            }
            (vec![rand_tensor(rng, &shape, -2.0, 2.0)], Box::new(move |g, v| g.reshape(v[0], &target)))
        }
        "concat" => {
            let axis = rng.random_range(0..rank);
            let parts = rng.random_range(1..=3);
            let xs = (0..parts)
                .map(|_| {
                    let mut s = shape.clone();
                    s[axis] = rng.random_range(1..=3);
                    rand_tensor(rng, &s, -2.0, 2.0)
                })
                .collect();
            (xs, Box::new(move |g, v| g.concat(v, axis)))
        }
        "slice" => {
            let axis = rng.random_range(0..rank);
            let start = rng.random_range(0..shape[axis]);
            let len = rng.random_range(1..=shape[axis] - start);
            (vec![rand_tensor(rng, &shape, -2.0, 2.0)], Box::new(move |g, v| g.slice(v[0], axis, start, len)))
        }
        "pad_reflect" => {
            let r = rng.random_range(2..=4);
            let shape = dims(rng, r, 4);
            let pad = rng.random_range(0..=3);
            (vec![rand_tensor(rng, &shape, -2.0, 2.0)], Box::new(move |g, v| g.pad_reflect(v[0], pad)))
        }
        "gather" => {
            let axis = rng.random_range(0..rank);
            let positions = shape.iter().product::<usize>() / shape[axis];
            let index: Vec<usize> = (0..positions).map(|_| rng.random_range(0..shape[axis])).collect();
            (vec![rand_tensor(rng, &shape, -2.0, 2.0)], Box::new(move |g, v| g.gather(v[0], axis, &index)))
        }
        "pick_log_softmax" => {
            let axis = rng.random_range(0..rank);
            let positions = shape.iter().product::<usize>() / shape[axis];
            let index: Vec<usize> = (0..positions).map(|_| rng.random_range(0..shape[axis])).collect();
            let x = rand_tensor(rng, &shape, -3.0, 3.0);
            (vec![x], Box::new(move |g, v| g.pick_log_softmax(v[0], axis, &index)))
        }
        "clamp" => {
            let (lo, hi) = (-0.7, 0.9);
            let x = away_from(rng, &shape, -2.0, 2.0, &[lo, hi], 1e-3);
            (vec![x], Box::new(move |g, v| g.clamp(v[0], lo, hi)))
        }
        other => panic!("no gradient case for {other}"),
    }
}

pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "bias_add",
    "matmul",
    "conv2d",
    "conv2d_wide",
    "conv_transpose2d",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "sum_last",
    "reshape",
    "concat",
    "slice",
    "pad_reflect",
    "gather",
    "pick_log_softmax",
    "clamp",
];

/// Runs `trials` random shapes and seeds through one op.
pub fn check_op(op: &'static str, trials: usize, seed: u64) -> Result<OpReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (inputs, f) = case(op, &mut rng);
        worst = worst.max(gradcheck::check(&inputs, f, &mut rng, EPS)?);
    }
    Ok(OpReport { op, trials, worst })
}

pub fn check_all(trials: usize, seed: u64) -> Result<Vec<OpReport>, TensorError> {
    OPS.iter().enumerate().map(|(i, op)| check_op(op, trials, seed.wrapping_add(i as u64))).collect()
}
