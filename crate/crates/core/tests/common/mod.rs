#![allow(dead_code)]

use abacus::distributions::Distribution;
use abacus::tensor::math::{log_sigmoid, logsumexp, sigmoid};
use abacus::{Array, BayesianNet, Observed, Result, RngState, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(1, |a|, |n|)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `Σ f(inputs) · r` for a fixed random `r`. Checks at most
/// `max_coords` coordinates per input.
pub fn gradcheck(
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[Array],
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let probe = f(&inputs.iter().cloned().map(Tensor::constant).collect::<Vec<_>>())?;
    let r = Array::from_shape_fn(probe.shape().to_vec(), |_| rng.random_range(-1.0..1.0));
    let weight = Tensor::constant(r);
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let grads = f(&leaves)?.mul(&weight)?.sum_all().backward()?;

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&leaves[i]);
        let n = input.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.random_range(0..n)).collect()
        };
        for c in coords {
            let eval = |delta: f64| -> Result<Array> {
                let xs: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, a)| {
                        let mut a = a.clone();
                        if j == i {
                            a.data_mut()[c] += delta;
                        }
                        Tensor::constant(a)
                    })
                    .collect();
                Ok(f(&xs)?.value().clone())
            };
            let (hi, lo) = (eval(FD_STEP)?, eval(-FD_STEP)?);
            let numeric = hi
                .data()
                .iter()
                .zip(lo.data())
                .zip(weight.value().data())
                .map(|((h, l), w)| (h - l) * w)
                .sum::<f64>()
                / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[c], numeric));
        }
    }
    Ok(worst)
}

fn random_shape(rng: &mut ChaCha8Rng, rank: usize, max_numel: usize) -> Vec<usize> {
    loop {
        let s: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=16)).collect();
        if s.iter().product::<usize>() <= max_numel {
            return s;
        }
    }
}

/// A shape that broadcasts against `shape`: a random suffix with some axes set to 1.
fn broadcast_partner(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<usize> {
    let keep = rng.random_range(0..=shape.len());
    shape[shape.len() - keep..]
        .iter()
        .map(|&d| if rng.random_bool(0.3) { 1 } else { d })
        .collect()
}

fn uniform_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_shape_fn(shape.to_vec(), |_| rng.random_range(-1.5..1.5))
}

#[derive(Debug, Clone)]
enum Op {
    Unary(usize),
    Binary(usize, usize),
    LogAddExp(usize),
    Reduce(usize, usize, bool),
    MatMul(usize),
    Transpose,
    Flatten,
    ExpandDims(usize),
    TakeLast(Array),
    SumTrailing(usize),
}

/// A random chain of primitives over a set of inputs; the first input is the
/// running value, later ones are consumed by binary ops.
#[derive(Debug, Clone)]
pub struct Composition {
    pub inputs: Vec<Array>,
    ops: Vec<Op>,
}

const UNARY: usize = 9;
const BINARY: usize = 4;

fn apply_unary(kind: usize, x: &Tensor) -> Result<Tensor> {
    Ok(match kind {
        0 => x.neg(),
        1 => x.mul_scalar(0.5).exp(),
        2 => x.softplus().add_scalar(0.5).log()?,
        3 => x.sigmoid(),
        4 => x.tanh(),
        5 => x.softplus(),
        6 => x.square(),
        7 => x.softplus().add_scalar(0.5).sqrt()?,
        _ => x.add_scalar(0.3).mul_scalar(-1.7),
    })
}

fn apply_binary(kind: usize, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    match kind {
        0 => x.add(y),
        1 => x.sub(y),
        2 => x.mul(y),
        _ => x.div(&y.softplus().add_scalar(0.5)),
    }
}

impl Composition {
    pub fn random(rng: &mut ChaCha8Rng, n_ops: usize) -> Self {
        let rank = rng.random_range(0..=4);
        let mut shape = random_shape(rng, rank, 256);
        let mut inputs = vec![uniform_array(rng, &shape)];
        let mut ops = Vec::new();
        for _ in 0..n_ops {
            let r = shape.len();
            let choice = rng.random_range(0..10);
            let op = match choice {
                0 => {
                    let s = broadcast_partner(rng, &shape);
                    inputs.push(uniform_array(rng, &s));
                    Op::Binary(rng.random_range(0..BINARY), inputs.len() - 1)
                }
                1 => {
                    let s = broadcast_partner(rng, &shape);
                    inputs.push(uniform_array(rng, &s));
                    Op::LogAddExp(inputs.len() - 1)
                }
                2 if r > 0 => {
                    let axis = rng.random_range(0..r);
                    let keep = rng.random_bool(0.5);
                    if keep {
                        shape[axis] = 1;
                    } else {
                        shape.remove(axis);
                    }
                    Op::Reduce(rng.random_range(0..4), axis, keep)
                }
                3 if r >= 2 => {
                    let n = rng.random_range(1..=6);
                    let mut s = shape[..r - 2].to_vec();
                    s.extend([shape[r - 1], n]);
                    inputs.push(uniform_array(rng, &s));
                    shape[r - 1] = n;
                    Op::MatMul(inputs.len() - 1)
                }
                4 if r >= 2 => {
                    shape.swap(r - 1, r - 2);
                    Op::Transpose
                }
                5 => {
                    shape = vec![shape.iter().product()];
                    Op::Flatten
                }
                6 if r < 4 => {
                    let axis = rng.random_range(0..=r);
                    shape.insert(axis, 1);
                    Op::ExpandDims(axis)
                }
                7 if r >= 1 => {
                    let k = shape[r - 1];
                    let idx_shape = broadcast_partner(rng, &shape[..r - 1]);
                    let idx = Array::from_shape_fn(idx_shape, |_| rng.random_range(0..k) as f64);
                    shape.pop();
                    Op::TakeLast(idx)
                }
                8 if r >= 1 => {
                    let n = rng.random_range(1..=r);
                    shape.truncate(r - n);
                    Op::SumTrailing(n)
                }
                _ => Op::Unary(rng.random_range(0..UNARY)),
            };
            ops.push(op);
        }
        Self { inputs, ops }
    }

    pub fn eval(&self, xs: &[Tensor]) -> Result<Tensor> {
        let mut v = xs[0].clone();
        for op in &self.ops {
            v = match op {
                Op::Unary(k) => apply_unary(*k, &v)?,
                Op::Binary(k, i) => apply_binary(*k, &v, &xs[*i])?,
                Op::LogAddExp(i) => v.logaddexp(&xs[*i])?,
                Op::Reduce(0, a, keep) => v.sum(&[*a], *keep)?,
                Op::Reduce(1, a, keep) => v.mean(&[*a], *keep)?,
                Op::Reduce(2, a, keep) => v.logsumexp(&[*a], *keep)?,
                Op::Reduce(_, a, keep) => v.max(&[*a], *keep)?,
                Op::MatMul(i) => v.matmul(&xs[*i])?,
                Op::Transpose => v.transpose_last()?,
                Op::Flatten => {
                    let n = v.value().numel();
                    v.reshape([n])?
                }
                Op::ExpandDims(a) => v.expand_dims(*a)?,
                Op::TakeLast(idx) => v.take_last(idx)?,
                Op::SumTrailing(n) => v.sum_trailing(*n)?,
            };
        }
        Ok(v)
    }
}

pub type Primitive = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// Every differentiable primitive applied to random inputs of a fixed shape.
pub fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(String, Primitive, Vec<Array>)> {
    type F = Primitive;
    let a = uniform_array(rng, &[3, 4]);
    let b = uniform_array(rng, &[4]);
    let pos = a.map(|v| v.abs() + 0.5);
    let m = uniform_array(rng, &[2, 4, 3]);
    let mut cases: Vec<(String, F, Vec<Array>)> = vec![
        ("add".into(), Box::new(|x| x[0].add(&x[1])), vec![a.clone(), b.clone()]),
        ("sub".into(), Box::new(|x| x[0].sub(&x[1])), vec![a.clone(), b.clone()]),
        ("mul".into(), Box::new(|x| x[0].mul(&x[1])), vec![a.clone(), b.clone()]),
        ("div".into(), Box::new(|x| x[0].div(&x[1])), vec![a.clone(), b.map(|v| v.abs() + 0.5)]),
        ("logaddexp".into(), Box::new(|x| x[0].logaddexp(&x[1])), vec![a.clone(), b.clone()]),
        ("neg".into(), Box::new(|x| Ok(x[0].neg())), vec![a.clone()]),
        ("exp".into(), Box::new(|x| Ok(x[0].exp())), vec![a.clone()]),
        ("log".into(), Box::new(|x| x[0].log()), vec![pos.clone()]),
        ("sigmoid".into(), Box::new(|x| Ok(x[0].sigmoid())), vec![a.clone()]),
        ("tanh".into(), Box::new(|x| Ok(x[0].tanh())), vec![a.clone()]),
        ("softplus".into(), Box::new(|x| Ok(x[0].softplus())), vec![a.clone()]),
        ("square".into(), Box::new(|x| Ok(x[0].square())), vec![a.clone()]),
        ("sqrt".into(), Box::new(|x| x[0].sqrt()), vec![pos.clone()]),
        ("add_scalar".into(), Box::new(|x| Ok(x[0].add_scalar(2.0))), vec![a.clone()]),
        ("mul_scalar".into(), Box::new(|x| Ok(x[0].mul_scalar(-3.0))), vec![a.clone()]),
        ("matmul".into(), Box::new(|x| x[0].matmul(&x[1])), vec![a.clone(), m]),
        ("reshape".into(), Box::new(|x| x[0].reshape([2, 6])), vec![a.clone()]),
        ("expand_dims".into(), Box::new(|x| x[0].expand_dims(1)), vec![a.clone()]),
        ("transpose_last".into(), Box::new(|x| x[0].transpose_last()), vec![a.clone()]),
        ("sum".into(), Box::new(|x| x[0].sum(&[1], false)), vec![a.clone()]),
        ("mean".into(), Box::new(|x| x[0].mean(&[0], true)), vec![a.clone()]),
        ("logsumexp".into(), Box::new(|x| x[0].logsumexp(&[1], false)), vec![a.clone()]),
        ("max".into(), Box::new(|x| x[0].max(&[0], false)), vec![a.clone()]),
        ("sum_all".into(), Box::new(|x| Ok(x[0].sum_all())), vec![a.clone()]),
        ("mean_all".into(), Box::new(|x| Ok(x[0].mean_all())), vec![a.clone()]),
        ("sum_trailing".into(), Box::new(|x| x[0].sum_trailing(1)), vec![a.clone()]),
    ];
    let idx = Array::from_vec(vec![0.0, 3.0, 1.0]);
    cases.push(("take_last".into(), Box::new(move |x| x[0].take_last(&idx)), vec![a.clone()]));
    cases.push((
        "clamp_interior".into(),
        Box::new(|x| Ok(x[0].clamp(-10.0, 10.0))),
        vec![a.clone()],
    ));
    cases
}

pub fn test_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One Bernoulli latent, one observed Bernoulli:
/// `z ~ Bern(σ(a))`, `x | z ~ Bern(σ(b0 + b1 z))`, `q(z) = Bern(σ(φ))`.
#[derive(Debug, Clone, Copy)]
pub struct TinyModel {
    pub a: f64,
    pub b0: f64,
    pub b1: f64,
    pub x: f64,
}

impl TinyModel {
    pub fn log_joint_value(&self, z: f64) -> f64 {
        let lz = if z > 0.5 { log_sigmoid(self.a) } else { log_sigmoid(-self.a) };
        let l = self.b0 + self.b1 * z;
        let lx = if self.x > 0.5 { log_sigmoid(l) } else { log_sigmoid(-l) };
        lz + lx
    }

    pub fn log_evidence(&self) -> f64 {
        logsumexp(&[self.log_joint_value(0.0), self.log_joint_value(1.0)])
    }

    pub fn posterior_logit(&self) -> f64 {
        self.log_joint_value(1.0) - self.log_joint_value(0.0)
    }

    /// Exact ELBO for `q = Bern(σ(φ))`.
    pub fn elbo(&self, phi: f64) -> f64 {
        let q1 = sigmoid(phi);
        q1 * (self.log_joint_value(1.0) - log_sigmoid(phi))
            + (1.0 - q1) * (self.log_joint_value(0.0) - log_sigmoid(-phi))
    }

    /// Exact expectation of the K-sample importance-weighted bound.
    pub fn iw_bound(&self, phi: f64, k: usize) -> f64 {
        let lq = |z: usize| if z == 1 { log_sigmoid(phi) } else { log_sigmoid(-phi) };
        let mut total = 0.0;
        for mask in 0..1usize << k {
            let zs: Vec<usize> = (0..k).map(|i| (mask >> i) & 1).collect();
            let log_prob: f64 = zs.iter().map(|&z| lq(z)).sum();
            let lw: Vec<f64> = zs.iter().map(|&z| self.log_joint_value(z as f64) - lq(z)).collect();
            total += log_prob.exp() * (logsumexp(&lw) - (k as f64).ln());
        }
        total
    }

    /// Builds the model for `observed` (which must contain `z` and `x`), with
    /// parameters given as tensors so gradients can flow to them.
    pub fn build(
        a: &Tensor,
        b0: &Tensor,
        b1: &Tensor,
        observed: &Observed,
        rng: &mut RngState,
    ) -> Result<BayesianNet> {
        let mut net = BayesianNet::new(observed.clone());
        let z = net.add_node("z", Distribution::bernoulli(a.clone()), rng, None)?;
        let logits = b0.add(&b1.mul(&z)?)?;
        net.add_node("x", Distribution::bernoulli(logits), rng, None)?;
        Ok(net)
    }
}

/// Mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Central finite difference of a scalar function.
pub fn fd(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}
