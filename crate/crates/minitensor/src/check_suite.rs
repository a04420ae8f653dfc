//! Randomised gradient-check suite over every registered operation.
//!
//! Used by the crate's own tests and by the downstream acceptance suite, so
//! it lives in the library rather than in test code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::grad_check;
use crate::ops;
use crate::tensor::{Tensor, TensorError};
use crate::BatchNormState;

/// Worst relative error seen for one op over all random cases.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_error: f64,
    pub cases: usize,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::parameter(shape, rand_vec(rng, n))
}

/// Reduce an arbitrary output to a scalar through a fixed random projection,
/// so gradient errors cannot cancel the way they would under a plain sum.
fn project(out: &Tensor<f64>, weights: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
    Ok(ops::sum_all(&ops::mul(out, weights)?))
}

type CaseResult = Result<f64, TensorError>;

fn run_cases(
    op: &'static str,
    cases: usize,
    rng: &mut ChaCha8Rng,
    mut one_case: impl FnMut(&mut ChaCha8Rng) -> CaseResult,
) -> Result<OpCheck, TensorError> {
    let mut max_error = 0.0f64;
    for _ in 0..cases {
        let err = one_case(rng)?;
        if err > max_error {
            max_error = err;
        }
    }
    Ok(OpCheck {
        op,
        max_error,
        cases,
    })
}

/// Run `cases` random gradient checks per registered op and report the worst
/// relative error for each. All checks run in double precision.
pub fn check_all_ops(cases: usize, seed: u64) -> Result<Vec<OpCheck>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let eps = 1e-5;

    results.push(run_cases("matmul", cases, &mut rng, |rng| {
        let (n, k, m) = (
            rng.gen_range(1..4usize),
            rng.gen_range(1..4usize),
            rng.gen_range(1..4usize),
        );
        let batched: bool = rng.gen();
        let a_shape: Vec<usize> = if batched {
            vec![rng.gen_range(1..3), n, k]
        } else {
            vec![n, k]
        };
        let a = param(rng, &a_shape);
        let b = param(rng, &[k, m]);
        let mut out_shape = a_shape.clone();
        let ln = out_shape.len();
        out_shape[ln - 1] = m;
        let w = Tensor::constant(&out_shape.clone(), rand_vec(rng, out_shape.iter().product()));
        grad_check(
            |ps| project(&ops::matmul(&ps[0], &ps[1])?, &w),
            &[a, b],
            eps,
        )
    })?);

    results.push(run_cases("add", cases, &mut rng, |rng| {
        let rows = rng.gen_range(1..4usize);
        let cols = rng.gen_range(1..5usize);
        let a = param(rng, &[rows, cols]);
        let b = if rng.gen() {
            param(rng, &[cols])
        } else {
            param(rng, &[rows, cols])
        };
        let w = Tensor::constant(&[rows, cols], rand_vec(rng, rows * cols));
        grad_check(|ps| project(&ops::add(&ps[0], &ps[1])?, &w), &[a, b], eps)
    })?);

    results.push(run_cases("mul", cases, &mut rng, |rng| {
        let n = rng.gen_range(1..8usize);
        let a = param(rng, &[n]);
        let b = param(rng, &[n]);
        let w = Tensor::constant(&[n], rand_vec(rng, n));
        grad_check(|ps| project(&ops::mul(&ps[0], &ps[1])?, &w), &[a, b], eps)
    })?);

    results.push(run_cases("scale", cases, &mut rng, |rng| {
        let n = rng.gen_range(1..8usize);
        let c: f64 = rng.gen_range(-3.0..3.0);
        let a = param(rng, &[n]);
        let w = Tensor::constant(&[n], rand_vec(rng, n));
        grad_check(|ps| project(&ops::scale(&ps[0], c), &w), &[a], eps)
    })?);

    results.push(run_cases("relu", cases, &mut rng, |rng| {
        let n = rng.gen_range(1..10usize);
        // keep values away from the kink, where finite differences disagree
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..2.0);
                if rng.gen() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let a = Tensor::parameter(&[n], data);
        let w = Tensor::constant(&[n], rand_vec(rng, n));
        grad_check(|ps| project(&ops::relu(&ps[0]), &w), &[a], eps)
    })?);

    results.push(run_cases("concat", cases, &mut rng, |rng| {
        let rows = rng.gen_range(1..3usize);
        let (w1, w2) = (rng.gen_range(1..4usize), rng.gen_range(1..4usize));
        let a = param(rng, &[rows, w1]);
        let b = param(rng, &[rows, w2]);
        let w = Tensor::constant(&[rows, w1 + w2], rand_vec(rng, rows * (w1 + w2)));
        grad_check(
            |ps| project(&ops::concat_last(&[&ps[0], &ps[1]])?, &w),
            &[a, b],
            eps,
        )
    })?);

    results.push(run_cases("softmax", cases, &mut rng, |rng| {
        let rows = rng.gen_range(1..3usize);
        let cols = rng.gen_range(1..6usize);
        let a = param(rng, &[rows, cols]);
        let w = Tensor::constant(&[rows, cols], rand_vec(rng, rows * cols));
        grad_check(|ps| project(&ops::softmax_last(&ps[0])?, &w), &[a], eps)
    })?);

    results.push(run_cases("embedding_lookup", cases, &mut rng, |rng| {
        let vocab = rng.gen_range(2..6usize);
        let dim = rng.gen_range(1..4usize);
        let count = rng.gen_range(1..5usize);
        let idx: Vec<u32> = (0..count).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let table = param(rng, &[vocab, dim]);
        let w = Tensor::constant(&[count, dim], rand_vec(rng, count * dim));
        grad_check(
            move |ps| project(&ops::embedding_lookup(&ps[0], &idx, &[count])?, &w),
            &[table],
            eps,
        )
    })?);

    results.push(run_cases("layer_norm", cases, &mut rng, |rng| {
        let rows = rng.gen_range(1..3usize);
        let d = rng.gen_range(2..6usize);
        let x = param(rng, &[rows, d]);
        let gain = param(rng, &[d]);
        let bias = param(rng, &[d]);
        let w = Tensor::constant(&[rows, d], rand_vec(rng, rows * d));
        grad_check(
            |ps| project(&ops::layer_norm(&ps[0], &ps[1], &ps[2], 1e-5)?, &w),
            &[x, gain, bias],
            eps,
        )
    })?);

    results.push(run_cases("batch_norm1d", cases, &mut rng, |rng| {
        let b = rng.gen_range(2..5usize);
        let f = rng.gen_range(1..4usize);
        let train: bool = rng.gen();
        let x = param(rng, &[b, f]);
        let gamma = param(rng, &[f]);
        let beta = param(rng, &[f]);
        let mut init = BatchNormState::<f64>::new(f, 0.1, 1e-5);
        init.running_mean = rand_vec(rng, f);
        init.running_var = (0..f).map(|_| rng.gen_range(0.5..2.0)).collect();
        let w = Tensor::constant(&[b, f], rand_vec(rng, b * f));
        grad_check(
            move |ps| {
                // fresh state each evaluation keeps f deterministic
                let mut state = init.clone();
                project(
                    &ops::batch_norm1d(&ps[0], &ps[1], &ps[2], &mut state, train)?,
                    &w,
                )
            },
            &[x, gamma, beta],
            eps,
        )
    })?);

    results.push(run_cases("dropout", cases, &mut rng, |rng| {
        let n = rng.gen_range(1..10usize);
        let p = rng.gen_range(0.0..0.8);
        let mask_seed: u64 = rng.gen();
        let x = param(rng, &[n]);
        let w = Tensor::constant(&[n], rand_vec(rng, n));
        grad_check(
            move |ps| {
                // frozen mask: same seed on every evaluation
                let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                project(&ops::dropout(&ps[0], p, true, &mut mask_rng)?, &w)
            },
            &[x],
            eps,
        )
    })?);

    results.push(run_cases("linear", cases, &mut rng, |rng| {
        let (n, k, m) = (
            rng.gen_range(1..4usize),
            rng.gen_range(1..4usize),
            rng.gen_range(1..4usize),
        );
        let x = param(rng, &[n, k]);
        let wm = param(rng, &[k, m]);
        let b = param(rng, &[m]);
        let w = Tensor::constant(&[n, m], rand_vec(rng, n * m));
        grad_check(
            |ps| project(&ops::linear(&ps[0], &ps[1], &ps[2])?, &w),
            &[x, wm, b],
            eps,
        )
    })?);

    results.push(run_cases("cross_entropy", cases, &mut rng, |rng| {
        let b = rng.gen_range(1..4usize);
        let c = rng.gen_range(2..6usize);
        let targets: Vec<u32> = (0..b).map(|_| rng.gen_range(0..c as u32)).collect();
        let logits = param(rng, &[b, c]);
        let w = Tensor::constant(&[b], rand_vec(rng, b));
        grad_check(
            move |ps| project(&ops::cross_entropy_from_logits(&ps[0], &targets)?, &w),
            &[logits],
            eps,
        )
    })?);

    results.push(run_cases("gather_rows", cases, &mut rng, |rng| {
        let (b, m, d) = (
            rng.gen_range(1..3usize),
            rng.gen_range(1..4usize),
            rng.gen_range(1..4usize),
        );
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..m)).collect();
        let x = param(rng, &[b, m, d]);
        let w = Tensor::constant(&[b, d], rand_vec(rng, b * d));
        grad_check(
            move |ps| project(&ops::gather_rows(&ps[0], &idx)?, &w),
            &[x],
            eps,
        )
    })?);

    results.push(run_cases("permute", cases, &mut rng, |rng| {
        let (a, b, c) = (
            rng.gen_range(1..3usize),
            rng.gen_range(1..3usize),
            rng.gen_range(1..3usize),
        );
        let x = param(rng, &[a, b, c]);
        let w = Tensor::constant(&[c, a, b], rand_vec(rng, a * b * c));
        grad_check(|ps| project(&ps[0].permute(&[2, 0, 1])?, &w), &[x], eps)
    })?);

    results.push(run_cases("reshape", cases, &mut rng, |rng| {
        let (a, b) = (rng.gen_range(1..4usize), rng.gen_range(1..4usize));
        let x = param(rng, &[a, b]);
        let w = Tensor::constant(&[a * b], rand_vec(rng, a * b));
        grad_check(|ps| project(&ps[0].reshape(&[a * b])?, &w), &[x], eps)
    })?);

    results.push(run_cases("mean_all", cases, &mut rng, |rng| {
        let n = rng.gen_range(1..10usize);
        let x = param(rng, &[n]);
        grad_check(|ps| Ok(ops::mean_all(&ps[0])), &[x], eps)
    })?);

    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_op_passes_gradient_checks() {
        let results = check_all_ops(100, 20240917).unwrap();
        assert!(results.len() >= 15);
        for r in &results {
            assert!(
                r.max_error < 1e-4,
                "{} worst error {} over {} cases",
                r.op,
                r.max_error,
                r.cases
            );
        }
    }
}
