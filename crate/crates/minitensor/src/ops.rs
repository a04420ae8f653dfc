//! Forward operations and their registered backward rules.
//!
//! Every op validates shapes up front and returns a descriptive error naming
//! the operation on mismatch. Backward rules accumulate additively into all
//! tracked parents.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------

/// Numpy-style broadcast of two shapes (align right, dims equal or 1).
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Row-major strides, with stride 0 on axes that broadcast (size 1 against a
/// larger output axis). `shape` is right-aligned against `out_shape`.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut natural = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        natural[i] = acc;
        acc *= shape[i];
    }
    let mut strides = vec![0usize; rank];
    for i in 0..rank {
        if i >= offset && shape[i - offset] != 1 {
            strides[i] = natural[i - offset];
        }
    }
    strides
}

/// Walks every position of `out_shape`, handing the callback the flat offsets
/// into two broadcast operands. Offsets are updated incrementally.
fn for_each_broadcast2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..total {
        f(flat, oa, ob);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            oa -= sa[axis] * out_shape[axis];
            ob -= sb[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

/// Sum `grad` (laid out as `from_shape`) down to `to_shape`, undoing a
/// broadcast.
fn reduce_to_shape<E: Scalar>(grad: &[E], from_shape: &[usize], to_shape: &[usize]) -> Vec<E> {
    if from_shape == to_shape {
        return grad.to_vec();
    }
    let strides = broadcast_strides(to_shape, from_shape);
    let mut out = vec![E::ZERO; to_shape.iter().product()];
    let zeros = vec![0usize; from_shape.len()];
    for_each_broadcast2(from_shape, &strides, &zeros, |flat, off, _| {
        out[off] += grad[flat];
    });
    out
}

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

/// Elementwise addition with numpy-style broadcasting.
pub fn add<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let out_shape = broadcast_shape("add", a.shape(), b.shape())?;
    let av = a.value();
    let bv = b.value();
    let mut data = vec![E::ZERO; out_shape.iter().product()];
    if a.shape() == out_shape.as_slice() && b.shape() == out_shape.as_slice() {
        for ((d, x), y) in data.iter_mut().zip(av.iter()).zip(bv.iter()) {
            *d = *x + *y;
        }
    } else if a.shape() == out_shape.as_slice() && data.len() % bv.len() == 0 && is_suffix(b.shape(), &out_shape) {
        let n = bv.len();
        for (i, d) in data.iter_mut().enumerate() {
            *d = av[i] + bv[i % n];
        }
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        for_each_broadcast2(&out_shape, &sa, &sb, |flat, oa, ob| {
            data[flat] = av[oa] + bv[ob];
        });
    }
    drop(av);
    drop(bv);
    let (pa, pb) = (a.clone(), b.clone());
    let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
    let shape = out_shape.clone();
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        move |g| {
            if pa.requires_grad() {
                pa.accumulate_grad(&reduce_to_shape(g, &shape, &a_shape));
            }
            if pb.requires_grad() {
                pb.accumulate_grad(&reduce_to_shape(g, &shape, &b_shape));
            }
        },
    ))
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && &big[big.len() - small.len()..] == small
}

/// Elementwise multiplication with broadcasting.
pub fn mul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let out_shape = broadcast_shape("mul", a.shape(), b.shape())?;
    let av = a.value();
    let bv = b.value();
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![E::ZERO; out_shape.iter().product()];
    for_each_broadcast2(&out_shape, &sa, &sb, |flat, oa, ob| {
        data[flat] = av[oa] * bv[ob];
    });
    drop(av);
    drop(bv);
    let (pa, pb) = (a.clone(), b.clone());
    let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
    let shape = out_shape.clone();
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        move |g| {
            let av = pa.value().clone();
            let bv = pb.value().clone();
            let sa = broadcast_strides(&a_shape, &shape);
            let sb = broadcast_strides(&b_shape, &shape);
            if pa.requires_grad() {
                let mut full = vec![E::ZERO; g.len()];
                for_each_broadcast2(&shape, &sa, &sb, |flat, _, ob| {
                    full[flat] = g[flat] * bv[ob];
                });
                pa.accumulate_grad(&reduce_to_shape(&full, &shape, &a_shape));
            }
            if pb.requires_grad() {
                let mut full = vec![E::ZERO; g.len()];
                for_each_broadcast2(&shape, &sa, &sb, |flat, oa, _| {
                    full[flat] = g[flat] * av[oa];
                });
                pb.accumulate_grad(&reduce_to_shape(&full, &shape, &b_shape));
            }
        },
    ))
}

/// Multiply by a compile-time constant.
pub fn scale<E: Scalar>(x: &Tensor<E>, c: f64) -> Tensor<E> {
    let k = E::from_f64(c);
    let data: Vec<E> = x.value().iter().map(|v| *v * k).collect();
    let p = x.clone();
    Tensor::from_op(x.shape().to_vec(), data, vec![x.clone()], move |g| {
        if p.requires_grad() {
            let gx: Vec<E> = g.iter().map(|v| *v * k).collect();
            p.accumulate_grad(&gx);
        }
    })
}

/// a - b, with broadcasting.
pub fn sub<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    add(a, &scale(b, -1.0))
}

/// Rectified linear unit; gradient at exactly 0 is 0.
pub fn relu<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let xv = x.value().clone();
    let data: Vec<E> = xv
        .iter()
        .map(|v| if *v > E::ZERO { *v } else { E::ZERO })
        .collect();
    let p = x.clone();
    Tensor::from_op(x.shape().to_vec(), data, vec![x.clone()], move |g| {
        if p.requires_grad() {
            let gx: Vec<E> = g
                .iter()
                .zip(xv.iter())
                .map(|(gi, xi)| if *xi > E::ZERO { *gi } else { E::ZERO })
                .collect();
            p.accumulate_grad(&gx);
        }
    })
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// Matrix product over the two trailing axes, broadcasting any leading batch
/// axes numpy-style: `(..., n, k) x (..., k, m) -> (..., n, m)`.
pub fn matmul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape().len() < 2 || b.shape().len() < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (n, k) = (
        a.shape()[a.shape().len() - 2],
        a.shape()[a.shape().len() - 1],
    );
    let (k2, m) = (
        b.shape()[b.shape().len() - 2],
        b.shape()[b.shape().len() - 1],
    );
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let a_batch = &a.shape()[..a.shape().len() - 2];
    let b_batch = &b.shape()[..b.shape().len() - 2];
    let batch = broadcast_shape("matmul", a_batch, b_batch)?;
    let mut out_shape = batch.clone();
    out_shape.extend_from_slice(&[n, m]);

    let data = {
        let av = a.value();
        let bv = b.value();
        batched_gemm(&batch, a_batch, b_batch, n, k, m, &av, &bv)
    };

    let (pa, pb) = (a.clone(), b.clone());
    let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
    let batch_b = batch.clone();
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        move |g| {
            let batch = &batch_b;
            let nb: usize = batch.iter().product();
            let av = pa.value().clone();
            let bv = pb.value().clone();
            let a_batch = &a_shape[..a_shape.len() - 2];
            let b_batch = &b_shape[..b_shape.len() - 2];
            let sa = broadcast_strides(a_batch, batch);
            let sb = broadcast_strides(b_batch, batch);
            if pa.requires_grad() {
                // dA = dC * B^T, summed over broadcast batch entries
                let mut da = vec![E::ZERO; av.len()];
                let mut oa = 0usize;
                let mut ob = 0usize;
                let mut idx = vec![0usize; batch.len()];
                for bi in 0..nb {
                    let gsl = &g[bi * n * m..(bi + 1) * n * m];
                    let bsl = &bv[ob * k * m..ob * k * m + k * m];
                    E::gemm(
                        n,
                        m,
                        k,
                        E::ONE,
                        gsl,
                        m as isize,
                        1,
                        bsl,
                        1,
                        m as isize,
                        E::ONE,
                        &mut da[oa * n * k..oa * n * k + n * k],
                        k as isize,
                        1,
                    );
                    advance(batch, &mut idx, &sa, &mut oa, &sb, &mut ob, bi, nb);
                }
                pa.accumulate_grad(&da);
            }
            if pb.requires_grad() {
                // dB = A^T * dC, summed over broadcast batch entries
                let mut db = vec![E::ZERO; bv.len()];
                let mut oa = 0usize;
                let mut ob = 0usize;
                let mut idx = vec![0usize; batch.len()];
                for bi in 0..nb {
                    let gsl = &g[bi * n * m..(bi + 1) * n * m];
                    let asl = &av[oa * n * k..oa * n * k + n * k];
                    E::gemm(
                        k,
                        n,
                        m,
                        E::ONE,
                        asl,
                        1,
                        k as isize,
                        gsl,
                        m as isize,
                        1,
                        E::ONE,
                        &mut db[ob * k * m..ob * k * m + k * m],
                        m as isize,
                        1,
                    );
                    advance(batch, &mut idx, &sa, &mut oa, &sb, &mut ob, bi, nb);
                }
                pb.accumulate_grad(&db);
            }
        },
    ))
}

/// Step the batch odometer shared by the matmul forward/backward loops.
#[allow(clippy::too_many_arguments)]
fn advance(
    batch: &[usize],
    idx: &mut [usize],
    sa: &[usize],
    oa: &mut usize,
    sb: &[usize],
    ob: &mut usize,
    bi: usize,
    nb: usize,
) {
    if bi + 1 >= nb {
        return;
    }
    for axis in (0..batch.len()).rev() {
        idx[axis] += 1;
        *oa += sa[axis];
        *ob += sb[axis];
        if idx[axis] < batch[axis] {
            break;
        }
        *oa -= sa[axis] * batch[axis];
        *ob -= sb[axis] * batch[axis];
        idx[axis] = 0;
    }
}

#[allow(clippy::too_many_arguments)]
fn batched_gemm<E: Scalar>(
    batch: &[usize],
    a_batch: &[usize],
    b_batch: &[usize],
    n: usize,
    k: usize,
    m: usize,
    av: &[E],
    bv: &[E],
) -> Vec<E> {
    let nb: usize = batch.iter().product();
    let sa = broadcast_strides(a_batch, batch);
    let sb = broadcast_strides(b_batch, batch);
    let mut out = vec![E::ZERO; nb * n * m];
    let mut idx = vec![0usize; batch.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for bi in 0..nb {
        E::gemm(
            n,
            k,
            m,
            E::ONE,
            &av[oa * n * k..oa * n * k + n * k],
            k as isize,
            1,
            &bv[ob * k * m..ob * k * m + k * m],
            m as isize,
            1,
            E::ZERO,
            &mut out[bi * n * m..(bi + 1) * n * m],
            m as isize,
            1,
        );
        advance(batch, &mut idx, &sa, &mut oa, &sb, &mut ob, bi, nb);
    }
    out
}

/// x * W + b. `b` must match the trailing axis of the product.
pub fn linear<E: Scalar>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    add(&matmul(x, w)?, b)
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

impl<E: Scalar> Tensor<E> {
    /// Same data, new shape (row-major reinterpretation).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let p = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            move |g| {
                if p.requires_grad() {
                    p.accumulate_grad(g);
                }
            },
        ))
    }

    /// Permute axes; backward applies the inverse permutation.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<E>> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("axes {:?} are not a permutation of 0..{}", axes, rank),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_data(&self.value(), self.shape(), axes);
        let p = self.clone();
        let inverse: Vec<usize> = {
            let mut inv = vec![0usize; rank];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            inv
        };
        let fwd_shape = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            move |g| {
                if p.requires_grad() {
                    p.accumulate_grad(&permute_data(g, &fwd_shape, &inverse));
                }
            },
        ))
    }

    /// Swap the two trailing axes.
    pub fn transpose_last(&self) -> Result<Tensor<E>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose_last",
                msg: format!("needs rank >= 2, got {:?}", self.shape()),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }
}

fn permute_data<E: Scalar>(data: &[E], shape: &[usize], axes: &[usize]) -> Vec<E> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let permuted_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = shape.iter().product();
    let mut out = vec![E::ZERO; total];
    if total == 0 {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for item in out.iter_mut() {
        *item = data[src];
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            src += permuted_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            src -= permuted_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    out
}

/// Concatenate along the last axis. All inputs must share leading dims.
pub fn concat_last<E: Scalar>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "concat",
            msg: "no tensors given".into(),
        });
    }
    let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        if &p.shape()[..p.shape().len() - 1] != lead {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        widths.push(p.shape()[p.shape().len() - 1]);
    }
    let rows: usize = lead.iter().product();
    let total_w: usize = widths.iter().sum();
    let mut data = vec![E::ZERO; rows * total_w];
    let mut col = 0usize;
    for (p, w) in parts.iter().zip(&widths) {
        let pv = p.value();
        for r in 0..rows {
            data[r * total_w + col..r * total_w + col + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
        }
        col += w;
    }
    let mut out_shape = lead.to_vec();
    out_shape.push(total_w);
    let owned: Vec<Tensor<E>> = parts.iter().map(|p| (*p).clone()).collect();
    let widths_b = widths.clone();
    let parents = owned.clone();
    Ok(Tensor::from_op(out_shape, data, parents, move |g| {
        let mut col = 0usize;
        for (p, &w) in owned.iter().zip(&widths_b) {
            if p.requires_grad() {
                let mut gp = vec![E::ZERO; rows * w];
                for r in 0..rows {
                    gp[r * w..(r + 1) * w]
                        .copy_from_slice(&g[r * total_w + col..r * total_w + col + w]);
                }
                p.accumulate_grad(&gp);
            }
            col += w;
        }
    }))
}

/// Select one row (trailing-axis vector) per leading index: `(B, m, d)`
/// gathered with `idx[B]` gives `(B, d)`.
pub fn gather_rows<E: Scalar>(x: &Tensor<E>, idx: &[usize]) -> Result<Tensor<E>> {
    if x.shape().len() != 3 {
        return Err(TensorError::InvalidArgument {
            op: "gather_rows",
            msg: format!("expected rank-3 input, got {:?}", x.shape()),
        });
    }
    let (b, m, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if idx.len() != b {
        return Err(TensorError::InvalidArgument {
            op: "gather_rows",
            msg: format!("got {} indices for batch of {}", idx.len(), b),
        });
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
        return Err(TensorError::IndexOutOfRange {
            op: "gather_rows",
            index: bad,
            size: m,
        });
    }
    let xv = x.value();
    let mut data = vec![E::ZERO; b * d];
    for (bi, &row) in idx.iter().enumerate() {
        data[bi * d..(bi + 1) * d].copy_from_slice(&xv[(bi * m + row) * d..(bi * m + row + 1) * d]);
    }
    drop(xv);
    let p = x.clone();
    let idx_b = idx.to_vec();
    Ok(Tensor::from_op(
        vec![b, d],
        data,
        vec![x.clone()],
        move |g| {
            if p.requires_grad() {
                let mut gx = vec![E::ZERO; b * m * d];
                for (bi, &row) in idx_b.iter().enumerate() {
                    gx[(bi * m + row) * d..(bi * m + row + 1) * d]
                        .copy_from_slice(&g[bi * d..(bi + 1) * d]);
                }
                p.accumulate_grad(&gx);
            }
        },
    ))
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

/// Sum of all entries, as a scalar tensor.
pub fn sum_all<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let s: E = x.value().iter().copied().sum();
    let p = x.clone();
    let n = x.numel();
    Tensor::from_op(vec![1], vec![s], vec![x.clone()], move |g| {
        if p.requires_grad() {
            p.accumulate_grad(&vec![g[0]; n]);
        }
    })
}

/// Mean of all entries, as a scalar tensor.
pub fn mean_all<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let n = x.numel();
    scale(&sum_all(x), 1.0 / n as f64)
}

// ---------------------------------------------------------------------------
// softmax / cross entropy
// ---------------------------------------------------------------------------

/// Softmax over the last axis, numerically stabilised by the row max. Rows
/// that are entirely -inf come out uniform.
pub fn softmax_last<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape().is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "softmax",
            msg: "scalar input".into(),
        });
    }
    let c = *x.shape().last().unwrap();
    let rows = x.numel() / c;
    let xv = x.value();
    let mut data = vec![E::ZERO; x.numel()];
    let neg_inf = E::from_f64(f64::NEG_INFINITY);
    for r in 0..rows {
        let row = &xv[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(neg_inf, E::maximum);
        let out = &mut data[r * c..(r + 1) * c];
        if !(max.to_f64()).is_finite() && max <= neg_inf {
            let u = E::from_f64(1.0 / c as f64);
            out.fill(u);
            continue;
        }
        let mut sum = E::ZERO;
        for (o, v) in out.iter_mut().zip(row) {
            *o = (*v - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o = *o / sum;
        }
    }
    drop(xv);
    let y = data.clone();
    let p = x.clone();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        move |g| {
            if p.requires_grad() {
                let mut gx = vec![E::ZERO; y.len()];
                for r in 0..rows {
                    let ys = &y[r * c..(r + 1) * c];
                    let gs = &g[r * c..(r + 1) * c];
                    let dot: E = ys.iter().zip(gs).map(|(a, b)| *a * *b).sum();
                    for i in 0..c {
                        gx[r * c + i] = ys[i] * (gs[i] - dot);
                    }
                }
                p.accumulate_grad(&gx);
            }
        },
    ))
}

/// Per-sample cross entropy from raw logits: `(B, C)` with `B` integer
/// targets gives a `(B,)` loss vector. Uses the log-sum-exp form.
pub fn cross_entropy_from_logits<E: Scalar>(
    logits: &Tensor<E>,
    targets: &[u32],
) -> Result<Tensor<E>> {
    if logits.shape().len() != 2 {
        return Err(TensorError::InvalidArgument {
            op: "cross_entropy",
            msg: format!("expected (batch, classes) logits, got {:?}", logits.shape()),
        });
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != b {
        return Err(TensorError::InvalidArgument {
            op: "cross_entropy",
            msg: format!("{} targets for batch of {}", targets.len(), b),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(TensorError::IndexOutOfRange {
            op: "cross_entropy",
            index: bad as usize,
            size: c,
        });
    }
    let lv = logits.value();
    let mut losses = vec![E::ZERO; b];
    let mut probs = vec![E::ZERO; b * c];
    for r in 0..b {
        let row = &lv[r * c..(r + 1) * c];
        let max = row
            .iter()
            .copied()
            .fold(E::from_f64(f64::NEG_INFINITY), E::maximum);
        let mut sum = E::ZERO;
        for (i, v) in row.iter().enumerate() {
            let e = (*v - max).exp();
            probs[r * c + i] = e;
            sum += e;
        }
        for i in 0..c {
            probs[r * c + i] = probs[r * c + i] / sum;
        }
        let lse = max + sum.ln();
        losses[r] = lse - row[targets[r] as usize];
    }
    drop(lv);
    let p = logits.clone();
    let targets_b = targets.to_vec();
    Ok(Tensor::from_op(
        vec![b],
        losses,
        vec![logits.clone()],
        move |g| {
            if p.requires_grad() {
                let mut gx = probs.clone();
                for r in 0..b {
                    for i in 0..c {
                        gx[r * c + i] *= g[r];
                    }
                    gx[r * c + targets_b[r] as usize] -= g[r];
                }
                p.accumulate_grad(&gx);
            }
        },
    ))
}

// ---------------------------------------------------------------------------
// embedding lookup
// ---------------------------------------------------------------------------

/// Row lookups into a `(V, d)` table. The output has shape
/// `idx_shape ++ [d]`; the backward rule scatter-adds into the table.
pub fn embedding_lookup<E: Scalar>(
    table: &Tensor<E>,
    indices: &[u32],
    idx_shape: &[usize],
) -> Result<Tensor<E>> {
    if table.shape().len() != 2 {
        return Err(TensorError::InvalidArgument {
            op: "embedding_lookup",
            msg: format!("table must be (vocab, dim), got {:?}", table.shape()),
        });
    }
    if idx_shape.iter().product::<usize>() != indices.len() {
        return Err(TensorError::InvalidArgument {
            op: "embedding_lookup",
            msg: format!(
                "{} indices do not fill shape {:?}",
                indices.len(),
                idx_shape
            ),
        });
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    if let Some(&bad) = indices.iter().find(|&&i| i as usize >= v) {
        return Err(TensorError::IndexOutOfRange {
            op: "embedding_lookup",
            index: bad as usize,
            size: v,
        });
    }
    let tv = table.value();
    let mut data = vec![E::ZERO; indices.len() * d];
    for (pos, &i) in indices.iter().enumerate() {
        data[pos * d..(pos + 1) * d].copy_from_slice(&tv[i as usize * d..(i as usize + 1) * d]);
    }
    drop(tv);
    let mut out_shape = idx_shape.to_vec();
    out_shape.push(d);
    let p = table.clone();
    let idx_b = indices.to_vec();
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![table.clone()],
        move |g| {
            if p.requires_grad() {
                let mut gt = vec![E::ZERO; v * d];
                for (pos, &i) in idx_b.iter().enumerate() {
                    let dst = &mut gt[i as usize * d..(i as usize + 1) * d];
                    for (dj, gj) in dst.iter_mut().zip(&g[pos * d..(pos + 1) * d]) {
                        *dj += *gj;
                    }
                }
                p.accumulate_grad(&gt);
            }
        },
    ))
}

// ---------------------------------------------------------------------------
// normalisation
// ---------------------------------------------------------------------------

/// Layer normalisation over the last axis with learnable gain and bias.
pub fn layer_norm<E: Scalar>(
    x: &Tensor<E>,
    gain: &Tensor<E>,
    bias: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    let d = *x.shape().last().ok_or(TensorError::InvalidArgument {
        op: "layer_norm",
        msg: "scalar input".into(),
    })?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let rows = x.numel() / d;
    let xv = x.value();
    let gv = gain.value();
    let bv = bias.value();
    let epsn = E::from_f64(eps);
    let inv_d = E::from_f64(1.0 / d as f64);
    let mut data = vec![E::ZERO; x.numel()];
    let mut xhat = vec![E::ZERO; x.numel()];
    let mut inv_std = vec![E::ZERO; rows];
    for r in 0..rows {
        let row = &xv[r * d..(r + 1) * d];
        let mean: E = row.iter().copied().sum::<E>() * inv_d;
        let var: E = row
            .iter()
            .map(|v| (*v - mean) * (*v - mean))
            .sum::<E>()
            * inv_d;
        let istd = E::ONE / (var + epsn).sqrt();
        inv_std[r] = istd;
        for i in 0..d {
            let h = (row[i] - mean) * istd;
            xhat[r * d + i] = h;
            data[r * d + i] = h * gv[i] + bv[i];
        }
    }
    drop(xv);
    drop(gv);
    drop(bv);
    let (px, pg, pb) = (x.clone(), gain.clone(), bias.clone());
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone(), gain.clone(), bias.clone()],
        move |g| {
            let gv = pg.value().clone();
            if pg.requires_grad() || pb.requires_grad() {
                let mut dgain = vec![E::ZERO; d];
                let mut dbias = vec![E::ZERO; d];
                for r in 0..rows {
                    for i in 0..d {
                        dgain[i] += g[r * d + i] * xhat[r * d + i];
                        dbias[i] += g[r * d + i];
                    }
                }
                if pg.requires_grad() {
                    pg.accumulate_grad(&dgain);
                }
                if pb.requires_grad() {
                    pb.accumulate_grad(&dbias);
                }
            }
            if px.requires_grad() {
                let mut gx = vec![E::ZERO; rows * d];
                for r in 0..rows {
                    let mut mean_dh = E::ZERO;
                    let mut mean_dh_h = E::ZERO;
                    for i in 0..d {
                        let dh = g[r * d + i] * gv[i];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * d + i];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    for i in 0..d {
                        let dh = g[r * d + i] * gv[i];
                        gx[r * d + i] =
                            (dh - mean_dh - xhat[r * d + i] * mean_dh_h) * inv_std[r];
                    }
                }
                px.accumulate_grad(&gx);
            }
        },
    ))
}

/// Running statistics buffer for [`batch_norm1d`]. Checkpointed alongside
/// parameters but never receives gradients.
#[derive(Debug, Clone)]
pub struct BatchNormState<E: Scalar> {
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    pub momentum: f64,
    pub eps: f64,
}

impl<E: Scalar> BatchNormState<E> {
    pub fn new(features: usize, momentum: f64, eps: f64) -> Self {
        BatchNormState {
            running_mean: vec![E::ZERO; features],
            running_var: vec![E::ONE; features],
            momentum,
            eps,
        }
    }
}

/// 1-d batch normalisation over `(B, F)`. In training mode the batch
/// statistics are used and the running buffers updated; in eval mode the
/// running statistics are used, which keeps single samples well defined.
/// Training on a batch of one is rejected (undefined variance).
pub fn batch_norm1d<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    state: &mut BatchNormState<E>,
    train: bool,
) -> Result<Tensor<E>> {
    if x.shape().len() != 2 {
        return Err(TensorError::InvalidArgument {
            op: "batch_norm1d",
            msg: format!("expected (batch, features), got {:?}", x.shape()),
        });
    }
    let (b, f) = (x.shape()[0], x.shape()[1]);
    if gamma.shape() != [f] || beta.shape() != [f] || state.running_mean.len() != f {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm1d",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    if train && b < 2 {
        return Err(TensorError::InvalidArgument {
            op: "batch_norm1d",
            msg: "training batch of size 1 has undefined statistics".into(),
        });
    }
    let xv = x.value();
    let (mean, var): (Vec<E>, Vec<E>) = if train {
        let inv_b = E::from_f64(1.0 / b as f64);
        let mut mean = vec![E::ZERO; f];
        for r in 0..b {
            for i in 0..f {
                mean[i] += xv[r * f + i];
            }
        }
        for m in mean.iter_mut() {
            *m *= inv_b;
        }
        let mut var = vec![E::ZERO; f];
        for r in 0..b {
            for i in 0..f {
                let d = xv[r * f + i] - mean[i];
                var[i] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v *= inv_b;
        }
        // running buffers track the unbiased variance
        let mom = E::from_f64(state.momentum);
        let keep = E::from_f64(1.0 - state.momentum);
        let unbias = E::from_f64(b as f64 / (b as f64 - 1.0));
        for i in 0..f {
            state.running_mean[i] = keep * state.running_mean[i] + mom * mean[i];
            state.running_var[i] = keep * state.running_var[i] + mom * var[i] * unbias;
        }
        (mean, var)
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };

    let gv = gamma.value();
    let bv = beta.value();
    let epsn = E::from_f64(state.eps);
    let inv_std: Vec<E> = var.iter().map(|v| E::ONE / (*v + epsn).sqrt()).collect();
    let mut data = vec![E::ZERO; b * f];
    let mut xhat = vec![E::ZERO; b * f];
    for r in 0..b {
        for i in 0..f {
            let h = (xv[r * f + i] - mean[i]) * inv_std[i];
            xhat[r * f + i] = h;
            data[r * f + i] = h * gv[i] + bv[i];
        }
    }
    drop(xv);
    drop(gv);
    drop(bv);
    let (px, pg, pb) = (x.clone(), gamma.clone(), beta.clone());
    Ok(Tensor::from_op(
        vec![b, f],
        data,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g| {
            let gv = pg.value().clone();
            if pg.requires_grad() || pb.requires_grad() {
                let mut dgamma = vec![E::ZERO; f];
                let mut dbeta = vec![E::ZERO; f];
                for r in 0..b {
                    for i in 0..f {
                        dgamma[i] += g[r * f + i] * xhat[r * f + i];
                        dbeta[i] += g[r * f + i];
                    }
                }
                if pg.requires_grad() {
                    pg.accumulate_grad(&dgamma);
                }
                if pb.requires_grad() {
                    pb.accumulate_grad(&dbeta);
                }
            }
            if px.requires_grad() {
                let mut gx = vec![E::ZERO; b * f];
                if train {
                    let inv_b = E::from_f64(1.0 / b as f64);
                    // per-feature reductions over the batch axis
                    let mut mean_dh = vec![E::ZERO; f];
                    let mut mean_dh_h = vec![E::ZERO; f];
                    for r in 0..b {
                        for i in 0..f {
                            let dh = g[r * f + i] * gv[i];
                            mean_dh[i] += dh;
                            mean_dh_h[i] += dh * xhat[r * f + i];
                        }
                    }
                    for i in 0..f {
                        mean_dh[i] *= inv_b;
                        mean_dh_h[i] *= inv_b;
                    }
                    for r in 0..b {
                        for i in 0..f {
                            let dh = g[r * f + i] * gv[i];
                            gx[r * f + i] =
                                (dh - mean_dh[i] - xhat[r * f + i] * mean_dh_h[i]) * inv_std[i];
                        }
                    }
                } else {
                    // eval mode is a per-feature affine map
                    for r in 0..b {
                        for i in 0..f {
                            gx[r * f + i] = g[r * f + i] * gv[i] * inv_std[i];
                        }
                    }
                }
                px.accumulate_grad(&gx);
            }
        },
    ))
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: kept units are scaled by 1/(1-p) at training time so the
/// evaluation path is the identity.
pub fn dropout<E: Scalar, R: Rng>(
    x: &Tensor<E>,
    p: f64,
    train: bool,
    rng: &mut R,
) -> Result<Tensor<E>> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::InvalidArgument {
            op: "dropout",
            msg: format!("p must be in [0, 1), got {p}"),
        });
    }
    if !train || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let scale_e = E::from_f64(1.0 / keep);
    let mask: Vec<bool> = (0..x.numel()).map(|_| rng.gen::<f64>() < keep).collect();
    let data: Vec<E> = x
        .value()
        .iter()
        .zip(&mask)
        .map(|(v, &m)| if m { *v * scale_e } else { E::ZERO })
        .collect();
    let px = x.clone();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        move |g| {
            if px.requires_grad() {
                let gx: Vec<E> = g
                    .iter()
                    .zip(&mask)
                    .map(|(gi, &m)| if m { *gi * scale_e } else { E::ZERO })
                    .collect();
                px.accumulate_grad(&gx);
            }
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::parameter(shape, data.to_vec())
    }

    #[test]
    fn softmax_of_length_one_vector_is_one() {
        let x = t(&[1], &[3.7]);
        let y = softmax_last(&x).unwrap();
        assert_eq!(y.to_vec(), vec![1.0]);
    }

    #[test]
    fn softmax_rows_are_nonnegative_and_sum_to_one() {
        let x = t(&[3, 5], &[0.3, -2.0, 1.5, 0.0, 4.0, -1.0, -1.0, -1.0, -1.0, -1.0, 10.0, 9.0, 8.0, 7.0, 6.0]);
        let y = softmax_last(&x).unwrap();
        let v = y.to_vec();
        for r in 0..3 {
            let row = &v[r * 5..(r + 1) * 5];
            assert!(row.iter().all(|&p| p >= 0.0));
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_class_count() {
        // -log(1/4) = ln 4
        let logits = t(&[1, 4], &[0.5, 0.5, 0.5, 0.5]);
        let loss = cross_entropy_from_logits(&logits, &[2]).unwrap();
        assert!((loss.to_vec()[0] - 4.0f64.ln()).abs() < 1e-12);
        assert!((loss.to_vec()[0] - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn relu_backward_uses_zero_subgradient_at_negative_and_zero() {
        let x = t(&[2], &[-1.0, 2.0]);
        let y = relu(&x);
        let s = sum_all(&y);
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0]);

        let z = t(&[1], &[0.0]);
        let s = sum_all(&relu(&z));
        s.backward().unwrap();
        assert_eq!(z.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_broadcasts_batch_dims() {
        // (2,1,2,2) x (2,2) -> (2,1,2,2)
        let a = t(&[2, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0]);
        let b = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 2, 2]);
        assert_eq!(
            c.to_vec(),
            vec![1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 6.0, 8.0]
        );
        // gradient of sum wrt b collects both batch entries
        let s = sum_all(&c);
        s.backward().unwrap();
        let gb = b.grad().unwrap();
        assert_eq!(gb, vec![3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_reported() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn add_broadcasts_bias_over_rows() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        let y = add(&x, &b).unwrap();
        assert_eq!(y.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        sum_all(&y).backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn add_broadcasts_middle_axis() {
        // (2,2,2) + (2,1,2)
        let x = t(&[2, 2, 2], &[1.0; 8]);
        let m = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = add(&x, &m).unwrap();
        assert_eq!(
            y.to_vec(),
            vec![2.0, 3.0, 2.0, 3.0, 4.0, 5.0, 4.0, 5.0]
        );
        sum_all(&y).backward().unwrap();
        assert_eq!(m.grad().unwrap(), vec![2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let x = t(&[4, 8], &(0..32).map(|i| (i as f64) * 0.37 - 3.0).collect::<Vec<_>>());
        let gain = t(&[8], &[1.0; 8]);
        let bias = t(&[8], &[0.0; 8]);
        let y = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        let v = y.to_vec();
        for r in 0..4 {
            let row = &v[r * 8..(r + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales_kept_units() {
        let x = t(&[1000], &[1.0; 1000]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = dropout(&x, 0.25, false, &mut rng).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());

        let y = dropout(&x, 0.25, true, &mut rng).unwrap();
        let v = y.to_vec();
        let kept = v.iter().filter(|&&x| x != 0.0).count();
        for &u in &v {
            assert!(u == 0.0 || (u - 1.0 / 0.75).abs() < 1e-12);
        }
        // roughly 75% kept
        assert!((650..850).contains(&kept), "kept {kept}");
    }

    #[test]
    fn batch_norm_train_normalises_and_eval_uses_running_stats() {
        let x = t(&[4, 2], &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
        let gamma = t(&[2], &[1.0, 1.0]);
        let beta = t(&[2], &[0.0, 0.0]);
        let mut state = BatchNormState::new(2, 0.1, 1e-5);
        let y = batch_norm1d(&x, &gamma, &beta, &mut state, true).unwrap();
        let v = y.to_vec();
        for i in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| v[r * 2 + i]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
        }
        // running buffers moved toward the batch stats
        assert!((state.running_mean[0] - 0.25).abs() < 1e-12);

        // eval on a single row works and is affine
        let single = t(&[1, 2], &[2.5, 25.0]);
        let y = batch_norm1d(&single, &gamma, &beta, &mut state, false).unwrap();
        assert_eq!(y.shape(), &[1, 2]);

        // training with batch of one is rejected
        assert!(batch_norm1d(&single, &gamma, &beta, &mut state, true).is_err());
    }

    #[test]
    fn concat_and_gather_round_trip() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[9.0, 8.0]);
        let c = concat_last(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);

        let x = t(&[2, 3, 2], &(0..12).map(|i| i as f64).collect::<Vec<_>>());
        let g = gather_rows(&x, &[2, 0]).unwrap();
        assert_eq!(g.to_vec(), vec![4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn embedding_lookup_grad_is_zero_iff_row_unused() {
        let table = t(&[4, 2], &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
        let out = embedding_lookup(&table, &[0, 2, 2], &[3]).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 1.0, 3.0, 3.0, 3.0, 3.0]);
        sum_all(&out).backward().unwrap();
        let g = table.grad().unwrap();
        assert_eq!(g, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn permute_and_reshape_invert() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let z = y.permute(&[1, 0]).unwrap();
        assert_eq!(z.to_vec(), x.to_vec());
        let r = x.reshape(&[3, 2]).unwrap();
        assert_eq!(r.to_vec(), x.to_vec());
        assert!(x.reshape(&[4]).is_err());
    }
}
