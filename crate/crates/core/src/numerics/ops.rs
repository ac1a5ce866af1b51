//! Differentiable operations on [`Var`].
//!
//! Each op computes its forward value eagerly, records itself on the tape
//! and supplies the matching backward rule.

use std::rc::Rc;

use rand::Rng;

use super::gemm::{batched_gemm, gemm, MatRef, Operand};
use super::tape::{BackwardCtx, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-12;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn tensor<T: Real>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("op produced inconsistent shape")
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    tensor(a.shape(), data)
}

fn gelu<T: Real>(x: T) -> T {
    let (c, k, half) = (T::of(SQRT_2_OVER_PI), T::of(GELU_CUBIC), T::of(0.5));
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let (c, k, half) = (T::of(SQRT_2_OVER_PI), T::of(GELU_CUBIC), T::of(0.5));
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Softmax backward for one row: `dx = y ⊙ (g − ⟨g, y⟩)`.
fn softmax_row_grad<T: Real>(y: &[T], g: &[T], dx: &mut [T]) {
    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
        *d = yi * (gi - dot);
    }
}

// Fallible ops on tape handles; `add`/`sub`/`mul` return `Result`, so
// they cannot be the operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Real> Var<'t, T> {
    fn unary(
        self,
        op: &'static str,
        value: Tensor<T>,
        backward: impl Fn(&BackwardCtx<'_, T>) -> Tensor<T> + 'static,
    ) -> Result<Var<'t, T>> {
        self.tape
            .record(op, &[self.id], value, Box::new(move |ctx| vec![Some(backward(ctx))]))
    }

    /// Matrix product `[m×k]·[k×n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (m, k, n, out) = {
            let (a, b) = (self.value(), other.value());
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::dim("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![T::zero(); m * n];
            gemm(
                MatRef::new(a.data(), m, k),
                MatRef::new(b.data(), k, n),
                &mut out,
                false,
            );
            (m, k, n, out)
        };
        self.tape.record(
            "matmul",
            &[self.id, other.id],
            tensor(&[m, n], out),
            Box::new(move |ctx| {
                let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let gm = MatRef::new(g.data(), m, n);
                let da = ctx.needs[0].then(|| {
                    let mut da = vec![T::zero(); m * k];
                    gemm(gm, MatRef::new(b.data(), k, n).t(), &mut da, false);
                    tensor(&[m, k], da)
                });
                let db = ctx.needs[1].then(|| {
                    let mut db = vec![T::zero(); k * n];
                    gemm(MatRef::new(a.data(), m, k).t(), gm, &mut db, false);
                    tensor(&[k, n], db)
                });
                vec![da, db]
            }),
        )
    }

    /// `self · otherᵀ` for `[m×k]` and `[n×k]`.
    pub fn matmul_t(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (m, k, n, out) = {
            let (a, b) = (self.value(), other.value());
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
                return Err(Error::dim("matmul_t", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
            let mut out = vec![T::zero(); m * n];
            gemm(
                MatRef::new(a.data(), m, k),
                MatRef::new(b.data(), n, k).t(),
                &mut out,
                false,
            );
            (m, k, n, out)
        };
        self.tape.record(
            "matmul_t",
            &[self.id, other.id],
            tensor(&[m, n], out),
            Box::new(move |ctx| {
                let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let gm = MatRef::new(g.data(), m, n);
                let da = ctx.needs[0].then(|| {
                    let mut da = vec![T::zero(); m * k];
                    gemm(gm, MatRef::new(b.data(), n, k), &mut da, false);
                    tensor(&[m, k], da)
                });
                let db = ctx.needs[1].then(|| {
                    let mut db = vec![T::zero(); n * k];
                    gemm(gm.t(), MatRef::new(a.data(), m, k), &mut db, false);
                    tensor(&[n, k], db)
                });
                vec![da, db]
            }),
        )
    }

    /// Batched product over the leading axis: `[g×m×k]·[g×k×n]`, or
    /// `[g×m×k]·[g×n×k]ᵀ` when `transpose_other`.
    pub fn bmm(self, other: Var<'t, T>, transpose_other: bool) -> Result<Var<'t, T>> {
        let (g, m, k, n, out) = {
            let (a, b) = (self.value(), other.value());
            let bad = || Error::dim("bmm", a.shape(), b.shape());
            if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
                return Err(bad());
            }
            let (g, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (bk, n) = if transpose_other {
                (b.shape()[2], b.shape()[1])
            } else {
                (b.shape()[1], b.shape()[2])
            };
            if bk != k {
                return Err(bad());
            }
            let mut out = vec![T::zero(); g * m * n];
            let b_op = if transpose_other {
                Operand::new(n, k, true)
            } else {
                Operand::new(k, n, false)
            };
            batched_gemm(g, a.data(), Operand::new(m, k, false), b.data(), b_op, &mut out, false);
            (g, m, k, n, out)
        };
        self.tape.record(
            "bmm",
            &[self.id, other.id],
            tensor(&[g, m, n], out),
            Box::new(move |ctx| {
                let (a, b, gr) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let g_op = Operand::new(m, n, false);
                let da = ctx.needs[0].then(|| {
                    let mut da = vec![T::zero(); g * m * k];
                    // dA = G·Bᵀ (plain) or G·B (transposed)
                    let b_op = if transpose_other {
                        Operand::new(n, k, false)
                    } else {
                        Operand::new(k, n, true)
                    };
                    batched_gemm(g, gr.data(), g_op, b.data(), b_op, &mut da, false);
                    tensor(&[g, m, k], da)
                });
                let db = ctx.needs[1].then(|| {
                    if transpose_other {
                        // dB = Gᵀ·A  → [n×k]
                        let mut db = vec![T::zero(); g * n * k];
                        batched_gemm(
                            g,
                            gr.data(),
                            Operand::new(m, n, true),
                            a.data(),
                            Operand::new(m, k, false),
                            &mut db,
                            false,
                        );
                        tensor(&[g, n, k], db)
                    } else {
                        // dB = Aᵀ·G  → [k×n]
                        let mut db = vec![T::zero(); g * k * n];
                        batched_gemm(g, a.data(), Operand::new(m, k, true), gr.data(), g_op, &mut db, false);
                        tensor(&[g, k, n], db)
                    }
                });
                vec![da, db]
            }),
        )
    }

    fn binary_same_shape(
        self,
        other: Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var<'t, T>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(Error::dim(op, a.shape(), b.shape()));
            }
            zip_map(&a, &b, f)
        };
        self.tape.record(op, &[self.id, other.id], value, Box::new(backward))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_same_shape(
            other,
            "add",
            |a, b| a + b,
            |ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.clone()),
                ]
            },
        )
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_same_shape(
            other,
            "sub",
            |a, b| a - b,
            |ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.map(|x| -x)),
                ]
            },
        )
    }

    /// Element-wise product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_same_shape(
            other,
            "mul",
            |a, b| a * b,
            |ctx| {
                let g = ctx.grad;
                vec![
                    ctx.needs[0].then(|| zip_map(g, ctx.inputs[1], |g, b| g * b)),
                    ctx.needs[1].then(|| zip_map(g, ctx.inputs[0], |g, a| g * a)),
                ]
            },
        )
    }

    /// Adds a `[n]` bias to every row of a tensor whose last axis is `n`.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let (x, b) = (self.value(), bias.value());
            if b.rank() != 1 || b.len() != x.last_dim() {
                return Err(Error::dim("add_bias", x.shape(), b.shape()));
            }
            let n = b.len();
            let bd = b.data();
            let data = x.data().iter().enumerate().map(|(i, &v)| v + bd[i % n]).collect();
            tensor(x.shape(), data)
        };
        self.tape.record(
            "add_bias",
            &[self.id, bias.id],
            value,
            Box::new(|ctx| {
                let g = ctx.grad;
                let n = g.last_dim();
                let db = ctx.needs[1].then(|| {
                    let mut acc = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    tensor(&[n], acc)
                });
                vec![ctx.needs[0].then(|| g.clone()), db]
            }),
        )
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::of(c);
        let value = self.value().map(|x| x * c);
        self.unary("scale", value, move |ctx| ctx.grad.map(|g| g * c))
    }

    pub fn gelu(self) -> Result<Var<'t, T>> {
        let value = self.value().map(gelu);
        self.unary("gelu", value, |ctx| {
            zip_map(ctx.grad, ctx.inputs[0], |g, x| g * gelu_derivative(x))
        })
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        let value = self.value().map(|x| x.max(T::zero()));
        self.unary("relu", value, |ctx| {
            zip_map(
                ctx.grad,
                ctx.inputs[0],
                |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                },
            )
        })
    }

    pub fn abs(self) -> Result<Var<'t, T>> {
        let value = self.value().map(|x| x.abs());
        self.unary("abs", value, |ctx| {
            zip_map(ctx.grad, ctx.inputs[0], |g, x| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })
        })
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_rows(self) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            let n = x.last_dim();
            let mut out = vec![T::zero(); x.len()];
            for (row, o) in x.data().chunks(n).zip(out.chunks_mut(n)) {
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut sum = T::zero();
                for (oi, &v) in o.iter_mut().zip(row) {
                    *oi = (v - max).exp();
                    sum += *oi;
                }
                for oi in o.iter_mut() {
                    *oi = *oi / sum;
                }
            }
            tensor(x.shape(), out)
        };
        self.unary("softmax_rows", value, |ctx| {
            let (y, g) = (ctx.output, ctx.grad);
            let n = y.last_dim();
            let mut dx = vec![T::zero(); y.len()];
            for ((yr, gr), dr) in y.data().chunks(n).zip(g.data().chunks(n)).zip(dx.chunks_mut(n)) {
                softmax_row_grad(yr, gr, dr);
            }
            tensor(y.shape(), dx)
        })
    }

    /// Softmax over the last axis where `keep[i] == false` entries receive
    /// exactly zero probability. Every row needs at least one kept entry.
    pub fn masked_softmax_rows(self, keep: Rc<Vec<bool>>) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            if keep.len() != x.len() {
                return Err(Error::dim("masked_softmax_rows", x.shape(), &[keep.len()]));
            }
            let n = x.last_dim();
            let mut out = vec![T::zero(); x.len()];
            for (r, (row, o)) in x.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
                let kr = &keep[r * n..(r + 1) * n];
                let max = row
                    .iter()
                    .zip(kr)
                    .filter(|(_, &k)| k)
                    .fold(T::neg_infinity(), |m, (&v, _)| m.max(v));
                if max == T::neg_infinity() {
                    return Err(Error::Contract(format!(
                        "masked softmax row {r} has no unmasked entries"
                    )));
                }
                let mut sum = T::zero();
                for ((oi, &v), &k) in o.iter_mut().zip(row).zip(kr) {
                    if k {
                        *oi = (v - max).exp();
                        sum += *oi;
                    }
                }
                for oi in o.iter_mut() {
                    *oi = *oi / sum;
                }
            }
            tensor(x.shape(), out)
        };
        self.unary("masked_softmax_rows", value, |ctx| {
            let (y, g) = (ctx.output, ctx.grad);
            let n = y.last_dim();
            let mut dx = vec![T::zero(); y.len()];
            for ((yr, gr), dr) in y.data().chunks(n).zip(g.data().chunks(n)).zip(dx.chunks_mut(n)) {
                softmax_row_grad(yr, gr, dr);
            }
            tensor(y.shape(), dx)
        })
    }

    /// Layer normalization over the last axis with learned scale and bias.
    pub fn layer_norm(self, scale: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let (x, s, b) = (self.value(), scale.value(), bias.value());
            let n = x.last_dim();
            if s.shape() != [n] || b.shape() != [n] {
                return Err(Error::dim("layer_norm", x.shape(), s.shape()));
            }
            let mut out = vec![T::zero(); x.len()];
            for (row, o) in x.data().chunks(n).zip(out.chunks_mut(n)) {
                let (mean, inv) = row_stats(row);
                for (j, (oj, &v)) in o.iter_mut().zip(row).enumerate() {
                    *oj = (v - mean) * inv * s.data()[j] + b.data()[j];
                }
            }
            tensor(x.shape(), out)
        };
        self.tape.record(
            "layer_norm",
            &[self.id, scale.id, bias.id],
            value,
            Box::new(|ctx| {
                let (x, s, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let n = x.last_dim();
                let nf = T::of(n as f64);
                let mut dx = vec![T::zero(); x.len()];
                let mut ds = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                let mut xhat = vec![T::zero(); n];
                let mut dxhat = vec![T::zero(); n];
                for ((row, gr), dr) in x.data().chunks(n).zip(g.data().chunks(n)).zip(dx.chunks_mut(n)) {
                    let (mean, inv) = row_stats(row);
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * inv;
                        dxhat[j] = gr[j] * s.data()[j];
                        ds[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                    }
                    let mean_d: T = dxhat.iter().copied().sum::<T>() / nf;
                    let mean_dx: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for j in 0..n {
                        dr[j] = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                vec![
                    ctx.needs[0].then(|| tensor(x.shape(), dx)),
                    ctx.needs[1].then(|| tensor(&[n], ds)),
                    ctx.needs[2].then(|| tensor(&[n], db)),
                ]
            }),
        )
    }

    /// Row lookup: `out[i] = self[indices[i]]` for a `[V×d]` table.
    pub fn gather_rows(self, indices: Rc<Vec<usize>>) -> Result<Var<'t, T>> {
        let (rows, d, value) = {
            let t = self.value();
            if t.rank() != 2 || indices.is_empty() {
                return Err(Error::dim("gather_rows", t.shape(), &[indices.len()]));
            }
            let (rows, d) = (t.shape()[0], t.shape()[1]);
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices.iter() {
                if i >= rows {
                    return Err(Error::Contract(format!(
                        "gather index {i} out of range for {rows} rows"
                    )));
                }
                out.extend_from_slice(t.row(i));
            }
            (rows, d, tensor(&[indices.len(), d], out))
        };
        self.unary("gather_rows", value, move |ctx| {
            let mut dt = vec![T::zero(); rows * d];
            for (k, &i) in indices.iter().enumerate() {
                for (a, &g) in dt[i * d..(i + 1) * d].iter_mut().zip(ctx.grad.row(k)) {
                    *a += g;
                }
            }
            tensor(&[rows, d], dt)
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let (old, value) = {
            let x = self.value();
            (x.shape().to_vec(), x.reshaped(shape)?)
        };
        self.unary("reshape", value, move |ctx| {
            ctx.grad.reshaped(&old).expect("reshape back")
        })
    }

    /// 2-D transpose.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            if x.rank() != 2 {
                return Err(Error::dim("transpose", x.shape(), &[2]));
            }
            transpose2(&x)
        };
        self.unary("transpose", value, |ctx| transpose2(ctx.grad))
    }

    /// Concatenates `[n×dᵢ]` tensors along the column axis.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let tape = first.tape;
        let (n, widths, value) = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let n = vals[0].shape()[0];
            for v in &vals {
                if v.rank() != 2 || v.shape()[0] != n {
                    return Err(Error::dim("concat_cols", vals[0].shape(), v.shape()));
                }
            }
            let widths: Vec<usize> = vals.iter().map(|v| v.shape()[1]).collect();
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(n * total);
            for i in 0..n {
                for v in &vals {
                    out.extend_from_slice(v.row(i));
                }
            }
            (n, widths, tensor(&[n, total], out))
        };
        let ids: Vec<_> = parts.iter().map(|p| p.id).collect();
        tape.record(
            "concat_cols",
            &ids,
            value,
            Box::new(move |ctx| {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                widths
                    .iter()
                    .enumerate()
                    .map(|(p, &w)| {
                        let start = offset;
                        offset += w;
                        ctx.needs[p].then(|| {
                            let mut out = Vec::with_capacity(n * w);
                            for i in 0..n {
                                let row = &ctx.grad.data()[i * total..(i + 1) * total];
                                out.extend_from_slice(&row[start..start + w]);
                            }
                            tensor(&[n, w], out)
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Joins `[B×n₁×d]` and `[B×n₂×d]` along the middle (sequence) axis.
    pub fn concat_seq(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (b, n1, n2, d, value) = {
            let (x, y) = (self.value(), other.value());
            if x.rank() != 3 || y.rank() != 3 || x.shape()[0] != y.shape()[0] || x.shape()[2] != y.shape()[2] {
                return Err(Error::dim("concat_seq", x.shape(), y.shape()));
            }
            let (b, n1, n2, d) = (x.shape()[0], x.shape()[1], y.shape()[1], x.shape()[2]);
            let mut out = Vec::with_capacity(b * (n1 + n2) * d);
            for i in 0..b {
                out.extend_from_slice(&x.data()[i * n1 * d..(i + 1) * n1 * d]);
                out.extend_from_slice(&y.data()[i * n2 * d..(i + 1) * n2 * d]);
            }
            (b, n1, n2, d, tensor(&[b, n1 + n2, d], out))
        };
        self.tape.record(
            "concat_seq",
            &[self.id, other.id],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let stride = (n1 + n2) * d;
                let part = |start: usize, len: usize| {
                    let mut out = Vec::with_capacity(b * len * d);
                    for i in 0..b {
                        out.extend_from_slice(&g[i * stride + start * d..i * stride + (start + len) * d]);
                    }
                    tensor(&[b, len, d], out)
                };
                vec![ctx.needs[0].then(|| part(0, n1)), ctx.needs[1].then(|| part(n1, n2))]
            }),
        )
    }

    /// `[B×L×d] → [B×len×d]` keeping positions `start..start+len`.
    pub fn slice_seq(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (b, l, d, value) = {
            let x = self.value();
            if x.rank() != 3 || len == 0 || start + len > x.shape()[1] {
                return Err(Error::dim("slice_seq", x.shape(), &[start, len]));
            }
            let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut out = Vec::with_capacity(b * len * d);
            for i in 0..b {
                let base = i * l * d;
                out.extend_from_slice(&x.data()[base + start * d..base + (start + len) * d]);
            }
            (b, l, d, tensor(&[b, len, d], out))
        };
        self.unary("slice_seq", value, move |ctx| {
            let mut dx = vec![T::zero(); b * l * d];
            for i in 0..b {
                let base = i * l * d;
                dx[base + start * d..base + (start + len) * d]
                    .copy_from_slice(&ctx.grad.data()[i * len * d..(i + 1) * len * d]);
            }
            tensor(&[b, l, d], dx)
        })
    }

    /// Swaps the two middle axes of a rank-4 tensor: `[a×b×c×d] → [a×c×b×d]`.
    pub fn swap_middle_axes(self) -> Result<Var<'t, T>> {
        let (dims, value) = {
            let x = self.value();
            if x.rank() != 4 {
                return Err(Error::dim("swap_middle_axes", x.shape(), &[4]));
            }
            let s = x.shape();
            let dims = [s[0], s[1], s[2], s[3]];
            (dims, tensor(&[s[0], s[2], s[1], s[3]], swap_middle(x.data(), dims)))
        };
        self.unary("swap_middle_axes", value, move |ctx| {
            let [a, b, c, d] = dims;
            tensor(&dims, swap_middle(ctx.grad.data(), [a, c, b, d]))
        })
    }

    /// Sum of all elements.
    pub fn sum(self) -> Result<Var<'t, T>> {
        let (shape, value) = {
            let x = self.value();
            (x.shape().to_vec(), Tensor::scalar(x.data().iter().copied().sum()))
        };
        self.unary("sum", value, move |ctx| Tensor::full(&shape, ctx.grad.item()))
    }

    /// Mean of all elements.
    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = self.value().len();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Masked average over the sequence axis of `[B×L×d]`.
    pub fn masked_mean_pool(self, mask: &[bool]) -> Result<Var<'t, T>> {
        let (b, l, d, counts, value) = {
            let x = self.value();
            if x.rank() != 3 || mask.len() != x.shape()[0] * x.shape()[1] {
                return Err(Error::dim("masked_mean_pool", x.shape(), &[mask.len()]));
            }
            let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut out = vec![T::zero(); b * d];
            let mut counts = Vec::with_capacity(b);
            for i in 0..b {
                let valid = mask[i * l..(i + 1) * l].iter().filter(|&&m| m).count();
                if valid == 0 {
                    return Err(Error::Contract(format!("pooling row {i} is fully masked")));
                }
                counts.push(valid);
                let o = &mut out[i * d..(i + 1) * d];
                for p in 0..l {
                    if mask[i * l + p] {
                        for (oj, &v) in o.iter_mut().zip(x.row(i * l + p)) {
                            *oj += v;
                        }
                    }
                }
                let c = T::of(valid as f64);
                o.iter_mut().for_each(|v| *v = *v / c);
            }
            (b, l, d, counts, tensor(&[b, d], out))
        };
        let mask = mask.to_vec();
        self.unary("masked_mean_pool", value, move |ctx| {
            let mut dx = vec![T::zero(); b * l * d];
            for i in 0..b {
                let c = T::of(counts[i] as f64);
                let g = ctx.grad.row(i);
                for p in 0..l {
                    if mask[i * l + p] {
                        for (dj, &gj) in dx[(i * l + p) * d..(i * l + p + 1) * d].iter_mut().zip(g) {
                            *dj = gj / c;
                        }
                    }
                }
            }
            tensor(&[b, l, d], dx)
        })
    }

    /// Per-dimension maximum over unmasked positions of `[B×L×d]`. The
    /// gradient routes to the first position attaining the maximum.
    pub fn masked_max_pool(self, mask: &[bool]) -> Result<Var<'t, T>> {
        let (b, l, d, argmax, value) = {
            let x = self.value();
            if x.rank() != 3 || mask.len() != x.shape()[0] * x.shape()[1] {
                return Err(Error::dim("masked_max_pool", x.shape(), &[mask.len()]));
            }
            let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut out = vec![T::neg_infinity(); b * d];
            let mut argmax = vec![usize::MAX; b * d];
            for i in 0..b {
                for p in 0..l {
                    if !mask[i * l + p] {
                        continue;
                    }
                    for (j, &v) in x.row(i * l + p).iter().enumerate() {
                        if v > out[i * d + j] {
                            out[i * d + j] = v;
                            argmax[i * d + j] = p;
                        }
                    }
                }
                if argmax[i * d] == usize::MAX {
                    return Err(Error::Contract(format!("pooling row {i} is fully masked")));
                }
            }
            (b, l, d, argmax, tensor(&[b, d], out))
        };
        self.unary("masked_max_pool", value, move |ctx| {
            let mut dx = vec![T::zero(); b * l * d];
            for i in 0..b {
                for j in 0..d {
                    let p = argmax[i * d + j];
                    dx[(i * l + p) * d + j] += ctx.grad.data()[i * d + j];
                }
            }
            tensor(&[b, l, d], dx)
        })
    }

    /// Mean softmax cross-entropy of `[n×c]` logits against class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let (n, c, probs, value) = {
            let x = self.value();
            if x.rank() != 2 || x.shape()[0] != labels.len() {
                return Err(Error::dim("cross_entropy", x.shape(), &[labels.len()]));
            }
            let (n, c) = (x.shape()[0], x.shape()[1]);
            let mut probs = vec![T::zero(); n * c];
            let mut total = 0.0f64;
            for (i, &label) in labels.iter().enumerate() {
                if label >= c {
                    return Err(Error::Contract(format!("label {label} out of range for {c} classes")));
                }
                let row = x.row(i);
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut sum = T::zero();
                for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *p = (v - max).exp();
                    sum += *p;
                }
                probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p = *p / sum);
                let lse = max.f64() + sum.f64().ln();
                total += lse - row[label].f64();
            }
            (n, c, probs, Tensor::scalar(T::of(total / n as f64)))
        };
        let labels = labels.to_vec();
        self.unary("cross_entropy", value, move |ctx| {
            let scale = ctx.grad.item() / T::of(n as f64);
            let mut dx = probs.clone();
            for (i, &label) in labels.iter().enumerate() {
                dx[i * c + label] -= T::one();
            }
            dx.iter_mut().for_each(|v| *v *= scale);
            tensor(&[n, c], dx)
        })
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 − p)`.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, rng: &mut R) -> Result<Var<'t, T>> {
        if p <= 0.0 {
            return Ok(self);
        }
        if p >= 1.0 {
            return Err(Error::Contract(format!("dropout rate {p} must be below 1")));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let (mask, value) = {
            let x = self.value();
            let mask: Vec<T> = (0..x.len())
                .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                .collect();
            let value = tensor(x.shape(), x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect());
            (mask, value)
        };
        self.unary("dropout", value, move |ctx| {
            tensor(
                ctx.grad.shape(),
                ctx.grad.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect(),
            )
        })
    }
}

fn row_stats<T: Real>(row: &[T]) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt())
}

fn transpose2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    tensor(&[c, r], out)
}

fn swap_middle<T: Real>(data: &[T], [a, b, c, d]: [usize; 4]) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&data[src..src + d]);
            }
        }
    }
    out
}
