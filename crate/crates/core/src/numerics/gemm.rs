//! Dense matrix products.
//!
//! The micro-kernel is `matrixmultiply`; with the `parallel` feature the
//! output is sharded into fixed-size row blocks and the blocks run on the
//! rayon pool. Each output element is always produced by exactly one kernel
//! call over the full inner dimension, so the result does not depend on how
//! many worker threads exist.

use super::Real;

/// Rows per shard when the product is split across workers.
pub const ROW_BLOCK: usize = 256;

/// Products smaller than this many multiply-adds run on the calling thread.
#[cfg(feature = "parallel")]
const PARALLEL_MIN_WORK: usize = 1 << 18;

/// Below this many multiply-adds the packing done by the blocked kernel
/// costs more than it saves, so a plain loop runs instead.
const SMALL_WORK: usize = 1 << 15;

/// Strided read-only matrix view.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Real> MatRef<'a, T> {
    /// Row-major view of `data` as `rows × cols`.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix view does not cover data");
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view; no data moves.
    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn row_range(self, start: usize, end: usize) -> Self {
        let offset = start * self.rs;
        Self {
            data: if offset < self.data.len() {
                &self.data[offset..]
            } else {
                &self.data[self.data.len()..]
            },
            rows: end - start,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        (self.rows.max(1) - 1) * self.rs + (self.cols.max(1) - 1) * self.cs
    }
}

fn kernel<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    assert!(a.last_index() < a.data.len() && b.last_index() < b.data.len());
    assert!(c.len() >= m * n);
    if m * k * n < SMALL_WORK {
        small_kernel(a, b, &mut c[..m * n], accumulate);
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every strided index of a, b and c.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-at-a-time product; the inner loop runs along contiguous output rows.
fn small_kernel<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], accumulate: bool) {
    let (k, n) = (a.cols, b.cols);
    if !accumulate {
        c.iter_mut().for_each(|x| *x = T::zero());
    }
    // contiguous copy of b when it is read transposed
    let packed: Vec<T>;
    let (bd, brs) = if b.cs == 1 {
        (b.data, b.rs)
    } else {
        packed = (0..k)
            .flat_map(|p| (0..n).map(move |j| b.data[p * b.rs + j * b.cs]))
            .collect();
        (&packed[..], n)
    };
    for (i, crow) in c.chunks_exact_mut(n).enumerate() {
        for p in 0..k {
            let x = a.data[i * a.rs + p * a.cs];
            let brow = &bd[p * brs..p * brs + n];
            for (o, &y) in crow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

fn check<T: Real>(a: &MatRef<'_, T>, b: &MatRef<'_, T>, c: &[T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions disagree");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output has wrong length");
}

/// `c = a·b` (or `c += a·b` when `accumulate`) on the calling thread.
pub fn gemm_serial<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], accumulate: bool) {
    check(&a, &b, c);
    for (block, chunk) in c.chunks_mut(ROW_BLOCK * b.cols.max(1)).enumerate() {
        let start = block * ROW_BLOCK;
        let end = (start + ROW_BLOCK).min(a.rows);
        kernel(a.row_range(start, end), b, chunk, accumulate);
    }
}

/// `c = a·b` (or `c += a·b`), sharded across the rayon pool when the
/// `parallel` feature is on and the product is large enough.
pub fn gemm<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], accumulate: bool) {
    #[cfg(feature = "parallel")]
    {
        check(&a, &b, c);
        if a.rows * a.cols * b.cols >= PARALLEL_MIN_WORK && a.rows > ROW_BLOCK {
            use rayon::prelude::*;
            c.par_chunks_mut(ROW_BLOCK * b.cols.max(1))
                .enumerate()
                .for_each(|(block, chunk)| {
                    let start = block * ROW_BLOCK;
                    let end = (start + ROW_BLOCK).min(a.rows);
                    kernel(a.row_range(start, end), b, chunk, accumulate);
                });
            return;
        }
    }
    gemm_serial(a, b, c, accumulate)
}

/// Shape of one stored operand of a batched product: each group holds a
/// row-major `rows × cols` block, optionally read transposed.
#[derive(Clone, Copy, Debug)]
pub struct Operand {
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl Operand {
    pub fn new(rows: usize, cols: usize, transposed: bool) -> Self {
        Self { rows, cols, transposed }
    }

    fn view<'a, T: Real>(&self, data: &'a [T], group: usize) -> MatRef<'a, T> {
        let size = self.rows * self.cols;
        let m = MatRef::new(&data[group * size..(group + 1) * size], self.rows, self.cols);
        if self.transposed {
            m.t()
        } else {
            m
        }
    }
}

/// Independent products `c[g] (+)= a[g]·b[g]` for every group `g`.
pub fn batched_gemm<T: Real>(
    groups: usize,
    a: &[T],
    a_op: Operand,
    b: &[T],
    b_op: Operand,
    c: &mut [T],
    accumulate: bool,
) {
    let m = if a_op.transposed { a_op.cols } else { a_op.rows };
    let n = if b_op.transposed { b_op.rows } else { b_op.cols };
    assert_eq!(c.len(), groups * m * n, "batched gemm output has wrong length");
    let run = |g: usize, cg: &mut [T]| {
        let av = a_op.view(a, g);
        let bv = b_op.view(b, g);
        assert_eq!(av.cols(), bv.rows(), "batched gemm inner dimensions disagree");
        kernel(av, bv, cg, accumulate);
    };
    if m * n == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let k = if a_op.transposed { a_op.rows } else { a_op.cols };
        if groups > 1 && groups * m * n * k >= PARALLEL_MIN_WORK {
            use rayon::prelude::*;
            c.par_chunks_mut(m * n).enumerate().for_each(|(g, cg)| run(g, cg));
            return;
        }
    }
    for (g, cg) in c.chunks_mut(m * n).enumerate() {
        run(g, cg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_product_with_transposes() {
        let (m, k, n) = (130, 7, 9);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 7) as f64) * 0.5).collect();
        let want = naive(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        gemm(MatRef::new(&a, m, k), MatRef::new(&b, k, n), &mut c, false);
        assert_eq!(c, want);

        // (bᵀ)ᵀ through a transposed view of a transposed copy
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_serial(MatRef::new(&a, m, k), MatRef::new(&bt, n, k).t(), &mut c2, false);
        assert_eq!(c2, want);
    }

    #[test]
    fn accumulate_adds_into_output() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        gemm(MatRef::new(&a, 1, 2), MatRef::new(&b, 2, 1), &mut c, true);
        assert_eq!(c, [21.0]);
    }
}
