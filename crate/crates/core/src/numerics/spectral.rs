//! Top singular directions by power iteration on the Gram matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Convergence threshold on the change between successive iterates.
pub const POWER_TOLERANCE: f64 = 1e-10;
pub const POWER_MAX_ITERATIONS: usize = 1000;

/// Unit-norm top right-singular vector of an `[n×d]` matrix. The entry of
/// largest magnitude is made non-negative.
pub fn first_principal_direction<T: Real>(m: &Tensor<T>) -> Result<Vec<f64>> {
    if m.rank() != 2 {
        return Err(Error::dim("first_principal_direction", m.shape(), &[2]));
    }
    let rows: Vec<f64> = m.data().iter().map(|x| x.f64()).collect();
    let mut dirs = top_right_singular_vectors(&rows, m.shape()[0], m.shape()[1], 1)?;
    Ok(dirs.remove(0))
}

/// `MᵀM` for a row-major `[n×d]` matrix.
pub fn gram(rows: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut g = vec![0.0; d * d];
    for r in 0..n {
        let row = &rows[r * d..(r + 1) * d];
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in 0..d {
                g[i * d + j] += ri * row[j];
            }
        }
    }
    g
}

/// The `k` leading right-singular vectors of a row-major `[n×d]` matrix,
/// found by power iteration with deflation.
pub fn top_right_singular_vectors(rows: &[f64], n: usize, d: usize, k: usize) -> Result<Vec<Vec<f64>>> {
    if n == 0 || d == 0 || rows.len() != n * d {
        return Err(Error::dim("top_right_singular_vectors", &[n, d], &[rows.len()]));
    }
    if let Some(i) = rows.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            op: "singular vector input".into(),
            index: i,
        });
    }
    let mut g = gram(rows, n, d);
    let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return Err(Error::Degenerate("matrix is all zeros".into()));
    }
    let mut out = Vec::with_capacity(k);
    let mut first_eigenvalue = 0.0;
    for c in 0..k {
        let (v, lambda) = dominant_eigenvector(&g, d)?;
        if c == 0 {
            first_eigenvalue = lambda;
        } else if lambda <= 1e-12 * first_eigenvalue {
            return Err(Error::Degenerate(format!(
                "matrix has rank {c}, fewer than the {k} directions requested"
            )));
        }
        for i in 0..d {
            for j in 0..d {
                g[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        out.push(v);
    }
    Ok(out)
}

fn mat_vec(g: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d)
        .map(|i| g[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn dominant_eigenvector(g: &[f64], d: usize) -> Result<(Vec<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0de);
    let mut v = Vec::new();
    for _ in 0..8 {
        let start: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut w = mat_vec(g, &start);
        if normalize(&mut w) > 0.0 {
            v = w;
            break;
        }
    }
    if v.is_empty() {
        return Err(Error::Degenerate("gram matrix annihilates every start vector".into()));
    }
    for _ in 0..POWER_MAX_ITERATIONS {
        let mut next = mat_vec(g, &v);
        if normalize(&mut next) == 0.0 {
            return Err(Error::Degenerate("power iteration collapsed to zero".into()));
        }
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = next;
        if delta < POWER_TOLERANCE {
            break;
        }
    }
    let gv = mat_vec(g, &v);
    let lambda: f64 = gv.iter().zip(&v).map(|(a, b)| a * b).sum();
    fix_sign(&mut v);
    Ok((v, lambda))
}

/// Flips `v` so that its entry of largest magnitude is non-negative.
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}
