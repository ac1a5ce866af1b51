//! Rank correlation.

use crate::error::{Error, Result};

/// 1-based ranks; tied values share the average of their positions.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(
            "correlation is undefined for a constant input".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of fractional ranks.
pub fn spearman_correlation(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::dim("spearman_correlation", &[pred.len()], &[gold.len()]));
    }
    if pred.len() < 2 {
        return Err(Error::Data("rank correlation needs at least two pairs".into()));
    }
    if let Some(i) = pred.iter().chain(gold).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "spearman_correlation input".into(),
            index: i % pred.len(),
        });
    }
    pearson(&fractional_ranks(pred), &fractional_ranks(gold))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(spearman_correlation(&[1., 2., 3.], &[10., 20., 30.]).unwrap(), 1.0);
        assert_eq!(spearman_correlation(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0);
        assert!((spearman_correlation(&[1., 2., 3.], &[1., 3., 2.]).unwrap() - 0.5).abs() < 1e-15);
        assert!(spearman_correlation(&[1., 1.], &[1., 2.]).is_err());
        assert!(spearman_correlation(&[1.], &[1.]).is_err());
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(fractional_ranks(&[5., 1., 5., 3.]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
