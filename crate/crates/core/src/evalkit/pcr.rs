//! Per-language principal component removal.

use super::EmbeddingSet;
use crate::error::{Error, Result};
use crate::numerics::top_right_singular_vectors;

/// Top right-singular direction of each language's rows (uncentered), in
/// tag-table order. Tags without rows are skipped.
pub fn language_directions(set: &EmbeddingSet) -> Result<Vec<(String, Vec<f64>)>> {
    let d = set.dim();
    let mut out = Vec::new();
    for language in set.languages() {
        let idx = set.indices_of(language);
        if idx.is_empty() {
            continue;
        }
        let rows: Vec<f64> = idx.iter().flat_map(|&i| set.row(i).iter().copied()).collect();
        let dir = top_right_singular_vectors(&rows, idx.len(), d, 1).map_err(|e| match e {
            Error::Degenerate(why) => Error::Degenerate(format!("language {language:?}: {why}")),
            other => other,
        })?;
        out.push((language.clone(), dir.into_iter().next().expect("one direction")));
    }
    Ok(out)
}

/// Replaces every row `v` of language `l` by `v − (vᵀc_l)·c_l`, where `c_l`
/// is the unit top singular direction of that language's rows.
pub fn pcr_debias(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let directions = language_directions(set)?;
    let mut data = set.data().to_vec();
    let d = set.dim();
    for (language, c) in &directions {
        for i in set.indices_of(language) {
            let row = &mut data[i * d..(i + 1) * d];
            let proj: f64 = row.iter().zip(c).map(|(a, b)| a * b).sum();
            row.iter_mut().zip(c).for_each(|(a, b)| *a -= proj * b);
        }
    }
    set.with_data(data)
}
