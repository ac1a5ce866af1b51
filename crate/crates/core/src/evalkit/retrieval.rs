//! Cosine nearest-neighbour retrieval and the language-bias histogram.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use super::EmbeddingSet;
use crate::error::{Error, Result};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Rows scaled to unit length; a zero row is an error naming it.
fn unit_rows(set: &EmbeddingSet, what: &str) -> Result<Vec<Vec<f64>>> {
    set.rows()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n == 0.0 {
                return Err(Error::Degenerate(format!("{what} row {i} is the zero vector")));
            }
            Ok(r.iter().map(|x| x / n).collect())
        })
        .collect()
}

/// Candidate indices ordered by decreasing cosine to `q`; ties keep the
/// lower index first.
fn ranked(q: &[f64], candidates: &[Vec<f64>]) -> Vec<usize> {
    let scores: Vec<f64> = candidates.iter().map(|c| dot(q, c)).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn best(q: &[f64], candidates: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (j, c) in candidates.iter().enumerate() {
        let s = dot(q, c);
        if s > best_score {
            best = j;
            best_score = s;
        }
    }
    best
}

fn map_queries<F>(n: usize, f: F) -> Vec<usize>
where
    F: Fn(usize) -> usize + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Fraction of queries whose highest-cosine candidate is `gold[q]`; ties
/// go to the lowest candidate index.
pub fn retrieval_accuracy(queries: &EmbeddingSet, candidates: &EmbeddingSet, gold: &[usize]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Data("no candidates to retrieve from".into()));
    }
    if queries.dim() != candidates.dim() {
        return Err(Error::dim("retrieval_accuracy", &[queries.dim()], &[candidates.dim()]));
    }
    if gold.len() != queries.len() {
        return Err(Error::Data(format!(
            "gold map has {} entries for {} queries",
            gold.len(),
            queries.len()
        )));
    }
    if let Some(&g) = gold.iter().find(|&&g| g >= candidates.len()) {
        return Err(Error::Data(format!(
            "gold index {g} outside {} candidates",
            candidates.len()
        )));
    }
    let q = unit_rows(queries, "query")?;
    let c = unit_rows(candidates, "candidate")?;
    let hits = map_queries(q.len(), |i| usize::from(best(&q[i], &c) == gold[i]));
    Ok(hits.iter().sum::<usize>() as f64 / q.len() as f64)
}

/// Gold map pairing every query with the single candidate of the same id.
pub fn gold_by_id(queries: &EmbeddingSet, candidates: &EmbeddingSet) -> Result<Vec<usize>> {
    let mut by_id = std::collections::HashMap::new();
    for j in 0..candidates.len() {
        if by_id.insert(candidates.id(j), j).is_some() {
            return Err(Error::Data(format!("candidate id {} appears twice", candidates.id(j))));
        }
    }
    (0..queries.len())
        .map(|i| {
            by_id
                .get(&queries.id(i))
                .copied()
                .ok_or_else(|| Error::Data(format!("query id {} has no candidate", queries.id(i))))
        })
        .collect()
}

/// Retrieval within consecutive blocks of `batch` aligned rows: row `i` of
/// `source` should retrieve row `i` of `target` among the block's rows.
pub fn in_batch_retrieval(source: &EmbeddingSet, target: &EmbeddingSet, batch: usize) -> Result<f64> {
    if source.len() != target.len() {
        return Err(Error::Data(format!(
            "{} sources but {} targets",
            source.len(),
            target.len()
        )));
    }
    if batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let s = unit_rows(source, "source")?;
    let t = unit_rows(target, "target")?;
    let hits = map_queries(s.len(), |i| {
        let start = i / batch * batch;
        let end = (start + batch).min(t.len());
        usize::from(start + best(&s[i], &t[start..end]) == i)
    });
    Ok(hits.iter().sum::<usize>() as f64 / s.len() as f64)
}

/// Language distribution of retrieved neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasHistogram {
    /// The pool's tag set.
    pub languages: Vec<String>,
    /// Share of all retrieved rows per language; sums to 1.
    pub fractions: Vec<f64>,
    /// Share of retrieved rows in the language of their query.
    pub same_language: f64,
}

/// For each query, the `k` nearest pool rows by cosine (skipping the
/// query's own row when the pool holds it, matched by id and language),
/// tallied by language.
pub fn language_bias_histogram(queries: &EmbeddingSet, pool: &EmbeddingSet, k: usize) -> Result<BiasHistogram> {
    if pool.languages().len() < 2 {
        return Err(Error::Data("pool must span at least two languages".into()));
    }
    if k == 0 || k + 1 > pool.len() {
        return Err(Error::Config(format!(
            "k = {k} must be in 1..={} for a pool of {}",
            pool.len().saturating_sub(1),
            pool.len()
        )));
    }
    if queries.dim() != pool.dim() {
        return Err(Error::dim("language_bias_histogram", &[queries.dim()], &[pool.dim()]));
    }
    let q = unit_rows(queries, "query")?;
    let p = unit_rows(pool, "pool")?;
    let languages = pool.languages().to_vec();
    let mut counts = vec![0usize; languages.len()];
    let mut same = 0usize;
    for (i, qv) in q.iter().enumerate() {
        let own = queries.language(i);
        let picked = ranked(qv, &p)
            .into_iter()
            .filter(|&j| !(pool.id(j) == queries.id(i) && pool.language(j) == own))
            .take(k);
        for j in picked {
            counts[pool.tag(j)] += 1;
            same += usize::from(pool.language(j) == own);
        }
    }
    let total: usize = counts.iter().sum();
    Ok(BiasHistogram {
        languages,
        fractions: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        same_language: same as f64 / total as f64,
    })
}
