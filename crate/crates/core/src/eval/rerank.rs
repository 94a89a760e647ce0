use serde::{Deserialize, Serialize};

use super::metrics::squared_distance;
use super::EmbeddingSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankParams {
    pub fn validate(&self, gallery_size: usize) -> Result<()> {
        if self.k2 < 1 || self.k2 >= self.k1 {
            return Err(Error::Config(format!(
                "re-ranking needs k1 > k2 >= 1, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if self.k1 >= gallery_size {
            return Err(Error::Config(format!(
                "re-ranking k1={} must be smaller than the gallery size {gallery_size}",
                self.k1
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("re-ranking lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

type SparseRow = Vec<(usize, f64)>;

/// k-reciprocal re-ranking of query-to-gallery distances.
///
/// Neighbourhoods are computed over the union of query and gallery with
/// squared Euclidean distances scaled by each row's maximum. The returned
/// `Q × G` matrix is `(1 − λ)·jaccard + λ·original`, where `original` is the
/// unscaled query-to-gallery squared distance, so `λ = 1` reproduces
/// [`distance_matrix`](super::distance_matrix) exactly.
pub fn k_reciprocal_rerank(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    params: &RerankParams,
) -> Result<Vec<Vec<f64>>> {
    query.validate()?;
    gallery.validate()?;
    params.validate(gallery.len())?;
    let original = super::distance_matrix(query, gallery)?;
    let num_query = query.len();
    let all: Vec<&Vec<f64>> = query.vectors.iter().chain(&gallery.vectors).collect();
    let n = all.len();

    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(all[i], all[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    for row in &mut dist {
        let max = row.iter().copied().fold(0.0, f64::max);
        let scale = if max > 0.0 { max } else { 1.0 };
        row.iter_mut().for_each(|d| *d /= scale);
    }
    let initial_rank: Vec<Vec<usize>> = dist
        .iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            order
        })
        .collect();

    let half = (params.k1 as f64 / 2.0).round_ties_even() as usize;
    let mut v: Vec<SparseRow> = (0..n)
        .map(|i| {
            let base = reciprocal_neighbors(&initial_rank, i, params.k1);
            let mut expansion = base.clone();
            for &candidate in &base {
                let cand = reciprocal_neighbors(&initial_rank, candidate, half);
                let overlap = cand.iter().filter(|c| base.contains(c)).count();
                if overlap as f64 > 2.0 / 3.0 * cand.len() as f64 {
                    expansion.extend(cand);
                }
            }
            expansion.sort_unstable();
            expansion.dedup();
            let weights: Vec<f64> = expansion.iter().map(|&j| (-dist[i][j]).exp()).collect();
            let total: f64 = weights.iter().sum();
            expansion.into_iter().zip(weights).map(|(j, w)| (j, w / total)).collect()
        })
        .collect();

    if params.k2 != 1 {
        let mut scratch = vec![0.0; n];
        let mut touched = Vec::new();
        v = (0..n)
            .map(|i| {
                for &nb in &initial_rank[i][..params.k2] {
                    for &(j, w) in &v[nb] {
                        if scratch[j] == 0.0 {
                            touched.push(j);
                        }
                        scratch[j] += w;
                    }
                }
                touched.sort_unstable();
                touched.dedup();
                let row = touched
                    .drain(..)
                    .filter_map(|j| {
                        let w = std::mem::take(&mut scratch[j]) / params.k2 as f64;
                        (w != 0.0).then_some((j, w))
                    })
                    .collect();
                row
            })
            .collect();
    }

    let mut inverted: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (row, entries) in v.iter().enumerate().skip(num_query) {
        for &(col, w) in entries {
            inverted[col].push((row - num_query, w));
        }
    }

    let lambda = params.lambda;
    let mut out = Vec::with_capacity(num_query);
    let mut overlap = vec![0.0; gallery.len()];
    for (i, original_row) in original.into_iter().enumerate() {
        overlap.iter_mut().for_each(|m| *m = 0.0);
        for &(col, w) in &v[i] {
            for &(g, wg) in &inverted[col] {
                overlap[g] += w.min(wg);
            }
        }
        let row = original_row
            .into_iter()
            .zip(&overlap)
            .map(|(orig, &m)| {
                let jaccard = 1.0 - m / (2.0 - m);
                if lambda == 1.0 {
                    orig
                } else {
                    (1.0 - lambda) * jaccard + lambda * orig
                }
            })
            .collect();
        out.push(row);
    }
    Ok(out)
}

/// Members of the top `k + 1` neighbours of `i` that also hold `i` in their
/// own top `k + 1`, in rank order.
fn reciprocal_neighbors(initial_rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    initial_rank[i][..=k]
        .iter()
        .copied()
        .filter(|&j| initial_rank[j][..=k].contains(&i))
        .collect()
}
