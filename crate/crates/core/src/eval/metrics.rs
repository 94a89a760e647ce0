use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{l2_normalize, EmbeddingSet, FeatureMode};
use crate::data::DISTRACTOR_PID;
use crate::error::{Error, Result};

/// Squared Euclidean distances, `Q × G`.
pub fn distance_matrix(query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<Vec<Vec<f64>>> {
    if !query.is_empty() && !gallery.is_empty() && query.dim() != gallery.dim() {
        return Err(Error::Shape(format!(
            "query dim {} != gallery dim {}",
            query.dim(),
            gallery.dim()
        )));
    }
    Ok(query
        .vectors
        .iter()
        .map(|q| gallery.vectors.iter().map(|g| squared_distance(q, g)).collect())
        .collect())
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    SingleQuery,
    /// Query descriptors sharing an (identity, camera) pair are averaged.
    MultiQuery,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    /// Per query: gallery indices by increasing distance, junk removed.
    pub rankings: Vec<Vec<usize>>,
    /// Per query: average precision, `None` for queries without a valid positive.
    pub average_precision: Vec<Option<f64>>,
    /// `cmc[r - 1]` is the rank-r match rate, for r in `1..=G`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub rank1: f64,
    pub num_valid_queries: usize,
    pub num_invalid_queries: usize,
}

impl RankingResult {
    /// Match rate within the top `r` (1-based); saturates past the gallery size.
    pub fn cmc_at(&self, r: usize) -> f64 {
        if self.cmc.is_empty() || r == 0 {
            return 0.0;
        }
        self.cmc[r.min(self.cmc.len()) - 1]
    }

    pub fn report(&self, protocol: Protocol, feature_mode: FeatureMode) -> EvalReport {
        EvalReport {
            rank1: self.rank1,
            rank5: self.cmc_at(5),
            rank10: self.cmc_at(10),
            map: self.map,
            protocol,
            feature_mode,
            num_valid_queries: self.num_valid_queries,
            num_invalid_queries: self.num_invalid_queries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub protocol: Protocol,
    pub feature_mode: FeatureMode,
    pub num_valid_queries: usize,
    pub num_invalid_queries: usize,
}

/// CMC and mAP under the standard re-identification protocol.
///
/// For each query, gallery entries with the query's identity and camera, and
/// distractors (identity −1), are removed before scoring. A hit is a
/// remaining entry with the query's identity. Average precision is the mean
/// of precision at each hit's rank. Queries with no hit are excluded from all
/// averages and counted in `num_invalid_queries`. Ties in distance are broken
/// by gallery index.
pub fn evaluate(
    dist: &[Vec<f64>],
    query_ids: &[i64],
    query_cams: &[u32],
    gallery_ids: &[i64],
    gallery_cams: &[u32],
) -> Result<RankingResult> {
    let q = dist.len();
    let g = gallery_ids.len();
    if query_ids.len() != q || query_cams.len() != q || gallery_cams.len() != g {
        return Err(Error::Shape("label arrays do not match the distance matrix".into()));
    }
    if let Some(row) = dist.iter().find(|r| r.len() != g) {
        return Err(Error::Shape(format!(
            "distance row has {} columns, gallery has {g}",
            row.len()
        )));
    }

    let mut hits_at = vec![0usize; g];
    let mut rankings = Vec::with_capacity(q);
    let mut average_precision = Vec::with_capacity(q);
    let mut ap_sum = 0.0;
    let mut valid = 0;
    for (i, row) in dist.iter().enumerate() {
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let filtered: Vec<usize> = order
            .into_iter()
            .filter(|&j| {
                let junk = gallery_ids[j] == DISTRACTOR_PID
                    || (gallery_ids[j] == query_ids[i] && gallery_cams[j] == query_cams[i]);
                !junk
            })
            .collect();
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (rank, &j) in filtered.iter().enumerate() {
            if gallery_ids[j] == query_ids[i] {
                found += 1;
                precision_sum += found as f64 / (rank + 1) as f64;
                first_hit.get_or_insert(rank);
            }
        }
        match first_hit {
            Some(h) if query_ids[i] != DISTRACTOR_PID => {
                valid += 1;
                hits_at[h] += 1;
                let ap = precision_sum / found as f64;
                ap_sum += ap;
                average_precision.push(Some(ap));
            }
            _ => average_precision.push(None),
        }
        rankings.push(filtered);
    }

    let mut cmc = Vec::with_capacity(g);
    let mut cumulative = 0usize;
    for h in hits_at {
        cumulative += h;
        cmc.push(if valid == 0 { 0.0 } else { cumulative as f64 / valid as f64 });
    }
    let map = if valid == 0 { 0.0 } else { ap_sum / valid as f64 };
    let rank1 = cmc.first().copied().unwrap_or(0.0);
    Ok(RankingResult {
        rankings,
        average_precision,
        cmc,
        map,
        rank1,
        num_valid_queries: valid,
        num_invalid_queries: q - valid,
    })
}

/// Averages query descriptors per (identity, camera); the pooled vector is
/// re-normalized when the inputs were unit length. Groups keep the order of
/// their first member, whose path represents the group.
pub fn pool_multi_query(query: &EmbeddingSet) -> EmbeddingSet {
    let mut groups: BTreeMap<(i64, u32), usize> = BTreeMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for i in 0..query.len() {
        let key = (query.identity_ids[i], query.camera_ids[i]);
        let slot = *groups.entry(key).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[slot].push(i);
    }
    let unit = query
        .vectors
        .iter()
        .all(|v| (v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
    let d = query.dim();
    let vectors = members
        .iter()
        .map(|m| {
            let mut mean = vec![0.0; d];
            for &i in m {
                for (acc, x) in mean.iter_mut().zip(&query.vectors[i]) {
                    *acc += x;
                }
            }
            mean.iter_mut().for_each(|x| *x /= m.len() as f64);
            if unit {
                l2_normalize(&mut mean);
            }
            mean
        })
        .collect();
    EmbeddingSet {
        vectors,
        identity_ids: members.iter().map(|m| query.identity_ids[m[0]]).collect(),
        camera_ids: members.iter().map(|m| query.camera_ids[m[0]]).collect(),
        feature_mode: query.feature_mode,
        paths: if query.paths.is_empty() {
            Vec::new()
        } else {
            members.iter().map(|m| query.paths[m[0]].clone()).collect()
        },
    }
}

/// Distances plus evaluation for two embedding sets under `protocol`.
/// Returns the (possibly pooled) query set used for ranking.
pub fn evaluate_sets(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    protocol: Protocol,
) -> Result<(RankingResult, EmbeddingSet)> {
    query.validate()?;
    gallery.validate()?;
    let query = match protocol {
        Protocol::SingleQuery => query.clone(),
        Protocol::MultiQuery => pool_multi_query(query),
    };
    let dist = distance_matrix(&query, gallery)?;
    let result = evaluate(
        &dist,
        &query.identity_ids,
        &query.camera_ids,
        &gallery.identity_ids,
        &gallery.camera_ids,
    )?;
    Ok((result, query))
}
