use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tbn::eval::{EmbeddingSet, FeatureMode};

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn oracle_ce(logits: &[Vec<f64>], labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        total += log_sum_exp(row) - row[y as usize];
    }
    total / labels.len() as f64
}

pub fn oracle_log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|x| x - lse).collect()
}

/// mean over rows of Σ p (ln p − ln q)
pub fn oracle_kl(p_logits: &[Vec<f64>], q_logits: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (p_row, q_row) in p_logits.iter().zip(q_logits) {
        let lp = oracle_log_softmax(p_row);
        let lq = oracle_log_softmax(q_row);
        for (a, b) in lp.iter().zip(&lq) {
            total += a.exp() * (a - b);
        }
    }
    total / p_logits.len() as f64
}

pub fn concat_rows(parts: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}

pub fn random_set(r: &mut ChaCha8Rng, n: usize, dim: usize, ids: i64, cams: u32) -> EmbeddingSet {
    EmbeddingSet {
        vectors: (0..n)
            .map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect(),
        identity_ids: (0..n).map(|_| r.random_range(-1..ids)).collect(),
        camera_ids: (0..n).map(|_| r.random_range(1..=cams)).collect(),
        feature_mode: FeatureMode::Joint,
        paths: vec![],
    }
}

/// Per query: rank of each kept gallery entry is one plus the number of kept
/// entries ordered strictly before it.
pub fn reference_metrics(
    dist: &[Vec<f64>],
    q_ids: &[i64],
    q_cams: &[u32],
    g_ids: &[i64],
    g_cams: &[u32],
) -> (Vec<f64>, f64, Vec<Option<f64>>) {
    let g = g_ids.len();
    let before = |row: &[f64], a: usize, b: usize| row[a] < row[b] || (row[a] == row[b] && a < b);
    let mut first_hits = Vec::new();
    let mut aps = Vec::new();
    for (i, row) in dist.iter().enumerate() {
        let kept = |j: usize| g_ids[j] != -1 && !(g_ids[j] == q_ids[i] && g_cams[j] == q_cams[i]);
        let good: Vec<usize> = (0..g).filter(|&j| kept(j) && g_ids[j] == q_ids[i]).collect();
        if good.is_empty() || q_ids[i] == -1 {
            aps.push(None);
            continue;
        }
        let mut ranks: Vec<usize> = good
            .iter()
            .map(|&j| 1 + (0..g).filter(|&k| kept(k) && before(row, k, j)).count())
            .collect();
        ranks.sort_unstable();
        let ap = ranks
            .iter()
            .enumerate()
            .map(|(n, &rank)| (n + 1) as f64 / rank as f64)
            .sum::<f64>()
            / ranks.len() as f64;
        aps.push(Some(ap));
        first_hits.push(ranks[0]);
    }
    let valid = first_hits.len();
    let cmc = (1..=g)
        .map(|r| {
            if valid == 0 {
                0.0
            } else {
                first_hits.iter().filter(|&&h| h <= r).count() as f64 / valid as f64
            }
        })
        .collect();
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (cmc, map, aps)
}

pub fn reciprocal(rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    rank[i][..=k]
        .iter()
        .copied()
        .filter(|j| rank[*j][..=k].contains(&i))
        .collect()
}

/// Dense k-reciprocal Jaccard distance, query rows against gallery columns.
pub fn reference_jaccard(q: &EmbeddingSet, g: &EmbeddingSet, k1: usize, k2: usize) -> Vec<Vec<f64>> {
    let all: Vec<&Vec<f64>> = q.vectors.iter().chain(&g.vectors).collect();
    let n = all.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            d[i][j] = all[i].iter().zip(all[j]).map(|(a, b)| (a - b).powi(2)).sum();
        }
        let m = d[i].iter().copied().fold(f64::MIN, f64::max);
        d[i].iter_mut().for_each(|x| *x /= m);
    }
    let rank: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut o: Vec<usize> = (0..n).collect();
            o.sort_by(|a, b| d[i][*a].partial_cmp(&d[i][*b]).unwrap());
            o
        })
        .collect();
    // half of k1, odd values rounded to the even neighbour
    let half = if k1 % 2 == 1 && (k1 / 2) % 2 == 1 { k1 / 2 + 1 } else { k1 / 2 };
    let mut v = vec![vec![0.0; n]; n];
    for i in 0..n {
        let base = reciprocal(&rank, i, k1);
        let mut members = vec![false; n];
        for &j in &base {
            members[j] = true;
        }
        for &c in &base {
            let cand = reciprocal(&rank, c, half);
            let inside = cand.iter().filter(|x| base.contains(x)).count();
            if 3 * inside > 2 * cand.len() {
                for &x in &cand {
                    members[x] = true;
                }
            }
        }
        let z: f64 = (0..n).filter(|&j| members[j]).map(|j| (-d[i][j]).exp()).sum();
        for j in 0..n {
            if members[j] {
                v[i][j] = (-d[i][j]).exp() / z;
            }
        }
    }
    let v: Vec<Vec<f64>> = if k2 == 1 {
        v
    } else {
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| rank[i][..k2].iter().map(|&t| v[t][j]).sum::<f64>() / k2 as f64)
                    .collect()
            })
            .collect()
    };
    (0..q.len())
        .map(|i| {
            (0..g.len())
                .map(|gj| {
                    let j = q.len() + gj;
                    let lo: f64 = (0..n).map(|c| v[i][c].min(v[j][c])).sum();
                    let hi: f64 = (0..n).map(|c| v[i][c].max(v[j][c])).sum();
                    1.0 - lo / hi
                })
                .collect()
        })
        .collect()
}
