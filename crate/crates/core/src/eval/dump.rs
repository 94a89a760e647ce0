use std::path::Path;

use super::{EmbeddingSet, RankingResult};
use crate::error::{Error, Result};

/// Writes the top `top_n` gallery entries of every query as CSV.
///
/// Columns: `query, query_pid, query_cam, rank_1 … rank_n`. Each rank cell is
/// `<gallery path>|1` for a true match and `<gallery path>|0` otherwise, taken
/// from the junk-filtered ranking. Short rankings leave trailing cells empty.
pub fn dump_ranking(
    result: &RankingResult,
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    top_n: usize,
    out_path: &Path,
) -> Result<()> {
    if result.rankings.len() != query.len() {
        return Err(Error::Shape(format!(
            "{} rankings for {} queries",
            result.rankings.len(),
            query.len()
        )));
    }
    let label = |set: &EmbeddingSet, i: usize| {
        set.paths
            .get(i)
            .map_or_else(|| format!("#{i}"), |p| p.display().to_string())
    };
    let mut writer = csv::Writer::from_path(out_path)?;
    let mut header = vec!["query".to_string(), "query_pid".into(), "query_cam".into()];
    header.extend((1..=top_n).map(|r| format!("rank_{r}")));
    writer.write_record(&header)?;
    for (i, ranking) in result.rankings.iter().enumerate() {
        let pid = query.identity_ids[i];
        let mut record = vec![label(query, i), pid.to_string(), query.camera_ids[i].to_string()];
        for r in 0..top_n {
            record.push(ranking.get(r).map_or_else(String::new, |&j| {
                let hit = u8::from(gallery.identity_ids[j] == pid);
                format!("{}|{hit}", label(gallery, j))
            }));
        }
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|e| Error::io(out_path, e))
}
