use std::fmt::Write as _;

use rayon::prelude::*;

use super::store::DescriptorStore;
use crate::dataset::planar_distance;
use crate::error::{Error, Result};

/// `max(round(n / 100), 1)` with halves rounded up.
pub fn top1pct_cutoff(database_size: usize) -> usize {
    ((database_size + 50) / 100).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Percent of evaluated queries whose nearest database entry is correct.
    pub recall_top1: f64,
    /// Percent of evaluated queries with a correct entry within the cutoff.
    pub recall_top1pct: f64,
    pub num_queries_evaluated: usize,
    pub num_database: usize,
    pub top1pct_cutoff: usize,
    pub match_radius: f64,
    /// Query id and the 1-based rank of its first correct match; `None` for
    /// queries without any database entry inside the radius.
    pub ranks: Vec<(u64, Option<usize>)>,
    /// Free-form `key = value` lines echoed at the top of the report.
    pub config: Vec<(String, String)>,
}

impl EvalReport {
    pub fn with_config(mut self, config: Vec<(String, String)>) -> Self {
        self.config = config;
        self
    }

    /// Plain text with a fixed line order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k} = {v}");
        }
        let _ = writeln!(s, "recall_top1 = {:.4}", self.recall_top1);
        let _ = writeln!(s, "recall_top1pct = {:.4}", self.recall_top1pct);
        let _ = writeln!(s, "num_queries_evaluated = {}", self.num_queries_evaluated);
        let _ = writeln!(s, "num_queries_skipped = {}", self.ranks.len() - self.num_queries_evaluated);
        let _ = writeln!(s, "num_database = {}", self.num_database);
        let _ = writeln!(s, "top1pct_cutoff = {}", self.top1pct_cutoff);
        let _ = writeln!(s, "match_radius = {}", self.match_radius);
        for (id, rank) in &self.ranks {
            match rank {
                Some(r) => {
                    let _ = writeln!(s, "rank {id} = {r}");
                }
                None => {
                    let _ = writeln!(s, "rank {id} = none");
                }
            }
        }
        s
    }
}

/// Ranks the database by descriptor distance for every query (ties by id).
/// A retrieved entry is correct when its planar coordinate is within
/// `match_radius` of the query's. Queries with no correct entry at all are
/// logged and left out of both recalls.
pub fn evaluate(queries: &DescriptorStore, database: &DescriptorStore, match_radius: f64) -> Result<EvalReport> {
    if queries.is_empty() || database.is_empty() {
        return Err(Error::Empty("evaluation needs queries and a database".into()));
    }
    if queries.dim() != database.dim() {
        return Err(Error::DimensionMismatch {
            expected: database.dim(),
            got: queries.dim(),
        });
    }
    let db = database.entries();
    let ranks: Vec<(u64, Option<usize>)> = queries
        .entries()
        .par_iter()
        .map(|q| {
            let sq: Vec<f64> = db
                .iter()
                .map(|e| q.descriptor.iter().zip(&e.descriptor).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let best = db
                .iter()
                .enumerate()
                .filter(|(_, e)| planar_distance(e.coord, q.coord) <= match_radius)
                .min_by(|(i, a), (j, b)| sq[*i].total_cmp(&sq[*j]).then(a.id.cmp(&b.id)))
                .map(|(i, e)| (sq[i], e.id));
            let rank = best.map(|(s, id)| {
                1 + db
                    .iter()
                    .zip(&sq)
                    .filter(|(e, d)| d.total_cmp(&s).then(e.id.cmp(&id)).is_lt())
                    .count()
            });
            (q.id, rank)
        })
        .collect();
    for (id, r) in &ranks {
        if r.is_none() {
            log::warn!("query {id} has no database entry within {match_radius} m; not evaluated");
        }
    }
    let evaluated = ranks.iter().filter(|(_, r)| r.is_some()).count();
    if evaluated == 0 {
        return Err(Error::Empty("no query has a true match in the database".into()));
    }
    let cutoff = top1pct_cutoff(db.len());
    let hits = |limit: usize| ranks.iter().filter(|(_, r)| r.is_some_and(|r| r <= limit)).count();
    let pct = |h: usize| 100.0 * h as f64 / evaluated as f64;
    Ok(EvalReport {
        recall_top1: pct(hits(1)),
        recall_top1pct: pct(hits(cutoff)),
        num_queries_evaluated: evaluated,
        num_database: db.len(),
        top1pct_cutoff: cutoff,
        match_radius,
        ranks,
        config: Vec::new(),
    })
}
