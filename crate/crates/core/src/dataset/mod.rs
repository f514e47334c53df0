//! Submap database: planar positions, positive/negative relations under the
//! two-threshold rule, training-tuple sampling, query/database splits and a
//! synthetic world generator.

mod manifest;
mod synth;

pub use manifest::{read_manifest, resolve_manifest_path, write_manifest, write_manifest_rows, MANIFEST_FILE};
pub use synth::{chamfer_distance, generate_synthetic_world, SyntheticWorldConfig};

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::rng::StdRng;

pub const DEFAULT_POS_THRESHOLD: f64 = 10.0;
pub const DEFAULT_NEG_THRESHOLD: f64 = 50.0;
pub const DEFAULT_MATCH_RADIUS: f64 = 25.0;

/// One submap: an id, its cloud and its planar (easting, northing) position in meters.
#[derive(Debug, Clone)]
pub struct SubmapRecord {
    pub id: u64,
    pub cloud: Arc<PointCloud>,
    pub coord: [f64; 2],
}

impl SubmapRecord {
    pub fn new(id: u64, cloud: PointCloud, coord: [f64; 2]) -> Self {
        Self {
            id,
            cloud: Arc::new(cloud),
            coord,
        }
    }
}

pub fn planar_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Records plus precomputed positive and non-negative sets.
///
/// Sets are stored as sorted record positions; the public accessors speak ids.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    records: Vec<SubmapRecord>,
    positives: Vec<Vec<usize>>,
    non_negatives: Vec<Vec<usize>>,
    by_id: HashMap<u64, usize>,
    pos_threshold: f64,
    neg_threshold: f64,
}

/// Uniform grid over planar coordinates, cell size equal to the search radius.
struct Grid {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(coords: impl Iterator<Item = [f64; 2]>, cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, c) in coords.enumerate() {
            cells.entry(Self::key(c, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(c: [f64; 2], cell: f64) -> (i64, i64) {
        ((c[0] / cell).floor() as i64, (c[1] / cell).floor() as i64)
    }

    fn neighbours(&self, c: [f64; 2]) -> impl Iterator<Item = usize> + '_ {
        let (kx, ky) = Self::key(c, self.cell);
        (-1..=1)
            .flat_map(move |dx| (-1..=1).map(move |dy| (kx + dx, ky + dy)))
            .filter_map(|k| self.cells.get(&k))
            .flatten()
            .copied()
    }
}

pub fn build_index(records: Vec<SubmapRecord>, pos_threshold: f64, neg_threshold: f64) -> Result<DatasetIndex> {
    if !(pos_threshold > 0.0 && pos_threshold < neg_threshold && neg_threshold.is_finite()) {
        return Err(Error::invalid(format!(
            "thresholds must satisfy 0 < pos ({pos_threshold}) < neg ({neg_threshold})"
        )));
    }
    let mut by_id = HashMap::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if !r.coord.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite(format!("coordinate of submap {}", r.id)));
        }
        if by_id.insert(r.id, i).is_some() {
            return Err(Error::invalid(format!("duplicate submap id {}", r.id)));
        }
    }

    let grid = Grid::new(records.iter().map(|r| r.coord), neg_threshold);
    let mut positives = vec![Vec::new(); records.len()];
    let mut non_negatives = vec![Vec::new(); records.len()];
    for (i, r) in records.iter().enumerate() {
        for j in grid.neighbours(r.coord) {
            let d = planar_distance(r.coord, records[j].coord);
            if d <= neg_threshold {
                non_negatives[i].push(j);
                if j != i && d <= pos_threshold {
                    positives[i].push(j);
                }
            }
        }
        positives[i].sort_unstable();
        non_negatives[i].sort_unstable();
    }

    Ok(DatasetIndex {
        records,
        positives,
        non_negatives,
        by_id,
        pos_threshold,
        neg_threshold,
    })
}

impl DatasetIndex {
    pub fn records(&self) -> &[SubmapRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn pos_threshold(&self) -> f64 {
        self.pos_threshold
    }

    pub fn neg_threshold(&self) -> f64 {
        self.neg_threshold
    }

    pub fn position(&self, id: u64) -> Result<usize> {
        self.by_id
            .get(&id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown submap id {id}")))
    }

    pub fn record(&self, id: u64) -> Result<&SubmapRecord> {
        Ok(&self.records[self.position(id)?])
    }

    pub fn positives(&self, id: u64) -> Result<Vec<u64>> {
        let i = self.position(id)?;
        Ok(self.positives[i].iter().map(|&j| self.records[j].id).collect())
    }

    pub fn non_negatives(&self, id: u64) -> Result<Vec<u64>> {
        let i = self.position(id)?;
        Ok(self.non_negatives[i].iter().map(|&j| self.records[j].id).collect())
    }

    pub fn is_positive(&self, a: u64, b: u64) -> Result<bool> {
        let (i, j) = (self.position(a)?, self.position(b)?);
        Ok(self.positives[i].binary_search(&j).is_ok())
    }

    pub fn is_negative(&self, a: u64, b: u64) -> Result<bool> {
        let (i, j) = (self.position(a)?, self.position(b)?);
        Ok(self.non_negatives[i].binary_search(&j).is_err())
    }

    /// Ids of records that have at least one positive.
    pub fn anchor_ids(&self) -> Vec<u64> {
        self.records
            .iter()
            .zip(&self.positives)
            .filter(|(_, p)| !p.is_empty())
            .map(|(r, _)| r.id)
            .collect()
    }
}

/// An anchor with sampled positive and negative candidates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingTuple {
    pub anchor: u64,
    pub positives: Vec<u64>,
    pub negatives: Vec<u64>,
}

/// Samples up to `num_pos` positives of the anchor and exactly `num_neg`
/// negatives, each uniformly without replacement.
///
/// Returns `Ok(None)` (and logs) for an anchor without positives.
pub fn sample_training_tuple(
    index: &DatasetIndex,
    anchor_id: u64,
    num_pos: usize,
    num_neg: usize,
    rng: &mut StdRng,
) -> Result<Option<TrainingTuple>> {
    let a = index.position(anchor_id)?;
    let pos = &index.positives[a];
    if pos.is_empty() {
        log::warn!("anchor {anchor_id} has no positives within {} m; skipped", index.pos_threshold);
        return Ok(None);
    }
    let non_neg = &index.non_negatives[a];
    let negatives: Vec<usize> = (0..index.len()).filter(|j| non_neg.binary_search(j).is_err()).collect();
    if negatives.len() < num_neg {
        return Err(Error::Insufficient(format!(
            "anchor {anchor_id} has {} negatives, {num_neg} requested",
            negatives.len()
        )));
    }
    let take_pos = num_pos.min(pos.len());
    let positives = rand::seq::index::sample(rng, pos.len(), take_pos)
        .into_iter()
        .map(|k| index.records[pos[k]].id)
        .collect();
    let negatives = rand::seq::index::sample(rng, negatives.len(), num_neg)
        .into_iter()
        .map(|k| index.records[negatives[k]].id)
        .collect();
    Ok(Some(TrainingTuple {
        anchor: anchor_id,
        positives,
        negatives,
    }))
}

/// Connected components of records under "within `radius` meters", ordered
/// by their lowest record position.
pub fn spatial_groups(records: &[SubmapRecord], radius: f64) -> Vec<Vec<usize>> {
    let n = records.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let grid = Grid::new(records.iter().map(|r| r.coord), radius.max(f64::MIN_POSITIVE));
    for i in 0..n {
        for j in grid.neighbours(records[i].coord) {
            if j > i && planar_distance(records[i].coord, records[j].coord) <= radius {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        let g = *slot.entry(root).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

#[derive(Debug, Clone)]
pub struct QuerySplit {
    pub queries: Vec<SubmapRecord>,
    pub database: Vec<SubmapRecord>,
    /// Queries removed because no database record lies within the match radius.
    pub dropped: Vec<u64>,
}

/// Partitions records into queries and database.
///
/// Records are grouped into places (connected components under the match
/// radius). Each place sends `round(query_fraction * size)` records to the
/// query side, capped so at least one stays in the database. Queries left
/// without a database record within `match_radius` are dropped and logged.
pub fn split_query_database(
    records: &[SubmapRecord],
    query_fraction: f64,
    match_radius: f64,
    rng: &mut StdRng,
) -> Result<QuerySplit> {
    if !(0.0..=1.0).contains(&query_fraction) {
        return Err(Error::invalid(format!("query_fraction must be in [0, 1], got {query_fraction}")));
    }
    let mut is_query = vec![false; records.len()];
    for mut group in spatial_groups(records, match_radius) {
        group.shuffle(rng);
        let nq = ((query_fraction * group.len() as f64).round() as usize).min(group.len() - 1);
        for &i in &group[..nq] {
            is_query[i] = true;
        }
    }

    let database: Vec<SubmapRecord> = records
        .iter()
        .zip(&is_query)
        .filter(|(_, &q)| !q)
        .map(|(r, _)| r.clone())
        .collect();
    let mut queries = Vec::new();
    let mut dropped = Vec::new();
    for (r, _) in records.iter().zip(&is_query).filter(|(_, &q)| q) {
        if database.iter().any(|d| planar_distance(d.coord, r.coord) <= match_radius) {
            queries.push(r.clone());
        } else {
            log::warn!("query {} has no database submap within {match_radius} m; dropped", r.id);
            dropped.push(r.id);
        }
    }
    if queries.is_empty() || database.is_empty() {
        return Err(Error::Empty(format!(
            "split produced {} queries and {} database records",
            queries.len(),
            database.len()
        )));
    }
    Ok(QuerySplit {
        queries,
        database,
        dropped,
    })
}

/// Splits whole places (components under `group_radius`) between train and
/// test: `round(test_fraction * places)` shuffled places go to the test side.
pub fn split_train_test(
    records: &[SubmapRecord],
    test_fraction: f64,
    group_radius: f64,
    rng: &mut StdRng,
) -> Result<(Vec<SubmapRecord>, Vec<SubmapRecord>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!("test_fraction must be in [0, 1), got {test_fraction}")));
    }
    let mut groups = spatial_groups(records, group_radius);
    groups.shuffle(rng);
    let n_test = (test_fraction * groups.len() as f64).round() as usize;
    let mut is_test = vec![false; records.len()];
    for g in &groups[..n_test] {
        for &i in g {
            is_test[i] = true;
        }
    }
    let pick = |want: bool| {
        records
            .iter()
            .zip(&is_test)
            .filter(|(_, &t)| t == want)
            .map(|(r, _)| r.clone())
            .collect::<Vec<_>>()
    };
    Ok((pick(false), pick(true)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn rec(id: u64, x: f64, y: f64) -> SubmapRecord {
        SubmapRecord::new(id, PointCloud::new(vec![[0.0; 3]]).unwrap(), [x, y])
    }

    #[test]
    fn two_thresholds() {
        let idx = build_index(vec![rec(0, 0.0, 0.0), rec(1, 5.0, 0.0), rec(2, 65.0, 0.0), rec(3, 35.0, 0.0)], 10.0, 50.0).unwrap();
        // 5 m: mutual positives
        assert!(idx.is_positive(0, 1).unwrap() && idx.is_positive(1, 0).unwrap());
        // 60 m: negatives
        assert!(idx.is_negative(1, 2).unwrap() && idx.is_negative(2, 1).unwrap());
        // 30 m: neither
        assert!(!idx.is_positive(1, 3).unwrap());
        assert!(!idx.is_negative(1, 3).unwrap());
        // no self positives, self is a non-negative
        assert!(!idx.positives(0).unwrap().contains(&0));
        assert!(idx.non_negatives(0).unwrap().contains(&0));
    }

    #[test]
    fn bad_thresholds_and_coords() {
        assert!(build_index(vec![rec(0, 0.0, 0.0)], 50.0, 10.0).is_err());
        assert!(build_index(vec![rec(0, 0.0, 0.0)], 0.0, 10.0).is_err());
        assert!(matches!(build_index(vec![rec(0, f64::NAN, 0.0)], 10.0, 50.0), Err(Error::NonFinite(_))));
        assert!(build_index(vec![rec(0, 0.0, 0.0), rec(0, 1.0, 0.0)], 10.0, 50.0).is_err());
    }

    #[test]
    fn index_matches_brute_force() {
        let mut rng = seeded(5);
        for trial in 0..20 {
            let n = 5 + trial * 7;
            let recs: Vec<SubmapRecord> = (0..n)
                .map(|i| rec(i as u64 * 3 + 1, rng.random_range(-150.0..150.0), rng.random_range(-150.0..150.0)))
                .collect();
            let idx = build_index(recs.clone(), 10.0, 50.0).unwrap();
            for a in &recs {
                let mut pos = Vec::new();
                let mut nn = Vec::new();
                for b in &recs {
                    let d = ((a.coord[0] - b.coord[0]).powi(2) + (a.coord[1] - b.coord[1]).powi(2)).sqrt();
                    if d <= 50.0 {
                        nn.push(b.id);
                    }
                    if b.id != a.id && d <= 10.0 {
                        pos.push(b.id);
                    }
                }
                let mut got_pos = idx.positives(a.id).unwrap();
                let mut got_nn = idx.non_negatives(a.id).unwrap();
                got_pos.sort();
                got_nn.sort();
                pos.sort();
                nn.sort();
                assert_eq!(got_pos, pos);
                assert_eq!(got_nn, nn);
                for p in &got_pos {
                    assert!(idx.positives(*p).unwrap().contains(&a.id), "symmetry");
                    assert!(got_nn.contains(p), "positives within non-negatives");
                }
            }
        }
    }

    #[test]
    fn tuple_sampling() {
        let recs = vec![rec(0, 0.0, 0.0), rec(1, 3.0, 0.0), rec(2, 100.0, 0.0), rec(3, 200.0, 0.0), rec(4, 30.0, 0.0)];
        let idx = build_index(recs, 10.0, 50.0).unwrap();
        let t = sample_training_tuple(&idx, 0, 1, 2, &mut seeded(3)).unwrap().unwrap();
        assert_eq!(t.positives, vec![1]);
        let mut n = t.negatives.clone();
        n.sort();
        assert_eq!(n, vec![2, 3]);
        assert_eq!(t, sample_training_tuple(&idx, 0, 1, 2, &mut seeded(3)).unwrap().unwrap());
        // anchor 3 has no positives
        assert!(sample_training_tuple(&idx, 3, 1, 1, &mut seeded(3)).unwrap().is_none());
        // not enough negatives
        assert!(matches!(sample_training_tuple(&idx, 0, 1, 3, &mut seeded(3)), Err(Error::Insufficient(_))));
    }

    #[test]
    fn sampled_negatives_are_far() {
        let mut rng = seeded(8);
        let recs: Vec<SubmapRecord> = (0..200)
            .map(|i| rec(i, rng.random_range(0.0..400.0), rng.random_range(0.0..400.0)))
            .collect();
        let idx = build_index(recs, 10.0, 50.0).unwrap();
        for a in idx.anchor_ids() {
            let t = sample_training_tuple(&idx, a, 2, 8, &mut rng).unwrap().unwrap();
            let ca = idx.record(a).unwrap().coord;
            for n in &t.negatives {
                assert!(planar_distance(ca, idx.record(*n).unwrap().coord) > 50.0);
            }
            for p in &t.positives {
                assert!(planar_distance(ca, idx.record(*p).unwrap().coord) <= 10.0);
            }
            let mut all: Vec<u64> = t.positives.iter().chain(&t.negatives).copied().collect();
            all.push(a);
            let before = all.len();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), before);
        }
    }

    #[test]
    fn split_two_per_site() {
        let recs: Vec<SubmapRecord> = (0..10)
            .flat_map(|s| [rec(2 * s, s as f64 * 100.0, 0.0), rec(2 * s + 1, s as f64 * 100.0 + 2.0, 1.0)])
            .collect();
        let split = split_query_database(&recs, 0.5, 25.0, &mut seeded(4)).unwrap();
        assert_eq!(split.queries.len(), 10);
        assert_eq!(split.database.len(), 10);
        for s in 0..10u64 {
            let q = split.queries.iter().filter(|r| r.id / 2 == s).count();
            assert_eq!(q, 1);
        }
        let again = split_query_database(&recs, 0.5, 25.0, &mut seeded(4)).unwrap();
        let ids = |v: &[SubmapRecord]| v.iter().map(|r| r.id).collect::<Vec<_>>();
        assert_eq!(ids(&split.queries), ids(&again.queries));
    }

    #[test]
    fn split_drops_unmatched_query() {
        // Chain 0 -- 20 m -- 1 -- 20 m -- 2: one component, but the ends are 40 m apart.
        // 80 m isolated pair handled by the cap, so force it through the chain.
        let recs = vec![rec(0, 0.0, 0.0), rec(1, 20.0, 0.0), rec(2, 40.0, 0.0), rec(3, 500.0, 0.0), rec(4, 510.0, 0.0)];
        let mut saw_drop = false;
        for seed in 0..50 {
            let split = split_query_database(&recs, 0.67, 25.0, &mut seeded(seed)).unwrap();
            for q in &split.queries {
                assert!(split.database.iter().any(|d| planar_distance(d.coord, q.coord) <= 25.0));
            }
            if !split.dropped.is_empty() {
                saw_drop = true;
                for d in &split.dropped {
                    let c = recs.iter().find(|r| r.id == *d).unwrap().coord;
                    assert!(split.database.iter().all(|r| planar_distance(r.coord, c) > 25.0));
                }
            }
        }
        assert!(saw_drop);
    }

    #[test]
    fn split_rejects_empty_partition() {
        let recs = vec![rec(0, 0.0, 0.0), rec(1, 500.0, 0.0)];
        assert!(matches!(split_query_database(&recs, 0.5, 25.0, &mut seeded(0)), Err(Error::Empty(_))));
    }

    #[test]
    fn train_test_keeps_places_whole() {
        let recs: Vec<SubmapRecord> = (0..12)
            .flat_map(|s| (0..3).map(move |k| rec(s * 3 + k, s as f64 * 100.0, k as f64)))
            .collect();
        let (train, test) = split_train_test(&recs, 0.25, 50.0, &mut seeded(1)).unwrap();
        assert_eq!(test.len(), 9);
        assert_eq!(train.len(), 27);
        for t in &test {
            assert!(train.iter().all(|r| r.id / 3 != t.id / 3));
        }
    }
}
