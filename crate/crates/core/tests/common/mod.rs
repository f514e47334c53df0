//! Independent oracles and random instance builders shared by the
//! integration suites.
#![allow(dead_code)]

use gidp_core::encoder::{evaluate_loss, Architecture, EncoderParams, LossHead, Target, Triplet};
use gidp_core::pointcloud::PointCloud;
use gidp_core::retrieval::{DescriptorStore, Origin};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn unit(rng: &mut StdRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn cloud(rng: &mut StdRng, n: usize, scale: f64) -> PointCloud {
    let pts = (0..n)
        .map(|_| {
            [
                rng.random_range(-scale..scale),
                rng.random_range(-scale..scale),
                rng.random_range(-scale..scale),
            ]
        })
        .collect();
    PointCloud::new(pts).unwrap()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Store of unit descriptors; when `coarse` is set, coordinates are drawn
/// from a small grid so duplicates and distance ties are common.
pub fn random_store(rng: &mut StdRng, n: usize, dim: usize, coarse: bool, origin: Origin) -> DescriptorStore {
    let mut s = DescriptorStore::new(dim).unwrap();
    let mut ids: Vec<u64> = (0..n as u64 * 3).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    for &id in ids.iter().take(n) {
        let v = if coarse {
            let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-2..=2) as f64).collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                let mut e = vec![0.0; dim];
                e[0] = 1.0;
                e
            } else {
                raw.into_iter().map(|x| x / norm).collect()
            }
        } else {
            unit(rng, dim)
        };
        let coord = [rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)];
        s.insert_unchecked(id, v, coord, origin).unwrap();
    }
    s
}

/// Exhaustive k-NN: sort every entry by (squared distance, id).
pub fn knn_oracle(store: &DescriptorStore, q: &[f64], k: usize, exclude: Option<u64>) -> Vec<u64> {
    let mut all: Vec<(f64, u64)> = store
        .entries()
        .iter()
        .filter(|e| Some(e.id) != exclude)
        .map(|e| (sq_dist(q, &e.descriptor), e.id))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, id)| id).collect()
}

/// Exhaustive batch-hard selection: the pair maximizing
/// `d(a,p) - d(a,n)` over all candidate pairs, ties to the lowest indices.
pub fn mining_oracle(a: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>]) -> (usize, usize) {
    let mut best: Option<(f64, f64, usize, usize)> = None;
    for (i, p) in pos.iter().enumerate() {
        for (j, n) in neg.iter().enumerate() {
            let dp = sq_dist(a, p).sqrt();
            let dn = sq_dist(a, n).sqrt();
            let better = match best {
                None => true,
                // Farthest positive first, then nearest negative.
                Some((bp, bn, _, _)) => dp > bp || (dp == bp && dn < bn),
            };
            if better {
                best = Some((dp, dn, i, j));
            }
        }
    }
    let (_, _, i, j) = best.unwrap();
    (i, j)
}

/// Per-query rank of the first correct database entry: a full sort of the
/// database by (squared distance, id), then a linear scan.
pub fn rank_oracle(queries: &DescriptorStore, db: &DescriptorStore, radius: f64) -> Vec<(u64, Option<usize>)> {
    queries
        .entries()
        .iter()
        .map(|q| {
            let mut order: Vec<(f64, u64, [f64; 2])> = db
                .entries()
                .iter()
                .map(|e| (sq_dist(&q.descriptor, &e.descriptor), e.id, e.coord))
                .collect();
            order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let rank = order.iter().position(|(_, _, c)| {
                let dx = c[0] - q.coord[0];
                let dy = c[1] - q.coord[1];
                (dx * dx + dy * dy).sqrt() <= radius
            });
            (q.id, rank.map(|r| r + 1))
        })
        .collect()
}

/// Recall at top 1 and at `cutoff` over the queries that have a rank.
pub fn recalls_oracle(ranks: &[(u64, Option<usize>)], cutoff: usize) -> (f64, f64) {
    let ev: Vec<usize> = ranks.iter().filter_map(|r| r.1).collect();
    let at = |c: usize| 100.0 * ev.iter().filter(|&&r| r <= c).count() as f64 / ev.len() as f64;
    (at(1), at(cutoff))
}

pub fn tiny_params(rng: &mut StdRng) -> EncoderParams {
    let depth = rng.random_range(1..=2);
    let mut widths = vec![3];
    for _ in 0..depth {
        widths.push(rng.random_range(2..=5));
    }
    let c = *widths.last().unwrap();
    let arch = Architecture::new(widths, rng.random_range(2..=4)).unwrap();
    let mut p = gidp_core::encoder::init_architecture(rng.random(), &arch).unwrap();
    for s in p.layout().segments().to_vec() {
        for v in p.segment_mut(&s.name).iter_mut() {
            if s.name.ends_with(".bias") {
                *v = rng.random_range(-0.5..0.5);
            } else if s.name == "gem.rho" {
                // p between about 1.5 and 6.
                *v = rng.random_range(-0.7..0.7);
            }
        }
    }
    assert_eq!(p.descriptor_dim(), c);
    p
}

pub enum HeadKind {
    InfoNce,
    Triplet,
    ProbeDescriptor,
    ProbeProjection,
}

/// Random head of the given kind over `n` clouds.
pub fn random_head(rng: &mut StdRng, kind: &HeadKind, n: usize, params: &EncoderParams) -> LossHead {
    let c = params.descriptor_dim();
    match kind {
        HeadKind::InfoNce => {
            let k = rng.random_range(1..=4);
            LossHead::InfoNce {
                positives: (0..n).map(|_| unit(rng, c)).collect(),
                negatives: (0..n).map(|_| (0..k).map(|_| unit(rng, c)).collect()).collect(),
                temperature: rng.random_range(0.3..1.5),
                include_positive_in_denominator: rng.random_bool(0.5),
            }
        }
        HeadKind::Triplet => LossHead::Triplet {
            triplets: (0..n.max(3) - 2)
                .map(|i| Triplet {
                    anchor: i,
                    positive: i + 1,
                    negative: i + 2,
                })
                .collect(),
            // Distances between unit vectors are at most 2, so every hinge
            // stays well inside its active region.
            margin: rng.random_range(2.5..3.0),
        },
        HeadKind::ProbeDescriptor | HeadKind::ProbeProjection => LossHead::Probe {
            weights: (0..n).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            target: if matches!(kind, HeadKind::ProbeDescriptor) {
                Target::Descriptor
            } else {
                Target::Projection
            },
        },
    }
}

/// Largest relative error `|a - n| / max(|a|, |n|, 1e-6)` between the
/// analytic gradient and central differences with step `h`.
pub fn max_fd_rel_error(params: &EncoderParams, clouds: &[&PointCloud], head: &LossHead, analytic: &[f64], h: f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    for i in 0..params.values().len() {
        let orig = p.values()[i];
        p.values_mut()[i] = orig + h;
        let up = evaluate_loss(&p, clouds, head).unwrap();
        p.values_mut()[i] = orig - h;
        let down = evaluate_loss(&p, clouds, head).unwrap();
        p.values_mut()[i] = orig;
        let num = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// Copy of `store` with every id offset by `base`.
pub fn shift_ids(store: &DescriptorStore, base: u64) -> DescriptorStore {
    let mut s = DescriptorStore::new(store.dim()).unwrap();
    for e in store.entries() {
        s.insert_unchecked(e.id + base, e.descriptor.clone(), e.coord, e.origin).unwrap();
    }
    s
}
