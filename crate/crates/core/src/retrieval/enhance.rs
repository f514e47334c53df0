use rayon::prelude::*;

use super::knn::knn;
use super::store::DescriptorStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnhanceMode {
    /// Neighbours come from the training descriptors only.
    Inductive,
    /// Neighbours come from training, database and query descriptors.
    Transductive,
}

impl std::str::FromStr for EnhanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inductive" => Ok(EnhanceMode::Inductive),
            "transductive" => Ok(EnhanceMode::Transductive),
            other => Err(Error::invalid(format!("mode must be inductive or transductive, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for EnhanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnhanceMode::Inductive => "inductive",
            EnhanceMode::Transductive => "transductive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceConfig {
    pub lambda: f64,
    pub neighbors_k: usize,
    pub mode: EnhanceMode,
    pub enhance_queries: bool,
    pub enhance_database: bool,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            neighbors_k: 5,
            mode: EnhanceMode::Inductive,
            enhance_queries: true,
            enhance_database: true,
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.neighbors_k == 0 {
            return Err(Error::invalid("K must be >= 1"));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda must be in [0,1]"));
    }
    Ok(())
}

/// Softmax over negated distances, shifted by the largest exponent.
pub fn enhancement_weights(distances: &[f64]) -> Vec<f64> {
    let top = distances.iter().map(|d| -d).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = distances.iter().map(|d| (-d - top).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `lambda * v + (1 - lambda) * sum_k w_k n_k` with `w` the softmax of the
/// negative Euclidean distances from `v` to its neighbours. Not renormalized.
pub fn enhance_descriptor(v: &[f64], neighbors: &[&[f64]], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if neighbors.is_empty() {
        return Err(Error::invalid("enhancement needs K >= 1 neighbours"));
    }
    for n in neighbors {
        if n.len() != v.len() {
            return Err(Error::DimensionMismatch {
                expected: v.len(),
                got: n.len(),
            });
        }
    }
    if lambda == 1.0 {
        return Ok(v.to_vec());
    }
    let dist: Vec<f64> = neighbors
        .iter()
        .map(|n| v.iter().zip(*n).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    let w = enhancement_weights(&dist);
    let mut blend = vec![0.0; v.len()];
    for (wk, n) in w.iter().zip(neighbors) {
        for (b, x) in blend.iter_mut().zip(*n) {
            *b += wk * x;
        }
    }
    Ok(v.iter().zip(&blend).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect())
}

fn enhance_store(store: &DescriptorStore, reference: &DescriptorStore, cfg: &EnhanceConfig) -> Result<DescriptorStore> {
    let enhanced: Vec<Vec<f64>> = store
        .entries()
        .par_iter()
        .map(|e| {
            let nn = knn(reference, &e.descriptor, cfg.neighbors_k, Some(e.id))?;
            let vecs: Vec<&[f64]> = nn
                .iter()
                .map(|n| reference.get(n.id).expect("neighbour from the reference store").descriptor.as_slice())
                .collect();
            enhance_descriptor(&e.descriptor, &vecs, cfg.lambda)
        })
        .collect::<Result<_>>()?;
    let mut it = enhanced.into_iter();
    Ok(store.map_descriptors(|_| it.next().unwrap()))
}

/// Enhances query and database descriptors in one pass over the original
/// vectors. Each vector is excluded from its own neighbour list by id.
pub fn enhance_all(
    queries: &DescriptorStore,
    database: &DescriptorStore,
    train: &DescriptorStore,
    cfg: &EnhanceConfig,
) -> Result<(DescriptorStore, DescriptorStore)> {
    cfg.validate()?;
    for s in [database, train] {
        if s.dim() != queries.dim() {
            return Err(Error::DimensionMismatch {
                expected: queries.dim(),
                got: s.dim(),
            });
        }
    }
    let union;
    let reference = match cfg.mode {
        EnhanceMode::Inductive => train,
        EnhanceMode::Transductive => {
            let mut r = DescriptorStore::new(train.dim())?;
            for e in train.entries().iter().chain(database.entries()).chain(queries.entries()) {
                r.insert_unchecked(e.id, e.descriptor.clone(), e.coord, e.origin)?;
            }
            union = r;
            &union
        }
    };
    if reference.len() < cfg.neighbors_k + 1 {
        return Err(Error::Insufficient(format!(
            "reference set of {} descriptors cannot supply K = {} neighbours",
            reference.len(),
            cfg.neighbors_k
        )));
    }
    let q = if cfg.enhance_queries { enhance_store(queries, reference, cfg)? } else { queries.clone() };
    let d = if cfg.enhance_database { enhance_store(database, reference, cfg)? } else { database.clone() };
    Ok((q, d))
}
