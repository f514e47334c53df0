//! Supervised finetuning with a triplet margin loss and batch-hard mining.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::dataset::{sample_training_tuple, DatasetIndex};
use crate::encoder::{backward_given_outputs, encode_batch, EncoderParams, LossHead, OptimizerState, Target, Triplet};
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::rng::StdRng;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletTerm {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negative: Vec<f64>,
}

/// `max(0, |a - p| - |a - n| + margin)` with Euclidean distances.
///
/// Gradients are zero whenever the hinge is not strictly positive, and a
/// zero-length difference contributes a zero subgradient.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<TripletTerm> {
    let c = anchor.len();
    for v in [positive, negative] {
        if v.len() != c {
            return Err(Error::DimensionMismatch { expected: c, got: v.len() });
        }
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::invalid(format!("margin must be >= 0, got {margin}")));
    }
    let d_ap = distance(anchor, positive);
    let d_an = distance(anchor, negative);
    let loss = (d_ap - d_an + margin).max(0.0);
    if loss <= 0.0 {
        let zero = vec![0.0; c];
        return Ok(TripletTerm {
            loss: 0.0,
            d_anchor: zero.clone(),
            d_positive: zero.clone(),
            d_negative: zero,
        });
    }
    let unit = |x: &[f64], y: &[f64], d: f64| -> Vec<f64> {
        if d == 0.0 {
            vec![0.0; c]
        } else {
            x.iter().zip(y).map(|(a, b)| (a - b) / d).collect()
        }
    };
    let e_ap = unit(anchor, positive, d_ap);
    let e_an = unit(anchor, negative, d_an);
    Ok(TripletTerm {
        loss,
        d_anchor: e_ap.iter().zip(&e_an).map(|(p, n)| p - n).collect(),
        d_positive: e_ap.iter().map(|v| -v).collect(),
        d_negative: e_an,
    })
}

/// Index of the farthest positive and of the nearest negative, ties going to
/// the lowest index.
pub fn batch_hard_mining(anchor: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>]) -> Result<(usize, usize)> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Empty("mining needs at least one positive and one negative".into()));
    }
    let mut best_p = (0, f64::NEG_INFINITY);
    for (i, p) in positives.iter().enumerate() {
        let d = distance(anchor, p);
        if d > best_p.1 {
            best_p = (i, d);
        }
    }
    let mut best_n = (0, f64::INFINITY);
    for (i, n) in negatives.iter().enumerate() {
        let d = distance(anchor, n);
        if d < best_n.1 {
            best_n = (i, d);
        }
    }
    Ok((best_p.0, best_n.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub margin: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epochs after this one run at `learning_rate / lr_decay_factor`.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub positives_per_anchor: usize,
    pub negatives_per_anchor: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            batch_size: 32,
            learning_rate: 1e-3,
            epochs: 40,
            lr_decay_epoch: 30,
            lr_decay_factor: 10.0,
            positives_per_anchor: 2,
            negatives_per_anchor: 8,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::invalid("margin must be >= 0"));
        }
        if self.batch_size == 0 || self.positives_per_anchor == 0 || self.negatives_per_anchor == 0 {
            return Err(Error::invalid("batch size and candidate counts must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be >= 0"));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::invalid("lr_decay_factor must be > 0"));
        }
        Ok(())
    }

    /// Step size for 1-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_decay_epoch {
            self.learning_rate
        } else {
            self.learning_rate / self.lr_decay_factor
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction of mined triplets with a strictly positive hinge.
    pub active_fraction: f64,
    pub learning_rate: f64,
    pub batches: usize,
    pub triplets: usize,
}

impl FinetuneStats {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} mean_loss={:.6} active_fraction={:.6} lr={} batches={} triplets={}",
            self.epoch, self.mean_loss, self.active_fraction, self.learning_rate, self.batches, self.triplets
        )
    }
}

/// One epoch over the anchors of `index` (records with at least one
/// positive) in shuffled batches.
///
/// Per batch every candidate cloud is embedded once with the current
/// weights, each anchor keeps its farthest positive and nearest negative, and
/// the mean hinge over active triplets is backpropagated.
pub fn finetune_epoch(
    params: &mut EncoderParams,
    optimizer: &mut OptimizerState,
    index: &DatasetIndex,
    cfg: &FinetuneConfig,
    epoch: usize,
    rng: &mut StdRng,
) -> Result<FinetuneStats> {
    cfg.validate()?;
    let mut anchors = index.anchor_ids();
    if anchors.is_empty() {
        return Err(Error::Empty("no record has a positive within the threshold".into()));
    }
    anchors.shuffle(rng);
    let lr = cfg.learning_rate_at(epoch);
    optimizer.learning_rate = lr;

    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    let mut total = 0usize;
    let mut active = 0usize;
    for (b, chunk) in anchors.chunks(cfg.batch_size).enumerate() {
        let mut tuples = Vec::with_capacity(chunk.len());
        for &a in chunk {
            if let Some(t) = sample_training_tuple(index, a, cfg.positives_per_anchor, cfg.negatives_per_anchor, rng)? {
                tuples.push(t);
            }
        }
        if tuples.is_empty() {
            continue;
        }
        let mut slots: BTreeMap<u64, usize> = BTreeMap::new();
        for t in &tuples {
            for &id in std::iter::once(&t.anchor).chain(&t.positives).chain(&t.negatives) {
                slots.insert(id, 0);
            }
        }
        let mut clouds: Vec<&PointCloud> = Vec::with_capacity(slots.len());
        for (k, (id, slot)) in slots.iter_mut().enumerate() {
            *slot = k;
            clouds.push(&index.record(*id)?.cloud);
        }
        let outputs = encode_batch(params, &clouds, Target::Descriptor)?;

        let mut triplets = Vec::with_capacity(tuples.len());
        for t in &tuples {
            let a = slots[&t.anchor];
            let pos: Vec<Vec<f64>> = t.positives.iter().map(|id| outputs[slots[id]].clone()).collect();
            let neg: Vec<Vec<f64>> = t.negatives.iter().map(|id| outputs[slots[id]].clone()).collect();
            let (p, n) = batch_hard_mining(&outputs[a], &pos, &neg)?;
            let trip = Triplet {
                anchor: a,
                positive: slots[&t.positives[p]],
                negative: slots[&t.negatives[n]],
            };
            if triplet_loss(&outputs[trip.anchor], &outputs[trip.positive], &outputs[trip.negative], cfg.margin)?.loss > 0.0 {
                active += 1;
            }
            triplets.push(trip);
        }
        total += triplets.len();
        let head = LossHead::Triplet {
            triplets,
            margin: cfg.margin,
        };
        let (loss, grads) = backward_given_outputs(params, &clouds, &outputs, &head).map_err(|e| match e {
            Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
                batch: b,
                detail: format!("finetune epoch {epoch}: {detail}"),
            },
            other => other,
        })?;
        optimizer.apply(params, &grads)?;
        loss_sum += loss;
        batches += 1;
    }
    Ok(FinetuneStats {
        epoch,
        mean_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
        active_fraction: if total > 0 { active as f64 / total as f64 } else { 0.0 },
        learning_rate: lr,
        batches,
        triplets: total,
    })
}
