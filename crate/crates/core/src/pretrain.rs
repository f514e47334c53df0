//! Unsupervised momentum-contrast pretraining.
//!
//! Positives are augmented copies of each anchor cloud. The anchor encoder is
//! trained by backpropagation on an InfoNCE loss whose negatives come from a
//! FIFO queue of past momentum-encoder embeddings. The momentum encoder only
//! ever moves as an exponential moving average of the anchor encoder.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::encoder::{backward_with_outputs, encode_batch, EncoderParams, LossHead, OptimizerState, Target};
use crate::error::{Error, Result};
use crate::pointcloud::{compose_augmentations, AugmentationConfig, PointCloud};
use crate::rng::{self, StdRng};

const UNIT_TOLERANCE: f64 = 1e-6;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negatives: Vec<Vec<f64>>,
}

/// `-log( exp(a.p / t) / sum_k exp(a.n_k / t) )`.
///
/// By default the denominator holds only the negatives, so the loss can go
/// negative. With `include_positive_in_denominator` the positive term joins
/// the sum and the loss is the usual cross-entropy, always `>= 0`.
pub fn info_nce_loss(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    temperature: f64,
    include_positive_in_denominator: bool,
) -> Result<InfoNce> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    if negatives.is_empty() {
        return Err(Error::invalid("InfoNCE needs at least one negative"));
    }
    let c = anchor.len();
    for v in std::iter::once(positive).chain(negatives.iter().map(Vec::as_slice)) {
        if v.len() != c {
            return Err(Error::DimensionMismatch { expected: c, got: v.len() });
        }
    }

    let s_pos = dot(anchor, positive) / temperature;
    let mut logits: Vec<f64> = negatives.iter().map(|n| dot(anchor, n) / temperature).collect();
    if include_positive_in_denominator {
        logits.push(s_pos);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let lse = max + z.ln();
    let loss = lse - s_pos;
    let soft: Vec<f64> = weights.iter().map(|w| w / z).collect();

    let k = negatives.len();
    let mut d_anchor: Vec<f64> = positive.iter().map(|p| -p / temperature).collect();
    for (n, w) in negatives.iter().zip(&soft[..k]) {
        for (d, x) in d_anchor.iter_mut().zip(n) {
            *d += w * x / temperature;
        }
    }
    let pos_share = if include_positive_in_denominator { soft[k] } else { 0.0 };
    if include_positive_in_denominator {
        for (d, x) in d_anchor.iter_mut().zip(positive) {
            *d += pos_share * x / temperature;
        }
    }
    let d_positive = anchor.iter().map(|a| (pos_share - 1.0) * a / temperature).collect();
    let d_negatives = soft[..k]
        .iter()
        .map(|w| anchor.iter().map(|a| w * a / temperature).collect())
        .collect();
    Ok(InfoNce {
        loss,
        d_anchor,
        d_positive,
        d_negatives,
    })
}

/// `theta_pn <- m * theta_pn + (1 - m) * theta_a` over the whole flat vector.
pub fn momentum_update(theta_pn: &mut EncoderParams, theta_a: &EncoderParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("momentum must be in [0, 1], got {m}")));
    }
    theta_pn.check_same_layout(theta_a)?;
    if m == 1.0 {
        return Ok(());
    }
    if m == 0.0 {
        theta_pn.values_mut().copy_from_slice(theta_a.values());
        return Ok(());
    }
    for (p, a) in theta_pn.values_mut().iter_mut().zip(theta_a.values()) {
        *p = m * *p + (1.0 - m) * a;
    }
    Ok(())
}

/// Fixed-capacity FIFO of unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumQueue {
    buffer: Vec<Vec<f64>>,
    capacity: usize,
    /// Slot the next push overwrites once the buffer is full.
    head: usize,
    dim: usize,
}

impl MomentumQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::invalid("queue capacity and dimension must be positive"));
        }
        Ok(Self {
            buffer: Vec::with_capacity(capacity),
            capacity,
            head: 0,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends `vectors` in order, evicting the oldest past capacity. The
    /// whole batch is rejected if any vector is not unit-norm.
    pub fn push(&mut self, vectors: &[Vec<f64>]) -> Result<()> {
        for v in vectors {
            if v.len() != self.dim {
                return Err(Error::DimensionMismatch { expected: self.dim, got: v.len() });
            }
            let norm = dot(v, v).sqrt();
            if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
                return Err(Error::invalid(format!("queue entries must be unit-norm, got norm {norm}")));
            }
        }
        for v in vectors {
            if self.buffer.len() < self.capacity {
                self.buffer.push(v.clone());
            } else {
                self.buffer[self.head] = v.clone();
                self.head = (self.head + 1) % self.capacity;
            }
        }
        Ok(())
    }

    /// Entries from oldest to newest.
    pub fn fifo(&self) -> impl Iterator<Item = &Vec<f64>> {
        let split = if self.buffer.len() < self.capacity { 0 } else { self.head };
        self.buffer[split..].iter().chain(&self.buffer[..split])
    }

    /// `k` distinct entries drawn uniformly without replacement.
    pub fn sample(&self, k: usize, rng: &mut StdRng) -> Result<Vec<Vec<f64>>> {
        if k > self.len() {
            return Err(Error::Insufficient(format!("{k} negatives requested from a queue of {}", self.len())));
        }
        Ok(rand::seq::index::sample(rng, self.len(), k)
            .into_iter()
            .map(|i| self.buffer[i].clone())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmStart {
    /// Skip the loss until the queue holds `num_negatives` entries.
    Defer,
    /// Fill the queue with momentum-encoder embeddings of augmented clouds first.
    Prefill,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub momentum: f64,
    pub queue_capacity: usize,
    pub temperature: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub num_negatives: usize,
    pub include_positive_in_denominator: bool,
    pub warm_start: WarmStart,
    pub augmentation: AugmentationConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            momentum: 0.999,
            queue_capacity: 2048,
            temperature: 1.0,
            batch_size: 64,
            learning_rate: 0.03,
            epochs: 100,
            num_negatives: 256,
            include_positive_in_denominator: false,
            warm_start: WarmStart::Defer,
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1]"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be > 0"));
        }
        if self.num_negatives == 0 || self.num_negatives > self.queue_capacity {
            return Err(Error::invalid("num_negatives must be in [1, queue_capacity]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be >= 0"));
        }
        self.augmentation.validate()
    }
}

/// Anchor encoder, momentum encoder, negative queue and optimizer.
#[derive(Debug, Clone)]
pub struct PretrainState {
    pub anchor: EncoderParams,
    pub momentum: EncoderParams,
    pub queue: MomentumQueue,
    pub optimizer: OptimizerState,
    pub epochs_done: usize,
}

impl PretrainState {
    /// Both encoders start from the same weights.
    pub fn new(init: EncoderParams, cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let queue = MomentumQueue::new(cfg.queue_capacity, init.descriptor_dim())?;
        let optimizer = OptimizerState::adam(cfg.learning_rate, &init);
        Ok(Self {
            momentum: init.clone(),
            anchor: init,
            queue,
            optimizer,
            epochs_done: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainStats {
    pub epoch: usize,
    /// Mean over batches that computed a loss; NaN when every batch deferred.
    pub mean_loss: f64,
    pub queue_size: usize,
    pub batches: usize,
    pub deferred_batches: usize,
    /// Mean `u_a . u_pos` over all anchors of the epoch.
    pub mean_positive_similarity: f64,
}

impl PretrainStats {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} mean_loss={:.6} queue_size={} batches={} deferred={} pos_sim={:.6}",
            self.epoch, self.mean_loss, self.queue_size, self.batches, self.deferred_batches, self.mean_positive_similarity
        )
    }
}

fn augment_all(clouds: &[&PointCloud], cfg: &AugmentationConfig, seed: u64) -> Result<Vec<PointCloud>> {
    clouds
        .par_iter()
        .enumerate()
        .map(|(i, pc)| compose_augmentations(pc, cfg, &mut rng::stream(seed, i as u64)))
        .collect()
}

/// Fills the queue with momentum-encoder embeddings of augmented copies of
/// randomly chosen clouds.
pub fn prefill_queue(state: &mut PretrainState, clouds: &[&PointCloud], cfg: &PretrainConfig, rng: &mut StdRng) -> Result<()> {
    let take = cfg.queue_capacity.min(clouds.len());
    let picks: Vec<&PointCloud> = rand::seq::index::sample(rng, clouds.len(), take)
        .into_iter()
        .map(|i| clouds[i])
        .collect();
    let augmented = augment_all(&picks, &cfg.augmentation, rng.random())?;
    let refs: Vec<&PointCloud> = augmented.iter().collect();
    let u = encode_batch(&state.momentum, &refs, Target::Projection)?;
    state.queue.push(&u)
}

/// One pass over `clouds` in shuffled batches.
///
/// Per batch: augment each anchor into its positive; embed anchors with the
/// anchor encoder and positives with the momentum encoder; once the queue
/// holds enough entries draw negatives per anchor, take the InfoNCE gradient
/// through the anchor encoder only and step its optimizer; then move the
/// momentum encoder and enqueue the positives.
pub fn pretrain_epoch(
    state: &mut PretrainState,
    clouds: &[&PointCloud],
    cfg: &PretrainConfig,
    rng: &mut StdRng,
) -> Result<PretrainStats> {
    cfg.validate()?;
    if clouds.is_empty() {
        return Err(Error::Empty("no clouds to pretrain on".into()));
    }
    if state.epochs_done == 0 && state.queue.is_empty() && cfg.warm_start == WarmStart::Prefill {
        prefill_queue(state, clouds, cfg, rng)?;
    }
    state.optimizer.learning_rate = cfg.learning_rate;

    let mut order: Vec<usize> = (0..clouds.len()).collect();
    order.shuffle(rng);

    let mut loss_sum = 0.0;
    let mut computed = 0usize;
    let mut deferred = 0usize;
    let mut sim_sum = 0.0;
    let mut batches = 0usize;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        batches += 1;
        let anchors: Vec<&PointCloud> = chunk.iter().map(|&i| clouds[i]).collect();
        let positives = augment_all(&anchors, &cfg.augmentation, rng.random())?;
        let pos_refs: Vec<&PointCloud> = positives.iter().collect();
        let u_pos = encode_batch(&state.momentum, &pos_refs, Target::Projection)?;

        let u_anchor = if state.queue.len() >= cfg.num_negatives {
            let negatives = (0..anchors.len())
                .map(|_| state.queue.sample(cfg.num_negatives, rng))
                .collect::<Result<Vec<_>>>()?;
            let head = LossHead::InfoNce {
                positives: u_pos.clone(),
                negatives,
                temperature: cfg.temperature,
                include_positive_in_denominator: cfg.include_positive_in_denominator,
            };
            let (loss, grads, outputs) = backward_with_outputs(&state.anchor, &anchors, &head).map_err(|e| match e {
                Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
                    batch: b,
                    detail: format!("pretrain epoch {}: {detail}", state.epochs_done + 1),
                },
                other => other,
            })?;
            state.optimizer.apply(&mut state.anchor, &grads)?;
            loss_sum += loss;
            computed += 1;
            outputs
        } else {
            deferred += 1;
            encode_batch(&state.anchor, &anchors, Target::Projection)?
        };
        sim_sum += u_anchor.iter().zip(&u_pos).map(|(a, p)| dot(a, p)).sum::<f64>();

        momentum_update(&mut state.momentum, &state.anchor, cfg.momentum)?;
        state.queue.push(&u_pos)?;
    }
    state.epochs_done += 1;
    Ok(PretrainStats {
        epoch: state.epochs_done,
        mean_loss: if computed > 0 { loss_sum / computed as f64 } else { f64::NAN },
        queue_size: state.queue.len(),
        batches,
        deferred_batches: deferred,
        mean_positive_similarity: sim_sum / clouds.len() as f64,
    })
}
