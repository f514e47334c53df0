//! Scalar losses over encoder outputs and their reverse pass.

use rayon::prelude::*;

use super::network::{backprop, encode_batch, forward_traced};
use super::{EncoderParams, Gradients};
use crate::error::{Error, Result};
use crate::finetune::triplet_loss;
use crate::pointcloud::PointCloud;
use crate::pretrain::info_nce_loss;

/// Which encoder output a loss consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// The L2-normalized global descriptor `v`.
    Descriptor,
    /// The projection-head embedding `u`.
    Projection,
}

/// Indices into the batch of clouds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone)]
pub enum LossHead {
    /// A loss that ignores the network.
    Constant(f64),
    /// `sum_i <weights_i, output_i>`.
    Probe { weights: Vec<Vec<f64>>, target: Target },
    /// Mean InfoNCE over anchors; cloud `i` is anchor `i`, its positive and
    /// negatives are fixed vectors that receive no gradient.
    InfoNce {
        positives: Vec<Vec<f64>>,
        negatives: Vec<Vec<Vec<f64>>>,
        temperature: f64,
        include_positive_in_denominator: bool,
    },
    /// Mean triplet hinge over the active (nonzero) triplets.
    Triplet { triplets: Vec<Triplet>, margin: f64 },
}

impl LossHead {
    pub fn target(&self) -> Target {
        match self {
            LossHead::Constant(_) | LossHead::Triplet { .. } => Target::Descriptor,
            LossHead::Probe { target, .. } => *target,
            LossHead::InfoNce { .. } => Target::Projection,
        }
    }

    fn check_batch(&self, n: usize) -> Result<()> {
        let count = match self {
            LossHead::Constant(_) => return Ok(()),
            LossHead::Probe { weights, .. } => weights.len(),
            LossHead::InfoNce { positives, negatives, .. } => {
                if positives.len() != negatives.len() {
                    return Err(Error::DimensionMismatch {
                        expected: positives.len(),
                        got: negatives.len(),
                    });
                }
                positives.len()
            }
            LossHead::Triplet { triplets, .. } => {
                if triplets.iter().any(|t| t.anchor.max(t.positive).max(t.negative) >= n) {
                    return Err(Error::invalid("triplet index out of range"));
                }
                return Ok(());
            }
        };
        if count != n {
            return Err(Error::DimensionMismatch { expected: n, got: count });
        }
        Ok(())
    }

    /// Loss contribution of sample `i` alone and its output gradient, for
    /// heads where samples do not interact.
    fn sample(&self, i: usize, n: usize, y: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        match self {
            LossHead::Probe { weights, .. } => {
                let w = &weights[i];
                if w.len() != y.len() {
                    return Err(Error::DimensionMismatch { expected: y.len(), got: w.len() });
                }
                Ok(Some((w.iter().zip(y).map(|(a, b)| a * b).sum(), w.clone())))
            }
            LossHead::InfoNce {
                positives,
                negatives,
                temperature,
                include_positive_in_denominator,
            } => {
                let r = info_nce_loss(y, &positives[i], &negatives[i], *temperature, *include_positive_in_denominator)?;
                let scale = 1.0 / n as f64;
                Ok(Some((r.loss * scale, r.d_anchor.iter().map(|g| g * scale).collect())))
            }
            _ => Ok(None),
        }
    }

    /// Total loss and per-output gradients given all outputs at once.
    pub fn loss_and_output_grads(&self, outputs: &[Vec<f64>]) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        self.check_batch(outputs.len())?;
        let n = outputs.len();
        match self {
            LossHead::Constant(c) => Ok((*c, vec![None; n])),
            LossHead::Triplet { triplets, margin } => {
                let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
                let mut total = 0.0;
                let mut active = 0usize;
                let mut parts = Vec::with_capacity(triplets.len());
                for t in triplets {
                    let r = triplet_loss(&outputs[t.anchor], &outputs[t.positive], &outputs[t.negative], *margin)?;
                    if r.loss > 0.0 {
                        active += 1;
                        total += r.loss;
                    }
                    parts.push(r);
                }
                if active == 0 {
                    return Ok((0.0, grads));
                }
                let scale = 1.0 / active as f64;
                for (t, r) in triplets.iter().zip(&parts) {
                    if r.loss <= 0.0 {
                        continue;
                    }
                    for (idx, g) in [(t.anchor, &r.d_anchor), (t.positive, &r.d_positive), (t.negative, &r.d_negative)] {
                        let slot = grads[idx].get_or_insert_with(|| vec![0.0; g.len()]);
                        for (s, v) in slot.iter_mut().zip(g) {
                            *s += v * scale;
                        }
                    }
                }
                Ok((total * scale, grads))
            }
            _ => {
                let mut total = 0.0;
                let mut grads = Vec::with_capacity(n);
                for (i, y) in outputs.iter().enumerate() {
                    let (l, g) = self.sample(i, n, y)?.expect("separable head");
                    total += l;
                    grads.push(Some(g));
                }
                Ok((total, grads))
            }
        }
    }
}

/// Forward-only loss value.
pub fn evaluate_loss(params: &EncoderParams, clouds: &[&PointCloud], head: &LossHead) -> Result<f64> {
    if let LossHead::Constant(c) = head {
        return Ok(*c);
    }
    let outputs = encode_batch(params, clouds, head.target())?;
    Ok(head.loss_and_output_grads(&outputs)?.0)
}

/// Loss and its analytic gradient w.r.t. every parameter, including the GeM
/// exponent and the projection head when the head consumes projections.
pub fn backward(params: &EncoderParams, clouds: &[&PointCloud], head: &LossHead) -> Result<(f64, Gradients)> {
    if let LossHead::Constant(c) = head {
        head.check_batch(clouds.len())?;
        return Ok((*c, vec![0.0; params.layout().len()]));
    }
    let (loss, grads, _) = backward_with_outputs(params, clouds, head)?;
    Ok((loss, grads))
}

/// [`backward`] that also hands back the outputs the loss consumed.
pub fn backward_with_outputs(
    params: &EncoderParams,
    clouds: &[&PointCloud],
    head: &LossHead,
) -> Result<(f64, Gradients, Vec<Vec<f64>>)> {
    head.check_batch(clouds.len())?;
    let n = clouds.len();
    match head {
        LossHead::Constant(_) | LossHead::Triplet { .. } => {
            let outputs = encode_batch(params, clouds, head.target())?;
            let (loss, grads) = backward_given_outputs(params, clouds, &outputs, head)?;
            Ok((loss, grads, outputs))
        }
        _ => {
            let (loss, grads, outputs) = ordered_reduce(params, n, |i, g| {
                let trace = forward_traced(params, clouds[i], head.target())?;
                let (l, d) = head.sample(i, n, trace.output())?.expect("separable head");
                backprop(params, &trace, &d, g);
                Ok((l, trace.output().to_vec()))
            })?;
            finite_loss(loss)?;
            Ok((loss, grads, outputs))
        }
    }
}

/// Like [`backward`], reusing outputs already computed with `params`.
pub fn backward_given_outputs(
    params: &EncoderParams,
    clouds: &[&PointCloud],
    outputs: &[Vec<f64>],
    head: &LossHead,
) -> Result<(f64, Gradients)> {
    if outputs.len() != clouds.len() {
        return Err(Error::DimensionMismatch {
            expected: clouds.len(),
            got: outputs.len(),
        });
    }
    let (loss, d_outputs) = head.loss_and_output_grads(outputs)?;
    finite_loss(loss)?;
    let (_, grads, _) = ordered_reduce(params, clouds.len(), |i, g| {
        if let Some(d) = &d_outputs[i] {
            let trace = forward_traced(params, clouds[i], head.target())?;
            backprop(params, &trace, d, g);
        }
        Ok((0.0, Vec::new()))
    })?;
    Ok((loss, grads))
}

fn finite_loss(loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            batch: 0,
            detail: format!("loss evaluated to {loss}"),
        })
    }
}

/// Runs `f` for every sample, each into its own zeroed gradient buffer, in
/// parallel chunks; buffers and losses are summed in sample order so the
/// result does not depend on the thread count.
fn ordered_reduce<F>(params: &EncoderParams, n: usize, f: F) -> Result<(f64, Gradients, Vec<Vec<f64>>)>
where
    F: Fn(usize, &mut [f64]) -> Result<(f64, Vec<f64>)> + Sync,
{
    let len = params.layout().len();
    let mut total = vec![0.0; len];
    let mut loss = 0.0;
    let mut outputs = Vec::with_capacity(n);
    let chunk = rayon::current_num_threads().max(1);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let parts: Vec<Result<(f64, Vec<f64>, Vec<f64>)>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let mut g = vec![0.0; len];
                let (l, y) = f(i, &mut g)?;
                Ok((l, g, y))
            })
            .collect();
        for part in parts {
            let (l, g, y) = part?;
            loss += l;
            outputs.push(y);
            for (t, v) in total.iter_mut().zip(&g) {
                *t += v;
            }
        }
        start = end;
    }
    Ok((loss, total, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;

    #[test]
    fn constant_head_has_zero_gradient() {
        let params = init_params(0, &[3, 4, 4], 4).unwrap();
        let pc = PointCloud::new(vec![[0.1, 0.2, 0.3], [0.4, -0.5, 0.6]]).unwrap();
        let (l, g) = backward(&params, &[&pc], &LossHead::Constant(2.5)).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(g.len(), params.layout().len());
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batch_size_mismatch_rejected() {
        let params = init_params(0, &[3, 4, 4], 4).unwrap();
        let pc = PointCloud::new(vec![[0.1, 0.2, 0.3]]).unwrap();
        let head = LossHead::Probe {
            weights: vec![vec![1.0; 4]; 2],
            target: Target::Descriptor,
        };
        assert!(backward(&params, &[&pc], &head).is_err());
        let head = LossHead::Triplet {
            triplets: vec![Triplet { anchor: 0, positive: 1, negative: 2 }],
            margin: 0.2,
        };
        assert!(backward(&params, &[&pc], &head).is_err());
    }

    #[test]
    fn direction_probe_has_zero_gradient() {
        // L = <v0, v> with v0 the current descriptor: at the current point the
        // gradient of a unit vector along itself vanishes.
        let params = init_params(5, &[3, 6, 6], 6).unwrap();
        let pc = PointCloud::new(vec![[0.1, 0.2, 0.3], [0.9, -0.5, 0.1], [-0.3, 0.3, 0.8]]).unwrap();
        let v0 = crate::encoder::forward(&params, &pc).unwrap().descriptor;
        let head = LossHead::Probe {
            weights: vec![v0],
            target: Target::Descriptor,
        };
        let (l, g) = backward(&params, &[&pc], &head).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        let max = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max < 1e-12, "{max}");
    }
}
