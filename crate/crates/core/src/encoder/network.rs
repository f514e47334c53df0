//! Forward and reverse passes of the encoder.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rayon::prelude::*;

use super::gem::{gem_pool_backward, gem_unchecked};
use super::loss::Target;
use super::EncoderParams;
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

/// Squareplus, `(z + sqrt(z^2 + 1)) / 2`: smooth, strictly positive and
/// asymptotically ReLU. Strict positivity keeps fractional GeM powers real.
#[inline]
pub fn activation(z: f64) -> f64 {
    0.5 * (z + (z * z + 1.0).sqrt())
}

#[inline]
fn activation_grad(z: f64) -> f64 {
    0.5 * (1.0 + z / (z * z + 1.0).sqrt())
}

/// Returns `x / |x|`. The zero vector maps to itself.
pub fn l2_normalize(x: &[f64]) -> Vec<f64> {
    normalize_with_norm(x).0
}

fn normalize_with_norm(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (x.to_vec(), 0.0);
    }
    (x.iter().map(|v| v / norm).collect(), norm)
}

/// Gradient w.r.t. `x` of a loss through `y = x / |x|`.
fn normalize_backward(y: &[f64], norm: f64, dy: &[f64]) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; y.len()];
    }
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, di)| (di - yi * dot) / norm).collect()
}

fn matrix<'a>(params: &'a EncoderParams, name: &str) -> ArrayView2<'a, f64> {
    let s = params.layout().segment(name).unwrap();
    ArrayView2::from_shape((s.rows, s.cols), &params.values()[s.range()]).unwrap()
}

fn vector<'a>(params: &'a EncoderParams, name: &str) -> ArrayView1<'a, f64> {
    ArrayView1::from(params.segment(name))
}

fn grad_matrix<'a>(params: &EncoderParams, grads: &'a mut [f64], name: &str) -> ArrayViewMut2<'a, f64> {
    let s = params.layout().segment(name).unwrap();
    ArrayViewMut2::from_shape((s.rows, s.cols), &mut grads[s.range()]).unwrap()
}

fn grad_vector<'a>(params: &EncoderParams, grads: &'a mut [f64], name: &str) -> &'a mut [f64] {
    let s = params.layout().segment(name).unwrap();
    &mut grads[s.range()]
}

fn points_matrix(pc: &PointCloud) -> Array2<f64> {
    let pts = pc.points();
    Array2::from_shape_fn((pts.len(), 3), |(i, k)| pts[i][k])
}

/// Descriptor and per-point features of one cloud.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub descriptor: Vec<f64>,
    /// `N x C`, strictly positive.
    pub features: Array2<f64>,
}

struct MlpCache {
    /// Input of every layer, starting with the raw points.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    features: Array2<f64>,
}

fn mlp_forward(params: &EncoderParams, pc: &PointCloud, keep: bool) -> MlpCache {
    let mut a = points_matrix(pc);
    let mut inputs = Vec::new();
    let mut pre = Vec::new();
    for l in 0..params.num_mlp_layers() {
        let w = matrix(params, &format!("mlp.{l}.weight"));
        let b = vector(params, &format!("mlp.{l}.bias"));
        let mut z = a.dot(&w.t());
        z += &b;
        let next = z.mapv(activation);
        if keep {
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        } else {
            a = next;
        }
    }
    MlpCache {
        inputs,
        pre,
        features: a,
    }
}

struct ProjCache {
    z1: Array1<f64>,
    a1: Array1<f64>,
    u: Vec<f64>,
    norm: f64,
}

fn projection_forward(params: &EncoderParams, v: &[f64]) -> ProjCache {
    let v = ArrayView1::from(v);
    let z1 = matrix(params, "proj.0.weight").dot(&v) + vector(params, "proj.0.bias");
    let a1 = z1.mapv(activation);
    let z2 = matrix(params, "proj.1.weight").dot(&a1) + vector(params, "proj.1.bias");
    let (u, norm) = normalize_with_norm(z2.as_slice().unwrap());
    ProjCache { z1, a1, u, norm }
}

/// Encodes one cloud: shared MLP, GeM pooling, L2 normalization.
pub fn forward(params: &EncoderParams, pc: &PointCloud) -> Result<Encoded> {
    let mlp = mlp_forward(params, pc, false);
    let pooled = gem_unchecked(mlp.features.view(), params.gem_p());
    let (descriptor, _) = normalize_with_norm(&pooled);
    check_finite(&descriptor)?;
    Ok(Encoded {
        descriptor,
        features: mlp.features,
    })
}

/// Maps a descriptor to the unit-norm contrastive embedding.
pub fn projection_head(params: &EncoderParams, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != params.descriptor_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.descriptor_dim(),
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("projection head input".into()));
    }
    Ok(projection_forward(params, v).u)
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("encoder output".into()))
    }
}

/// Descriptor (or projection, per `target`) of one cloud.
pub fn encode(params: &EncoderParams, pc: &PointCloud, target: Target) -> Result<Vec<f64>> {
    let v = forward(params, pc)?.descriptor;
    match target {
        Target::Descriptor => Ok(v),
        Target::Projection => projection_head(params, &v),
    }
}

/// [`encode`] over many clouds, in parallel, results in input order.
pub fn encode_batch(params: &EncoderParams, clouds: &[&PointCloud], target: Target) -> Result<Vec<Vec<f64>>> {
    clouds.par_iter().map(|pc| encode(params, pc, target)).collect()
}

/// Everything the reverse pass needs for one cloud.
pub(crate) struct Trace {
    mlp: MlpCache,
    pooled: Vec<f64>,
    norm: f64,
    descriptor: Vec<f64>,
    proj: Option<ProjCache>,
}

impl Trace {
    pub(crate) fn output(&self) -> &[f64] {
        match &self.proj {
            Some(p) => &p.u,
            None => &self.descriptor,
        }
    }
}

pub(crate) fn forward_traced(params: &EncoderParams, pc: &PointCloud, target: Target) -> Result<Trace> {
    let mlp = mlp_forward(params, pc, true);
    let pooled = gem_unchecked(mlp.features.view(), params.gem_p());
    let (descriptor, norm) = normalize_with_norm(&pooled);
    check_finite(&descriptor)?;
    let proj = match target {
        Target::Descriptor => None,
        Target::Projection => Some(projection_forward(params, &descriptor)),
    };
    Ok(Trace {
        mlp,
        pooled,
        norm,
        descriptor,
        proj,
    })
}

/// Adds `d loss / d params` into `grads`, given `d loss / d output` of the trace.
pub(crate) fn backprop(params: &EncoderParams, trace: &Trace, d_output: &[f64], grads: &mut [f64]) {
    let d_v = match &trace.proj {
        None => d_output.to_vec(),
        Some(p) => {
            let d_z2 = Array1::from(normalize_backward(&p.u, p.norm, d_output));
            {
                let mut gw = grad_matrix(params, grads, "proj.1.weight");
                gw += &outer(d_z2.view(), p.a1.view());
            }
            add_into(grad_vector(params, grads, "proj.1.bias"), d_z2.as_slice().unwrap());
            let d_a1 = matrix(params, "proj.1.weight").t().dot(&d_z2);
            let d_z1 = &d_a1 * &p.z1.mapv(activation_grad);
            {
                let mut gw = grad_matrix(params, grads, "proj.0.weight");
                gw += &outer(d_z1.view(), ArrayView1::from(&trace.descriptor[..]));
            }
            add_into(grad_vector(params, grads, "proj.0.bias"), d_z1.as_slice().unwrap());
            matrix(params, "proj.0.weight").t().dot(&d_z1).to_vec()
        }
    };

    let d_pooled = normalize_backward(&trace.descriptor, trace.norm, &d_v);
    let p = params.gem_p();
    let (mut d_a, d_p) = gem_pool_backward(trace.mlp.features.view(), p, &trace.pooled, &d_pooled);
    // p = base * exp(rho)
    grad_vector(params, grads, "gem.rho")[0] += d_p * p;

    for l in (0..params.num_mlp_layers()).rev() {
        let z = &trace.mlp.pre[l];
        d_a.zip_mut_with(z, |d, &zv| *d *= activation_grad(zv));
        let d_z = d_a;
        {
            let mut gw = grad_matrix(params, grads, &format!("mlp.{l}.weight"));
            general_mat_mul(1.0, &d_z.t(), &trace.mlp.inputs[l], 1.0, &mut gw);
        }
        add_into(
            grad_vector(params, grads, &format!("mlp.{l}.bias")),
            d_z.sum_axis(Axis(0)).as_slice().unwrap(),
        );
        if l == 0 {
            break;
        }
        d_a = d_z.dot(&matrix(params, &format!("mlp.{l}.weight")));
    }
}

fn outer(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, Architecture, EncoderParams};
    use crate::rng::seeded;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn random_cloud(rng: &mut crate::rng::StdRng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn descriptor_is_unit_and_order_free() {
        let params = init_params(1, &[3, 16, 32], 32).unwrap();
        let mut rng = seeded(2);
        for _ in 0..20 {
            let n = rng.random_range(1..200);
            let pc = random_cloud(&mut rng, n);
            let v = forward(&params, &pc).unwrap().descriptor;
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let w = forward(&params, &pc.permuted(&order).unwrap()).unwrap().descriptor;
            let dev = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(dev < 1e-12, "{dev}");
        }
    }

    #[test]
    fn singleton_cloud_pools_to_its_features() {
        let params = init_params(3, &[3, 8, 8], 8).unwrap();
        let pc = PointCloud::new(vec![[0.2, -0.4, 0.9]]).unwrap();
        let enc = forward(&params, &pc).unwrap();
        let h = enc.features.row(0).to_vec();
        let expect = l2_normalize(&h);
        for (a, b) in enc.descriptor.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(h.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn projection_head_cases() {
        let arch = Architecture::new(vec![3, 4, 5], 6).unwrap();
        let mut params = EncoderParams::zeros(arch).unwrap();
        let b = [1.0, -2.0, 0.5, 0.0, 3.0];
        params.segment_mut("proj.1.bias").copy_from_slice(&b);
        let v = l2_normalize(&[0.3, 0.1, 0.7, 0.2, 0.4]);
        let u = projection_head(&params, &v).unwrap();
        let expect = l2_normalize(&b);
        for (a, e) in u.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-15);
        }

        let params = init_params(4, &[3, 4, 5], 5).unwrap();
        let u1 = projection_head(&params, &v).unwrap();
        let u2 = projection_head(&params, &v).unwrap();
        assert_eq!(u1, u2);
        assert!((u1.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        assert!(projection_head(&params, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn normalization_gradient_is_tangent() {
        // A loss that only sees the output direction gets no gradient along it.
        let x = [0.3, -1.2, 2.0, 0.5];
        let (y, norm) = normalize_with_norm(&x);
        let dx = normalize_backward(&y, norm, &y);
        assert!(dx.iter().all(|d| d.abs() < 1e-15));
        let dx = normalize_backward(&y, norm, &[0.1, 0.7, -0.3, 0.2]);
        let radial: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!(radial.abs() < 1e-15);
    }
}
