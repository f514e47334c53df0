//! Random jitter, random point removal, random block removal and random shear.
//!
//! All functions are pure given their RNG: the same input, magnitudes and RNG
//! state always produce the same output.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::PointCloud;
use crate::error::{Error, Result};
use crate::rng::StdRng;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    /// Fraction of points dropped. When `point_removal_random` is set this is
    /// the upper bound of a per-call uniform draw.
    pub point_removal_fraction: f64,
    pub point_removal_random: bool,
    pub block_extent: f64,
    pub shear_max: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            point_removal_fraction: 0.3,
            point_removal_random: true,
            block_extent: 0.4,
            shear_max: 0.2,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// All stages disabled.
    pub fn identity() -> Self {
        Self {
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
            point_removal_fraction: 0.0,
            point_removal_random: false,
            block_extent: 0.0,
            shear_max: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_nonneg("jitter_sigma", self.jitter_sigma)?;
        check_nonneg("jitter_clip", self.jitter_clip)?;
        check_nonneg("block_extent", self.block_extent)?;
        check_nonneg("shear_max", self.shear_max)?;
        check_fraction(self.point_removal_fraction)
    }
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")))
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if (0.0..1.0).contains(&f) {
        Ok(())
    } else {
        Err(Error::invalid(format!("point removal fraction must be in [0, 1), got {f}")))
    }
}

/// Adds clamped Gaussian noise to every coordinate.
pub fn jitter(pc: &PointCloud, sigma: f64, clip: f64, rng: &mut StdRng) -> Result<PointCloud> {
    check_nonneg("sigma", sigma)?;
    check_nonneg("clip", clip)?;
    if sigma == 0.0 {
        return Ok(pc.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let points = pc
        .points()
        .iter()
        .map(|p| {
            let mut q = *p;
            for c in q.iter_mut() {
                *c += normal.sample(rng).clamp(-clip, clip);
            }
            q
        })
        .collect();
    Ok(pc.derive(points))
}

/// Drops exactly `floor(fraction * N)` points chosen uniformly without
/// replacement. Survivors keep their relative order.
pub fn remove_random_points(pc: &PointCloud, fraction: f64, rng: &mut StdRng) -> Result<PointCloud> {
    check_fraction(fraction)?;
    let n = pc.len();
    let removed = (fraction * n as f64).floor() as usize;
    if removed == 0 {
        return Ok(pc.clone());
    }
    if removed >= n {
        return Err(Error::invalid(format!(
            "removing {removed} of {n} points would leave an empty cloud"
        )));
    }
    let mut drop = vec![false; n];
    for i in rand::seq::index::sample(rng, n, removed) {
        drop[i] = true;
    }
    let points = pc
        .points()
        .iter()
        .zip(&drop)
        .filter(|(_, &d)| !d)
        .map(|(p, _)| *p)
        .collect();
    Ok(pc.derive(points))
}

/// Outcome of a block removal.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRemoval {
    pub center: [f64; 3],
    pub removed: usize,
    /// Set when the cube covered every point and the cloud was kept whole.
    pub no_op: bool,
}

/// Removes the axis-aligned cube of side `extent` centered at `center`,
/// bounds inclusive.
pub fn remove_block_at(
    pc: &PointCloud,
    center: [f64; 3],
    extent: f64,
) -> Result<(PointCloud, BlockRemoval)> {
    check_nonneg("block_extent", extent)?;
    let half = 0.5 * extent;
    let inside = |p: &[f64; 3]| (0..3).all(|k| (p[k] - center[k]).abs() <= half);
    let points: Vec<[f64; 3]> = pc.points().iter().filter(|p| !inside(p)).copied().collect();
    if points.is_empty() {
        return Ok((
            pc.clone(),
            BlockRemoval {
                center,
                removed: 0,
                no_op: true,
            },
        ));
    }
    let removed = pc.len() - points.len();
    Ok((
        pc.derive(points),
        BlockRemoval {
            center,
            removed,
            no_op: false,
        },
    ))
}

/// Removes a cube of side `extent` centered at a uniformly chosen point of the
/// cloud. If the cube would swallow the whole cloud, nothing is removed and
/// the result is flagged as a no-op.
pub fn remove_random_block(
    pc: &PointCloud,
    extent: f64,
    rng: &mut StdRng,
) -> Result<(PointCloud, BlockRemoval)> {
    check_nonneg("block_extent", extent)?;
    let center = pc.points()[rng.random_range(0..pc.len())];
    remove_block_at(pc, center, extent)
}

/// Applies `m` (row-major) to every point.
pub fn shear_with_matrix(pc: &PointCloud, m: &[[f64; 3]; 3]) -> PointCloud {
    let points = pc
        .points()
        .iter()
        .map(|p| {
            let mut q = [0.0; 3];
            for (r, row) in m.iter().enumerate() {
                q[r] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
            }
            q
        })
        .collect();
    pc.derive(points)
}

/// Multiplies every point by one shared matrix: identity plus off-diagonal
/// entries drawn uniformly from `[-shear_max, shear_max]`.
pub fn shear(pc: &PointCloud, shear_max: f64, rng: &mut StdRng) -> Result<PointCloud> {
    check_nonneg("shear_max", shear_max)?;
    if shear_max == 0.0 {
        return Ok(pc.clone());
    }
    let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            if r != c {
                *v = rng.random_range(-shear_max..=shear_max);
            }
        }
    }
    Ok(shear_with_matrix(pc, &m))
}

/// Jitter, then point removal, then block removal, then shear.
///
/// A stage whose magnitude is zero is skipped entirely, so the all-zero
/// config is the identity.
pub fn compose_augmentations(
    pc: &PointCloud,
    cfg: &AugmentationConfig,
    rng: &mut StdRng,
) -> Result<PointCloud> {
    cfg.validate()?;
    let mut out = jitter(pc, cfg.jitter_sigma, cfg.jitter_clip, rng)?;

    let fraction = if cfg.point_removal_random && cfg.point_removal_fraction > 0.0 {
        rng.random_range(0.0..=cfg.point_removal_fraction)
    } else {
        cfg.point_removal_fraction
    };
    if fraction > 0.0 {
        out = remove_random_points(&out, fraction, rng)?;
    }
    if cfg.block_extent > 0.0 {
        out = remove_random_block(&out, cfg.block_extent, rng)?.0;
    }
    shear(&out, cfg.shear_max, rng)
}
