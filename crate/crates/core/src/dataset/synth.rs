//! Procedural desk-scale world.
//!
//! Each site is a small scene of boxes (buildings), poles and walls laid out
//! in a local metric frame. A submap of a site is a crop of that scene around
//! the submap's own position, seen with a small heading error, with a few
//! primitives occluded and Gaussian range noise, then normalized to [-1, 1].
//! Revisits of one site therefore share geometry while different sites do not.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::SubmapRecord;
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::rng::{self, StdRng};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorldConfig {
    pub num_sites: usize,
    pub submaps_per_site: usize,
    /// Minimum distance between site centers, meters.
    pub site_spacing: f64,
    /// Maximum offset of a revisit from its site center, meters.
    pub intra_site_spread: f64,
    pub points_per_cloud: usize,
    pub geometry_seed: u64,
    /// Half side of the square crop around a submap position, meters.
    pub view_half_extent: f64,
    /// Standard deviation of per-point range noise, meters.
    pub point_noise: f64,
    /// Heading error bound of a revisit, degrees.
    pub max_yaw_deg: f64,
    /// Chance that a primitive other than the site's landmark is missing from a revisit.
    pub occlusion_prob: f64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            num_sites: 60,
            submaps_per_site: 4,
            site_spacing: 100.0,
            intra_site_spread: 3.0,
            points_per_cloud: 1024,
            geometry_seed: 0,
            view_half_extent: 20.0,
            point_noise: 0.05,
            max_yaw_deg: 10.0,
            occlusion_prob: 0.0,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sites == 0 || self.submaps_per_site == 0 || self.points_per_cloud == 0 {
            return Err(Error::invalid("sites, submaps per site and points per cloud must be positive"));
        }
        let finite_nonneg = [
            self.intra_site_spread,
            self.point_noise,
            self.max_yaw_deg,
        ];
        if finite_nonneg.iter().any(|v| !v.is_finite() || *v < 0.0)
            || !(self.view_half_extent.is_finite() && self.view_half_extent > 0.0)
            || !(0.0..1.0).contains(&self.occlusion_prob)
        {
            return Err(Error::invalid("synthetic world magnitudes out of range"));
        }
        if !(self.site_spacing.is_finite() && self.site_spacing > 2.0 * self.intra_site_spread) {
            return Err(Error::invalid(format!(
                "infeasible spacing: site_spacing {} must exceed twice the intra-site spread {}",
                self.site_spacing, self.intra_site_spread
            )));
        }
        Ok(())
    }

    /// Whether sites are unambiguous under a positive threshold.
    pub fn spacing_is_unambiguous(&self, pos_threshold: f64) -> bool {
        self.site_spacing > 2.0 * self.intra_site_spread + 2.0 * pos_threshold
    }
}

#[derive(Debug, Clone)]
enum Primitive {
    Box { c: [f64; 2], half: [f64; 2], height: f64 },
    Pole { c: [f64; 2], radius: f64, height: f64 },
    Wall { start: [f64; 2], dir: [f64; 2], length: f64, height: f64 },
}

impl Primitive {
    fn area(&self) -> f64 {
        match *self {
            Primitive::Box { half, height, .. } => 4.0 * (half[0] + half[1]) * height + 4.0 * half[0] * half[1],
            Primitive::Pole { radius, height, .. } => 2.0 * PI * radius * height,
            Primitive::Wall { length, height, .. } => length * height,
        }
    }

    fn sample(&self, rng: &mut StdRng) -> [f64; 3] {
        match *self {
            Primitive::Box { c, half, height } => {
                let sides = 2.0 * half[0] * height * 2.0 + 2.0 * half[1] * height * 2.0;
                let top = 4.0 * half[0] * half[1];
                let u: f64 = rng.random_range(-1.0..1.0);
                let pick = rng.random_range(0.0..sides + top);
                if pick >= sides {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    return [c[0] + u * half[0], c[1] + v * half[1], height];
                }
                let z = rng.random_range(0.0..height);
                let x_faces = 4.0 * half[0] * height;
                if pick < x_faces {
                    let side = if pick < x_faces / 2.0 { -1.0 } else { 1.0 };
                    [c[0] + u * half[0], c[1] + side * half[1], z]
                } else {
                    let side = if pick < x_faces + (sides - x_faces) / 2.0 { -1.0 } else { 1.0 };
                    [c[0] + side * half[0], c[1] + u * half[1], z]
                }
            }
            Primitive::Pole { c, radius, height } => {
                let a = rng.random_range(0.0..2.0 * PI);
                [c[0] + radius * a.cos(), c[1] + radius * a.sin(), rng.random_range(0.0..height)]
            }
            Primitive::Wall { start, dir, length, height } => {
                let t = rng.random_range(0.0..length);
                [start[0] + t * dir[0], start[1] + t * dir[1], rng.random_range(0.0..height)]
            }
        }
    }
}

fn site_scene(rng: &mut StdRng, half_extent: f64) -> Vec<Primitive> {
    let span = 1.2 * half_extent;
    let mut prims = Vec::new();
    // Landmark building near the site center; always visible.
    prims.push(Primitive::Box {
        c: [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)],
        half: [rng.random_range(1.5..5.0), rng.random_range(1.5..5.0)],
        height: rng.random_range(4.0..12.0),
    });
    for _ in 0..rng.random_range(1..=4) {
        prims.push(Primitive::Box {
            c: [rng.random_range(-span..span), rng.random_range(-span..span)],
            half: [rng.random_range(1.0..5.0), rng.random_range(1.0..5.0)],
            height: rng.random_range(3.0..12.0),
        });
    }
    for _ in 0..rng.random_range(2..=8) {
        prims.push(Primitive::Pole {
            c: [rng.random_range(-span..span), rng.random_range(-span..span)],
            radius: rng.random_range(0.15..0.5),
            height: rng.random_range(3.0..8.0),
        });
    }
    for _ in 0..rng.random_range(1..=3) {
        let a: f64 = rng.random_range(0.0..PI);
        prims.push(Primitive::Wall {
            start: [rng.random_range(-span..span), rng.random_range(-span..span)],
            dir: [a.cos(), a.sin()],
            length: rng.random_range(5.0..20.0),
            height: rng.random_range(1.0..3.0),
        });
    }
    prims
}

fn site_centers(cfg: &SyntheticWorldConfig, rng: &mut StdRng) -> Vec<[f64; 2]> {
    let cols = (cfg.num_sites as f64).sqrt().ceil() as usize;
    let cell = 1.25 * cfg.site_spacing;
    let wobble = 0.125 * cfg.site_spacing;
    (0..cfg.num_sites)
        .map(|s| {
            let (row, col) = (s / cols, s % cols);
            [
                col as f64 * cell + rng.random_range(-wobble..=wobble),
                row as f64 * cell + rng.random_range(-wobble..=wobble),
            ]
        })
        .collect()
}

fn render_submap(
    scene: &[Primitive],
    offset: [f64; 2],
    cfg: &SyntheticWorldConfig,
    rng: &mut StdRng,
) -> Result<PointCloud> {
    let visible: Vec<&Primitive> = scene
        .iter()
        .enumerate()
        .filter(|(i, _)| *i == 0 || rng.random::<f64>() >= cfg.occlusion_prob)
        .map(|(_, p)| p)
        .collect();
    let areas: Vec<f64> = visible.iter().map(|p| p.area()).collect();
    let total: f64 = areas.iter().sum();
    let yaw = rng.random_range(-cfg.max_yaw_deg..=cfg.max_yaw_deg).to_radians();
    let (sin, cos) = yaw.sin_cos();
    let noise = Normal::new(0.0, cfg.point_noise).map_err(|e| Error::invalid(e.to_string()))?;
    let h = cfg.view_half_extent;

    let n = cfg.points_per_cloud;
    let mut pts = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while pts.len() < n {
        attempts += 1;
        if attempts > 1000 * n {
            return Err(Error::invalid("synthetic scene has no visible surface in the view window"));
        }
        let mut pick = rng.random_range(0.0..total);
        let mut k = 0;
        while k + 1 < areas.len() && pick >= areas[k] {
            pick -= areas[k];
            k += 1;
        }
        let w = visible[k].sample(rng);
        let (dx, dy) = (w[0] - offset[0], w[1] - offset[1]);
        if dx.abs() > h || dy.abs() > h {
            continue;
        }
        let x = cos * dx - sin * dy + noise.sample(rng);
        let y = sin * dx + cos * dy + noise.sample(rng);
        let z = w[2] + noise.sample(rng);
        pts.push([x, y, z]);
    }

    let mut centroid = [0.0; 3];
    for p in &pts {
        for k in 0..3 {
            centroid[k] += p[k];
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n as f64);
    let mut scale = 0.0f64;
    for p in pts.iter_mut() {
        for k in 0..3 {
            p[k] -= centroid[k];
            scale = scale.max(p[k].abs());
        }
    }
    let scale = if scale > 0.0 { scale } else { 1.0 };
    for p in pts.iter_mut() {
        for c in p.iter_mut() {
            // f32 storage keeps the canonical file format lossless.
            *c = ((*c / scale) as f32).clamp(-1.0, 1.0) as f64;
        }
    }
    PointCloud::new(pts)
}

/// Generates `num_sites * submaps_per_site` records with ids
/// `site * submaps_per_site + visit`.
///
/// Site layout and scenes come from `geometry_seed`; revisit offsets, point
/// sampling and noise come from `rng`.
pub fn generate_synthetic_world(cfg: &SyntheticWorldConfig, rng: &mut StdRng) -> Result<Vec<SubmapRecord>> {
    cfg.validate()?;
    if !cfg.spacing_is_unambiguous(super::DEFAULT_POS_THRESHOLD) {
        log::warn!(
            "site spacing {} m does not exceed 2*spread + 2*{} m; sites may be ambiguous",
            cfg.site_spacing,
            super::DEFAULT_POS_THRESHOLD
        );
    }
    let mut layout_rng = rng::stream(cfg.geometry_seed, u64::MAX);
    let centers = site_centers(cfg, &mut layout_rng);

    let mut records = Vec::with_capacity(cfg.num_sites * cfg.submaps_per_site);
    for (s, center) in centers.iter().enumerate() {
        let scene = site_scene(&mut rng::stream(cfg.geometry_seed, s as u64), cfg.view_half_extent);
        for v in 0..cfg.submaps_per_site {
            let r = cfg.intra_site_spread * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..2.0 * PI);
            let offset = [r * a.cos(), r * a.sin()];
            let id = (s * cfg.submaps_per_site + v) as u64;
            let cloud = render_submap(&scene, offset, cfg, rng)?.with_source(id);
            records.push(SubmapRecord::new(id, cloud, [center[0] + offset[0], center[1] + offset[1]]));
        }
    }
    Ok(records)
}

/// Symmetric mean nearest-neighbour distance, by exhaustive search.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> f64 {
    fn one_way(a: &PointCloud, b: &PointCloud) -> f64 {
        a.points()
            .iter()
            .map(|p| {
                b.points()
                    .iter()
                    .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum::<f64>()
            / a.len() as f64
    }
    0.5 * (one_way(a, b) + one_way(b, a))
}
