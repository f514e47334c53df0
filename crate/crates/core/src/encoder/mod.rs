//! Point-cloud encoding network.
//!
//! A shared per-point MLP lifts every point to `C` channels, GeM pooling
//! aggregates the points into one vector and L2 normalization yields the
//! global descriptor. A projection head (used only while pretraining) maps
//! the descriptor to the contrastive embedding.
//!
//! Every learnable value lives in one flat `f64` vector described by a
//! [`Layout`]; gradients and optimizer moments share that layout.

mod checkpoint;
mod gem;
mod loss;
mod network;
mod optim;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_MAGIC};
pub use gem::{gem_pool, gem_pool_backward};
pub use loss::{backward, backward_given_outputs, backward_with_outputs, evaluate_loss, LossHead, Target, Triplet};
pub use network::{
    activation, encode, encode_batch, forward, l2_normalize, projection_head, Encoded,
};
pub use optim::{OptimizerKind, OptimizerState};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// GeM exponent at initialization. The learnable value is `GEM_P_BASE * exp(rho)`
/// with `rho = 0` at init, so the exponent stays positive.
pub const GEM_P_BASE: f64 = 3.0;

/// Network shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    /// Per-point MLP widths including the 3-wide input, e.g. `[3, 64, 128, 256]`.
    pub widths: Vec<usize>,
    /// Hidden width of the projection head.
    pub proj_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            widths: vec![3, 64, 128, 256],
            proj_hidden: 256,
        }
    }
}

impl Architecture {
    pub fn new(widths: Vec<usize>, proj_hidden: usize) -> Result<Self> {
        let arch = Self { widths, proj_hidden };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths[0] != 3 {
            return Err(Error::invalid("widths must start at 3 and contain at least one layer"));
        }
        if self.widths.contains(&0) || self.proj_hidden == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn descriptor_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layout(&self) -> Layout {
        let mut b = LayoutBuilder::default();
        for (l, w) in self.widths.windows(2).enumerate() {
            b.push(format!("mlp.{l}.weight"), w[1], w[0]);
            b.push(format!("mlp.{l}.bias"), w[1], 1);
        }
        b.push("gem.rho".to_string(), 1, 1);
        let c = self.descriptor_dim();
        b.push("proj.0.weight".to_string(), self.proj_hidden, c);
        b.push("proj.0.bias".to_string(), self.proj_hidden, 1);
        b.push("proj.1.weight".to_string(), c, self.proj_hidden);
        b.push("proj.1.bias".to_string(), c, 1);
        b.finish()
    }
}

/// A named `rows x cols` block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

#[derive(Default)]
struct LayoutBuilder {
    segments: Vec<Segment>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, rows: usize, cols: usize) {
        self.segments.push(Segment {
            name,
            rows,
            cols,
            offset: self.total,
        });
        self.total += rows * cols;
    }

    fn finish(self) -> Layout {
        Layout {
            segments: self.segments,
            total: self.total,
        }
    }
}

impl Layout {
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// One `name rows cols` line per segment.
    pub fn manifest(&self) -> String {
        self.segments
            .iter()
            .map(|s| format!("{} {} {}\n", s.name, s.rows, s.cols))
            .collect()
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut b = LayoutBuilder::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let parsed = match f.as_slice() {
                [name, r, c] => r.parse().ok().zip(c.parse().ok()).map(|(r, c)| (name.to_string(), r, c)),
                _ => None,
            };
            let (name, r, c) = parsed.ok_or_else(|| Error::LayoutMismatch(format!("bad manifest line `{line}`")))?;
            b.push(name, r, c);
        }
        Ok(b.finish())
    }

    /// Recovers the architecture this layout was built from.
    pub fn architecture(&self) -> Result<Architecture> {
        let mut widths = Vec::new();
        for s in &self.segments {
            if s.name.starts_with("mlp.") && s.name.ends_with(".weight") {
                if widths.is_empty() {
                    widths.push(s.cols);
                }
                widths.push(s.rows);
            }
        }
        let proj_hidden = self
            .segment("proj.0.weight")
            .map(|s| s.rows)
            .ok_or_else(|| Error::LayoutMismatch("no projection head in layout".into()))?;
        let arch = Architecture { widths, proj_hidden };
        arch.validate().map_err(|e| Error::LayoutMismatch(e.to_string()))?;
        if arch.layout() != *self {
            return Err(Error::LayoutMismatch("layout is not a known encoder layout".into()));
        }
        Ok(arch)
    }
}

/// All learnable weights of one encoder (per-point MLP, GeM exponent,
/// projection head) as a flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    arch: Architecture,
    layout: Layout,
    values: Vec<f64>,
}

/// Gradient of a scalar loss, laid out like [`EncoderParams`].
pub type Gradients = Vec<f64>;

impl EncoderParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let values = vec![0.0; layout.len()];
        Ok(Self { arch, layout, values })
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        if values.len() != p.layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "flat vector has {} values, layout needs {}",
                values.len(),
                p.layout.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder parameter".into()));
        }
        p.values = values;
        Ok(p)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn descriptor_dim(&self) -> usize {
        self.arch.descriptor_dim()
    }

    pub fn segment(&self, name: &str) -> &[f64] {
        let s = self.layout.segment(name).unwrap_or_else(|| panic!("no segment {name}"));
        &self.values[s.range()]
    }

    pub fn segment_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self.layout.segment(name).unwrap_or_else(|| panic!("no segment {name}")).range();
        &mut self.values[r]
    }

    pub fn gem_p(&self) -> f64 {
        GEM_P_BASE * self.segment("gem.rho")[0].exp()
    }

    pub fn num_mlp_layers(&self) -> usize {
        self.arch.widths.len() - 1
    }

    pub fn check_same_layout(&self, other: &Self) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::LayoutMismatch("parameter layouts differ".into()));
        }
        Ok(())
    }
}

/// Fan-in scaled uniform weights, zero biases, GeM exponent 3.
pub fn init_params(seed: u64, widths: &[usize], descriptor_dim: usize) -> Result<EncoderParams> {
    init_with(seed, Architecture::new(widths.to_vec(), descriptor_dim)?, descriptor_dim)
}

fn init_with(seed: u64, arch: Architecture, descriptor_dim: usize) -> Result<EncoderParams> {
    if arch.descriptor_dim() != descriptor_dim {
        return Err(Error::invalid(format!(
            "descriptor_dim {descriptor_dim} must equal the last width {}",
            arch.descriptor_dim()
        )));
    }
    let mut params = EncoderParams::zeros(arch)?;
    let mut rng = rng::seeded(seed);
    let segments = params.layout.segments().to_vec();
    for s in segments.iter().filter(|s| s.name.ends_with(".weight")) {
        let bound = (3.0 / s.cols as f64).sqrt();
        for v in &mut params.values[s.range()] {
            *v = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}

/// Initializes parameters for an arbitrary architecture.
pub fn init_architecture(seed: u64, arch: &Architecture) -> Result<EncoderParams> {
    init_with(seed, arch.clone(), arch.descriptor_dim())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_flat_length() {
        let p = init_params(0, &[3, 64, 128, 256], 256).unwrap();
        let proj = (256 * 256 + 256) * 2;
        let expect = (3 * 64 + 64) + (64 * 128 + 128) + (128 * 256 + 256) + 1 + proj;
        assert_eq!(p.values().len(), expect);
        assert_eq!(p.layout().len(), expect);
    }

    #[test]
    fn init_is_deterministic_with_exact_gem_p() {
        let a = init_params(42, &[3, 8, 16], 16).unwrap();
        let b = init_params(42, &[3, 8, 16], 16).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(43, &[3, 8, 16], 16).unwrap());
        assert_eq!(a.gem_p(), 3.0);
        assert!(a.segment("mlp.0.bias").iter().all(|&b| b == 0.0));
        assert!(a.segment("proj.1.bias").iter().all(|&b| b == 0.0));
        let bound = (3.0f64 / 3.0).sqrt();
        assert!(a.segment("mlp.0.weight").iter().all(|w| w.abs() < bound));
    }

    #[test]
    fn bad_architectures() {
        assert!(init_params(0, &[3], 3).is_err());
        assert!(init_params(0, &[4, 8], 8).is_err());
        assert!(init_params(0, &[3, 8], 16).is_err());
        assert!(init_params(0, &[3, 0, 8], 8).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let arch = Architecture::new(vec![3, 5, 7], 6).unwrap();
        let layout = arch.layout();
        let back = Layout::from_manifest(&layout.manifest()).unwrap();
        assert_eq!(back, layout);
        assert_eq!(back.architecture().unwrap(), arch);
        assert!(Layout::from_manifest("mlp.0.weight x 3\n").is_err());
    }
}
