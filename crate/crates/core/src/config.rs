//! Flat `section.key = value` configuration for the command line and the
//! one-shot pipeline.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys are
//! rejected. [`PipelineConfig::to_text`] writes every key in a fixed order
//! and parses back to the same configuration.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::{SyntheticWorldConfig, DEFAULT_MATCH_RADIUS, DEFAULT_NEG_THRESHOLD, DEFAULT_POS_THRESHOLD};
use crate::encoder::Architecture;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::pointcloud::AugmentationConfig;
use crate::pretrain::{PretrainConfig, WarmStart};
use crate::retrieval::{EnhanceConfig, EnhanceMode};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    pub match_radius: f64,
    /// Share of places held out for evaluation.
    pub test_fraction: f64,
    /// Share of each held-out place sent to the query side.
    pub query_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pos_threshold: DEFAULT_POS_THRESHOLD,
            neg_threshold: DEFAULT_NEG_THRESHOLD,
            match_radius: DEFAULT_MATCH_RADIUS,
            test_fraction: 0.4,
            query_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub skip_pretrain: bool,
    pub world: SyntheticWorldConfig,
    pub data: DataConfig,
    pub encoder: Architecture,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub enhance: EnhanceConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("gidp-out"),
            threads: 0,
            skip_pretrain: false,
            world: SyntheticWorldConfig::default(),
            data: DataConfig::default(),
            encoder: Architecture::default(),
            // Desk-scale budget: a few dozen optimizer steps per stage.
            pretrain: PretrainConfig {
                epochs: 8,
                batch_size: 16,
                learning_rate: 1e-3,
                momentum: 0.99,
                ..PretrainConfig::default()
            },
            finetune: FinetuneConfig {
                epochs: 12,
                lr_decay_epoch: 9,
                learning_rate: 1e-2,
                ..FinetuneConfig::default()
            },
            enhance: EnhanceConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("expected {what}, got `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|w| parse::<usize>(key, w.trim(), "a comma-separated list of layer widths"))
        .collect()
}

fn warm_start_name(w: WarmStart) -> &'static str {
    match w {
        WarmStart::Defer => "defer",
        WarmStart::Prefill => "prefill",
    }
}

impl PipelineConfig {
    /// Reads a config file on top of the defaults.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Parses `text` on top of the defaults and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text`, then validates.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
            self.set_raw(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Applies `key=value` overrides (as given on the command line), then validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like key=value"))?;
            self.set_raw(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Sets one key and validates the whole configuration.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_raw(key, value)?;
        self.validate()
    }

    fn set_raw(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        let (w, d, p, f, e) = (
            &mut self.world,
            &mut self.data,
            &mut self.pretrain,
            &mut self.finetune,
            &mut self.enhance,
        );
        match key {
            "run.seed" => self.seed = parse(k, v, "an unsigned integer")?,
            "run.output_dir" => self.output_dir = PathBuf::from(v),
            "run.threads" => self.threads = parse(k, v, "an unsigned integer")?,
            "run.skip_pretrain" => self.skip_pretrain = parse_bool(k, v)?,

            "world.num_sites" => w.num_sites = parse(k, v, "an unsigned integer")?,
            "world.submaps_per_site" => w.submaps_per_site = parse(k, v, "an unsigned integer")?,
            "world.site_spacing" => w.site_spacing = parse(k, v, "a number")?,
            "world.intra_site_spread" => w.intra_site_spread = parse(k, v, "a number")?,
            "world.points_per_cloud" => w.points_per_cloud = parse(k, v, "an unsigned integer")?,
            "world.geometry_seed" => w.geometry_seed = parse(k, v, "an unsigned integer")?,
            "world.view_half_extent" => w.view_half_extent = parse(k, v, "a number")?,
            "world.point_noise" => w.point_noise = parse(k, v, "a number")?,
            "world.max_yaw_deg" => w.max_yaw_deg = parse(k, v, "a number")?,
            "world.occlusion_prob" => w.occlusion_prob = parse(k, v, "a number")?,

            "data.pos_threshold" => d.pos_threshold = parse(k, v, "a number")?,
            "data.neg_threshold" => d.neg_threshold = parse(k, v, "a number")?,
            "data.match_radius" => d.match_radius = parse(k, v, "a number")?,
            "data.test_fraction" => d.test_fraction = parse(k, v, "a number")?,
            "data.query_fraction" => d.query_fraction = parse(k, v, "a number")?,

            "encoder.widths" => self.encoder.widths = parse_widths(k, v)?,
            "encoder.proj_hidden" => self.encoder.proj_hidden = parse(k, v, "an unsigned integer")?,

            "augment.jitter_sigma" => p.augmentation.jitter_sigma = parse(k, v, "a number")?,
            "augment.jitter_clip" => p.augmentation.jitter_clip = parse(k, v, "a number")?,
            "augment.point_removal_fraction" => p.augmentation.point_removal_fraction = parse(k, v, "a number")?,
            "augment.point_removal_random" => p.augmentation.point_removal_random = parse_bool(k, v)?,
            "augment.block_extent" => p.augmentation.block_extent = parse(k, v, "a number")?,
            "augment.shear_max" => p.augmentation.shear_max = parse(k, v, "a number")?,

            "pretrain.momentum" => p.momentum = parse(k, v, "a number")?,
            "pretrain.queue_capacity" => p.queue_capacity = parse(k, v, "an unsigned integer")?,
            "pretrain.temperature" => p.temperature = parse(k, v, "a number")?,
            "pretrain.batch_size" => p.batch_size = parse(k, v, "an unsigned integer")?,
            "pretrain.learning_rate" => p.learning_rate = parse(k, v, "a number")?,
            "pretrain.epochs" => p.epochs = parse(k, v, "an unsigned integer")?,
            "pretrain.num_negatives" => p.num_negatives = parse(k, v, "an unsigned integer")?,
            "pretrain.include_positive_in_denominator" => p.include_positive_in_denominator = parse_bool(k, v)?,
            "pretrain.warm_start" => {
                p.warm_start = match v {
                    "defer" => WarmStart::Defer,
                    "prefill" => WarmStart::Prefill,
                    _ => return Err(Error::config(k, format!("expected defer or prefill, got `{v}`"))),
                }
            }

            "finetune.margin" => f.margin = parse(k, v, "a number")?,
            "finetune.batch_size" => f.batch_size = parse(k, v, "an unsigned integer")?,
            "finetune.learning_rate" => f.learning_rate = parse(k, v, "a number")?,
            "finetune.epochs" => f.epochs = parse(k, v, "an unsigned integer")?,
            "finetune.lr_decay_epoch" => f.lr_decay_epoch = parse(k, v, "an unsigned integer")?,
            "finetune.lr_decay_factor" => f.lr_decay_factor = parse(k, v, "a number")?,
            "finetune.positives_per_anchor" => f.positives_per_anchor = parse(k, v, "an unsigned integer")?,
            "finetune.negatives_per_anchor" => f.negatives_per_anchor = parse(k, v, "an unsigned integer")?,

            "enhance.lambda" => e.lambda = parse(k, v, "a number")?,
            "enhance.k" => e.neighbors_k = parse(k, v, "an unsigned integer")?,
            "enhance.mode" => e.mode = v.parse().map_err(|_| Error::config(k, format!("expected inductive or transductive, got `{v}`")))?,
            "enhance.queries" => e.enhance_queries = parse_bool(k, v)?,
            "enhance.database" => e.enhance_database = parse_bool(k, v)?,

            _ => return Err(Error::config(k, "unknown key")),
        }
        Ok(())
    }

    /// Checks every section; errors name the offending key or section.
    pub fn validate(&self) -> Result<()> {
        fn inner(e: Error) -> String {
            match e {
                Error::InvalidArgument(m) => m,
                other => other.to_string(),
            }
        }
        let e = &self.enhance;
        if !(0.0..=1.0).contains(&e.lambda) {
            return Err(Error::config("enhance.lambda", "lambda must be in [0,1]"));
        }
        if e.neighbors_k == 0 {
            return Err(Error::config("enhance.k", "K must be >= 1"));
        }
        let d = &self.data;
        if !(d.pos_threshold > 0.0 && d.pos_threshold < d.neg_threshold && d.neg_threshold.is_finite()) {
            return Err(Error::config("data", "thresholds must satisfy 0 < pos_threshold < neg_threshold"));
        }
        if !(d.match_radius > 0.0 && d.match_radius.is_finite()) {
            return Err(Error::config("data.match_radius", "must be > 0"));
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(Error::config("data.test_fraction", "must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&d.query_fraction) {
            return Err(Error::config("data.query_fraction", "must be in [0, 1]"));
        }
        self.world.validate().map_err(|e| Error::config("world", inner(e)))?;
        self.encoder.validate().map_err(|e| Error::config("encoder", inner(e)))?;
        self.pretrain.augmentation.validate().map_err(|e| Error::config("augment", inner(e)))?;
        self.pretrain.validate().map_err(|e| Error::config("pretrain", inner(e)))?;
        self.finetune.validate().map_err(|e| Error::config("finetune", inner(e)))?;
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        fn s(v: impl Display) -> String {
            v.to_string()
        }
        let (w, d, a, p, f, e) = (
            &self.world,
            &self.data,
            &self.pretrain.augmentation,
            &self.pretrain,
            &self.finetune,
            &self.enhance,
        );
        let widths = self.encoder.widths.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let list: Vec<(&str, String)> = vec![
            ("run.seed", s(self.seed)),
            ("run.output_dir", s(self.output_dir.display())),
            ("run.threads", s(self.threads)),
            ("run.skip_pretrain", s(self.skip_pretrain)),
            ("world.num_sites", s(w.num_sites)),
            ("world.submaps_per_site", s(w.submaps_per_site)),
            ("world.site_spacing", s(w.site_spacing)),
            ("world.intra_site_spread", s(w.intra_site_spread)),
            ("world.points_per_cloud", s(w.points_per_cloud)),
            ("world.geometry_seed", s(w.geometry_seed)),
            ("world.view_half_extent", s(w.view_half_extent)),
            ("world.point_noise", s(w.point_noise)),
            ("world.max_yaw_deg", s(w.max_yaw_deg)),
            ("world.occlusion_prob", s(w.occlusion_prob)),
            ("data.pos_threshold", s(d.pos_threshold)),
            ("data.neg_threshold", s(d.neg_threshold)),
            ("data.match_radius", s(d.match_radius)),
            ("data.test_fraction", s(d.test_fraction)),
            ("data.query_fraction", s(d.query_fraction)),
            ("encoder.widths", widths),
            ("encoder.proj_hidden", s(self.encoder.proj_hidden)),
            ("augment.jitter_sigma", s(a.jitter_sigma)),
            ("augment.jitter_clip", s(a.jitter_clip)),
            ("augment.point_removal_fraction", s(a.point_removal_fraction)),
            ("augment.point_removal_random", s(a.point_removal_random)),
            ("augment.block_extent", s(a.block_extent)),
            ("augment.shear_max", s(a.shear_max)),
            ("pretrain.momentum", s(p.momentum)),
            ("pretrain.queue_capacity", s(p.queue_capacity)),
            ("pretrain.temperature", s(p.temperature)),
            ("pretrain.batch_size", s(p.batch_size)),
            ("pretrain.learning_rate", s(p.learning_rate)),
            ("pretrain.epochs", s(p.epochs)),
            ("pretrain.num_negatives", s(p.num_negatives)),
            ("pretrain.include_positive_in_denominator", s(p.include_positive_in_denominator)),
            ("pretrain.warm_start", s(warm_start_name(p.warm_start))),
            ("finetune.margin", s(f.margin)),
            ("finetune.batch_size", s(f.batch_size)),
            ("finetune.learning_rate", s(f.learning_rate)),
            ("finetune.epochs", s(f.epochs)),
            ("finetune.lr_decay_epoch", s(f.lr_decay_epoch)),
            ("finetune.lr_decay_factor", s(f.lr_decay_factor)),
            ("finetune.positives_per_anchor", s(f.positives_per_anchor)),
            ("finetune.negatives_per_anchor", s(f.negatives_per_anchor)),
            ("enhance.lambda", s(e.lambda)),
            ("enhance.k", s(e.neighbors_k)),
            ("enhance.mode", s(e.mode)),
            ("enhance.queries", s(e.enhance_queries)),
            ("enhance.database", s(e.enhance_database)),
        ];
        list.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn augmentation(&self) -> &AugmentationConfig {
        &self.pretrain.augmentation
    }

    pub fn enhance_for(&self, mode: EnhanceMode) -> EnhanceConfig {
        EnhanceConfig {
            mode,
            ..self.enhance.clone()
        }
    }
}
