//! Flat sectioned key-value pipeline configuration.
//!
//! ```text
//! # comment
//! [train]
//! iterations = 2000
//! ```
//!
//! Every key is also reachable as `--set section.key=value`. Unknown
//! sections, unknown keys, and unparsable values are rejected at load time,
//! before any compute starts.

use nalgebra::Vector3;
use thiserror::Error;

use crate::field::LodConfig;
use crate::loss::local::LocalWeight;
use crate::partition::PartitionConfig;
use crate::render::RenderOptions;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("unknown config section [{0}]")]
    UnknownSection(String),
    #[error("unknown key {key:?} in section [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("bad value {value:?} for {section}.{key}: {reason}")]
    BadValue {
        section: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Surface extraction parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshParams {
    /// Voxel size = padded bounding-box diagonal / this.
    pub cells_across: usize,
    /// Cubes touching a corner with less accumulated weight are skipped.
    pub min_weight: f64,
    /// Fuse every stride-th training view.
    pub stride: usize,
}

impl Default for MeshParams {
    fn default() -> Self {
        Self {
            cells_across: crate::mesh::CELLS_ACROSS,
            min_weight: 1.0,
            stride: 1,
        }
    }
}

/// Level-of-detail settings; zero means "derive from the point cloud".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LodSettings {
    pub v0: f64,
    pub k: u32,
    pub levels: u32,
    pub d_max: f64,
}

impl Default for LodSettings {
    fn default() -> Self {
        Self {
            v0: 0.0,
            k: 2,
            levels: 2,
            d_max: 0.0,
        }
    }
}

impl LodSettings {
    /// Concrete config, filling auto fields from the cloud: `d_max` becomes
    /// the bounding-box diagonal and `v0` becomes `d_max / k^(K−1)`, shrunk
    /// until the level-0 grid has at least 8 cells along the longest axis.
    pub fn resolve(&self, points: &[Vector3<f64>]) -> Result<LodConfig, ConfigError> {
        let mut v0 = self.v0;
        let mut d_max = self.d_max;
        if v0 == 0.0 || d_max == 0.0 {
            if points.is_empty() {
                return Err(ConfigError::Invalid(
                    "lod auto-sizing needs a nonempty point cloud".into(),
                ));
            }
            let mut lo = points[0];
            let mut hi = points[0];
            for p in points {
                lo = lo.inf(p);
                hi = hi.sup(p);
            }
            let extent = hi - lo;
            let diag = extent.norm();
            if diag <= 0.0 {
                return Err(ConfigError::Invalid(
                    "lod auto-sizing needs a cloud with spatial extent".into(),
                ));
            }
            if d_max == 0.0 {
                d_max = diag;
            }
            if v0 == 0.0 {
                let span = extent.max();
                v0 = (d_max / (self.k as f64).powi(self.levels as i32 - 1)).min(span / 8.0);
            }
        }
        let cfg = LodConfig {
            v0,
            k: self.k,
            levels: self.levels,
            d_max,
        };
        cfg.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

/// Input and output locations; empty strings mean "take from the CLI".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathSettings {
    pub scene: String,
    pub out: String,
    pub test_ids: String,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineConfig {
    pub lod: LodSettings,
    pub partition: PartitionConfig,
    pub train: TrainConfig,
    pub render: RenderOptions,
    pub mesh: MeshParams,
    pub paths: PathSettings,
}

fn bad(section: &str, key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        section: section.to_string(),
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| bad(section, key, value, "not a number of the expected kind"))
}

fn boolean(section: &str, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(bad(section, key, value, "expected true/false")),
    }
}

fn triple(section: &str, key: &str, value: &str) -> Result<[f64; 3], ConfigError> {
    let parts: Vec<&str> = value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    if parts.len() != 3 {
        return Err(bad(section, key, value, "expected three numbers"));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = num(section, key, p)?;
    }
    Ok(out)
}

fn local_weight(section: &str, key: &str, value: &str) -> Result<LocalWeight, ConfigError> {
    if value == "planar_dot" {
        return Ok(LocalWeight::PlanarDot);
    }
    if let Some(tau) = value.strip_prefix("depth_gradient:") {
        return Ok(LocalWeight::DepthGradient {
            tau: num(section, key, tau)?,
        });
    }
    Err(bad(
        section,
        key,
        value,
        "expected planar_dot or depth_gradient:TAU",
    ))
}

fn local_weight_text(w: &LocalWeight) -> String {
    match w {
        LocalWeight::PlanarDot => "planar_dot".to_string(),
        LocalWeight::DepthGradient { tau } => format!("depth_gradient:{}", tau),
    }
}

impl PipelineConfig {
    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let unknown = || {
            Err(ConfigError::UnknownKey {
                section: section.to_string(),
                key: key.to_string(),
            })
        };
        match section {
            "lod" => match key {
                "v0" => self.lod.v0 = num(section, key, value)?,
                "k" => self.lod.k = num(section, key, value)?,
                "levels" => self.lod.levels = num(section, key, value)?,
                "d_max" => self.lod.d_max = num(section, key, value)?,
                _ => return unknown(),
            },
            "partition" => match key {
                "gx" => self.partition.gx = num(section, key, value)?,
                "gz" => self.partition.gz = num(section, key, value)?,
                "up_axis" => self.partition.up_axis = num(section, key, value)?,
                "tau_vis" => self.partition.tau_vis = num(section, key, value)?,
                "rho" => self.partition.rho = num(section, key, value)?,
                "radius_px" => self.partition.radius_px = num(section, key, value)?,
                _ => return unknown(),
            },
            "train" => match key {
                "iterations" => self.train.iterations = num(section, key, value)?,
                "densify_interval" => self.train.densify_interval = num(section, key, value)?,
                "densify_stop_frac" => self.train.densify_stop_frac = num(section, key, value)?,
                "mv_start_frac" => self.train.mv_start_frac = num(section, key, value)?,
                "neighbors" => self.train.neighbors = num(section, key, value)?,
                "seed" => self.train.seed = num(section, key, value)?,
                "log_every" => self.train.log_every = num(section, key, value)?,
                "background" => self.train.background = triple(section, key, value)?,
                "tau_grow" => self.train.densify.tau_grow = num(section, key, value)?,
                "tau_prune" => self.train.densify.tau_prune = num(section, key, value)?,
                "lr_positions" => self.train.lr.positions = num(section, key, value)?,
                "lr_positions_end" => self.train.lr.positions_end = num(section, key, value)?,
                "lr_features" => self.train.lr.features = num(section, key, value)?,
                "lr_offsets" => self.train.lr.offsets = num(section, key, value)?,
                "lr_logscales" => self.train.lr.logscales = num(section, key, value)?,
                "lr_decoder" => self.train.lr.decoder = num(section, key, value)?,
                "lr_embeddings" => self.train.lr.embeddings = num(section, key, value)?,
                "lr_phi" => self.train.lr.phi = num(section, key, value)?,
                _ => return unknown(),
            },
            "loss" => match key {
                "lambda" => self.train.loss.lambda = num(section, key, value)?,
                "w_flatten" => self.train.loss.w_flatten = num(section, key, value)?,
                "w_local" => self.train.loss.w_local = num(section, key, value)?,
                "w_mv" => self.train.loss.w_mv = num(section, key, value)?,
                "dssim_on_adjusted" => {
                    self.train.loss.dssim_on_adjusted = boolean(section, key, value)?
                }
                "local_weight" => self.train.local_weight = local_weight(section, key, value)?,
                _ => return unknown(),
            },
            "patch" => match key {
                "half_size" => self.train.patch.half_size = num(section, key, value)?,
                "stride" => self.train.patch.stride = num(section, key, value)?,
                _ => return unknown(),
            },
            "occlusion" => match key {
                "pixel_threshold" => {
                    self.train.occlusion.pixel_threshold = num(section, key, value)?
                }
                _ => return unknown(),
            },
            "render" => match key {
                "alpha_clamp" => self.render.alpha_clamp = num(section, key, value)?,
                "skip_alpha" => self.render.skip_alpha = num(section, key, value)?,
                "t_stop" => self.render.t_stop = num(section, key, value)?,
                "dilation" => self.render.dilation = num(section, key, value)?,
                "near" => self.render.near = num(section, key, value)?,
                "alpha_valid_min" => self.render.alpha_valid_min = num(section, key, value)?,
                "min_denom" => self.render.min_denom = num(section, key, value)?,
                _ => return unknown(),
            },
            "mesh" => match key {
                "cells_across" => self.mesh.cells_across = num(section, key, value)?,
                "min_weight" => self.mesh.min_weight = num(section, key, value)?,
                "stride" => self.mesh.stride = num(section, key, value)?,
                _ => return unknown(),
            },
            "paths" => match key {
                "scene" => self.paths.scene = value.to_string(),
                "out" => self.paths.out = value.to_string(),
                "test_ids" => self.paths.test_ids = value.to_string(),
                _ => return unknown(),
            },
            _ => return Err(ConfigError::UnknownSection(section.to_string())),
        }
        Ok(())
    }

    /// Apply one `section.key=value` override.
    pub fn apply_set(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("--set {:?}: expected key=value", spec)))?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| {
            ConfigError::Invalid(format!("--set {:?}: expected section.key=value", spec))
        })?;
        self.set(section.trim(), key.trim(), value.trim())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = PipelineConfig::default();
        let mut section: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Line {
                    line: lineno + 1,
                    reason: "unterminated section header".into(),
                })?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Line {
                line: lineno + 1,
                reason: "expected key = value".into(),
            })?;
            let section = section.as_deref().ok_or_else(|| ConfigError::Line {
                line: lineno + 1,
                reason: "key appears before any [section]".into(),
            })?;
            cfg.set(section, key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Range checks beyond per-key parsing; runs before any compute.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.lod.k < 2 {
            return inv("lod.k must be at least 2");
        }
        if self.lod.levels < 1 {
            return inv("lod.levels must be at least 1");
        }
        if self.lod.v0 < 0.0 || self.lod.d_max < 0.0 {
            return inv("lod.v0 and lod.d_max must be nonnegative (0 = auto)");
        }
        if self.partition.gx < 1 || self.partition.gz < 1 {
            return inv("partition grid must be at least 1x1");
        }
        if self.partition.up_axis > 2 {
            return inv("partition.up_axis must be 0, 1, or 2");
        }
        self.train.validate().map_err(ConfigError::Invalid)?;
        if !(0.0..=1.0).contains(&self.train.loss.lambda) {
            return inv("loss.lambda must be in [0, 1]");
        }
        let w = &self.train.loss;
        if w.w_flatten < 0.0 || w.w_local < 0.0 || w.w_mv < 0.0 {
            return inv("loss weights must be nonnegative");
        }
        if self.train.patch.stride == 0 {
            return inv("patch.stride must be positive");
        }
        if self.train.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return inv("train.background channels must be in [0, 1]");
        }
        if self.mesh.cells_across < 2 {
            return inv("mesh.cells_across must be at least 2");
        }
        if self.mesh.min_weight < 0.0 {
            return inv("mesh.min_weight must be nonnegative");
        }
        if self.mesh.stride == 0 {
            return inv("mesh.stride must be positive");
        }
        Ok(())
    }

    /// Full dump with every key; `parse` of the output reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: &dyn std::fmt::Display| {
            s.push_str(&format!("{} = {}\n", k, v));
        };
        s.push_str("[lod]\n");
        kv(&mut s, "v0", &self.lod.v0);
        kv(&mut s, "k", &self.lod.k);
        kv(&mut s, "levels", &self.lod.levels);
        kv(&mut s, "d_max", &self.lod.d_max);
        s.push_str("\n[partition]\n");
        kv(&mut s, "gx", &self.partition.gx);
        kv(&mut s, "gz", &self.partition.gz);
        kv(&mut s, "up_axis", &self.partition.up_axis);
        kv(&mut s, "tau_vis", &self.partition.tau_vis);
        kv(&mut s, "rho", &self.partition.rho);
        kv(&mut s, "radius_px", &self.partition.radius_px);
        s.push_str("\n[train]\n");
        kv(&mut s, "iterations", &self.train.iterations);
        kv(&mut s, "densify_interval", &self.train.densify_interval);
        kv(&mut s, "densify_stop_frac", &self.train.densify_stop_frac);
        kv(&mut s, "mv_start_frac", &self.train.mv_start_frac);
        kv(&mut s, "neighbors", &self.train.neighbors);
        kv(&mut s, "seed", &self.train.seed);
        kv(&mut s, "log_every", &self.train.log_every);
        let b = self.train.background;
        kv(&mut s, "background", &format!("{},{},{}", b[0], b[1], b[2]));
        kv(&mut s, "tau_grow", &self.train.densify.tau_grow);
        kv(&mut s, "tau_prune", &self.train.densify.tau_prune);
        kv(&mut s, "lr_positions", &self.train.lr.positions);
        kv(&mut s, "lr_positions_end", &self.train.lr.positions_end);
        kv(&mut s, "lr_features", &self.train.lr.features);
        kv(&mut s, "lr_offsets", &self.train.lr.offsets);
        kv(&mut s, "lr_logscales", &self.train.lr.logscales);
        kv(&mut s, "lr_decoder", &self.train.lr.decoder);
        kv(&mut s, "lr_embeddings", &self.train.lr.embeddings);
        kv(&mut s, "lr_phi", &self.train.lr.phi);
        s.push_str("\n[loss]\n");
        kv(&mut s, "lambda", &self.train.loss.lambda);
        kv(&mut s, "w_flatten", &self.train.loss.w_flatten);
        kv(&mut s, "w_local", &self.train.loss.w_local);
        kv(&mut s, "w_mv", &self.train.loss.w_mv);
        kv(&mut s, "dssim_on_adjusted", &self.train.loss.dssim_on_adjusted);
        kv(&mut s, "local_weight", &local_weight_text(&self.train.local_weight));
        s.push_str("\n[patch]\n");
        kv(&mut s, "half_size", &self.train.patch.half_size);
        kv(&mut s, "stride", &self.train.patch.stride);
        s.push_str("\n[occlusion]\n");
        kv(&mut s, "pixel_threshold", &self.train.occlusion.pixel_threshold);
        s.push_str("\n[render]\n");
        kv(&mut s, "alpha_clamp", &self.render.alpha_clamp);
        kv(&mut s, "skip_alpha", &self.render.skip_alpha);
        kv(&mut s, "t_stop", &self.render.t_stop);
        kv(&mut s, "dilation", &self.render.dilation);
        kv(&mut s, "near", &self.render.near);
        kv(&mut s, "alpha_valid_min", &self.render.alpha_valid_min);
        kv(&mut s, "min_denom", &self.render.min_denom);
        s.push_str("\n[mesh]\n");
        kv(&mut s, "cells_across", &self.mesh.cells_across);
        kv(&mut s, "min_weight", &self.mesh.min_weight);
        kv(&mut s, "stride", &self.mesh.stride);
        s.push_str("\n[paths]\n");
        kv(&mut s, "scene", &self.paths.scene);
        kv(&mut s, "out", &self.paths.out);
        kv(&mut s, "test_ids", &self.paths.test_ids);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_text();
        let reparsed = PipelineConfig::parse(&text).unwrap();
        assert_eq!(text, reparsed.to_text());
    }

    #[test]
    fn sections_comments_and_overrides_parse() {
        let text = "\
# a comment
[train]
iterations = 77   # trailing comment
background = 0.1, 0.2 , 0.3

[loss]
local_weight = depth_gradient:0.25
lambda = 0.5

[partition]
gx = 3
";
        let cfg = PipelineConfig::parse(text).unwrap();
        assert_eq!(cfg.train.iterations, 77);
        assert_eq!(cfg.train.background, [0.1, 0.2, 0.3]);
        assert_eq!(cfg.train.loss.lambda, 0.5);
        assert!(matches!(
            cfg.train.local_weight,
            LocalWeight::DepthGradient { tau } if tau == 0.25
        ));
        assert_eq!(cfg.partition.gx, 3);
        assert_eq!(cfg.partition.gz, PartitionConfig::default().gz);
    }

    #[test]
    fn unknown_sections_and_keys_are_rejected() {
        assert!(matches!(
            PipelineConfig::parse("[boost]\nx = 1\n"),
            Err(ConfigError::UnknownSection(s)) if s == "boost"
        ));
        assert!(matches!(
            PipelineConfig::parse("[train]\niterate = 1\n"),
            Err(ConfigError::UnknownKey { section, key }) if section == "train" && key == "iterate"
        ));
        let mut cfg = PipelineConfig::default();
        assert!(matches!(
            cfg.apply_set("mesh.voxels=9"),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(matches!(
            cfg.apply_set("mesh cells_across 9"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn bad_values_fail_parse_or_validate() {
        assert!(matches!(
            PipelineConfig::parse("[train]\niterations = -3\n"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            PipelineConfig::parse("[train]\nbackground = 0.1 0.2\n"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            PipelineConfig::parse("[loss]\nlambda = 1.5\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("[train]\niterations = 0\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("[loss]\nlocal_weight = fancy\n"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            PipelineConfig::parse("orphan = 1\n"),
            Err(ConfigError::Line { line: 1, .. })
        ));
    }

    #[test]
    fn set_specs_reach_every_section() {
        let mut cfg = PipelineConfig::default();
        for spec in [
            "lod.levels=3",
            "partition.gz=5",
            "train.seed=9",
            "loss.w_mv=0",
            "patch.half_size=2",
            "occlusion.pixel_threshold=2.5",
            "render.dilation=0.4",
            "mesh.cells_across=64",
            "paths.out=runs/a",
        ] {
            cfg.apply_set(spec).unwrap();
        }
        assert_eq!(cfg.lod.levels, 3);
        assert_eq!(cfg.partition.gz, 5);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.loss.w_mv, 0.0);
        assert_eq!(cfg.train.patch.half_size, 2);
        assert_eq!(cfg.train.occlusion.pixel_threshold, 2.5);
        assert_eq!(cfg.render.dilation, 0.4);
        assert_eq!(cfg.mesh.cells_across, 64);
        assert_eq!(cfg.paths.out, "runs/a");
        cfg.validate().unwrap();
    }

    #[test]
    fn lod_auto_sizing_spans_the_cloud() {
        let points: Vec<Vector3<f64>> = (0..50)
            .map(|i| {
                let t = i as f64 / 49.0;
                Vector3::new(16.0 * t, 2.0 * t, 16.0 * (1.0 - t))
            })
            .collect();
        let settings = LodSettings::default();
        let lod = settings.resolve(&points).unwrap();
        let diag = (16.0f64 * 16.0 * 2.0 + 4.0).sqrt();
        assert!((lod.d_max - diag).abs() < 1e-9);
        assert!(lod.v0 <= 16.0 / 8.0 + 1e-12, "v0 {} too coarse", lod.v0);
        assert!(lod.v0 > 0.0);

        let explicit = LodSettings {
            v0: 0.75,
            d_max: 40.0,
            ..settings
        };
        let lod = explicit.resolve(&[]).unwrap();
        assert_eq!((lod.v0, lod.d_max), (0.75, 40.0));

        assert!(LodSettings::default().resolve(&[]).is_err());
        let one = vec![Vector3::new(1.0, 2.0, 3.0)];
        assert!(LodSettings::default().resolve(&one).is_err());
    }
}
