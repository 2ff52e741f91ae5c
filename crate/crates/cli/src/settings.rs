//! `key = value` configuration shared by every subcommand. Defaults come from
//! the synthetic experiment configuration; a config file overrides them and
//! `--set`/named flags override the file.

use std::fmt::Write;
use std::path::Path;

use anyhow::{Context, Result};
use vxp::experiment::ExperimentConfig;
use vxp::geometry::ProjectionKind;
use vxp::sparse3d::BackboneConfig;
use vxp::trainer::{LrMultiplier, Stage, StageConfig};

/// Rejected configuration input; reported as a usage error.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Clone, Debug)]
pub struct Settings {
    pub seed: u64,
    pub exp: ExperimentConfig,
    pub vfe_dim: usize,
}

pub const KEYS: &[&str] = &[
    "seed",
    "synth.box_min",
    "synth.box_max",
    "synth.points",
    "synth.width",
    "synth.height",
    "synth.jitter_m",
    "synth.noise_m",
    "synth.spacing_m",
    "model.image_channels",
    "model.vfe_dim",
    "model.descriptor_dim",
    "image.epochs",
    "image.lr",
    "image.lr_decay",
    "image.batch",
    "image.margin",
    "local.epochs",
    "local.lr",
    "local.lr_decay",
    "local.batch",
    "local.mode",
    "local.projection",
    "global.epochs",
    "global.lr",
    "global.lr_decay",
    "global.batch",
    "global.backbone_lr_scale",
    "train.pos_thresh_m",
    "train.neg_thresh_m",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, UsageError>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| UsageError(format!("config `{key}`: cannot parse `{v}`: {e}")))
}

fn decay(key: &str, v: &str) -> Result<LrMultiplier, UsageError> {
    if v == "constant" {
        Ok(LrMultiplier::Constant)
    } else {
        Ok(LrMultiplier::Exponential(num(key, v)?))
    }
}

fn decay_str(m: LrMultiplier) -> String {
    match m {
        LrMultiplier::Constant => "constant".into(),
        LrMultiplier::Exponential(f) => f.to_string(),
    }
}

pub fn parse_projection(v: &str) -> Result<ProjectionKind, UsageError> {
    match v {
        "perspective" => Ok(ProjectionKind::Perspective),
        "orthographic" => Ok(ProjectionKind::Orthographic),
        _ => Err(UsageError(format!("unknown projection `{v}` (expected perspective or orthographic)"))),
    }
}

fn projection_str(p: ProjectionKind) -> &'static str {
    match p {
        ProjectionKind::Perspective => "perspective",
        ProjectionKind::Orthographic => "orthographic",
    }
}

impl Default for Settings {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        Self {
            seed: 0,
            vfe_dim: exp.model.backbone.vfe.out_dim,
            exp,
        }
    }
}

impl Settings {
    /// Defaults, then `VXP_SEED`, then the config file, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut s = Settings::default();
        if let Ok(v) = std::env::var("VXP_SEED") {
            s.seed = num("VXP_SEED", v.trim())?;
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = split_pair(line).map_err(|e| UsageError(format!("{}:{}: {}", path.display(), i + 1, e.0)))?;
                s.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            s.set(k, v)?;
        }
        s.sync();
        Ok(s)
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Image => &self.exp.image,
            Stage::Local => &self.exp.local,
            Stage::Global => &self.exp.global,
        }
    }

    fn stage_mut(&mut self, name: &str) -> &mut StageConfig {
        match name {
            "image" => &mut self.exp.image,
            "local" => &mut self.exp.local,
            _ => &mut self.exp.global,
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), UsageError> {
        let v = v.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "synth.box_min" => self.exp.synth.box_count.0 = num(key, v)?,
            "synth.box_max" => self.exp.synth.box_count.1 = num(key, v)?,
            "synth.points" => self.exp.synth.points_per_cloud = num(key, v)?,
            "synth.width" => self.exp.synth.image_width = num(key, v)?,
            "synth.height" => self.exp.synth.image_height = num(key, v)?,
            "synth.jitter_m" => self.exp.synth.pose_jitter_m = num(key, v)?,
            "synth.noise_m" => self.exp.synth.noise_m = num(key, v)?,
            "synth.spacing_m" => self.exp.synth.scene_spacing_m = num(key, v)?,
            "model.image_channels" => {
                let c: Vec<usize> = v.split(',').map(|x| num(key, x.trim())).collect::<Result<_, _>>()?;
                let [a, b, d] = c[..] else {
                    return Err(UsageError(format!("config `{key}`: expected three comma-separated channel counts")));
                };
                self.exp.model.image_channels = [a, b, d];
            }
            "model.vfe_dim" => self.vfe_dim = num(key, v)?,
            "model.descriptor_dim" => self.exp.model.descriptor_dim = num(key, v)?,
            "local.mode" => self.exp.local.local_mode = v.parse().map_err(|e: String| UsageError(format!("config `{key}`: {e}")))?,
            "local.projection" => self.exp.local.projection = parse_projection(v)?,
            "image.margin" => self.exp.image.triplet.margin = num(key, v)?,
            "train.pos_thresh_m" | "train.neg_thresh_m" => {
                let t: f64 = num(key, v)?;
                for c in [&mut self.exp.image, &mut self.exp.local, &mut self.exp.global] {
                    if key.ends_with("pos_thresh_m") {
                        c.pos_thresh_m = t;
                    } else {
                        c.neg_thresh_m = t;
                    }
                }
            }
            _ => {
                let Some((stage, field)) = key.split_once('.').filter(|(s, _)| ["image", "local", "global"].contains(s)) else {
                    return Err(UsageError(format!("unknown config key `{key}`")));
                };
                let c = self.stage_mut(stage);
                match field {
                    "epochs" => c.epochs = num(key, v)?,
                    "lr" => c.base_lr = num(key, v)?,
                    "lr_decay" => c.lr_multiplier = decay(key, v)?,
                    "batch" => c.batch_size = num(key, v)?,
                    "backbone_lr_scale" if stage == "global" => c.backbone_lr_scale = num(key, v)?,
                    _ => return Err(UsageError(format!("unknown config key `{key}`"))),
                }
            }
        }
        Ok(())
    }

    /// Propagates the seed and the point-branch width into derived fields.
    fn sync(&mut self) {
        self.exp.synth.seed = self.seed;
        for c in [&mut self.exp.image, &mut self.exp.local, &mut self.exp.global] {
            c.seed = self.seed;
        }
        self.exp.model.backbone = BackboneConfig::with_feature_dim(self.vfe_dim, self.exp.model.image_channels[2]);
    }

    /// One `key = value` line per key, in `KEYS` order.
    pub fn render(&self) -> String {
        let e = &self.exp;
        let mut out = String::new();
        for key in KEYS {
            let v = match *key {
                "seed" => self.seed.to_string(),
                "synth.box_min" => e.synth.box_count.0.to_string(),
                "synth.box_max" => e.synth.box_count.1.to_string(),
                "synth.points" => e.synth.points_per_cloud.to_string(),
                "synth.width" => e.synth.image_width.to_string(),
                "synth.height" => e.synth.image_height.to_string(),
                "synth.jitter_m" => e.synth.pose_jitter_m.to_string(),
                "synth.noise_m" => e.synth.noise_m.to_string(),
                "synth.spacing_m" => e.synth.scene_spacing_m.to_string(),
                "model.image_channels" => e.model.image_channels.map(|c| c.to_string()).join(","),
                "model.vfe_dim" => self.vfe_dim.to_string(),
                "model.descriptor_dim" => e.model.descriptor_dim.to_string(),
                "image.margin" => e.image.triplet.margin.to_string(),
                "local.mode" => e.local.local_mode.to_string(),
                "local.projection" => projection_str(e.local.projection).into(),
                "train.pos_thresh_m" => e.image.pos_thresh_m.to_string(),
                "train.neg_thresh_m" => e.image.neg_thresh_m.to_string(),
                k => {
                    let (stage, field) = k.split_once('.').unwrap();
                    let c = match stage {
                        "image" => &e.image,
                        "local" => &e.local,
                        _ => &e.global,
                    };
                    match field {
                        "epochs" => c.epochs.to_string(),
                        "lr" => c.base_lr.to_string(),
                        "lr_decay" => decay_str(c.lr_multiplier),
                        "backbone_lr_scale" => c.backbone_lr_scale.to_string(),
                        _ => c.batch_size.to_string(),
                    }
                }
            };
            let _ = writeln!(out, "{key} = {v}");
        }
        out
    }
}

pub fn split_pair(s: &str) -> Result<(String, String), UsageError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| UsageError(format!("expected key=value, got `{s}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut s = Settings::default();
        s.set("local.lr_decay", "constant").unwrap();
        s.set("model.image_channels", "8,8,12").unwrap();
        s.sync();
        let text = s.render();
        let mut t = Settings::default();
        for line in text.lines() {
            let (k, v) = split_pair(line).unwrap();
            t.set(&k, &v).unwrap();
        }
        t.sync();
        assert_eq!(t.render(), text);
        assert_eq!(t.exp.model.backbone.feature_dim(), 12);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut s = Settings::default();
        assert!(s.set("image.nope", "1").is_err());
        assert!(s.set("bogus", "1").is_err());
        assert!(s.set("image.epochs", "x").is_err());
    }
}
