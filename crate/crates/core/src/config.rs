//! Hyperparameter registry.
//!
//! A config file is plain text, one `key = value` per line, `#` starts a
//! comment. Keys not present keep their defaults; unknown keys and values out
//! of range are errors. [`PipelineConfig::to_text`] writes every key, so
//! `load(to_text(c)) == c`.

use std::path::Path;

use crate::error::{Error, Result};

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "true" | "1" | "yes" | "on" => Some(true),
            "false" | "0" | "no" | "off" => Some(false),
            _ => None,
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

macro_rules! pipeline_config {
    ($( $(#[$doc:meta])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct PipelineConfig {
            $( $(#[$doc])* pub $name: $ty, )*
        }

        impl Default for PipelineConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl PipelineConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($name), )*];

            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $( stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value)
                            .ok_or_else(|| format!("cannot parse value {value:?} for {key}"))?;
                        Ok(())
                    } )*
                    _ => Err(format!("unknown key {key:?}")),
                }
            }

            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( out.push_str(&format!("{} = {}\n", stringify!($name), ConfigValue::render(&self.$name))); )*
                out
            }
        }
    };
}

pipeline_config! {
    /// Hierarchy levels of the distortion interval search.
    distortion_levels: usize = 3,
    distortion_samples_per_level: usize = 10,
    distortion_min: f64 = -1.0,
    distortion_max: f64 = 1.0,
    /// Skip distortion estimation and keep α = 0 for every camera.
    distortion_estimation: bool = true,
    /// L1 re-weighting iterations of every two-view fit (0 = plain least squares).
    fit_irls_iters: usize = 5,

    fov_min_deg: f64 = 20.0,
    fov_max_deg: f64 = 160.0,
    focal_samples: usize = 100,
    /// Temperature of the focal validity vote.
    tau: f64 = 0.01,
    /// Used for cameras that never get a usable pair.
    fallback_fov_deg: f64 = 60.0,

    pair_inlier_threshold_start: f64 = 100.0,
    pair_inlier_threshold_min: f64 = 15.0,
    rotation_lr: f64 = 1e-4,
    rotation_steps: usize = 2000,
    /// Stop when the loss changes by less than this (relative) over 100 steps.
    rotation_early_stop: f64 = 1e-9,

    /// Sampson distance in pixels above which a correspondence is left out
    /// of track building.
    match_verify_px: f64 = 2.0,
    track_completion: bool = true,
    /// Tracks longer than this keep only their original edges.
    track_completion_cap: usize = 200,

    relative_min_inliers: usize = 15,
    sphere_samples: usize = 1024,
    sphere_refine_levels: usize = 2,
    /// Grid size per axis of each local sphere refinement.
    sphere_refine_grid: usize = 11,
    translation_lr: f64 = 1e-3,
    translation_steps: usize = 8000,
    translation_inits: usize = 3,

    epipolar_adjustment: bool = true,
    epipolar_lr: f64 = 1e-4,
    lr_decay: f64 = 2.0,
    prune_rounds: usize = 3,
    prune_threshold_start: f64 = 0.01,
    prune_threshold_end: f64 = 0.005,
    irls_iters_between_prunes: usize = 3,
    epipolar_steps_per_iter: usize = 300,
    /// Lower clamp on |residual| in IRLS weights.
    irls_residual_floor: f64 = 1e-6,
    focal_refine: bool = true,

    triangulation_min_track_inliers: usize = 3,
    triangulation_min_angle_deg: f64 = 1.5,
    reproj_outlier_px: f64 = 4.0,
    triangulation_max_pairs: usize = 50,

    adam_beta1: f64 = 0.9,
    adam_beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
}

impl PipelineConfig {
    /// Parses config text; an empty string yields the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|message| Error::Parse {
                line: lineno + 1,
                message,
            })?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    /// Loads from a file, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text)
            }
        }
    }

    pub fn check(&self) -> Result<()> {
        let range = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("out of range: {what}")))
            }
        };
        range(self.distortion_levels >= 1, "distortion_levels >= 1")?;
        range(
            self.distortion_samples_per_level >= 3,
            "distortion_samples_per_level >= 3",
        )?;
        range(
            self.distortion_min < self.distortion_max,
            "distortion_min < distortion_max",
        )?;
        range(
            self.fov_min_deg > 0.0 && self.fov_min_deg < self.fov_max_deg && self.fov_max_deg < 180.0,
            "0 < fov_min_deg < fov_max_deg < 180",
        )?;
        range(self.focal_samples >= 1, "focal_samples >= 1")?;
        range(self.tau > 0.0, "tau > 0")?;
        range(
            self.fallback_fov_deg > 0.0 && self.fallback_fov_deg < 180.0,
            "fallback_fov_deg in (0, 180)",
        )?;
        range(
            self.pair_inlier_threshold_min >= 1.0 && self.pair_inlier_threshold_start >= self.pair_inlier_threshold_min,
            "1 <= pair_inlier_threshold_min <= pair_inlier_threshold_start",
        )?;
        range(
            self.rotation_lr > 0.0 && self.translation_lr > 0.0 && self.epipolar_lr > 0.0,
            "learning rates > 0",
        )?;
        range(
            self.rotation_steps >= 1 && self.translation_steps >= 1,
            "step counts >= 1",
        )?;
        range(self.rotation_early_stop >= 0.0, "rotation_early_stop >= 0")?;
        range(self.track_completion_cap >= 2, "track_completion_cap >= 2")?;
        range(self.match_verify_px > 0.0, "match_verify_px > 0")?;
        range(self.relative_min_inliers >= 1, "relative_min_inliers >= 1")?;
        range(self.sphere_samples >= 8, "sphere_samples >= 8")?;
        range(self.sphere_refine_grid >= 3, "sphere_refine_grid >= 3")?;
        range(self.translation_inits >= 1, "translation_inits >= 1")?;
        range(self.lr_decay >= 1.0, "lr_decay >= 1")?;
        range(self.prune_rounds >= 1, "prune_rounds >= 1")?;
        range(
            self.prune_threshold_end > 0.0 && self.prune_threshold_start >= self.prune_threshold_end,
            "0 < prune_threshold_end <= prune_threshold_start",
        )?;
        range(self.irls_iters_between_prunes >= 1, "irls_iters_between_prunes >= 1")?;
        range(self.epipolar_steps_per_iter >= 1, "epipolar_steps_per_iter >= 1")?;
        range(self.irls_residual_floor > 0.0, "irls_residual_floor > 0")?;
        range(
            self.triangulation_min_track_inliers >= 2,
            "triangulation_min_track_inliers >= 2",
        )?;
        range(
            self.triangulation_min_angle_deg >= 0.0,
            "triangulation_min_angle_deg >= 0",
        )?;
        range(self.reproj_outlier_px > 0.0, "reproj_outlier_px > 0")?;
        range(self.triangulation_max_pairs >= 1, "triangulation_max_pairs >= 1")?;
        range(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps > 0.0,
            "adam betas in [0, 1), eps > 0",
        )?;
        Ok(())
    }

    /// Pruning threshold of round `round`, linear from start to end.
    pub fn prune_threshold(&self, round: usize) -> f64 {
        if self.prune_rounds <= 1 {
            return self.prune_threshold_end;
        }
        let t = round.min(self.prune_rounds - 1) as f64 / (self.prune_rounds - 1) as f64;
        self.prune_threshold_start + t * (self.prune_threshold_end - self.prune_threshold_start)
    }
}
