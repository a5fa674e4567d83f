//! Resolved run configuration.
//!
//! Loaded from a TOML file with one table per section and overridable by
//! `section.key=value` strings. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Limits;
use crate::solver::{ObjectiveConfig, ScheduleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarpConfig {
    /// Width of the depth compositing transition band in pixels.
    pub feather_px: f64,
    pub min_overlap: usize,
    /// Splatting supersampling factor per axis.
    pub supersample: usize,
    pub hole_fill_iters: usize,
    pub tps_lambda: f64,
    /// Flow attenuation ends at this multiple of the landmark hull radius.
    pub falloff_factor: f64,
    /// Gaussian sigma of the feathered face mask in pixels.
    pub blend_sigma: f64,
    /// The estimated face depth stops this many pixels inside the landmark
    /// hull, away from the silhouette.
    pub face_inset_px: f64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        WarpConfig {
            feather_px: 16.0,
            min_overlap: 100,
            supersample: 2,
            hole_fill_iters: 50,
            tps_lambda: 1e-6,
            falloff_factor: 1.5,
            blend_sigma: 8.0,
            face_inset_px: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub schedule: ScheduleConfig,
    pub objective: ObjectiveConfig,
    pub limits: Limits,
    pub warp: WarpConfig,
    pub metrics: MetricsConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Apply `section.key=value` overrides; values use TOML syntax, so
    /// `schedule.ablation.no_reparam=true` and `schedule.lr_cam=1e-3` both work.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let parsed: toml::Table = toml::from_str(&format!("v = {}", value.trim()))
                .or_else(|_| toml::from_str(&format!("v = {:?}", value.trim())))
                .map_err(|e| Error::Config(format!("override `{item}`: {e}")))?;
            let value = parsed["v"].clone();
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields one item");
            let mut cur = &mut table;
            for p in parents {
                cur = cur
                    .get_mut(*p)
                    .and_then(|v| v.as_table_mut())
                    .ok_or_else(|| Error::Config(format!("unknown config section `{p}` in `{key}`")))?;
            }
            if !cur.contains_key(*last) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            cur.insert((*last).to_string(), value);
        }
        let cfg: Config = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Merge a partial configuration given as a JSON object, such as the
    /// `config` member of a problem file.
    pub fn with_json_overrides(&self, partial: &serde_json::Value) -> Result<Self> {
        fn merge(dst: &mut serde_json::Value, src: &serde_json::Value, path: &str) -> Result<()> {
            match (dst, src) {
                (serde_json::Value::Object(d), serde_json::Value::Object(s)) => {
                    for (k, v) in s {
                        let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                        let slot = d
                            .get_mut(k)
                            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
                        merge(slot, v, &key)?;
                    }
                    Ok(())
                }
                (d, s) => {
                    *d = s.clone();
                    Ok(())
                }
            }
        }
        if !partial.is_object() {
            return Err(Error::Config("config overrides must be a JSON object".into()));
        }
        let mut base = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, partial, "")?;
        let cfg: Config = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let o = &self.objective;
        if !(o.lambda_res >= 0.0 && o.lambda_w >= 0.0) {
            return Err(Error::Config("regularization weights must be non-negative".into()));
        }
        if !(o.sigma_floor > 0.0 && o.sigma_init >= o.sigma_floor) {
            return Err(Error::Config("sigma_init must be at least sigma_floor > 0".into()));
        }
        let l = &self.limits;
        if !(l.z_min > 0.0 && l.alpha_min > 0.0 && l.alpha_max > l.alpha_min) {
            return Err(Error::Config("limits must satisfy 0 < alpha_min < alpha_max, z_min > 0".into()));
        }
        let w = &self.warp;
        if w.supersample == 0 || !(w.falloff_factor > 1.0) || !(w.tps_lambda >= 0.0) || !(w.blend_sigma >= 0.0) || !(w.face_inset_px >= 0.0) {
            return Err(Error::Config("invalid warp settings".into()));
        }
        let m = &self.metrics;
        if m.ssim_window % 2 == 0 || !(m.ssim_sigma > 0.0) {
            return Err(Error::Config("ssim_window must be odd and ssim_sigma positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        let text = cfg.to_toml_string();
        assert_eq!(Config::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml_str("[schedule]\nlr_cmm = 1.0\n").is_err());
        assert!(Config::from_toml_str("[bogus]\n").is_err());
        assert!(Config::default().with_overrides(&["schedule.lr_cmm=1"]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let cfg = Config::default()
            .with_overrides(&["schedule.lr_cam=1e-3", "schedule.ablation.no_reparam=true"])
            .unwrap();
        assert_eq!(cfg.schedule.lr_cam, 1e-3);
        assert!(cfg.schedule.ablation.no_reparam);
        assert_eq!(cfg.schedule.lr_face, ScheduleConfig::default().lr_face);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = Config::from_toml_str("[schedule]\ncam_only_iters = 10\n").unwrap();
        assert_eq!(cfg.schedule.cam_only_iters, 10);
        assert_eq!(cfg.warp, WarpConfig::default());
    }

    #[test]
    fn invalid_schedule_rejected() {
        assert!(Config::from_toml_str("[schedule]\ncam_only_iters = 800\n").is_err());
        assert!(Config::from_toml_str("[schedule]\nlr_cam = -1.0\n").is_err());
    }
}
