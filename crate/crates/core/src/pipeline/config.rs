//! Runtime configuration: `key = value` text with dotted keys, `#` comments,
//! and strict rejection of unknown keys.

use std::path::{Path, PathBuf};

use super::PipelineError;
use crate::features::FeatureConfig;
use crate::psf::{ProposalConfig, ProposalMode};

/// Sensor pattern the dataset was produced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensorKind {
    Mechanical,
    SolidState,
}

/// Environment preset selecting the particle square side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvMode {
    Indoor,
    Outdoor,
}

/// Full pipeline configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub sensor_pattern: SensorKind,
    pub mode: EnvMode,
    pub psf: ProposalConfig,
    pub psf_sigma_x: f64,
    pub psf_sigma_y: f64,
    pub psf_sigma_yaw: f64,
    pub likelihood_sigma: f64,
    pub likelihood_stride: usize,
    pub features: FeatureConfig,
    pub loop_enabled: bool,
    pub loop_gate: usize,
    pub loop_threshold: f64,
    pub loop_model: Option<PathBuf>,
    pub gps_enabled: bool,
    pub map_radius: f64,
    pub voxel_edge: f64,
    pub voxel_planar: f64,
    pub keyframe_min_translation: f64,
    pub keyframe_min_rotation_deg: f64,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self::indoor()
    }
}

impl Config {
    /// Indoor preset: 1 cm particle square.
    pub fn indoor() -> Self {
        Self {
            sensor_pattern: SensorKind::Mechanical,
            mode: EnvMode::Indoor,
            psf: ProposalConfig::indoor(),
            psf_sigma_x: 0.01,
            psf_sigma_y: 0.01,
            psf_sigma_yaw: 0.2f64.to_radians(),
            likelihood_sigma: 0.25,
            likelihood_stride: 10,
            features: FeatureConfig::default(),
            loop_enabled: true,
            loop_gate: 50,
            loop_threshold: 0.8,
            loop_model: None,
            gps_enabled: false,
            map_radius: 50.0,
            voxel_edge: 0.2,
            voxel_planar: 0.4,
            keyframe_min_translation: 1.0,
            keyframe_min_rotation_deg: 10.0,
            seed: 0,
        }
    }

    /// Outdoor preset: 10 cm particle square.
    pub fn outdoor() -> Self {
        Self {
            mode: EnvMode::Outdoor,
            psf: ProposalConfig::outdoor(),
            ..Self::indoor()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|_| {
            PipelineError::MissingFile(path.to_path_buf())
        })?;
        Self::parse(&text)
    }

    /// Parse configuration text. `mode` selects preset defaults; explicit
    /// keys override them regardless of ordering.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        // First pass: find the mode so later keys override its preset.
        let mut cfg = Config::indoor();
        for (idx, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let (key, value) = split_kv(line, idx + 1)?;
            if key == "mode" {
                cfg = match value {
                    "indoor" => Config::indoor(),
                    "outdoor" => Config::outdoor(),
                    other => {
                        return Err(PipelineError::BadConfigValue {
                            line: idx + 1,
                            key: key.to_string(),
                            message: format!("expected indoor|outdoor, got {other}"),
                        })
                    }
                };
            }
        }
        for (idx, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let n = idx + 1;
            let (key, value) = split_kv(line, n)?;
            match key {
                "mode" => {}
                "sensor.pattern" => {
                    cfg.sensor_pattern = match value {
                        "mechanical" => SensorKind::Mechanical,
                        "solidstate" => SensorKind::SolidState,
                        other => {
                            return Err(PipelineError::BadConfigValue {
                                line: n,
                                key: key.to_string(),
                                message: format!("expected mechanical|solidstate, got {other}"),
                            })
                        }
                    }
                }
                "psf.square_side" => cfg.psf.square_side = parse_num(key, value, n)?,
                "psf.particle_count" => cfg.psf.particle_count = parse_num::<usize>(key, value, n)?,
                "psf.steps_per_cycle" => {
                    cfg.psf.steps_per_cycle = parse_num::<usize>(key, value, n)?
                }
                "psf.mode" => {
                    cfg.psf.mode = match value {
                        "motion" => ProposalMode::MotionModel,
                        "scanmatch" => ProposalMode::ScanMatchRefined,
                        other => {
                            return Err(PipelineError::BadConfigValue {
                                line: n,
                                key: key.to_string(),
                                message: format!("expected motion|scanmatch, got {other}"),
                            })
                        }
                    }
                }
                "psf.sigma_x" => cfg.psf_sigma_x = parse_num(key, value, n)?,
                "psf.sigma_y" => cfg.psf_sigma_y = parse_num(key, value, n)?,
                "psf.sigma_yaw" => cfg.psf_sigma_yaw = parse_num(key, value, n)?,
                "psf.likelihood_sigma" => cfg.likelihood_sigma = parse_num(key, value, n)?,
                "psf.stride" => cfg.likelihood_stride = parse_num::<usize>(key, value, n)?,
                "features.edge_threshold" => cfg.features.edge_threshold = parse_num(key, value, n)?,
                "features.plane_threshold" => {
                    cfg.features.plane_threshold = parse_num(key, value, n)?
                }
                "loop.enabled" => cfg.loop_enabled = parse_bool(key, value, n)?,
                "loop.gate" => cfg.loop_gate = parse_num::<usize>(key, value, n)?,
                "loop.threshold" => cfg.loop_threshold = parse_num(key, value, n)?,
                "loop.model" => cfg.loop_model = Some(PathBuf::from(value)),
                "gps.enabled" => cfg.gps_enabled = parse_bool(key, value, n)?,
                "map.radius" => cfg.map_radius = parse_num(key, value, n)?,
                "map.voxel_edge" => cfg.voxel_edge = parse_num(key, value, n)?,
                "map.voxel_planar" => cfg.voxel_planar = parse_num(key, value, n)?,
                "keyframe.min_translation" => {
                    cfg.keyframe_min_translation = parse_num(key, value, n)?
                }
                "keyframe.min_rotation_deg" => {
                    cfg.keyframe_min_rotation_deg = parse_num(key, value, n)?
                }
                "seed" => cfg.seed = parse_num::<u64>(key, value, n)?,
                unknown => {
                    return Err(PipelineError::UnknownConfigKey {
                        line: n,
                        key: unknown.to_string(),
                    })
                }
            }
        }
        Ok(cfg)
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => line[..i].trim(),
        None => line.trim(),
    }
}

fn split_kv(line: &str, n: usize) -> Result<(&str, &str), PipelineError> {
    let Some((key, value)) = line.split_once('=') else {
        return Err(PipelineError::BadConfigValue {
            line: n,
            key: line.to_string(),
            message: "expected key = value".into(),
        });
    };
    Ok((key.trim(), value.trim()))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, n: usize) -> Result<T, PipelineError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| PipelineError::BadConfigValue {
        line: n,
        key: key.to_string(),
        message: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str, n: usize) -> Result<bool, PipelineError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(PipelineError::BadConfigValue {
            line: n,
            key: key.to_string(),
            message: format!("expected true|false, got {other}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_wire_the_published_constants() {
        let indoor = Config::indoor();
        assert_eq!(indoor.psf.square_side, 0.01);
        assert_eq!(indoor.psf.steps_per_cycle, 10);
        assert!(!indoor.gps_enabled);
        let outdoor = Config::outdoor();
        assert_eq!(outdoor.psf.square_side, 0.10);
        assert_eq!(outdoor.psf.steps_per_cycle, 10);
        assert!(!outdoor.gps_enabled);
    }

    #[test]
    fn parse_round_trip_and_overrides() {
        let text = "\n# test config\nmode = outdoor\npsf.particle_count = 200\nseed = 9\nloop.threshold = 0.9  # inline comment\n";
        let cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.mode, EnvMode::Outdoor);
        assert_eq!(cfg.psf.square_side, 0.10);
        assert_eq!(cfg.psf.particle_count, 200);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.loop_threshold, 0.9);
    }

    #[test]
    fn explicit_square_side_overrides_mode_in_any_order() {
        let cfg = Config::parse("psf.square_side = 0.5\nmode = outdoor\n").unwrap();
        assert_eq!(cfg.psf.square_side, 0.5);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = Config::parse("bogus.key = 1\n").unwrap_err();
        assert!(matches!(err, PipelineError::UnknownConfigKey { line: 1, .. }));
    }

    #[test]
    fn malformed_value_names_line() {
        let err = Config::parse("\npsf.particle_count = many\n").unwrap_err();
        match err {
            PipelineError::BadConfigValue { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
