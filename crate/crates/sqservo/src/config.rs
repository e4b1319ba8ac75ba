//! Scenario files. Every key is optional (missing keys take the library
//! defaults) and unknown keys are rejected.

use std::fs;
use std::path::Path;

use sqservo_core::geometry::StereoRig;
use sqservo_core::sim::ScenarioConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid scenario file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize scenario: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
}

fn invalid(key: &'static str, reason: impl ToString) -> ConfigError {
    ConfigError::Invalid { key, reason: reason.to_string() }
}

pub fn parse(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let cfg: ScenarioConfig = toml::from_str(text)?;
    validate(&cfg)?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse(&text)
}

pub fn to_toml(cfg: &ScenarioConfig) -> Result<String, ConfigError> {
    Ok(toml::to_string(cfg)?)
}

/// Range checks the deserializer cannot express.
pub fn validate(cfg: &ScenarioConfig) -> Result<(), ConfigError> {
    StereoRig::from_config(&cfg.rig).map_err(|e| invalid("rig", e))?;
    cfg.servo.gains.validate().map_err(|e| invalid("servo.gains", e))?;
    if !(cfg.servo.dt > 0.0 && cfg.servo.dt.is_finite()) {
        return Err(invalid("servo.dt", "must be positive"));
    }
    if cfg.servo.max_iters == 0 {
        return Err(invalid("servo.max_iters", "must be positive"));
    }
    if !(cfg.servo.half_side > 0.0) {
        return Err(invalid("servo.half_side", "must be positive"));
    }
    if cfg.filter.particles < 2 {
        return Err(invalid("filter.particles", "need at least 2"));
    }
    if cfg.filter.window == 0 {
        return Err(invalid("filter.window", "must be positive"));
    }
    cfg.filter.noise.validate().map_err(|e| invalid("filter.noise", e))?;
    if !(cfg.pixel_noise >= 0.0) {
        return Err(invalid("pixel_noise", "must be non-negative"));
    }
    if !(cfg.cloud_noise >= 0.0) {
        return Err(invalid("cloud_noise", "must be non-negative"));
    }
    if cfg.cloud_grid.iter().any(|&n| n < 2) {
        return Err(invalid("cloud_grid", "need at least 2 samples per angle"));
    }
    cfg.object.superquadric().map_err(|e| invalid("object", e))?;
    if cfg.grasp.points < 4 {
        return Err(invalid("grasp.points", "need at least 4"));
    }
    if !(cfg.grasp.clearance >= 0.0) || !(cfg.grasp.pregrasp_offset >= 0.0) {
        return Err(invalid("grasp", "clearance and pregrasp_offset must be non-negative"));
    }
    if !(cfg.bias.position >= 0.0) || !(cfg.bias.angle_deg >= 0.0) {
        return Err(invalid("bias", "magnitudes must be non-negative"));
    }
    Ok(())
}
