use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::RotationResidual;

use super::{read_text, SparseIoError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    #[default]
    None,
    CostMaps,
}

/// Run configuration. Absent JSON keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub growth_factor: f64,
    pub theta: f64,
    pub cauchy_scale: f64,
    pub inner_max_iterations: usize,
    pub inner_tolerance: f64,
    pub feature_mode: FeatureMode,
    pub rotation_residual: RotationResidual,
    pub frames_dir: Option<PathBuf>,
    pub gt_extrinsics: Option<PathBuf>,
    pub features_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            lambda1: 0.01,
            lambda2: 0.01,
            lambda3: 0.01,
            lambda4: 0.02,
            lambda5: 0.02,
            growth_factor: 2.0,
            theta: 1e6,
            cauchy_scale: 0.25,
            inner_max_iterations: 20,
            inner_tolerance: 1e-9,
            feature_mode: FeatureMode::None,
            rotation_residual: RotationResidual::Geodesic,
            frames_dir: None,
            gt_extrinsics: None,
            features_dir: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), SparseIoError> {
        let invalid = |key: &str, reason: &str| {
            Err(SparseIoError::InvalidValue {
                key: key.into(),
                reason: reason.into(),
            })
        };
        let lambdas = [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
        ];
        for (key, v) in lambdas {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(key, "must be finite and nonnegative");
            }
        }
        // The schedule only terminates when lambda1 grows past theta.
        if self.lambda1 <= 0.0 {
            return invalid("lambda1", "must be positive");
        }
        if !(self.growth_factor.is_finite() && self.growth_factor > 1.0) {
            return invalid("growth_factor", "must be greater than 1");
        }
        if !self.theta.is_finite() {
            return invalid("theta", "must be finite");
        }
        if !(self.cauchy_scale.is_finite() && self.cauchy_scale > 0.0) {
            return invalid("cauchy_scale", "must be positive");
        }
        if self.inner_max_iterations == 0 {
            return invalid("inner_max_iterations", "must be positive");
        }
        if !(self.inner_tolerance.is_finite() && self.inner_tolerance > 0.0) {
            return invalid("inner_tolerance", "must be positive");
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, SparseIoError> {
    let bad = |reason: String| SparseIoError::InvalidValue {
        key: "config".into(),
        reason,
    };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if !value.is_object() {
        return Err(bad("expected a JSON object".into()));
    }
    let config: RunConfig = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig, SparseIoError> {
    parse_config(&read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = parse_config("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.lambda1, c.theta, c.cauchy_scale), (0.01, 1e6, 0.25));
    }

    #[test]
    fn growth_factor_must_exceed_one() {
        assert!(matches!(
            parse_config(r#"{"growth_factor": 1.0}"#),
            Err(SparseIoError::InvalidValue { key, .. }) if key == "growth_factor"
        ));
    }

    #[test]
    fn zero_feature_weight_is_valid() {
        let c = parse_config(r#"{"lambda3": 0.0, "feature_mode": "cost_maps"}"#).unwrap();
        assert_eq!(c.lambda3, 0.0);
        assert_eq!(c.feature_mode, FeatureMode::CostMaps);
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        assert!(parse_config(r#"{"lamda1": 1}"#).is_err());
        assert!(parse_config(r#"{"lambda2": -1}"#).is_err());
        assert!(parse_config(r#"{"lambda1": 0}"#).is_err());
        assert!(parse_config("[1, 2]").is_err());
    }
}
