use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autograd::conv_output_extent;
use crate::data::ShapesSpec;
use crate::npa::NpaConfig;
use crate::parallel::Execution;

use super::NetError;

pub const KERNEL: usize = 3;
pub const PADDING: usize = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    #[default]
    Npa,
    LearnedAttention,
    AvgPool,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Npa => "npa",
            HeadKind::LearnedAttention => "learned-attention",
            HeadKind::AvgPool => "avg-pool",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub head: HeadKind,
    pub npa: NpaConfig,
    /// Per-stage downsampling strides, each 1 or 2.
    pub strides: Vec<usize>,
    /// Per-stage output channels.
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Cross-entropy weight in the distillation loss.
    pub alpha: Option<f64>,
    pub teacher_checkpoint: Option<PathBuf>,
    pub dataset: ShapesSpec,
    pub execution: Execution,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            head: HeadKind::Npa,
            npa: NpaConfig::default(),
            strides: vec![2, 2, 2, 1],
            channels: vec![8, 16, 32, 32],
            epochs: 20,
            batch_size: 10,
            learning_rate: 0.01,
            momentum: 0.9,
            alpha: None,
            teacher_checkpoint: None,
            dataset: ShapesSpec::default(),
            execution: Execution::Parallel,
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; errors carry the dotted path of the offending field.
    pub fn from_toml_str(text: &str) -> Result<Self, NetError> {
        let de = toml::Deserializer::new(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| NetError::Config {
            field: e.path().to_string(),
            reason: e.inner().message().trim().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json_str(text: &str) -> Result<Self, NetError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| NetError::Config {
            field: e.path().to_string(),
            reason: e.inner().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// `alpha` must be present exactly when training against a teacher.
    pub fn check_teacher(&self, has_teacher: bool) -> Result<(), NetError> {
        match (has_teacher, self.alpha.is_some()) {
            (true, false) => Err(NetError::Config {
                field: "alpha".into(),
                reason: "distillation from a teacher requires alpha".into(),
            }),
            (false, true) => Err(NetError::Config {
                field: "alpha".into(),
                reason: "alpha given without a teacher".into(),
            }),
            _ => Ok(()),
        }
    }

    /// Spatial extent of the final feature volume.
    pub fn feature_extent(&self) -> Result<usize, NetError> {
        let mut n = self.dataset.size;
        for (i, &s) in self.strides.iter().enumerate() {
            n = conv_output_extent(n, KERNEL, s, PADDING).map_err(|e| NetError::Config {
                field: format!("strides[{i}]"),
                reason: e.to_string(),
            })?;
        }
        Ok(n)
    }

    pub fn feature_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |field: &str, reason: String| NetError::Config {
            field: field.into(),
            reason,
        };
        if self.strides.is_empty() {
            return Err(bad("strides", "at least one stage required".into()));
        }
        if let Some(i) = self.strides.iter().position(|s| !(1..=2).contains(s)) {
            return Err(bad(
                &format!("strides[{i}]"),
                format!("stride {} not in {{1, 2}}", self.strides[i]),
            ));
        }
        if self.channels.len() != self.strides.len() {
            return Err(bad(
                "channels",
                format!(
                    "{} entries for {} stages",
                    self.channels.len(),
                    self.strides.len()
                ),
            ));
        }
        if let Some(i) = self.channels.iter().position(|c| *c == 0) {
            return Err(bad(&format!("channels[{i}]"), "zero channels".into()));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(bad(
                "learning_rate",
                format!("{} must be finite and ≥ 0", self.learning_rate),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", format!("{} outside [0, 1)", self.momentum)));
        }
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(bad("alpha", format!("{a} outside [0, 1]")));
            }
        }
        if self.teacher_checkpoint.is_some() && self.alpha.is_none() {
            return Err(bad("alpha", "a teacher checkpoint requires alpha".into()));
        }
        self.npa.validate().map_err(|e| bad("npa", e.to_string()))?;
        self.dataset
            .validate()
            .map_err(|e| bad("dataset", e.to_string()))?;
        let extent = self.feature_extent()?;
        if self.head != HeadKind::AvgPool && self.npa.n > extent * extent {
            return Err(bad(
                "npa.n",
                format!(
                    "N exceeds spatial positions: N = {}, H·W = {}",
                    self.npa.n,
                    extent * extent
                ),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_extents() {
        let c = ExperimentConfig::default();
        assert_eq!(c.feature_extent().unwrap(), 4);
        let s = ExperimentConfig {
            strides: vec![2, 2, 1, 1],
            ..c
        };
        assert_eq!(s.feature_extent().unwrap(), 8);
    }

    #[test]
    fn toml_field_paths() {
        let err = ExperimentConfig::from_toml_str("epochs = \"ten\"").unwrap_err();
        assert!(
            matches!(&err, NetError::Config { field, .. } if field == "epochs"),
            "{err}"
        );
        let err = ExperimentConfig::from_toml_str("[npa]\nrefine = 3").unwrap_err();
        assert!(
            matches!(&err, NetError::Config { field, .. } if field == "npa.refine"),
            "{err}"
        );
        let err = ExperimentConfig::from_toml_str("colour = 1").unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn alpha_iff_teacher() {
        let c = ExperimentConfig::from_toml_str("alpha = 0.5").unwrap();
        assert!(
            matches!(c.check_teacher(false), Err(NetError::Config { field, .. }) if field == "alpha")
        );
        c.check_teacher(true).unwrap();
        let err = ExperimentConfig::from_toml_str("teacher_checkpoint = \"t.ckpt\"").unwrap_err();
        assert!(matches!(&err, NetError::Config { field, .. } if field == "alpha"));
        ExperimentConfig::from_toml_str("alpha = 0.5\nteacher_checkpoint = \"t.ckpt\"").unwrap();
        let err = ExperimentConfig::from_toml_str("alpha = 1.5\nteacher_checkpoint = \"t.ckpt\"")
            .unwrap_err();
        assert!(matches!(&err, NetError::Config { field, .. } if field == "alpha"));
    }

    #[test]
    fn json_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json_str(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn too_many_representatives() {
        let c = ExperimentConfig {
            npa: NpaConfig::default().with_n(17),
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("H·W = 16"));
    }
}
