use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentConfig;
use crate::backbone::{BackboneConfig, PetConfig};
use crate::data::SyntheticSpec;
use crate::error::{CilError, Result};
use crate::prototypes::CovarianceKind;
use crate::training::{HeadKind, LossConfig, Schedule};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// Local classifier only.
    None,
    /// Retrain the head from uncompensated prototypes.
    Ca,
    /// Retrain the head from shift-compensated prototypes.
    #[default]
    Ssca,
}

impl AlignMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignMode::None => "none",
            AlignMode::Ca => "ca",
            AlignMode::Ssca => "ssca",
        }
    }
}

impl std::str::FromStr for AlignMode {
    type Err = CilError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AlignMode::None),
            "ca" => Ok(AlignMode::Ca),
            "ssca" => Ok(AlignMode::Ssca),
            other => Err(CilError::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftEstimator {
    /// Similarity-weighted drift of new-class prototypes.
    #[default]
    Prototype,
    /// Kernel-weighted per-sample drift.
    Sample,
    /// Mean drift of the `k` nearest current samples.
    Knearest(usize),
    /// True shift from retained old samples (diagnostic upper bound).
    Oracle,
}

impl ShiftEstimator {
    pub fn label(self) -> String {
        match self {
            ShiftEstimator::Knearest(k) => format!("knearest-{k}"),
            ShiftEstimator::Prototype => "prototype".into(),
            ShiftEstimator::Sample => "sample".into(),
            ShiftEstimator::Oracle => "oracle".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftConfig {
    pub estimator: ShiftEstimator,
    pub clamp_negative_weights: bool,
    /// Kernel width for the sample estimator; median pairwise distance when unset.
    pub bandwidth: Option<f64>,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            estimator: ShiftEstimator::Prototype,
            clamp_negative_weights: true,
            bandwidth: None,
        }
    }
}

/// Which sessions update the attachment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    None,
    FirstSession,
    #[default]
    AllSessions,
}

impl Regime {
    pub fn trains(self, session: usize) -> bool {
        match self {
            Regime::None => false,
            Regime::FirstSession => session == 0,
            Regime::AllSessions => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::None => "none",
            Regime::FirstSession => "first_session",
            Regime::AllSessions => "all_sessions",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShot {
    pub shots: usize,
    /// First 1-based session that is reduced.
    pub from_session: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Synthetic,
    /// Embedding CSV; sessions come from the file.
    Embeddings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: Source,
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Seed of the generated dataset; experiment seeds only change class
    /// order and training randomness.
    pub data_seed: u64,
    pub sessions: usize,
    pub fewshot: Option<FewShot>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: Source::Synthetic,
            path: None,
            synthetic: SyntheticSpec::default(),
            data_seed: 7,
            sessions: 5,
            fewshot: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    /// Pretrained weights to load instead of pretraining on the base classes.
    pub weights: Option<PathBuf>,
    pub pet: PetConfig,
    pub head: HeadKind,
    pub loss: LossConfig,
    pub schedule: Schedule,
    pub pretrain: Schedule,
    pub probe: Schedule,
    pub alignment: AlignmentConfig,
    pub mode: AlignMode,
    pub shift: ShiftConfig,
    pub regime: Regime,
    pub covariance: CovarianceKind,
    pub data: DataConfig,
    /// Use the stream's vectors directly as features (no backbone).
    pub bypass_backbone: bool,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Write measured wall-clock times; zeros otherwise, keeping reports
    /// byte-reproducible.
    pub record_timings: bool,
    pub sensitivity_epsilon: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            weights: None,
            pet: PetConfig::default(),
            head: HeadKind::Cosine,
            loss: LossConfig::default(),
            schedule: Schedule::default(),
            pretrain: Schedule {
                lr0: 0.05,
                ..Schedule::default()
            },
            probe: Schedule {
                lr0: 0.1,
                ..Schedule::default()
            },
            alignment: AlignmentConfig::default(),
            mode: AlignMode::Ssca,
            shift: ShiftConfig::default(),
            regime: Regime::AllSessions,
            covariance: CovarianceKind::Full,
            data: DataConfig::default(),
            bypass_backbone: false,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("out"),
            record_timings: false,
            sensitivity_epsilon: 1e-3,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CilError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CilError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.pretrain.validate()?;
        self.probe.validate()?;
        self.alignment.validate()?;
        if self.seeds.is_empty() {
            return Err(CilError::Config("at least one seed is required".into()));
        }
        if self.data.sessions == 0 && self.data.source == Source::Synthetic {
            return Err(CilError::Config("sessions must be positive".into()));
        }
        if self.data.source == Source::Embeddings && self.data.path.is_none() {
            return Err(CilError::Config("embedding source needs data.path".into()));
        }
        if self.data.source == Source::Embeddings && !self.bypass_backbone && self.weights.is_none() {
            return Err(CilError::Config(
                "embedding input through the backbone needs pretrained `weights`".into(),
            ));
        }
        if self.data.source == Source::Synthetic && self.data.synthetic.input_dim != self.backbone.input_dim && !self.bypass_backbone {
            return Err(CilError::Config(format!(
                "synthetic input_dim {} differs from backbone input_dim {}",
                self.data.synthetic.input_dim, self.backbone.input_dim
            )));
        }
        if let Some(b) = self.shift.bandwidth {
            if !(b > 0.0) {
                return Err(CilError::Config(format!("bandwidth must be positive, got {b}")));
            }
        }
        if !(self.sensitivity_epsilon > 0.0) {
            return Err(CilError::Config("sensitivity_epsilon must be positive".into()));
        }
        Ok(())
    }
}
