// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration: one TOML file, every section optional.
//!
//! ```toml
//! [world]
//! n_facts = 300
//!
//! [edit]
//! mode = "dual"
//! alpha = "auto"   # or a number in [0, 1]
//! t = 20
//!
//! [sweep]
//! alphas = [0.0, 0.5, 1.0]
//! ts = [20]
//! ```
//!
//! Unknown keys are rejected. Command-line flags override file values.

use std::fs;
use std::path::{Path, PathBuf};

use kedit_core::edit::{EditConfig, EditMode, TargetMode};
use kedit_core::experiment::{EvalConfig, TraceConfig};
use kedit_core::hash::Fingerprint;
use kedit_core::kv::CovarianceConfig;
use kedit_core::model::ModelConfig;
use kedit_core::train::TrainConfig;
use kedit_core::world::WorldConfig;
use serde::{Deserialize, Serialize};

use crate::LabError;

/// A fixed balance factor, or the one measured by tracing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AlphaRepr", into = "AlphaRepr")]
pub enum AlphaSetting {
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AlphaRepr {
    Number(f64),
    Word(String),
}

impl TryFrom<AlphaRepr> for AlphaSetting {
    type Error = String;

    fn try_from(r: AlphaRepr) -> Result<Self, String> {
        match r {
            AlphaRepr::Number(a) if (0.0..=1.0).contains(&a) => Ok(AlphaSetting::Fixed(a)),
            AlphaRepr::Number(a) => Err(format!("alpha {a} outside [0, 1]")),
            AlphaRepr::Word(w) if w == "auto" => Ok(AlphaSetting::Auto),
            AlphaRepr::Word(w) => Err(format!("alpha must be \"auto\" or a number, got {w:?}")),
        }
    }
}

impl From<AlphaSetting> for AlphaRepr {
    fn from(a: AlphaSetting) -> Self {
        match a {
            AlphaSetting::Auto => AlphaRepr::Word("auto".into()),
            AlphaSetting::Fixed(v) => AlphaRepr::Number(v),
        }
    }
}

impl std::str::FromStr for AlphaSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(AlphaSetting::Auto);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| format!("alpha must be \"auto\" or a number, got {s:?}"))?;
        AlphaSetting::try_from(AlphaRepr::Number(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub mode: EditMode,
    pub alpha: AlphaSetting,
    /// Batch size.
    pub t: usize,
    pub target: TargetMode,
    /// Seed of the counterfact draw.
    pub seed: u64,
    pub plan: EditConfig,
}

impl Default for EditSection {
    fn default() -> Self {
        Self {
            mode: EditMode::Dual,
            alpha: AlphaSetting::Auto,
            t: 20,
            target: TargetMode::Counterfact,
            seed: 0,
            plan: EditConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub modes: Vec<EditMode>,
    pub alphas: Vec<f64>,
    pub ts: Vec<usize>,
    /// Also runs every dual cell with identity targets.
    pub identity_control: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            modes: vec![EditMode::Dual],
            alphas: (0..=10).map(|i| i as f64 / 10.0).collect(),
            ts: vec![20],
            identity_control: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    /// Without tracing, windows and alpha must be given explicitly.
    pub trace: bool,
}

impl Default for StageSection {
    fn default() -> Self {
        Self { trace: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    /// Every artifact lives under this directory.
    pub out_dir: PathBuf,
}

impl Default for PathSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stages: StageSection,
    pub trace: TraceConfig,
    pub covariance: CovarianceConfig,
    pub edit: EditSection,
    pub eval: EvalConfig,
    pub sweep: SweepSection,
    pub paths: PathSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, LabError> {
        toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))
    }

    /// Loads `path`; a relative `out_dir` is taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.paths.out_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.paths.out_dir = base.join(&cfg.paths.out_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.model.vocab_size != self.world.vocab_size {
            return bad(format!(
                "model.vocab_size {} differs from world.vocab_size {}",
                self.model.vocab_size, self.world.vocab_size
            ));
        }
        self.model.validate()?;
        if !self.stages.trace {
            if self.edit.alpha == AlphaSetting::Auto {
                return bad("edit.alpha = \"auto\" requires stages.trace = true".into());
            }
            if self.trace.s_mlp.is_none() || self.trace.s_attn.is_none() {
                return bad("trace.s_mlp and trace.s_attn are required when stages.trace = false".into());
            }
        }
        if self.edit.t == 0 {
            return bad("edit.t must be at least 1".into());
        }
        if self.sweep.ts.contains(&0) {
            return bad("sweep.ts entries must be at least 1".into());
        }
        if let Some(a) = self.sweep.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return bad(format!("sweep.alphas entry {a} outside [0, 1]"));
        }
        Ok(())
    }

    /// Hash of the canonical JSON form; output paths are excluded so the
    /// same experiment hashes the same wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathSection::default();
        let json = serde_json::to_vec(&c).expect("config serializes");
        let mut f = Fingerprint::new();
        f.bytes(b"kedit-config").bytes(&json);
        f.hex()
    }
}
