//! Study configuration (TOML). Every section is optional; missing keys take
//! the defaults of the full nine-bus study.

use std::path::Path;

use gridnode::datagen::SimConfig;
use gridnode::models::ModelConfig;
use gridnode::powergrid::{ieee9_model, pair2_model, triangle3_model, GridConfig, GridModel};
use gridnode::training::{SweepGrid, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed; `--seed` overrides it.
    pub seed: u64,
    pub grid: GridSection,
    pub excitation: ExcitationSection,
    pub simulation: SimConfig,
    pub noise: NoiseSection,
    pub slicing: SlicingSection,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub sweep: SweepGrid,
    pub transfer: TransferSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// `ieee9`, `triangle3`, `pair2` or `custom`.
    pub case: String,
    /// Node and edge records, used when `case = "custom"`.
    pub custom: Option<GridConfig>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            case: "ieee9".into(),
            custom: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcitationSection {
    /// Lengths in seconds of the trajectories behind D1, D2, D3 and D4.
    pub durations: Vec<f64>,
    /// Seconds between setpoint steps.
    pub period: f64,
    /// Half-width of the uniform setpoint offsets, pu.
    pub amplitude: f64,
}

impl Default for ExcitationSection {
    fn default() -> Self {
        Self {
            durations: vec![1000.0; 4],
            period: 5.0,
            amplitude: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// Signal-to-noise ratio in dB; `inf` disables noise.
    pub snr_db: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { snr_db: 30.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlicingSection {
    /// `H`, `K` and `D` of D1 to D3.
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
    /// `H = K = D` of D4, whose windows start at setpoint steps.
    pub test_window: usize,
}

impl Default for SlicingSection {
    fn default() -> Self {
        Self {
            history: 64,
            horizon: 64,
            stride: 16,
            test_window: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub scenario: String,
    pub fraction: f64,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self {
            scenario: "ieee9-add-node".into(),
            fraction: 0.1,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Config = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    /// Canonical TOML form.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.excitation.durations.len() != 4 {
            return bad(format!("excitation.durations needs 4 entries, got {}", self.excitation.durations.len()));
        }
        if self.excitation.durations.iter().any(|d| !(*d > 0.0)) || !(self.excitation.period > 0.0) {
            return bad("excitation durations and period must be > 0".into());
        }
        if self.noise.snr_db.is_nan() {
            return bad("noise.snr_db must be a number or inf".into());
        }
        let s = &self.slicing;
        if s.history == 0 || s.horizon == 0 || s.stride == 0 || s.test_window == 0 {
            return bad("slicing values must be >= 1".into());
        }
        if s.history != self.model.history {
            return bad(format!(
                "slicing.history ({}) and model.history ({}) must agree",
                s.history, self.model.history
            ));
        }
        if !(self.transfer.fraction > 0.0 && self.transfer.fraction <= 1.0) {
            return bad(format!("transfer.fraction must lie in (0, 1], got {}", self.transfer.fraction));
        }
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.training.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.grid()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<GridModel, CliError> {
        match self.grid.case.as_str() {
            "ieee9" => Ok(ieee9_model()),
            "triangle3" => Ok(triangle3_model()),
            "pair2" => Ok(pair2_model()),
            "custom" => {
                let c = self
                    .grid
                    .custom
                    .as_ref()
                    .ok_or_else(|| CliError::Config("grid.case = \"custom\" needs a [grid.custom] table".into()))?;
                GridModel::from_config(c).map_err(|e| CliError::Config(format!("grid.custom: {e}")))
            }
            other => Err(CliError::Config(format!(
                "unknown grid.case `{other}` (expected ieee9, triangle3, pair2 or custom)"
            ))),
        }
    }
}
