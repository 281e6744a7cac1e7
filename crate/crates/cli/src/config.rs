//! Experiment configuration: a TOML tree with one section per analysis.
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wft_core::analysis::{log_grid, SweepSpec};
use wft_core::conv::Stage;
use wft_core::energy::{EnergyParams, PowerModel, RuntimeModel, VoltageBerCurve};
use wft_core::fault::{FaultConfig, FaultMode};
use wft_core::fxp::FxpFormat;
use wft_core::network::Profile;
use wft_core::rng::derive_key;
use wft_core::tmr::{CostModel, PlannerParams};

use crate::error::CliError;

pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub fault: FaultSection,
    pub sweep: SweepSection,
    pub analysis: AnalysisSection,
    pub tmr: TmrSection,
    pub energy: EnergySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("out"),
            model: ModelSection::default(),
            dataset: DatasetSection::default(),
            fault: FaultSection::default(),
            sweep: SweepSection::default(),
            analysis: AnalysisSection::default(),
            tmr: TmrSection::default(),
            energy: EnergySection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub path: Option<PathBuf>,
    pub profile: String,
    pub format: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            path: None,
            profile: "default".into(),
            format: "int16".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    pub samples: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { path: None, samples: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultSection {
    pub trials: u64,
    pub stages: Vec<String>,
}

impl Default for FaultSection {
    fn default() -> Self {
        Self {
            trials: 5,
            stages: Stage::ALL
                .iter()
                .filter(|s| Stage::RUNTIME[**s as usize])
                .map(|s| s.name().to_string())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub lo_exp: i32,
    pub hi_exp: i32,
    pub per_decade: u32,
    /// Explicit grid; replaces the log grid when present.
    pub grid: Option<Vec<f64>>,
    pub modes: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lo_exp: -9,
            hi_exp: -3,
            per_decade: 2,
            grid: None,
            modes: vec!["OP_LEVEL".into()],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub ber: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TmrSection {
    pub goals: Vec<f64>,
    pub step: f64,
    pub cost_mul: f64,
    pub cost_add: f64,
}

impl Default for TmrSection {
    fn default() -> Self {
        let c = CostModel::default();
        Self {
            goals: vec![0.6, 0.7, 0.8, 0.9],
            step: 0.1,
            cost_mul: c.cost_mul,
            cost_add: c.cost_add,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergySection {
    pub anchors: Vec<[f64; 2]>,
    pub step: f64,
    pub budgets: Vec<f64>,
    pub p0: f64,
    pub v0: f64,
    pub throughput_mul: f64,
    pub throughput_add: f64,
    pub layer_overhead_cycles: f64,
    pub frequency_hz: f64,
}

impl Default for EnergySection {
    fn default() -> Self {
        let p = PowerModel::default();
        let r = RuntimeModel::default();
        Self {
            anchors: VoltageBerCurve::default().anchors().iter().rev().map(|&(v, b)| [v, b]).collect(),
            step: 0.005,
            budgets: (1..=10).map(|i| i as f64 / 100.0).collect(),
            p0: p.p0,
            v0: p.v0,
            throughput_mul: r.throughput_mul,
            throughput_add: r.throughput_add,
            layer_overhead_cycles: r.layer_overhead_cycles,
            frequency_hz: r.frequency_hz,
        }
    }
}

const TAG_MODEL: u64 = u64::from_le_bytes(*b"wft.modl");
const TAG_DATASET: u64 = u64::from_le_bytes(*b"wft.data");
const TAG_FAULT: u64 = u64::from_le_bytes(*b"wft.flt\0");

/// Per-module seeds expanded from the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DerivedSeeds {
    pub model: u64,
    pub dataset: u64,
    pub fault: u64,
}

impl DerivedSeeds {
    pub fn from_global(seed: u64) -> Self {
        Self {
            model: derive_key(&[TAG_MODEL, seed]),
            dataset: derive_key(&[TAG_DATASET, seed]),
            fault: derive_key(&[TAG_FAULT, seed]),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::ConfigParse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(CliError::ConfigNotFound(path.display().to_string()))
            }
            Err(e) => return Err(CliError::Io(format!("{}: {e}", path.display()))),
        };
        Self::parse(&text)
    }

    /// Checks every section by building the core parameter objects.
    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |m: String| Err(CliError::ConfigInvalid(m));
        if self.model.path.is_none() {
            self.profile()?;
            self.format()?;
        }
        if self.dataset.path.is_none() && self.dataset.samples == 0 {
            return invalid("dataset.samples must be >= 1".into());
        }
        self.stage_scope()?;
        let spec = self.sweep_spec(0)?;
        spec.validate().map_err(|e| CliError::ConfigInvalid(format!("sweep: {e}")))?;
        if let Some(b) = self.analysis.ber {
            if !(b > 0.0 && b <= 1.0) {
                return invalid(format!("analysis.ber {b} outside (0, 1]"));
            }
        }
        if self.tmr.goals.is_empty() || self.tmr.goals.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return invalid("tmr.goals must be non-empty and within [0, 1]".into());
        }
        self.planner_params(0, 1e-6)
            .validate()
            .map_err(|e| CliError::ConfigInvalid(format!("tmr: {e}")))?;
        let ep = self.energy_params(0)?;
        ep.runtime.validate().map_err(|e| CliError::ConfigInvalid(format!("energy: {e}")))?;
        if !(ep.step > 0.0) || !(ep.power.p0 > 0.0 && ep.power.v0 > 0.0) {
            return invalid("energy.step, p0 and v0 must be positive".into());
        }
        if self.energy.budgets.is_empty() || self.energy.budgets.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return invalid("energy.budgets must be non-empty and within [0, 1]".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seeds(&self) -> DerivedSeeds {
        DerivedSeeds::from_global(self.seed)
    }

    pub fn profile(&self) -> Result<Profile, CliError> {
        Profile::parse(&self.model.profile).map_err(|e| CliError::ConfigInvalid(format!("model.profile: {e}")))
    }

    pub fn format(&self) -> Result<FxpFormat, CliError> {
        match self.model.format.as_str() {
            "int8" => Ok(FxpFormat::INT8),
            "int16" => Ok(FxpFormat::INT16),
            other => Err(CliError::ConfigInvalid(format!("model.format {other:?} (expected int8 or int16)"))),
        }
    }

    pub fn stage_scope(&self) -> Result<[bool; Stage::COUNT], CliError> {
        let mut scope = [false; Stage::COUNT];
        for name in &self.fault.stages {
            let stage = Stage::ALL
                .iter()
                .find(|s| s.name() == name)
                .ok_or_else(|| CliError::ConfigInvalid(format!("fault.stages: unknown stage {name:?}")))?;
            scope[*stage as usize] = true;
        }
        Ok(scope)
    }

    pub fn modes(&self) -> Result<Vec<FaultMode>, CliError> {
        self.sweep
            .modes
            .iter()
            .map(|m| match m.as_str() {
                "OP_LEVEL" => Ok(FaultMode::OpLevel),
                "NEURON_LEVEL" => Ok(FaultMode::NeuronLevel),
                other => Err(CliError::ConfigInvalid(format!("sweep.modes: unknown mode {other:?}"))),
            })
            .collect()
    }

    pub fn grid(&self) -> Vec<f64> {
        match &self.sweep.grid {
            Some(g) => g.clone(),
            None => log_grid(self.sweep.lo_exp, self.sweep.hi_exp, self.sweep.per_decade),
        }
    }

    pub fn base_fault(&self, fault_seed: u64) -> Result<FaultConfig, CliError> {
        Ok(FaultConfig {
            seed: fault_seed,
            stage_scope: self.stage_scope()?,
            ..FaultConfig::none()
        })
    }

    pub fn sweep_spec(&self, fault_seed: u64) -> Result<SweepSpec, CliError> {
        let mut spec = SweepSpec::new(self.grid(), self.fault.trials, fault_seed);
        spec.modes = self.modes()?;
        spec.base = self.base_fault(fault_seed)?;
        Ok(spec)
    }

    pub fn planner_params(&self, fault_seed: u64, ber: f64) -> PlannerParams {
        PlannerParams {
            ber,
            step: self.tmr.step,
            trials: self.fault.trials,
            cost: CostModel {
                cost_mul: self.tmr.cost_mul,
                cost_add: self.tmr.cost_add,
            },
            base: self.base_fault(fault_seed).unwrap_or_default(),
        }
    }

    pub fn energy_params(&self, fault_seed: u64) -> Result<EnergyParams, CliError> {
        let e = &self.energy;
        let curve = VoltageBerCurve::new(e.anchors.iter().map(|a| (a[0], a[1])).collect())
            .map_err(|err| CliError::ConfigInvalid(format!("energy.anchors: {err}")))?;
        Ok(EnergyParams {
            curve,
            power: PowerModel { p0: e.p0, v0: e.v0 },
            runtime: RuntimeModel {
                throughput_mul: e.throughput_mul,
                throughput_add: e.throughput_add,
                layer_overhead_cycles: e.layer_overhead_cycles,
                frequency_hz: e.frequency_hz,
            },
            step: e.step,
            trials: self.fault.trials,
            base: self.base_fault(fault_seed)?,
        })
    }
}
