//! Accuracy-vs-BER sweeps, fault-model comparison, layer vulnerability
//! factors and operation-type sensitivity.

use serde::{Deserialize, Serialize};

use crate::conv::{Engine, OpKind, Stage};
use crate::error::{Error, Result};
use crate::fault::{FaultConfig, FaultMode};
use crate::network::{evaluate_accuracy, AccuracyResult, Dataset, Model};
use crate::stats::{spearman, Interval};

/// `base` carries the seed and every scope setting shared by the runs;
/// its mode and ber are overwritten per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub grid: Vec<f64>,
    pub engines: Vec<Engine>,
    pub modes: Vec<FaultMode>,
    pub trials: u64,
    pub base: FaultConfig,
}

impl SweepSpec {
    pub fn new(grid: Vec<f64>, trials: u64, seed: u64) -> Self {
        Self {
            grid,
            engines: Engine::ALL.to_vec(),
            modes: vec![FaultMode::OpLevel],
            trials,
            base: FaultConfig {
                seed,
                ..FaultConfig::none()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidArgument("empty ber grid".into()));
        }
        if self.grid.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::InvalidArgument("ber outside [0, 1]".into()));
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("ber grid must be strictly ascending".into()));
        }
        if self.engines.is_empty() || self.modes.is_empty() {
            return Err(Error::InvalidArgument("no engines or modes selected".into()));
        }
        if self.modes.contains(&FaultMode::None) {
            return Err(Error::InvalidArgument("sweep mode NONE".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be >= 1".into()));
        }
        Ok(())
    }
}

/// `[0] + log-spaced points from 10^lo to 10^hi, `per_decade` per decade.
pub fn log_grid(lo_exp: i32, hi_exp: i32, per_decade: u32) -> Vec<f64> {
    let steps = ((hi_exp - lo_exp) as u32) * per_decade;
    let mut g = vec![0.0];
    for i in 0..=steps {
        let e = lo_exp as f64 + i as f64 / per_decade as f64;
        g.push(10f64.powf(e));
    }
    g
}

/// One accuracy measurement, the unit row of every CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub engine: Engine,
    pub mode: FaultMode,
    pub ber: f64,
    /// Layer id, op kind or empty.
    pub subject: String,
    pub accuracy: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub correct: u64,
    pub total: u64,
}

impl Measurement {
    pub fn new(engine: Engine, mode: FaultMode, ber: f64, subject: impl Into<String>, r: &AccuracyResult) -> Self {
        Self {
            engine,
            mode,
            ber,
            subject: subject.into(),
            accuracy: r.accuracy,
            ci_lo: r.ci.lo,
            ci_hi: r.ci.hi,
            correct: r.correct,
            total: r.total,
        }
    }

    pub fn ci(&self) -> Interval {
        Interval {
            lo: self.ci_lo,
            hi: self.ci_hi,
        }
    }
}

/// Winograd minus direct at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub mode: FaultMode,
    pub ber: f64,
    pub direct: f64,
    pub winograd: f64,
    pub improvement: f64,
    /// Winograd interval lies strictly above the direct one.
    pub separated: bool,
    /// Winograd interval reaches at least the direct one.
    pub not_worse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<Measurement>,
    pub improvement: Vec<Improvement>,
}

impl SweepReport {
    pub fn series(&self, engine: Engine, mode: FaultMode) -> Vec<&Measurement> {
        self.points
            .iter()
            .filter(|m| m.engine == engine && m.mode == mode)
            .collect()
    }

    pub fn get(&self, engine: Engine, mode: FaultMode, ber: f64) -> Option<&Measurement> {
        self.points
            .iter()
            .find(|m| m.engine == engine && m.mode == mode && m.ber == ber)
    }
}

/// Accuracy-vs-ber curves per (engine, mode) plus the Winograd-minus-direct
/// series when both engines are present.
pub fn ber_sweep(model: &Model, dataset: &Dataset, spec: &SweepSpec) -> Result<SweepReport> {
    spec.validate()?;
    let mut points = Vec::new();
    for &engine in &spec.engines {
        let m = model.with_engine(engine)?;
        for &mode in &spec.modes {
            for &ber in &spec.grid {
                let cfg = FaultConfig {
                    mode,
                    ber,
                    ..spec.base.clone()
                };
                let r = evaluate_accuracy(&m, dataset, &cfg, spec.trials)?;
                points.push(Measurement::new(engine, mode, ber, "", &r));
            }
        }
    }
    let mut report = SweepReport {
        points,
        improvement: Vec::new(),
    };
    for &mode in &spec.modes {
        for &ber in &spec.grid {
            if let (Some(d), Some(w)) = (
                report.get(Engine::Direct, mode, ber),
                report.get(Engine::Winograd, mode, ber),
            ) {
                let imp = Improvement {
                    mode,
                    ber,
                    direct: d.accuracy,
                    winograd: w.accuracy,
                    improvement: w.accuracy - d.accuracy,
                    separated: w.ci().above(&d.ci()),
                    not_worse: w.ci_hi >= d.ci_lo,
                };
                report.improvement.push(imp);
            }
        }
    }
    Ok(report)
}

/// Per (mode, ber) verdicts of the engine comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub mode: FaultMode,
    pub ber: f64,
    pub direct: Measurement,
    pub winograd: Measurement,
    pub overlapping: bool,
    pub separated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiModeReport {
    pub rows: Vec<ModeComparison>,
    /// Neuron-level intervals overlap at every grid point.
    pub neuron_indistinguishable: bool,
    /// Operation-level Winograd interval clears the direct one somewhere.
    pub op_separated: bool,
}

/// Both engines under both fault models on the same grid.
pub fn fi_mode_compare(model: &Model, dataset: &Dataset, spec: &SweepSpec) -> Result<FiModeReport> {
    let spec = SweepSpec {
        engines: Engine::ALL.to_vec(),
        modes: vec![FaultMode::NeuronLevel, FaultMode::OpLevel],
        ..spec.clone()
    };
    Ok(fi_mode_from_sweep(&ber_sweep(model, dataset, &spec)?))
}

/// Builds the comparison from an existing two-engine, two-mode sweep.
pub fn fi_mode_from_sweep(sweep: &SweepReport) -> FiModeReport {
    let mut rows = Vec::new();
    for imp in &sweep.improvement {
        let d = sweep.get(Engine::Direct, imp.mode, imp.ber).expect("paired");
        let w = sweep.get(Engine::Winograd, imp.mode, imp.ber).expect("paired");
        rows.push(ModeComparison {
            mode: imp.mode,
            ber: imp.ber,
            direct: d.clone(),
            winograd: w.clone(),
            overlapping: d.ci().overlaps(&w.ci()),
            separated: imp.separated,
        });
    }
    let neuron: Vec<_> = rows.iter().filter(|r| r.mode == FaultMode::NeuronLevel).collect();
    let neuron_indistinguishable = !neuron.is_empty() && neuron.iter().all(|r| r.overlapping);
    let op_separated = rows
        .iter()
        .any(|r| r.mode == FaultMode::OpLevel && r.separated);
    FiModeReport {
        rows,
        neuron_indistinguishable,
        op_separated,
    }
}

/// Grid point (ber > 0) whose accuracy is closest to one half; the lower ber
/// wins ties.
pub fn analysis_ber(series: &[&Measurement]) -> Option<f64> {
    series
        .iter()
        .filter(|m| m.ber > 0.0)
        .min_by(|a, b| {
            (a.accuracy - 0.5)
                .abs()
                .total_cmp(&(b.accuracy - 0.5).abs())
                .then(a.ber.total_cmp(&b.ber))
        })
        .map(|m| m.ber)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerVf {
    pub layer: u32,
    pub kind: String,
    /// Runtime-stage op counts of the layer under the analysed engine.
    pub n_mul: u64,
    pub n_add: u64,
    pub exempted: Measurement,
    pub vf: f64,
    /// Wider of the two operand intervals.
    pub ci_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerVulnReport {
    pub engine: Engine,
    pub ber: f64,
    pub baseline: Measurement,
    pub layers: Vec<LayerVf>,
    /// Rank correlation of VF with the per-layer MUL count.
    pub spearman_mul: f64,
}

impl LayerVulnReport {
    pub fn vf(&self, layer: u32) -> Option<f64> {
        self.layers.iter().find(|l| l.layer == layer).map(|l| l.vf)
    }
}

/// VF of every weighted layer: accuracy with that layer exempted minus
/// accuracy with all layers faulty. Both runs share the seed and trial ids,
/// so the remaining layers see the same faults.
pub fn layer_vulnerability(
    model: &Model,
    dataset: &Dataset,
    ber: f64,
    engine: Engine,
    trials: u64,
    base: &FaultConfig,
) -> Result<LayerVulnReport> {
    if ber <= 0.0 {
        return Err(Error::InvalidArgument("layer vulnerability needs ber > 0".into()));
    }
    let m = model.with_engine(engine)?;
    let cfg = FaultConfig {
        mode: FaultMode::OpLevel,
        ber,
        excluded_layer: None,
        ..base.clone()
    };
    let baseline_r = evaluate_accuracy(&m, dataset, &cfg, trials)?;
    let baseline = Measurement::new(engine, FaultMode::OpLevel, ber, "all", &baseline_r);
    let mut layers = Vec::new();
    for layer in m.weighted_layers() {
        let r = evaluate_accuracy(&m, dataset, &cfg.clone().with_excluded_layer(Some(layer)), trials)?;
        let exempted = Measurement::new(engine, FaultMode::OpLevel, ber, layer.to_string(), &r);
        let counts = m.layer_op_counts(layer).masked(&cfg.stage_scope);
        layers.push(LayerVf {
            layer,
            kind: m.layers[layer as usize].name().to_string(),
            n_mul: counts.total_mul(),
            n_add: counts.total_add(),
            vf: exempted.accuracy - baseline.accuracy,
            ci_width: exempted.ci().width().max(baseline.ci().width()),
            exempted,
        });
    }
    let vfs: Vec<f64> = layers.iter().map(|l| l.vf).collect();
    let muls: Vec<f64> = layers.iter().map(|l| l.n_mul as f64).collect();
    Ok(LayerVulnReport {
        engine,
        ber,
        baseline,
        spearman_mul: spearman(&vfs, &muls),
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpTypeRow {
    pub engine: Engine,
    pub all_faulty: Measurement,
    /// Only ADD results faulty.
    pub mul_fault_free: Measurement,
    /// Only MUL results faulty.
    pub add_fault_free: Measurement,
    pub mul_sensitivity: f64,
    pub add_sensitivity: f64,
    /// MUL-fault-free interval reaches the ADD-fault-free one.
    pub mul_more_vulnerable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpTypeReport {
    pub ber: f64,
    pub rows: Vec<OpTypeRow>,
}

impl OpTypeReport {
    pub fn row(&self, engine: Engine) -> Option<&OpTypeRow> {
        self.rows.iter().find(|r| r.engine == engine)
    }
}

/// Accuracy with one op kind made fault-free, for each engine.
pub fn op_type_vulnerability(
    model: &Model,
    dataset: &Dataset,
    ber: f64,
    engines: &[Engine],
    trials: u64,
    base: &FaultConfig,
) -> Result<OpTypeReport> {
    let mut rows = Vec::new();
    for &engine in engines {
        let m = model.with_engine(engine)?;
        let cfg = FaultConfig {
            mode: FaultMode::OpLevel,
            ber,
            ..base.clone()
        };
        let measure = |kinds: &[OpKind], subject: &str| -> Result<Measurement> {
            let c = FaultConfig {
                op_kind_scope: [false; 2],
                ..cfg.clone()
            }
            .with_kinds(kinds);
            let r = evaluate_accuracy(&m, dataset, &c, trials)?;
            Ok(Measurement::new(engine, FaultMode::OpLevel, ber, subject, &r))
        };
        let all = measure(&OpKind::ALL, "ALL")?;
        let mul_free = measure(&[OpKind::Add], "MUL_FAULT_FREE")?;
        let add_free = measure(&[OpKind::Mul], "ADD_FAULT_FREE")?;
        rows.push(OpTypeRow {
            engine,
            mul_sensitivity: mul_free.accuracy - all.accuracy,
            add_sensitivity: add_free.accuracy - all.accuracy,
            mul_more_vulnerable: mul_free.ci_hi >= add_free.ci_lo,
            all_faulty: all,
            mul_fault_free: mul_free,
            add_fault_free: add_free,
        });
    }
    Ok(OpTypeReport { ber, rows })
}

/// Runtime-stage MUL count of each weighted layer.
pub fn layer_mul_counts(model: &Model, scope: &[bool; Stage::COUNT]) -> Vec<(u32, u64)> {
    model
        .weighted_layers()
        .into_iter()
        .map(|l| (l, model.layer_op_counts(l).masked(scope).total_mul()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::FxpFormat;
    use crate::network::{generate_inputs, generate_synthetic_model, self_label, Profile};

    fn fixture(profile: Profile) -> (Model, Dataset) {
        let m = generate_synthetic_model(11, profile, FxpFormat::INT16).unwrap();
        let d = self_label(&m, generate_inputs(&m, 12, 30)).unwrap();
        (m, d)
    }

    #[test]
    fn grid_shape() {
        let g = log_grid(-9, -3, 2);
        assert_eq!(g.len(), 14);
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 1e-9).abs() < 1e-24 && (g[13] - 1e-3).abs() < 1e-18);
        assert!(SweepSpec::new(vec![1e-3, 1e-4], 1, 0).validate().is_err());
        assert!(SweepSpec::new(vec![], 1, 0).validate().is_err());
    }

    #[test]
    fn zero_ber_point_is_perfect() {
        let (m, d) = fixture(Profile::Small);
        let mut spec = SweepSpec::new(vec![0.0, 1e-4], 2, 5);
        spec.modes = vec![FaultMode::OpLevel, FaultMode::NeuronLevel];
        let r = ber_sweep(&m, &d, &spec).unwrap();
        assert_eq!(r.points.len(), 8);
        for p in r.points.iter().filter(|p| p.ber == 0.0) {
            assert_eq!(p.accuracy, 1.0);
        }
        assert_eq!(r.improvement.len(), 4);
    }

    #[test]
    fn single_layer_vf_is_full_recovery() {
        let (m, d) = fixture(Profile::SingleFc);
        let r = layer_vulnerability(&m, &d, 1e-3, Engine::Direct, 3, &FaultConfig::op_level(0.0, 9)).unwrap();
        assert_eq!(r.layers.len(), 1);
        assert_eq!(r.layers[0].exempted.accuracy, 1.0);
        assert!((r.layers[0].vf - (1.0 - r.baseline.accuracy)).abs() < 1e-12);
    }

    #[test]
    fn exempting_every_layer_restores_accuracy() {
        let (m, d) = fixture(Profile::Small);
        let mut cfg = FaultConfig::op_level(1e-3, 4);
        cfg.layer_scope = Some(Default::default());
        let r = evaluate_accuracy(&m, &d, &cfg, 2).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn empty_kind_scope_is_fault_free() {
        let (m, d) = fixture(Profile::Small);
        let cfg = FaultConfig::op_level(1e-2, 4).with_kinds(&[]);
        assert_eq!(evaluate_accuracy(&m, &d, &cfg, 2).unwrap().accuracy, 1.0);
    }

    #[test]
    fn analysis_ber_picks_half() {
        let mk = |ber, accuracy| Measurement {
            engine: Engine::Direct,
            mode: FaultMode::OpLevel,
            ber,
            subject: String::new(),
            accuracy,
            ci_lo: 0.0,
            ci_hi: 1.0,
            correct: 0,
            total: 0,
        };
        let pts = [mk(0.0, 1.0), mk(1e-7, 0.8), mk(3e-7, 0.45), mk(1e-6, 0.1)];
        let refs: Vec<&Measurement> = pts.iter().collect();
        assert_eq!(analysis_ber(&refs), Some(3e-7));
    }
}
