//! Voltage scaling: a voltage-to-BER curve, a V^2 power model, an op-count
//! runtime model and the minimum safe voltage per accuracy-loss budget.

use serde::{Deserialize, Serialize};

use crate::conv::{Engine, Stage};
use crate::error::{Error, Result};
use crate::fault::{FaultConfig, FaultMode};
use crate::network::{evaluate_accuracy, Dataset, Model};
use crate::stats::Interval;
use crate::tmr::TmrMode;

/// Piecewise log-linear BER as a function of supply voltage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageBerCurve {
    /// (voltage, ber), ascending voltage.
    anchors: Vec<(f64, f64)>,
}

impl Default for VoltageBerCurve {
    fn default() -> Self {
        Self::new(vec![
            (0.90, 1e-14),
            (0.82, 1e-10),
            (0.80, 1e-8),
            (0.78, 1e-6),
            (0.74, 1e-4),
            (0.70, 1e-2),
        ])
        .expect("valid default anchors")
    }
}

impl VoltageBerCurve {
    /// Anchors in any order. Either every ber is zero (an error-free
    /// datapath) or all are positive and strictly decreasing in voltage.
    pub fn new(mut anchors: Vec<(f64, f64)>) -> Result<Self> {
        if anchors.len() < 2 {
            return Err(Error::InvalidArgument("a curve needs at least two anchors".into()));
        }
        if anchors.iter().any(|&(v, b)| !v.is_finite() || !(0.0..=1.0).contains(&b)) {
            return Err(Error::InvalidArgument("anchor outside valid range".into()));
        }
        anchors.sort_by(|a, b| a.0.total_cmp(&b.0));
        let zero = anchors.iter().all(|a| a.1 == 0.0);
        for w in anchors.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidArgument(format!("duplicate anchor voltage {}", w[0].0)));
            }
            if !zero && !(w[1].1 < w[0].1 && w[1].1 > 0.0) {
                return Err(Error::InvalidArgument("ber must be positive and strictly decreasing in voltage".into()));
            }
        }
        Ok(Self { anchors })
    }

    pub fn anchors(&self) -> &[(f64, f64)] {
        &self.anchors
    }

    pub fn v_min(&self) -> f64 {
        self.anchors[0].0
    }

    pub fn v_max(&self) -> f64 {
        self.anchors[self.anchors.len() - 1].0
    }

    pub fn ber_at(&self, v: f64) -> Result<f64> {
        let (lo, hi) = (self.v_min(), self.v_max());
        if !(lo..=hi).contains(&v) {
            return Err(Error::VoltageOutOfRange { voltage: v, min: lo, max: hi });
        }
        let i = self.anchors.partition_point(|a| a.0 < v);
        let (v1, b1) = self.anchors[i];
        if v1 == v || i == 0 {
            return Ok(b1);
        }
        let (v0, b0) = self.anchors[i - 1];
        if b0 == 0.0 || b1 == 0.0 {
            return Ok(0.0);
        }
        let t = (v - v0) / (v1 - v0);
        Ok((b0.ln() + t * (b1.ln() - b0.ln())).exp())
    }
}

/// Dynamic power at fixed frequency: `P0 (V / V0)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub p0: f64,
    pub v0: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        Self { p0: 1.0, v0: 0.9 }
    }
}

impl PowerModel {
    pub fn power(&self, v: f64) -> f64 {
        self.p0 * (v / self.v0).powi(2)
    }
}

/// Analytical accelerator runtime from op counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeModel {
    pub throughput_mul: f64,
    pub throughput_add: f64,
    pub layer_overhead_cycles: f64,
    pub frequency_hz: f64,
}

impl Default for RuntimeModel {
    fn default() -> Self {
        Self {
            throughput_mul: 256.0,
            throughput_add: 512.0,
            layer_overhead_cycles: 64.0,
            frequency_hz: 667e6,
        }
    }
}

impl RuntimeModel {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.throughput_mul, self.throughput_add, self.frequency_hz]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite())
            && self.layer_overhead_cycles >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("runtime model parameters must be positive".into()))
        }
    }

    /// Seconds per inference with every conv on `engine`, counting the stages
    /// in `scope`.
    pub fn runtime(&self, model: &Model, engine: Engine, scope: &[bool; Stage::COUNT]) -> Result<f64> {
        let m = model.with_engine(engine)?;
        let mut cycles = 0.0;
        for l in m.weighted_layers() {
            let c = m.layer_op_counts(l).masked(scope);
            cycles += c.total_mul() as f64 / self.throughput_mul
                + c.total_add() as f64 / self.throughput_add
                + self.layer_overhead_cycles;
        }
        Ok(cycles / self.frequency_hz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltagePoint {
    pub voltage: f64,
    pub ber: f64,
    pub accuracy: f64,
    pub ci: Interval,
}

/// Voltages from `v_max` down to `v_min` in `step` decrements.
pub fn voltage_grid(curve: &VoltageBerCurve, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("voltage step must be positive".into()));
    }
    let n = ((curve.v_max() - curve.v_min()) / step + 1e-9).floor() as u64;
    Ok((0..=n)
        .map(|i| {
            let v = curve.v_max() - i as f64 * step;
            (v * 1e9).round() / 1e9
        })
        .collect())
}

/// Accuracy of `engine` at every grid voltage.
pub fn accuracy_curve(
    model: &Model,
    dataset: &Dataset,
    engine: Engine,
    curve: &VoltageBerCurve,
    step: f64,
    trials: u64,
    base: &FaultConfig,
) -> Result<Vec<VoltagePoint>> {
    let m = model.with_engine(engine)?;
    voltage_grid(curve, step)?
        .into_iter()
        .map(|voltage| {
            let ber = curve.ber_at(voltage)?;
            let cfg = FaultConfig {
                mode: FaultMode::OpLevel,
                ber,
                ..base.clone()
            };
            let r = evaluate_accuracy(&m, dataset, &cfg, trials)?;
            Ok(VoltagePoint {
                voltage,
                ber,
                accuracy: r.accuracy,
                ci: r.ci,
            })
        })
        .collect()
}

/// Lowest grid voltage whose accuracy interval lower bound stays within
/// `loss_budget` of `fault_free`. `points` must start at the highest voltage.
pub fn min_safe_voltage(points: &[VoltagePoint], fault_free: f64, loss_budget: f64) -> Result<VoltagePoint> {
    if !(loss_budget > 0.0 && loss_budget <= 1.0) {
        return Err(Error::InvalidArgument(format!("loss budget {loss_budget} outside (0, 1]")));
    }
    let floor = fault_free - loss_budget;
    let top = points
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty voltage grid".into()))?;
    if top.ci.lo < floor && loss_budget < 1.0 {
        return Err(Error::InfeasibleBudget {
            budget: loss_budget,
            voltage: top.voltage,
            accuracy: top.accuracy,
        });
    }
    let pass = |p: &VoltagePoint| loss_budget >= 1.0 || p.ci.lo >= floor;
    Ok(*points
        .iter()
        .filter(|p| pass(p))
        .min_by(|a, b| a.voltage.total_cmp(&b.voltage))
        .unwrap_or(top))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyCell {
    pub mode: TmrMode,
    pub budget: f64,
    pub voltage: f64,
    pub ber: f64,
    /// Accuracy of the executing engine at the chosen voltage.
    pub accuracy: f64,
    pub ci: Interval,
    pub power: f64,
    pub runtime: f64,
    pub energy: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub baseline_energy: f64,
    pub fault_free_accuracy: f64,
    pub curves: Vec<(Engine, Vec<VoltagePoint>)>,
    pub cells: Vec<EnergyCell>,
}

impl EnergyReport {
    pub fn cell(&self, mode: TmrMode, budget: f64) -> Option<&EnergyCell> {
        self.cells.iter().find(|c| c.mode == mode && c.budget == budget)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub curve: VoltageBerCurve,
    pub power: PowerModel,
    pub runtime: RuntimeModel,
    pub step: f64,
    pub trials: u64,
    pub base: FaultConfig,
}

/// Chosen voltage and normalized energy for every (mode, budget). ST_CONV
/// and WG_WO_AFT are gated by the direct engine's accuracy, WG_W_AFT by the
/// Winograd engine's own.
pub fn energy_report(
    model: &Model,
    dataset: &Dataset,
    modes: &[TmrMode],
    budgets: &[f64],
    params: &EnergyParams,
) -> Result<EnergyReport> {
    params.runtime.validate()?;
    let scope = params.base.stage_scope;
    let fault_free = evaluate_accuracy(model, dataset, &FaultConfig::none(), 1)?.accuracy;
    let mut curves: Vec<(Engine, Vec<VoltagePoint>)> = Vec::new();
    for engine in Engine::ALL {
        if modes.iter().any(|m| m.gate_engine() == engine) {
            let pts = accuracy_curve(model, dataset, engine, &params.curve, params.step, params.trials, &params.base)?;
            curves.push((engine, pts));
        }
    }
    let baseline_energy =
        params.power.power(params.curve.v_max()) * params.runtime.runtime(model, Engine::Direct, &scope)?;
    let mut cells = Vec::new();
    for &budget in budgets {
        for &mode in modes {
            let gate = &curves.iter().find(|c| c.0 == mode.gate_engine()).expect("evaluated").1;
            let chosen = min_safe_voltage(gate, fault_free, budget)?;
            let exec_points = curves.iter().find(|c| c.0 == mode.exec_engine()).map(|c| &c.1);
            let at_exec = exec_points
                .and_then(|pts| pts.iter().find(|p| p.voltage == chosen.voltage))
                .copied()
                .unwrap_or(chosen);
            let power = params.power.power(chosen.voltage);
            let runtime = params.runtime.runtime(model, mode.exec_engine(), &scope)?;
            let energy = power * runtime;
            cells.push(EnergyCell {
                mode,
                budget,
                voltage: chosen.voltage,
                ber: chosen.ber,
                accuracy: at_exec.accuracy,
                ci: at_exec.ci,
                power,
                runtime,
                energy,
                normalized: energy / baseline_energy,
            });
        }
    }
    Ok(EnergyReport {
        baseline_energy,
        fault_free_accuracy: fault_free,
        curves,
        cells,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::FxpFormat;
    use crate::network::{generate_inputs, generate_synthetic_model, self_label, Profile};

    #[test]
    fn curve_examples() {
        let c = VoltageBerCurve::default();
        for &(v, b) in c.anchors() {
            assert_eq!(c.ber_at(v).unwrap(), b);
        }
        let two = VoltageBerCurve::new(vec![(0.78, 1e-6), (0.82, 1e-10)]).unwrap();
        assert!((two.ber_at(0.80).unwrap() / 1e-8 - 1.0).abs() < 1e-9);
        let mut prev = f64::INFINITY;
        let mut v = 0.70;
        while v <= 0.90 {
            let b = c.ber_at(v).unwrap();
            assert!(b < prev, "{v}");
            prev = b;
            v += 0.001;
        }
        assert!(matches!(c.ber_at(0.95), Err(Error::VoltageOutOfRange { .. })));
        assert!(VoltageBerCurve::new(vec![(0.8, 1e-8), (0.9, 1e-6)]).is_err());
    }

    #[test]
    fn power_and_grid() {
        let p = PowerModel { p0: 3.0, v0: 0.9 };
        assert_eq!(p.power(0.9), 3.0);
        let g = voltage_grid(&VoltageBerCurve::default(), 0.005).unwrap();
        assert_eq!(g.len(), 41);
        assert_eq!((g[0], g[40]), (0.9, 0.7));
    }

    #[test]
    fn winograd_runtime_is_shorter() {
        let m = generate_synthetic_model(1, Profile::Default, FxpFormat::INT16).unwrap();
        let r = RuntimeModel::default();
        let d = r.runtime(&m, Engine::Direct, &Stage::RUNTIME).unwrap();
        let w = r.runtime(&m, Engine::Winograd, &Stage::RUNTIME).unwrap();
        assert!(w < d && w > 0.0);
    }

    fn pt(voltage: f64, lo: f64) -> VoltagePoint {
        VoltagePoint {
            voltage,
            ber: 0.0,
            accuracy: lo,
            ci: Interval { lo, hi: 1.0 },
        }
    }

    #[test]
    fn safe_voltage_search() {
        let pts = [pt(0.9, 0.999), pt(0.85, 0.995), pt(0.8, 0.95), pt(0.75, 0.3)];
        assert_eq!(min_safe_voltage(&pts, 1.0, 0.01).unwrap().voltage, 0.85);
        assert_eq!(min_safe_voltage(&pts, 1.0, 0.1).unwrap().voltage, 0.8);
        assert_eq!(min_safe_voltage(&pts, 1.0, 1.0).unwrap().voltage, 0.75);
        let bad = [pt(0.9, 0.5), pt(0.8, 0.4)];
        assert!(matches!(min_safe_voltage(&bad, 1.0, 0.01), Err(Error::InfeasibleBudget { .. })));
    }

    #[test]
    fn zero_curve_picks_lowest_voltage() {
        let m = generate_synthetic_model(1, Profile::SingleFc, FxpFormat::INT16).unwrap();
        let d = self_label(&m, generate_inputs(&m, 2, 500)).unwrap();
        let params = EnergyParams {
            curve: VoltageBerCurve::new(vec![(0.7, 0.0), (0.9, 0.0)]).unwrap(),
            power: PowerModel::default(),
            runtime: RuntimeModel::default(),
            step: 0.05,
            trials: 1,
            base: FaultConfig::op_level(0.0, 1),
        };
        let r = energy_report(&m, &d, &TmrMode::ALL, &[0.01, 0.05], &params).unwrap();
        for c in &r.cells {
            assert_eq!(c.voltage, 0.7);
        }
        let doubled = EnergyParams {
            power: PowerModel { p0: 2.0, v0: 0.9 },
            ..params
        };
        let r2 = energy_report(&m, &d, &TmrMode::ALL, &[0.01, 0.05], &doubled).unwrap();
        for (a, b) in r.cells.iter().zip(&r2.cells) {
            assert!((a.normalized - b.normalized).abs() < 1e-12);
        }
    }
}
