//! Fine-grained selective TMR: layers are ranked by vulnerability factor and
//! protected a fraction at a time, multiplications first, until an accuracy
//! goal is met.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::analysis::{layer_vulnerability, LayerVulnReport};
use crate::conv::{ArithmeticHook, Engine, OpKind, OpSite};
use crate::error::{Error, Result};
use crate::fault::{FaultConfig, FaultMode, ProtectionSet};
use crate::fxp::FxpTensor;
use crate::network::{evaluate_accuracy, forward_with_hook, Dataset, Model};
use crate::rng::derive_key;
use crate::stats::Interval;

const TAG_SELECTION: u64 = 0x746d_7273;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TmrMode {
    StConv,
    WgWoAft,
    WgWAft,
}

impl TmrMode {
    pub const ALL: [TmrMode; 3] = [TmrMode::StConv, TmrMode::WgWoAft, TmrMode::WgWAft];

    pub fn name(self) -> &'static str {
        match self {
            TmrMode::StConv => "ST_CONV",
            TmrMode::WgWoAft => "WG_WO_AFT",
            TmrMode::WgWAft => "WG_W_AFT",
        }
    }

    /// Engine the protected network runs on.
    pub fn exec_engine(self) -> Engine {
        match self {
            TmrMode::StConv => Engine::Direct,
            _ => Engine::Winograd,
        }
    }

    /// Engine whose layer vulnerability factors rank the layers.
    pub fn vf_engine(self) -> Engine {
        match self {
            TmrMode::WgWAft => Engine::Winograd,
            _ => Engine::Direct,
        }
    }

    /// Engine whose accuracy decides when the greedy loop stops. WG_WO_AFT
    /// deploys whatever ST_CONV needed, so it is gated by the direct engine.
    pub fn gate_engine(self) -> Engine {
        match self {
            TmrMode::WgWAft => Engine::Winograd,
            _ => Engine::Direct,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub cost_mul: f64,
    pub cost_add: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            cost_mul: 1.0,
            cost_add: 0.2,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.cost_mul > 0.0 && self.cost_add > 0.0) || !self.cost_mul.is_finite() || !self.cost_add.is_finite() {
            return Err(Error::InvalidArgument("costs must be positive and finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerProtection {
    pub layer: u32,
    /// Share of all runtime ops of the layer under TMR.
    pub layer_fraction: f64,
    pub mul_fraction: f64,
    pub add_fraction: f64,
    pub n_mul: u64,
    pub n_add: u64,
}

impl LayerProtection {
    /// MUL sites are filled before ADD sites.
    pub fn new(layer: u32, layer_fraction: f64, n_mul: u64, n_add: u64) -> Self {
        let phi = layer_fraction.clamp(0.0, 1.0);
        let budget = phi * (n_mul + n_add) as f64;
        let mul_fraction = if n_mul == 0 { 0.0 } else { (budget / n_mul as f64).min(1.0) };
        let add_fraction = if n_add == 0 {
            0.0
        } else {
            ((budget - n_mul as f64) / n_add as f64).clamp(0.0, 1.0)
        };
        Self {
            layer,
            layer_fraction: phi,
            mul_fraction,
            add_fraction,
            n_mul,
            n_add,
        }
    }
}

/// Extra executions (two per protected op), raw and cost-weighted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Overhead {
    pub extra_mul: f64,
    pub extra_add: f64,
    pub weighted: f64,
}

impl Overhead {
    pub fn raw(&self) -> f64 {
        self.extra_mul + self.extra_add
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmrPlan {
    pub mode: TmrMode,
    pub ber: f64,
    pub goal: f64,
    pub selection_seed: u64,
    /// Layers with a nonzero fraction, ascending id.
    pub layers: Vec<LayerProtection>,
    pub steps: u32,
    pub accuracy: f64,
    pub ci: Interval,
    pub overhead: Overhead,
}

impl TmrPlan {
    pub fn protection(&self) -> ProtectionSet {
        protection_set(&self.layers, self.selection_seed)
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

fn protection_set(layers: &[LayerProtection], seed: u64) -> ProtectionSet {
    let mut p = ProtectionSet::new();
    for l in layers {
        p.set(l.layer, OpKind::Mul, l.mul_fraction, seed);
        p.set(l.layer, OpKind::Add, l.add_fraction, seed);
    }
    p
}

pub fn plan_overhead(layers: &[LayerProtection], cost: &CostModel) -> Overhead {
    let mut o = Overhead::default();
    for l in layers {
        let m = 2.0 * l.mul_fraction * l.n_mul as f64;
        let a = 2.0 * l.add_fraction * l.n_add as f64;
        o.extra_mul += m;
        o.extra_add += a;
        o.weighted += m * cost.cost_mul + a * cost.cost_add;
    }
    o
}

/// Normalized overhead against a reference plan: (weighted, raw). Two empty
/// plans compare as 1.
pub fn overhead_ratio(plan: &Overhead, reference: &Overhead) -> Result<(f64, f64)> {
    let ratio = |a: f64, b: f64| -> Result<f64> {
        if b == 0.0 {
            if a == 0.0 {
                Ok(1.0)
            } else {
                Err(Error::DivisionByZero("reference plan has no overhead".into()))
            }
        } else {
            Ok(a / b)
        }
    };
    Ok((ratio(plan.weighted, reference.weighted)?, ratio(plan.raw(), reference.raw())?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerParams {
    pub ber: f64,
    /// Protected share added to the chosen layer per iteration.
    pub step: f64,
    pub trials: u64,
    pub cost: CostModel,
    /// Seed, scopes and everything else shared with the fault runs.
    pub base: FaultConfig,
}

impl PlannerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(Error::InvalidArgument(format!("step {} outside (0, 1]", self.step)));
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be >= 1".into()));
        }
        self.cost.validate()
    }

    fn fault_config(&self) -> FaultConfig {
        FaultConfig {
            mode: FaultMode::OpLevel,
            ber: self.ber,
            excluded_layer: None,
            protection: ProtectionSet::new(),
            ..self.base.clone()
        }
    }

    pub fn selection_seed(&self) -> u64 {
        derive_key(&[TAG_SELECTION, self.base.seed])
    }
}

/// Accuracy after each greedy iteration; step 0 is the unprotected network.
/// Steps run on the mode's gate engine, so a WG_WO_AFT schedule is the
/// ST_CONV one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub mode: TmrMode,
    pub vf: Vec<(u32, f64)>,
    pub steps: Vec<ScheduleStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    /// Layer raised in this step (`None` for step 0).
    pub raised: Option<u32>,
    pub layers: Vec<LayerProtection>,
    pub accuracy: f64,
    pub ci: Interval,
}

fn runtime_counts(model: &Model, layer: u32, cfg: &FaultConfig) -> (u64, u64) {
    let c = model.layer_op_counts(layer).masked(&cfg.stage_scope);
    (c.total_mul(), c.total_add())
}

/// Runs the greedy protection loop on `mode`'s gate engine until the
/// accuracy reaches `goal` or every layer is fully protected.
pub fn plan_schedule(
    model: &Model,
    dataset: &Dataset,
    mode: TmrMode,
    vf: &LayerVulnReport,
    goal: f64,
    params: &PlannerParams,
) -> Result<Schedule> {
    params.validate()?;
    let exec = model.with_engine(mode.gate_engine())?;
    let cfg = params.fault_config();
    let seed = params.selection_seed();
    let layers = exec.weighted_layers();
    let vfs: Vec<f64> = layers.iter().map(|&l| vf.vf(l).unwrap_or(0.0)).collect();
    let counts: Vec<(u64, u64)> = layers.iter().map(|&l| runtime_counts(&exec, l, &cfg)).collect();
    let per_layer = (1.0 / params.step - 1e-9).ceil() as u32;
    let mut raised = vec![0u32; layers.len()];

    let current = |raised: &[u32]| -> Vec<LayerProtection> {
        layers
            .iter()
            .zip(raised)
            .zip(&counts)
            .filter(|((_, &r), _)| r > 0)
            .map(|((&l, &r), &(m, a))| {
                let phi = if r >= per_layer { 1.0 } else { r as f64 * params.step };
                LayerProtection::new(l, phi, m, a)
            })
            .collect()
    };
    let measure = |prot: &[LayerProtection]| -> Result<(f64, Interval)> {
        let c = FaultConfig {
            protection: protection_set(prot, seed),
            ..cfg.clone()
        };
        let r = evaluate_accuracy(&exec, dataset, &c, params.trials)?;
        Ok((r.accuracy, r.ci))
    };

    let (accuracy, ci) = measure(&[])?;
    let mut steps = vec![ScheduleStep {
        raised: None,
        layers: Vec::new(),
        accuracy,
        ci,
    }];
    while steps.last().unwrap().accuracy < goal {
        let pick = (0..layers.len())
            .filter(|&i| raised[i] < per_layer)
            .max_by(|&a, &b| {
                let pa = vfs[a] * (1.0 - raised[a] as f64 * params.step);
                let pb = vfs[b] * (1.0 - raised[b] as f64 * params.step);
                pa.total_cmp(&pb).then(b.cmp(&a))
            });
        let Some(i) = pick else { break };
        raised[i] += 1;
        let prot = current(&raised);
        let (accuracy, ci) = measure(&prot)?;
        steps.push(ScheduleStep {
            raised: Some(layers[i]),
            layers: prot,
            accuracy,
            ci,
        });
    }
    Ok(Schedule {
        mode,
        vf: layers.iter().copied().zip(vfs).collect(),
        steps,
    })
}

/// The plan for `goal` is the shortest prefix of the schedule reaching it.
/// When the execution engine differs from the gate engine the layer
/// fractions are carried over onto the execution engine's op counts and the
/// accuracy is measured there.
pub fn plan_from_schedule(
    model: &Model,
    dataset: &Dataset,
    schedule: &Schedule,
    goal: f64,
    params: &PlannerParams,
) -> Result<TmrPlan> {
    let (n, step) = schedule
        .steps
        .iter()
        .enumerate()
        .find(|(_, s)| s.accuracy >= goal)
        .ok_or_else(|| Error::GoalUnreachable {
            goal,
            achieved: schedule.steps.last().map_or(0.0, |s| s.accuracy),
        })?;
    let mode = schedule.mode;
    let (layers, accuracy, ci) = if mode.exec_engine() == mode.gate_engine() {
        (step.layers.clone(), step.accuracy, step.ci)
    } else {
        let exec = model.with_engine(mode.exec_engine())?;
        let cfg = params.fault_config();
        let layers: Vec<LayerProtection> = step
            .layers
            .iter()
            .map(|l| {
                let (m, a) = runtime_counts(&exec, l.layer, &cfg);
                LayerProtection::new(l.layer, l.layer_fraction, m, a)
            })
            .collect();
        let c = FaultConfig {
            protection: protection_set(&layers, params.selection_seed()),
            ..cfg
        };
        let r = evaluate_accuracy(&exec, dataset, &c, params.trials)?;
        (layers, r.accuracy, r.ci)
    };
    Ok(TmrPlan {
        mode,
        ber: params.ber,
        goal,
        selection_seed: params.selection_seed(),
        overhead: plan_overhead(&layers, &params.cost),
        layers,
        steps: n as u32,
        accuracy,
        ci,
    })
}

/// Vulnerability factors, schedule and plan for one mode and goal.
pub fn plan_tmr(model: &Model, dataset: &Dataset, mode: TmrMode, goal: f64, params: &PlannerParams) -> Result<TmrPlan> {
    params.validate()?;
    let vf = layer_vulnerability(model, dataset, params.ber, mode.vf_engine(), params.trials, &params.fault_config())?;
    let schedule = plan_schedule(model, dataset, mode, &vf, goal, params)?;
    plan_from_schedule(model, dataset, &schedule, goal, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub goal: f64,
    pub mode: TmrMode,
    pub plan: Option<TmrPlan>,
    /// Against ST_CONV at the same goal; `None` when undefined.
    pub normalized_weighted: Option<f64>,
    pub normalized_raw: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub ber: f64,
    pub goals: Vec<f64>,
    pub vf: Vec<LayerVulnReport>,
    pub schedules: Vec<Schedule>,
    pub rows: Vec<ModeRow>,
}

impl ModeComparison {
    pub fn row(&self, goal: f64, mode: TmrMode) -> Option<&ModeRow> {
        self.rows.iter().find(|r| r.goal == goal && r.mode == mode)
    }
}

/// Normalized overhead of every mode over the goal grid. One schedule per
/// mode, run up to the highest goal, serves every goal.
pub fn compare_modes(model: &Model, dataset: &Dataset, goals: &[f64], params: &PlannerParams) -> Result<ModeComparison> {
    params.validate()?;
    let top = goals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cfg = params.fault_config();
    let mut vfs = Vec::new();
    for engine in Engine::ALL {
        vfs.push(layer_vulnerability(model, dataset, params.ber, engine, params.trials, &cfg)?);
    }
    let vf_for = |e: Engine| vfs.iter().find(|v| v.engine == e).expect("both engines");
    let mut schedules: Vec<Schedule> = Vec::new();
    for mode in TmrMode::ALL {
        // Same gate engine and ranking as an earlier mode: same schedule.
        let twin = schedules
            .iter()
            .find(|s| s.mode.gate_engine() == mode.gate_engine() && s.mode.vf_engine() == mode.vf_engine());
        let schedule = match twin {
            Some(s) => Schedule { mode, ..s.clone() },
            None => plan_schedule(model, dataset, mode, vf_for(mode.vf_engine()), top, params)?,
        };
        schedules.push(schedule);
    }
    let mut rows = Vec::new();
    for &goal in goals {
        let plans: Vec<Option<TmrPlan>> = schedules
            .iter()
            .map(|s| match plan_from_schedule(model, dataset, s, goal, params) {
                Ok(p) => Ok(Some(p)),
                Err(Error::GoalUnreachable { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        let reference = plans[0].as_ref().map(|p| p.overhead);
        for (mode, plan) in TmrMode::ALL.into_iter().zip(plans) {
            let ratio = match (&plan, &reference) {
                (Some(p), Some(r)) => overhead_ratio(&p.overhead, r).ok(),
                _ => None,
            };
            rows.push(ModeRow {
                goal,
                mode,
                plan,
                normalized_weighted: ratio.map(|r| r.0),
                normalized_raw: ratio.map(|r| r.1),
            });
        }
    }
    Ok(ModeComparison {
        ber: params.ber,
        goals: goals.to_vec(),
        vf: vfs,
        schedules,
        rows,
    })
}

/// Counts the in-scope protected sites of one inference per (layer, kind)
/// without altering any value.
pub struct ProtectionAudit<'a> {
    cfg: &'a FaultConfig,
    counts: Vec<[Cell<u64>; 2]>,
}

impl<'a> ProtectionAudit<'a> {
    pub fn new(cfg: &'a FaultConfig, num_layers: usize) -> Self {
        Self {
            cfg,
            counts: (0..num_layers).map(|_| [Cell::new(0), Cell::new(0)]).collect(),
        }
    }

    pub fn count(&self, layer: u32, kind: OpKind) -> u64 {
        self.counts[layer as usize][kind.index()].get()
    }
}

impl ArithmeticHook for ProtectionAudit<'_> {
    fn apply(&self, site: OpSite, value: i64, _width: u32) -> i64 {
        if self.cfg.site_in_scope(site) && self.cfg.protection.is_protected(site) {
            let c = &self.counts[site.layer as usize][site.kind.index()];
            c.set(c.get() + 1);
        }
        value
    }
}

/// Protected sites the plan realizes in one inference of `model`.
pub fn realized_protection(model: &Model, plan: &TmrPlan, base: &FaultConfig) -> Result<Vec<(u32, u64, u64)>> {
    let exec = model.with_engine(plan.mode.exec_engine())?;
    let cfg = FaultConfig {
        mode: FaultMode::OpLevel,
        protection: plan.protection(),
        ..base.clone()
    };
    let audit = ProtectionAudit::new(&cfg, exec.layers.len());
    let input = FxpTensor::zeros(exec.input_shape.clone(), exec.format);
    forward_with_hook(&exec, &input, &audit)?;
    Ok(plan
        .layers
        .iter()
        .map(|l| (l.layer, audit.count(l.layer, OpKind::Mul), audit.count(l.layer, OpKind::Add)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::FxpFormat;
    use crate::network::{generate_inputs, generate_synthetic_model, self_label, Profile};

    #[test]
    fn mul_sites_fill_first() {
        let l = LayerProtection::new(0, 0.25, 60, 40);
        assert!((l.mul_fraction - 25.0 / 60.0).abs() < 1e-12);
        assert_eq!(l.add_fraction, 0.0);
        let l = LayerProtection::new(0, 0.8, 60, 40);
        assert_eq!(l.mul_fraction, 1.0);
        assert!((l.add_fraction - 0.5).abs() < 1e-12);
        let l = LayerProtection::new(0, 1.0, 60, 40);
        assert_eq!((l.mul_fraction, l.add_fraction), (1.0, 1.0));
    }

    #[test]
    fn overhead_examples() {
        let cost = CostModel::default();
        let a = plan_overhead(&[LayerProtection::new(0, 1.0, 10, 10)], &cost);
        assert_eq!(a.extra_mul, 20.0);
        assert!((a.weighted - (20.0 + 4.0)).abs() < 1e-12);
        assert_eq!(overhead_ratio(&a, &a).unwrap(), (1.0, 1.0));
        let empty = Overhead::default();
        assert_eq!(overhead_ratio(&empty, &a).unwrap(), (0.0, 0.0));
        assert_eq!(overhead_ratio(&empty, &empty).unwrap(), (1.0, 1.0));
        assert!(matches!(overhead_ratio(&a, &empty), Err(Error::DivisionByZero(_))));

        let b = plan_overhead(&[LayerProtection::new(0, 0.9, 10, 10)], &cost);
        let doubled = CostModel { cost_add: 0.4, ..cost };
        let (a2, b2) = (
            plan_overhead(&[LayerProtection::new(0, 1.0, 10, 10)], &doubled),
            plan_overhead(&[LayerProtection::new(0, 0.9, 10, 10)], &doubled),
        );
        let r1 = overhead_ratio(&b, &a).unwrap();
        let r2 = overhead_ratio(&b2, &a2).unwrap();
        assert_ne!(r1.0, r2.0);
        assert_eq!(r1.1, r2.1);
    }

    fn params(ber: f64, step: f64) -> PlannerParams {
        PlannerParams {
            ber,
            step,
            trials: 2,
            cost: CostModel::default(),
            base: FaultConfig::op_level(ber, 21),
        }
    }

    #[test]
    fn low_goal_gives_empty_plan() {
        let m = generate_synthetic_model(2, Profile::Small, FxpFormat::INT16).unwrap();
        let d = self_label(&m, generate_inputs(&m, 3, 30)).unwrap();
        let p = plan_tmr(&m, &d, TmrMode::StConv, 0.0, &params(1e-4, 0.1)).unwrap();
        assert!(p.is_empty());
        assert_eq!(p.overhead.weighted, 0.0);
    }

    #[test]
    fn whole_layer_in_one_step() {
        let m = generate_synthetic_model(2, Profile::SingleFc, FxpFormat::INT16).unwrap();
        let d = self_label(&m, generate_inputs(&m, 3, 40)).unwrap();
        let p = plan_tmr(&m, &d, TmrMode::StConv, 0.99, &params(1e-3, 1.0)).unwrap();
        assert_eq!(p.steps, 1);
        assert_eq!(p.layers.len(), 1);
        assert_eq!((p.layers[0].mul_fraction, p.layers[0].add_fraction), (1.0, 1.0));
        assert!(p.accuracy >= 0.99);
    }

    #[test]
    fn unreachable_goal_is_reported() {
        let m = generate_synthetic_model(2, Profile::SingleFc, FxpFormat::INT16).unwrap();
        let d = self_label(&m, generate_inputs(&m, 3, 20)).unwrap();
        // Protected ops still fail at this rate.
        let r = plan_tmr(&m, &d, TmrMode::StConv, 1.0, &params(0.2, 0.5));
        assert!(matches!(r, Err(Error::GoalUnreachable { .. })));
    }

    #[test]
    fn realized_counts_match_fractions_and_invocations() {
        let m = generate_synthetic_model(2, Profile::Default, FxpFormat::INT16).unwrap();
        let d = self_label(&m, generate_inputs(&m, 3, 4)).unwrap();
        let prm = params(1e-6, 0.1);
        for mode in [TmrMode::StConv, TmrMode::WgWAft] {
            let exec = m.with_engine(mode.exec_engine()).unwrap();
            let cfg = prm.base.clone();
            let layers: Vec<LayerProtection> = exec
                .weighted_layers()
                .iter()
                .map(|&l| {
                    let (nm, na) = runtime_counts(&exec, l, &cfg);
                    LayerProtection::new(l, 0.3 + 0.1 * (l % 3) as f64, nm, na)
                })
                .collect();
            let plan = TmrPlan {
                mode,
                ber: prm.ber,
                goal: 1.0,
                selection_seed: prm.selection_seed(),
                overhead: plan_overhead(&layers, &prm.cost),
                layers,
                steps: 0,
                accuracy: 0.0,
                ci: Interval { lo: 0.0, hi: 1.0 },
            };
            let realized = realized_protection(&m, &plan, &cfg).unwrap();
            let mut total = 0;
            for (l, (layer, pm, pa)) in plan.layers.iter().zip(&realized) {
                assert_eq!(l.layer, *layer);
                for (p, frac, n) in [(*pm, l.mul_fraction, l.n_mul), (*pa, l.add_fraction, l.n_add)] {
                    let mean = frac * n as f64;
                    let sd = (n as f64 * frac * (1.0 - frac)).sqrt();
                    assert!((p as f64 - mean).abs() <= 4.0 * sd + 1.0, "layer {layer}: {p} vs {mean}");
                }
                total += pm + pa;
            }
            // Overhead accounting: every protected site runs twice more per inference.
            let run = FaultConfig {
                protection: plan.protection(),
                ..cfg.clone()
            };
            let r = evaluate_accuracy(&exec, &d, &run, 1).unwrap();
            assert_eq!(r.stats.protected, total * d.len() as u64);
        }
    }

    /// WG_WO_AFT deploys ST_CONV's fractions, costed on Winograd counts.
    #[test]
    fn without_awareness_reuses_direct_fractions() {
        let m = generate_synthetic_model(2, Profile::Small, FxpFormat::INT16).unwrap();
        let d = self_label(&m, generate_inputs(&m, 3, 40)).unwrap();
        let prm = params(1e-5, 0.25);
        let cmp = compare_modes(&m, &d, &[0.7, 0.9], &prm).unwrap();
        let wg = m.with_engine(Engine::Winograd).unwrap();
        for goal in [0.7, 0.9] {
            let (Some(st), Some(wo)) = (
                cmp.row(goal, TmrMode::StConv).unwrap().plan.as_ref(),
                cmp.row(goal, TmrMode::WgWoAft).unwrap().plan.as_ref(),
            ) else {
                panic!("goal {goal} unreached");
            };
            assert_eq!(st.steps, wo.steps);
            assert_eq!(st.layers.len(), wo.layers.len());
            for (a, b) in st.layers.iter().zip(&wo.layers) {
                assert_eq!((a.layer, a.layer_fraction), (b.layer, b.layer_fraction));
                assert_eq!((b.n_mul, b.n_add), runtime_counts(&wg, b.layer, &prm.base));
            }
            assert!(wo.overhead.weighted <= st.overhead.weighted);
        }
        assert_eq!(cmp.schedules[0].steps, cmp.schedules[1].steps);
    }

    #[test]
    fn protection_never_hurts_paired() {
        let m = generate_synthetic_model(2, Profile::Small, FxpFormat::INT16).unwrap();
        let d = self_label(&m, generate_inputs(&m, 3, 60)).unwrap();
        let exec = m.clone();
        let cfg = FaultConfig::op_level(3e-5, 8);
        let mut prev = evaluate_accuracy(&exec, &d, &cfg, 3).unwrap();
        for phi in [0.3, 0.6, 1.0] {
            let layers: Vec<LayerProtection> = exec
                .weighted_layers()
                .iter()
                .map(|&l| {
                    let (nm, na) = runtime_counts(&exec, l, &cfg);
                    LayerProtection::new(l, phi, nm, na)
                })
                .collect();
            let c = FaultConfig {
                protection: protection_set(&layers, 5),
                ..cfg.clone()
            };
            let r = evaluate_accuracy(&exec, &d, &c, 3).unwrap();
            assert!(r.ci.hi >= prev.ci.lo, "phi {phi}: {} < {}", r.accuracy, prev.accuracy);
            prev = r;
        }
        assert!(prev.accuracy > 0.95);
    }
}
