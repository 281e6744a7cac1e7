//! One function per subcommand. Each loads the model and dataset named by
//! the config, runs one analysis and hands its tables to the emitter.

use std::time::Instant;

use serde::Serialize;
use wft_core::analysis::{
    analysis_ber, ber_sweep, fi_mode_compare, layer_vulnerability, op_type_vulnerability, Measurement, SweepSpec,
};
use wft_core::conv::Engine;
use wft_core::energy::energy_report;
use wft_core::fault::FaultMode;
use wft_core::io;
use wft_core::network::{generate_inputs, generate_synthetic_model, self_label, Dataset, Model};
use wft_core::tmr::{compare_modes, TmrMode};

use crate::config::{DerivedSeeds, ExperimentConfig};
use crate::error::CliError;
use crate::report::{num, opt_num, Emitter, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Gen,
    Sweep,
    CompareFi,
    LayerVuln,
    OptypeVuln,
    Tmr,
    Energy,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Sweep => "sweep",
            Command::CompareFi => "compare-fi",
            Command::LayerVuln => "layer-vuln",
            Command::OptypeVuln => "optype-vuln",
            Command::Tmr => "tmr",
            Command::Energy => "energy",
        }
    }
}

/// Wall-clock phases; reported in the manifest only.
#[derive(Debug, Default, Serialize)]
pub struct Timings {
    pub phases: Vec<(String, f64)>,
}

impl Timings {
    fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.phases.push((name.to_string(), t.elapsed().as_secs_f64()));
        out
    }
}

pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub seeds: DerivedSeeds,
    pub emitter: Emitter,
    pub timings: Timings,
    /// Ber used by the single-ber analyses, once resolved.
    pub analysis_ber: Option<f64>,
}

pub fn run(cmd: Command, ctx: &mut Context) -> Result<(), CliError> {
    let model = ctx.timings.time("model", || load_model(ctx.cfg, &ctx.seeds))?;
    let dataset = ctx.timings.time("dataset", || load_dataset(ctx.cfg, &model, &ctx.seeds))?;
    match cmd {
        Command::Gen => gen(ctx, &model, &dataset),
        Command::Sweep => sweep(ctx, &model, &dataset),
        Command::CompareFi => compare_fi(ctx, &model, &dataset),
        Command::LayerVuln => layer_vuln(ctx, &model, &dataset),
        Command::OptypeVuln => optype_vuln(ctx, &model, &dataset),
        Command::Tmr => tmr(ctx, &model, &dataset),
        Command::Energy => energy(ctx, &model, &dataset),
    }
}

pub fn load_model(cfg: &ExperimentConfig, seeds: &DerivedSeeds) -> Result<Model, CliError> {
    Ok(match &cfg.model.path {
        Some(p) => io::load_model(p)?,
        None => generate_synthetic_model(seeds.model, cfg.profile()?, cfg.format()?)?,
    })
}

pub fn load_dataset(cfg: &ExperimentConfig, model: &Model, seeds: &DerivedSeeds) -> Result<Dataset, CliError> {
    let ds = match &cfg.dataset.path {
        Some(p) => io::load_dataset(p)?,
        None => self_label(model, generate_inputs(model, seeds.dataset, cfg.dataset.samples))?,
    };
    if ds.inputs.first().is_some_and(|x| x.shape() != model.input_shape.as_slice()) || ds.num_classes != model.num_classes {
        return Err(CliError::Core(wft_core::Error::ShapeMismatch(
            "dataset does not match the model input shape or class count".into(),
        )));
    }
    Ok(ds)
}

fn gen(ctx: &mut Context, model: &Model, dataset: &Dataset) -> Result<(), CliError> {
    let m = io::encode_model(model)?;
    let d = io::encode_dataset(dataset)?;
    ctx.emitter.write("model.wftm", &m)?;
    ctx.emitter.write("dataset.wftd", &d)?;
    Ok(())
}

const MEASUREMENT_HEADER: &[&str] = &["engine", "mode", "ber", "subject", "accuracy", "ci_lo", "ci_hi", "correct", "total"];

fn measurement_row(m: &Measurement) -> Vec<String> {
    vec![
        m.engine.name().into(),
        m.mode.name().into(),
        num(m.ber),
        m.subject.clone(),
        num(m.accuracy),
        num(m.ci_lo),
        num(m.ci_hi),
        m.correct.to_string(),
        m.total.to_string(),
    ]
}

fn sweep(ctx: &mut Context, model: &Model, dataset: &Dataset) -> Result<(), CliError> {
    let spec = ctx.cfg.sweep_spec(ctx.seeds.fault)?;
    let report = ctx.timings.time("sweep", || ber_sweep(model, dataset, &spec))?;
    let mut points = Table::new("sweep", MEASUREMENT_HEADER);
    for m in &report.points {
        points.push(measurement_row(m));
    }
    let mut imp = Table::new(
        "sweep_improvement",
        &["mode", "ber", "direct", "winograd", "improvement", "separated", "not_worse"],
    );
    for i in &report.improvement {
        imp.push(vec![
            i.mode.name().into(),
            num(i.ber),
            num(i.direct),
            num(i.winograd),
            num(i.improvement),
            i.separated.to_string(),
            i.not_worse.to_string(),
        ]);
    }
    ctx.emitter.emit("sweep", &[points, imp], &report)
}

fn compare_fi(ctx: &mut Context, model: &Model, dataset: &Dataset) -> Result<(), CliError> {
    let spec = ctx.cfg.sweep_spec(ctx.seeds.fault)?;
    let report = ctx.timings.time("compare_fi", || fi_mode_compare(model, dataset, &spec))?;
    let mut t = Table::new(
        "compare_fi",
        &[
            "mode",
            "ber",
            "direct_accuracy",
            "direct_ci_lo",
            "direct_ci_hi",
            "winograd_accuracy",
            "winograd_ci_lo",
            "winograd_ci_hi",
            "overlapping",
            "separated",
        ],
    );
    for r in &report.rows {
        t.push(vec![
            r.mode.name().into(),
            num(r.ber),
            num(r.direct.accuracy),
            num(r.direct.ci_lo),
            num(r.direct.ci_hi),
            num(r.winograd.accuracy),
            num(r.winograd.ci_lo),
            num(r.winograd.ci_hi),
            r.overlapping.to_string(),
            r.separated.to_string(),
        ]);
    }
    let mut s = Table::new("compare_fi_summary", &["neuron_indistinguishable", "op_separated"]);
    s.push(vec![
        report.neuron_indistinguishable.to_string(),
        report.op_separated.to_string(),
    ]);
    ctx.emitter.emit("compare_fi", &[t, s], &report)
}

/// Configured ber, or the grid point where direct op-level accuracy is
/// closest to one half.
pub fn resolve_ber(ctx: &mut Context, model: &Model, dataset: &Dataset) -> Result<f64, CliError> {
    if let Some(b) = ctx.cfg.analysis.ber {
        ctx.analysis_ber = Some(b);
        return Ok(b);
    }
    let spec = SweepSpec {
        engines: vec![Engine::Direct],
        modes: vec![FaultMode::OpLevel],
        ..ctx.cfg.sweep_spec(ctx.seeds.fault)?
    };
    let report = ctx.timings.time("analysis_ber", || ber_sweep(model, dataset, &spec))?;
    let ber = analysis_ber(&report.series(Engine::Direct, FaultMode::OpLevel))
        .ok_or_else(|| CliError::ConfigInvalid("sweep grid has no ber > 0".into()))?;
    ctx.analysis_ber = Some(ber);
    Ok(ber)
}

fn layer_vuln(ctx: &mut Context, model: &Model, dataset: &Dataset) -> Result<(), CliError> {
    let ber = resolve_ber(ctx, model, dataset)?;
    let base = ctx.cfg.base_fault(ctx.seeds.fault)?;
    let trials = ctx.cfg.fault.trials;
    let mut reports = Vec::new();
    for engine in Engine::ALL {
        let r = ctx.timings.time(&format!("layer_vuln_{}", engine.name()), || {
            layer_vulnerability(model, dataset, ber, engine, trials, &base)
        })?;
        reports.push(r);
    }
    let mut t = Table::new(
        "layer_vuln",
        &[
            "engine",
            "ber",
            "layer",
            "kind",
            "n_mul",
            "n_add",
            "baseline_accuracy",
            "exempted_accuracy",
            "ci_lo",
            "ci_hi",
            "vf",
            "ci_width",
        ],
    );
    let mut s = Table::new(
        "layer_vuln_summary",
        &["engine", "ber", "baseline_accuracy", "ci_lo", "ci_hi", "spearman_vf_mul"],
    );
    for r in &reports {
        for l in &r.layers {
            t.push(vec![
                r.engine.name().into(),
                num(r.ber),
                l.layer.to_string(),
                l.kind.clone(),
                l.n_mul.to_string(),
                l.n_add.to_string(),
                num(r.baseline.accuracy),
                num(l.exempted.accuracy),
                num(l.exempted.ci_lo),
                num(l.exempted.ci_hi),
                num(l.vf),
                num(l.ci_width),
            ]);
        }
        s.push(vec![
            r.engine.name().into(),
            num(r.ber),
            num(r.baseline.accuracy),
            num(r.baseline.ci_lo),
            num(r.baseline.ci_hi),
            num(r.spearman_mul),
        ]);
    }
    ctx.emitter.emit("layer_vuln", &[t, s], &reports)
}

fn optype_vuln(ctx: &mut Context, model: &Model, dataset: &Dataset) -> Result<(), CliError> {
    let ber = resolve_ber(ctx, model, dataset)?;
    let base = ctx.cfg.base_fault(ctx.seeds.fault)?;
    let report = ctx.timings.time("optype_vuln", || {
        op_type_vulnerability(model, dataset, ber, &Engine::ALL, ctx.cfg.fault.trials, &base)
    })?;
    let mut t = Table::new("optype_vuln", MEASUREMENT_HEADER);
    let mut s = Table::new(
        "optype_vuln_summary",
        &["engine", "ber", "mul_sensitivity", "add_sensitivity", "mul_more_vulnerable"],
    );
    for r in &report.rows {
        for m in [&r.all_faulty, &r.mul_fault_free, &r.add_fault_free] {
            t.push(measurement_row(m));
        }
        s.push(vec![
            r.engine.name().into(),
            num(report.ber),
            num(r.mul_sensitivity),
            num(r.add_sensitivity),
            r.mul_more_vulnerable.to_string(),
        ]);
    }
    ctx.emitter.emit("optype_vuln", &[t, s], &report)
}

fn tmr(ctx: &mut Context, model: &Model, dataset: &Dataset) -> Result<(), CliError> {
    let ber = resolve_ber(ctx, model, dataset)?;
    let params = ctx.cfg.planner_params(ctx.seeds.fault, ber);
    let report = ctx
        .timings
        .time("tmr", || compare_modes(model, dataset, &ctx.cfg.tmr.goals, &params))?;
    let mut t = Table::new(
        "tmr",
        &[
            "goal",
            "mode",
            "reached",
            "steps",
            "accuracy",
            "ci_lo",
            "ci_hi",
            "extra_mul",
            "extra_add",
            "weighted_overhead",
            "normalized_weighted",
            "normalized_raw",
        ],
    );
    let mut plans = Table::new(
        "tmr_plan",
        &["goal", "mode", "layer", "layer_fraction", "mul_fraction", "add_fraction", "n_mul", "n_add"],
    );
    for r in &report.rows {
        let mut row = vec![num(r.goal), r.mode.name().into(), r.plan.is_some().to_string()];
        match &r.plan {
            Some(p) => {
                row.extend([
                    p.steps.to_string(),
                    num(p.accuracy),
                    num(p.ci.lo),
                    num(p.ci.hi),
                    num(p.overhead.extra_mul),
                    num(p.overhead.extra_add),
                    num(p.overhead.weighted),
                ]);
                for l in &p.layers {
                    plans.push(vec![
                        num(r.goal),
                        r.mode.name().into(),
                        l.layer.to_string(),
                        num(l.layer_fraction),
                        num(l.mul_fraction),
                        num(l.add_fraction),
                        l.n_mul.to_string(),
                        l.n_add.to_string(),
                    ]);
                }
            }
            None => row.extend(std::iter::repeat_n(String::new(), 7)),
        }
        row.extend([opt_num(r.normalized_weighted), opt_num(r.normalized_raw)]);
        t.push(row);
    }
    let mut sched = Table::new("tmr_schedule", &["mode", "step", "raised", "accuracy", "ci_lo", "ci_hi"]);
    for s in &report.schedules {
        for (i, st) in s.steps.iter().enumerate() {
            sched.push(vec![
                s.mode.name().into(),
                i.to_string(),
                st.raised.map(|l| l.to_string()).unwrap_or_default(),
                num(st.accuracy),
                num(st.ci.lo),
                num(st.ci.hi),
            ]);
        }
    }
    ctx.emitter.emit("tmr", &[t, plans, sched], &report)
}

fn energy(ctx: &mut Context, model: &Model, dataset: &Dataset) -> Result<(), CliError> {
    let params = ctx.cfg.energy_params(ctx.seeds.fault)?;
    let report = ctx.timings.time("energy", || {
        energy_report(model, dataset, &TmrMode::ALL, &ctx.cfg.energy.budgets, &params)
    })?;
    let mut t = Table::new(
        "energy",
        &[
            "budget",
            "mode",
            "voltage",
            "ber",
            "accuracy",
            "ci_lo",
            "ci_hi",
            "power",
            "runtime_s",
            "energy",
            "normalized_energy",
        ],
    );
    for c in &report.cells {
        t.push(vec![
            num(c.budget),
            c.mode.name().into(),
            num(c.voltage),
            num(c.ber),
            num(c.accuracy),
            num(c.ci.lo),
            num(c.ci.hi),
            num(c.power),
            num(c.runtime),
            num(c.energy),
            num(c.normalized),
        ]);
    }
    let mut curve = Table::new("energy_curve", &["engine", "voltage", "ber", "accuracy", "ci_lo", "ci_hi"]);
    for (engine, pts) in &report.curves {
        for p in pts {
            curve.push(vec![
                engine.name().into(),
                num(p.voltage),
                num(p.ber),
                num(p.accuracy),
                num(p.ci.lo),
                num(p.ci.hi),
            ]);
        }
    }
    ctx.emitter.emit("energy", &[t, curve], &report)
}
