//! End-to-end acceptance run on the shipped default configuration. Prints
//! one PASS/FAIL line per criterion and exits nonzero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use statrs::distribution::{ChiSquared, ContinuousCDF};
use wft_cli::commands::{load_dataset, load_model};
use wft_cli::config::ExperimentConfig;
use wft_core::analysis::{analysis_ber, ber_sweep, layer_vulnerability, op_type_vulnerability, SweepReport};
use wft_core::conv::{count_ops, direct_conv, winograd_conv, ConvSpec, Engine, IdentityHook, OpKind, OpSite, Stage};
use wft_core::energy::energy_report;
use wft_core::fault::{FaultConfig, FaultHook, FaultMode, FlipSampler};
use wft_core::fxp::{DatapathSpec, FxpFormat, FxpTensor};
use wft_core::network::{Dataset, Model};
use wft_core::rng::RngStream;
use wft_core::tmr::{compare_modes, TmrMode};

const EPS: f64 = 1e-12;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Shared {
    cfg: ExperimentConfig,
    model: Model,
    dataset: Dataset,
    sweep: Option<SweepReport>,
}

impl Shared {
    fn fault_seed(&self) -> u64 {
        self.cfg.seeds().fault
    }

    fn base(&self) -> FaultConfig {
        self.cfg.base_fault(self.fault_seed()).unwrap()
    }

    fn sweep(&mut self) -> &SweepReport {
        if self.sweep.is_none() {
            let mut spec = self.cfg.sweep_spec(self.fault_seed()).unwrap();
            spec.modes = vec![FaultMode::NeuronLevel, FaultMode::OpLevel];
            self.sweep = Some(ber_sweep(&self.model, &self.dataset, &spec).unwrap());
        }
        self.sweep.as_ref().unwrap()
    }

    fn analysis_ber(&mut self) -> f64 {
        analysis_ber(&self.sweep().series(Engine::Direct, FaultMode::OpLevel)).unwrap()
    }
}

fn random_tensor(rng: &mut RngStream, shape: Vec<usize>, format: FxpFormat) -> FxpTensor {
    let n: usize = shape.iter().product();
    let (lo, hi) = (format.min_raw() as i64, format.max_raw() as i64);
    let data = (0..n)
        .map(|_| (lo + (rng.next_u64() % (hi - lo + 1) as u64) as i64) as i32)
        .collect();
    FxpTensor::new(shape, data, format).unwrap()
}

fn winograd_exactness(_: &mut Shared) -> Outcome {
    let mut rng = RngStream::new(&[0xacce, 1]);
    let mut checked = 0;
    for i in 0..1200u64 {
        let format = if i % 2 == 0 { FxpFormat::INT8 } else { FxpFormat::INT16 };
        let dp = DatapathSpec {
            acc_bits: [2 * format.word_bits, 24, 32][(i % 3) as usize].max(2 * format.word_bits),
            ..DatapathSpec::for_format(format)
        };
        let pick = |rng: &mut RngStream, lo: u64, hi: u64| (lo + rng.next_u64() % (hi - lo + 1)) as usize;
        let padding = pick(&mut rng, 0, 1);
        let spec = ConvSpec::new3x3(
            pick(&mut rng, 1, 6),
            pick(&mut rng, 1, 5),
            pick(&mut rng, 3 - 2 * padding as u64, 10),
            pick(&mut rng, 3 - 2 * padding as u64, 10),
            padding,
        );
        let x = random_tensor(&mut rng, spec.input_shape(), format);
        let w = random_tensor(&mut rng, spec.weight_shape(), format);
        let d = direct_conv(&x, &w, &spec, &dp, 0, &IdentityHook).unwrap();
        let g = winograd_conv(&x, &w, &spec, &dp, 0, &IdentityHook).unwrap();
        if d != g {
            return outcome(false, format!("mismatch on {spec:?} {format:?} {dp:?}"));
        }
        checked += 1;
    }
    outcome(true, format!("{checked} random layers bit-identical"))
}

fn multiplication_reduction(_: &mut Shared) -> Outcome {
    let mut n = 0;
    for c in [1, 3, 8, 16] {
        for k in [1, 4, 16] {
            for hw in [2, 4, 8, 16, 32] {
                let spec = ConvSpec::new3x3(c, k, hw + 2, hw + 2, 0);
                let d = count_ops(&spec, Engine::Direct).unwrap();
                let w = count_ops(&spec, Engine::Winograd).unwrap();
                let ew = w.get(OpKind::Mul, Stage::ElementWise);
                let dm = d.get(OpKind::Mul, Stage::Dot);
                if 36 * ew != 16 * dm {
                    return outcome(false, format!("{spec:?}: winograd {ew} vs direct {dm}"));
                }
                n += 1;
            }
        }
    }
    outcome(true, format!("36*ew_mul == 16*direct_mul on {n} tile-aligned shapes"))
}

fn fault_model_comparison(s: &mut Shared) -> Outcome {
    let sweep = s.sweep();
    let mut neuron_ok = true;
    let mut separated = Vec::new();
    for imp in &sweep.improvement {
        let d = sweep.get(Engine::Direct, imp.mode, imp.ber).unwrap();
        let w = sweep.get(Engine::Winograd, imp.mode, imp.ber).unwrap();
        match imp.mode {
            FaultMode::NeuronLevel => neuron_ok &= d.ci().overlaps(&w.ci()),
            _ => {
                if w.ci_lo > d.ci_hi {
                    separated.push(imp.ber);
                }
            }
        }
    }
    outcome(
        neuron_ok && !separated.is_empty(),
        format!("neuron-level overlap everywhere: {neuron_ok}; op-level separated at {separated:?}"),
    )
}

fn accuracy_trend(s: &mut Shared) -> Outcome {
    let sweep = s.sweep();
    let mut increases = Vec::new();
    for e in Engine::ALL {
        let series = sweep.series(e, FaultMode::OpLevel);
        for (i, a) in series.iter().enumerate() {
            for b in &series[i + 1..] {
                if b.ci_lo > a.ci_hi {
                    increases.push((e.name(), a.ber, b.ber));
                }
            }
        }
    }
    let op: Vec<_> = sweep
        .improvement
        .iter()
        .filter(|i| i.mode == FaultMode::OpLevel)
        .collect();
    let worse: Vec<f64> = op.iter().filter(|i| !i.not_worse).map(|i| i.ber).collect();
    let best = op.iter().map(|i| i.improvement).fold(f64::NEG_INFINITY, f64::max);
    outcome(
        increases.is_empty() && worse.is_empty() && best > 0.0,
        format!(
            "significant increases {increases:?}; winograd below direct at {worse:?}; max improvement {best:.3}"
        ),
    )
}

fn layer_vf(s: &mut Shared) -> Outcome {
    let ber = s.analysis_ber();
    let base = s.base();
    let mut pass = true;
    let mut detail = format!("ber {ber:e}");
    for e in Engine::ALL {
        let r = layer_vulnerability(&s.model, &s.dataset, ber, e, s.cfg.fault.trials, &base).unwrap();
        let low: Vec<u32> = r.layers.iter().filter(|l| l.vf < -l.ci_width).map(|l| l.layer).collect();
        pass &= low.is_empty() && r.spearman_mul > 0.0;
        detail += &format!("; {}: spearman {:.3}, vf below -ci {low:?}", e.name(), r.spearman_mul);
    }
    outcome(pass, detail)
}

fn op_type(s: &mut Shared) -> Outcome {
    let ber = s.analysis_ber();
    let r = op_type_vulnerability(&s.model, &s.dataset, ber, &Engine::ALL, s.cfg.fault.trials, &s.base()).unwrap();
    let mut detail = format!("ber {ber:e}");
    for row in &r.rows {
        detail += &format!(
            "; {}: mul-free {:.3} [{:.3},{:.3}] add-free {:.3} [{:.3},{:.3}]",
            row.engine.name(),
            row.mul_fault_free.accuracy,
            row.mul_fault_free.ci_lo,
            row.mul_fault_free.ci_hi,
            row.add_fault_free.accuracy,
            row.add_fault_free.ci_lo,
            row.add_fault_free.ci_hi
        );
    }
    outcome(r.rows.iter().all(|row| row.mul_fault_free.ci_hi >= row.add_fault_free.ci_lo), detail)
}

fn tmr_overhead(s: &mut Shared) -> Outcome {
    let ber = s.analysis_ber();
    let params = s.cfg.planner_params(s.fault_seed(), ber);
    let goals = s.cfg.tmr.goals.clone();
    let cmp = compare_modes(&s.model, &s.dataset, &goals, &params).unwrap();
    let mut pass = true;
    let mut reductions = Vec::new();
    let mut detail = format!("ber {ber:e}");
    for &g in &goals {
        let v = |m: TmrMode| cmp.row(g, m).and_then(|r| r.normalized_weighted);
        match (v(TmrMode::StConv), v(TmrMode::WgWoAft), v(TmrMode::WgWAft)) {
            (Some(st), Some(wo), Some(w)) => {
                pass &= (st - 1.0).abs() < EPS && wo <= st + EPS && w <= wo + EPS;
                reductions.push(wo - w);
                detail += &format!("; goal {g}: {st:.3}/{wo:.3}/{w:.3}");
            }
            other => {
                pass = false;
                detail += &format!("; goal {g}: undefined {other:?}");
            }
        }
    }
    let mean = reductions.iter().sum::<f64>() / reductions.len().max(1) as f64;
    pass &= mean > 0.0;
    outcome(pass, format!("{detail}; mean W/O-W reduction {mean:.4}"))
}

fn energy(s: &mut Shared) -> Outcome {
    let params = s.cfg.energy_params(s.fault_seed()).unwrap();
    let budgets = s.cfg.energy.budgets.clone();
    let r = energy_report(&s.model, &s.dataset, &TmrMode::ALL, &budgets, &params).unwrap();
    let mut pass = true;
    let mut detail = String::new();
    for m in TmrMode::ALL {
        let v: Vec<f64> = budgets.iter().map(|&b| r.cell(m, b).unwrap().voltage).collect();
        pass &= v.windows(2).all(|w| w[1] <= w[0] + EPS);
        detail += &format!("{} V {:?}; ", m.name(), v);
    }
    for &b in &budgets {
        let e = |m: TmrMode| r.cell(m, b).unwrap().normalized;
        let (st, wo, w) = (e(TmrMode::StConv), e(TmrMode::WgWoAft), e(TmrMode::WgWAft));
        pass &= w <= wo + EPS && wo <= st + EPS && st <= 1.0 + EPS;
        if b == budgets[0] || b == *budgets.last().unwrap() {
            detail += &format!("budget {b}: E {st:.3}/{wo:.3}/{w:.3}; ");
        }
    }
    outcome(pass, detail.trim_end_matches("; ").to_string())
}

fn chi_square_p(a: &[u64], b: &[u64]) -> f64 {
    // Pool the tail so every cell has an expected count of at least 5.
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        acc.0 += *x as f64;
        acc.1 += *y as f64;
        let total = acc.0 + acc.1;
        if total * na.min(nb) / (na + nb) >= 5.0 {
            cells.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if let Some(last) = cells.last_mut() {
        last.0 += acc.0;
        last.1 += acc.1;
    }
    let mut stat = 0.0;
    for (x, y) in &cells {
        let t = x + y;
        let ea = t * na / (na + nb);
        let eb = t * nb / (na + nb);
        stat += (x - ea).powi(2) / ea + (y - eb).powi(2) / eb;
    }
    let dof = (cells.len() - 1) as f64;
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}

fn statistical_fidelity(_: &mut Shared) -> Outcome {
    let (ber, width, n) = (0.01, 32u32, 1_000_000u64);
    let sampler = FlipSampler::new(ber);
    let mut fast = vec![0u64; width as usize + 1];
    let mut naive = vec![0u64; width as usize + 1];
    for i in 0..n {
        let mut r = RngStream::new(&[0xf1, i]);
        fast[sampler.sample_geometric(width, &mut r).count_ones() as usize] += 1;
        let mut r = RngStream::new(&[0xf2, i]);
        naive[sampler.sample_naive(width, &mut r).count_ones() as usize] += 1;
    }
    let p = chi_square_p(&fast, &naive);

    let b = 0.01;
    let mut cfg = FaultConfig::op_level(b, 0x7312);
    cfg.protection.set(0, OpKind::Mul, 1.0, 5);
    let hook = FaultHook::new(&cfg, 1);
    let sites = 1_000_000u64;
    let mut bad_bits = 0u64;
    for i in 0..sites {
        let out = hook.inject_op(OpSite::new(0, OpKind::Mul, Stage::Dot, i), 0, width);
        bad_bits += out.count_ones() as u64;
    }
    let rate = bad_bits as f64 / (sites * width as u64) as f64;
    let expected = 3.0 * b * b * (1.0 - b) + b * b * b;
    let rel = (rate - expected).abs() / expected;
    outcome(
        p > 0.01 && rel < 0.05,
        format!("flip-count chi-square p {p:.3}; tmr residual {rate:.3e} vs {expected:.3e} ({:.2}% off)", rel * 100.0),
    )
}

const REDUCED_CONFIG: &str = r#"
seed = 11
[model]
profile = "small"
[dataset]
samples = 60
[fault]
trials = 2
[sweep]
lo_exp = -6
hi_exp = -4
per_decade = 2
[tmr]
goals = [0.6, 0.8]
step = 0.25
[energy]
step = 0.02
budgets = [0.05, 0.1, 0.2]
"#;

fn data_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().to_string_lossy().to_string();
        if !name.ends_with(".manifest.json") {
            files.insert(name, std::fs::read(e.path()).unwrap());
        }
    }
    files
}

fn determinism(_: &mut Shared) -> Outcome {
    let root = std::env::temp_dir().join(format!("wft-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&root).unwrap();
    let cfg_path = root.join("reduced.toml");
    std::fs::write(&cfg_path, REDUCED_CONFIG).unwrap();
    let commands = ["gen", "sweep", "compare-fi", "layer-vuln", "optype-vuln", "tmr", "energy"];
    let mut compared = 0;
    for format in ["csv", "json"] {
        let runs: Vec<_> = [("1", "a"), ("3", "b"), ("1", "c")]
            .iter()
            .map(|(workers, tag)| {
                let out = root.join(format!("{format}-{tag}"));
                for c in commands {
                    let st = Command::new(env!("CARGO_BIN_EXE_wft"))
                        .args(["--config", cfg_path.to_str().unwrap(), "--workers", workers, "--format", format])
                        .arg("--out")
                        .arg(&out)
                        .arg(c)
                        .output()
                        .unwrap();
                    assert!(st.status.success(), "{c}: {}", String::from_utf8_lossy(&st.stderr));
                }
                data_files(&out)
            })
            .collect();
        for other in &runs[1..] {
            if other != &runs[0] {
                return outcome(false, format!("{format} outputs differ between runs"));
            }
        }
        compared += runs[0].len();
    }
    std::fs::remove_dir_all(&root).unwrap();
    outcome(
        true,
        format!("{} subcommands x 3 runs (workers 1/3/1), {compared} data files byte-identical", commands.len()),
    )
}

type Criterion = (&'static str, Duration, fn(&mut Shared) -> Outcome);

fn main() {
    let cfg = ExperimentConfig::default();
    let seeds = cfg.seeds();
    let model = load_model(&cfg, &seeds).unwrap();
    let dataset = load_dataset(&cfg, &model, &seeds).unwrap();
    let mut shared = Shared {
        cfg,
        model,
        dataset,
        sweep: None,
    };
    let min = |m: u64| Duration::from_secs(60 * m);
    let criteria: [Criterion; 10] = [
        ("winograd-exactness", min(1), winograd_exactness),
        ("multiplication-reduction", Duration::from_secs(1), multiplication_reduction),
        ("fault-model-comparison", min(10), fault_model_comparison),
        ("accuracy-vs-ber-trend", min(10), accuracy_trend),
        ("layer-vulnerability", min(15), layer_vf),
        ("op-type-vulnerability", min(10), op_type),
        ("tmr-overhead-ordering", min(30), tmr_overhead),
        ("voltage-energy-ordering", min(15), energy),
        ("statistical-fidelity", min(2), statistical_fidelity),
        ("determinism", min(60), determinism),
    ];
    let mut failed = 0;
    for (name, budget, run) in criteria {
        let t = Instant::now();
        let o = run(&mut shared);
        let elapsed = t.elapsed();
        let in_time = elapsed <= budget;
        let pass = o.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "{} {name}: {} [{:.1}s of {}s{}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
