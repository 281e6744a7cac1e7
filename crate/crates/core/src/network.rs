//! Layer graphs, datasets, the synthetic benchmark model and fault-aware
//! inference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{self, ArithmeticHook, ConvSpec, Engine, IdentityHook, OpCounts, OpKind, OpSite, Stage};
use crate::error::{Error, Result};
use crate::fault::{inject_neurons, FaultConfig, FaultHook, FaultMode, InjectionStats};
use crate::fxp::{quantize, requantize_checked, wrap_to, DatapathSpec, FxpFormat, FxpTensor};
use crate::rng::RngStream;
use crate::stats::{wilson, Interval, Z95};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LayerSpec {
    Conv { spec: ConvSpec, engine: Engine },
    Fc { in_features: usize, out_features: usize },
    Relu,
    Maxpool2,
    Flatten,
}

impl LayerSpec {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Fc { .. })
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self {
            LayerSpec::Conv { spec, .. } => Some(spec.weight_shape()),
            LayerSpec::Fc {
                in_features,
                out_features,
            } => Some(vec![*out_features, *in_features]),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "CONV",
            LayerSpec::Fc { .. } => "FC",
            LayerSpec::Relu => "RELU",
            LayerSpec::Maxpool2 => "MAXPOOL2",
            LayerSpec::Flatten => "FLATTEN",
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Conv { spec, engine } => {
                spec.validate()?;
                if input != spec.input_shape().as_slice() {
                    return Err(Error::ShapeMismatch(format!(
                        "conv expects {:?}, got {input:?}",
                        spec.input_shape()
                    )));
                }
                if *engine == Engine::Winograd && !spec.winograd_eligible() {
                    return Err(Error::IneligibleSpec(format!("{spec:?}")));
                }
                Ok(spec.output_shape())
            }
            LayerSpec::Fc {
                in_features,
                out_features,
            } => {
                if input != [*in_features] {
                    return Err(Error::ShapeMismatch(format!(
                        "fc expects [{in_features}], got {input:?}"
                    )));
                }
                if *out_features == 0 {
                    return Err(Error::ShapeMismatch("fc with zero outputs".into()));
                }
                Ok(vec![*out_features])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Maxpool2 => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(Error::ShapeMismatch(format!("maxpool2 on {input:?}"))),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Sites the layer emits under `engine` (conv layers only honour it).
    pub fn op_counts(&self, engine: Engine) -> Result<OpCounts> {
        match self {
            LayerSpec::Conv { spec, .. } => conv::count_ops(spec, engine),
            LayerSpec::Fc {
                in_features,
                out_features,
            } => {
                let mut c = OpCounts::default();
                c.mul[Stage::Dot as usize] = (*in_features * *out_features) as u64;
                c.add[Stage::Dot as usize] = ((*in_features - 1) * *out_features) as u64;
                Ok(c)
            }
            _ => Ok(OpCounts::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub seed: u64,
    pub format: FxpFormat,
    pub datapath: DatapathSpec,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    /// One entry per layer; `Some` exactly for weighted layers.
    pub weights: Vec<Option<FxpTensor>>,
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        self.datapath.validate()?;
        if self.layers.len() != self.weights.len() {
            return Err(Error::InvalidModel(format!(
                "{} layers but {} weight slots",
                self.layers.len(),
                self.weights.len()
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidModel("zero classes".into()));
        }
        let mut shape = self.input_shape.clone();
        for (i, (layer, w)) in self.layers.iter().zip(&self.weights).enumerate() {
            match (layer.weight_shape(), w) {
                (Some(expect), Some(w)) => {
                    if w.shape() != expect.as_slice() {
                        return Err(Error::InvalidModel(format!(
                            "layer {i}: weights {:?}, expected {expect:?}",
                            w.shape()
                        )));
                    }
                    if w.format() != self.format {
                        return Err(Error::InvalidModel(format!("layer {i}: weight format differs")));
                    }
                }
                (None, None) => {}
                _ => return Err(Error::InvalidModel(format!("layer {i}: weight slot mismatch"))),
            }
            shape = layer.output_shape(&shape).map_err(|e| Error::InvalidModel(format!("layer {i}: {e}")))?;
        }
        if shape != [self.num_classes] {
            return Err(Error::InvalidModel(format!(
                "final shape {shape:?} does not match {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Ids of conv/fc layers, in order.
    pub fn weighted_layers(&self) -> Vec<u32> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_weighted())
            .map(|(i, _)| i as u32)
            .collect()
    }

    pub fn conv_layers(&self) -> Vec<u32> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Copy with every conv layer switched to `engine`.
    pub fn with_engine(&self, engine: Engine) -> Result<Model> {
        let mut m = self.clone();
        for l in &mut m.layers {
            if let LayerSpec::Conv { spec, engine: e } = l {
                if engine == Engine::Winograd && !spec.winograd_eligible() {
                    return Err(Error::IneligibleSpec(format!("{spec:?}")));
                }
                *e = engine;
            }
        }
        Ok(m)
    }

    pub fn layer_op_counts(&self, layer: u32) -> OpCounts {
        let l = &self.layers[layer as usize];
        let engine = match l {
            LayerSpec::Conv { engine, .. } => *engine,
            _ => Engine::Direct,
        };
        l.op_counts(engine).unwrap_or_default()
    }

    pub fn op_counts(&self) -> OpCounts {
        let mut total = OpCounts::default();
        for i in 0..self.layers.len() {
            total.add_assign(&self.layer_op_counts(i as u32));
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    SelfLabeled,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<FxpTensor>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.labels.len() {
            return Err(Error::Malformed(format!(
                "{} inputs but {} labels",
                self.inputs.len(),
                self.labels.len()
            )));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::Malformed(format!("label {l} >= {} classes", self.num_classes)));
        }
        if let Some(first) = self.inputs.first() {
            if self.inputs.iter().any(|t| t.shape() != first.shape() || t.format() != first.format()) {
                return Err(Error::Malformed("inputs differ in shape or format".into()));
            }
        }
        Ok(())
    }
}

/// Named layer templates for the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 4 conv 3x3 (8/16/16/32) + 2 FC, 10 classes, 3x16x16 input.
    Default,
    /// 2 conv (4/8) + 1 FC on 1x8x8, for quick tests.
    Small,
    /// A single FC layer on 1x4x4.
    SingleFc,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Profile> {
        match s {
            "default" => Ok(Profile::Default),
            "small" => Ok(Profile::Small),
            "single_fc" => Ok(Profile::SingleFc),
            _ => Err(Error::InvalidArgument(format!("unknown profile {s:?}"))),
        }
    }

    fn template(self) -> (Vec<usize>, Vec<LayerSpec>, usize) {
        let conv = |cin, cout, hw| LayerSpec::Conv {
            spec: ConvSpec::new3x3(cin, cout, hw, hw, 1),
            engine: Engine::Direct,
        };
        let fc = |i, o| LayerSpec::Fc {
            in_features: i,
            out_features: o,
        };
        use LayerSpec::{Flatten, Maxpool2, Relu};
        match self {
            Profile::Default => (
                vec![3, 16, 16],
                vec![
                    conv(3, 8, 16),
                    Relu,
                    Maxpool2,
                    conv(8, 16, 8),
                    Relu,
                    Maxpool2,
                    conv(16, 16, 4),
                    Relu,
                    conv(16, 32, 4),
                    Relu,
                    Maxpool2,
                    Flatten,
                    fc(128, 64),
                    Relu,
                    fc(64, 10),
                ],
                10,
            ),
            Profile::Small => (
                vec![1, 8, 8],
                vec![conv(1, 4, 8), Relu, Maxpool2, conv(4, 8, 4), Relu, Maxpool2, Flatten, fc(32, 10)],
                10,
            ),
            Profile::SingleFc => (vec![1, 4, 4], vec![Flatten, fc(16, 10)], 10),
        }
    }
}

/// Target standard deviation (real units) of each weighted layer's output on
/// the calibration batch.
const CALIBRATION_STD: f64 = 1.0;
const CALIBRATION_SAMPLES: usize = 64;

/// Seeded synthetic model: He-uniform weights, rescaled layer by layer so the
/// fault-free activations of a calibration batch have unit spread, then
/// quantized.
pub fn generate_synthetic_model(seed: u64, profile: Profile, format: FxpFormat) -> Result<Model> {
    let (input_shape, layers, num_classes) = profile.template();
    let mut model = Model {
        name: format!("synthetic-{profile:?}").to_lowercase(),
        seed,
        format,
        datapath: DatapathSpec::for_format(format),
        input_shape: input_shape.clone(),
        num_classes,
        weights: layers
            .iter()
            .map(|l| l.weight_shape().map(|s| FxpTensor::zeros(s, format)))
            .collect(),
        layers,
    };
    model.validate()?;
    let calib: Vec<FxpTensor> = (0..CALIBRATION_SAMPLES)
        .map(|i| random_input(&mut RngStream::new(&[seed, 0xca1b, i as u64]), &input_shape, format))
        .collect();
    let mut acts = calib;
    let last_weighted = model.weighted_layers().last().copied().unwrap_or(0) as usize;
    for li in 0..model.layers.len() {
        let layer = model.layers[li];
        if let Some(shape) = layer.weight_shape() {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = RngStream::new(&[seed, 0x7765_6967, li as u64]);
            let mut raw: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|_| rng.uniform(-bound, bound))
                .collect();
            if li == last_weighted {
                center_rows(&mut raw, fan_in, &acts);
            }
            model.weights[li] = Some(quantize(&raw, shape.clone(), format)?.tensor);
            let spread = output_std(&model, li, &acts)?;
            let gain = if spread > 0.0 { CALIBRATION_STD / spread } else { 1.0 };
            let scaled: Vec<f64> = raw.iter().map(|v| v * gain).collect();
            model.weights[li] = Some(quantize(&scaled, shape, format)?.tensor);
        }
        acts = acts
            .iter()
            .map(|a| run_layer(&model, li as u32, a.clone(), &IdentityHook).map(|(t, _)| t))
            .collect::<Result<_>>()?;
    }
    Ok(model)
}

/// Removes from every row its component along the mean input activation, so
/// no class is favoured on average and self-labels spread over the classes.
fn center_rows(w: &mut [f64], fan_in: usize, inputs: &[FxpTensor]) {
    let mut mean = vec![0.0; fan_in];
    for x in inputs {
        for (m, v) in mean.iter_mut().zip(x.dequantize()) {
            *m += v / inputs.len() as f64;
        }
    }
    let norm2: f64 = mean.iter().map(|m| m * m).sum();
    if norm2 == 0.0 || mean.len() != fan_in {
        return;
    }
    for row in w.chunks_mut(fan_in) {
        let dot: f64 = row.iter().zip(&mean).map(|(a, b)| a * b).sum();
        for (r, m) in row.iter_mut().zip(&mean) {
            *r -= dot / norm2 * m;
        }
    }
}

fn output_std(model: &Model, layer: usize, inputs: &[FxpTensor]) -> Result<f64> {
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0.0;
    for x in inputs {
        let (y, _) = run_layer(model, layer as u32, x.clone(), &IdentityHook)?;
        for v in y.dequantize() {
            sum += v;
            sq += v * v;
            n += 1.0;
        }
    }
    let mean = sum / n;
    Ok((sq / n - mean * mean).max(0.0).sqrt())
}

/// Uniform inputs in [-1, 1).
pub fn random_input(rng: &mut RngStream, shape: &[usize], format: FxpFormat) -> FxpTensor {
    let n = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    quantize(&vals, shape.to_vec(), format).expect("finite inputs").tensor
}

pub fn generate_inputs(model: &Model, seed: u64, n: usize) -> Vec<FxpTensor> {
    (0..n)
        .map(|i| random_input(&mut RngStream::new(&[seed, 0x1a7a, i as u64]), &model.input_shape, model.format))
        .collect()
}

/// Labels every input with the fault-free direct-engine prediction.
pub fn self_label(model: &Model, inputs: Vec<FxpTensor>) -> Result<Dataset> {
    let direct = model.with_engine(Engine::Direct)?;
    let labels = inputs
        .par_iter()
        .map(|x| infer(&direct, x, &FaultConfig::none()).map(|r| argmax(&r.logits) as u32))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        inputs,
        labels,
        num_classes: model.num_classes,
        provenance: Provenance::SelfLabeled,
    })
}

/// First index of the maximum.
pub fn argmax(v: &[i32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub logits: Vec<i32>,
    pub stats: InjectionStats,
    /// Output of every layer when tracing was requested.
    pub trace: Vec<FxpTensor>,
}

fn fc<H: ArithmeticHook>(x: &FxpTensor, w: &FxpTensor, dp: &DatapathSpec, layer: u32, hook: &H) -> (FxpTensor, u64) {
    let fmt = x.format();
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    let xs = x.data();
    let mut out = Vec::with_capacity(out_f);
    let mut saturated = 0;
    for j in 0..out_f {
        let row = &w.data()[j * in_f..(j + 1) * in_f];
        let base = (j * in_f) as u64;
        let mut acc = 0i64;
        for i in 0..in_f {
            let local = base + i as u64;
            let p = wrap_to(xs[i] as i64 * row[i] as i64, dp.mul_out_bits);
            let p = wrap_to(hook.apply(OpSite::new(layer, OpKind::Mul, Stage::Dot, local), p, dp.mul_out_bits), dp.mul_out_bits);
            if i == 0 {
                acc = wrap_to(p, dp.acc_bits);
            } else {
                let s = crate::fxp::fxp_add(acc, p, dp);
                acc = wrap_to(hook.apply(OpSite::new(layer, OpKind::Add, Stage::Dot, local), s, dp.acc_bits), dp.acc_bits);
            }
        }
        let (q, sat) = requantize_checked(acc, 2 * fmt.frac_bits, fmt);
        saturated += sat as u64;
        out.push(q);
    }
    (FxpTensor::from_parts(vec![out_f], out, fmt), saturated)
}

fn maxpool2(x: &FxpTensor) -> FxpTensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| d[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    FxpTensor::from_parts(vec![c, oh, ow], out, x.format())
}

fn run_layer<H: ArithmeticHook>(model: &Model, li: u32, x: FxpTensor, hook: &H) -> Result<(FxpTensor, u64)> {
    let layer = &model.layers[li as usize];
    match layer {
        LayerSpec::Conv { spec, engine } => {
            let w = model.weights[li as usize].as_ref().expect("validated");
            let q = conv::conv(*engine, &x, w, spec, &model.datapath, li, hook)?;
            Ok((q.tensor, q.saturated))
        }
        LayerSpec::Fc { in_features, .. } => {
            if x.shape() != [*in_features] {
                return Err(Error::ShapeMismatch(format!("fc expects [{in_features}], got {:?}", x.shape())));
            }
            let w = model.weights[li as usize].as_ref().expect("validated");
            Ok(fc(&x, w, &model.datapath, li, hook))
        }
        LayerSpec::Relu => {
            let mut x = x;
            for v in x.data_mut() {
                *v = (*v).max(0);
            }
            Ok((x, 0))
        }
        LayerSpec::Maxpool2 => Ok((maxpool2(&x), 0)),
        LayerSpec::Flatten => {
            let n = x.len();
            Ok((x.reshape(vec![n])?, 0))
        }
    }
}

fn forward<H: ArithmeticHook>(
    model: &Model,
    input: &FxpTensor,
    cfg: &FaultConfig,
    hook: &H,
    trace: bool,
) -> Result<(FxpTensor, u64, u64, Vec<FxpTensor>)> {
    if input.shape() != model.input_shape.as_slice() || input.format() != model.format {
        return Err(Error::ShapeMismatch(format!(
            "input {:?}, model expects {:?}",
            input.shape(),
            model.input_shape
        )));
    }
    let mut x = input.clone();
    let mut saturated = 0;
    let mut neuron_flips = 0;
    let mut outputs = Vec::new();
    for li in 0..model.layers.len() {
        let (mut y, sat) = run_layer(model, li as u32, x, hook)?;
        saturated += sat;
        if cfg.mode == FaultMode::NeuronLevel && model.layers[li].is_weighted() {
            neuron_flips += inject_neurons(&mut y, li as u32, cfg);
        }
        if trace {
            outputs.push(y.clone());
        }
        x = y;
    }
    Ok((x, saturated, neuron_flips, outputs))
}

/// Fault-free forward pass with a caller-supplied hook; returns the logits.
pub fn forward_with_hook<H: ArithmeticHook>(model: &Model, input: &FxpTensor, hook: &H) -> Result<FxpTensor> {
    Ok(forward(model, input, &FaultConfig::none(), hook, false)?.0)
}

fn infer_impl(model: &Model, input: &FxpTensor, cfg: &FaultConfig, trace: bool) -> Result<Inference> {
    let faulty_ops = cfg.mode == FaultMode::OpLevel && cfg.ber > 0.0;
    let (logits, saturated, neuron_flips, trace, mut stats) = if faulty_ops {
        let hook = FaultHook::new(cfg, model.layers.len());
        let (l, s, n, t) = forward(model, input, cfg, &hook, trace)?;
        (l, s, n, t, hook.stats())
    } else {
        let (l, s, n, t) = forward(model, input, cfg, &IdentityHook, trace)?;
        let ops = model.op_counts().total();
        let stats = InjectionStats {
            ops,
            ..Default::default()
        };
        (l, s, n, t, stats)
    };
    stats.saturations += saturated;
    stats.flips += neuron_flips;
    Ok(Inference {
        logits: logits.into_data(),
        stats,
        trace,
    })
}

/// Forward pass with each conv dispatched to its engine and every primitive
/// op hooked according to `cfg`.
pub fn infer(model: &Model, input: &FxpTensor, cfg: &FaultConfig) -> Result<Inference> {
    infer_impl(model, input, cfg, false)
}

/// Like [`infer`] but keeps every layer output.
pub fn infer_traced(model: &Model, input: &FxpTensor, cfg: &FaultConfig) -> Result<Inference> {
    infer_impl(model, input, cfg, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub accuracy: f64,
    pub correct: u64,
    pub total: u64,
    pub trials: u64,
    pub ci: Interval,
    /// Correct predictions per trial.
    pub per_trial_correct: Vec<u64>,
    /// First trial id of each trial; sample `i` of trial `t` uses
    /// `trial_ids[t] + i`.
    pub trial_ids: Vec<u64>,
    pub stats: InjectionStats,
}

/// Trial id of (trial, sample); shared by every configuration so paired
/// comparisons see the same streams.
pub fn trial_id(trial: u64, sample: u64, samples: u64) -> u64 {
    trial * samples + sample
}

/// Top-1 accuracy over `trials` passes of the dataset, a fresh trial id per
/// (sample, trial), Wilson 95% interval attached.
pub fn evaluate_accuracy(model: &Model, dataset: &Dataset, template: &FaultConfig, trials: u64) -> Result<AccuracyResult> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let n = dataset.len() as u64;
    let faultless = template.mode == FaultMode::None || template.ber <= 0.0;
    // Fault-free trials are identical, evaluate once and replicate.
    let eval_trials = if faultless { 1 } else { trials };
    let cells: Vec<(u64, u64)> = (0..eval_trials).flat_map(|t| (0..n).map(move |i| (t, i))).collect();
    let results = cells
        .par_iter()
        .map(|&(t, i)| {
            let cfg = FaultConfig {
                trial_id: trial_id(t, i, n),
                ..template.clone()
            };
            let r = infer(model, &dataset.inputs[i as usize], &cfg)?;
            Ok((t, (argmax(&r.logits) as u32 == dataset.labels[i as usize]) as u64, r.stats))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_trial = vec![0u64; eval_trials as usize];
    let mut stats = InjectionStats::default();
    for (t, ok, s) in &results {
        per_trial[*t as usize] += ok;
        stats.merge(s);
    }
    if faultless {
        per_trial = vec![per_trial[0]; trials as usize];
        let one = stats;
        for _ in 1..trials {
            stats.merge(&one);
        }
    }
    let correct: u64 = per_trial.iter().sum();
    let total = n * trials;
    Ok(AccuracyResult {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        trials,
        ci: wilson(correct, total, Z95),
        per_trial_correct: per_trial,
        trial_ids: (0..trials).map(|t| trial_id(t, 0, n)).collect(),
        stats,
    })
}
