//! Operation-level and neuron-level bit-flip injection.
//!
//! Every random decision is drawn from a stream keyed by
//! `(seed, trial, layer, kind, site, replica)`, so the corrupted value of a
//! site is a pure function of the configuration and never of the order in
//! which sites execute.

use std::cell::Cell;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::conv::{ArithmeticHook, OpKind, OpSite, Stage};
use crate::fxp::{wrap_to, FxpTensor};
use crate::rng::{absorb, derive_key, unit_f64, RngStream};

const TAG_OP: u64 = 0x6f70;
const TAG_NEURON: u64 = 0x6e65_7572;
const TAG_PROTECT: u64 = 0x7072_6f74;

/// Geometric skipping is used while the expected number of flips per word
/// stays at or below this value; denser regimes draw one Bernoulli per bit.
pub const GEOMETRIC_MAX_EXPECTED_FLIPS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultMode {
    None,
    OpLevel,
    NeuronLevel,
}

impl FaultMode {
    pub fn name(self) -> &'static str {
        match self {
            FaultMode::None => "NONE",
            FaultMode::OpLevel => "OP_LEVEL",
            FaultMode::NeuronLevel => "NEURON_LEVEL",
        }
    }
}

/// Fraction of one (layer, kind) that runs under TMR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Protection {
    pub layer: u32,
    pub kind: OpKind,
    pub fraction: f64,
    pub selection_seed: u64,
}

/// Stateless pseudo-random protected subsets: a site is protected iff
/// `hash(selection_seed, layer, kind, site) < fraction`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtectionSet {
    entries: Vec<Protection>,
}

impl ProtectionSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces any previous entry for (layer, kind). Fractions are clamped to [0, 1].
    pub fn set(&mut self, layer: u32, kind: OpKind, fraction: f64, selection_seed: u64) {
        let fraction = fraction.clamp(0.0, 1.0);
        self.entries.retain(|p| !(p.layer == layer && p.kind == kind));
        if fraction > 0.0 {
            self.entries.push(Protection {
                layer,
                kind,
                fraction,
                selection_seed,
            });
            self.entries.sort_by_key(|p| (p.layer, p.kind));
        }
    }

    pub fn fraction(&self, layer: u32, kind: OpKind) -> f64 {
        self.get(layer, kind).map_or(0.0, |p| p.fraction)
    }

    pub fn get(&self, layer: u32, kind: OpKind) -> Option<&Protection> {
        self.entries.iter().find(|p| p.layer == layer && p.kind == kind)
    }

    pub fn entries(&self) -> &[Protection] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_protected(&self, site: OpSite) -> bool {
        match self.get(site.layer, site.kind) {
            Some(p) => selection_draw(selection_key(p), site.index) < p.fraction,
            None => false,
        }
    }
}

fn selection_key(p: &Protection) -> u64 {
    derive_key(&[TAG_PROTECT, p.selection_seed, p.layer as u64, p.kind as u64])
}

#[inline(always)]
fn selection_draw(key: u64, index: u64) -> f64 {
    unit_f64(absorb(key, index))
}

/// Everything that determines one fault universe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultConfig {
    pub mode: FaultMode,
    pub ber: f64,
    pub seed: u64,
    pub trial_id: u64,
    /// `None` means every layer.
    pub layer_scope: Option<BTreeSet<u32>>,
    /// Indexed by [`OpKind::index`].
    pub op_kind_scope: [bool; 2],
    /// Indexed by [`Stage`] discriminant; defaults to [`Stage::RUNTIME`].
    pub stage_scope: [bool; Stage::COUNT],
    pub excluded_layer: Option<u32>,
    pub protection: ProtectionSet,
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl FaultConfig {
    pub fn none() -> Self {
        Self {
            mode: FaultMode::None,
            ber: 0.0,
            seed: 0,
            trial_id: 0,
            layer_scope: None,
            op_kind_scope: [true; 2],
            stage_scope: Stage::RUNTIME,
            excluded_layer: None,
            protection: ProtectionSet::new(),
        }
    }

    pub fn op_level(ber: f64, seed: u64) -> Self {
        Self {
            mode: FaultMode::OpLevel,
            ber,
            seed,
            ..Self::none()
        }
    }

    pub fn neuron_level(ber: f64, seed: u64) -> Self {
        Self {
            mode: FaultMode::NeuronLevel,
            ber,
            seed,
            ..Self::none()
        }
    }

    pub fn with_trial(mut self, trial_id: u64) -> Self {
        self.trial_id = trial_id;
        self
    }

    pub fn with_kinds(mut self, kinds: &[OpKind]) -> Self {
        self.op_kind_scope = [false; 2];
        for k in kinds {
            self.op_kind_scope[k.index()] = true;
        }
        self
    }

    pub fn with_excluded_layer(mut self, layer: Option<u32>) -> Self {
        self.excluded_layer = layer;
        self
    }

    pub fn layer_in_scope(&self, layer: u32) -> bool {
        self.excluded_layer != Some(layer)
            && self.layer_scope.as_ref().is_none_or(|s| s.contains(&layer))
    }

    pub fn site_in_scope(&self, site: OpSite) -> bool {
        self.mode == FaultMode::OpLevel
            && self.op_kind_scope[site.kind.index()]
            && self.stage_scope[site.stage() as usize]
            && self.layer_in_scope(site.layer)
    }
}

/// Precomputed per-bit flip sampler for a fixed BER.
#[derive(Debug, Clone)]
pub struct FlipSampler {
    ber: f64,
    ln_keep: f64,
    /// `(1 - ber)^width` for width 0..=64.
    keep_all: [f64; 65],
}

impl FlipSampler {
    pub fn new(ber: f64) -> Self {
        let ber = if ber.is_nan() { 0.0 } else { ber.clamp(0.0, 1.0) };
        let ln_keep = (-ber).ln_1p();
        let keep_all = std::array::from_fn(|w| (w as f64 * ln_keep).exp());
        Self {
            ber,
            ln_keep,
            keep_all,
        }
    }

    pub fn ber(&self) -> f64 {
        self.ber
    }

    /// Probability that a `width`-bit word comes through untouched.
    pub fn keep_probability(&self, width: u32) -> f64 {
        self.keep_all[width as usize]
    }

    pub fn uses_geometric(&self, width: u32) -> bool {
        self.ber * width as f64 <= GEOMETRIC_MAX_EXPECTED_FLIPS
    }

    /// XOR mask over the low `width` bits, each set independently with
    /// probability `ber`.
    #[inline]
    pub fn sample_mask(&self, width: u32, rng: &mut RngStream) -> u64 {
        debug_assert!(width <= 64);
        if self.ber <= 0.0 || width == 0 {
            return 0;
        }
        if self.ber >= 1.0 {
            return low_mask(width);
        }
        if self.uses_geometric(width) {
            self.sample_geometric(width, rng)
        } else {
            self.sample_naive(width, rng)
        }
    }

    /// Gaps between flipped bits are geometric: `floor(ln u / ln(1 - ber))`.
    #[inline]
    pub fn sample_geometric(&self, width: u32, rng: &mut RngStream) -> u64 {
        if self.ber <= 0.0 {
            return 0;
        }
        if self.ber >= 1.0 {
            return low_mask(width);
        }
        let u = rng.next_open_f64();
        if u <= self.keep_all[width as usize] {
            return 0;
        }
        let mut mask = 0u64;
        let mut pos = (u.ln() / self.ln_keep) as u64;
        while pos < width as u64 {
            mask |= 1 << pos;
            let gap = (rng.next_open_f64().ln() / self.ln_keep) as u64;
            pos = pos.saturating_add(gap).saturating_add(1);
        }
        mask
    }

    pub fn sample_naive(&self, width: u32, rng: &mut RngStream) -> u64 {
        let mut mask = 0u64;
        for b in 0..width {
            if rng.next_f64() < self.ber {
                mask |= 1 << b;
            }
        }
        mask
    }
}

#[inline(always)]
fn low_mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

/// Flips each of the low `width` bits of `value` with probability `ber`;
/// the result is sign-extended at `width`.
pub fn flip_bits(value: i64, width: u32, ber: f64, rng: &mut RngStream) -> i64 {
    flip_with(value, width, &FlipSampler::new(ber), rng)
}

#[inline(always)]
pub fn flip_with(value: i64, width: u32, sampler: &FlipSampler, rng: &mut RngStream) -> i64 {
    let mask = sampler.sample_mask(width, rng);
    if mask == 0 {
        value
    } else {
        wrap_to(value ^ mask as i64, width)
    }
}

/// Bitwise majority of three replicas.
#[inline(always)]
pub fn tmr_vote(a: i64, b: i64, c: i64) -> i64 {
    (a & b) | (a & c) | (b & c)
}

/// Counters gathered while a [`FaultHook`] runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionStats {
    /// Every op routed through the hook.
    pub ops: u64,
    /// Ops inside the fault scope.
    pub ops_in_scope: u64,
    /// Bits flipped, summed over all replicas.
    pub flips: u64,
    /// Op results that left the hook different from how they entered.
    pub corrupted: u64,
    /// Ops executed under TMR.
    pub protected: u64,
    /// Requantization results clipped to the word range.
    pub saturations: u64,
}

impl InjectionStats {
    pub fn merge(&mut self, other: &InjectionStats) {
        self.ops += other.ops;
        self.ops_in_scope += other.ops_in_scope;
        self.flips += other.flips;
        self.corrupted += other.corrupted;
        self.protected += other.protected;
        self.saturations += other.saturations;
    }
}

#[derive(Debug, Clone, Copy)]
struct KindState {
    active: bool,
    key: u64,
    protect_fraction: f64,
    protect_key: u64,
}

/// The operation-level injector as an [`ArithmeticHook`]. One hook serves one
/// inference (one trial); it is cheap to build.
pub struct FaultHook<'a> {
    cfg: &'a FaultConfig,
    sampler: FlipSampler,
    layers: Vec<[KindState; 2]>,
    stats: Cell<InjectionStats>,
}

impl<'a> FaultHook<'a> {
    pub fn new(cfg: &'a FaultConfig, num_layers: usize) -> Self {
        let trial_key = derive_key(&[TAG_OP, cfg.seed, cfg.trial_id]);
        let enabled = cfg.mode == FaultMode::OpLevel && cfg.ber > 0.0;
        let layers = (0..num_layers as u32)
            .map(|layer| {
                std::array::from_fn(|k| {
                    let kind = OpKind::ALL[k];
                    let prot = cfg.protection.get(layer, kind);
                    KindState {
                        active: enabled && cfg.op_kind_scope[k] && cfg.layer_in_scope(layer),
                        key: absorb(absorb(trial_key, layer as u64), k as u64),
                        protect_fraction: prot.map_or(0.0, |p| p.fraction),
                        protect_key: prot.map_or(0, selection_key),
                    }
                })
            })
            .collect();
        Self {
            cfg,
            sampler: FlipSampler::new(cfg.ber),
            layers,
            stats: Cell::new(InjectionStats::default()),
        }
    }

    pub fn stats(&self) -> InjectionStats {
        self.stats.get()
    }

    pub fn config(&self) -> &FaultConfig {
        self.cfg
    }

    #[inline(always)]
    fn update(&self, f: impl FnOnce(&mut InjectionStats)) {
        let mut s = self.stats.get();
        f(&mut s);
        self.stats.set(s);
    }

    /// Corrupts one op result by XOR on its low `width` bits; the caller
    /// re-wraps to its register.
    #[inline]
    pub fn inject_op(&self, site: OpSite, value: i64, width: u32) -> i64 {
        let state = match self.layers.get(site.layer as usize) {
            Some(l) => l[site.kind.index()],
            None => return value,
        };
        if !state.active || !self.cfg.stage_scope[site.stage() as usize] {
            self.update(|s| s.ops += 1);
            return value;
        }
        let site_key = absorb(state.key, site.index);
        let protected = state.protect_fraction >= 1.0
            || (state.protect_fraction > 0.0
                && selection_draw(state.protect_key, site.index) < state.protect_fraction);
        if !protected {
            let mut rng = RngStream::from_key(absorb(site_key, 0));
            let mask = self.sampler.sample_mask(width, &mut rng);
            let out = value ^ mask as i64;
            self.update(|s| {
                s.ops += 1;
                s.ops_in_scope += 1;
                s.flips += mask.count_ones() as u64;
                s.corrupted += (out != value) as u64;
            });
            return out;
        }
        let mut flips = 0;
        let mut replica = |r: u64| {
            let mut rng = RngStream::from_key(absorb(site_key, r));
            let mask = self.sampler.sample_mask(width, &mut rng);
            flips += mask.count_ones() as u64;
            value ^ mask as i64
        };
        let (a, b, c) = (replica(0), replica(1), replica(2));
        let out = tmr_vote(a, b, c);
        self.update(|s| {
            s.ops += 1;
            s.ops_in_scope += 1;
            s.protected += 1;
            s.flips += flips;
            s.corrupted += (out != value) as u64;
        });
        out
    }
}

impl ArithmeticHook for FaultHook<'_> {
    #[inline(always)]
    fn apply(&self, site: OpSite, value: i64, width: u32) -> i64 {
        self.inject_op(site, value, width)
    }
}

/// Neuron-level injection: every activation word of a finished layer output
/// is flipped per bit at `ber`, keyed by (layer, flat index). Returns the
/// number of flipped bits.
pub fn inject_neurons(t: &mut FxpTensor, layer: u32, cfg: &FaultConfig) -> u64 {
    if cfg.mode != FaultMode::NeuronLevel || cfg.ber <= 0.0 || !cfg.layer_in_scope(layer) {
        return 0;
    }
    let width = t.format().word_bits;
    let sampler = FlipSampler::new(cfg.ber);
    let key = derive_key(&[TAG_NEURON, cfg.seed, cfg.trial_id, layer as u64]);
    let mut flips = 0;
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let mut rng = RngStream::from_key(absorb(key, i as u64));
        let mask = sampler.sample_mask(width, &mut rng);
        if mask != 0 {
            flips += mask.count_ones() as u64;
            *v = wrap_to(*v as i64 ^ mask as i64, width) as i32;
        }
    }
    flips
}
