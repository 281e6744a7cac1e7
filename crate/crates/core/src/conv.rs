//! Direct and Winograd F(2x2, 3x3) convolution over fixed-point tensors.
//!
//! Every primitive multiply and add is passed through an [`ArithmeticHook`]
//! together with an [`OpSite`] whose index is derived from loop coordinates,
//! never from execution order. The two engines agree bit-exactly under the
//! identity hook: the filter transform is carried two fraction bits wider so
//! `G g G^T` is exact, and the Winograd accumulator is two bits wider than the
//! direct one, so `Y = 4 * acc (mod 2^(acc_bits + 2))` and requantization
//! lands on the same word.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fxp::{requantize_checked, wrap_to, DatapathSpec, FxpFormat, FxpTensor, Quantized};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OpKind {
    Mul,
    Add,
}

impl OpKind {
    pub const ALL: [OpKind; 2] = [OpKind::Mul, OpKind::Add];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Mul => "MUL",
            OpKind::Add => "ADD",
        }
    }
}

/// Pipeline stage an op belongs to. `Dot` covers the multiply-accumulate of
/// direct convolution and fully connected layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Dot = 0,
    FilterTransform = 1,
    InputTransform = 2,
    ElementWise = 3,
    OutputTransform = 4,
}

impl Stage {
    pub const COUNT: usize = 5;
    pub const ALL: [Stage; 5] = [
        Stage::Dot,
        Stage::FilterTransform,
        Stage::InputTransform,
        Stage::ElementWise,
        Stage::OutputTransform,
    ];

    /// Stages executed per inference. The filter transform depends on the
    /// weights only and is precomputed once per model.
    pub const RUNTIME: [bool; 5] = [true, false, true, true, true];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Dot => "dot",
            Stage::FilterTransform => "filter_transform",
            Stage::InputTransform => "input_transform",
            Stage::ElementWise => "element_wise",
            Stage::OutputTransform => "output_transform",
        }
    }

    fn from_bits(b: u64) -> Stage {
        match b {
            0 => Stage::Dot,
            1 => Stage::FilterTransform,
            2 => Stage::InputTransform,
            3 => Stage::ElementWise,
            _ => Stage::OutputTransform,
        }
    }
}

const STAGE_SHIFT: u32 = 56;

/// Identity of one primitive op inside one inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OpSite {
    pub layer: u32,
    pub kind: OpKind,
    /// Stage in the top byte, coordinate-derived ordinal below.
    pub index: u64,
}

impl OpSite {
    #[inline(always)]
    pub fn new(layer: u32, kind: OpKind, stage: Stage, local: u64) -> Self {
        debug_assert!(local < 1 << STAGE_SHIFT);
        Self {
            layer,
            kind,
            index: ((stage as u64) << STAGE_SHIFT) | local,
        }
    }

    #[inline(always)]
    pub fn stage(&self) -> Stage {
        Stage::from_bits(self.index >> STAGE_SHIFT)
    }

    #[inline(always)]
    pub fn local(&self) -> u64 {
        self.index & ((1 << STAGE_SHIFT) - 1)
    }
}

/// Transformation applied to every primitive op result. `value` arrives
/// sign-extended at the register width of the op; `width` is the number of
/// low bits a fault may touch (the datapath width of the op kind). Callers
/// re-wrap the result to their register. Implementations must be pure in
/// (site, value) so results do not depend on scheduling; interior counters
/// are allowed.
pub trait ArithmeticHook {
    fn apply(&self, site: OpSite, value: i64, width: u32) -> i64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHook;

impl ArithmeticHook for IdentityHook {
    #[inline(always)]
    fn apply(&self, _site: OpSite, value: i64, _width: u32) -> i64 {
        value
    }
}

impl<H: ArithmeticHook + ?Sized> ArithmeticHook for &H {
    #[inline(always)]
    fn apply(&self, site: OpSite, value: i64, width: u32) -> i64 {
        (**self).apply(site, value, width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Engine {
    Direct,
    Winograd,
}

impl Engine {
    pub const ALL: [Engine; 2] = [Engine::Direct, Engine::Winograd];

    pub fn name(self) -> &'static str {
        match self {
            Engine::Direct => "DIRECT",
            Engine::Winograd => "WINOGRAD",
        }
    }
}

/// Geometry of one convolution layer. Weights are `[out, in, kh, kw]`,
/// activations `[channels, h, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvSpec {
    pub fn new3x3(in_channels: usize, out_channels: usize, in_h: usize, in_w: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding,
            in_h,
            in_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 {
            return Err(Error::ShapeMismatch(format!("degenerate conv spec {self:?}")));
        }
        if self.kernel_h == 0
            || self.kernel_w == 0
            || self.in_h + 2 * self.padding < self.kernel_h
            || self.in_w + 2 * self.padding < self.kernel_w
        {
            return Err(Error::ShapeMismatch(format!(
                "kernel does not fit padded input in {self:?}"
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.in_channels, self.in_h, self.in_w]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.out_h(), self.out_w()]
    }

    pub fn winograd_eligible(&self) -> bool {
        self.kernel_h == 3 && self.kernel_w == 3 && self.stride == 1
    }

    pub fn tiles(&self) -> (usize, usize) {
        (self.out_h().div_ceil(2), self.out_w().div_ceil(2))
    }

    fn check_tensors(&self, input: &FxpTensor, weights: &FxpTensor) -> Result<()> {
        self.validate()?;
        if input.shape() != self.input_shape().as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "input shape {:?}, spec expects {:?}",
                input.shape(),
                self.input_shape()
            )));
        }
        if weights.shape() != self.weight_shape().as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "weight shape {:?}, spec expects {:?}",
                weights.shape(),
                self.weight_shape()
            )));
        }
        if input.format() != weights.format() {
            return Err(Error::InvalidFormat(format!(
                "input format {:?} differs from weight format {:?}",
                input.format(),
                weights.format()
            )));
        }
        Ok(())
    }
}

/// Per-stage MUL/ADD site counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpCounts {
    pub mul: [u64; Stage::COUNT],
    pub add: [u64; Stage::COUNT],
}

impl OpCounts {
    pub fn total_mul(&self) -> u64 {
        self.mul.iter().sum()
    }

    pub fn total_add(&self) -> u64 {
        self.add.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.total_mul() + self.total_add()
    }

    pub fn get(&self, kind: OpKind, stage: Stage) -> u64 {
        match kind {
            OpKind::Mul => self.mul[stage as usize],
            OpKind::Add => self.add[stage as usize],
        }
    }

    pub fn kind_total(&self, kind: OpKind) -> u64 {
        match kind {
            OpKind::Mul => self.total_mul(),
            OpKind::Add => self.total_add(),
        }
    }

    /// Multiplications of the product stage (element-wise for Winograd,
    /// the dot product for direct convolution).
    pub fn product_mul(&self) -> u64 {
        self.mul[Stage::Dot as usize] + self.mul[Stage::ElementWise as usize]
    }

    /// Counts restricted to the stages flagged in `scope`.
    pub fn masked(&self, scope: &[bool; Stage::COUNT]) -> OpCounts {
        let mut c = *self;
        for s in 0..Stage::COUNT {
            if !scope[s] {
                c.mul[s] = 0;
                c.add[s] = 0;
            }
        }
        c
    }

    pub fn add_assign(&mut self, other: &OpCounts) {
        for s in 0..Stage::COUNT {
            self.mul[s] += other.mul[s];
            self.add[s] += other.add[s];
        }
    }
}

/// Sites each engine emits for one layer.
pub fn count_ops(spec: &ConvSpec, engine: Engine) -> Result<OpCounts> {
    spec.validate()?;
    let mut c = OpCounts::default();
    let (f, ch) = (spec.out_channels as u64, spec.in_channels as u64);
    match engine {
        Engine::Direct => {
            let outputs = f * (spec.out_h() * spec.out_w()) as u64;
            let taps = ch * (spec.kernel_h * spec.kernel_w) as u64;
            c.mul[Stage::Dot as usize] = outputs * taps;
            c.add[Stage::Dot as usize] = outputs * (taps - 1);
        }
        Engine::Winograd => {
            if !spec.winograd_eligible() {
                return Err(Error::IneligibleSpec(format!("{spec:?}")));
            }
            let (ty, tx) = spec.tiles();
            let tiles = (ty * tx) as u64;
            c.mul[Stage::FilterTransform as usize] = f * ch * FILTER_MULS;
            c.add[Stage::FilterTransform as usize] = f * ch * FILTER_ADDS;
            c.add[Stage::InputTransform as usize] = ch * tiles * INPUT_ADDS;
            c.mul[Stage::ElementWise as usize] = f * tiles * ch * 16;
            c.add[Stage::ElementWise as usize] = f * tiles * (ch - 1) * 16;
            c.add[Stage::OutputTransform as usize] = f * tiles * OUTPUT_ADDS;
        }
    }
    Ok(c)
}

/// Multiply-accumulate convolution for any kernel/stride. Accumulation order
/// is channel-major, then row-major taps; the first product loads the
/// accumulator and every later one costs an ADD.
pub fn direct_conv<H: ArithmeticHook>(
    input: &FxpTensor,
    weights: &FxpTensor,
    spec: &ConvSpec,
    dp: &DatapathSpec,
    layer: u32,
    hook: &H,
) -> Result<Quantized> {
    spec.check_tensors(input, weights)?;
    let fmt = input.format();
    let (oh, ow) = (spec.out_h(), spec.out_w());
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (ih, iw) = (spec.in_h as isize, spec.in_w as isize);
    let taps = spec.in_channels * kh * kw;
    let x = input.data();
    let w = weights.data();
    let in_frac = 2 * fmt.frac_bits;
    let mut out = vec![0i32; spec.out_channels * oh * ow];
    let mut saturated = 0u64;

    for f in 0..spec.out_channels {
        let wf = &w[f * taps..(f + 1) * taps];
        for oy in 0..oh {
            for ox in 0..ow {
                let out_idx = (f * oh + oy) * ow + ox;
                let base = out_idx as u64 * taps as u64;
                let mut acc = 0i64;
                let mut tap = 0usize;
                for c in 0..spec.in_channels {
                    let xc = &x[c * spec.in_h * spec.in_w..(c + 1) * spec.in_h * spec.in_w];
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            let xv = if iy >= 0 && iy < ih && ix >= 0 && ix < iw {
                                xc[iy as usize * spec.in_w + ix as usize]
                            } else {
                                0
                            };
                            let local = base + tap as u64;
                            let p = wrap_to(xv as i64 * wf[tap] as i64, dp.mul_out_bits);
                            let p = wrap_to(
                                hook.apply(OpSite::new(layer, OpKind::Mul, Stage::Dot, local), p, dp.mul_out_bits),
                                dp.mul_out_bits,
                            );
                            if tap == 0 {
                                acc = wrap_to(p, dp.acc_bits);
                            } else {
                                let s = accumulate(acc, p, dp.acc_bits, dp.wrap_on_overflow);
                                acc = wrap_to(
                                    hook.apply(OpSite::new(layer, OpKind::Add, Stage::Dot, local), s, dp.acc_bits),
                                    dp.acc_bits,
                                );
                            }
                            tap += 1;
                        }
                    }
                }
                let (q, sat) = requantize_checked(acc, in_frac, fmt);
                saturated += sat as u64;
                out[out_idx] = q;
            }
        }
    }
    Ok(Quantized {
        tensor: FxpTensor::from_parts(spec.output_shape(), out, fmt),
        saturated,
    })
}

#[inline(always)]
fn accumulate(a: i64, b: i64, bits: u32, wrap: bool) -> i64 {
    let s = a + b;
    if wrap {
        wrap_to(s, bits)
    } else {
        let hi = (1i64 << (bits - 1)) - 1;
        s.clamp(-hi - 1, hi)
    }
}

const FILTER_MULS: u64 = 14;
const FILTER_ADDS: u64 = 21;
const FILTER_OPS: u64 = 35;
const INPUT_ADDS: u64 = 32;
const OUTPUT_ADDS: u64 = 24;

/// Fixed constants of F(2x2, 3x3), plus the register widths of each stage.
///
/// `G = [[1,0,0],[1/2,1/2,1/2],[1/2,-1/2,1/2],[0,0,1]]`,
/// `B^T = [[1,0,-1,0],[0,1,1,0],[0,-1,1,0],[0,1,0,-1]]`,
/// `A^T = [[1,1,1,0],[0,1,-1,-1]]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WinogradTransform {
    /// Extra fraction bits carried by `U = G g G^T`.
    pub g_frac_extra: u32,
    /// Filter-transform registers.
    pub filter_bits: u32,
    /// First (row) and second (column) input-transform registers.
    pub input_row_bits: u32,
    pub input_bits: u32,
    /// Element-wise product register.
    pub product_bits: u32,
    /// Channel accumulator and output-transform registers.
    pub acc_bits: u32,
    /// Fault-exposed low bits of MUL and ADD results; registers wider than
    /// the datapath carry their extra high bits fault-free.
    pub mul_fault_bits: u32,
    pub add_fault_bits: u32,
    pub wrap_on_overflow: bool,
}

impl WinogradTransform {
    pub const M: usize = 2;
    pub const R: usize = 3;
    pub const T: usize = 4;

    pub const G: [[f64; 3]; 4] = [
        [1.0, 0.0, 0.0],
        [0.5, 0.5, 0.5],
        [0.5, -0.5, 0.5],
        [0.0, 0.0, 1.0],
    ];
    pub const BT: [[i64; 4]; 4] = [[1, 0, -1, 0], [0, 1, 1, 0], [0, -1, 1, 0], [0, 1, 0, -1]];
    pub const AT: [[i64; 4]; 2] = [[1, 1, 1, 0], [0, 1, -1, -1]];

    /// Registers sized to the fault-free range of each stage: `|V| <= 4 max|d|`
    /// needs W+2 bits, `|U| <= 9/4 max|g|` at two extra fraction bits needs
    /// W+4, their product W+W+6.
    pub fn new(format: FxpFormat, dp: &DatapathSpec) -> Self {
        let w = format.word_bits;
        let acc_bits = dp.acc_bits + 2;
        Self {
            g_frac_extra: 2,
            filter_bits: w + 4,
            input_row_bits: w + 1,
            input_bits: w + 2,
            product_bits: (dp.mul_out_bits + 6).min(acc_bits),
            acc_bits,
            mul_fault_bits: dp.mul_out_bits,
            add_fault_bits: dp.acc_bits,
            wrap_on_overflow: dp.wrap_on_overflow,
        }
    }

    #[inline(always)]
    pub fn fault_bits(&self, kind: OpKind, register_bits: u32) -> u32 {
        match kind {
            OpKind::Mul => self.mul_fault_bits,
            OpKind::Add => self.add_fault_bits,
        }
        .min(register_bits)
    }
}

#[inline(always)]
fn hooked<H: ArithmeticHook>(
    hook: &H,
    wt: &WinogradTransform,
    layer: u32,
    kind: OpKind,
    stage: Stage,
    local: u64,
    value: i64,
    bits: u32,
) -> i64 {
    let site = OpSite::new(layer, kind, stage, local);
    wrap_to(hook.apply(site, wrap_to(value, bits), wt.fault_bits(kind, bits)), bits)
}

/// `U = G g G^T` at `frac_bits + 2`. Row/column sums are ADD sites, the
/// halvings of rows 1 and 2 of `G` are MUL sites; copies are free.
/// `base` is the first local ordinal of this (filter, channel) pair.
pub fn winograd_filter_transform<H: ArithmeticHook>(
    g: &[i32; 9],
    wt: &WinogradTransform,
    layer: u32,
    base: u64,
    hook: &H,
) -> [i64; 16] {
    let bits = wt.filter_bits;
    let add = |ord: u64, v: i64| hooked(hook, wt, layer, OpKind::Add, Stage::FilterTransform, base + ord, v, bits);
    let half = |ord: u64, v: i64| hooked(hook, wt, layer, OpKind::Mul, Stage::FilterTransform, base + ord, v >> 1, bits);

    let ge: [i64; 9] = std::array::from_fn(|i| (g[i] as i64) << wt.g_frac_extra);
    // t = G g, 4x3
    let mut t = [[0i64; 3]; 4];
    for j in 0..3 {
        let ord = j as u64 * 5;
        let (g0, g1, g2) = (ge[j], ge[3 + j], ge[6 + j]);
        let s = add(ord, g0 + g2);
        let r1 = add(ord + 1, s + g1);
        let r2 = add(ord + 2, s - g1);
        t[0][j] = g0;
        t[1][j] = half(ord + 3, r1);
        t[2][j] = half(ord + 4, r2);
        t[3][j] = g2;
    }
    // U = t G^T, 4x4
    let mut u = [0i64; 16];
    for (i, row) in t.iter().enumerate() {
        let ord = 15 + i as u64 * 5;
        let s = add(ord, row[0] + row[2]);
        let r1 = add(ord + 1, s + row[1]);
        let r2 = add(ord + 2, s - row[1]);
        u[i * 4] = row[0];
        u[i * 4 + 1] = half(ord + 3, r1);
        u[i * 4 + 2] = half(ord + 4, r2);
        u[i * 4 + 3] = row[2];
    }
    u
}

/// `V = B^T d B`; 32 ADD sites, exact at the input precision.
pub fn winograd_input_transform<H: ArithmeticHook>(
    d: &[i64; 16],
    wt: &WinogradTransform,
    layer: u32,
    base: u64,
    hook: &H,
) -> [i64; 16] {
    let mut t = [0i64; 16];
    let rb = wt.input_row_bits;
    for j in 0..4 {
        let ord = base + j as u64 * 4;
        let (d0, d1, d2, d3) = (d[j], d[4 + j], d[8 + j], d[12 + j]);
        let add = |o: u64, v: i64| hooked(hook, wt, layer, OpKind::Add, Stage::InputTransform, ord + o, v, rb);
        t[j] = add(0, d0 - d2);
        t[4 + j] = add(1, d1 + d2);
        t[8 + j] = add(2, d2 - d1);
        t[12 + j] = add(3, d1 - d3);
    }
    let mut v = [0i64; 16];
    let vb = wt.input_bits;
    for i in 0..4 {
        let ord = base + 16 + i as u64 * 4;
        let (t0, t1, t2, t3) = (t[i * 4], t[i * 4 + 1], t[i * 4 + 2], t[i * 4 + 3]);
        let add = |o: u64, v: i64| hooked(hook, wt, layer, OpKind::Add, Stage::InputTransform, ord + o, v, vb);
        v[i * 4] = add(0, t0 - t2);
        v[i * 4 + 1] = add(1, t1 + t2);
        v[i * 4 + 2] = add(2, t2 - t1);
        v[i * 4 + 3] = add(3, t1 - t3);
    }
    v
}

/// Accumulates `U ⊙ V` for one channel into `m`. Channel 0 loads `m`, later
/// channels add into it. `base` is `((k * tiles + b) * C + c) * 16`.
#[inline]
pub fn winograd_elementwise_accumulate<H: ArithmeticHook>(
    m: &mut [i64; 16],
    u: &[i64; 16],
    v: &[i64; 16],
    first: bool,
    wt: &WinogradTransform,
    layer: u32,
    base: u64,
    hook: &H,
) {
    for e in 0..16 {
        let local = base + e as u64;
        let p = hooked(hook, wt, layer, OpKind::Mul, Stage::ElementWise, local, u[e] * v[e], wt.product_bits);
        if first {
            m[e] = wrap_to(p, wt.acc_bits);
        } else {
            let s = accumulate(m[e], p, wt.acc_bits, wt.wrap_on_overflow);
            m[e] = hooked(hook, wt, layer, OpKind::Add, Stage::ElementWise, local, s, wt.acc_bits);
        }
    }
}

/// `Y = A^T M A`; 24 ADD sites.
pub fn winograd_output_transform<H: ArithmeticHook>(
    m: &[i64; 16],
    wt: &WinogradTransform,
    layer: u32,
    base: u64,
    hook: &H,
) -> [i64; 4] {
    let bits = wt.acc_bits;
    let mut t = [0i64; 8];
    for j in 0..4 {
        let ord = base + j as u64 * 4;
        let add = |o: u64, v: i64| hooked(hook, wt, layer, OpKind::Add, Stage::OutputTransform, ord + o, v, bits);
        let (m0, m1, m2, m3) = (m[j], m[4 + j], m[8 + j], m[12 + j]);
        let a = add(0, m0 + m1);
        t[j] = add(1, a + m2);
        let b = add(2, m1 - m2);
        t[4 + j] = add(3, b - m3);
    }
    let mut y = [0i64; 4];
    for i in 0..2 {
        let ord = base + 16 + i as u64 * 4;
        let add = |o: u64, v: i64| hooked(hook, wt, layer, OpKind::Add, Stage::OutputTransform, ord + o, v, bits);
        let (t0, t1, t2, t3) = (t[i * 4], t[i * 4 + 1], t[i * 4 + 2], t[i * 4 + 3]);
        let a = add(0, t0 + t1);
        y[i * 2] = add(1, a + t2);
        let b = add(2, t1 - t2);
        y[i * 2 + 1] = add(3, b - t3);
    }
    y
}

/// Winograd F(2x2, 3x3) convolution. Tiles are traversed row-major; tiles
/// that overhang the output are zero-extended and cropped.
pub fn winograd_conv<H: ArithmeticHook>(
    input: &FxpTensor,
    weights: &FxpTensor,
    spec: &ConvSpec,
    dp: &DatapathSpec,
    layer: u32,
    hook: &H,
) -> Result<Quantized> {
    spec.check_tensors(input, weights)?;
    if !spec.winograd_eligible() {
        return Err(Error::IneligibleSpec(format!(
            "kernel {}x{} stride {}",
            spec.kernel_h, spec.kernel_w, spec.stride
        )));
    }
    let fmt = input.format();
    let wt = WinogradTransform::new(fmt, dp);
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let (oh, ow) = (spec.out_h(), spec.out_w());
    let (ty, tx) = spec.tiles();
    let tiles = ty * tx;
    let w = weights.data();

    let mut us = Vec::with_capacity(cout * cin);
    for k in 0..cout {
        for c in 0..cin {
            let off = (k * cin + c) * 9;
            let g: [i32; 9] = w[off..off + 9].try_into().expect("3x3 slice");
            let base = (k * cin + c) as u64 * FILTER_OPS;
            us.push(winograd_filter_transform(&g, &wt, layer, base, hook));
        }
    }

    let x = input.data();
    let (ih, iw) = (spec.in_h as isize, spec.in_w as isize);
    let pad = spec.padding as isize;
    let mut vs = Vec::with_capacity(cin * tiles);
    for c in 0..cin {
        let xc = &x[c * spec.in_h * spec.in_w..(c + 1) * spec.in_h * spec.in_w];
        for b in 0..tiles {
            let (by, bx) = ((b / tx) as isize * 2 - pad, (b % tx) as isize * 2 - pad);
            let mut d = [0i64; 16];
            for r in 0..4 {
                let iy = by + r as isize;
                if iy < 0 || iy >= ih {
                    continue;
                }
                for s in 0..4 {
                    let ix = bx + s as isize;
                    if ix >= 0 && ix < iw {
                        d[r * 4 + s] = xc[iy as usize * spec.in_w + ix as usize] as i64;
                    }
                }
            }
            let base = (c * tiles + b) as u64 * INPUT_ADDS;
            vs.push(winograd_input_transform(&d, &wt, layer, base, hook));
        }
    }

    let in_frac = 2 * fmt.frac_bits + wt.g_frac_extra;
    let mut out = vec![0i32; cout * oh * ow];
    let mut saturated = 0u64;
    for k in 0..cout {
        for b in 0..tiles {
            let mut m = [0i64; 16];
            for c in 0..cin {
                let base = (((k * tiles + b) * cin + c) * 16) as u64;
                winograd_elementwise_accumulate(
                    &mut m,
                    &us[k * cin + c],
                    &vs[c * tiles + b],
                    c == 0,
                    &wt,
                    layer,
                    base,
                    hook,
                );
            }
            let base = (k * tiles + b) as u64 * OUTPUT_ADDS;
            let y = winograd_output_transform(&m, &wt, layer, base, hook);
            let (oy0, ox0) = ((b / tx) * 2, (b % tx) * 2);
            for dy in 0..2 {
                for dx in 0..2 {
                    let (oy, ox) = (oy0 + dy, ox0 + dx);
                    if oy < oh && ox < ow {
                        let (q, sat) = requantize_checked(y[dy * 2 + dx], in_frac, fmt);
                        saturated += sat as u64;
                        out[(k * oh + oy) * ow + ox] = q;
                    }
                }
            }
        }
    }
    Ok(Quantized {
        tensor: FxpTensor::from_parts(spec.output_shape(), out, fmt),
        saturated,
    })
}

pub fn conv<H: ArithmeticHook>(
    engine: Engine,
    input: &FxpTensor,
    weights: &FxpTensor,
    spec: &ConvSpec,
    dp: &DatapathSpec,
    layer: u32,
    hook: &H,
) -> Result<Quantized> {
    match engine {
        Engine::Direct => direct_conv(input, weights, spec, dp, layer, hook),
        Engine::Winograd => winograd_conv(input, weights, spec, dp, layer, hook),
    }
}
