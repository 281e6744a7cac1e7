//! Winograd stages against an exact rational oracle.

use num_bigint::BigInt;
use num_rational::BigRational;
use proptest::prelude::*;
use wft_core::conv::{
    direct_conv, winograd_conv, winograd_elementwise_accumulate, winograd_filter_transform,
    winograd_input_transform, winograd_output_transform, ConvSpec, IdentityHook, WinogradTransform,
};
use wft_core::fxp::{wrap_to, DatapathSpec, FxpFormat, FxpTensor};

type Q = BigRational;
type Mat = Vec<Vec<Q>>;

fn q(n: i64) -> Q {
    Q::from_integer(BigInt::from(n))
}

fn half(n: i64) -> Q {
    Q::new(BigInt::from(n), BigInt::from(2))
}

fn g_mat() -> Mat {
    vec![
        vec![q(1), q(0), q(0)],
        vec![half(1), half(1), half(1)],
        vec![half(1), half(-1), half(1)],
        vec![q(0), q(0), q(1)],
    ]
}

fn bt_mat() -> Mat {
    [[1, 0, -1, 0], [0, 1, 1, 0], [0, -1, 1, 0], [0, 1, 0, -1]]
        .iter()
        .map(|r| r.iter().map(|&v| q(v)).collect())
        .collect()
}

fn at_mat() -> Mat {
    [[1, 1, 1, 0], [0, 1, -1, -1]]
        .iter()
        .map(|r| r.iter().map(|&v| q(v)).collect())
        .collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).fold(q(0), |s, t| s + &a[i][t] * &b[t][j])).collect())
        .collect()
}

fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j].clone()).collect()).collect()
}

fn square(v: &[i64], n: usize) -> Mat {
    (0..n).map(|i| (0..n).map(|j| q(v[i * n + j])).collect()).collect()
}

fn flat_int(m: &Mat, scale: i64) -> Vec<i64> {
    m.iter()
        .flatten()
        .map(|x| {
            let s = x * q(scale);
            assert!(s.is_integer(), "{s} not integral");
            i64::try_from(s.to_integer()).unwrap()
        })
        .collect()
}

/// `G g G^T`.
fn oracle_u(g: &[i64]) -> Mat {
    let gm = g_mat();
    matmul(&matmul(&gm, &square(g, 3)), &transpose(&gm))
}

/// `B^T d B`.
fn oracle_v(d: &[i64]) -> Mat {
    let bt = bt_mat();
    matmul(&matmul(&bt, &square(d, 4)), &transpose(&bt))
}

/// `A^T m A`.
fn oracle_y(m: &[i64]) -> Mat {
    let at = at_mat();
    matmul(&matmul(&at, &square(m, 4)), &transpose(&at))
}

fn wt(format: FxpFormat) -> WinogradTransform {
    WinogradTransform::new(format, &DatapathSpec::for_format(format))
}

fn filter(g: &[i64], t: &WinogradTransform) -> [i64; 16] {
    let g: [i32; 9] = std::array::from_fn(|i| g[i] as i32);
    winograd_filter_transform(&g, t, 0, 0, &IdentityHook)
}

fn input(d: &[i64], t: &WinogradTransform) -> [i64; 16] {
    winograd_input_transform(&d.try_into().unwrap(), t, 0, 0, &IdentityHook)
}

#[test]
fn zero_filter_and_input() {
    let t = wt(FxpFormat::INT8);
    assert_eq!(filter(&[0; 9], &t), [0; 16]);
    assert_eq!(input(&[0; 16], &t), [0; 16]);
    assert_eq!(winograd_output_transform(&[0; 16], &t, 0, 0, &IdentityHook), [0; 4]);
}

#[test]
fn delta_filter_entries() {
    for format in [FxpFormat::INT8, FxpFormat::INT16] {
        let t = wt(format);
        let one = format.one().unwrap() as i64;
        let mut g = [0i64; 9];
        g[4] = one;
        let u = filter(&g, &t);
        let scale = one << t.g_frac_extra;
        let allowed: Vec<Q> = [0, 1, -1, 2, -2].iter().map(|&n| Q::new(BigInt::from(n), BigInt::from(4))).collect();
        let expected = oracle_u(&[0, 0, 0, 0, 1, 0, 0, 0, 0]);
        for (i, x) in u.iter().enumerate() {
            let r = Q::new(BigInt::from(*x), BigInt::from(scale));
            assert!(allowed.contains(&r), "{r}");
            assert_eq!(r, expected[i / 4][i % 4]);
        }
    }
}

#[test]
fn all_ones_input() {
    let t = wt(FxpFormat::INT8);
    let d = [1i64; 16];
    assert_eq!(input(&d, &t).to_vec(), flat_int(&oracle_v(&d), 1));
}

#[test]
fn single_entry_output_spread() {
    let t = wt(FxpFormat::INT16);
    for pos in 0..16 {
        let mut m = [0i64; 16];
        m[pos] = 7;
        let y = winograd_output_transform(&m, &t, 0, 0, &IdentityHook);
        assert_eq!(y.to_vec(), flat_int(&oracle_y(&m), 1), "entry {pos}");
    }
}

#[test]
fn identity_pattern_masks_input() {
    let t = wt(FxpFormat::INT8);
    let u: [i64; 16] = std::array::from_fn(|i| (i % 5 == 0) as i64);
    let v: [i64; 16] = std::array::from_fn(|i| i as i64 * 3 - 20);
    let mut m = [0i64; 16];
    winograd_elementwise_accumulate(&mut m, &u, &v, true, &t, 0, 0, &IdentityHook);
    for e in 0..16 {
        assert_eq!(m[e], if e % 5 == 0 { v[e] } else { 0 });
    }
}

fn int_range(format: FxpFormat) -> std::ops::RangeInclusive<i64> {
    format.min_raw() as i64..=format.max_raw() as i64
}

fn format_strategy() -> impl Strategy<Value = FxpFormat> {
    prop_oneof![Just(FxpFormat::INT8), Just(FxpFormat::INT16)]
}

proptest! {
    #[test]
    fn filter_transform_matches_oracle(
        format in format_strategy(),
        seed in prop::collection::vec(any::<i64>(), 9),
    ) {
        let r = int_range(format);
        let span = r.end() - r.start() + 1;
        let g: Vec<i64> = seed.iter().map(|s| r.start() + s.rem_euclid(span)).collect();
        let t = wt(format);
        let u = filter(&g, &t);
        prop_assert_eq!(u.to_vec(), flat_int(&oracle_u(&g), 1 << t.g_frac_extra));
    }

    #[test]
    fn input_transform_matches_oracle(
        format in format_strategy(),
        seed in prop::collection::vec(any::<i64>(), 16),
    ) {
        let r = int_range(format);
        let span = r.end() - r.start() + 1;
        let d: Vec<i64> = seed.iter().map(|s| r.start() + s.rem_euclid(span)).collect();
        let t = wt(format);
        prop_assert_eq!(input(&d, &t).to_vec(), flat_int(&oracle_v(&d), 1));
    }

    #[test]
    fn two_channel_accumulation_matches_oracle(
        u in prop::collection::vec(-2000i64..2000, 32),
        v in prop::collection::vec(-500i64..500, 32),
    ) {
        let t = wt(FxpFormat::INT8);
        let mut m = [0i64; 16];
        for c in 0..2 {
            let uc: [i64; 16] = u[c * 16..(c + 1) * 16].try_into().unwrap();
            let vc: [i64; 16] = v[c * 16..(c + 1) * 16].try_into().unwrap();
            winograd_elementwise_accumulate(&mut m, &uc, &vc, c == 0, &t, 0, c as u64 * 16, &IdentityHook);
        }
        for e in 0..16 {
            let expected = q(u[e]) * q(v[e]) + q(u[16 + e]) * q(v[16 + e]);
            prop_assert_eq!(q(m[e]), expected);
        }
    }

    /// One 4x4 tile: the three stages compose to the 2x2 correlation, and
    /// the rational form of the same identity holds exactly.
    #[test]
    fn single_tile_identity(
        format in format_strategy(),
        gs in prop::collection::vec(any::<i64>(), 9),
        ds in prop::collection::vec(any::<i64>(), 16),
    ) {
        let r = int_range(format);
        let span = r.end() - r.start() + 1;
        let g: Vec<i64> = gs.iter().map(|s| r.start() + s.rem_euclid(span)).collect();
        let d: Vec<i64> = ds.iter().map(|s| r.start() + s.rem_euclid(span)).collect();
        let corr: Vec<i64> = (0..4)
            .map(|o| {
                let (i, j) = (o / 2, o % 2);
                (0..9).map(|k| d[(i + k / 3) * 4 + j + k % 3] * g[k]).sum()
            })
            .collect();

        let uq = oracle_u(&g);
        let vq = oracle_v(&d);
        let mq: Mat = (0..4).map(|i| (0..4).map(|j| &uq[i][j] * &vq[i][j]).collect()).collect();
        let at = at_mat();
        let yq = matmul(&matmul(&at, &mq), &transpose(&at));
        prop_assert_eq!(flat_int(&yq, 1), corr.clone());

        let t = wt(format);
        let u = filter(&g, &t);
        let v = input(&d, &t);
        let mut m = [0i64; 16];
        winograd_elementwise_accumulate(&mut m, &u, &v, true, &t, 0, 0, &IdentityHook);
        let y = winograd_output_transform(&m, &t, 0, 0, &IdentityHook);
        for o in 0..4 {
            prop_assert_eq!(y[o], wrap_to(corr[o] << t.g_frac_extra, t.acc_bits));
        }
    }

    #[test]
    fn winograd_equals_direct(
        format in format_strategy(),
        c in 1usize..4, k in 1usize..4, h in 3usize..9, w in 3usize..9, pad in 0usize..2,
        acc in prop_oneof![Just(0u32), Just(24), Just(32)],
        seed in any::<u64>(),
    ) {
        let dp = DatapathSpec {
            acc_bits: acc.max(2 * format.word_bits),
            ..DatapathSpec::for_format(format)
        };
        let spec = ConvSpec::new3x3(c, k, h, w, pad);
        let mut rng = wft_core::rng::RngStream::new(&[seed]);
        let r = int_range(format);
        let span = (r.end() - r.start() + 1) as u64;
        let mut tensor = |shape: Vec<usize>| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| (r.start() + (rng.next_u64() % span) as i64) as i32).collect();
            FxpTensor::new(shape, data, format).unwrap()
        };
        let x = tensor(spec.input_shape());
        let wts = tensor(spec.weight_shape());
        let a = direct_conv(&x, &wts, &spec, &dp, 0, &IdentityHook).unwrap();
        let b = winograd_conv(&x, &wts, &spec, &dp, 0, &IdentityHook).unwrap();
        prop_assert_eq!(a, b);
    }
}
