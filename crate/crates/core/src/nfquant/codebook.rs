use crate::error::{invalid, Result};

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// The `2^k` NormalFloat levels in `[-1, 1]`, with exact `-1`, `0`, and `+1`.
///
/// Levels sit at standard-normal quantiles: `2^(k-1)` probabilities evenly
/// spaced on `[δ, 0.5]` for the negative half and `2^(k-1) + 1` on
/// `[0.5, 1 - δ]` for the positive half, where
/// `δ = (1/2^(k+1) + 1/(2^(k+1) - 2)) / 2`. The shared zero is kept once and
/// everything is divided by the largest magnitude. The asymmetry (one more
/// positive level than negative) is what leaves room for an exact zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalFloatCodebook {
    bits: u8,
    levels: Vec<f32>,
    zero_code: u8,
    /// Decision boundaries between adjacent levels, `levels.len() - 1` of them.
    midpoints: Vec<f64>,
}

impl NormalFloatCodebook {
    pub fn new(bits: u8) -> Result<Self> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(invalid!(
                "bits per code must be in {MIN_BITS}..={MAX_BITS}, got {bits}"
            ));
        }
        let levels = normal_float_levels(bits);
        let zero_code = levels
            .iter()
            .position(|&l| l == 0.0)
            .expect("construction always contains zero") as u8;
        let midpoints = levels
            .windows(2)
            .map(|w| (f64::from(w[0]) + f64::from(w[1])) / 2.0)
            .collect();
        Ok(Self {
            bits,
            levels,
            zero_code,
            midpoints,
        })
    }

    pub fn nf4() -> Self {
        Self::new(4).expect("4 bits is in range")
    }

    #[inline]
    pub fn bits(&self) -> u8 {
        self.bits
    }

    #[inline]
    pub fn levels(&self) -> &[f32] {
        &self.levels
    }

    #[inline]
    pub fn zero_code(&self) -> u8 {
        self.zero_code
    }

    #[inline]
    pub fn level(&self, code: u8) -> f32 {
        self.levels[code as usize]
    }

    /// Largest gap between adjacent levels.
    pub fn widest_gap(&self) -> f32 {
        self.levels
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f32::max)
    }

    /// Code of the level nearest to `x`. A value exactly on a boundary goes
    /// to the lower code.
    #[inline]
    pub fn nearest(&self, x: f64) -> u8 {
        self.midpoints.partition_point(|&m| x > m) as u8
    }
}

/// Tail offset `δ(k)` keeping the outermost quantiles finite.
pub fn tail_offset(bits: u8) -> f64 {
    let half_bins = f64::from(1u32 << (bits + 1));
    0.5 * (1.0 / half_bins + 1.0 / (half_bins - 2.0))
}

fn normal_float_levels(bits: u8) -> Vec<f32> {
    let delta = tail_offset(bits);
    let half = 1usize << (bits - 1);

    // Negative side: probabilities δ ..= 0.5 (half points, last one is the zero).
    let negative = (0..half).map(|i| inverse_normal_cdf(lerp(delta, 0.5, i, half - 1)));
    // Positive side: lower-tail mass 0.5 ..= δ, mirrored, so that the outer
    // endpoints are exact negations of each other. Skip the duplicate zero.
    let positive = (1..=half).map(|j| -inverse_normal_cdf(lerp(0.5, delta, j, half)));

    let raw: Vec<f64> = negative.chain(positive).collect();
    let max_abs = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    raw.iter().map(|v| (v / max_abs) as f32).collect()
}

/// `i/n` of the way from `a` to `b`, returning the endpoints exactly.
fn lerp(a: f64, b: f64, i: usize, n: usize) -> f64 {
    if i == 0 {
        a
    } else if i == n {
        b
    } else {
        a + (b - a) * (i as f64 / n as f64)
    }
}

/// Standard normal quantile function, Wichura's AS241 (PPND16), accurate to
/// about 1e-16 relative. Purely rational, so results are bit-identical on any
/// IEEE-754 platform.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability {p} outside (0, 1)");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&CENTRAL_NUM, r) / poly(&CENTRAL_DEN, r);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let value = if r <= 5.0 {
        r -= 1.6;
        poly(&NEAR_NUM, r) / poly(&NEAR_DEN, r)
    } else {
        r -= 5.0;
        poly(&FAR_NUM, r) / poly(&FAR_DEN, r)
    };
    if q < 0.0 {
        -value
    } else {
        value
    }
}

/// Horner evaluation, coefficients in ascending order.
fn poly(coeffs: &[f64; 8], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

#[allow(clippy::excessive_precision)]
const CENTRAL_NUM: [f64; 8] = [
    3.387_132_872_796_366_608,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_112_5e4,
    4.592_195_393_154_987_145_7e4,
    6.726_577_092_700_870_085_3e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_672_7e3,
];
#[allow(clippy::excessive_precision)]
const CENTRAL_DEN: [f64; 8] = [
    1.0,
    4.231_333_070_160_091_125_2e1,
    6.871_870_074_920_579_083e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_7e4,
    3.930_789_580_009_271_061e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_545_925e3,
];
#[allow(clippy::excessive_precision)]
const NEAR_NUM: [f64; 8] = [
    1.423_437_110_749_683_577_34,
    4.630_337_846_156_545_295_9,
    5.769_497_221_460_691_405_5,
    3.647_848_324_763_204_605_04,
    1.270_458_252_452_368_382_58,
    2.417_807_251_774_506_117_7e-1,
    2.272_384_498_926_918_458_33e-2,
    7.745_450_142_783_414_076_4e-4,
];
#[allow(clippy::excessive_precision)]
const NEAR_DEN: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87,
    1.676_384_830_183_803_849_4,
    6.897_673_349_851_000_045_5e-1,
    1.481_039_764_274_800_745_9e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
#[allow(clippy::excessive_precision)]
const FAR_NUM: [f64; 8] = [
    6.657_904_643_501_103_777_2,
    5.463_784_911_164_114_369_9,
    1.784_826_539_917_291_335_8,
    2.965_605_718_285_048_912_3e-1,
    2.653_218_952_657_612_309_3e-2,
    1.242_660_947_388_078_438_6e-3,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
#[allow(clippy::excessive_precision)]
const FAR_DEN: [f64; 8] = [
    1.0,
    5.998_322_065_558_879_376_9e-1,
    1.369_298_809_227_358_053_1e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];
