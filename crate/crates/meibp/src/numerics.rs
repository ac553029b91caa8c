//! Special functions behind the variational updates.
//!
//! Everything here reduces to four ingredients:
//!
//! * `erfcx(x) = exp(x^2) * erfc(x)`, the scaled complementary error
//!   function, evaluated by W. J. Cody's rational Chebyshev approximations so
//!   it stays accurate on the whole line instead of overflowing/underflowing
//!   the naive product. The negative side uses the reflection
//!   `erfcx(-x) = 2 exp(x^2) - erfcx(x)` and genuinely overflows 64-bit
//!   floats once `x < -26`; that is reported as an error rather than
//!   saturated.
//! * Moments and entropy of a Gaussian truncated to `[0, ∞)`. With
//!   `℘ = -mu/(sigma*sqrt(2))`:
//!
//!   ```text
//!   E[a]   = mu + sigma * sqrt(2/pi) / erfcx(℘)
//!   E[a^2] = mu^2 + sigma^2 + sigma * mu * sqrt(2/pi) / erfcx(℘)
//!   H      = 0.5 ln(pi e sigma^2 / 2) + ln erfc(℘)
//!            - (mu/sigma) * sqrt(1/(2 pi)) / erfcx(℘)
//!   ```
//!
//!   The entropy's final term carries a minus sign: differentiating
//!   `-∫ q ln q` for the renormalized truncated density gives
//!   `alpha * phi(alpha) / (2 Z)` with `alpha = -mu/sigma`, and the identity
//!   `phi(alpha)/Z = sqrt(2/pi)/erfcx(℘)` turns that into the form above.
//!   (A 40-digit quadrature cross-check pins this down; see the tests.)
//! * `ln n!` via a cumulative-sum table with a log-gamma fallback.
//! * Harmonic numbers by direct summation.

use crate::error::{Error, Result};
use std::sync::OnceLock;

const ONE_OVER_SQRT_PI: f64 = 0.564_189_583_547_756_286_95; // 1/sqrt(pi)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_355_88; // sqrt(2/pi)
const SQRT_1_OVER_2PI: f64 = 0.398_942_280_401_432_677_94; // 1/sqrt(2 pi)
const LN_2: f64 = std::f64::consts::LN_2;

/// Arguments below this make `2 exp(x^2)` exceed `f64::MAX`-adjacent scales;
/// the reflection formula cannot be evaluated there.
pub const ERFCX_MIN_ARG: f64 = -26.0;

// ---------------------------------------------------------------------------
// Cody's rational approximations (SPECFUN CALERF coefficient tables).
// ---------------------------------------------------------------------------

// erf on |x| <= 0.46875: erf(x) = x * RA(x^2).
const CODY_A: [f64; 5] = [
    3.161_123_743_870_565_6,
    113.864_154_151_050_156,
    377.485_237_685_302_021,
    3_209.377_589_138_469_47,
    0.185_777_706_184_603_153,
];
const CODY_B: [f64; 4] = [
    23.601_290_952_344_120_9,
    244.024_637_934_444_173,
    1_282.616_526_077_372_28,
    2_844.236_833_439_170_62,
];

// erfcx on 0.46875 < x <= 4: erfcx(x) = RC(x).
const CODY_C: [f64; 9] = [
    0.564_188_496_988_670_089,
    8.883_149_794_388_375_94,
    66.119_190_637_141_629_5,
    298.635_138_197_400_131,
    881.952_221_241_769_09,
    1_712.047_612_634_070_58,
    2_051.078_377_826_071_47,
    1_230.339_354_797_997_25,
    2.153_115_354_744_038_46e-8,
];
const CODY_D: [f64; 8] = [
    15.744_926_110_709_834_7,
    117.693_950_891_312_499,
    537.181_101_862_009_858,
    1_621.389_574_566_690_19,
    3_290.799_235_733_459_63,
    4_362.619_090_143_247_16,
    3_439.367_674_143_721_64,
    1_230.339_354_803_749_42,
];

// erfcx on x > 4: erfcx(x) = (1/sqrt(pi) - RP(1/x^2)) / x.
const CODY_P: [f64; 6] = [
    0.305_326_634_961_232_344,
    0.360_344_899_949_804_439,
    0.125_781_726_111_229_246,
    0.016_083_785_148_742_276_6,
    6.587_491_615_298_378_03e-4,
    0.016_315_387_137_302_097_8,
];
const CODY_Q: [f64; 5] = [
    2.568_520_192_289_822_42,
    1.872_952_849_923_460_47,
    0.527_905_102_951_428_412,
    0.060_518_341_312_441_319_1,
    0.002_335_204_976_268_691_85,
];

const CODY_THRESHOLD: f64 = 0.46875;
/// Above this, `erfc(x)` underflows to zero in 64-bit floats.
const ERFC_XBIG: f64 = 26.543;

#[inline]
fn cody_small(z: f64) -> f64 {
    ((((CODY_A[4] * z + CODY_A[0]) * z + CODY_A[1]) * z + CODY_A[2]) * z + CODY_A[3])
        / ((((z + CODY_B[0]) * z + CODY_B[1]) * z + CODY_B[2]) * z + CODY_B[3])
}

#[inline]
fn cody_mid(y: f64) -> f64 {
    ((((((((CODY_C[8] * y + CODY_C[0]) * y + CODY_C[1]) * y + CODY_C[2]) * y + CODY_C[3]) * y
        + CODY_C[4])
        * y
        + CODY_C[5])
        * y
        + CODY_C[6])
        * y
        + CODY_C[7])
        / ((((((((y + CODY_D[0]) * y + CODY_D[1]) * y + CODY_D[2]) * y + CODY_D[3]) * y
            + CODY_D[4])
            * y
            + CODY_D[5])
            * y
            + CODY_D[6])
            * y
            + CODY_D[7])
}

#[inline]
fn cody_tail(z: f64) -> f64 {
    z * (((((CODY_P[5] * z + CODY_P[0]) * z + CODY_P[1]) * z + CODY_P[2]) * z + CODY_P[3]) * z
        + CODY_P[4])
        / (((((z + CODY_Q[0]) * z + CODY_Q[1]) * z + CODY_Q[2]) * z + CODY_Q[3]) * z + CODY_Q[4])
}

/// `exp(-y^2)` split into an exact-square part and a small correction, which
/// keeps the last digits of `erfc` honest for moderate arguments (Cody's
/// trick: round `y` to 1/16ths so the large square is exactly representable).
#[inline]
fn exp_neg_square(y: f64) -> f64 {
    let yt = (y * 16.0).trunc() / 16.0;
    (-yt * yt).exp() * (-(y - yt) * (y + yt)).exp()
}

#[inline]
fn exp_pos_square(y: f64) -> f64 {
    let yt = (y * 16.0).trunc() / 16.0;
    (yt * yt).exp() * ((y - yt) * (y + yt)).exp()
}

/// Scaled erfcx on the nonnegative half line (no overflow anywhere).
#[inline]
fn erfcx_nonneg(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x <= CODY_THRESHOLD {
        let z = x * x;
        z.exp() * (1.0 - x * cody_small(z))
    } else if x <= 4.0 {
        cody_mid(x)
    } else {
        (ONE_OVER_SQRT_PI - cody_tail(1.0 / (x * x))) / x
    }
}

/// Scaled complementary error function `erfcx(x) = exp(x^2) erfc(x)`.
///
/// Stable over `[-26, ∞)`. For `x < -26` the true value exceeds what 64-bit
/// floats can represent (`2 exp(x^2)` with `x^2 > 676`), so an overflow error
/// is returned instead of a saturated value. NaN input is a domain error.
pub fn erfcx(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::Domain("erfcx: NaN argument".into()));
    }
    if x < ERFCX_MIN_ARG {
        return Err(Error::Overflow(format!(
            "erfcx({x}): exp(x^2) exceeds 64-bit float range below x = -26"
        )));
    }
    if x >= 0.0 {
        Ok(erfcx_nonneg(x))
    } else {
        // erfcx(-x) = 2 exp(x^2) - erfcx(x); the subtrahend is <= 1 while the
        // leading term is >= 2, so there is no cancellation on this side.
        Ok(2.0 * exp_pos_square(x) - erfcx_nonneg(-x))
    }
}

/// Complementary error function via the same approximations.
pub fn erfc(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::Domain("erfc: NaN argument".into()));
    }
    let y = x.abs();
    let erfc_abs = if y <= CODY_THRESHOLD {
        1.0 - x * cody_small(y * y) // note: already signed for |x| small
    } else if y >= ERFC_XBIG {
        0.0
    } else if y <= 4.0 {
        cody_mid(y) * exp_neg_square(y)
    } else {
        (ONE_OVER_SQRT_PI - cody_tail(1.0 / (y * y))) / y * exp_neg_square(y)
    };
    if y <= CODY_THRESHOLD {
        Ok(erfc_abs)
    } else if x < 0.0 {
        Ok(2.0 - erfc_abs)
    } else {
        Ok(erfc_abs)
    }
}

/// `ln erfc(x)`, stable for every finite `x` (no underflow for large positive
/// arguments, where `erfc` itself vanishes but `ln erfcx(x) - x^2` does not).
pub fn ln_erfc(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::Domain("ln_erfc: NaN argument".into()));
    }
    if x > 0.0 {
        Ok(erfcx_nonneg(x).ln() - x * x)
    } else if x >= ERFCX_MIN_ARG {
        Ok(erfcx(x)?.ln() - x * x)
    } else {
        // erfc(x) = 2 - erfc(-x) and erfc(-x) underflows: ln 2 exactly.
        Ok(LN_2)
    }
}

// ---------------------------------------------------------------------------
// Truncated-Gaussian kernels.
// ---------------------------------------------------------------------------

/// Validated parameters of a Gaussian truncated to `[0, ∞)`: location `mu`
/// (any finite real) and scale `sigma > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncGaussParams {
    mu: f64,
    sigma: f64,
}

impl TruncGaussParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::Domain(format!("truncated Gaussian: mu = {mu} is not finite")));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Domain(format!(
                "truncated Gaussian: sigma = {sigma} must be finite and positive"
            )));
        }
        Ok(TruncGaussParams { mu, sigma })
    }

    /// From mean and variance of the underlying (untruncated) Gaussian.
    pub fn from_variance(mu: f64, sigma2: f64) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::Domain(format!(
                "truncated Gaussian: sigma^2 = {sigma2} must be finite and positive"
            )));
        }
        Self::new(mu, sigma2.sqrt())
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// The standardized truncation argument `℘ = -mu / (sigma sqrt(2))`.
    #[inline]
    pub fn p_hat(&self) -> f64 {
        -self.mu / (self.sigma * std::f64::consts::SQRT_2)
    }
}

/// First and second moments plus differential entropy of the truncated
/// Gaussian, computed together so `erfcx` is evaluated once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TgMoments {
    pub mean: f64,
    pub second_moment: f64,
    pub entropy: f64,
}

/// All three kernels at once (shared `erfcx` evaluation).
///
/// When the mass below the truncation point is negligible (`℘ <= -26`, i.e.
/// `mu > 26 sqrt(2) sigma`), the `1/erfcx` corrections underflow past 1e-290
/// and the correctly rounded results are the untruncated Gaussian's moments
/// and entropy; that branch avoids the `erfcx` overflow region entirely.
pub fn tg_moments(p: &TruncGaussParams) -> TgMoments {
    let (mu, sigma) = (p.mu, p.sigma);
    let p_hat = p.p_hat();
    let gauss_entropy_part = 0.5 * (std::f64::consts::PI * std::f64::consts::E * sigma * sigma
        / 2.0)
        .ln();
    if p_hat < ERFCX_MIN_ARG {
        return TgMoments {
            mean: mu,
            second_moment: mu * mu + sigma * sigma,
            entropy: gauss_entropy_part + LN_2,
        };
    }
    let scaled = erfcx(p_hat).expect("p_hat >= -26 by branch guard");
    let hazard = SQRT_2_OVER_PI / scaled; // phi(alpha) / Z, standardized
    TgMoments {
        mean: mu + sigma * hazard,
        second_moment: mu * mu + sigma * sigma + sigma * mu * hazard,
        entropy: gauss_entropy_part + ln_erfc(p_hat).expect("finite p_hat")
            - (mu / sigma) * SQRT_1_OVER_2PI / scaled,
    }
}

/// `E[a]` for `a ~ TN(mu, sigma^2)` on `[0, ∞)`. Always strictly positive.
pub fn tg_mean(p: &TruncGaussParams) -> f64 {
    tg_moments(p).mean
}

/// `E[a^2]` for the truncated Gaussian. Satisfies `E[a^2] = mu E[a] + sigma^2`.
pub fn tg_second_moment(p: &TruncGaussParams) -> f64 {
    tg_moments(p).second_moment
}

/// Differential entropy `-∫ q ln q` of the truncated Gaussian.
pub fn tg_entropy(p: &TruncGaussParams) -> f64 {
    tg_moments(p).entropy
}

// ---------------------------------------------------------------------------
// Log-factorials and harmonic numbers.
// ---------------------------------------------------------------------------

/// `ln n!` with a precomputed table and a log-gamma fallback beyond it.
///
/// The table is filled by compensated (Kahan) cumulative summation of
/// `ln i`, which keeps every entry within a few ulps; beyond the table the
/// value comes from `ln Γ(n+1)`.
#[derive(Debug, Clone)]
pub struct LogFactorial {
    table: Vec<f64>,
}

impl LogFactorial {
    /// Table covering `0..=limit`.
    pub fn new(limit: usize) -> Self {
        let mut table = Vec::with_capacity(limit + 1);
        table.push(0.0); // ln 0! = 0
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for i in 1..=limit {
            let term = (i as f64).ln() - comp;
            let t = sum + term;
            comp = (t - sum) - term;
            sum = t;
            table.push(sum);
        }
        LogFactorial { table }
    }

    #[inline]
    pub fn eval(&self, n: u64) -> f64 {
        match self.table.get(n as usize) {
            Some(&v) => v,
            None => statrs::function::gamma::ln_gamma(n as f64 + 1.0),
        }
    }
}

const DEFAULT_LOG_FACT_LIMIT: usize = 1 << 16;

static LOG_FACT: OnceLock<LogFactorial> = OnceLock::new();

/// `ln n!` using a shared table for `n <= 65536` and log-gamma beyond.
pub fn log_factorial(n: u64) -> f64 {
    LOG_FACT
        .get_or_init(|| LogFactorial::new(DEFAULT_LOG_FACT_LIMIT))
        .eval(n)
}

/// Harmonic number `H_n = sum_{i=1..n} 1/i` (`H_0 = 0`).
///
/// Summed from the smallest term up so the tail is not swallowed by the
/// leading ones.
pub fn harmonic(n: u64) -> f64 {
    let mut sum = 0.0;
    for i in (1..=n).rev() {
        sum += 1.0 / i as f64;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Reference values below were produced with 40-digit interval-checked
    // arithmetic (mpmath), independently of this implementation.

    #[test]
    fn erfcx_basic_values() {
        assert_eq!(erfcx(0.0).unwrap(), 1.0);
        assert_relative_eq!(erfcx(1.0).unwrap(), 0.427_583_576_155_807_004_4, max_relative = 1e-14);
        assert_relative_eq!(erfcx(0.5).unwrap(), 0.615_690_344_192_925_874_9, max_relative = 1e-14);
        assert_relative_eq!(erfcx(2.0).unwrap(), 0.255_395_676_310_505_743_9, max_relative = 1e-14);
        assert_relative_eq!(erfcx(10.0).unwrap(), 0.056_140_992_743_822_585_9, max_relative = 1e-14);
        assert_relative_eq!(erfcx(-1.0).unwrap(), 5.008_980_080_762_283_466, max_relative = 1e-13);
        assert_relative_eq!(erfcx(-5.0).unwrap(), 1.440_097_986_746_610_4e11, max_relative = 1e-13);
    }

    #[test]
    fn erfcx_large_positive_argument_is_asymptotic() {
        // erfcx(x) ~ 1/(x sqrt(pi)) for big x; no overflow/underflow.
        for &x in &[50.0, 1e3, 1e6, 1e12] {
            let v = erfcx(x).unwrap();
            let asym = 1.0 / (x * std::f64::consts::PI.sqrt());
            assert_relative_eq!(v, asym, max_relative = 1e-3);
            assert!(v.is_finite() && v > 0.0);
        }
    }

    #[test]
    fn erfcx_deep_negative_is_huge_but_finite_until_the_boundary() {
        let v = erfcx(-26.0).unwrap();
        assert_relative_eq!(v, 7.657_724_931_490_568_4e293, max_relative = 1e-12);
        assert!(v.is_finite());
    }

    #[test]
    fn erfcx_overflow_and_domain_errors() {
        assert!(matches!(erfcx(-26.000001), Err(Error::Overflow(_))));
        assert!(matches!(erfcx(-1e9), Err(Error::Overflow(_))));
        assert!(matches!(erfcx(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn erfc_matches_scaled_product() {
        // erfcx(x) * exp(-x^2) must reproduce erfc(x) through the separate
        // code path, across the quoted range.
        let mut x = 0.0;
        while x <= 5.0 {
            let lhs = erfcx(x).unwrap() * (-x * x).exp();
            let rhs = erfc(x).unwrap();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
            x += 0.01;
        }
    }

    #[test]
    fn ln_erfc_is_stable_where_erfc_underflows() {
        // erfc(30) underflows; ln erfc(30) is about -x^2 - ln(x sqrt(pi)).
        let v = ln_erfc(30.0).unwrap();
        let expect = erfcx(30.0).unwrap().ln() - 900.0;
        assert_relative_eq!(v, expect, max_relative = 1e-15);
        assert!(v < -900.0 && v.is_finite());
        // Deep negative arguments saturate at ln 2.
        assert_eq!(ln_erfc(-100.0).unwrap(), std::f64::consts::LN_2);
    }

    #[test]
    fn trunc_gauss_param_validation() {
        assert!(TruncGaussParams::new(0.0, 1.0).is_ok());
        assert!(matches!(TruncGaussParams::new(0.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(TruncGaussParams::new(0.0, -1.0), Err(Error::Domain(_))));
        assert!(matches!(TruncGaussParams::new(f64::NAN, 1.0), Err(Error::Domain(_))));
        assert!(matches!(TruncGaussParams::new(0.0, f64::INFINITY), Err(Error::Domain(_))));
        assert!(matches!(TruncGaussParams::from_variance(0.0, -0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn tg_mean_known_values() {
        let half_normal = TruncGaussParams::new(0.0, 1.0).unwrap();
        assert_relative_eq!(tg_mean(&half_normal), SQRT_2_OVER_PI, max_relative = 1e-15);

        let p = TruncGaussParams::new(1.0, 1.0).unwrap();
        assert_relative_eq!(tg_mean(&p), 1.287_599_970_939_178_361, max_relative = 1e-13);

        // Almost all mass below zero: a small positive sliver survives.
        let p = TruncGaussParams::new(-5.0, 1.0).unwrap();
        let m = tg_mean(&p);
        assert_relative_eq!(m, 0.186_503_967_125_842_115_6, max_relative = 1e-12);
        assert!(m > 0.0 && m < 0.2);
    }

    #[test]
    fn tg_second_moment_known_values() {
        let p = TruncGaussParams::new(1.0, 1.0).unwrap();
        assert_relative_eq!(tg_second_moment(&p), 2.287_599_970_939_178_361, max_relative = 1e-13);
        // Identity E[a^2] = mu E[a] + sigma^2.
        assert_relative_eq!(
            tg_second_moment(&p),
            1.0 * tg_mean(&p) + 1.0,
            max_relative = 1e-14
        );
        let p = TruncGaussParams::new(-2.0, 0.5).unwrap();
        assert_relative_eq!(
            tg_second_moment(&p),
            0.024_392_855_510_528_927_2,
            max_relative = 1e-12
        );
    }

    #[test]
    fn tg_variance_is_positive() {
        // E[a^2] - E[a]^2 > 0 across regimes, including deep truncation.
        for &(mu, sigma) in &[
            (0.0, 1.0),
            (3.0, 1.0),
            (-8.0, 1.0),
            (-5.0, 0.3),
            (2.0, 1e-3),
            (-4e2, 1e2),
            (1e3, 1e3),
        ] {
            let p = TruncGaussParams::new(mu, sigma).unwrap();
            let m = tg_moments(&p);
            assert!(
                m.second_moment - m.mean * m.mean > 0.0,
                "variance must be positive at mu={mu}, sigma={sigma}"
            );
            assert!(m.mean > 0.0);
        }
    }

    #[test]
    fn tg_entropy_known_values() {
        // Half-normal: H = 0.5 ln(pi e / 2).
        let p = TruncGaussParams::new(0.0, 1.0).unwrap();
        assert_relative_eq!(tg_entropy(&p), 0.725_791_352_644_727_432, max_relative = 1e-14);

        // Quadrature-verified references.
        let p = TruncGaussParams::new(-1.0, 2.0).unwrap();
        assert_relative_eq!(tg_entropy(&p), 1.221_443_394_763_015_562, max_relative = 1e-12);
        let p = TruncGaussParams::new(-5.0, 0.3).unwrap();
        assert_relative_eq!(tg_entropy(&p), -3.024_488_551_497_076_72, max_relative = 1e-12);

        // Far above the truncation point the distribution is effectively the
        // full Gaussian: H -> 0.5 ln(2 pi e sigma^2). At mu = 3 sigma the
        // residual truncation effect is still ~8e-3.
        let p = TruncGaussParams::new(3.0, 1.0).unwrap();
        let h = tg_entropy(&p);
        assert_relative_eq!(h, 1.410_930_964_676_736_05, max_relative = 1e-12);
        let full = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((h - full).abs() < 1e-2);
        // And by mu = 8 sigma it is indistinguishable.
        let p = TruncGaussParams::new(8.0, 1.0).unwrap();
        assert!((tg_entropy(&p) - full).abs() < 1e-13);
    }

    #[test]
    fn tg_kernels_survive_the_underflow_guard() {
        // mu/sigma far beyond 26 sqrt(2): the truncation correction is below
        // 1e-290 and results must equal the untruncated Gaussian's.
        let p = TruncGaussParams::new(100.0, 1.0).unwrap();
        let m = tg_moments(&p);
        assert_eq!(m.mean, 100.0);
        assert_eq!(m.second_moment, 100.0 * 100.0 + 1.0);
        let full = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert_relative_eq!(m.entropy, full, max_relative = 1e-15);
    }

    #[test]
    fn log_factorial_small_values() {
        assert_eq!(log_factorial(0), 0.0);
        assert_eq!(log_factorial(1), 0.0);
        assert_relative_eq!(log_factorial(5), 120.0f64.ln(), max_relative = 1e-15);
        assert_relative_eq!(log_factorial(10), 15.104_412_573_075_515_295, max_relative = 1e-14);
    }

    #[test]
    fn log_factorial_against_stirling() {
        // Stirling with three correction terms: truncation error ~1e-17 rel
        // at n = 1e5, far finer than the 1e-10 gate.
        let n = 100_000u64;
        let x = n as f64;
        let stirling = x * x.ln() - x
            + 0.5 * (2.0 * std::f64::consts::PI * x).ln()
            + 1.0 / (12.0 * x)
            - 1.0 / (360.0 * x * x * x);
        assert_relative_eq!(log_factorial(n), stirling, max_relative = 1e-10);
        assert_relative_eq!(log_factorial(n), 1_051_299.221_899_121_865, max_relative = 1e-12);
    }

    #[test]
    fn log_factorial_table_and_fallback_agree() {
        // Values straddling the table boundary must be continuous in accuracy.
        let small = LogFactorial::new(100);
        for n in [0u64, 1, 50, 99, 100, 101, 500, 70_000, 1_000_000] {
            let a = small.eval(n);
            let b = statrs::function::gamma::ln_gamma(n as f64 + 1.0);
            assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn harmonic_known_values() {
        assert_eq!(harmonic(0), 0.0);
        assert_eq!(harmonic(1), 1.0);
        assert_eq!(harmonic(2), 1.5);
        assert_relative_eq!(harmonic(10), 2.928_968_253_968_253_968, max_relative = 1e-15);
        assert_relative_eq!(harmonic(1000), 7.485_470_860_550_344_913, max_relative = 1e-14);
    }
}
