//! Platform-independent special functions.
//!
//! Everything here uses only IEEE-754 `+ - * /` and bit manipulation, so the
//! results are identical on every target. The entropy coder builds its CDF
//! tables from these; libm differences in the last bit would desynchronize
//! encoder and decoder.

const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-01;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
const INV_LN2: f64 = 1.442_695_040_888_963_387_00e+00;
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_286_9;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_677_94;

/// `e^x` with ~1 ulp accuracy.
pub fn exp(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    if x > 709.0 {
        return f64::INFINITY;
    }
    if x < -745.0 {
        return 0.0;
    }
    let kf = round_half_away(x * INV_LN2);
    let k = kf as i32;
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    // Taylor series on |r| <= ln2/2; 14 terms reach double precision
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 1..=14 {
        term = term * r / n as f64;
        sum += term;
    }
    scale_pow2(sum, k)
}

fn scale_pow2(v: f64, k: i32) -> f64 {
    // split the exponent so each factor is a normal power of two
    let mut v = v;
    let mut k = k;
    while k > 1000 {
        v *= f64::from_bits(((1023 + 1000) as u64) << 52);
        k -= 1000;
    }
    while k < -1000 {
        v *= f64::from_bits(((1023 - 1000) as u64) << 52);
        k += 1000;
    }
    v * f64::from_bits(((1023 + k) as u64) << 52)
}

fn round_half_away(x: f64) -> f64 {
    let t = x.trunc();
    if (x - t).abs() >= 0.5 {
        t + x.signum()
    } else {
        t
    }
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.5 {
        1.0 - erf_series(x)
    } else if x > 27.5 {
        0.0
    } else {
        erfc_continued_fraction(x)
    }
}

/// `erf(x) = 2/sqrt(pi) e^{-x^2} sum_n 2^n x^{2n+1} / (2n+1)!!`, all terms positive.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0;
    while n < 200 {
        n += 1;
        term = term * 2.0 * x2 / (2 * n + 1) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    2.0 * FRAC_1_SQRT_PI * exp(-x2) * sum
}

/// `erfc(x) = e^{-x^2}/sqrt(pi) / (x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))`.
fn erfc_continued_fraction(x: f64) -> f64 {
    let mut f = x;
    for k in (1..=90).rev() {
        f = x + (k as f64 * 0.5) / f;
    }
    FRAC_1_SQRT_PI * exp(-x * x) / f
}

pub fn erf(x: f64) -> f64 {
    1.0 - erfc(x)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * exp(-0.5 * x * x)
}

/// Probability that a Gaussian `N(mu, sigma^2)` sample rounds to integer `k`:
/// `Phi((k + 1/2 - mu)/sigma) - Phi((k - 1/2 - mu)/sigma)`.
///
/// Evaluated on the lower tail side of the mean to avoid cancellation.
pub fn discretized_gaussian(k: f64, mu: f64, sigma: f64) -> f64 {
    let v = (k - mu).abs();
    let upper = normal_cdf((0.5 - v) / sigma);
    let lower = normal_cdf((-0.5 - v) / sigma);
    (upper - lower).max(0.0)
}
