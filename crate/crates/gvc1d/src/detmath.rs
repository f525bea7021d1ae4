//! Deterministic f64 transcendentals.
//!
//! `std` routes `exp`/`ln`/`tanh`/`sin`/`cos` through the platform libm,
//! whose results differ between platforms. Every transcendental on the
//! coding path goes through these pure-IEEE implementations instead, so
//! that probability tables (and therefore bitstreams) are byte-identical
//! everywhere. Accuracy is ~1e-15 relative, which is far below any
//! tolerance used by the model.

const LN2_HI: f64 = 6.93147180369123816490e-01;
const LN2_LO: f64 = 1.90821492927058770002e-10;
const LN2: f64 = std::f64::consts::LN_2;
const FRAC_2_SQRT_PI: f64 = 1.12837916709551257390;
const SQRT_PI_INV: f64 = 0.56418958354775628695;

/// exp(x) via range reduction to |r| <= ln2/2 and a Taylor series.
pub fn exp(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x > 709.0 {
        return f64::INFINITY;
    }
    if x < -745.0 {
        return 0.0;
    }
    let k = (x / LN2).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor to degree 13: |r|^14/14! < 3e-18 on the reduced range.
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 1..=13u32 {
        term *= r / n as f64;
        sum += term;
    }
    scale_by_pow2(sum, k as i32)
}

fn scale_by_pow2(x: f64, k: i32) -> f64 {
    // Split large exponent shifts to stay clear of overflow/subnormals.
    let half = k / 2;
    x * pow2(half) * pow2(k - half)
}

fn pow2(k: i32) -> f64 {
    let kk = k.clamp(-1022, 1023);
    f64::from_bits(((kk + 1023) as u64) << 52)
}

/// Natural log via atanh series on the reduced mantissa.
pub fn ln(x: f64) -> f64 {
    if x.is_nan() || x < 0.0 {
        return f64::NAN;
    }
    if x == 0.0 {
        return f64::NEG_INFINITY;
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    let bits = x.to_bits();
    let mut e = ((bits >> 52) & 0x7ff) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | (1023u64 << 52));
    if e == -1023 {
        // subnormal: renormalize
        let n = x * pow2(60);
        let nb = n.to_bits();
        e = ((nb >> 52) & 0x7ff) as i64 - 1023 - 60;
        m = f64::from_bits((nb & 0x000f_ffff_ffff_ffff) | (1023u64 << 52));
    }
    if m > std::f64::consts::SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    let t = (m - 1.0) / (m + 1.0);
    let t2 = t * t;
    // 2*atanh(t); |t| <= 0.1716 so t^21 term < 1e-16.
    let mut sum = 0.0;
    let mut tp = t;
    for n in 0..=10u32 {
        sum += tp / (2 * n + 1) as f64;
        tp *= t2;
    }
    2.0 * sum + e as f64 * LN2_HI + e as f64 * LN2_LO
}

pub fn log2(x: f64) -> f64 {
    ln(x) / LN2
}

pub fn tanh(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    if ax > 20.0 {
        return 1.0f64.copysign(x);
    }
    if ax < 1e-5 {
        return x - x * x * x / 3.0;
    }
    let e = exp(2.0 * ax);
    let t = 1.0 - 2.0 / (e + 1.0);
    t.copysign(x)
}

/// erf via Maclaurin series for |x| < 3 and a continued fraction for the
/// complementary function beyond that.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    if ax >= 6.5 {
        return 1.0f64.copysign(x);
    }
    if ax < 3.0 {
        let x2 = ax * ax;
        let mut term = ax;
        let mut sum = ax;
        let mut n = 1u32;
        loop {
            term *= -x2 / n as f64;
            let contrib = term / (2 * n + 1) as f64;
            sum += contrib;
            if contrib.abs() < 1e-18 * sum.abs().max(1e-3) || n > 300 {
                break;
            }
            n += 1;
        }
        (FRAC_2_SQRT_PI * sum).copysign(x)
    } else {
        (1.0 - erfc_cf(ax)).copysign(x)
    }
}

// erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
// for x >= 3; 60 backward steps are far past convergence there.
fn erfc_cf(x: f64) -> f64 {
    let mut f = 0.0;
    for n in (1..=60u32).rev() {
        f = (n as f64 * 0.5) / (x + f);
    }
    exp(-x * x) * SQRT_PI_INV / (x + f)
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal PDF.
pub fn norm_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.39894228040143267794;
    INV_SQRT_2PI * exp(-0.5 * x * x)
}

const PIO2_HI: f64 = 1.57079632679489655800e+00;
const PIO2_LO: f64 = 6.12323399573676603587e-17;

pub fn sin(x: f64) -> f64 {
    sincos(x).0
}

pub fn cos(x: f64) -> f64 {
    sincos(x).1
}

/// (sin x, cos x) with quadrant reduction; accurate for the modest
/// |x| range produced by positional angles.
pub fn sincos(x: f64) -> (f64, f64) {
    if !x.is_finite() {
        return (f64::NAN, f64::NAN);
    }
    let n = (x / PIO2_HI).round();
    let r = (x - n * PIO2_HI) - n * PIO2_LO;
    let q = (n as i64).rem_euclid(4);
    let (s, c) = (sin_poly(r), cos_poly(r));
    match q {
        0 => (s, c),
        1 => (c, -s),
        2 => (-s, -c),
        _ => (-c, s),
    }
}

fn sin_poly(r: f64) -> f64 {
    let r2 = r * r;
    let mut term = r;
    let mut sum = r;
    for n in 1..=8u32 {
        term *= -r2 / ((2 * n) as f64 * (2 * n + 1) as f64);
        sum += term;
    }
    sum
}

fn cos_poly(r: f64) -> f64 {
    let r2 = r * r;
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 1..=8u32 {
        term *= -r2 / ((2 * n - 1) as f64 * (2 * n) as f64);
        sum += term;
    }
    sum
}
