//! Branch-free `f32` kernels for `exp` and `erf` that the compiler can
//! vectorize. The scalar libm routines branch per element and dominate the
//! softmax and GELU passes otherwise.

const LOG2E: f32 = std::f32::consts::LOG2_E;
const LN2_HI: f32 = 0.693_359_4;
const LN2_LO: f32 = -2.121_944_4e-4;
/// 1.5·2²³: adding and subtracting it rounds to the nearest integer.
const ROUND: f32 = 12_582_912.0;
const EXP_HI: f32 = 88.0;
const EXP_LO: f32 = -87.3;

/// exp(x) within about 2 ulp on `[-87.3, 88]`; 0 below, +inf above, NaN kept.
#[inline(always)]
pub(crate) fn exp(x: f32) -> f32 {
    let xc = x.clamp(EXP_LO, EXP_HI);
    let t = xc * LOG2E + ROUND;
    let n = t - ROUND;
    let k = t.to_bits() as i32 - ROUND.to_bits() as i32;
    let r = xc - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5e-1;
    let y = p * r * r + r + 1.0;
    let scale = f32::from_bits(((k + 127) as u32) << 23);
    let y = y * scale;
    let y = if x < EXP_LO { 0.0 } else { y };
    let y = if x > EXP_HI { f32::INFINITY } else { y };
    if x.is_nan() {
        x
    } else {
        y
    }
}

/// erf(x) as an odd rational function on `[-4, 4]`, where f32 erf saturates.
#[inline(always)]
pub(crate) fn erf(x: f32) -> f32 {
    let xc = x.clamp(-4.0, 4.0);
    let x2 = xc * xc;
    let mut p = -2.726_142e-10;
    p = p * x2 + 2.770_681_4e-8;
    p = p * x2 - 2.101_024e-6;
    p = p * x2 - 5.692_506_4e-5;
    p = p * x2 - 7.349_906_3e-4;
    p = p * x2 - 2.954_6e-3;
    p = p * x2 - 1.609_603_3e-2;
    let mut q = -1.456_607_2e-5;
    q = q * x2 - 2.133_740_6e-4;
    q = q * x2 - 1.682_827e-3;
    q = q * x2 - 7.373_329e-3;
    q = q * x2 - 1.426_473_9e-2;
    let y = xc * p / q;
    // Beyond |x| = 4 the f32 result is exactly ±1.
    let y = if xc.abs() >= 4.0 { xc.signum() } else { y };
    if x.is_nan() {
        x
    } else {
        y
    }
}

pub(crate) fn exp_slice(xs: &mut [f32]) {
    for v in xs {
        *v = exp(*v);
    }
}

pub(crate) fn erf_slice(xs: &mut [f32]) {
    for v in xs {
        *v = erf(*v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_tracks_f64_reference() {
        let mut worst: f64 = 0.0;
        let mut x = -87.0f32;
        while x < 88.0 {
            let want = (x as f64).exp();
            worst = worst.max(((exp(x) as f64) - want).abs() / want);
            x += 0.013;
        }
        assert!(worst < 3e-7, "{worst:e}");
        assert_eq!(exp(0.0), 1.0);
        assert_eq!(exp(-200.0), 0.0);
        assert_eq!(exp(f32::NEG_INFINITY), 0.0);
        assert_eq!(exp(f32::INFINITY), f32::INFINITY);
        assert!(exp(f32::NAN).is_nan());
    }

    #[test]
    fn erf_tracks_f64_reference() {
        let mut worst: f64 = 0.0;
        let mut x = -6.0f32;
        while x < 6.0 {
            worst = worst.max((erf(x) as f64 - libm::erf(x as f64)).abs());
            x += 0.001;
        }
        assert!(worst < 4.5e-7, "{worst:e}");
        assert_eq!(erf(0.0), 0.0);
        assert_eq!(erf(1.5), -erf(-1.5));
        assert_eq!(erf(f32::INFINITY), 1.0);
        assert_eq!(erf(-9.0), -1.0);
        assert!(erf(f32::NAN).is_nan());
    }
}
