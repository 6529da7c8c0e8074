//! Extended-precision rotation angles for powers of elliptic unimodular blocks.
//!
//! A block with trace `2 cos k` raised to the power `m` only depends on
//! `m·k mod 2π`. For `m` close to `2^127` that reduction needs about 180
//! significant bits of `k`, far beyond what `f64` carries.

use astro_float::{BigFloat, Consts, RoundingMode};

use crate::error::{invalid, Result};

const PRECISION: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

#[derive(Debug, Clone)]
pub struct EllipticAngle {
    angle: BigFloat,
    two_pi: BigFloat,
    /// `k` rounded to `f64`.
    pub k: f64,
}

impl EllipticAngle {
    /// Builds `k = arccos(half_trace)` for `|half_trace| < 1`.
    pub fn from_half_trace(half_trace: f64) -> Result<Self> {
        if !(half_trace.abs() < 1.0) {
            return Err(invalid(format!(
                "half trace {half_trace} is not elliptic"
            )));
        }
        let mut consts = Consts::new().map_err(|e| invalid(format!("{e:?}")))?;
        let x = BigFloat::from_f64(half_trace, PRECISION);
        let angle = x.acos(PRECISION, RM, &mut consts);
        let two = BigFloat::from_u8(2, PRECISION);
        let two_pi = consts.pi(PRECISION, RM).mul(&two, PRECISION, RM);
        let k = to_f64(&angle);
        Ok(EllipticAngle { angle, two_pi, k })
    }

    /// `m·k` reduced to `[0, 2π)`.
    pub fn reduced(&self, m: u128) -> f64 {
        if m < (1 << 10) {
            // Few enough multiples that double precision already suffices.
            let p = (m as f64) * self.k;
            return p.rem_euclid(std::f64::consts::TAU);
        }
        let mm = BigFloat::from_u128(m, PRECISION);
        let phase = self.angle.mul(&mm, PRECISION, RM);
        let turns = phase.div(&self.two_pi, PRECISION, RM).floor();
        let rest = phase.sub(&turns.mul(&self.two_pi, PRECISION, RM), PRECISION, RM);
        to_f64(&rest).rem_euclid(std::f64::consts::TAU)
    }
}

fn to_f64(x: &BigFloat) -> f64 {
    if x.is_zero() {
        return 0.0;
    }
    x.to_string().parse::<f64>().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_multiples_match_double_precision() {
        let a = EllipticAngle::from_half_trace(0.3).unwrap();
        assert!((a.k - 0.3f64.acos()).abs() < 1e-15);
        let m = 12345u128;
        let direct = ((m as f64) * 0.3f64.acos()).rem_euclid(std::f64::consts::TAU);
        assert!((a.reduced(m) - direct).abs() < 1e-9);
    }

    #[test]
    fn large_reduction_is_consistent_across_paths() {
        // (2^40)·k reduced through the big path must agree with summing
        // the reductions of 2^39 twice.
        let a = EllipticAngle::from_half_trace(-0.45).unwrap();
        let half = a.reduced(1u128 << 39);
        let full = a.reduced(1u128 << 40);
        let twice = (2.0 * half).rem_euclid(std::f64::consts::TAU);
        assert!((full - twice).abs() < 1e-12 || (full - twice).abs() > 6.28);
    }

    #[test]
    fn rejects_hyperbolic() {
        assert!(EllipticAngle::from_half_trace(1.0).is_err());
        assert!(EllipticAngle::from_half_trace(-1.5).is_err());
    }
}
