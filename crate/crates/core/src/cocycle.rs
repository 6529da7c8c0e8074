//! Jacobi difference equation and its transfer-matrix cocycle.
//!
//! For `a(n)φ(n+1) + a(n-1)φ(n-1) + b(n)φ(n) = Eφ(n)` the one-step matrix
//! `S(n) = [[(E-b(n))/a(n), -a(n-1)/a(n)], [1, 0]]` maps `(φ(n), φ(n-1))` to
//! `(φ(n+1), φ(n))`, and `T(n) = S(n)···S(1)`. Site `0` always has `a(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::matrix::{Matrix2, ScaledMatrix};
use crate::phase::EllipticAngle;
use crate::trajectory::Trajectory;

/// Entries beyond this magnitude are reported as overflow.
pub const OVERFLOW_LIMIT: f64 = 1e300;

pub const DEFAULT_A_MIN: f64 = 1e-6;

/// Minimum admissible value of `(1/L)·Σ_{n≤L} 1/a(n)`.
pub const DEFAULT_GROWTH_FLOOR: f64 = 1e-3;

/// Generator of the Jacobi coefficients `a(n) > 0`, `b(n)` for `n ≥ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Coefficients {
    /// `a ≡ 1`, `b ≡ 0`.
    Free,
    /// `a(n) = a[(n-1) mod p]`, `b(n) = b[(n-1) mod p]`.
    Periodic { a: Vec<f64>, b: Vec<f64> },
    /// Explicit values for `n = 1..=len`, then constant tails.
    Explicit {
        a: Vec<f64>,
        b: Vec<f64>,
        #[serde(default = "one")]
        tail_a: f64,
        #[serde(default)]
        tail_b: f64,
    },
    /// `a ≡ 1`, `b(n) = v` when `n = γ^j` for some `j ≥ 1`, `0` otherwise.
    Sparse { v: f64, gamma: u64 },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub coefficients: Coefficients,
    pub label: String,
    pub a_min: f64,
}

impl OperatorSpec {
    pub fn new(coefficients: Coefficients, label: impl Into<String>) -> Result<Self> {
        let spec = OperatorSpec {
            coefficients,
            label: label.into(),
            a_min: DEFAULT_A_MIN,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn free() -> Self {
        OperatorSpec {
            coefficients: Coefficients::Free,
            label: "free".into(),
            a_min: DEFAULT_A_MIN,
        }
    }

    pub fn schrodinger(potential: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        let a = vec![1.0; potential.len()];
        Self::new(
            Coefficients::Explicit {
                a,
                b: potential,
                tail_a: 1.0,
                tail_b: 0.0,
            },
            label,
        )
    }

    pub fn with_a_min(mut self, a_min: f64) -> Result<Self> {
        self.a_min = a_min;
        self.validate()?;
        Ok(self)
    }

    /// Checks finiteness, `a(n) ≥ a_min` over every stored value and the
    /// sparse parameters.
    pub fn validate(&self) -> Result<()> {
        if !(self.a_min > 0.0) {
            return Err(invalid("a_min must be positive"));
        }
        let check_a = |a: &[f64]| -> Result<()> {
            for (i, &x) in a.iter().enumerate() {
                if !x.is_finite() || x < self.a_min {
                    return Err(invalid(format!("a({}) = {x} is below a_min", i + 1)));
                }
            }
            Ok(())
        };
        let check_b = |b: &[f64]| -> Result<()> {
            if b.iter().any(|x| !x.is_finite()) {
                return Err(invalid("non-finite b(n)"));
            }
            Ok(())
        };
        match &self.coefficients {
            Coefficients::Free => Ok(()),
            Coefficients::Periodic { a, b } => {
                if a.is_empty() || a.len() != b.len() {
                    return Err(invalid("periodic a and b must have equal nonzero length"));
                }
                check_a(a)?;
                check_b(b)
            }
            Coefficients::Explicit {
                a,
                b,
                tail_a,
                tail_b,
            } => {
                if a.len() != b.len() {
                    return Err(invalid("explicit a and b must have equal length"));
                }
                check_a(a)?;
                check_a(&[*tail_a])?;
                check_b(b)?;
                check_b(&[*tail_b])
            }
            Coefficients::Sparse { v, gamma } => {
                if *gamma < 2 {
                    return Err(invalid("sparse gamma must be at least 2"));
                }
                if !v.is_finite() {
                    return Err(invalid("sparse height must be finite"));
                }
                Ok(())
            }
        }
    }

    /// Off-diagonal coefficient; `a(0) = 1`.
    pub fn a(&self, n: u128) -> f64 {
        if n == 0 {
            return 1.0;
        }
        match &self.coefficients {
            Coefficients::Free | Coefficients::Sparse { .. } => 1.0,
            Coefficients::Periodic { a, .. } => a[((n - 1) % a.len() as u128) as usize],
            Coefficients::Explicit { a, tail_a, .. } => {
                if n <= a.len() as u128 {
                    a[n as usize - 1]
                } else {
                    *tail_a
                }
            }
        }
    }

    pub fn b(&self, n: u128) -> f64 {
        if n == 0 {
            return 0.0;
        }
        match &self.coefficients {
            Coefficients::Free => 0.0,
            Coefficients::Periodic { b, .. } => b[((n - 1) % b.len() as u128) as usize],
            Coefficients::Explicit { b, tail_b, .. } => {
                if n <= b.len() as u128 {
                    b[n as usize - 1]
                } else {
                    *tail_b
                }
            }
            Coefficients::Sparse { v, gamma } => {
                if is_power_of(n, *gamma as u128) {
                    *v
                } else {
                    0.0
                }
            }
        }
    }

    /// True when `a ≡ 1` (discrete Schrödinger operator).
    pub fn is_schrodinger(&self) -> bool {
        match &self.coefficients {
            Coefficients::Free | Coefficients::Sparse { .. } => true,
            Coefficients::Periodic { a, .. } => a.iter().all(|&x| x == 1.0),
            Coefficients::Explicit { a, tail_a, .. } => {
                *tail_a == 1.0 && a.iter().all(|&x| x == 1.0)
            }
        }
    }

    /// `(1/L)·Σ_{n≤L} 1/a(n)`, the finite-truncation stand-in for the growth
    /// restriction on the off-diagonal.
    pub fn inverse_a_average(&self, l: u64) -> f64 {
        if l == 0 {
            return 0.0;
        }
        let s: f64 = (1..=l as u128).map(|n| 1.0 / self.a(n)).sum();
        s / l as f64
    }

    pub fn check_growth(&self, l: u64, floor: f64) -> Result<()> {
        let avg = self.inverse_a_average(l);
        if avg >= floor {
            Ok(())
        } else {
            Err(invalid(format!(
                "growth check failed: inverse-a average {avg} < {floor} at L = {l}"
            )))
        }
    }

    pub fn step(&self, energy: f64, n: u128) -> Matrix2 {
        step_unchecked(energy, self.b(n), self.a(n), self.a(n - 1))
    }
}

/// True when `n = base^j` for some `j ≥ 1`.
pub fn is_power_of(mut n: u128, base: u128) -> bool {
    if n < base {
        return false;
    }
    if n <= u64::MAX as u128 {
        let (mut m, b) = (n as u64, base as u64);
        while m % b == 0 {
            m /= b;
        }
        return m == 1;
    }
    while n % base == 0 {
        n /= base;
    }
    n == 1
}

fn check_energy(energy: f64) -> Result<()> {
    if energy.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("energy {energy} is not finite")))
    }
}

#[inline]
pub(crate) fn step_unchecked(energy: f64, b_n: f64, a_n: f64, a_prev: f64) -> Matrix2 {
    Matrix2::new((energy - b_n) / a_n, -a_prev / a_n, 1.0, 0.0)
}

/// One-step transfer matrix `[[(E-b)/a_n, -a_prev/a_n], [1, 0]]`.
pub fn single_step(energy: f64, b_n: f64, a_n: f64, a_prev: f64) -> Result<Matrix2> {
    check_energy(energy)?;
    if !(a_n > 0.0) || !(a_prev > 0.0) {
        return Err(invalid(format!(
            "off-diagonal entries must be positive (a_n = {a_n}, a_prev = {a_prev})"
        )));
    }
    if !b_n.is_finite() {
        return Err(invalid("b_n must be finite"));
    }
    Ok(step_unchecked(energy, b_n, a_n, a_prev))
}

/// Iterator over `(n, T(n))` for `n = 1, 2, …`, stopping with an overflow
/// error at the first site whose product leaves the representable range.
pub struct CocycleWalk<'a> {
    spec: &'a OperatorSpec,
    energy: f64,
    n: u128,
    product: Matrix2,
    failed: bool,
}

impl<'a> CocycleWalk<'a> {
    pub fn new(spec: &'a OperatorSpec, energy: f64) -> Result<Self> {
        check_energy(energy)?;
        Ok(CocycleWalk {
            spec,
            energy,
            n: 0,
            product: Matrix2::IDENTITY,
            failed: false,
        })
    }
}

impl Iterator for CocycleWalk<'_> {
    type Item = Result<(u128, Matrix2)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        self.n += 1;
        self.product = self.spec.step(self.energy, self.n) * self.product;
        if !self.product.is_finite() || self.product.max_abs() > OVERFLOW_LIMIT {
            self.failed = true;
            return Some(Err(LabError::Overflow { site: self.n }));
        }
        Some(Ok((self.n, self.product)))
    }
}

/// `T(n) = S(n)···S(1)`.
pub fn transfer_product(spec: &OperatorSpec, energy: f64, n: u128) -> Result<Matrix2> {
    if n == 0 {
        return Err(invalid("transfer_product needs n ≥ 1"));
    }
    let mut last = Matrix2::IDENTITY;
    for item in CocycleWalk::new(spec, energy)? {
        let (k, t) = item?;
        last = t;
        if k == n {
            break;
        }
    }
    Ok(last)
}

/// The running norms `t(k) = ‖T(k)‖` for `k = 1..=n` (index `k-1`).
pub fn transfer_norms(spec: &OperatorSpec, energy: f64, n: u128) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n as usize);
    for item in CocycleWalk::new(spec, energy)?.take(n as usize) {
        out.push(item?.1.norm());
    }
    Ok(out)
}

/// Log-scaled product mode: never overflows; norms up to `e^(10^300)` stay
/// representable through the log scale.
pub fn transfer_product_scaled(spec: &OperatorSpec, energy: f64, n: u128) -> Result<ScaledMatrix> {
    check_energy(energy)?;
    let mut acc = ScaledMatrix::identity();
    for k in 1..=n {
        acc.push_left(&spec.step(energy, k));
    }
    Ok(acc)
}

/// `ln t(k)` for `k = 1..=n`, computed in log-scaled mode.
pub fn log_transfer_norms(spec: &OperatorSpec, energy: f64, n: u128) -> Result<Vec<f64>> {
    check_energy(energy)?;
    let mut acc = ScaledMatrix::identity();
    let mut out = Vec::with_capacity(n as usize);
    for k in 1..=n {
        acc.push_left(&spec.step(energy, k));
        out.push(acc.log_norm());
    }
    Ok(out)
}

/// Largest tolerated `|det S - 1|` for constant-block powers.
pub const UNIMODULAR_TOL: f64 = 1e-12;

/// Powers of a fixed unimodular block, `S^m` for `m < 2^128`.
///
/// Elliptic blocks (`|tr S| < 2`) use the Chebyshev form
/// `S^m = cos(mk)·I + sin(mk)/sin(k)·(S - cos(k)·I)` with `tr S = 2cos k`
/// and the phase `mk` reduced in extended precision. Parabolic blocks use
/// `S^m = (±1)^m (I + mN)` with `N` nilpotent; hyperbolic ones fall back to
/// binary powering.
#[derive(Debug, Clone)]
pub struct ConstPower {
    block: Matrix2,
    kind: BlockKind,
}

#[derive(Debug, Clone)]
enum BlockKind {
    Elliptic {
        angle: EllipticAngle,
        half_trace: f64,
        sin_k: f64,
    },
    Parabolic {
        sign: f64,
        nilpotent: Matrix2,
    },
    Hyperbolic,
}

impl ConstPower {
    pub fn new(block: Matrix2) -> Result<Self> {
        if !block.is_finite() {
            return Err(invalid("block must be finite"));
        }
        if (block.det() - 1.0).abs() > UNIMODULAR_TOL {
            return Err(invalid(format!(
                "block determinant {} is not 1",
                block.det()
            )));
        }
        let t = block.trace();
        let kind = if t.abs() < 2.0 {
            let half = 0.5 * t;
            BlockKind::Elliptic {
                angle: EllipticAngle::from_half_trace(half)?,
                half_trace: half,
                sin_k: ((1.0 - half) * (1.0 + half)).sqrt(),
            }
        } else if t.abs() == 2.0 {
            let sign = t.signum();
            BlockKind::Parabolic {
                sign,
                nilpotent: block.scale(sign) - Matrix2::IDENTITY,
            }
        } else {
            BlockKind::Hyperbolic
        };
        Ok(ConstPower { block, kind })
    }

    pub fn block(&self) -> &Matrix2 {
        &self.block
    }

    pub fn pow(&self, m: u128) -> Result<Matrix2> {
        if m == 0 {
            return Ok(Matrix2::IDENTITY);
        }
        match &self.kind {
            BlockKind::Elliptic {
                angle,
                half_trace,
                sin_k,
            } => {
                let (s, c) = angle.reduced(m).sin_cos();
                let shifted = self.block - Matrix2::IDENTITY.scale(*half_trace);
                Ok(Matrix2::IDENTITY.scale(c) + shifted.scale(s / sin_k))
            }
            BlockKind::Parabolic { sign, nilpotent } => {
                let parity = if *sign < 0.0 && m % 2 == 1 { -1.0 } else { 1.0 };
                Ok((Matrix2::IDENTITY + nilpotent.scale(m as f64)).scale(parity))
            }
            BlockKind::Hyperbolic => pow_by_squaring(&self.block, m),
        }
    }

    /// `S^{-m}`; the inverse of a unimodular block is its adjugate.
    pub fn pow_inverse(&self, m: u128) -> Result<Matrix2> {
        Ok(self.pow(m)?.adjugate())
    }
}

/// `S^m` for a unimodular `S` in `O(log m)`.
pub fn fast_const_power(block: &Matrix2, m: u128) -> Result<Matrix2> {
    ConstPower::new(*block)?.pow(m)
}

/// Plain binary powering, with overflow reported at the exponent reached.
pub fn pow_by_squaring(block: &Matrix2, mut m: u128) -> Result<Matrix2> {
    let mut result = Matrix2::IDENTITY;
    let mut base = *block;
    let mut done: u128 = 0;
    let mut bit: u128 = 1;
    while m > 0 {
        if m & 1 == 1 {
            result = base * result;
            done += bit;
            if !result.is_finite() || result.max_abs() > OVERFLOW_LIMIT {
                return Err(LabError::Overflow { site: done });
            }
        }
        m >>= 1;
        if m > 0 {
            base = base * base;
            bit <<= 1;
            if !base.is_finite() {
                return Err(LabError::Overflow { site: bit });
            }
        }
    }
    Ok(result)
}

/// Solves the difference equation forward from `(φ(0), φ(1))`; the
/// trajectory holds sites `0..=n_max + 1` so the equation is satisfied for
/// `1 ≤ n ≤ n_max`.
pub fn solve_forward(
    spec: &OperatorSpec,
    energy: f64,
    phi0: f64,
    phi1: f64,
    n_max: u64,
) -> Result<Trajectory> {
    check_energy(energy)?;
    if phi0 == 0.0 && phi1 == 0.0 {
        return Err(invalid("initial data must not vanish"));
    }
    if !phi0.is_finite() || !phi1.is_finite() {
        return Err(invalid("initial data must be finite"));
    }
    let mut values = Vec::with_capacity(n_max as usize + 2);
    values.push(phi0);
    values.push(phi1);
    let mut a_prev = spec.a(0);
    for n in 1..=n_max as u128 {
        let a_n = spec.a(n);
        let cur = values[n as usize];
        let prev = values[n as usize - 1];
        let next = ((energy - spec.b(n)) * cur - a_prev * prev) / a_n;
        if !next.is_finite() || next.abs() > OVERFLOW_LIMIT {
            return Err(LabError::Overflow { site: n + 1 });
        }
        values.push(next);
        a_prev = a_n;
    }
    let theta = boundary_angle(phi0, phi1);
    Ok(Trajectory::new(values, spec.label.clone(), energy, theta))
}

/// The angle `θ ∈ [-π/2, π/2)` with `(φ(0), φ(1)) ∝ (-sin θ, cos θ)`.
pub fn boundary_angle(phi0: f64, phi1: f64) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    let mut t = (-phi0).atan2(phi1);
    while t >= FRAC_PI_2 {
        t -= PI;
    }
    while t < -FRAC_PI_2 {
        t += PI;
    }
    t
}
