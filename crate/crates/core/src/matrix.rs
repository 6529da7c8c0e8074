//! Real 2×2 matrices: transfer steps, products and correction matrices.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Matrix2 {
    pub m11: f64,
    pub m12: f64,
    pub m21: f64,
    pub m22: f64,
}

/// Closed-form singular value decomposition `M = R(left) · diag(s1, s2) · R(right)`
/// where `R(x)` is the rotation by `x`. `s2` carries the sign of the determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd2 {
    pub s1: f64,
    pub s2: f64,
    pub left: f64,
    pub right: f64,
}

impl Svd2 {
    /// Unit vector `v` with `‖M v‖ = s1`.
    pub fn right_major(&self) -> [f64; 2] {
        [self.right.cos(), -self.right.sin()]
    }

    /// Unit vector `v` with `‖M v‖ = |s2|`.
    pub fn right_minor(&self) -> [f64; 2] {
        [self.right.sin(), self.right.cos()]
    }

    pub fn left_major(&self) -> [f64; 2] {
        [self.left.cos(), self.left.sin()]
    }

    pub fn left_minor(&self) -> [f64; 2] {
        [-self.left.sin(), self.left.cos()]
    }
}

impl Matrix2 {
    pub const IDENTITY: Matrix2 = Matrix2::new(1.0, 0.0, 0.0, 1.0);
    pub const ZERO: Matrix2 = Matrix2::new(0.0, 0.0, 0.0, 0.0);
    /// The nilpotent generator `[[0,1],[0,0]]`.
    pub const RAISE: Matrix2 = Matrix2::new(0.0, 1.0, 0.0, 0.0);
    /// `diag(1, -1)`.
    pub const REFLECT: Matrix2 = Matrix2::new(1.0, 0.0, 0.0, -1.0);
    /// `diag(0, 1)`.
    pub const LOWER_PROJECTION: Matrix2 = Matrix2::new(0.0, 0.0, 0.0, 1.0);

    pub const fn new(m11: f64, m12: f64, m21: f64, m22: f64) -> Self {
        Matrix2 { m11, m12, m21, m22 }
    }

    pub const fn diag(d1: f64, d2: f64) -> Self {
        Matrix2::new(d1, 0.0, 0.0, d2)
    }

    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    pub fn det(&self) -> f64 {
        self.m11 * self.m22 - self.m12 * self.m21
    }

    pub fn trace(&self) -> f64 {
        self.m11 + self.m22
    }

    pub fn transpose(&self) -> Self {
        Matrix2::new(self.m11, self.m21, self.m12, self.m22)
    }

    pub fn scale(&self, k: f64) -> Self {
        Matrix2::new(k * self.m11, k * self.m12, k * self.m21, k * self.m22)
    }

    /// Adjugate; equals the inverse when the determinant is one.
    pub fn adjugate(&self) -> Self {
        Matrix2::new(self.m22, -self.m12, -self.m21, self.m11)
    }

    pub fn inverse(&self) -> Option<Self> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        Some(self.adjugate().scale(1.0 / d))
    }

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.m11 * v[0] + self.m12 * v[1],
            self.m21 * v[0] + self.m22 * v[1],
        ]
    }

    pub fn col(&self, j: usize) -> [f64; 2] {
        match j {
            0 => [self.m11, self.m21],
            _ => [self.m12, self.m22],
        }
    }

    pub fn from_cols(c0: [f64; 2], c1: [f64; 2]) -> Self {
        Matrix2::new(c0[0], c1[0], c0[1], c1[1])
    }

    pub fn entries(&self) -> [f64; 4] {
        [self.m11, self.m12, self.m21, self.m22]
    }

    pub fn max_abs(&self) -> f64 {
        self.entries().iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|x| x.is_finite())
    }

    pub fn hs_norm(&self) -> f64 {
        self.hs_norm_sq().sqrt()
    }

    pub fn hs_norm_sq(&self) -> f64 {
        self.entries().iter().map(|x| x * x).sum()
    }

    pub fn svd(&self) -> Svd2 {
        let e = 0.5 * (self.m11 + self.m22);
        let f = 0.5 * (self.m11 - self.m22);
        let g = 0.5 * (self.m21 + self.m12);
        let h = 0.5 * (self.m21 - self.m12);
        let q = e.hypot(h);
        let r = f.hypot(g);
        let a1 = g.atan2(f);
        let a2 = h.atan2(e);
        Svd2 {
            s1: q + r,
            s2: q - r,
            left: 0.5 * (a2 + a1),
            right: 0.5 * (a2 - a1),
        }
    }

    /// Operator (spectral) norm, the largest singular value.
    pub fn norm(&self) -> f64 {
        let s = self.svd();
        s.s1
    }

    /// Distance between matrices measured in max-entry norm, relative to the
    /// largest entry of `other` (or absolute when `other` vanishes).
    pub fn max_rel_diff(&self, other: &Matrix2) -> f64 {
        let scale = other.max_abs().max(self.max_abs());
        let d = (*self - *other).max_abs();
        if scale == 0.0 {
            d
        } else {
            d / scale
        }
    }
}

impl Default for Matrix2 {
    fn default() -> Self {
        Matrix2::IDENTITY
    }
}

impl Mul for Matrix2 {
    type Output = Matrix2;

    fn mul(self, o: Matrix2) -> Matrix2 {
        Matrix2::new(
            self.m11 * o.m11 + self.m12 * o.m21,
            self.m11 * o.m12 + self.m12 * o.m22,
            self.m21 * o.m11 + self.m22 * o.m21,
            self.m21 * o.m12 + self.m22 * o.m22,
        )
    }
}

impl Add for Matrix2 {
    type Output = Matrix2;

    fn add(self, o: Matrix2) -> Matrix2 {
        Matrix2::new(
            self.m11 + o.m11,
            self.m12 + o.m12,
            self.m21 + o.m21,
            self.m22 + o.m22,
        )
    }
}

impl Sub for Matrix2 {
    type Output = Matrix2;

    fn sub(self, o: Matrix2) -> Matrix2 {
        Matrix2::new(
            self.m11 - o.m11,
            self.m12 - o.m12,
            self.m21 - o.m21,
            self.m22 - o.m22,
        )
    }
}

impl Neg for Matrix2 {
    type Output = Matrix2;

    fn neg(self) -> Matrix2 {
        self.scale(-1.0)
    }
}

/// A matrix carried as `exp(log_scale) · unit` so that products of many
/// expanding factors stay representable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledMatrix {
    pub unit: Matrix2,
    pub log_scale: f64,
}

impl ScaledMatrix {
    pub fn identity() -> Self {
        ScaledMatrix {
            unit: Matrix2::IDENTITY,
            log_scale: 0.0,
        }
    }

    /// Left-multiplies by `m` and renormalizes.
    pub fn push_left(&mut self, m: &Matrix2) {
        let p = *m * self.unit;
        let s = p.max_abs();
        if s > 0.0 && s.is_finite() {
            self.unit = p.scale(1.0 / s);
            self.log_scale += s.ln();
        } else {
            self.unit = p;
        }
    }

    pub fn log_norm(&self) -> f64 {
        self.unit.norm().ln() + self.log_scale
    }

    /// The represented matrix, or `None` when it is not representable.
    pub fn to_matrix(&self) -> Option<Matrix2> {
        let m = self.unit.scale(self.log_scale.exp());
        if m.is_finite() {
            Some(m)
        } else {
            None
        }
    }

    pub fn log_det(&self) -> f64 {
        self.unit.det().abs().ln() + 2.0 * self.log_scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_reconstructs() {
        let m = Matrix2::new(3.0, -1.5, 0.25, 7.0);
        let s = m.svd();
        let r = Matrix2::rotation(s.left) * Matrix2::diag(s.s1, s.s2) * Matrix2::rotation(s.right);
        assert!(r.max_rel_diff(&m) < 1e-14);
        assert!((s.s1 * s.s2 - m.det()).abs() < 1e-12);
        let v = m.apply(s.right_minor());
        assert!(((v[0] * v[0] + v[1] * v[1]).sqrt() - s.s2.abs()).abs() < 1e-12);
    }

    #[test]
    fn norm_handles_huge_entries() {
        let m = Matrix2::new(1e150, 2e150, -3e150, 1e149);
        let n = m.norm();
        assert!(n.is_finite());
        let reference = Matrix2::new(1.0, 2.0, -3.0, 0.1).norm() * 1e150;
        assert!((n - reference).abs() / reference < 1e-14);
    }

    #[test]
    fn norm_of_rotation_is_one() {
        assert!((Matrix2::rotation(0.7).norm() - 1.0).abs() < 1e-15);
        assert_eq!(Matrix2::ZERO.norm(), 0.0);
    }

    #[test]
    fn ill_conditioned_minor_vector_is_accurate() {
        // diag(1e8, 1e-8) rotated: the minor direction must come out clean.
        let m = Matrix2::rotation(0.3) * Matrix2::diag(1e8, 1e-8) * Matrix2::rotation(-1.1);
        let s = m.svd();
        let v = m.apply(s.right_minor());
        let len = (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!(len < 1e-7, "{len}");
    }

    #[test]
    fn scaled_product_tracks_log_norm() {
        let s = Matrix2::new(3.0, -1.0, 1.0, 0.0);
        let mut acc = ScaledMatrix::identity();
        let mut plain = Matrix2::IDENTITY;
        for _ in 0..20 {
            acc.push_left(&s);
            plain = s * plain;
        }
        assert!((acc.log_norm() - plain.norm().ln()).abs() < 1e-12);
        assert!(acc.to_matrix().unwrap().max_rel_diff(&plain) < 1e-13);
    }
}
