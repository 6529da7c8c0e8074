use serde::{Deserialize, Serialize};

use crate::cocycle::OperatorSpec;
use crate::error::{LabError, Result};

/// A solution `φ(n)` sampled at sites `0..=last_site()`, with running
/// sums of squares `Σ_{k=1}^{n} |φ(k)|²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    values: Vec<f64>,
    cumulative_sq: Vec<f64>,
    pub spec_label: String,
    pub energy: f64,
    pub theta: f64,
}

impl Trajectory {
    /// `values[n]` is `φ(n)`, starting at site 0.
    pub fn new(values: Vec<f64>, spec_label: String, energy: f64, theta: f64) -> Self {
        let mut cumulative_sq = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        cumulative_sq.push(0.0);
        for v in values.iter().skip(1) {
            acc += v * v;
            cumulative_sq.push(acc);
        }
        Trajectory {
            values,
            cumulative_sq,
            spec_label,
            energy,
            theta,
        }
    }

    /// Synthetic trajectory built from values at sites `1..`; `φ(0)` is zero.
    pub fn synthetic(from_site_one: &[f64]) -> Self {
        let mut values = Vec::with_capacity(from_site_one.len() + 1);
        values.push(0.0);
        values.extend_from_slice(from_site_one);
        Trajectory::new(values, "synthetic".into(), f64::NAN, 0.0)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, n: usize) -> f64 {
        self.values[n]
    }

    pub fn last_site(&self) -> usize {
        self.values.len() - 1
    }

    /// `Σ_{k=1}^{n} |φ(k)|²`.
    pub fn cumulative_sq(&self, n: usize) -> f64 {
        self.cumulative_sq[n]
    }

    /// `‖φ‖_L² = Σ_{n≤⌊L⌋} |φ(n)|² + (L-⌊L⌋)|φ(⌊L⌋+1)|²`.
    pub fn l_norm_sq(&self, l: f64) -> Result<f64> {
        if !(l >= 1.0) || !l.is_finite() {
            return Err(LabError::InvalidArgument(format!("L = {l} must be ≥ 1")));
        }
        let fl = l.floor();
        let n = fl as usize;
        if n + 1 > self.last_site() {
            return Err(LabError::InsufficientData(format!(
                "L = {l} needs site {} but trajectory ends at {}",
                n + 1,
                self.last_site()
            )));
        }
        let next = self.values[n + 1];
        Ok(self.cumulative_sq[n] + (l - fl) * next * next)
    }

    pub fn l_norm(&self, l: f64) -> Result<f64> {
        Ok(self.l_norm_sq(l)?.sqrt())
    }

    /// Multiplies every value by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let values = self.values.iter().map(|v| v * c).collect();
        Trajectory::new(values, self.spec_label.clone(), self.energy, self.theta)
    }

    /// Largest relative residual of the three-term recursion of `spec` over
    /// the interior sites `1..last_site()`.
    pub fn residual(&self, spec: &OperatorSpec) -> f64 {
        let mut worst: f64 = 0.0;
        for n in 1..self.last_site() {
            let k = n as u128;
            let (a_n, a_p, b_n) = (spec.a(k), spec.a(k - 1), spec.b(k));
            let (next, cur, prev) = (self.values[n + 1], self.values[n], self.values[n - 1]);
            let r = a_n * next + a_p * prev + b_n * cur - self.energy * cur;
            let scale = (a_n * next).abs()
                + (a_p * prev).abs()
                + (b_n * cur).abs()
                + (self.energy * cur).abs();
            if scale > 0.0 {
                worst = worst.max(r.abs() / scale);
            }
        }
        worst
    }
}

/// Free-standing form of [`Trajectory::l_norm`].
pub fn l_norm(f: &Trajectory, l: f64) -> Result<f64> {
    f.l_norm(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l_norm_examples() {
        let ones = Trajectory::synthetic(&[1.0; 10]);
        assert!((l_norm(&ones, 2.5).unwrap() - 2.5f64.sqrt()).abs() < 1e-15);
        assert!((l_norm(&ones, 3.0).unwrap() - 3f64.sqrt()).abs() < 1e-15);
        let left = l_norm(&ones, 3.0 - 1e-12).unwrap();
        assert!((left - 3f64.sqrt()).abs() < 1e-11);
        let lin: Vec<f64> = (1..=10).map(|n| n as f64).collect();
        let lin = Trajectory::synthetic(&lin);
        assert!((l_norm(&lin, 2.0).unwrap() - 5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn l_norm_insufficient_data() {
        let t = Trajectory::synthetic(&[1.0, 2.0, 3.0]);
        assert!(matches!(t.l_norm(3.0), Err(LabError::InsufficientData(_))));
        assert!(t.l_norm(2.9).is_ok());
        assert!(matches!(t.l_norm(0.5), Err(LabError::InvalidArgument(_))));
    }

    #[test]
    fn l_norm_is_monotone_and_continuous() {
        let vals: Vec<f64> = (1..200).map(|n| ((n as f64) * 0.37).sin() * (n as f64).sqrt()).collect();
        let t = Trajectory::synthetic(&vals);
        let mut prev = 0.0;
        let mut l = 1.0;
        while l < 198.0 {
            let v = t.l_norm(l).unwrap();
            assert!(v >= prev);
            assert!(v * v - prev * prev <= 0.01 * 200.0 + 1e-9);
            prev = v;
            l += 0.01;
        }
    }
}
