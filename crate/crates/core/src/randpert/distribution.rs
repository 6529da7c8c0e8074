//! Zero-mean site distributions with closed-form moments up to order four.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Result};

use super::stream::{open_unit_interval, unit_interval};

/// Symmetric law of the unscaled variable `X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Distribution {
    Zero,
    /// Uniform on `[-c, c]`.
    Uniform { c: f64 },
    /// `±c` with equal probability.
    Rademacher { c: f64 },
    /// `σ·Z` with `Z` standard normal conditioned on `|Z| ≤ t`.
    TruncatedGaussian { sigma: f64, t: f64 },
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Distribution::Zero => true,
            Distribution::Uniform { c } | Distribution::Rademacher { c } => c.is_finite() && *c >= 0.0,
            Distribution::TruncatedGaussian { sigma, t } => {
                sigma.is_finite() && *sigma >= 0.0 && t.is_finite() && *t > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid distribution parameters: {self:?}")))
        }
    }

    /// `⟨X⟩`; all catalog laws are symmetric.
    pub fn mean(&self) -> f64 {
        0.0
    }

    pub fn second_moment(&self) -> f64 {
        match self {
            Distribution::Zero => 0.0,
            Distribution::Uniform { c } => c * c / 3.0,
            Distribution::Rademacher { c } => c * c,
            Distribution::TruncatedGaussian { sigma, t } => {
                let (pdf, z) = gauss_mass(*t);
                sigma * sigma * (1.0 - 2.0 * t * pdf / z)
            }
        }
    }

    pub fn fourth_moment(&self) -> f64 {
        match self {
            Distribution::Zero => 0.0,
            Distribution::Uniform { c } => c.powi(4) / 5.0,
            Distribution::Rademacher { c } => c.powi(4),
            Distribution::TruncatedGaussian { sigma, t } => {
                let (pdf, z) = gauss_mass(*t);
                sigma.powi(4) * (3.0 - (2.0 * t.powi(3) + 6.0 * t) * pdf / z)
            }
        }
    }

    /// `sup |X|` over the support.
    pub fn bound(&self) -> f64 {
        match self {
            Distribution::Zero => 0.0,
            Distribution::Uniform { c } | Distribution::Rademacher { c } => *c,
            Distribution::TruncatedGaussian { sigma, t } => sigma * t,
        }
    }

    /// Number of support points when finite.
    pub fn support_size(&self) -> Option<usize> {
        match self {
            Distribution::Zero => Some(1),
            Distribution::Rademacher { c } if *c == 0.0 => Some(1),
            Distribution::Rademacher { .. } => Some(2),
            Distribution::Uniform { c } if *c == 0.0 => Some(1),
            _ => None,
        }
    }

    /// Maps one uniform 64-bit word to a draw.
    pub fn draw(&self, word: u64) -> f64 {
        match self {
            Distribution::Zero => 0.0,
            Distribution::Uniform { c } => c * (2.0 * unit_interval(word) - 1.0),
            Distribution::Rademacher { c } => {
                if word >> 63 == 1 {
                    *c
                } else {
                    -c
                }
            }
            Distribution::TruncatedGaussian { sigma, t } => {
                let n = Normal::standard();
                let lo = n.cdf(-t);
                let hi = n.cdf(*t);
                let p = lo + open_unit_interval(word) * (hi - lo);
                sigma * n.inverse_cdf(p).clamp(-t, *t)
            }
        }
    }
}

/// `(φ(t), 2Φ(t) - 1)` for the standard normal.
fn gauss_mass(t: f64) -> (f64, f64) {
    let n = Normal::standard();
    let pdf = (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (pdf, 2.0 * n.cdf(t) - 1.0)
}

/// A site law `X·n^{-s}`, optionally restricted to a window of sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteLaw {
    pub dist: Distribution,
    #[serde(default)]
    pub s: f64,
    /// Inclusive `[first, last]`; sites outside are zero.
    #[serde(default)]
    pub window: Option<(u64, u64)>,
}

impl SiteLaw {
    pub fn new(dist: Distribution, s: f64) -> Self {
        SiteLaw { dist, s, window: None }
    }

    pub fn zero() -> Self {
        SiteLaw::new(Distribution::Zero, 0.0)
    }

    pub fn with_window(mut self, first: u64, last: u64) -> Self {
        self.window = Some((first, last));
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dist.validate()?;
        if !self.s.is_finite() {
            return Err(invalid("decay exponent s must be finite"));
        }
        if let Some((a, b)) = self.window {
            if a == 0 || a > b {
                return Err(invalid("site window must satisfy 1 ≤ first ≤ last"));
            }
        }
        Ok(())
    }

    pub fn active(&self, n: u64) -> bool {
        n >= 1
            && match self.window {
                Some((a, b)) => n >= a && n <= b,
                None => true,
            }
    }

    pub fn is_zero(&self) -> bool {
        self.dist.bound() == 0.0
    }

    /// `n^{-s}` on active sites, zero elsewhere.
    pub fn scale(&self, n: u64) -> f64 {
        if self.active(n) {
            (n as f64).powf(-self.s)
        } else {
            0.0
        }
    }

    pub fn second_moment(&self, n: u64) -> f64 {
        let k = self.scale(n);
        self.dist.second_moment() * k * k
    }

    pub fn fourth_moment(&self, n: u64) -> f64 {
        let k = self.scale(n);
        self.dist.fourth_moment() * k.powi(4)
    }

    pub fn bound(&self, n: u64) -> f64 {
        self.dist.bound() * self.scale(n)
    }

    pub fn draw(&self, n: u64, word: u64) -> f64 {
        let k = self.scale(n);
        if k == 0.0 {
            0.0
        } else {
            self.dist.draw(word) * k
        }
    }
}
