//! Random decaying perturbations: site laws, reproducible sampling and the
//! Monte Carlo checks of the maximal inequality and of random-series
//! convergence.

pub mod distribution;
pub mod inequality;
pub mod series;
pub mod stream;

use serde::{Deserialize, Serialize};

use crate::cocycle::OperatorSpec;
use crate::error::{invalid, Result};

pub use distribution::{Distribution, SiteLaw};
pub use inequality::{maximal_inequality_check, FDescriptor, InequalityReport};
pub use series::{series_convergence_check, SeriesReport, SeriesWeights};
use stream::{SiteStream, STREAM_A, STREAM_B};

pub const DEFAULT_EXPERIMENT_ID: &str = "jacobi-lab";
pub const DEFAULT_TRIALS: usize = 10_000;

fn default_delta() -> f64 {
    0.5
}

fn default_experiment_id() -> String {
    DEFAULT_EXPERIMENT_ID.to_string()
}

/// Independent zero-mean perturbations `b̃(n)` and optionally `ã(n)`, drawn
/// from separate streams so that the two are independent at every site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationModel {
    pub b: SiteLaw,
    #[serde(default)]
    pub a: Option<SiteLaw>,
    /// Required `δ < a/(a+ã) < 1/δ` for every site and support point.
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_experiment_id")]
    pub experiment_id: String,
}

impl PerturbationModel {
    pub fn zero() -> Self {
        PerturbationModel::diagonal(SiteLaw::zero())
    }

    pub fn diagonal(b: SiteLaw) -> Self {
        PerturbationModel {
            b,
            a: None,
            delta: default_delta(),
            experiment_id: default_experiment_id(),
        }
    }

    /// `b̃(n) = X(n)/n^s` with `X` uniform on `[-1, 1]`.
    pub fn uniform_decay(s: f64) -> Self {
        PerturbationModel::diagonal(SiteLaw::new(Distribution::Uniform { c: 1.0 }, s))
    }

    pub fn with_experiment_id(mut self, id: impl Into<String>) -> Self {
        self.experiment_id = id.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.b.validate()?;
        if let Some(a) = &self.a {
            a.validate()?;
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(format!("delta = {} must lie in (0, 1)", self.delta)));
        }
        Ok(())
    }

    /// Checks the `δ` condition against `spec` over the support of `ã(n)`,
    /// `1 ≤ n ≤ n_max`.
    pub fn check_delta(&self, spec: &OperatorSpec, n_max: u64) -> Result<()> {
        self.validate()?;
        let Some(law) = &self.a else {
            return Ok(());
        };
        for n in 1..=n_max {
            let a = spec.a(n as u128);
            let bound = law.bound(n);
            if bound == 0.0 {
                continue;
            }
            let lower = a - bound;
            if !(lower > 0.0)
                || !(a / (a + bound) > self.delta)
                || !(a / lower < 1.0 / self.delta)
            {
                return Err(invalid(format!(
                    "delta condition fails at site {n}: a = {a}, |ã| ≤ {bound}, delta = {}",
                    self.delta
                )));
            }
        }
        Ok(())
    }

    pub fn has_a(&self) -> bool {
        self.a.as_ref().is_some_and(|a| !a.is_zero())
    }

    pub fn is_zero(&self) -> bool {
        self.b.is_zero() && !self.has_a()
    }

    /// `⟨b̃(n)²⟩`.
    pub fn b_second(&self, n: u64) -> f64 {
        self.b.second_moment(n)
    }

    /// `⟨ã(n)⁴⟩`.
    pub fn a_fourth(&self, n: u64) -> f64 {
        self.a.as_ref().map_or(0.0, |a| a.fourth_moment(n))
    }

    pub fn a_second(&self, n: u64) -> f64 {
        self.a.as_ref().map_or(0.0, |a| a.second_moment(n))
    }

    /// Draws sites `1..=n_max` for one `ω`.
    pub fn sample(&self, seed: u64, n_max: u64) -> Realization {
        let draw = |law: &SiteLaw, stream: u64| -> Vec<f64> {
            let mut out = Vec::with_capacity(n_max as usize + 1);
            out.push(0.0);
            if law.is_zero() {
                out.resize(n_max as usize + 1, 0.0);
                return out;
            }
            let words = SiteStream::new(&self.experiment_id, seed, stream).words(1, n_max as usize);
            out.extend(words.iter().enumerate().map(|(i, w)| law.draw(i as u64 + 1, *w)));
            out
        };
        let b_tilde = draw(&self.b, STREAM_B);
        let a_tilde = match &self.a {
            Some(law) => draw(law, STREAM_A),
            None => vec![0.0; n_max as usize + 1],
        };
        Realization {
            seed,
            b_tilde,
            a_tilde,
            n_max,
        }
    }

    /// `b̃(n)` for a single site, identical to the value in [`sample`].
    ///
    /// [`sample`]: PerturbationModel::sample
    pub fn sample_b_site(&self, seed: u64, n: u64) -> f64 {
        let w = SiteStream::new(&self.experiment_id, seed, STREAM_B).word(n);
        self.b.draw(n, w)
    }
}

/// One draw `ω`: `b̃(n)`, `ã(n)` for `n ≤ n_max` (index `n`; index 0 is
/// zero). Sites beyond `n_max` are unperturbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub seed: u64,
    pub b_tilde: Vec<f64>,
    pub a_tilde: Vec<f64>,
    pub n_max: u64,
}

impl Realization {
    pub fn zeros(n_max: u64) -> Self {
        Realization {
            seed: 0,
            b_tilde: vec![0.0; n_max as usize + 1],
            a_tilde: vec![0.0; n_max as usize + 1],
            n_max,
        }
    }

    /// A realization carrying explicit values; `b[k]` belongs to site `k+1`.
    pub fn from_values(b: &[f64], a: Option<&[f64]>) -> Self {
        let n_max = b.len() as u64;
        let mut b_tilde = vec![0.0];
        b_tilde.extend_from_slice(b);
        let mut a_tilde = vec![0.0; b_tilde.len()];
        if let Some(a) = a {
            a_tilde[1..=a.len().min(b.len())].copy_from_slice(&a[..a.len().min(b.len())]);
        }
        Realization {
            seed: 0,
            b_tilde,
            a_tilde,
            n_max,
        }
    }

    pub fn b(&self, n: u64) -> f64 {
        if n == 0 || n > self.n_max {
            0.0
        } else {
            self.b_tilde[n as usize]
        }
    }

    /// `ã(n)`; `ã(0) = 0` so that `a(0) + ã(0) = 1`.
    pub fn a(&self, n: u64) -> f64 {
        if n == 0 || n > self.n_max {
            0.0
        } else {
            self.a_tilde[n as usize]
        }
    }

    pub fn has_a(&self) -> bool {
        self.a_tilde.iter().any(|x| *x != 0.0)
    }

    pub fn is_zero(&self) -> bool {
        !self.has_a() && self.b_tilde.iter().all(|x| *x == 0.0)
    }
}
