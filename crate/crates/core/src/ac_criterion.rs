//! Cesàro averages of squared transfer-matrix norms and the moment-weighted
//! series that decides whether an energy survives a random decaying
//! perturbation.

use serde::{Deserialize, Serialize};

use crate::cocycle::{OperatorSpec, DEFAULT_GROWTH_FLOOR};
use crate::error::{invalid, Result};
use crate::matrix::ScaledMatrix;
use crate::randpert::PerturbationModel;
use crate::stats::DecadeVerdict;

/// Orbits with `max t(n) ≤ TAU_BOUND` are flagged as bounded.
pub const TAU_BOUND: f64 = 1e3;

/// Largest log-average still reported as a plain number.
const LOG_REPRESENTABLE: f64 = 690.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CesaroReport {
    pub energy: f64,
    pub n_grid: Vec<u64>,
    /// `(1/N)·Σ_{n≤N} t(n)²`; `+∞` where saturated.
    pub averages: Vec<f64>,
    pub log_averages: Vec<f64>,
    /// Minimum of the averages over the last decade of the grid.
    pub liminf_proxy: f64,
    pub log_liminf_proxy: f64,
    /// `max_{n≤max N} t(n) ≤ TAU_BOUND`.
    pub bounded_flag: bool,
    pub log_max_norm: f64,
    /// Some average exceeded the representable range.
    pub saturated: bool,
}

/// `N_j = ⌈2^{j/2}⌉` for `j = 2..=40`, duplicates removed.
pub fn default_n_grid() -> Vec<u64> {
    let mut g: Vec<u64> = (2..=40).map(|j| 2f64.powf(j as f64 / 2.0).ceil() as u64).collect();
    g.dedup();
    g
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn cesaro_scan(spec: &OperatorSpec, energy: f64, n_grid: &[u64]) -> Result<CesaroReport> {
    if n_grid.is_empty() || n_grid[0] == 0 || n_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("N grid must be nonempty, positive and increasing"));
    }
    if !energy.is_finite() {
        return Err(invalid("energy must be finite"));
    }
    let n_max = *n_grid.last().unwrap();
    spec.check_growth(n_max, DEFAULT_GROWTH_FLOOR)?;

    let mut acc = ScaledMatrix::identity();
    let mut log_sum = f64::NEG_INFINITY;
    let mut log_max: f64 = f64::NEG_INFINITY;
    let mut log_averages = Vec::with_capacity(n_grid.len());
    let mut next = 0;
    for n in 1..=n_max {
        acc.push_left(&spec.step(energy, n as u128));
        let lt = acc.log_norm();
        log_max = log_max.max(lt);
        log_sum = log_add(log_sum, 2.0 * lt);
        if n == n_grid[next] {
            log_averages.push(log_sum - (n as f64).ln());
            next += 1;
        }
    }
    let saturated = log_averages.iter().any(|l| *l > LOG_REPRESENTABLE);
    let averages: Vec<f64> = log_averages
        .iter()
        .map(|l| if *l > LOG_REPRESENTABLE { f64::INFINITY } else { l.exp() })
        .collect();
    let start = n_max as f64 / 10.0;
    let log_liminf_proxy = n_grid
        .iter()
        .zip(&log_averages)
        .filter(|(n, _)| **n as f64 >= start)
        .map(|(_, l)| *l)
        .fold(f64::INFINITY, f64::min);
    Ok(CesaroReport {
        energy,
        n_grid: n_grid.to_vec(),
        averages,
        log_averages,
        liminf_proxy: if log_liminf_proxy > LOG_REPRESENTABLE {
            f64::INFINITY
        } else {
            log_liminf_proxy.exp()
        },
        log_liminf_proxy,
        bounded_flag: log_max <= TAU_BOUND.ln(),
        log_max_norm: log_max,
        saturated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaReport {
    pub energy: f64,
    pub member: bool,
    pub partial_sum: f64,
    pub verdict: DecadeVerdict,
}

/// Partial sum of `Σ (⟨ã⁴⟩^{1/2} + ⟨b̃²⟩)·((a(n)+1)·t(n))⁴` with the decade
/// convergence verdict.
pub fn gamma_membership(
    spec: &OperatorSpec,
    model: &PerturbationModel,
    energy: f64,
    n_max: u64,
) -> Result<GammaReport> {
    model.validate()?;
    if !energy.is_finite() {
        return Err(invalid("energy must be finite"));
    }
    let mut acc = ScaledMatrix::identity();
    let mut terms = Vec::with_capacity(n_max as usize);
    for n in 1..=n_max {
        acc.push_left(&spec.step(energy, n as u128));
        let weight = model.a_fourth(n).sqrt() + model.b_second(n);
        let term = if weight == 0.0 {
            0.0
        } else {
            let log_term = weight.ln() + 4.0 * ((spec.a(n as u128) + 1.0).ln() + acc.log_norm());
            log_term.exp()
        };
        terms.push(term);
    }
    let verdict = DecadeVerdict::from_slice(&terms);
    Ok(GammaReport {
        energy,
        member: verdict.convergent,
        partial_sum: verdict.partial_sum,
        verdict,
    })
}
