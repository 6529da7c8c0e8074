//! Stability of singular spectral exponents under random decaying
//! perturbations: the weights `r(n) = |φ₁(n)|⁴n^{2η̃} + |φ₂(n)|⁴`, the
//! membership test for `Σ r(n)⟨b̃(n)²⟩ < ∞`, and ensemble comparisons of the
//! perturbed pair `ψ₁, ψ₂` with `φ₁, φ₂`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocycle::OperatorSpec;
use crate::error::{invalid, LabError, Result};
use crate::randpert::PerturbationModel;
use crate::stats::{self, DecadeVerdict};
use crate::subordinacy::{self, analyze_pair, solve_pair, THETA_GRID};
use crate::trajectory::Trajectory;
use crate::variation::{amplitude_stream, perturbed_solutions, Branch, GeneratorTable};

pub const ETA_GRID_POINTS: usize = 16;
/// Terminal ratio band.
pub const RATIO_BAND: (f64, f64) = (0.8, 1.25);
pub const SANDWICH_EPS: f64 = 0.1;

/// `r(n)` for `n = 1..=n_max`; entry `k` belongs to site `k + 1`.
pub fn r_sequence(
    phi1: &Trajectory,
    phi2: &Trajectory,
    eta_tilde: f64,
    n_max: u64,
) -> Result<Vec<f64>> {
    if phi1.theta.is_nan() || phi2.theta.is_nan() {
        return Err(invalid("trajectories carry no boundary angle"));
    }
    if !(eta_tilde > 0.0) || !eta_tilde.is_finite() {
        return Err(invalid(format!("η̃ = {eta_tilde} must be positive")));
    }
    let last = phi1.last_site().min(phi2.last_site()) as u64;
    if n_max > last {
        return Err(LabError::InsufficientData(format!(
            "r(n) needs site {n_max} but the trajectories end at {last}"
        )));
    }
    Ok((1..=n_max as usize)
        .map(|n| {
            let (p1, p2) = (phi1.value(n), phi2.value(n));
            let p1 = p1 * p1;
            let p2 = p2 * p2;
            p1 * p1 * (n as f64).powf(2.0 * eta_tilde) + p2 * p2
        })
        .collect())
}

/// `η + 0.01·200^{i/16}`, `i = 1..=16`: log-spaced in `(η + 0.01, η + 2]`.
pub fn eta_tilde_grid(eta: f64) -> Vec<f64> {
    (1..=ETA_GRID_POINTS)
        .map(|i| eta + 0.01 * 200f64.powf(i as f64 / ETA_GRID_POINTS as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipPoint {
    pub eta_tilde: f64,
    pub partial_sum: f64,
    pub convergent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaMembership {
    pub member: bool,
    /// Smallest grid value whose series passes the decade test.
    pub eta_tilde: Option<f64>,
    pub scan: Vec<MembershipPoint>,
}

/// Scans `η̃` over `grid` for a convergent `Σ_{n≤n_max} r_η̃(n)·m₂(n)`, with
/// `m₂(n) = ⟨b̃(n)²⟩` from the model.
pub fn lambda_membership(
    phi1: &Trajectory,
    phi2: &Trajectory,
    model: &PerturbationModel,
    grid: &[f64],
    n_max: u64,
) -> Result<LambdaMembership> {
    model.validate()?;
    let m2: Vec<f64> = (1..=n_max).map(|n| model.b_second(n)).collect();
    lambda_membership_weighted(phi1, phi2, &m2, grid)
}

/// As [`lambda_membership`], with `second_moments[k] = ⟨b̃(k+1)²⟩`.
pub fn lambda_membership_weighted(
    phi1: &Trajectory,
    phi2: &Trajectory,
    second_moments: &[f64],
    grid: &[f64],
) -> Result<LambdaMembership> {
    if grid.is_empty() {
        return Err(invalid("η̃ grid is empty"));
    }
    let n_max = second_moments.len() as u64;
    let mut scan = Vec::with_capacity(grid.len());
    for &eta_tilde in grid {
        let r = r_sequence(phi1, phi2, eta_tilde, n_max)?;
        let terms: Vec<f64> = r.iter().zip(second_moments).map(|(r, m)| r * m).collect();
        let v = DecadeVerdict::from_slice(&terms);
        scan.push(MembershipPoint {
            eta_tilde,
            partial_sum: v.partial_sum,
            convergent: v.convergent,
        });
    }
    let eta_tilde = scan.iter().find(|p| p.convergent).map(|p| p.eta_tilde);
    Ok(LambdaMembership {
        member: eta_tilde.is_some(),
        eta_tilde,
        scan,
    })
}

/// Fitted `L`-norm growth exponents against
/// `1 - 1/(2β) - ε ≤ exp₁ ≤ 1/2 + ε` and `1/2 - ε ≤ exp₂ ≤ 1/(2β) + ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandwichCheck {
    pub beta: f64,
    pub eps: f64,
    pub exponent_phi1: f64,
    pub exponent_phi2: f64,
    pub holds_phi1: bool,
    pub holds_phi2: bool,
}

impl SandwichCheck {
    pub fn new(beta: f64, exponent_phi1: f64, exponent_phi2: f64, eps: f64) -> Self {
        let inv = if beta > 0.0 { 0.5 / beta } else { f64::INFINITY };
        let holds_phi1 = 1.0 - inv - eps <= exponent_phi1 && exponent_phi1 <= 0.5 + eps;
        let holds_phi2 = 0.5 - eps <= exponent_phi2 && exponent_phi2 <= inv + eps;
        SandwichCheck {
            beta,
            eps,
            exponent_phi1,
            exponent_phi2,
            holds_phi1,
            holds_phi2,
        }
    }

    pub fn holds(&self) -> bool {
        self.holds_phi1 && self.holds_phi2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundChainPoint {
    pub l: u64,
    pub lhs: f64,
    pub rhs: f64,
}

/// Evaluates both sides of
/// `‖gφ₂‖_L/‖φ₁‖_L ≤ ‖gφ₂‖_{L₀}/‖φ₁‖_L + Dε + Dε·(Σ_{L₀<n<L}(n^{-2η̃} - (n+1)^{-2η̃})n^{2η})^{1/2}`
/// where `g(n)` is the second amplitude entering `ψ₁(n)`,
/// `ε = sup_{n>L₀}|g(n)|n^{η̃}` and
/// `D = max_{L₀<n≤L_max} ‖φ₂‖_n/(n^η‖φ₁‖_n)`.
///
/// `g[n]` is indexed by site. Grid values are floored to integers.
pub fn bound_chain(
    phi1: &Trajectory,
    phi2: &Trajectory,
    g: &[f64],
    eta: f64,
    eta_tilde: f64,
    l0: u64,
    l_grid: &[f64],
) -> Result<Vec<BoundChainPoint>> {
    if !(eta_tilde > eta) || !(eta >= 0.0) {
        return Err(invalid("bound chain needs 0 ≤ η < η̃"));
    }
    let l_max = l_grid.iter().fold(0.0f64, |m, l| m.max(l.floor())) as usize;
    let last = phi1.last_site().min(phi2.last_site()).min(g.len() - 1);
    if l_max > last || l0 == 0 || l0 as usize >= l_max {
        return Err(LabError::InsufficientData("bound chain grid exceeds the data".into()));
    }
    let l0 = l0 as usize;
    let mut eps: f64 = 0.0;
    for n in l0 + 1..=last {
        eps = eps.max(g[n].abs() * (n as f64).powf(eta_tilde));
    }
    let mut d: f64 = 0.0;
    for n in l0 + 1..=l_max {
        let r = (phi2.cumulative_sq(n) / phi1.cumulative_sq(n)).sqrt() / (n as f64).powf(eta);
        d = d.max(r);
    }
    let mut gphi = vec![0.0; l_max + 1];
    let mut parts = vec![0.0; l_max + 1];
    for n in 1..=l_max {
        let x = g[n] * phi2.value(n);
        gphi[n] = gphi[n - 1] + x * x;
        let nf = n as f64;
        let c = if n > l0 && n + 1 <= l_max {
            (nf.powf(-2.0 * eta_tilde) - (nf + 1.0).powf(-2.0 * eta_tilde)) * nf.powf(2.0 * eta)
        } else {
            0.0
        };
        parts[n] = parts[n - 1] + c;
    }
    let mut out = Vec::new();
    for &lf in l_grid {
        let l = lf.floor() as usize;
        if l <= l0 {
            continue;
        }
        let norm1 = phi1.cumulative_sq(l).sqrt();
        let lhs = gphi[l].sqrt() / norm1;
        // Σ_{L₀<n<L} uses parts up to L-1.
        let rhs = gphi[l0].sqrt() / norm1 + d * eps + d * eps * parts[l - 1].sqrt();
        out.push(BoundChainPoint {
            l: l as u64,
            lhs,
            rhs,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundChainSummary {
    /// Largest `lhs/rhs` over all seeds and grid points.
    pub worst_ratio: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularConfig {
    pub l_grid: Vec<f64>,
    /// Boundary angle of the pair; detected when absent.
    pub theta: Option<f64>,
    /// Defaults to [`eta_tilde_grid`].
    pub eta_grid: Option<Vec<f64>>,
    pub base_seed: u64,
    pub seeds: usize,
    /// Fail with a contract violation when the energy is not a member.
    pub enforce_membership: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularEnergyReport {
    pub energy: f64,
    pub theta: f64,
    pub beta: f64,
    pub eta: Option<f64>,
    pub eta_tilde: Option<f64>,
    pub r_sum_partial: f64,
    pub lambda_member: bool,
    /// `(L, median ‖ψ₁‖_L/‖φ₁‖_L)`.
    pub ratio_psi1: Vec<(f64, f64)>,
    /// `(L, median ‖ψ₂‖_L/‖φ₂‖_L)`.
    pub ratio_psi2: Vec<(f64, f64)>,
    pub iqr_psi1: Vec<f64>,
    pub iqr_psi2: Vec<f64>,
    pub terminal_in_band: bool,
    /// `|ln median ratio|` does not grow along the grid (fitted slope
    /// against `ln L` at most `1e-3`) for both solutions.
    pub trend_toward_one: bool,
    pub sandwich: SandwichCheck,
    pub bound_chain: Option<BoundChainSummary>,
    pub seeds: usize,
}

fn median_trace(l_grid: &[f64], per_seed: &[Vec<f64>]) -> (Vec<(f64, f64)>, Vec<f64>) {
    let mut med = Vec::with_capacity(l_grid.len());
    let mut iqr = Vec::with_capacity(l_grid.len());
    for (i, &l) in l_grid.iter().enumerate() {
        let xs: Vec<f64> = per_seed.iter().map(|s| s[i]).collect();
        med.push((l, stats::median(&xs)));
        iqr.push(stats::iqr(&xs));
    }
    (med, iqr)
}

fn trend_ok(trace: &[(f64, f64)]) -> Result<bool> {
    let x: Vec<f64> = trace.iter().map(|(l, _)| l.ln()).collect();
    let y: Vec<f64> = trace.iter().map(|(_, r)| r.ln().abs()).collect();
    if y.iter().all(|v| *v == 0.0) {
        return Ok(true);
    }
    Ok(stats::fit_line(&x, &y)?.slope <= 1e-3)
}

/// Per-energy stability diagnostics over an ensemble of seeds.
pub fn stability_experiment(
    spec: &OperatorSpec,
    model: &PerturbationModel,
    energy: f64,
    cfg: &SingularConfig,
) -> Result<SingularEnergyReport> {
    model.validate()?;
    if cfg.seeds == 0 {
        return Err(invalid("at least one seed is required"));
    }
    let l_grid = &cfg.l_grid;
    let l_max = *l_grid
        .last()
        .ok_or_else(|| invalid("L grid is empty"))?;
    let n_tail = l_max.floor() as u64 + 2;
    model.check_delta(spec, n_tail)?;
    let theta = match cfg.theta {
        Some(t) => t,
        None => subordinacy::detect_subordinate(spec, energy, l_grid, THETA_GRID)?.theta_evaluated,
    };
    let (phi1, phi2) = solve_pair(spec, energy, theta, n_tail)?;
    let sub = analyze_pair(&phi1, &phi2, l_grid)?;
    let exp1 = stats::log_log_slope(l_grid, &norms(&phi1, l_grid)?)?.slope;
    let exp2 = stats::log_log_slope(l_grid, &norms(&phi2, l_grid)?)?.slope;
    let sandwich = SandwichCheck::new(sub.beta, exp1, exp2, SANDWICH_EPS);

    let n_r = l_max.floor() as u64;
    let membership = match sub.eta {
        Some(eta) => {
            let grid = cfg.eta_grid.clone().unwrap_or_else(|| eta_tilde_grid(eta));
            if grid.iter().any(|g| !(*g > eta)) {
                return Err(invalid("η̃ grid values must exceed η(E)"));
            }
            Some(lambda_membership(&phi1, &phi2, model, &grid, n_r)?)
        }
        None => None,
    };
    let lambda_member = membership.as_ref().is_some_and(|m| m.member);
    if cfg.enforce_membership && !lambda_member {
        return Err(LabError::ContractViolation(format!(
            "energy {energy} fails the membership test"
        )));
    }
    let eta_tilde = membership.as_ref().and_then(|m| m.eta_tilde);
    let r_sum_partial = membership
        .as_ref()
        .map(|m| {
            m.scan
                .iter()
                .find(|p| Some(p.eta_tilde) == eta_tilde)
                .unwrap_or_else(|| m.scan.last().unwrap())
                .partial_sum
        })
        .unwrap_or(f64::NAN);

    let table = GeneratorTable::for_pair(spec, energy, theta, n_tail)?;
    let l0 = l_grid[0].floor() as u64;
    let runs: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|s| {
            let r = model.sample(cfg.base_seed.wrapping_add(s), n_tail);
            let dm = amplitude_stream(&table, &r, Branch::Minus, n_tail)?;
            let dp = amplitude_stream(&table, &r, Branch::Plus, n_tail)?;
            let (psi1, psi2) = perturbed_solutions(spec, &r, energy, theta, &dm, &dp)?;
            let mut r1 = Vec::with_capacity(l_grid.len());
            let mut r2 = Vec::with_capacity(l_grid.len());
            for &l in l_grid {
                r1.push(psi1.l_norm(l)? / phi1.l_norm(l)?);
                r2.push(psi2.l_norm(l)? / phi2.l_norm(l)?);
            }
            let worst = match (sub.eta, eta_tilde) {
                (Some(eta), Some(et)) => {
                    let g: Vec<f64> = (0..=n_tail)
                        .map(|n| dm.at(n.saturating_sub(1))[1])
                        .collect();
                    bound_chain(&phi1, &phi2, &g, eta, et, l0, l_grid)?
                        .iter()
                        .map(|p| if p.lhs == 0.0 { 0.0 } else { p.lhs / p.rhs })
                        .fold(0.0, f64::max)
                }
                _ => f64::NAN,
            };
            Ok((r1, r2, worst))
        })
        .collect::<Result<_>>()?;
    let per1: Vec<Vec<f64>> = runs.iter().map(|r| r.0.clone()).collect();
    let per2: Vec<Vec<f64>> = runs.iter().map(|r| r.1.clone()).collect();
    let (ratio_psi1, iqr_psi1) = median_trace(l_grid, &per1);
    let (ratio_psi2, iqr_psi2) = median_trace(l_grid, &per2);
    let in_band = |t: &[(f64, f64)]| {
        let r = t.last().unwrap().1;
        RATIO_BAND.0 <= r && r <= RATIO_BAND.1
    };
    let bound_chain = if runs.iter().any(|r| r.2.is_nan()) {
        None
    } else {
        let worst_ratio = runs.iter().map(|r| r.2).fold(0.0, f64::max);
        Some(BoundChainSummary {
            worst_ratio,
            holds: worst_ratio <= 1.0 + 1e-12,
        })
    };
    Ok(SingularEnergyReport {
        energy,
        theta,
        beta: sub.beta,
        eta: sub.eta,
        eta_tilde,
        r_sum_partial,
        lambda_member,
        terminal_in_band: in_band(&ratio_psi1) && in_band(&ratio_psi2),
        trend_toward_one: trend_ok(&ratio_psi1)? && trend_ok(&ratio_psi2)?,
        ratio_psi1,
        ratio_psi2,
        iqr_psi1,
        iqr_psi2,
        sandwich,
        bound_chain,
        seeds: cfg.seeds,
    })
}

fn norms(phi: &Trajectory, l_grid: &[f64]) -> Result<Vec<f64>> {
    l_grid.iter().map(|&l| phi.l_norm(l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocycle::Coefficients;

    #[test]
    fn r_sequence_examples() {
        let mut phi1 = Trajectory::synthetic(&[0.0; 10]);
        let mut phi2 = Trajectory::synthetic(&[1.0; 10]);
        assert!(r_sequence(&phi1, &phi2, 0.5, 10).unwrap().iter().all(|r| *r == 1.0));

        let (p, q, et) = (0.3, 0.2, 0.7);
        let v1: Vec<f64> = (1..=50).map(|n: i32| (n as f64).powf(-p)).collect();
        let v2: Vec<f64> = (1..=50).map(|n: i32| (n as f64).powf(q)).collect();
        phi1 = Trajectory::synthetic(&v1);
        phi2 = Trajectory::synthetic(&v2);
        let r = r_sequence(&phi1, &phi2, et, 50).unwrap();
        for (k, x) in r.iter().enumerate() {
            let n = (k + 1) as f64;
            let expect = n.powf(2.0 * et - 4.0 * p) + n.powf(4.0 * q);
            assert!((x - expect).abs() <= 1e-12 * expect);
        }
        assert_eq!(r, r_sequence(&phi1, &phi2, et, 50).unwrap());
        phi1.theta = f64::NAN;
        assert!(r_sequence(&phi1, &phi2, et, 50).is_err());
        phi1.theta = 0.0;
        assert!(r_sequence(&phi1, &phi2, -1.0, 50).is_err());
        assert!(r_sequence(&phi1, &phi2, et, 51).is_err());
    }

    #[test]
    fn eta_grid_shape() {
        let g = eta_tilde_grid(1.0);
        assert_eq!(g.len(), 16);
        assert!(g[0] > 1.01);
        assert!((g[15] - 3.0).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn zero_model_is_member() {
        let free = OperatorSpec::free();
        let (p1, p2) = solve_pair(&free, 0.5, 0.0, 2000).unwrap();
        let m = lambda_membership(&p1, &p2, &PerturbationModel::zero(), &eta_tilde_grid(1.0), 2000).unwrap();
        assert!(m.member);
        assert_eq!(m.eta_tilde, Some(eta_tilde_grid(1.0)[0]));
    }

    #[test]
    fn membership_threshold_for_bounded_pair() {
        // Bounded pair with η = 1: terms behave like n^{2η̃ - 2s}, so the
        // series converges iff s > η̃ + 1/2 for some admissible η̃ > 1.
        let v: Vec<f64> = (1..=20_000).map(|n: i32| (0.37 * n as f64).cos()).collect();
        let w: Vec<f64> = (1..=20_000).map(|n: i32| (0.37 * n as f64).sin()).collect();
        let p1 = Trajectory::synthetic(&v);
        let p2 = Trajectory::synthetic(&w);
        let grid = eta_tilde_grid(1.0);
        let slow = lambda_membership(&p1, &p2, &PerturbationModel::uniform_decay(1.2), &grid, 20_000).unwrap();
        assert!(!slow.member);
        let fast = lambda_membership(&p1, &p2, &PerturbationModel::uniform_decay(2.0), &grid, 20_000).unwrap();
        assert!(fast.member);
        // Partial sums are monotone in η̃.
        assert!(fast.scan.windows(2).all(|w| w[0].partial_sum <= w[1].partial_sum));
    }

    #[test]
    fn sandwich_bounds() {
        assert!(SandwichCheck::new(1.0, 0.5, 0.5, 0.1).holds());
        assert!(!SandwichCheck::new(1.0, 0.2, 0.5, 0.1).holds());
        assert!(SandwichCheck::new(0.5, 0.2, 0.9, 0.1).holds());
    }

    fn l_grid() -> Vec<f64> {
        stats::geometric_grid(10.0, 3000.0, 8)
    }

    #[test]
    fn zero_model_ratios_are_one() {
        let free = OperatorSpec::free();
        let cfg = SingularConfig {
            l_grid: l_grid(),
            theta: Some(0.0),
            eta_grid: None,
            base_seed: 0,
            seeds: 3,
            enforce_membership: true,
        };
        let rep = stability_experiment(&free, &PerturbationModel::zero(), 0.5, &cfg).unwrap();
        assert!(rep.lambda_member);
        assert!(rep.ratio_psi1.iter().all(|(_, r)| *r == 1.0));
        assert!(rep.ratio_psi2.iter().all(|(_, r)| *r == 1.0));
        assert!(rep.terminal_in_band && rep.trend_toward_one);
        assert!(rep.sandwich.holds());
    }

    #[test]
    fn bound_chain_holds_for_fast_decay() {
        let spec = OperatorSpec::new(Coefficients::Sparse { v: 0.2, gamma: 8 }, "sparse").unwrap();
        let cfg = SingularConfig {
            l_grid: l_grid(),
            theta: Some(0.1),
            eta_grid: None,
            base_seed: 7,
            seeds: 8,
            enforce_membership: true,
        };
        let rep = stability_experiment(&spec, &PerturbationModel::uniform_decay(2.5), 0.6, &cfg).unwrap();
        assert!(rep.lambda_member);
        let chain = rep.bound_chain.unwrap();
        assert!(chain.holds, "worst ratio {}", chain.worst_ratio);
        assert!(rep.terminal_in_band);
    }

    #[test]
    fn membership_is_enforced() {
        let free = OperatorSpec::free();
        let cfg = SingularConfig {
            l_grid: l_grid(),
            theta: Some(0.0),
            eta_grid: None,
            base_seed: 0,
            seeds: 2,
            enforce_membership: true,
        };
        let err = stability_experiment(&free, &PerturbationModel::uniform_decay(0.4), 0.5, &cfg);
        assert!(matches!(err, Err(LabError::ContractViolation(_))));
    }
}
