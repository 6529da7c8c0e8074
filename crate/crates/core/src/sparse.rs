//! Sparse potentials `b(n) = v` at `n_j = γ^j`, `0` elsewhere.
//!
//! Between bumps the solution is a free oscillation
//! `φ(n_j + t) = A cos(kt) + B sin(kt)` with `E = 2cos k`, so both the values at
//! bump sites and the running sums `Σ|φ(n)|²` are available in closed form with
//! phases reduced in extended precision. Sites up to `2^127` are reachable.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocycle::{boundary_angle, Coefficients, ConstPower, OperatorSpec, OVERFLOW_LIMIT};
use crate::error::{invalid, LabError, Result};
use crate::matrix::Matrix2;
use crate::phase::EllipticAngle;
use crate::randpert::stream::{SiteStream, STREAM_B};
use crate::randpert::{Distribution, SiteLaw, DEFAULT_EXPERIMENT_ID};
use crate::singular::{SandwichCheck, SANDWICH_EPS};
use crate::stats::{self, fit_line};
use crate::subordinacy::{analyze, pair_initial_data, LogNorm};

/// Bumps discarded before fitting envelopes.
pub const ENVELOPE_SKIP: usize = 5;
pub const MIN_ENVELOPE_POINTS: usize = 8;
pub const WRONSKIAN_TOL: f64 = 1e-8;
/// Extra bumps used to pick the least-growing direction.
pub const DIRECTION_EXTRA: u32 = 6;
pub const ENVELOPE_BAND: f64 = 0.05;
const CHUNK: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparseSpec {
    pub v: f64,
    pub gamma: u64,
    pub j_max: u32,
    /// `n_j = γ^j` for `j = 1..=j_max`.
    #[serde(skip)]
    pub bump_sites: Vec<u128>,
}

/// Largest `j` with `γ^j < 2^127`.
pub fn max_bump_index(gamma: u64) -> u32 {
    let mut j = 0;
    let mut n: u128 = 1;
    while let Some(next) = n.checked_mul(gamma as u128) {
        if next >= 1u128 << 127 {
            break;
        }
        n = next;
        j += 1;
    }
    j
}

impl SparseSpec {
    pub fn new(v: f64, gamma: u64, j_max: u32) -> Result<Self> {
        if !v.is_finite() {
            return Err(invalid("bump height must be finite"));
        }
        if gamma < 2 {
            return Err(invalid("γ must be at least 2"));
        }
        if j_max == 0 || j_max > max_bump_index(gamma) {
            return Err(invalid(format!(
                "j_max = {j_max} must lie in 1..={} for γ = {gamma}",
                max_bump_index(gamma)
            )));
        }
        let mut bump_sites = Vec::with_capacity(j_max as usize);
        let mut n: u128 = 1;
        for _ in 0..j_max {
            n *= gamma as u128;
            bump_sites.push(n);
        }
        Ok(SparseSpec {
            v,
            gamma,
            j_max,
            bump_sites,
        })
    }

    pub fn operator(&self) -> OperatorSpec {
        OperatorSpec::new(
            Coefficients::Sparse {
                v: self.v,
                gamma: self.gamma,
            },
            format!("sparse v={} γ={}", self.v, self.gamma),
        )
        .expect("validated sparse coefficients")
    }

    /// The same potential with more bumps.
    pub fn extended(&self, j_max: u32) -> Result<Self> {
        SparseSpec::new(self.v, self.gamma, j_max)
    }

    fn bump_step(&self, energy: f64) -> Matrix2 {
        Matrix2::new(energy - self.v, -1.0, 1.0, 0.0)
    }
}

fn free_block(energy: f64) -> Matrix2 {
    Matrix2::new(energy, -1.0, 1.0, 0.0)
}

fn check_elliptic(energy: f64) -> Result<()> {
    if !(energy.abs() < 2.0) {
        return Err(LabError::Unsupported(format!(
            "energy {energy} is outside (-2, 2); hyperbolic free blocks are not handled"
        )));
    }
    Ok(())
}

/// Transfer matrices `T(n_j)` for `j = 0..=j_max` (`n_0 = 0`).
pub fn bump_transfer_matrices(sspec: &SparseSpec, energy: f64) -> Result<Vec<Matrix2>> {
    check_elliptic(energy)?;
    let power = ConstPower::new(free_block(energy))?;
    let bump = sspec.bump_step(energy);
    let mut out = Vec::with_capacity(sspec.j_max as usize + 1);
    let mut t = Matrix2::IDENTITY;
    out.push(t);
    let mut prev: u128 = 0;
    for &n in &sspec.bump_sites {
        t = bump * power.pow(n - prev - 1)? * t;
        if !t.is_finite() || t.max_abs() > OVERFLOW_LIMIT {
            return Err(LabError::Overflow { site: n });
        }
        out.push(t);
        prev = n;
    }
    Ok(out)
}

/// One solution of the sparse equation, known exactly at every site up to
/// the last bump.
#[derive(Debug, Clone)]
pub struct SparseSolution {
    pub energy: f64,
    pub theta: f64,
    /// `n_0 = 0, n_1, …, n_J`.
    pub sites: Vec<u128>,
    /// `x(n_j) = (φ(n_j + 1), φ(n_j))`.
    pub states: Vec<[f64; 2]>,
    /// `x(n_j - 1) = (φ(n_j), φ(n_j - 1))` for `j ≥ 1`; entry 0 is unused.
    pub before: Vec<[f64; 2]>,
    /// `Σ_{m=1}^{n_j} |φ(m)|²`.
    prefix_sq: Vec<f64>,
    angle: EllipticAngle,
    cos_k: f64,
    sin_k: f64,
}

impl SparseSolution {
    pub fn last_site(&self) -> u128 {
        *self.sites.last().unwrap()
    }

    /// `(|φ(n_j - 1)|² + |φ(n_j)|²)^{1/2}` for `j = 1..=J`.
    pub fn amplitudes(&self) -> Vec<f64> {
        self.before[1..].iter().map(|x| x[0].hypot(x[1])).collect()
    }

    fn coefficients(&self, j: usize) -> (f64, f64) {
        let a = self.states[j][1];
        let b = (self.states[j][0] - a * self.cos_k) / self.sin_k;
        (a, b)
    }

    /// Block index `j` with `n_j ≤ n < n_{j+1}` (the last block is closed).
    fn block_of(&self, n: u128) -> usize {
        match self.sites.binary_search(&n) {
            Ok(j) => j,
            Err(j) => j - 1,
        }
    }

    pub fn value(&self, n: u128) -> Result<f64> {
        if n > self.last_site() {
            return Err(LabError::InsufficientData(format!(
                "site {n} is beyond the last bump {}",
                self.last_site()
            )));
        }
        let j = self.block_of(n);
        let (a, b) = self.coefficients(j);
        let (s, c) = self.angle.reduced(n - self.sites[j]).sin_cos();
        Ok(a * c + b * s)
    }

    /// `Σ_{t=t1}^{t2} (A cos kt + B sin kt)²`.
    fn block_sq(&self, a: f64, b: f64, t1: u128, t2: u128) -> f64 {
        if t2 < t1 {
            return 0.0;
        }
        let count = t2 - t1 + 1;
        let (ps, pc) = self.angle.reduced(t1 + t2).sin_cos();
        let dirichlet = self.angle.reduced(count).sin() / self.sin_k;
        let sum_cos = pc * dirichlet;
        let sum_sin = ps * dirichlet;
        0.5 * (a * a + b * b) * count as f64 + 0.5 * (a * a - b * b) * sum_cos + a * b * sum_sin
    }

    /// `Σ_{m=1}^{n} |φ(m)|²` for `n ≤ n_J`.
    pub fn sum_sq(&self, n: u128) -> Result<f64> {
        if n > self.last_site() {
            return Err(LabError::InsufficientData(format!(
                "site {n} is beyond the last bump {}",
                self.last_site()
            )));
        }
        if n == 0 {
            return Ok(0.0);
        }
        let j = self.block_of(n - 1);
        let (a, b) = self.coefficients(j);
        Ok(self.prefix_sq[j] + self.block_sq(a, b, 1, n - self.sites[j]))
    }

    /// `‖φ‖_L²` with the fractional convention of [`Trajectory::l_norm_sq`].
    ///
    /// [`Trajectory::l_norm_sq`]: crate::trajectory::Trajectory::l_norm_sq
    pub fn l_norm_sq(&self, l: f64) -> Result<f64> {
        if !(l >= 1.0) || !l.is_finite() {
            return Err(invalid(format!("L = {l} must be ≥ 1")));
        }
        let n = l.floor() as u128;
        let frac = l - l.floor();
        let next = if frac > 0.0 { self.value(n + 1)? } else { 0.0 };
        Ok(self.sum_sq(n)? + frac * next * next)
    }
}

impl LogNorm for SparseSolution {
    fn ln_norm(&self, l: f64) -> Result<f64> {
        Ok(0.5 * self.l_norm_sq(l)?.ln())
    }
}

/// Propagates the solution with `(φ(0), φ(1)) = (-sin θ, cos θ)` through all
/// bumps of `sspec`.
pub fn sparse_propagate(sspec: &SparseSpec, energy: f64, theta: f64) -> Result<SparseSolution> {
    let (p, _) = pair_initial_data(theta);
    propagate_from(sspec, energy, theta, [p[1], p[0]])
}

fn propagate_from(sspec: &SparseSpec, energy: f64, theta: f64, x0: [f64; 2]) -> Result<SparseSolution> {
    check_elliptic(energy)?;
    let free = free_block(energy);
    let power = ConstPower::new(free)?;
    let angle = EllipticAngle::from_half_trace(0.5 * energy)?;
    let cos_k = 0.5 * energy;
    let sin_k = ((1.0 - cos_k) * (1.0 + cos_k)).sqrt();
    let bump = sspec.bump_step(energy);
    let mut sites = vec![0u128];
    let mut states = vec![x0];
    let mut before = vec![[f64::NAN; 2]];
    let mut prefix_sq = vec![0.0];
    let mut sol = SparseSolution {
        energy,
        theta,
        sites: Vec::new(),
        states: Vec::new(),
        before: Vec::new(),
        prefix_sq: Vec::new(),
        angle,
        cos_k,
        sin_k,
    };
    let mut x = x0;
    let mut prev: u128 = 0;
    for &n in &sspec.bump_sites {
        let gap = n - prev;
        let pre = power.pow(gap - 1)?.apply(x);
        // Sites prev+1..=n lie in the free block starting at prev.
        let a = x[1];
        let b = (x[0] - a * cos_k) / sin_k;
        let block = sol.block_sq(a, b, 1, gap);
        prefix_sq.push(prefix_sq.last().unwrap() + block);
        x = bump.apply(pre);
        if !(x[0].is_finite() && x[1].is_finite()) || x[0].abs().max(x[1].abs()) > OVERFLOW_LIMIT {
            return Err(LabError::Overflow { site: n });
        }
        sites.push(n);
        states.push(x);
        before.push(pre);
        prev = n;
    }
    sol.sites = sites;
    sol.states = states;
    sol.before = before;
    sol.prefix_sq = prefix_sq;
    Ok(sol)
}

/// Site-by-site reference: `x(n_j)` from the plain recursion, for bumps with
/// `n_j ≤ n_limit`.
pub fn naive_bump_states(
    sspec: &SparseSpec,
    energy: f64,
    theta: f64,
    n_limit: u64,
) -> Result<Vec<[f64; 2]>> {
    let last = sspec
        .bump_sites
        .iter()
        .copied()
        .filter(|n| *n <= n_limit as u128)
        .max()
        .ok_or_else(|| invalid("no bump below the naive limit"))?;
    let (p, _) = pair_initial_data(theta);
    let traj = crate::cocycle::solve_forward(&sspec.operator(), energy, p[0], p[1], last as u64)?;
    let mut out = vec![[traj.value(1), traj.value(0)]];
    for &n in sspec.bump_sites.iter().filter(|n| **n <= last) {
        out.push([traj.value(n as usize + 1), traj.value(n as usize)]);
    }
    Ok(out)
}

/// The pair at the least-growing boundary angle.
#[derive(Debug, Clone)]
pub struct SparsePair {
    pub theta_star: f64,
    pub phi1: SparseSolution,
    pub phi2: SparseSolution,
    /// Largest `|W - 1|` over bump sites.
    pub wronskian_error: f64,
}

/// `θ*` is the boundary angle of the minor right singular vector of
/// `T(n_{J'})`, `J' = j_max + min(DIRECTION_EXTRA, room below 2^127)`.
pub fn sparse_pair(sspec: &SparseSpec, energy: f64) -> Result<SparsePair> {
    check_elliptic(energy)?;
    let extra = DIRECTION_EXTRA.min(max_bump_index(sspec.gamma) - sspec.j_max);
    let far = sspec.extended(sspec.j_max + extra)?;
    let t = *bump_transfer_matrices(&far, energy)?.last().unwrap();
    let v = t.svd().right_minor();
    // x(0) = (φ(1), φ(0)).
    let theta_star = boundary_angle(v[1], v[0]);
    pair_at(sspec, energy, theta_star)
}

pub fn pair_at(sspec: &SparseSpec, energy: f64, theta: f64) -> Result<SparsePair> {
    let (p1, p2) = pair_initial_data(theta);
    let phi1 = propagate_from(sspec, energy, theta, [p1[1], p1[0]])?;
    let phi2 = propagate_from(sspec, energy, theta, [p2[1], p2[0]])?;
    let mut worst: f64 = 0.0;
    for (j, (x1, x2)) in phi1.states.iter().zip(&phi2.states).enumerate() {
        let w = x1[0] * x2[1] - x1[1] * x2[0];
        let err = (w - 1.0).abs();
        if !(err <= WRONSKIAN_TOL) {
            return Err(LabError::InternalConsistency {
                site: phi1.sites[j],
                detail: format!("Wronskian {w} drifted from 1"),
            });
        }
        worst = worst.max(err);
    }
    Ok(SparsePair {
        theta_star: theta,
        phi1,
        phi2,
        wronskian_error: worst,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Which {
    /// Decaying amplitudes, `amp ≈ n^{-β}`.
    Phi1,
    /// Growing amplitudes, `n^{β₁} ≤ amp ≤ n^{β₂}`.
    Phi2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    pub beta1_hat: f64,
    pub beta2_hat: f64,
    /// RMS residual of the plain log-log fit.
    pub residual: f64,
    /// Bump indices `(j_lo, j_hi)` used.
    pub window: (u32, u32),
}

/// Log-log slopes of the upper and lower envelopes of `amplitudes[i]` at
/// `sites[i] = n_{i+1}`, skipping the first [`ENVELOPE_SKIP`] bumps.
///
/// With `a_j = ln amp_j` over the window, the upper envelope is
/// `min(max_{i≤j} a_i, max_{i≥j} a_i)` and the lower one
/// `max(min_{i≤j} a_i, min_{i≥j} a_i)`; both coincide with `a_j` for a
/// monotone sequence.
pub fn envelope_exponents(sites: &[u128], amplitudes: &[f64], which: Which) -> Result<EnvelopeFit> {
    if sites.len() != amplitudes.len() {
        return Err(invalid("sites and amplitudes differ in length"));
    }
    if amplitudes.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
        return Err(invalid("amplitudes must be positive and finite"));
    }
    let n_pts = amplitudes.len().saturating_sub(ENVELOPE_SKIP);
    if n_pts < MIN_ENVELOPE_POINTS {
        return Err(LabError::InsufficientData(format!(
            "{n_pts} bumps in the fit window, need {MIN_ENVELOPE_POINTS}"
        )));
    }
    let x: Vec<f64> = sites[ENVELOPE_SKIP..].iter().map(|n| (*n as f64).ln()).collect();
    let a: Vec<f64> = amplitudes[ENVELOPE_SKIP..].iter().map(|v| v.ln()).collect();
    let k = a.len();
    let mut pmax = a.clone();
    let mut pmin = a.clone();
    for i in 1..k {
        pmax[i] = pmax[i - 1].max(a[i]);
        pmin[i] = pmin[i - 1].min(a[i]);
    }
    let mut smax = a.clone();
    let mut smin = a.clone();
    for i in (0..k - 1).rev() {
        smax[i] = smax[i + 1].max(a[i]);
        smin[i] = smin[i + 1].min(a[i]);
    }
    let upper: Vec<f64> = (0..k).map(|i| pmax[i].min(smax[i])).collect();
    let lower: Vec<f64> = (0..k).map(|i| pmin[i].max(smin[i])).collect();
    let su = fit_line(&x, &upper)?.slope;
    let sl = fit_line(&x, &lower)?.slope;
    let plain = fit_line(&x, &a)?;
    let residual = (x
        .iter()
        .zip(&a)
        .map(|(xi, yi)| {
            let r = yi - (plain.intercept + plain.slope * xi);
            r * r
        })
        .sum::<f64>()
        / k as f64)
        .sqrt();
    let (beta1_hat, beta2_hat) = match which {
        Which::Phi2 => (su.min(sl), su.max(sl)),
        Which::Phi1 => ((-su).min(-sl), (-su).max(-sl)),
    };
    Ok(EnvelopeFit {
        beta1_hat,
        beta2_hat,
        residual,
        window: (ENVELOPE_SKIP as u32 + 1, amplitudes.len() as u32),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SThreshold {
    /// `4β₂/(1-2β₂) - 2β₁ + 1/2`.
    pub threshold: f64,
    /// Decay exponent `s + 1/2` a deterministic pointwise bound needs at the
    /// threshold.
    pub kls_exponent: f64,
    /// `η ≤ 4β₂/(1-2β₂)`.
    pub eta_bound: f64,
    /// `β ≥ (1-2β₂)/(1+2β₂)`.
    pub beta_lower_bound: f64,
}

pub fn s_threshold(beta1: f64, beta2: f64) -> Result<SThreshold> {
    if !(beta2 < 0.5) {
        return Err(invalid(format!("β₂ = {beta2} must be below 1/2")));
    }
    if !(0.0 <= beta1 && beta1 <= beta2) {
        return Err(invalid(format!("need 0 ≤ β₁ ≤ β₂, got β₁ = {beta1}, β₂ = {beta2}")));
    }
    let eta_bound = 4.0 * beta2 / (1.0 - 2.0 * beta2);
    let threshold = 4.0 * beta2 / (1.0 - 2.0 * beta2) - 2.0 * beta1 + 0.5;
    Ok(SThreshold {
        threshold,
        kls_exponent: threshold + 0.5,
        eta_bound,
        beta_lower_bound: (1.0 - 2.0 * beta2) / (1.0 + 2.0 * beta2),
    })
}

/// Deterministic envelope analysis of the unperturbed pair at one energy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparseAnalysis {
    pub energy: f64,
    pub theta_star: f64,
    pub fit_phi1: EnvelopeFit,
    pub fit_phi2: EnvelopeFit,
    /// `min(β̂₁ of φ₂, β̂₁ of φ₁)` clamped at 0.
    pub beta1_hat: f64,
    /// `β̂₂` of `φ₂` clamped at 0.
    pub beta2_hat: f64,
    pub threshold: Option<SThreshold>,
    /// Subordinacy `β` over the closed-form `L`-norms.
    pub beta: f64,
    pub sandwich: SandwichCheck,
    pub wronskian_error: f64,
    pub l_grid: Vec<f64>,
}

/// Geometric `L`-grid from `n_6` to `n_J` with 4 points per decade.
pub fn default_l_grid(sspec: &SparseSpec) -> Vec<f64> {
    let lo = sspec.bump_sites[ENVELOPE_SKIP.min(sspec.bump_sites.len() - 1)] as f64;
    let hi = *sspec.bump_sites.last().unwrap() as f64;
    stats::geometric_grid(lo.max(10.0), hi, 4)
}

pub fn analyze_sparse(sspec: &SparseSpec, energy: f64, l_grid: Option<&[f64]>) -> Result<SparseAnalysis> {
    let pair = sparse_pair(sspec, energy)?;
    analyze_pair_sparse(sspec, &pair, l_grid)
}

fn analyze_pair_sparse(
    sspec: &SparseSpec,
    pair: &SparsePair,
    l_grid: Option<&[f64]>,
) -> Result<SparseAnalysis> {
    let grid = match l_grid {
        Some(g) => g.to_vec(),
        None => default_l_grid(sspec),
    };
    let fit_phi1 = envelope_exponents(&sspec.bump_sites, &pair.phi1.amplitudes(), Which::Phi1)?;
    let fit_phi2 = envelope_exponents(&sspec.bump_sites, &pair.phi2.amplitudes(), Which::Phi2)?;
    let beta2_hat = fit_phi2.beta2_hat.max(0.0);
    let beta1_hat = fit_phi2.beta1_hat.min(fit_phi1.beta1_hat).max(0.0).min(beta2_hat);
    let threshold = s_threshold(beta1_hat, beta2_hat).ok();
    let sub = analyze(&pair.phi1, &pair.phi2, &grid, pair.theta_star)?;
    let n1: Vec<f64> = grid.iter().map(|&l| pair.phi1.l_norm_sq(l).map(f64::sqrt)).collect::<Result<_>>()?;
    let n2: Vec<f64> = grid.iter().map(|&l| pair.phi2.l_norm_sq(l).map(f64::sqrt)).collect::<Result<_>>()?;
    let e1 = stats::log_log_slope(&grid, &n1)?.slope;
    let e2 = stats::log_log_slope(&grid, &n2)?.slope;
    Ok(SparseAnalysis {
        energy: pair.phi1.energy,
        theta_star: pair.theta_star,
        fit_phi1,
        fit_phi2,
        beta1_hat,
        beta2_hat,
        threshold,
        beta: sub.beta,
        sandwich: SandwichCheck::new(sub.beta, e1, e2, SANDWICH_EPS),
        wronskian_error: pair.wronskian_error,
        l_grid: grid,
    })
}

/// Bump amplitudes `j = 1..=j_cut` of the solution of the perturbed equation
/// that coincides with `sol` on sites `≥ n_{j_cut}`. The perturbation
/// `b̃(n)` is drawn from `law` on sites `1..=n_{j_cut}`.
pub fn matched_amplitudes(
    sspec: &SparseSpec,
    sol: &SparseSolution,
    law: &SiteLaw,
    experiment_id: &str,
    seed: u64,
    j_cut: usize,
) -> Result<Vec<f64>> {
    if j_cut == 0 || j_cut >= sol.sites.len() {
        return Err(invalid("cut bump is outside the solution"));
    }
    let n_cut = u64::try_from(sol.sites[j_cut])
        .map_err(|_| invalid("cut site does not fit in 64 bits"))?;
    let mut stream = SiteStream::new(experiment_id, seed, STREAM_B);
    let energy = sol.energy;
    // (ψ(n+1), ψ(n)) at n = n_cut.
    let [mut next, mut cur] = sol.states[j_cut];
    let mut amps = vec![0.0; j_cut];
    let mut bump = j_cut;
    let mut hi = n_cut;
    let zero = law.is_zero();
    while hi >= 1 {
        let lo = hi.saturating_sub(CHUNK - 1).max(1);
        let words = if zero {
            Vec::new()
        } else {
            stream.words(lo, (hi - lo + 1) as usize)
        };
        for n in (lo..=hi).rev() {
            let mut b = if bump > 0 && sol.sites[bump] == n as u128 {
                sspec.v
            } else {
                0.0
            };
            if !zero {
                b += law.draw(n, words[(n - lo) as usize]);
            }
            let prev = (energy - b) * cur - next;
            if bump > 0 && sol.sites[bump] == n as u128 {
                amps[bump - 1] = cur.hypot(prev);
                bump -= 1;
            }
            next = cur;
            cur = prev;
        }
        if !(cur.is_finite() && next.is_finite()) {
            return Err(LabError::Overflow { site: lo as u128 });
        }
        hi = lo - 1;
    }
    Ok(amps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseExperimentConfig {
    pub s: f64,
    pub base_seed: u64,
    pub seeds: usize,
    pub energies: Vec<f64>,
    /// Perturbation support ends at `n_{cut_bump}`.
    pub cut_bump: u32,
    pub l_grid: Option<Vec<f64>>,
    pub experiment_id: String,
}

impl SparseExperimentConfig {
    pub fn new(s: f64, seeds: usize, energies: Vec<f64>) -> Self {
        SparseExperimentConfig {
            s,
            base_seed: 0,
            seeds,
            energies,
            cut_bump: 8,
            l_grid: None,
            experiment_id: DEFAULT_EXPERIMENT_ID.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSeedRow {
    pub seed: u64,
    pub fit_psi1: EnvelopeFit,
    pub fit_psi2: EnvelopeFit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparseEnergyResult {
    pub analysis: SparseAnalysis,
    pub s: f64,
    pub above_threshold: Option<bool>,
    /// Unperturbed fits on the same amplitudes path as the perturbed ones:
    /// `[φ₁ β̂₁, φ₁ β̂₂, φ₂ β̂₁, φ₂ β̂₂]`.
    pub reference: [f64; 4],
    /// Medians over seeds, same order.
    pub perturbed_median: [f64; 4],
    pub max_deviation: f64,
    pub within_band: bool,
    /// Estimated first-layer second moment of the perturbation beyond the
    /// cut, `Σ_{n>n_cut} ⟨b̃(n)²⟩‖U(n)‖²_HS`; the sum past the last bump is
    /// extrapolated with the fitted growth exponent.
    pub tail_estimate: f64,
    pub rows: Vec<SparseSeedRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparseExperimentReport {
    pub v: f64,
    pub gamma: u64,
    pub j_max: u32,
    pub n_cut: u128,
    pub results: Vec<SparseEnergyResult>,
}

fn fits_of(
    sspec: &SparseSpec,
    pair: &SparsePair,
    amps1: &[f64],
    amps2: &[f64],
    j_cut: usize,
) -> Result<(EnvelopeFit, EnvelopeFit)> {
    let mut a1 = pair.phi1.amplitudes();
    let mut a2 = pair.phi2.amplitudes();
    a1[..j_cut].copy_from_slice(amps1);
    a2[..j_cut].copy_from_slice(amps2);
    Ok((
        envelope_exponents(&sspec.bump_sites, &a1, Which::Phi1)?,
        envelope_exponents(&sspec.bump_sites, &a2, Which::Phi2)?,
    ))
}

fn as_array(f1: &EnvelopeFit, f2: &EnvelopeFit) -> [f64; 4] {
    [f1.beta1_hat, f1.beta2_hat, f2.beta1_hat, f2.beta2_hat]
}

/// `(1/3)Σ_{n=a}^{b} n^{-2s}` bounded by the first term plus the integral.
fn uniform_block_moment(a: f64, b: f64, s: f64) -> f64 {
    let p = 2.0 * s;
    let integral = if (p - 1.0).abs() < 1e-12 {
        (b / a).ln()
    } else {
        (a.powf(1.0 - p) - b.powf(1.0 - p)) / (p - 1.0)
    };
    (a.powf(-p) + integral.max(0.0)) / 3.0
}

fn tail_estimate(sspec: &SparseSpec, pair: &SparsePair, j_cut: usize, s: f64, growth: f64) -> f64 {
    let e = pair.phi1.energy;
    let cos_k = 0.5 * e;
    let sin_k = ((1.0 - cos_k) * (1.0 + cos_k)).sqrt();
    // sup_t ‖F^t‖ ≤ 1 + ‖F - cos k·I‖/sin k.
    let c_f = 1.0 + (free_block(e) - Matrix2::IDENTITY.scale(cos_k)).norm() / sin_k;
    let frame = |j: usize| -> f64 {
        let (x1, x2) = (pair.phi1.states[j], pair.phi2.states[j]);
        x1[0] * x1[0] + x1[1] * x1[1] + x2[0] * x2[0] + x2[1] * x2[1]
    };
    let gamma = sspec.gamma as f64;
    let last = pair.phi1.sites.len() - 1;
    let mut total = 0.0;
    for j in j_cut..last {
        let (a, b) = (pair.phi1.sites[j] as f64 + 1.0, pair.phi1.sites[j + 1] as f64);
        total += c_f.powi(4) * frame(j).powi(2) * uniform_block_moment(a, b, s);
    }
    // Past the last bump: frame growth n^{2·growth} per block, up to 2^127.
    let base = frame(last);
    let n_last = pair.phi1.sites[last] as f64;
    let mut a = n_last + 1.0;
    while a < 1.7e38 {
        let b = (a - 1.0) * gamma;
        let f = base * ((a - 1.0) / n_last).powf(2.0 * growth.max(0.0));
        let term = c_f.powi(4) * f * f * uniform_block_moment(a, b, s);
        total += term;
        a = b + 1.0;
    }
    total
}

/// Envelope stability of the sparse pair under `b̃(n) = X(n)/n^s` on sites
/// `2..=n_cut`, `X` uniform on `[-1, 1]`.
pub fn perturbed_sparse_experiment(
    sspec: &SparseSpec,
    cfg: &SparseExperimentConfig,
) -> Result<SparseExperimentReport> {
    if !(cfg.s > 0.0) {
        return Err(invalid("s must be positive"));
    }
    let j_cut = cfg.cut_bump as usize;
    if j_cut == 0 || j_cut > sspec.j_max as usize {
        return Err(invalid("cut bump must lie in 1..=j_max"));
    }
    let n_cut = sspec.bump_sites[j_cut - 1];
    let n_cut64 = u64::try_from(n_cut).map_err(|_| invalid("cut site exceeds 64 bits"))?;
    let law = SiteLaw::new(Distribution::Uniform { c: 1.0 }, cfg.s).with_window(2, n_cut64);
    law.validate()?;
    let mut results = Vec::with_capacity(cfg.energies.len());
    for &energy in &cfg.energies {
        let pair = sparse_pair(sspec, energy)?;
        let analysis = analyze_pair_sparse(sspec, &pair, cfg.l_grid.as_deref())?;
        let zero = SiteLaw::zero();
        let r1 = matched_amplitudes(sspec, &pair.phi1, &zero, &cfg.experiment_id, 0, j_cut)?;
        let r2 = matched_amplitudes(sspec, &pair.phi2, &zero, &cfg.experiment_id, 0, j_cut)?;
        let (f1, f2) = fits_of(sspec, &pair, &r1, &r2, j_cut)?;
        let reference = as_array(&f1, &f2);
        let rows: Vec<SparseSeedRow> = (0..cfg.seeds as u64)
            .into_par_iter()
            .map(|i| {
                let seed = cfg.base_seed.wrapping_add(i);
                let a1 = matched_amplitudes(sspec, &pair.phi1, &law, &cfg.experiment_id, seed, j_cut)?;
                let a2 = matched_amplitudes(sspec, &pair.phi2, &law, &cfg.experiment_id, seed, j_cut)?;
                let (fit_psi1, fit_psi2) = fits_of(sspec, &pair, &a1, &a2, j_cut)?;
                Ok(SparseSeedRow {
                    seed,
                    fit_psi1,
                    fit_psi2,
                })
            })
            .collect::<Result<_>>()?;
        let mut perturbed_median = [0.0; 4];
        for (k, m) in perturbed_median.iter_mut().enumerate() {
            let xs: Vec<f64> = rows.iter().map(|r| as_array(&r.fit_psi1, &r.fit_psi2)[k]).collect();
            *m = if xs.is_empty() { f64::NAN } else { stats::median(&xs) };
        }
        let max_deviation = (0..4)
            .map(|k| (perturbed_median[k] - reference[k]).abs())
            .fold(0.0, f64::max);
        let tail = tail_estimate(sspec, &pair, j_cut, cfg.s, analysis.beta2_hat);
        results.push(SparseEnergyResult {
            above_threshold: analysis.threshold.map(|t| cfg.s > t.threshold),
            analysis,
            s: cfg.s,
            reference,
            perturbed_median,
            max_deviation,
            within_band: max_deviation <= ENVELOPE_BAND,
            tail_estimate: tail,
            rows,
        });
    }
    Ok(SparseExperimentReport {
        v: sspec.v,
        gamma: sspec.gamma,
        j_max: sspec.j_max,
        n_cut,
        results,
    })
}
