//! Boundary-condition–parameterized solution pairs, their `L`-norms and the
//! detection of subordinate solutions together with the exponents
//! `β(E)`, `η(E)`.
//!
//! For an angle `θ`, `φ₁` starts from `(φ(0), φ(1)) = (-sin θ, cos θ)` and
//! `φ₂ = φ_{1,θ-π/2}` from `(cos θ, sin θ)`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::cocycle::{boundary_angle, solve_forward, OperatorSpec};
use crate::error::{invalid, Result};
use crate::matrix::Matrix2;
use crate::stats::{fit_line, DecadeVerdict};
use crate::trajectory::Trajectory;

/// Terminal-ratio threshold, relative to the ratio at the first grid point.
pub const TAU_SUB: f64 = 1e-3;
pub const THETA_GRID: usize = 720;
pub const GOLDEN_STEPS: usize = 40;
/// Tolerance of the regular-energy flag on the growth exponent `1/2 + ε_reg`.
pub const EPS_REG: f64 = 0.05;
/// The refined backward solution is accepted when its boundary angle agrees
/// with the scanned minimizer to this many radians.
const REFINE_ANGLE_TOL: f64 = 1e-6;
const RESCALE_AT: f64 = 1e64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    PpLike,
    ScLike,
    NoSubordinate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubordinacyResult {
    pub theta_star: Option<f64>,
    pub beta: f64,
    pub eta: Option<f64>,
    /// `(L, ‖φ₁‖_L / ‖φ₂‖_L)`; entries underflow to zero for fast decay.
    pub ratio_trace: Vec<(f64, f64)>,
    /// `ln(‖φ₁‖_L / ‖φ₂‖_L)` on the same grid.
    pub log_ratio_trace: Vec<f64>,
    pub classification: Classification,
    /// Largest decade growth exponent of `‖φ₁‖_L` over the last decade.
    pub growth_exponent: f64,
    pub regular: bool,
    /// Least-squares rate `-d ln(ratio)/dL` over the whole grid.
    pub exp_decay_rate: f64,
    /// Angle at which the ratio was evaluated (the minimizer when scanning).
    pub theta_evaluated: f64,
}

/// `β̃(α) = α/(2-α)`.
pub fn alpha_maps(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid(format!("alpha = {alpha} is outside (0, 1]")));
    }
    Ok(alpha / (2.0 - alpha))
}

/// Inverse of [`alpha_maps`]: `α(β̃) = 2β̃/(1+β̃)`.
pub fn alpha_from_beta_tilde(beta_tilde: f64) -> Result<f64> {
    if !(beta_tilde > 0.0 && beta_tilde <= 1.0) {
        return Err(invalid(format!("beta_tilde = {beta_tilde} is outside (0, 1]")));
    }
    Ok(2.0 * beta_tilde / (1.0 + beta_tilde))
}

/// `η = (1-β)/β` for `β > 0`.
pub fn eta_from_beta(beta: f64) -> Option<f64> {
    if beta > 0.0 {
        Some((1.0 - beta) / beta)
    } else {
        None
    }
}

/// Initial data `((φ₁(0), φ₁(1)), (φ₂(0), φ₂(1)))` for the angle `θ`.
///
/// At `θ = -π/2` both vectors are negated so that `φ₁(1) = 0`, `φ₁(2) = 1`
/// for `a ≡ 1` while the Wronskian stays `+1`.
pub fn pair_initial_data(theta: f64) -> ([f64; 2], [f64; 2]) {
    let (s, c) = theta.sin_cos();
    if theta == -FRAC_PI_2 {
        ([-1.0, 0.0], [0.0, 1.0])
    } else {
        ([-s, c], [c, s])
    }
}

pub fn solve_pair(
    spec: &OperatorSpec,
    energy: f64,
    theta: f64,
    n_max: u64,
) -> Result<(Trajectory, Trajectory)> {
    if !(-FRAC_PI_2..FRAC_PI_2).contains(&theta) {
        return Err(invalid(format!("theta = {theta} is outside [-π/2, π/2)")));
    }
    let (p1, p2) = pair_initial_data(theta);
    let mut phi1 = solve_forward(spec, energy, p1[0], p1[1], n_max)?;
    let mut phi2 = solve_forward(spec, energy, p2[0], p2[1], n_max)?;
    phi1.theta = theta;
    phi2.theta = theta;
    Ok((phi1, phi2))
}

/// `φ₁(n)φ₂(n-1) - φ₁(n-1)φ₂(n)`.
pub fn wronskian(phi1: &Trajectory, phi2: &Trajectory, n: usize) -> f64 {
    phi1.value(n) * phi2.value(n - 1) - phi1.value(n - 1) * phi2.value(n)
}

fn validate_grid(l_grid: &[f64]) -> Result<()> {
    if l_grid.len() < 3 {
        return Err(invalid("L grid needs at least 3 points"));
    }
    if !(l_grid[0] >= 1.0) {
        return Err(invalid("L grid must start at L ≥ 1"));
    }
    if l_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("L grid must be strictly increasing"));
    }
    let last = l_grid[l_grid.len() - 1];
    if !(last / l_grid[0] >= 100.0 * (1.0 - 1e-12)) || !last.is_finite() {
        return Err(invalid("L grid must span at least two decades"));
    }
    Ok(())
}

/// Source of `ln ‖φ‖_L`.
pub(crate) trait LogNorm {
    fn ln_norm(&self, l: f64) -> Result<f64>;
}

impl LogNorm for Trajectory {
    fn ln_norm(&self, l: f64) -> Result<f64> {
        Ok(self.l_norm(l)?.ln())
    }
}

/// Compares two trajectories given as the pair at a fixed angle.
pub fn analyze_pair(
    phi1: &Trajectory,
    phi2: &Trajectory,
    l_grid: &[f64],
) -> Result<SubordinacyResult> {
    validate_grid(l_grid)?;
    analyze(phi1, phi2, l_grid, phi1.theta)
}

pub(crate) fn analyze(
    phi1: &dyn LogNorm,
    phi2: &dyn LogNorm,
    l_grid: &[f64],
    theta: f64,
) -> Result<SubordinacyResult> {
    let l_max = *l_grid.last().unwrap();
    let mut ln1 = Vec::with_capacity(l_grid.len());
    let mut ln2 = Vec::with_capacity(l_grid.len());
    for &l in l_grid {
        ln1.push(phi1.ln_norm(l)?);
        ln2.push(phi2.ln_norm(l)?);
    }
    let log_ratio: Vec<f64> = ln1.iter().zip(&ln2).map(|(a, b)| a - b).collect();
    let ratio_trace: Vec<(f64, f64)> = l_grid
        .iter()
        .zip(&log_ratio)
        .map(|(l, r)| (*l, r.exp()))
        .collect();

    // Decade increments over the last decade: ln‖φ‖_L - ln‖φ‖_{L/10}.
    let decade_start = l_max / 10.0 * (1.0 - 1e-12);
    let mut beta = f64::INFINITY;
    let mut growth: f64 = f64::NEG_INFINITY;
    let mut monotone = true;
    let mut prev: Option<f64> = None;
    for (i, &l) in l_grid.iter().enumerate() {
        if l < decade_start {
            continue;
        }
        let inc1 = ln1[i] - phi1.ln_norm(l / 10.0)?;
        let inc2 = ln2[i] - phi2.ln_norm(l / 10.0)?;
        growth = growth.max(inc1 / std::f64::consts::LN_10);
        let b = if inc2 > 0.0 {
            (inc1 / inc2).max(0.0)
        } else if inc1 > 0.0 {
            1.0
        } else {
            0.0
        };
        beta = beta.min(b);
        if let Some(p) = prev {
            if log_ratio[i] > p + 1e-9 {
                monotone = false;
            }
        }
        prev = Some(log_ratio[i]);
    }
    let beta = if beta.is_finite() { beta } else { 0.0 };

    let rel_terminal = log_ratio[log_ratio.len() - 1] - log_ratio[0];
    let found = monotone && rel_terminal < TAU_SUB.ln();

    let classification = if !found {
        Classification::NoSubordinate
    } else if tail_sum_verdict(phi1, l_max)?.convergent {
        Classification::PpLike
    } else {
        Classification::ScLike
    };

    let finite: Vec<(f64, f64)> = l_grid
        .iter()
        .zip(&log_ratio)
        .filter(|(_, r)| r.is_finite())
        .map(|(l, r)| (*l, *r))
        .collect();
    let exp_decay_rate = if finite.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = finite.into_iter().unzip();
        -fit_line(&x, &y)?.slope
    } else {
        f64::NAN
    };

    Ok(SubordinacyResult {
        theta_star: if found { Some(theta) } else { None },
        beta,
        eta: eta_from_beta(beta),
        ratio_trace,
        log_ratio_trace: log_ratio,
        classification,
        growth_exponent: growth,
        regular: growth <= 0.5 + EPS_REG,
        exp_decay_rate,
        theta_evaluated: theta,
    })
}

/// Decade-sum ratio test on `Σ|φ(n)|²` using the norms at `10^d - 1`.
fn tail_sum_verdict(phi: &dyn LogNorm, l_max: f64) -> Result<DecadeVerdict> {
    let mut ln_sums = Vec::new();
    let mut prev_ln: Option<f64> = None;
    let mut hi: f64 = 10.0;
    while hi - 1.0 <= l_max {
        let ln_hi = 2.0 * phi.ln_norm(hi - 1.0)?;
        let s = match prev_ln {
            None => ln_hi,
            Some(ln_lo) => {
                let x = ln_lo - ln_hi;
                if x >= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    ln_hi + (-x.exp()).ln_1p()
                }
            }
        };
        ln_sums.push(s);
        prev_ln = Some(ln_hi);
        hi *= 10.0;
    }
    let top = ln_sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sums: Vec<f64> = ln_sums
        .iter()
        .map(|s| if top.is_finite() { (s - top).exp() } else { 0.0 })
        .collect();
    let partial = sums.iter().sum();
    Ok(DecadeVerdict::from_decade_sums(sums, partial))
}

/// Running Gram matrices `Σ_{k≤n} r(k) r(k)ᵀ` of the basis `r(n) = (u(n), v(n))`
/// with `(u(0), u(1)) = (0, 1)` and `(v(0), v(1)) = (1, 0)`, each carried
/// with a log scale so that exponentially growing bases stay representable.
struct GramProfile {
    /// `[g11, g12, g22]` and log scale, index `n`.
    cumulative: Vec<([f64; 3], f64)>,
    /// `r(n)` and its log scale.
    rows: Vec<([f64; 2], f64)>,
}

fn add_scaled(acc: ([f64; 3], f64), term: ([f64; 3], f64)) -> ([f64; 3], f64) {
    let (g, gs) = acc;
    let (t, ts) = term;
    if g == [0.0; 3] {
        return term;
    }
    if t == [0.0; 3] {
        return acc;
    }
    if ts > gs {
        let f = (gs - ts).exp();
        ([g[0] * f + t[0], g[1] * f + t[1], g[2] * f + t[2]], ts)
    } else {
        let f = (ts - gs).exp();
        ([g[0] + t[0] * f, g[1] + t[1] * f, g[2] + t[2] * f], gs)
    }
}

fn outer(r: ([f64; 2], f64)) -> ([f64; 3], f64) {
    let (v, s) = r;
    ([v[0] * v[0], v[0] * v[1], v[1] * v[1]], 2.0 * s)
}

impl GramProfile {
    fn build(spec: &OperatorSpec, energy: f64, n_max: u64) -> Self {
        let mut p = Matrix2::IDENTITY;
        let mut scale = 0.0;
        let mut rows = Vec::with_capacity(n_max as usize + 1);
        let mut cumulative = Vec::with_capacity(n_max as usize + 1);
        rows.push(([0.0, 1.0], 0.0));
        cumulative.push(([0.0; 3], 0.0));
        for n in 1..=n_max as u128 {
            p = spec.step(energy, n) * p;
            let m = p.max_abs();
            if m > RESCALE_AT {
                p = p.scale(1.0 / m);
                scale += m.ln();
            }
            let r = ([p.m21, p.m22], scale);
            rows.push(r);
            let prev = cumulative[cumulative.len() - 1];
            cumulative.push(add_scaled(prev, outer(r)));
        }
        GramProfile { cumulative, rows }
    }

    fn gram(&self, l: f64) -> Result<([f64; 3], f64)> {
        if !(l >= 1.0) {
            return Err(invalid(format!("L = {l} must be ≥ 1")));
        }
        let n = l.floor() as usize;
        if n + 1 >= self.rows.len() {
            return Err(crate::error::LabError::InsufficientData(format!(
                "L = {l} beyond the computed profile"
            )));
        }
        let frac = l - l.floor();
        let (t, ts) = outer(self.rows[n + 1]);
        let term = ([t[0] * frac, t[1] * frac, t[2] * frac], ts);
        Ok(add_scaled(self.cumulative[n], term))
    }

    /// `ln ‖c₁u + c₂v‖²_L`, floored at the relative precision of the Gram.
    fn ln_norm_sq(&self, c: [f64; 2], l: f64) -> Result<f64> {
        let (g, gs) = self.gram(l)?;
        let q = c[0] * c[0] * g[0] + 2.0 * c[0] * c[1] * g[1] + c[1] * c[1] * g[2];
        let floor = (g[0] + g[2]) * 1e-32;
        Ok(q.max(floor).ln() + gs)
    }
}

/// Coefficients of `φ₁` and `φ₂` in the `(u, v)` basis.
fn pair_coefficients(theta: f64) -> ([f64; 2], [f64; 2]) {
    let (p1, p2) = pair_initial_data(theta);
    // (φ(0), φ(1)) = (v-coeff, u-coeff)
    ([p1[1], p1[0]], [p2[1], p2[0]])
}

struct GramNorm<'a> {
    profile: &'a GramProfile,
    coeffs: [f64; 2],
}

impl LogNorm for GramNorm<'_> {
    fn ln_norm(&self, l: f64) -> Result<f64> {
        Ok(0.5 * self.profile.ln_norm_sq(self.coeffs, l)?)
    }
}

fn wrap_angle(mut t: f64) -> f64 {
    while t >= FRAC_PI_2 {
        t -= PI;
    }
    while t < -FRAC_PI_2 {
        t += PI;
    }
    t
}

/// Scans `θ` for the subordinate solution of `spec` at `energy`.
pub fn detect_subordinate(
    spec: &OperatorSpec,
    energy: f64,
    l_grid: &[f64],
    theta_grid_resolution: usize,
) -> Result<SubordinacyResult> {
    validate_grid(l_grid)?;
    if theta_grid_resolution < 3 {
        return Err(invalid("theta grid needs at least 3 points"));
    }
    if !energy.is_finite() {
        return Err(invalid("energy must be finite"));
    }
    let l_max = *l_grid.last().unwrap();
    let n_max = l_max.floor() as u64 + 1;
    let profile = GramProfile::build(spec, energy, n_max);

    let objective = |theta: f64| -> f64 {
        let (c1, c2) = pair_coefficients(wrap_angle(theta));
        let a = profile.ln_norm_sq(c1, l_max).unwrap_or(f64::INFINITY);
        let b = profile.ln_norm_sq(c2, l_max).unwrap_or(f64::NEG_INFINITY);
        a - b
    };
    let h = PI / theta_grid_resolution as f64;
    let (mut best_i, mut best) = (0, f64::INFINITY);
    for i in 0..theta_grid_resolution {
        let v = objective(-FRAC_PI_2 + i as f64 * h);
        if v < best {
            best = v;
            best_i = i;
        }
    }
    let centre = -FRAC_PI_2 + best_i as f64 * h;
    let theta_min = wrap_angle(golden_section(&objective, centre - h, centre + h, GOLDEN_STEPS));

    let (c1, c2) = pair_coefficients(theta_min);
    let phi2 = GramNorm {
        profile: &profile,
        coeffs: c2,
    };
    let refined = refine_decaying(spec, energy, l_max, theta_min);
    match refined {
        Some(phi1) => analyze(&phi1, &phi2, l_grid, phi1.theta),
        None => {
            let phi1 = GramNorm {
                profile: &profile,
                coeffs: c1,
            };
            analyze(&phi1, &phi2, l_grid, theta_min)
        }
    }
}

fn golden_section(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, steps: usize) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..steps {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        x1
    } else {
        x2
    }
}

/// Backward-propagated decaying solution, accepted only when it matches the
/// scanned angle; its trajectory is resolved far below the Gram precision
/// floor.
fn refine_decaying(
    spec: &OperatorSpec,
    energy: f64,
    l_max: f64,
    theta_min: f64,
) -> Option<Trajectory> {
    let n_far = 2 * (l_max.ceil() as u64) + 2;
    let traj = backward_solution(spec, energy, n_far)?;
    let theta = boundary_angle(traj.value(0), traj.value(1));
    let diff = wrap_angle(theta - theta_min).abs();
    if diff > REFINE_ANGLE_TOL {
        return None;
    }
    let (p1, _) = pair_initial_data(theta);
    let sign = if p1[0] * traj.value(0) + p1[1] * traj.value(1) >= 0.0 {
        1.0
    } else {
        -1.0
    };
    let mut t = traj.scaled(sign);
    t.theta = theta;
    Some(t)
}

/// Propagates a generic terminal vector backward from `n_far` with periodic
/// rescaling, then normalizes so that `‖(φ(0), φ(1))‖ = 1`. Sites far from
/// the origin may underflow to zero.
pub(crate) fn backward_solution(
    spec: &OperatorSpec,
    energy: f64,
    n_far: u64,
) -> Option<Trajectory> {
    let len = n_far as usize + 2;
    let mut w = vec![0.0; len];
    // log of the factor each stored value must be multiplied by, relative to
    // the scale in force when the backward sweep ends.
    let mut lost = vec![0.0; len];
    w[len - 1] = 1.0;
    w[len - 2] = 0.618_033_988_749_894_8;
    let mut total = 0.0;
    for n in (1..=n_far as usize).rev() {
        let k = n as u128;
        w[n - 1] = ((energy - spec.b(k)) * w[n] - spec.a(k) * w[n + 1]) / spec.a(k - 1);
        if !w[n - 1].is_finite() {
            return None;
        }
        lost[n - 1] = total;
        let m = w[n - 1].abs().max(w[n].abs());
        if m > RESCALE_AT {
            w[n - 1] /= m;
            w[n] /= m;
            total += m.ln();
            lost[n - 1] = total;
            lost[n] = total;
        }
    }
    // Value at site n is w[n]·exp(lost[n] - total) in units of the final scale.
    let mut values: Vec<f64> = (0..len).map(|n| w[n] * (lost[n] - total).exp()).collect();
    let norm = values[0].hypot(values[1]);
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    for v in values.iter_mut() {
        *v /= norm;
    }
    let theta = boundary_angle(values[0], values[1]);
    Some(Trajectory::new(values, spec.label.clone(), energy, theta))
}
