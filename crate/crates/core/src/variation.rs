//! Variation of parameters for random perturbations of a Jacobi operator.
//!
//! With `K(n) = diag(1, a(n)+ã(n))` the one-step matrices
//! `S̃_ω(n) = K(n)S_ω(n)K(n-1)^{-1}` are unimodular and independent across
//! sites. The correction matrix `D(n) = T̃_0(n)^{-1}T̃_ω(n)` obeys
//! `D(n-1) = (I + Ũ(n))D(n)` with
//! `Ũ(n) = T̃_0(n)^{-1}(S̃_0(n)S̃_ω(n)^{-1} - I)T̃_0(n)`.
//! When `ã ≡ 0` the conjugation is invisible (`D̃ = D`) and
//! `Ũ(n) = (b̃(n)/a(n)²)·U(n)`.
//!
//! Solutions of the amplitude recursion normalized at infinity are built from
//! Neumann layers `d^{k+1}(n) = Σ_{j>n} Ũ(j)d^k(j)` truncated at `n_tail`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocycle::{OperatorSpec, OVERFLOW_LIMIT};
use crate::error::{invalid, LabError, Result};
use crate::matrix::Matrix2;
use crate::randpert::{PerturbationModel, Realization};
use crate::stats::{self, DecadeVerdict};
use crate::subordinacy::pair_initial_data;
use crate::trajectory::Trajectory;

/// Accepted `|det T - 1|` for [`conjugated_generators`].
pub const UNIMODULAR_INPUT_TOL: f64 = 1e-10;
/// Relative agreement of the definitional and recursive correction matrices.
pub const FACTORIZATION_TOL: f64 = 1e-10;
pub const DEFAULT_K_MAX: usize = 12;
/// Layers whose largest entry falls below this are not computed further.
pub const LAYER_FLOOR: f64 = 1e-12;
/// Relative residual allowed for perturbed solutions.
pub const RESIDUAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionMode {
    SchrodingerDiagonal,
    GeneralJacobiConjugated,
}

impl CorrectionMode {
    pub fn for_realization(r: &Realization) -> Self {
        if r.has_a() {
            CorrectionMode::GeneralJacobiConjugated
        } else {
            CorrectionMode::SchrodingerDiagonal
        }
    }

    pub fn for_model(m: &PerturbationModel) -> Self {
        if m.has_a() {
            CorrectionMode::GeneralJacobiConjugated
        } else {
            CorrectionMode::SchrodingerDiagonal
        }
    }
}

/// `U = T^{-1}[[0,1],[0,0]]T`, `V = T^{-1}diag(1,-1)T`, `W = T^{-1}diag(0,1)T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Generators {
    pub u: Matrix2,
    pub v: Matrix2,
    pub w: Matrix2,
}

pub fn conjugated_generators(t: &Matrix2) -> Result<Generators> {
    if !t.is_finite() || !((t.det() - 1.0).abs() <= UNIMODULAR_INPUT_TOL) {
        return Err(invalid(format!("det T = {} is not 1", t.det())));
    }
    Ok(generators_of(t))
}

/// Closed forms valid for `det T = 1`, where `T^{-1}` is the adjugate.
fn generators_of(t: &Matrix2) -> Generators {
    let (t11, t12, t21, t22) = (t.m11, t.m12, t.m21, t.m22);
    let cross = t11 * t22 + t12 * t21;
    Generators {
        u: Matrix2::new(t21 * t22, t22 * t22, -t21 * t21, -t21 * t22),
        v: Matrix2::new(cross, 2.0 * t12 * t22, -2.0 * t11 * t21, -cross),
        w: Matrix2::new(-t12 * t21, -t12 * t22, t11 * t21, t11 * t22),
    }
}

#[inline]
fn tilde_step(energy: f64, b_total: f64, a_total: f64) -> Matrix2 {
    Matrix2::new((energy - b_total) / a_total, -1.0 / a_total, a_total, 0.0)
}

fn perturbed_a(spec: &OperatorSpec, r: &Realization, n: u64) -> Result<f64> {
    let a = spec.a(n as u128) + r.a(n);
    if !(a > 0.0) {
        return Err(invalid(format!("a(n) + ã(n) = {a} is not positive at site {n}")));
    }
    Ok(a)
}

/// `S̃_ω(n) = [[(E-b-b̃)/(a+ã), -1/(a+ã)], [a+ã, 0]]`.
pub fn k_conjugate(spec: &OperatorSpec, r: &Realization, energy: f64, n: u64) -> Result<Matrix2> {
    if n == 0 {
        return Err(invalid("k_conjugate needs n ≥ 1"));
    }
    let a = perturbed_a(spec, r, n)?;
    Ok(tilde_step(energy, spec.b(n as u128) + r.b(n), a))
}

/// `T̃_ω(n) = S̃_ω(n)···S̃_ω(1) = K_ω(n)T_ω(n)`.
pub fn k_conjugated_product(
    spec: &OperatorSpec,
    r: &Realization,
    energy: f64,
    n: u64,
) -> Result<Matrix2> {
    let mut t = Matrix2::IDENTITY;
    for k in 1..=n {
        t = k_conjugate(spec, r, energy, k)? * t;
    }
    Ok(t)
}

/// `S̃_0(n)S̃_ω(n)^{-1} - I = [[ã/a, b̃/(a(a+ã))], [0, -ã/(a+ã)]]`.
pub fn perturbation_kernel(a: f64, b_tilde: f64, a_tilde: f64) -> Matrix2 {
    let at = a + a_tilde;
    Matrix2::new(a_tilde / a, b_tilde / (a * at), 0.0, -a_tilde / at)
}

/// Coefficients of `Ũ = b̃₂·V + b̃₁·U + b̃₃·W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorWeights {
    /// `b̃/(a(a+ã))`
    pub b1: f64,
    /// `ã/a`
    pub b2: f64,
    /// `ã²/(a(a+ã))`
    pub b3: f64,
}

impl GeneratorWeights {
    pub fn new(a: f64, b_tilde: f64, a_tilde: f64) -> Self {
        let at = a + a_tilde;
        GeneratorWeights {
            b1: b_tilde / (a * at),
            b2: a_tilde / a,
            b3: a_tilde * a_tilde / (a * at),
        }
    }

    pub fn combine(&self, g: &Generators) -> Matrix2 {
        g.v.scale(self.b2) + g.u.scale(self.b1) + g.w.scale(self.b3)
    }
}

/// Conjugating frames `Φ̃(n) = T̃_0(n)·P` for one `(spec, E)`, shared by all
/// realizations. `P` is the identity or the solution-pair matrix
/// `[[φ₁(1), φ₂(1)], [φ₁(0), φ₂(0)]]` of a boundary angle.
#[derive(Debug, Clone)]
pub struct GeneratorTable {
    energy: f64,
    theta: Option<f64>,
    frames: Vec<Matrix2>,
    a: Vec<f64>,
}

impl GeneratorTable {
    pub fn new(spec: &OperatorSpec, energy: f64, n_max: u64) -> Result<Self> {
        Self::build(spec, energy, n_max, Matrix2::IDENTITY, None)
    }

    /// Frames in the basis of the solution pair at angle `theta`.
    pub fn for_pair(spec: &OperatorSpec, energy: f64, theta: f64, n_max: u64) -> Result<Self> {
        let (p1, p2) = pair_initial_data(theta);
        let basis = Matrix2::new(p1[1], p2[1], p1[0], p2[0]);
        Self::build(spec, energy, n_max, basis, Some(theta))
    }

    fn build(
        spec: &OperatorSpec,
        energy: f64,
        n_max: u64,
        basis: Matrix2,
        theta: Option<f64>,
    ) -> Result<Self> {
        if !energy.is_finite() {
            return Err(invalid("energy must be finite"));
        }
        let mut frames = Vec::with_capacity(n_max as usize + 1);
        let mut a = Vec::with_capacity(n_max as usize + 2);
        let mut f = basis;
        frames.push(f);
        a.push(1.0);
        for n in 1..=n_max {
            let an = spec.a(n as u128);
            a.push(an);
            f = tilde_step(energy, spec.b(n as u128), an) * f;
            if !f.is_finite() || f.max_abs() > OVERFLOW_LIMIT.sqrt() {
                return Err(LabError::Overflow { site: n as u128 });
            }
            frames.push(f);
        }
        a.push(spec.a(n_max as u128 + 1));
        Ok(GeneratorTable {
            energy,
            theta,
            frames,
            a,
        })
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn theta(&self) -> Option<f64> {
        self.theta
    }

    pub fn n_max(&self) -> u64 {
        self.frames.len() as u64 - 1
    }

    pub fn frame(&self, n: u64) -> &Matrix2 {
        &self.frames[n as usize]
    }

    pub fn a(&self, n: u64) -> f64 {
        self.a[n as usize]
    }

    pub fn generators(&self, n: u64) -> Generators {
        generators_of(&self.frames[n as usize])
    }

    /// `Ũ(n)` for the perturbation values at site `n`.
    pub fn u_tilde(&self, n: u64, b_tilde: f64, a_tilde: f64) -> Matrix2 {
        if b_tilde == 0.0 && a_tilde == 0.0 {
            return Matrix2::ZERO;
        }
        let a = self.a(n);
        let g = self.generators(n);
        if a_tilde == 0.0 {
            g.u.scale(b_tilde / (a * a))
        } else {
            GeneratorWeights::new(a, b_tilde, a_tilde).combine(&g)
        }
    }

    fn check_site_range(&self, n: u64) -> Result<()> {
        if n > self.n_max() {
            return Err(LabError::InsufficientData(format!(
                "site {n} is beyond the generator table (n_max = {})",
                self.n_max()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionState {
    /// `D(n)` from the recursion factors.
    pub d: Matrix2,
    pub n: u64,
    pub mode: CorrectionMode,
    /// `ln ‖T̃_0(n)‖`.
    pub log_scale: f64,
    /// `‖D_def - D_rec‖ / (‖T̃_0‖·‖T̃_ω‖)`.
    pub discrepancy: f64,
}

/// Walks `n = 1, 2, …, n_max`, yielding `D(n)` and checking
/// `T̃_0(n)^{-1}T̃_ω(n)` against `(I+Ũ(n))^{-1}···(I+Ũ(1))^{-1}`.
pub struct CorrectionWalk<'a> {
    spec: &'a OperatorSpec,
    realization: &'a Realization,
    energy: f64,
    mode: CorrectionMode,
    n: u64,
    n_max: u64,
    t0: Matrix2,
    tw: Matrix2,
    d: Matrix2,
    failed: bool,
}

pub fn correction_recursion<'a>(
    spec: &'a OperatorSpec,
    realization: &'a Realization,
    energy: f64,
    n_max: u64,
    mode: CorrectionMode,
) -> Result<CorrectionWalk<'a>> {
    if !energy.is_finite() {
        return Err(invalid("energy must be finite"));
    }
    if mode == CorrectionMode::SchrodingerDiagonal && realization.has_a() {
        return Err(LabError::UnsupportedModel(
            "off-diagonal perturbation requires the conjugated mode".into(),
        ));
    }
    Ok(CorrectionWalk {
        spec,
        realization,
        energy,
        mode,
        n: 0,
        n_max,
        t0: Matrix2::IDENTITY,
        tw: Matrix2::IDENTITY,
        d: Matrix2::IDENTITY,
        failed: false,
    })
}

impl CorrectionWalk<'_> {
    fn advance(&mut self) -> Result<CorrectionState> {
        self.n += 1;
        let n = self.n;
        let a = self.spec.a(n as u128);
        let b = self.spec.b(n as u128);
        let (bt, at) = (self.realization.b(n), self.realization.a(n));
        let s0 = tilde_step(self.energy, b, a);
        let sw = tilde_step(self.energy, b + bt, perturbed_a(self.spec, self.realization, n)?);
        self.t0 = s0 * self.t0;
        self.tw = sw * self.tw;
        if !self.tw.is_finite()
            || self.t0.max_abs().max(self.tw.max_abs()) > OVERFLOW_LIMIT.sqrt()
        {
            return Err(LabError::Overflow { site: n as u128 });
        }
        let kernel = perturbation_kernel(a, bt, at);
        let u = self.t0.adjugate() * kernel * self.t0;
        // det(I + Ũ) = det(S̃_0 S̃_ω^{-1}) = 1, so the inverse is the adjugate.
        self.d = (Matrix2::IDENTITY + u).adjugate() * self.d;
        let definitional = self.t0.adjugate() * self.tw;
        let scale = self.t0.norm() * self.tw.norm();
        let discrepancy = (definitional - self.d).norm() / scale;
        if !(discrepancy <= FACTORIZATION_TOL) {
            return Err(LabError::InternalConsistency {
                site: n as u128,
                detail: format!(
                    "definitional and recursive correction matrices differ by {discrepancy:e}"
                ),
            });
        }
        Ok(CorrectionState {
            d: self.d,
            n,
            mode: self.mode,
            log_scale: self.t0.norm().ln(),
            discrepancy,
        })
    }

    /// The perturbed conjugated product `T̃_ω(n)` at the current site.
    pub fn perturbed_product(&self) -> Matrix2 {
        self.tw
    }

    pub fn unperturbed_product(&self) -> Matrix2 {
        self.t0
    }
}

impl Iterator for CorrectionWalk<'_> {
    type Item = Result<CorrectionState>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.n >= self.n_max {
            return None;
        }
        let out = self.advance();
        if out.is_err() {
            self.failed = true;
        }
        Some(out)
    }
}

/// `D(n)` at the requested (increasing) sites.
pub fn correction_checkpoints(
    spec: &OperatorSpec,
    realization: &Realization,
    energy: f64,
    mode: CorrectionMode,
    checkpoints: &[u64],
) -> Result<Vec<CorrectionState>> {
    if checkpoints.windows(2).any(|w| w[1] <= w[0]) || checkpoints.first() == Some(&0) {
        return Err(invalid("checkpoints must be positive and increasing"));
    }
    let n_max = checkpoints.last().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next = 0;
    for state in correction_recursion(spec, realization, energy, n_max, mode)? {
        let state = state?;
        if state.n == checkpoints[next] {
            out.push(state);
            next += 1;
        }
    }
    Ok(out)
}

/// Ensemble statistics of `D(n)` under a diagonal or general model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionEnsembleReport {
    pub energy: f64,
    pub trials: usize,
    pub mode: CorrectionMode,
    pub checkpoints: Vec<u64>,
    /// Entrywise sample mean of `D(n)` at each checkpoint.
    pub mean: Vec<Matrix2>,
    /// Entrywise standard error of the mean.
    pub standard_error: Vec<Matrix2>,
    /// Largest `|mean - I| / se` over the four entries.
    pub max_z_from_identity: Vec<f64>,
    pub increment_sites: Vec<u64>,
    /// Median over realizations of `‖D(2n) - D(n)‖`.
    pub median_increment: Vec<f64>,
    /// Log-log slope of `median_increment` against `n`.
    pub increment_slope: f64,
}

pub fn correction_ensemble(
    spec: &OperatorSpec,
    model: &PerturbationModel,
    energy: f64,
    checkpoints: &[u64],
    increment_sites: &[u64],
    trials: usize,
    base_seed: u64,
) -> Result<CorrectionEnsembleReport> {
    model.validate()?;
    if trials < 2 {
        return Err(invalid("the ensemble needs at least two trials"));
    }
    let mut sites: Vec<u64> = checkpoints
        .iter()
        .copied()
        .chain(increment_sites.iter().copied())
        .chain(increment_sites.iter().map(|n| 2 * n))
        .collect();
    sites.sort_unstable();
    sites.dedup();
    if sites.first() == Some(&0) {
        return Err(invalid("sites must be positive"));
    }
    let n_max = sites.last().copied().unwrap_or(1);
    model.check_delta(spec, n_max)?;
    let mode = CorrectionMode::for_model(model);
    let runs: Vec<Vec<Matrix2>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let r = model.sample(base_seed.wrapping_add(t), n_max);
            let states = correction_checkpoints(spec, &r, energy, mode, &sites)?;
            Ok(states.into_iter().map(|s| s.d).collect())
        })
        .collect::<Result<_>>()?;
    let index = |n: u64| sites.binary_search(&n).expect("site was requested");

    let mut mean = Vec::new();
    let mut standard_error = Vec::new();
    let mut max_z = Vec::new();
    for &c in checkpoints {
        let i = index(c);
        let mut m = [0.0; 4];
        let mut se = [0.0; 4];
        let mut z: f64 = 0.0;
        let ident = Matrix2::IDENTITY.entries();
        for e in 0..4 {
            let xs: Vec<f64> = runs.iter().map(|r| r[i].entries()[e]).collect();
            let (mu, s) = stats::mean_and_se(&xs);
            m[e] = mu;
            se[e] = s;
            let dev = (mu - ident[e]).abs();
            z = z.max(if s > 0.0 {
                dev / s
            } else if dev == 0.0 {
                0.0
            } else {
                f64::INFINITY
            });
        }
        mean.push(Matrix2::new(m[0], m[1], m[2], m[3]));
        standard_error.push(Matrix2::new(se[0], se[1], se[2], se[3]));
        max_z.push(z);
    }
    let median_increment: Vec<f64> = increment_sites
        .iter()
        .map(|&n| {
            let (i, j) = (index(n), index(2 * n));
            let xs: Vec<f64> = runs.iter().map(|r| (r[j] - r[i]).norm()).collect();
            stats::median(&xs)
        })
        .collect();
    let increment_slope = if increment_sites.len() >= 2
        && median_increment.iter().all(|x| *x > 0.0)
    {
        let x: Vec<f64> = increment_sites.iter().map(|n| *n as f64).collect();
        stats::log_log_slope(&x, &median_increment)?.slope
    } else {
        f64::NAN
    };
    Ok(CorrectionEnsembleReport {
        energy,
        trials,
        mode,
        checkpoints: checkpoints.to_vec(),
        mean,
        standard_error,
        max_z_from_identity: max_z,
        increment_sites: increment_sites.to_vec(),
        median_increment,
        increment_slope,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// Normalized to `(0, 1)` at infinity.
    Plus,
    /// Normalized to `(1, 0)` at infinity.
    Minus,
}

impl Branch {
    pub fn initial(self) -> [f64; 2] {
        match self {
            Branch::Plus => [0.0, 1.0],
            Branch::Minus => [1.0, 0.0],
        }
    }
}

/// Positive nondecreasing weight `f₊(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FPlus {
    One,
    /// `f₊(n) = n^eta`, `eta ≥ 0`.
    Power { eta: f64 },
}

impl FPlus {
    pub fn value(&self, n: u64) -> f64 {
        match *self {
            FPlus::One => 1.0,
            FPlus::Power { eta } => (n.max(1) as f64).powf(eta),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            FPlus::One => Ok(()),
            FPlus::Power { eta } if eta >= 0.0 && eta.is_finite() => Ok(()),
            FPlus::Power { eta } => Err(invalid(format!("f₊ exponent {eta} must be ≥ 0"))),
        }
    }
}

/// `X M X^{-1}` with `X = diag(1, f)`.
fn weighted(m: &Matrix2, f: f64) -> Matrix2 {
    Matrix2::new(m.m11, m.m12 / f, m.m21 * f, m.m22)
}

/// The amplitudes `d^±(n)` at one site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplitudePair {
    pub d1: f64,
    pub d2: f64,
    pub n: u64,
    pub branch: Branch,
    pub f_plus_weight: f64,
}

impl AmplitudePair {
    /// `d2·f₊(n)`.
    pub fn weighted_d2(&self) -> f64 {
        self.d2 * self.f_plus_weight
    }
}

/// Moment-based bounds on the layer contraction of one `(spec, E, model)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionProfile {
    pub mode: CorrectionMode,
    /// Value of the contraction functional `c(N)` for `N = 0..=n_max`,
    /// without the tail beyond `n_max`.
    pub functional: Vec<f64>,
    /// Bound on the contribution of sites beyond `n_max`.
    pub tail_bound: f64,
    /// Smallest `N` with `c(N) + tail_bound ≤ 1/4`.
    pub n_quarter: Option<u64>,
    /// Decade test of the decay condition; for the conjugated mode the
    /// least favorable of the four conditions.
    pub decay: DecadeVerdict,
}

impl ContractionProfile {
    /// `c(N)` including the tail bound.
    pub fn at(&self, n: u64) -> f64 {
        let i = (n as usize).min(self.functional.len() - 1);
        self.functional[i] + self.tail_bound
    }
}

fn geometric_tail(v: &DecadeVerdict) -> f64 {
    if v.partial_sum == 0.0 && v.decade_sums.iter().all(|s| *s == 0.0) {
        return 0.0;
    }
    if !v.convergent || v.ratios.is_empty() {
        return f64::INFINITY;
    }
    let window = v.ratios.len().min(stats::DECADE_WINDOW);
    let r = v.ratios[v.ratios.len() - window..]
        .iter()
        .fold(0.0f64, |m, x| m.max(*x));
    let last = *v.decade_sums.last().unwrap();
    last * r / (1.0 - r)
}

fn suffix_sums(terms: &[f64]) -> Vec<f64> {
    // out[N] = Σ_{j>N} terms[j-1], N = 0..=len
    let mut out = vec![0.0; terms.len() + 1];
    for n in (0..terms.len()).rev() {
        out[n] = out[n + 1] + terms[n];
    }
    out
}

fn least_favorable(verdicts: Vec<DecadeVerdict>) -> DecadeVerdict {
    verdicts
        .iter()
        .find(|v| !v.convergent)
        .cloned()
        .unwrap_or_else(|| verdicts.into_iter().next().unwrap())
}

/// Contraction functional from the model's closed-form moments.
///
/// Diagonal mode: `c(N) = Σ_{j>N} ⟨b̃(j)²⟩/a(j)⁴·‖X U(j) X^{-1}‖²_HS`, which
/// bounds the ratio of consecutive layer second moments. Conjugated mode:
/// `c(N) = 2Σ(⟨b̃₁²⟩‖U‖² + ⟨b̃₂²⟩‖V‖²) + 2(Σ⟨b̃₃²⟩^{1/2}‖W‖)²`.
pub fn contraction_profile(
    table: &GeneratorTable,
    model: &PerturbationModel,
    branch: Branch,
    f_plus: FPlus,
) -> Result<ContractionProfile> {
    model.validate()?;
    f_plus.validate()?;
    let n_max = table.n_max();
    let weight = |n: u64| match branch {
        Branch::Plus => 1.0,
        Branch::Minus => f_plus.value(n),
    };
    let mode = CorrectionMode::for_model(model);
    match mode {
        CorrectionMode::SchrodingerDiagonal => {
            let mut c = Vec::with_capacity(n_max as usize);
            let mut decay = Vec::with_capacity(n_max as usize);
            for n in 1..=n_max {
                let m2 = model.b_second(n);
                if m2 == 0.0 {
                    c.push(0.0);
                    decay.push(0.0);
                    continue;
                }
                let a = table.a(n);
                let u = table.generators(n).u.scale(1.0 / (a * a));
                c.push(m2 * weighted(&u, weight(n)).hs_norm_sq());
                let f = f_plus.value(n);
                decay.push(
                    m2 * (u.m11 * u.m11
                        + u.m12 * u.m12
                        + u.m22 * u.m22
                        + u.m21 * u.m21 * f * f),
                );
            }
            let verdict = DecadeVerdict::from_slice(&decay);
            let tail_bound = geometric_tail(&DecadeVerdict::from_slice(&c));
            let functional = suffix_sums(&c);
            let n_quarter = (0..=n_max).find(|&k| functional[k as usize] + tail_bound <= 0.25);
            Ok(ContractionProfile {
                mode,
                functional,
                tail_bound,
                n_quarter,
                decay: verdict,
            })
        }
        CorrectionMode::GeneralJacobiConjugated => {
            let law = model.a.as_ref().expect("conjugated mode has an a-law");
            let mut uv = Vec::with_capacity(n_max as usize);
            let mut wt = Vec::with_capacity(n_max as usize);
            let (mut c1, mut c2, mut c3, mut c23) = (vec![], vec![], vec![], vec![]);
            for n in 1..=n_max {
                let a = table.a(n);
                let bound = law.bound(n);
                if !(a - bound > 0.0) {
                    return Err(invalid(format!("a(n) - sup|ã(n)| ≤ 0 at site {n}")));
                }
                let inv = 1.0 / (a - bound);
                let g = table.generators(n);
                let f = weight(n);
                let (u, v, w) = (weighted(&g.u, f), weighted(&g.v, f), weighted(&g.w, f));
                let b1 = model.b_second(n) * inv * inv / (a * a);
                let b2 = model.a_second(n) / (a * a);
                let b3 = model.a_fourth(n) * inv * inv / (a * a);
                let b23 = model.a_fourth(n).powf(0.75) * inv / (a * a);
                uv.push(2.0 * (b1 * u.hs_norm_sq() + b2 * v.hs_norm_sq()));
                wt.push(b3.sqrt() * w.hs_norm());
                c1.push(b1 * g.u.hs_norm_sq());
                c2.push(b2 * g.v.hs_norm_sq());
                c3.push(b3.sqrt() * g.w.hs_norm());
                c23.push(b23 * g.v.hs_norm() * g.w.hs_norm());
            }
            let s_uv = suffix_sums(&uv);
            let s_w = suffix_sums(&wt);
            let tail_uv = geometric_tail(&DecadeVerdict::from_slice(&uv));
            let tail_w = geometric_tail(&DecadeVerdict::from_slice(&wt));
            let functional: Vec<f64> = s_uv
                .iter()
                .zip(&s_w)
                .map(|(x, y)| x + 2.0 * (y + tail_w) * (y + tail_w) - 2.0 * tail_w * tail_w)
                .collect();
            let tail_bound = tail_uv + 2.0 * tail_w * tail_w;
            let n_quarter = (0..=n_max).find(|&k| functional[k as usize] + tail_bound <= 0.25);
            let decay = least_favorable(vec![
                DecadeVerdict::from_slice(&c1),
                DecadeVerdict::from_slice(&c2),
                DecadeVerdict::from_slice(&c3),
                DecadeVerdict::from_slice(&c23),
            ]);
            Ok(ContractionProfile {
                mode,
                functional,
                tail_bound,
                n_quarter,
                decay,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeumannConfig {
    pub n_start: u64,
    pub n_tail: u64,
    pub k_max: usize,
    pub branch: Branch,
    pub f_plus: FPlus,
}

impl NeumannConfig {
    pub fn new(n_start: u64, n_tail: u64, branch: Branch) -> Self {
        NeumannConfig {
            n_start,
            n_tail,
            k_max: DEFAULT_K_MAX,
            branch,
            f_plus: FPlus::One,
        }
    }

    fn validate(&self, table: &GeneratorTable) -> Result<()> {
        self.f_plus.validate()?;
        if self.n_start >= self.n_tail {
            return Err(invalid("n_start must be below n_tail"));
        }
        if self.k_max == 0 {
            return Err(invalid("k_max must be positive"));
        }
        table.check_site_range(self.n_tail)
    }
}

/// Neumann layers of one realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeumannRealization {
    pub seed: u64,
    pub branch: Branch,
    pub n_start: u64,
    pub n_tail: u64,
    /// Number of layers `k ≥ 1` actually summed.
    pub layers_used: usize,
    /// `‖X(n_start)d^k(n_start)‖²` for `k = 0..=layers_used`.
    pub layer_norms_sq: Vec<f64>,
    /// `max_n ‖X(n)d^k(n)‖` over `[n_start, n_tail]`.
    pub layer_sup: Vec<f64>,
    pub amplitudes: Vec<AmplitudePair>,
}

/// Sums the layers `d^k`, `k ≤ k_max`, over `[n_start, n_tail]` with
/// `d^k(j) = 0` for `j > n_tail`, `k ≥ 1`.
pub fn neumann_series(
    table: &GeneratorTable,
    realization: &Realization,
    config: &NeumannConfig,
    checkpoints: &[u64],
) -> Result<NeumannRealization> {
    config.validate(table)?;
    if checkpoints
        .iter()
        .any(|c| *c < config.n_start || *c > config.n_tail)
    {
        return Err(invalid("checkpoints must lie in [n_start, n_tail]"));
    }
    let (lo, hi) = (config.n_start, config.n_tail);
    let len = (hi - lo + 1) as usize;
    let gens: Vec<Matrix2> = (lo..=hi)
        .map(|n| table.u_tilde(n, realization.b(n), realization.a(n)))
        .collect();
    let weights: Vec<f64> = (lo..=hi).map(|n| config.f_plus.value(n)).collect();
    let norm_sq = |v: [f64; 2], i: usize| -> f64 {
        let w = match config.branch {
            Branch::Plus => 1.0,
            Branch::Minus => weights[i],
        };
        v[0] * v[0] + v[1] * v[1] * w * w
    };

    let e = config.branch.initial();
    let mut layer = vec![e; len];
    let mut total = vec![e; len];
    let mut layer_norms_sq = vec![norm_sq(e, 0)];
    let mut layer_sup = vec![(0..len).map(|i| norm_sq(e, i)).fold(0.0, f64::max).sqrt()];
    let mut layers_used = 0;
    for _ in 0..config.k_max {
        let mut next = vec![[0.0; 2]; len];
        let mut acc = [0.0; 2];
        for i in (0..len).rev() {
            next[i] = acc;
            let add = gens[i].apply(layer[i]);
            acc = [acc[0] + add[0], acc[1] + add[1]];
        }
        let sup = (0..len).map(|i| norm_sq(next[i], i)).fold(0.0, f64::max).sqrt();
        if !sup.is_finite() {
            return Err(LabError::Divergent(format!(
                "Neumann layer {} is not finite",
                layers_used + 1
            )));
        }
        for i in 0..len {
            total[i] = [total[i][0] + next[i][0], total[i][1] + next[i][1]];
        }
        layers_used += 1;
        layer_norms_sq.push(norm_sq(next[0], 0));
        layer_sup.push(sup);
        layer = next;
        if sup < LAYER_FLOOR {
            break;
        }
    }
    let amplitudes = checkpoints
        .iter()
        .map(|&n| {
            let i = (n - lo) as usize;
            AmplitudePair {
                d1: total[i][0],
                d2: total[i][1],
                n,
                branch: config.branch,
                f_plus_weight: weights[i],
            }
        })
        .collect();
    Ok(NeumannRealization {
        seed: realization.seed,
        branch: config.branch,
        n_start: lo,
        n_tail: hi,
        layers_used,
        layer_norms_sq,
        layer_sup,
        amplitudes,
    })
}

/// Exact resummation of all layers: `d(n_tail) = e`,
/// `d(n-1) = (I+Ũ(n))d(n)` down to `n = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeStream {
    pub branch: Branch,
    pub theta: Option<f64>,
    /// `values[n] = d(n)` for `n = 0..=n_tail`.
    pub values: Vec<[f64; 2]>,
}

impl AmplitudeStream {
    pub fn n_tail(&self) -> u64 {
        self.values.len() as u64 - 1
    }

    pub fn at(&self, n: u64) -> [f64; 2] {
        self.values[n as usize]
    }
}

pub fn amplitude_stream(
    table: &GeneratorTable,
    realization: &Realization,
    branch: Branch,
    n_tail: u64,
) -> Result<AmplitudeStream> {
    table.check_site_range(n_tail)?;
    let mut values = vec![[0.0; 2]; n_tail as usize + 1];
    let mut d = branch.initial();
    values[n_tail as usize] = d;
    for n in (1..=n_tail).rev() {
        let u = table.u_tilde(n, realization.b(n), realization.a(n));
        let add = u.apply(d);
        d = [d[0] + add[0], d[1] + add[1]];
        if !(d[0].is_finite() && d[1].is_finite()) {
            return Err(LabError::Overflow { site: n as u128 });
        }
        values[n as usize - 1] = d;
    }
    Ok(AmplitudeStream {
        branch,
        theta: table.theta(),
        values,
    })
}

/// `ψ₁ = d⁻·(φ₁, φ₂)`, `ψ₂ = d⁺·(φ₁, φ₂)` on sites `0..=n_tail`, using
/// `ψ(n) = d(n-1)·φ(n)` for `n ≥ 1` and `ψ(0) = d(0)·φ(0)`.
pub fn perturbed_solutions(
    spec: &OperatorSpec,
    realization: &Realization,
    energy: f64,
    theta_star: f64,
    d_minus: &AmplitudeStream,
    d_plus: &AmplitudeStream,
) -> Result<(Trajectory, Trajectory)> {
    if d_minus.branch != Branch::Minus || d_plus.branch != Branch::Plus {
        return Err(invalid("amplitude streams have the wrong branches"));
    }
    for s in [d_minus, d_plus] {
        if s.theta != Some(theta_star) {
            return Err(invalid("amplitude stream was built for another boundary angle"));
        }
    }
    let n_tail = d_minus.n_tail().min(d_plus.n_tail());
    let (phi1, phi2) = crate::subordinacy::solve_pair(spec, energy, theta_star, n_tail)?;
    let build = |d: &AmplitudeStream| -> Vec<f64> {
        (0..=n_tail)
            .map(|n| {
                let c = d.at(n.saturating_sub(1));
                let k = n as usize;
                c[0] * phi1.value(k) + c[1] * phi2.value(k)
            })
            .collect()
    };
    let label = format!("{} perturbed (seed {})", spec.label, realization.seed);
    let psi1 = Trajectory::new(build(d_minus), label.clone(), energy, theta_star);
    let psi2 = Trajectory::new(build(d_plus), label, energy, theta_star);
    for psi in [&psi1, &psi2] {
        if let Some((site, r)) = perturbed_residual(spec, realization, energy, psi)? {
            return Err(LabError::InternalConsistency {
                site: site as u128,
                detail: format!("perturbed recursion residual {r:e}"),
            });
        }
    }
    Ok((psi1, psi2))
}

/// First interior site whose relative residual against the perturbed
/// recursion exceeds [`RESIDUAL_TOL`].
fn perturbed_residual(
    spec: &OperatorSpec,
    r: &Realization,
    energy: f64,
    psi: &Trajectory,
) -> Result<Option<(u64, f64)>> {
    let v = psi.values();
    for n in 1..psi.last_site() as u64 {
        let k = n as usize;
        let a_n = perturbed_a(spec, r, n)?;
        let a_p = if n == 1 { 1.0 } else { perturbed_a(spec, r, n - 1)? };
        let b = spec.b(n as u128) + r.b(n);
        let terms = [a_n * v[k + 1], a_p * v[k - 1], b * v[k], -energy * v[k]];
        let scale: f64 = terms.iter().map(|t| t.abs()).sum();
        let res = terms.iter().sum::<f64>().abs();
        if scale > 0.0 && res > RESIDUAL_TOL * scale {
            return Ok(Some((n, res / scale)));
        }
    }
    Ok(None)
}

/// Summary of Neumann constructions over an ensemble of realizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeumannEnsembleReport {
    pub energy: f64,
    pub branch: Branch,
    pub trials: usize,
    pub n_quarter: Option<u64>,
    pub n_start: u64,
    pub n_tail: u64,
    /// Contraction functional at `n_start`, tail included.
    pub contraction_at_start: f64,
    pub tail_bound: f64,
    /// Sample mean and standard error of `‖X d^k(n_start)‖²`, `k = 0, 1, …`.
    pub layer_moments: Vec<(f64, f64)>,
    /// Every sampled layer moment is within 3 standard errors of `(1/4)^k`
    /// or below it.
    pub contraction_certified: bool,
    /// Least-squares ratio of consecutive layer moments (exp of the slope of
    /// `ln m_k` against `k`, over layers with positive moments).
    pub geometric_ratio: f64,
    pub checkpoints: Vec<u64>,
    /// Median `|d₁|` (plus) or `|d₁ - 1|` (minus) at each checkpoint.
    pub median_first_deviation: Vec<f64>,
    /// Median `|d₂ - 1|` (plus) or `|d₂·f₊|` (minus) at each checkpoint.
    pub median_second_deviation: Vec<f64>,
    /// Median relative distance between `d(n_start)` and
    /// `D(n_start)D(n_tail)^{-1}e` from the definitional path.
    pub definitional_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeumannEnsembleConfig {
    /// Defaults to `N_{1/4}`.
    pub n_start: Option<u64>,
    pub n_tail: u64,
    pub k_max: usize,
    pub branch: Branch,
    pub f_plus: FPlus,
    pub trials: usize,
    pub base_seed: u64,
    pub checkpoints: Vec<u64>,
}

pub fn neumann_ensemble(
    spec: &OperatorSpec,
    model: &PerturbationModel,
    energy: f64,
    cfg: &NeumannEnsembleConfig,
) -> Result<NeumannEnsembleReport> {
    model.validate()?;
    model.check_delta(spec, cfg.n_tail)?;
    if cfg.trials < 2 {
        return Err(invalid("the ensemble needs at least two trials"));
    }
    let table = GeneratorTable::new(spec, energy, cfg.n_tail)?;
    let profile = contraction_profile(&table, model, cfg.branch, cfg.f_plus)?;
    if !profile.decay.convergent {
        return Err(LabError::Divergent(format!(
            "decay condition fails its decade test at decade {:?}",
            profile.decay.failing_decade
        )));
    }
    let n_start = match cfg.n_start {
        Some(n) => n,
        None => profile.n_quarter.ok_or_else(|| {
            LabError::Divergent("the contraction functional never drops to 1/4".into())
        })?,
    }
    .max(1);
    let config = NeumannConfig {
        n_start,
        n_tail: cfg.n_tail,
        k_max: cfg.k_max,
        branch: cfg.branch,
        f_plus: cfg.f_plus,
    };
    let mode = CorrectionMode::for_model(model);
    let e = cfg.branch.initial();

    let runs: Vec<(NeumannRealization, f64)> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| {
            let r = model.sample(cfg.base_seed.wrapping_add(t), cfg.n_tail);
            let mut cps = cfg.checkpoints.clone();
            cps.push(n_start);
            cps.sort_unstable();
            cps.dedup();
            let run = neumann_series(&table, &r, &config, &cps)?;
            let states = correction_checkpoints(spec, &r, energy, mode, &[n_start, cfg.n_tail])?;
            let reference = states[0].d * states[1].d.adjugate();
            let target = reference.apply(e);
            let got = run
                .amplitudes
                .iter()
                .find(|a| a.n == n_start)
                .map(|a| [a.d1, a.d2])
                .expect("n_start is a checkpoint");
            let diff = ((got[0] - target[0]).powi(2) + (got[1] - target[1]).powi(2)).sqrt();
            let scale = (target[0].powi(2) + target[1].powi(2)).sqrt();
            Ok((run, diff / scale))
        })
        .collect::<Result<_>>()?;

    let depth = runs.iter().map(|(r, _)| r.layer_norms_sq.len()).max().unwrap_or(1);
    let mut layer_moments = Vec::with_capacity(depth);
    for k in 0..depth {
        let xs: Vec<f64> = runs
            .iter()
            .map(|(r, _)| r.layer_norms_sq.get(k).copied().unwrap_or(0.0))
            .collect();
        layer_moments.push(stats::mean_and_se(&xs));
    }
    let contraction_certified = layer_moments
        .iter()
        .enumerate()
        .all(|(k, (m, se))| *m - 3.0 * se <= 0.25f64.powi(k as i32));
    let positive: Vec<(f64, f64)> = layer_moments
        .iter()
        .enumerate()
        .filter(|(_, (m, _))| *m > 0.0)
        .map(|(k, (m, _))| (k as f64, m.ln()))
        .collect();
    let geometric_ratio = if positive.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = positive.into_iter().unzip();
        stats::fit_line(&x, &y)?.slope.exp()
    } else {
        0.0
    };

    let mut first = Vec::new();
    let mut second = Vec::new();
    for &c in &cfg.checkpoints {
        let pick = |f: &dyn Fn(&AmplitudePair) -> f64| -> f64 {
            let xs: Vec<f64> = runs
                .iter()
                .map(|(r, _)| f(r.amplitudes.iter().find(|a| a.n == c).unwrap()))
                .collect();
            stats::median(&xs)
        };
        match cfg.branch {
            Branch::Plus => {
                first.push(pick(&|a| a.d1.abs()));
                second.push(pick(&|a| (a.d2 - 1.0).abs()));
            }
            Branch::Minus => {
                first.push(pick(&|a| (a.d1 - 1.0).abs()));
                second.push(pick(&|a| a.weighted_d2().abs()));
            }
        }
    }
    let errors: Vec<f64> = runs.iter().map(|(_, e)| *e).collect();
    Ok(NeumannEnsembleReport {
        energy,
        branch: cfg.branch,
        trials: cfg.trials,
        n_quarter: profile.n_quarter,
        n_start,
        n_tail: cfg.n_tail,
        contraction_at_start: profile.at(n_start),
        tail_bound: profile.tail_bound,
        layer_moments,
        contraction_certified,
        geometric_ratio,
        checkpoints: cfg.checkpoints.clone(),
        median_first_deviation: first,
        median_second_deviation: second,
        definitional_rel_error: stats::median(&errors),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocycle::transfer_product;
    use crate::randpert::{Distribution, SiteLaw};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unimodular(rng: &mut ChaCha8Rng) -> Matrix2 {
        let (a, b, c): (f64, f64, f64) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let a = if a.abs() < 0.1 { 0.5 } else { a };
        // [[a, b], [c, (1 + bc)/a]] has det 1.
        Matrix2::new(a, b, c, (1.0 + b * c) / a)
    }

    #[test]
    fn identity_generators() {
        let g = conjugated_generators(&Matrix2::IDENTITY).unwrap();
        assert_eq!(g.u, Matrix2::RAISE);
        assert_eq!(g.v, Matrix2::REFLECT);
        assert_eq!(g.w, Matrix2::LOWER_PROJECTION);
        assert!(conjugated_generators(&Matrix2::diag(2.0, 2.0)).is_err());
    }

    #[test]
    fn generators_match_explicit_conjugation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = random_unimodular(&mut rng);
            let g = conjugated_generators(&t).unwrap();
            let inv = t.inverse().unwrap();
            let tol = 1e-12 * t.norm().powi(4);
            assert!((g.u - inv * Matrix2::RAISE * t).max_abs() <= tol);
            assert!((g.v - inv * Matrix2::REFLECT * t).max_abs() <= tol);
            assert!((g.w - inv * Matrix2::LOWER_PROJECTION * t).max_abs() <= tol);
            assert!(g.u.norm() <= t.norm().powi(2) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn k_conjugation_reduces_to_plain_step() {
        let free = OperatorSpec::free();
        let r = Realization::zeros(10);
        for n in 1..=10 {
            let s = k_conjugate(&free, &r, 0.7, n).unwrap();
            assert_eq!(s, free.step(0.7, n as u128));
        }
    }

    #[test]
    fn k_conjugated_product_matches_k_times_t() {
        let spec = OperatorSpec::new(
            crate::cocycle::Coefficients::Periodic {
                a: vec![1.0, 1.3, 0.8],
                b: vec![0.2, -0.1, 0.0],
            },
            "periodic",
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b: Vec<f64> = (0..40).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let a: Vec<f64> = (0..40).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let r = Realization::from_values(&b, Some(&a));
        // Oracle: the perturbed spec multiplied site by site, then K(n).
        let pa: Vec<f64> = (1..=40u128).map(|n| spec.a(n) + a[n as usize - 1]).collect();
        let pb: Vec<f64> = (1..=40u128).map(|n| spec.b(n) + b[n as usize - 1]).collect();
        let perturbed = OperatorSpec::new(
            crate::cocycle::Coefficients::Explicit { a: pa.clone(), b: pb, tail_a: 1.0, tail_b: 0.0 },
            "perturbed",
        )
        .unwrap();
        for n in [1u64, 7, 40] {
            let t = transfer_product(&perturbed, 0.4, n as u128).unwrap();
            let expected = Matrix2::diag(1.0, pa[n as usize - 1]) * t;
            let got = k_conjugated_product(&spec, &r, 0.4, n).unwrap();
            assert!(got.max_rel_diff(&expected) < 1e-10);
            let s = k_conjugate(&spec, &r, 0.4, n).unwrap();
            assert!((s.det() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn kernel_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let t = random_unimodular(&mut rng);
            let a = rng.gen_range(0.5..2.0);
            let bt = rng.gen_range(-0.3..0.3);
            let at = rng.gen_range(-0.2..0.2);
            let direct = t.inverse().unwrap() * perturbation_kernel(a, bt, at) * t;
            let combined = GeneratorWeights::new(a, bt, at).combine(&generators_of(&t));
            assert!((direct - combined).max_abs() < 1e-11 * t.norm().powi(2));
            // Oracle: S̃_0 S̃_ω^{-1} - I from the explicit steps.
            let s0 = tilde_step(0.3, 0.1, a);
            let sw = tilde_step(0.3, 0.1 + bt, a + at);
            let k = s0 * sw.adjugate() - Matrix2::IDENTITY;
            assert!((k - perturbation_kernel(a, bt, at)).max_abs() < 1e-13);
        }
    }

    #[test]
    fn zero_realization_has_identity_correction() {
        let free = OperatorSpec::free();
        let r = Realization::zeros(500);
        for s in correction_recursion(&free, &r, 0.5, 500, CorrectionMode::SchrodingerDiagonal).unwrap() {
            assert_eq!(s.unwrap().d, Matrix2::IDENTITY);
        }
    }

    #[test]
    fn single_site_perturbation_freezes_correction() {
        let free = OperatorSpec::free();
        let mut b = vec![0.0; 60];
        b[19] = 0.3;
        let r = Realization::from_values(&b, None);
        let states: Vec<CorrectionState> = correction_recursion(&free, &r, 1.1, 60, CorrectionMode::SchrodingerDiagonal)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        let t0 = transfer_product(&free, 1.1, 20).unwrap();
        let u = t0.inverse().unwrap() * Matrix2::RAISE * t0;
        let expected = Matrix2::IDENTITY - u.scale(0.3);
        for s in &states[19..] {
            assert!((s.d - expected).max_abs() < 1e-12);
            assert!((s.d.det() - 1.0).abs() < 1e-12);
        }
        assert_eq!(states[18].d, Matrix2::IDENTITY);
    }

    #[test]
    fn general_mode_factorization() {
        let spec = OperatorSpec::new(
            crate::cocycle::Coefficients::Periodic { a: vec![1.0, 1.5], b: vec![0.0, 0.3] },
            "p2",
        )
        .unwrap();
        let model = PerturbationModel {
            b: SiteLaw::new(Distribution::Uniform { c: 1.0 }, 1.0),
            a: Some(SiteLaw::new(Distribution::Uniform { c: 0.3 }, 1.0)),
            ..PerturbationModel::zero()
        };
        let r = model.sample(1, 2000);
        let walk = correction_recursion(&spec, &r, 1.0, 2000, CorrectionMode::GeneralJacobiConjugated).unwrap();
        let mut last = None;
        for s in walk {
            let s = s.unwrap();
            assert!(s.discrepancy <= FACTORIZATION_TOL);
            last = Some(s);
        }
        assert!(last.unwrap().d.is_finite());
        assert!(matches!(
            correction_recursion(&spec, &r, 0.2, 10, CorrectionMode::SchrodingerDiagonal),
            Err(LabError::UnsupportedModel(_))
        ));
    }

    #[test]
    fn u_tilde_has_zero_mean() {
        let free = OperatorSpec::free();
        let table = GeneratorTable::new(&free, 0.5, 50).unwrap();
        let model = PerturbationModel::uniform_decay(1.0);
        let trials = 10_000u64;
        let n = 37;
        let samples: Vec<Matrix2> = (0..trials)
            .map(|s| table.u_tilde(n, model.sample_b_site(s, n), 0.0))
            .collect();
        for e in 0..4 {
            let xs: Vec<f64> = samples.iter().map(|m| m.entries()[e]).collect();
            let (m, se) = stats::mean_and_se(&xs);
            assert!(m.abs() <= 4.0 * se + 1e-300, "entry {e}: {m} ± {se}");
        }
    }

    #[test]
    fn zero_model_neumann_layers_vanish() {
        let free = OperatorSpec::free();
        let table = GeneratorTable::new(&free, 0.5, 200).unwrap();
        let r = Realization::zeros(200);
        for branch in [Branch::Plus, Branch::Minus] {
            let out = neumann_series(&table, &r, &NeumannConfig::new(10, 200, branch), &[10, 100]).unwrap();
            assert_eq!(out.layers_used, 1);
            assert_eq!(out.layer_sup[1], 0.0);
            for a in &out.amplitudes {
                assert_eq!([a.d1, a.d2], branch.initial());
            }
        }
    }

    #[test]
    fn first_layer_is_tail_sum_and_series_matches_stream() {
        let free = OperatorSpec::free();
        let table = GeneratorTable::new(&free, 0.5, 3000).unwrap();
        let model = PerturbationModel::uniform_decay(1.0);
        let r = model.sample(4, 3000);
        let one = NeumannConfig { k_max: 1, ..NeumannConfig::new(100, 3000, Branch::Plus) };
        let out = neumann_series(&table, &r, &one, &[100]).unwrap();
        let mut oracle = [0.0, 1.0];
        for j in 101..=3000 {
            let g = table.u_tilde(j, r.b(j), 0.0).apply([0.0, 1.0]);
            oracle = [oracle[0] + g[0], oracle[1] + g[1]];
        }
        assert!((out.amplitudes[0].d1 - oracle[0]).abs() < 1e-13);
        assert!((out.amplitudes[0].d2 - oracle[1]).abs() < 1e-13);

        let full = neumann_series(&table, &r, &NeumannConfig::new(100, 3000, Branch::Plus), &[100, 500]).unwrap();
        let stream = amplitude_stream(&table, &r, Branch::Plus, 3000).unwrap();
        for a in &full.amplitudes {
            let s = stream.at(a.n);
            assert!((a.d1 - s[0]).abs() < 1e-10 && (a.d2 - s[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn stream_matches_definitional_correction() {
        let free = OperatorSpec::free();
        let table = GeneratorTable::new(&free, 1.1, 2000).unwrap();
        let r = PerturbationModel::uniform_decay(1.0).sample(2, 2000);
        let stream = amplitude_stream(&table, &r, Branch::Minus, 2000).unwrap();
        let states = correction_checkpoints(&free, &r, 1.1, CorrectionMode::SchrodingerDiagonal, &[50, 2000]).unwrap();
        let expected = (states[0].d * states[1].d.adjugate()).apply([1.0, 0.0]);
        let got = stream.at(50);
        assert!((got[0] - expected[0]).abs() < 1e-10 && (got[1] - expected[1]).abs() < 1e-10);
    }

    #[test]
    fn perturbed_solutions_zero_and_random() {
        let free = OperatorSpec::free();
        let theta = 0.3;
        let table = GeneratorTable::for_pair(&free, 0.5, theta, 400).unwrap();
        let zero = Realization::zeros(400);
        let dm = amplitude_stream(&table, &zero, Branch::Minus, 400).unwrap();
        let dp = amplitude_stream(&table, &zero, Branch::Plus, 400).unwrap();
        let (p1, p2) = perturbed_solutions(&free, &zero, 0.5, theta, &dm, &dp).unwrap();
        let (f1, f2) = crate::subordinacy::solve_pair(&free, 0.5, theta, 400).unwrap();
        assert_eq!(p1.values(), &f1.values()[..401]);
        assert_eq!(p2.values(), &f2.values()[..401]);

        let r = PerturbationModel::uniform_decay(1.0).sample(11, 400);
        let dm = amplitude_stream(&table, &r, Branch::Minus, 400).unwrap();
        let dp = amplitude_stream(&table, &r, Branch::Plus, 400).unwrap();
        let (p1, _) = perturbed_solutions(&free, &r, 0.5, theta, &dm, &dp).unwrap();
        // Oracle: forward propagation of the perturbed equation from ψ(0), ψ(1).
        let b: Vec<f64> = (1..=400).map(|n| r.b(n)).collect();
        let perturbed = OperatorSpec::schrodinger(b, "perturbed").unwrap();
        let fwd = crate::cocycle::solve_forward(&perturbed, 0.5, p1.value(0), p1.value(1), 399).unwrap();
        for n in 0..=400 {
            assert!((fwd.value(n) - p1.value(n)).abs() < 1e-9);
        }
        let other = GeneratorTable::new(&free, 0.5, 400).unwrap();
        let wrong = amplitude_stream(&other, &r, Branch::Minus, 400).unwrap();
        assert!(perturbed_solutions(&free, &r, 0.5, theta, &wrong, &dp).is_err());
    }

    #[test]
    fn weighted_norm_bound() {
        let f = FPlus::Power { eta: 0.7 };
        for n in 1..50u64 {
            for m in n + 1..60 {
                let x = Matrix2::diag(1.0, f.value(n) / f.value(m));
                assert!(x.norm() <= 1.0 + 1e-15);
            }
        }
    }

    #[test]
    fn n_quarter_for_decaying_model() {
        let free = OperatorSpec::free();
        let table = GeneratorTable::new(&free, 0.5, 10_000).unwrap();
        let model = PerturbationModel::uniform_decay(1.0);
        let p = contraction_profile(&table, &model, Branch::Plus, FPlus::One).unwrap();
        assert!(p.decay.convergent);
        let nq = p.n_quarter.unwrap();
        assert!(p.at(nq) <= 0.25);
        if nq > 0 {
            assert!(p.at(nq - 1) > 0.25);
        }
        let slow = PerturbationModel::uniform_decay(0.5);
        let q = contraction_profile(&table, &slow, Branch::Plus, FPlus::One).unwrap();
        assert!(!q.decay.convergent);
        assert!(q.n_quarter.is_none());
    }
}
