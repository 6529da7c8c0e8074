//! Monte Carlo and exhaustive checks of the maximal inequality
//! `P(max_{N1≤n≤N2} |z(n)+…+z(N2)| > r) ≤ Σ⟨z(j)²⟩ / r²` for
//! `z(n) = x(n)·f_n(x(n+1), x(n+2), …)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};

use super::stream::{SiteStream, STREAM_AUX, STREAM_B};
use super::PerturbationModel;

/// Largest `N2 - N1` handled by exhaustive enumeration.
pub const EXACT_MAX_SPAN: u64 = 16;
/// Largest number of distinct sites enumerated.
const EXACT_MAX_SITES: u64 = 20;
const VARIANCE_TRIALS: u64 = 4096;

fn one() -> f64 {
    1.0
}

/// The factor `f_n`, a function of sites strictly after `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FDescriptor {
    Const { value: f64 },
    /// `scale · x(n + offset)`.
    Shifted {
        offset: i64,
        #[serde(default = "one")]
        scale: f64,
    },
    /// `cos(x(n+1) + … + x(n+k))`; its second moment is estimated by Monte Carlo.
    CosOfNext { k: u32 },
}

impl FDescriptor {
    fn check_contract(&self) -> Result<()> {
        match self {
            FDescriptor::Shifted { offset, .. } if *offset <= 0 => {
                Err(LabError::ContractViolation(format!(
                    "f_n may only depend on sites after n, got offset {offset}"
                )))
            }
            FDescriptor::Const { value } if !value.is_finite() => Err(invalid("f must be finite")),
            _ => Ok(()),
        }
    }

    /// Number of sites after `n` that `f_n` reads.
    fn lookahead(&self) -> u64 {
        match self {
            FDescriptor::Const { .. } => 0,
            FDescriptor::Shifted { offset, .. } => *offset as u64,
            FDescriptor::CosOfNext { k } => *k as u64,
        }
    }

    /// `f_n` given `later[i] = x(n + 1 + i)`.
    fn eval(&self, later: &[f64]) -> f64 {
        match self {
            FDescriptor::Const { value } => *value,
            FDescriptor::Shifted { offset, scale } => scale * later[*offset as usize - 1],
            FDescriptor::CosOfNext { k } => later[..*k as usize].iter().sum::<f64>().cos(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub empirical_prob: f64,
    /// `Σ⟨z(j)²⟩ / r²`.
    pub bound: f64,
    /// Standard error of `bound` when a second moment had to be estimated.
    pub bound_se: f64,
    /// Binomial standard error of `empirical_prob` (zero in exact mode).
    pub prob_se: f64,
    /// `Σ⟨z(j)²⟩`.
    pub sum_variance: f64,
    /// `⟨(z(N1)+…+z(N2))²⟩`, exact in enumeration mode.
    pub second_moment_of_sum: f64,
    pub exact: bool,
    /// Trials, or enumerated patterns in exact mode.
    pub samples: u64,
}

/// Builds `z(N1..=N2)` from the values `x(N1..=N2+lookahead)`.
fn z_values(f: &FDescriptor, x: &[f64], span: usize) -> Vec<f64> {
    (0..span).map(|i| x[i] * f.eval(&x[i + 1..])).collect()
}

/// Does any suffix sum `z(n)+…+z(N2)` exceed `r` in absolute value?
fn exceeds(z: &[f64], r: f64) -> (bool, f64) {
    let mut acc = 0.0;
    let mut hit = false;
    for v in z.iter().rev() {
        acc += v;
        if acc.abs() > r {
            hit = true;
        }
    }
    (hit, acc)
}

/// `Σ_{j=N1}^{N2}⟨z(j)²⟩`, with a standard error when Monte Carlo is needed.
fn variance_sum(model: &PerturbationModel, f: &FDescriptor, n1: u64, n2: u64) -> (f64, f64) {
    let m2 = |n: u64| model.b.second_moment(n);
    match f {
        FDescriptor::Const { value } => ((n1..=n2).map(|j| value * value * m2(j)).sum(), 0.0),
        FDescriptor::Shifted { offset, scale } => (
            (n1..=n2)
                .map(|j| scale * scale * m2(j) * m2(j + *offset as u64))
                .sum(),
            0.0,
        ),
        FDescriptor::CosOfNext { k } => {
            // ⟨z(j)²⟩ = ⟨x(j)²⟩·⟨cos²(x(j+1)+…+x(j+k))⟩ by independence.
            let mut total = 0.0;
            let mut var_total = 0.0;
            for j in n1..=n2 {
                let samples: Vec<f64> = (0..VARIANCE_TRIALS)
                    .map(|t| {
                        let mut s = SiteStream::new(&model.experiment_id, t, STREAM_AUX + 1);
                        let words = s.words(j + 1, *k as usize);
                        let sum: f64 = words
                            .iter()
                            .enumerate()
                            .map(|(i, w)| model.b.draw(j + 1 + i as u64, *w))
                            .sum();
                        sum.cos().powi(2)
                    })
                    .collect();
                let (mean, se) = crate::stats::mean_and_se(&samples);
                total += m2(j) * mean;
                var_total += (m2(j) * se).powi(2);
            }
            (total, var_total.sqrt())
        }
    }
}

fn exact_eligible(model: &PerturbationModel, f: &FDescriptor, n1: u64, n2: u64) -> bool {
    let sites = n2 - n1 + 1 + f.lookahead();
    model.b.dist.support_size().is_some_and(|s| s <= 2)
        && n2 - n1 <= EXACT_MAX_SPAN
        && sites <= EXACT_MAX_SITES
}

/// Runs the check, by exhaustive enumeration when the law has at most two
/// support points and `N2 - N1 ≤ 16`, otherwise by Monte Carlo over
/// `trials` seeds starting at `base_seed`.
pub fn maximal_inequality_check(
    model: &PerturbationModel,
    f: &FDescriptor,
    n1: u64,
    n2: u64,
    r: f64,
    trials: u64,
    base_seed: u64,
) -> Result<InequalityReport> {
    f.check_contract()?;
    model.validate()?;
    if n1 == 0 || n1 > n2 {
        return Err(invalid(format!("need 1 ≤ N1 ≤ N2, got N1 = {n1}, N2 = {n2}")));
    }
    if !(r > 0.0) {
        return Err(invalid("r must be positive"));
    }
    let (sum_variance, var_se) = variance_sum(model, f, n1, n2);
    let bound = sum_variance / (r * r);
    let bound_se = var_se / (r * r);
    if exact_eligible(model, f, n1, n2) {
        return Ok(exact_check(model, f, n1, n2, r, sum_variance, bound));
    }
    if trials == 0 {
        return Err(invalid("Monte Carlo mode needs at least one trial"));
    }
    let span = (n2 - n1 + 1) as usize;
    let count = (n2 - n1 + 1 + f.lookahead()) as usize;
    let outcomes: Vec<(bool, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut s = SiteStream::new(&model.experiment_id, base_seed.wrapping_add(t), STREAM_B);
            let words = s.words(n1, count);
            let x: Vec<f64> = words
                .iter()
                .enumerate()
                .map(|(i, w)| model.b.draw(n1 + i as u64, *w))
                .collect();
            exceeds(&z_values(f, &x, span), r)
        })
        .collect();
    let hits = outcomes.iter().filter(|o| o.0).count() as f64;
    let p = hits / trials as f64;
    let second = outcomes.iter().map(|o| o.1 * o.1).sum::<f64>() / trials as f64;
    Ok(InequalityReport {
        empirical_prob: p,
        bound,
        bound_se,
        prob_se: (p * (1.0 - p) / trials as f64).sqrt(),
        sum_variance,
        second_moment_of_sum: second,
        exact: false,
        samples: trials,
    })
}

fn exact_check(
    model: &PerturbationModel,
    f: &FDescriptor,
    n1: u64,
    n2: u64,
    r: f64,
    sum_variance: f64,
    bound: f64,
) -> InequalityReport {
    let span = (n2 - n1 + 1) as usize;
    let count = (n2 - n1 + 1 + f.lookahead()) as usize;
    let two_point = model.b.dist.support_size() == Some(2);
    let patterns: u64 = if two_point { 1 << count } else { 1 };
    let mut hits: u64 = 0;
    let mut second = 0.0;
    let mut x = vec![0.0; count];
    for pat in 0..patterns {
        for (i, xi) in x.iter_mut().enumerate() {
            let n = n1 + i as u64;
            let mag = model.b.bound(n);
            *xi = if pat >> i & 1 == 1 { mag } else { -mag };
        }
        let (hit, total) = exceeds(&z_values(f, &x, span), r);
        if hit {
            hits += 1;
        }
        second += total * total;
    }
    InequalityReport {
        empirical_prob: hits as f64 / patterns as f64,
        bound,
        bound_se: 0.0,
        prob_se: 0.0,
        sum_variance,
        second_moment_of_sum: second / patterns as f64,
        exact: true,
        samples: patterns,
    }
}
