//! Small statistical helpers shared by the experiments: order statistics,
//! least-squares slopes and the decade-sum convergence verdict.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Maximal ratio between consecutive decade sums accepted as convergent.
pub const DECADE_RATIO: f64 = 0.9;
/// Number of trailing decade ratios that must satisfy [`DECADE_RATIO`].
pub const DECADE_WINDOW: usize = 3;

/// Quantile with linear interpolation between order statistics.
/// `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let q = q.clamp(0.0, 1.0);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

pub fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

pub fn quantile(xs: &[f64], q: f64) -> f64 {
    quantile_sorted(&sorted(xs), q)
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Interquartile range `Q3 - Q1`.
pub fn iqr(xs: &[f64]) -> f64 {
    let s = sorted(xs);
    quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample mean and its standard error.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Ordinary least-squares line through `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual.
    pub residual: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() {
        return Err(LabError::InvalidArgument("x and y differ in length".into()));
    }
    if x.len() < 2 {
        return Err(LabError::InsufficientData(format!(
            "a line fit needs two points, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
    }
    if sxx == 0.0 {
        return Err(LabError::InsufficientData("all abscissae coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| {
            let r = yi - (intercept + slope * xi);
            r * r
        })
        .sum();
    Ok(LineFit {
        slope,
        intercept,
        residual: (ss / n).sqrt(),
    })
}

/// Slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    fit_line(&lx, &ly)
}

/// Points `lo·10^{k/per_decade}` up to and including `hi` (rounded to the
/// nearest representable step).
pub fn geometric_grid(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    let decades = (hi / lo).log10();
    let steps = (decades * per_decade as f64).round() as usize;
    (0..=steps)
        .map(|k| {
            if k == steps {
                hi
            } else {
                lo * 10f64.powf(k as f64 / per_decade as f64)
            }
        })
        .collect()
}

/// Outcome of the decade-sum ratio test for `Σ_n term(n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecadeVerdict {
    /// Sums over `[10^d, 10^{d+1})`, for each complete decade inside the range.
    pub decade_sums: Vec<f64>,
    /// `decade_sums[d+1] / decade_sums[d]`.
    pub ratios: Vec<f64>,
    pub partial_sum: f64,
    pub convergent: bool,
    /// First decade (by its lower site `10^d`) whose ratio exceeds the limit
    /// within the tested window.
    pub failing_decade: Option<u64>,
}

impl DecadeVerdict {
    /// Builds the verdict from terms `term(n)` for `n = 1..=n_max`.
    pub fn from_terms(n_max: u64, mut term: impl FnMut(u64) -> f64) -> Self {
        let mut values = Vec::with_capacity(n_max as usize);
        for n in 1..=n_max {
            values.push(term(n));
        }
        Self::from_slice(&values)
    }

    /// `values[k]` is the term at site `k + 1`.
    pub fn from_slice(values: &[f64]) -> Self {
        let partial_sum: f64 = values.iter().sum();
        let mut decade_sums = Vec::new();
        let mut lo: usize = 1;
        while lo * 10 - 1 <= values.len() {
            let hi = lo * 10;
            decade_sums.push(values[lo - 1..hi - 1].iter().sum());
            lo = hi;
        }
        Self::from_decade_sums(decade_sums, partial_sum)
    }

    /// Verdict from precomputed decade sums (possibly all rescaled by a
    /// common positive factor).
    pub fn from_decade_sums(decade_sums: Vec<f64>, partial_sum: f64) -> Self {
        let ratios: Vec<f64> = decade_sums
            .windows(2)
            .map(|w| {
                if w[1] == 0.0 {
                    0.0
                } else if w[0] == 0.0 {
                    f64::INFINITY
                } else {
                    w[1] / w[0]
                }
            })
            .collect();
        let window = ratios.len().min(DECADE_WINDOW);
        let tail = &ratios[ratios.len() - window..];
        let all_zero = decade_sums.iter().all(|&s| s == 0.0) && partial_sum == 0.0;
        let failing = tail
            .iter()
            .position(|r| !(*r <= DECADE_RATIO))
            .map(|i| 10u64.pow((ratios.len() - window + i + 1) as u32));
        let convergent = all_zero || (window > 0 && failing.is_none());
        DecadeVerdict {
            decade_sums,
            ratios,
            partial_sum,
            convergent,
            failing_decade: if convergent { None } else { failing },
        }
    }
}
