//! Tail statistics of the random series `Σ z(n)` with `z(n) = x(n)·w(n)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::matrix::Matrix2;
use crate::stats::{self, DecadeVerdict};

use super::stream::{SiteStream, STREAM_B};
use super::PerturbationModel;

/// Deterministic weights `w(n)`; matrices are summed entrywise and measured in
/// the Hilbert–Schmidt norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SeriesWeights {
    /// `w(n) = n^{-p}`.
    Power { p: f64 },
    /// `values[k]` is `w(k+1)`; zero beyond.
    Scalars { values: Vec<f64> },
    Matrices { values: Vec<Matrix2> },
}

impl SeriesWeights {
    fn at(&self, n: u64) -> [f64; 4] {
        match self {
            SeriesWeights::Power { p } => [(n as f64).powf(-p), 0.0, 0.0, 0.0],
            SeriesWeights::Scalars { values } => {
                [values.get(n as usize - 1).copied().unwrap_or(0.0), 0.0, 0.0, 0.0]
            }
            SeriesWeights::Matrices { values } => values
                .get(n as usize - 1)
                .map_or([0.0; 4], |m| m.entries()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesReport {
    pub n_tail: u64,
    pub trials: u64,
    pub checkpoints: Vec<u64>,
    /// Median over trials of `sup_{m≥n} |S_{n_tail} - S_m|` per checkpoint.
    pub median_sup_tail: Vec<f64>,
    pub p95_sup_tail: Vec<f64>,
    /// Sample mean of `|S_{n_tail} - S_n|²` and its standard error.
    pub tail_second_moment: Vec<f64>,
    pub tail_second_moment_se: Vec<f64>,
    /// `Σ_{n<j≤n_tail} ⟨|z(j)|²⟩`.
    pub tail_variance: Vec<f64>,
    /// `Σ_{j≤n_tail} ⟨|z(j)|²⟩`.
    pub total_variance: f64,
    /// Log-log slope of the median sup-tail against the checkpoint.
    pub median_slope: f64,
}

impl SeriesReport {
    pub fn index_of(&self, n: u64) -> Option<usize> {
        self.checkpoints.iter().position(|c| *c == n)
    }
}

/// Checkpoints `round(10^{k/4})` below `n_tail`.
pub fn default_checkpoints(n_tail: u64) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::new();
    let mut k = 0;
    loop {
        let c = 10f64.powf(k as f64 / 4.0).round() as u64;
        if c >= n_tail {
            break;
        }
        if out.last() != Some(&c) {
            out.push(c);
        }
        k += 1;
    }
    out
}

/// Requires a convergent variance series (decade-ratio test over the closed
/// form moments up to `n_tail`), then simulates `trials` partial-sum paths.
pub fn series_convergence_check(
    model: &PerturbationModel,
    weights: &SeriesWeights,
    n_tail: u64,
    trials: u64,
    base_seed: u64,
    checkpoints: Option<Vec<u64>>,
) -> Result<SeriesReport> {
    model.validate()?;
    if trials < 2 {
        return Err(invalid("need at least two trials"));
    }
    let w: Vec<[f64; 4]> = (1..=n_tail).map(|n| weights.at(n)).collect();
    let var: Vec<f64> = (1..=n_tail)
        .map(|n| {
            let ww: f64 = w[n as usize - 1].iter().map(|x| x * x).sum();
            ww * model.b.second_moment(n)
        })
        .collect();
    let verdict = DecadeVerdict::from_slice(&var);
    if !verdict.convergent {
        return Err(LabError::Divergent(format!(
            "variance series Σ⟨|z|²⟩ fails the decade test (decade starting at {:?}, ratios {:?})",
            verdict.failing_decade, verdict.ratios
        )));
    }
    let checkpoints = checkpoints.unwrap_or_else(|| default_checkpoints(n_tail));
    if checkpoints.iter().any(|c| *c == 0 || *c >= n_tail) {
        return Err(invalid("checkpoints must lie in [1, n_tail)"));
    }
    let total_variance: f64 = var.iter().sum();
    let tail_variance: Vec<f64> = checkpoints
        .iter()
        .map(|c| var[*c as usize..].iter().sum())
        .collect();

    // Per trial: (sup tail, squared tail) at each checkpoint.
    let per_trial: Vec<Vec<(f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut s = SiteStream::new(&model.experiment_id, base_seed.wrapping_add(t), STREAM_B);
            let words = s.words(1, n_tail as usize);
            // tail[m] = Σ_{j=m+1}^{n_tail} z(j) for m = 0..n_tail
            let mut tail_sq = vec![0.0; n_tail as usize + 1];
            let mut sup = vec![0.0; n_tail as usize + 1];
            let mut acc = [0.0; 4];
            let mut best: f64 = 0.0;
            for m in (0..n_tail as usize).rev() {
                let n = m as u64 + 1;
                let x = model.b.draw(n, words[m]);
                let wn = &w[m];
                for k in 0..4 {
                    acc[k] += x * wn[k];
                }
                let sq: f64 = acc.iter().map(|v| v * v).sum();
                best = best.max(sq.sqrt());
                tail_sq[m] = sq;
                sup[m] = best;
            }
            checkpoints
                .iter()
                .map(|c| (sup[*c as usize], tail_sq[*c as usize]))
                .collect()
        })
        .collect();

    let mut median_sup_tail = Vec::with_capacity(checkpoints.len());
    let mut p95_sup_tail = Vec::with_capacity(checkpoints.len());
    let mut tail_second_moment = Vec::with_capacity(checkpoints.len());
    let mut tail_second_moment_se = Vec::with_capacity(checkpoints.len());
    for i in 0..checkpoints.len() {
        let sups: Vec<f64> = per_trial.iter().map(|row| row[i].0).collect();
        let sqs: Vec<f64> = per_trial.iter().map(|row| row[i].1).collect();
        let sorted = stats::sorted(&sups);
        median_sup_tail.push(stats::quantile_sorted(&sorted, 0.5));
        p95_sup_tail.push(stats::quantile_sorted(&sorted, 0.95));
        let (m, se) = stats::mean_and_se(&sqs);
        tail_second_moment.push(m);
        tail_second_moment_se.push(se);
    }
    let xs: Vec<f64> = checkpoints.iter().map(|c| *c as f64).collect();
    let usable: Vec<(f64, f64)> = xs
        .iter()
        .zip(&median_sup_tail)
        .filter(|(_, y)| **y > 0.0)
        .map(|(x, y)| (*x, *y))
        .collect();
    let median_slope = if usable.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = usable.into_iter().unzip();
        stats::log_log_slope(&x, &y)?.slope
    } else {
        0.0
    };
    Ok(SeriesReport {
        n_tail,
        trials,
        checkpoints,
        median_sup_tail,
        p95_sup_tail,
        tail_second_moment,
        tail_second_moment_se,
        tail_variance,
        total_variance,
        median_slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_has_zero_tails() {
        let rep = series_convergence_check(
            &PerturbationModel::zero(),
            &SeriesWeights::Power { p: 0.0 },
            1000,
            10,
            0,
            None,
        )
        .unwrap();
        assert!(rep.median_sup_tail.iter().all(|v| *v == 0.0));
        assert!(rep.tail_second_moment.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn divergent_variance_is_refused() {
        let m = PerturbationModel::uniform_decay(0.5);
        let err = series_convergence_check(&m, &SeriesWeights::Power { p: 0.0 }, 10_000, 10, 0, None);
        assert!(matches!(err, Err(LabError::Divergent(_))));
    }

    #[test]
    fn tail_second_moment_matches_variance() {
        let m = PerturbationModel::uniform_decay(1.0);
        let rep =
            series_convergence_check(&m, &SeriesWeights::Power { p: 0.0 }, 2000, 2000, 1, None)
                .unwrap();
        let i = rep.index_of(100).unwrap();
        let diff = (rep.tail_second_moment[i] - rep.tail_variance[i]).abs();
        assert!(diff < 4.0 * rep.tail_second_moment_se[i], "{diff}");
        let pi2_18 = std::f64::consts::PI.powi(2) / 18.0;
        assert!(rep.total_variance < pi2_18);
    }

    #[test]
    fn slower_decay_still_shrinks() {
        let m = PerturbationModel::uniform_decay(0.75);
        let rep =
            series_convergence_check(&m, &SeriesWeights::Power { p: 0.0 }, 10_000, 300, 2, None)
                .unwrap();
        assert!(rep.median_slope <= -0.2, "{}", rep.median_slope);
    }

    #[test]
    fn checkpoints_are_geometric() {
        let c = default_checkpoints(1000);
        assert_eq!(c[0], 1);
        assert!(c.contains(&10) && c.contains(&100));
        assert!(*c.last().unwrap() < 1000);
    }
}
