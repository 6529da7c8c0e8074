//! Dispatch of a resolved configuration to the experiment kernels.
//!
//! Every experiment is a list of cells (usually one per energy). Cells run
//! on a rayon pool and are collected in key order, so the worker count never
//! changes the output.

use jacobi_lab::ac_criterion::{cesaro_scan, gamma_membership};
use jacobi_lab::cocycle::Coefficients;
use jacobi_lab::randpert::{maximal_inequality_check, series_convergence_check, PerturbationModel};
use jacobi_lab::singular::{stability_experiment, SingularConfig};
use jacobi_lab::sparse::{
    analyze_sparse, perturbed_sparse_experiment, sparse_propagate, SparseExperimentConfig, SparseSpec,
};
use jacobi_lab::subordinacy::detect_subordinate;
use jacobi_lab::variation::{correction_ensemble, neumann_ensemble, NeumannEnsembleConfig};
use jacobi_lab::{LabError, OperatorSpec};
use rayon::prelude::*;

use crate::config::{Experiment, ExperimentConfig};
use crate::emit::{format_real, Cell, EnsembleReport, Provenance, Table, Trace, Verdict, VERSION};
use crate::error::HarnessError;

/// Slope the median `‖D(2n) - D(n)‖` must reach to count as decaying.
pub const INCREMENT_SLOPE_MAX: f64 = -0.3;
/// Allowed `|mean D(n) - I|` in standard errors.
pub const MEAN_Z_MAX: f64 = 4.0;
/// Required geometric ratio of the Neumann layer moments.
pub const LAYER_RATIO_MAX: f64 = 0.5;
/// Allowed median relative error of the reconstructed amplitudes.
pub const RECONSTRUCTION_TOL: f64 = 0.05;

/// Rows, traces and verdicts produced by one cell.
#[derive(Default)]
struct CellOut {
    rows: Vec<(usize, Vec<Cell>)>,
    traces: Vec<Trace>,
    verdicts: Vec<Verdict>,
}

impl CellOut {
    fn row(&mut self, table: usize, row: Vec<Cell>) {
        self.rows.push((table, row));
    }

    fn verdict(&mut self, name: String, pass: bool, detail: String) {
        self.verdicts.push(Verdict { name, pass, detail });
    }

    fn trace(&mut self, name: String, x: &str, y: &str, points: Vec<(f64, f64)>) {
        self.traces.push(Trace {
            name,
            x_label: x.into(),
            y_label: y.into(),
            points,
        });
    }
}

type CellResult = Result<CellOut, LabError>;

fn tag(e: f64) -> String {
    format!("E{}", format_real(e))
}

/// Runs a resolved configuration on a pool of `workers` threads.
pub fn run_with_workers(cfg: &ExperimentConfig, workers: usize) -> Result<EnsembleReport, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Io(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run(cfg))
}

/// Runs a resolved configuration on the current rayon pool.
pub fn run(cfg: &ExperimentConfig) -> Result<EnsembleReport, HarnessError> {
    let spec = cfg.operator()?;
    let energies = match &cfg.energies {
        Some(g) => g.energies()?,
        None => Vec::new(),
    };
    let (tables, keys, outputs): (Vec<Table>, Vec<String>, Vec<CellResult>) = match cfg.experiment {
        Experiment::Transfer => transfer(cfg, &spec, &energies),
        Experiment::AcScan => ac_scan(cfg, &spec, &energies),
        Experiment::Subordinacy => subordinacy(cfg, &spec, &energies),
        Experiment::Inequality => inequality(cfg),
        Experiment::Series => series(cfg),
        Experiment::Variation => variation(cfg, &spec, &energies),
        Experiment::Sparse => sparse(cfg, &energies)?,
        Experiment::SingularStability => singular(cfg, &spec, &energies),
    };
    assemble(cfg, tables, keys, outputs)
}

fn assemble(
    cfg: &ExperimentConfig,
    mut tables: Vec<Table>,
    keys: Vec<String>,
    outputs: Vec<CellResult>,
) -> Result<EnsembleReport, HarnessError> {
    let total = outputs.len();
    let mut traces = Vec::new();
    let mut verdicts = Vec::new();
    let mut failed = Vec::new();
    let mut first_error = None;
    for (key, out) in keys.into_iter().zip(outputs) {
        match out {
            Ok(out) => {
                for (t, row) in out.rows {
                    tables[t].push(row);
                }
                traces.extend(out.traces);
                verdicts.extend(out.verdicts);
            }
            Err(e) => {
                failed.push(format!("{key}: {e}"));
                first_error.get_or_insert(e);
            }
        }
    }
    if total > 0 && failed.len() == total {
        return Err(HarnessError::Numeric(first_error.expect("a cell failed")));
    }
    let seed_policy = match &cfg.seeds {
        Some(s) => format!("seeds {}..{} of stream {}", s.base, s.base + s.count as u64, experiment_id(cfg)),
        None => "deterministic".into(),
    };
    Ok(EnsembleReport {
        provenance: Provenance {
            experiment: cfg.experiment.name().into(),
            config_sha256: cfg.hash(),
            version: VERSION.into(),
            seed_policy,
        },
        tables,
        traces,
        verdicts,
        failed_cells: failed,
        total_cells: total,
    })
}

fn experiment_id(cfg: &ExperimentConfig) -> String {
    cfg.model
        .as_ref()
        .map(|m| m.experiment_id.clone())
        .unwrap_or_else(|| jacobi_lab::randpert::DEFAULT_EXPERIMENT_ID.into())
}

fn model(cfg: &ExperimentConfig) -> PerturbationModel {
    cfg.model.clone().expect("resolved configuration has a model")
}

fn seeds(cfg: &ExperimentConfig) -> (u64, usize) {
    let s = cfg.seeds.as_ref().expect("resolved configuration has seeds");
    (s.base, s.count)
}

fn over_energies<F>(energies: &[f64], f: F) -> (Vec<String>, Vec<CellResult>)
where
    F: Fn(f64) -> CellResult + Sync,
{
    let outputs = energies.par_iter().map(|&e| f(e)).collect();
    (energies.iter().map(|&e| tag(e)).collect(), outputs)
}

type Plan = (Vec<Table>, Vec<String>, Vec<CellResult>);

fn transfer(cfg: &ExperimentConfig, spec: &OperatorSpec, energies: &[f64]) -> Plan {
    let tables = vec![
        Table::new("averages", &["energy", "n", "average", "log_average"]),
        Table::new("summary", &["energy", "liminf_proxy", "log_liminf_proxy", "bounded", "log_max_norm", "saturated"]),
    ];
    let grid = cfg.grids.n.clone().unwrap_or_default();
    let (keys, outputs) = over_energies(energies, |e| {
        let r = cesaro_scan(spec, e, &grid)?;
        let mut out = CellOut::default();
        for (i, n) in r.n_grid.iter().enumerate() {
            out.row(0, vec![e.into(), (*n).into(), r.averages[i].into(), r.log_averages[i].into()]);
        }
        out.row(
            1,
            vec![
                e.into(),
                r.liminf_proxy.into(),
                r.log_liminf_proxy.into(),
                r.bounded_flag.into(),
                r.log_max_norm.into(),
                r.saturated.into(),
            ],
        );
        let points = r.n_grid.iter().map(|n| *n as f64).zip(r.averages.iter().copied()).collect();
        out.trace(format!("cesaro_{}", tag(e)), "N", "average", points);
        out.verdict(
            format!("{}: finite Cesaro averages", tag(e)),
            !r.saturated,
            format!("log liminf proxy {}", format_real(r.log_liminf_proxy)),
        );
        Ok(out)
    });
    (tables, keys, outputs)
}

fn ac_scan(cfg: &ExperimentConfig, spec: &OperatorSpec, energies: &[f64]) -> Plan {
    let tables = vec![Table::new(
        "scan",
        &[
            "energy",
            "liminf_proxy",
            "log_liminf_proxy",
            "bounded",
            "log_max_norm",
            "gamma_member",
            "gamma_partial_sum",
        ],
    )];
    let grid = cfg.grids.n.clone().unwrap_or_default();
    let n_max = grid.last().copied().unwrap_or(1);
    let (keys, outputs) = over_energies(energies, |e| {
        let r = cesaro_scan(spec, e, &grid)?;
        let gamma = cfg
            .model
            .as_ref()
            .map(|m| gamma_membership(spec, m, e, n_max))
            .transpose()?;
        let mut out = CellOut::default();
        out.row(
            0,
            vec![
                e.into(),
                r.liminf_proxy.into(),
                r.log_liminf_proxy.into(),
                r.bounded_flag.into(),
                r.log_max_norm.into(),
                gamma.as_ref().map_or(Cell::Text(String::new()), |g| g.member.into()),
                gamma.as_ref().map(|g| g.partial_sum).into(),
            ],
        );
        Ok(out)
    });
    (tables, keys, outputs)
}

fn subordinacy(cfg: &ExperimentConfig, spec: &OperatorSpec, energies: &[f64]) -> Plan {
    let tables = vec![Table::new(
        "subordinacy",
        &[
            "energy",
            "classification",
            "theta_star",
            "theta_evaluated",
            "beta",
            "eta",
            "exp_decay_rate",
            "growth_exponent",
            "regular",
        ],
    )];
    let l_grid = cfg.grids.l.as_ref().map(|g| g.points()).unwrap_or_default();
    let res = cfg.subordinacy.as_ref().map_or(jacobi_lab::subordinacy::THETA_GRID, |p| p.theta_grid);
    let (keys, outputs) = over_energies(energies, |e| {
        let r = detect_subordinate(spec, e, &l_grid, res)?;
        let class = serde_json::to_value(r.classification)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        let mut out = CellOut::default();
        out.row(
            0,
            vec![
                e.into(),
                class.clone().into(),
                r.theta_star.into(),
                r.theta_evaluated.into(),
                r.beta.into(),
                r.eta.into(),
                r.exp_decay_rate.into(),
                r.growth_exponent.into(),
                r.regular.into(),
            ],
        );
        out.trace(format!("ratio_{}", tag(e)), "L", "ratio", r.ratio_trace.clone());
        out.verdict(
            format!("{}: classified", tag(e)),
            r.ratio_trace.iter().all(|(_, x)| x.is_finite()),
            class,
        );
        Ok(out)
    });
    (tables, keys, outputs)
}

fn inequality(cfg: &ExperimentConfig) -> Plan {
    let tables = vec![Table::new(
        "cases",
        &[
            "case",
            "n1",
            "n2",
            "r",
            "exact",
            "empirical_prob",
            "prob_se",
            "bound",
            "bound_se",
            "sum_variance",
            "second_moment_of_sum",
            "holds",
        ],
    )];
    let params = cfg.inequality.clone().expect("resolved configuration has inequality parameters");
    let m = model(cfg);
    let (base, trials) = seeds(cfg);
    let outputs = params
        .cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let r = maximal_inequality_check(&m, &params.f, c.n1, c.n2, c.r, trials as u64, base)?;
            let holds = if r.exact {
                r.empirical_prob <= r.bound
            } else {
                r.empirical_prob <= r.bound + 3.0 * r.prob_se.hypot(r.bound_se)
            };
            let mut out = CellOut::default();
            out.row(
                0,
                vec![
                    i.into(),
                    c.n1.into(),
                    c.n2.into(),
                    c.r.into(),
                    r.exact.into(),
                    r.empirical_prob.into(),
                    r.prob_se.into(),
                    r.bound.into(),
                    r.bound_se.into(),
                    r.sum_variance.into(),
                    r.second_moment_of_sum.into(),
                    holds.into(),
                ],
            );
            out.verdict(
                format!("case {i}: maximal inequality"),
                holds,
                format!("P = {} vs bound {}", format_real(r.empirical_prob), format_real(r.bound)),
            );
            Ok(out)
        })
        .collect();
    let keys = (0..params.cases.len()).map(|i| format!("case {i}")).collect();
    (tables, keys, outputs)
}

fn series(cfg: &ExperimentConfig) -> Plan {
    let tables = vec![Table::new(
        "tail",
        &[
            "n",
            "median_sup_tail",
            "p95_sup_tail",
            "tail_second_moment",
            "tail_second_moment_se",
            "tail_variance",
        ],
    )];
    let p = cfg.series.clone().expect("resolved configuration has series parameters");
    let (base, trials) = seeds(cfg);
    let out = (|| {
        let r = series_convergence_check(&model(cfg), &p.weights, p.n_tail, trials as u64, base, p.checkpoints.clone())?;
        let mut out = CellOut::default();
        let mut consistent = true;
        for (i, n) in r.checkpoints.iter().enumerate() {
            out.row(
                0,
                vec![
                    (*n).into(),
                    r.median_sup_tail[i].into(),
                    r.p95_sup_tail[i].into(),
                    r.tail_second_moment[i].into(),
                    r.tail_second_moment_se[i].into(),
                    r.tail_variance[i].into(),
                ],
            );
            consistent &= r.tail_second_moment[i] <= r.tail_variance[i] + 3.0 * r.tail_second_moment_se[i];
        }
        let points = r.checkpoints.iter().map(|n| *n as f64).zip(r.median_sup_tail.iter().copied()).collect();
        out.trace("median_sup_tail".into(), "n", "median_sup_tail", points);
        out.verdict(
            "tail second moment within 3 se of the variance sum".into(),
            consistent,
            format!("median slope {}", format_real(r.median_slope)),
        );
        Ok(out)
    })();
    (tables, vec!["series".into()], vec![out])
}

fn variation(cfg: &ExperimentConfig, spec: &OperatorSpec, energies: &[f64]) -> Plan {
    let tables = vec![
        Table::new("increments", &["energy", "n", "median_increment"]),
        Table::new(
            "mean",
            &["energy", "n", "mean_11", "mean_12", "mean_21", "mean_22", "se_11", "se_12", "se_21", "se_22", "max_z"],
        ),
        Table::new("summary", &["energy", "mode", "trials", "increment_slope"]),
        Table::new(
            "neumann",
            &[
                "energy",
                "n_quarter",
                "n_start",
                "contraction_at_start",
                "tail_bound",
                "geometric_ratio",
                "certified",
                "definitional_rel_error",
            ],
        ),
        Table::new("layers", &["energy", "k", "moment", "se"]),
    ];
    let p = cfg.variation.clone().expect("resolved configuration has variation parameters");
    let m = model(cfg);
    let (base, trials) = seeds(cfg);
    let (keys, outputs) = over_energies(energies, |e| {
        let r = correction_ensemble(spec, &m, e, &p.checkpoints, &p.increment_sites, trials, base)?;
        let mut out = CellOut::default();
        for (n, inc) in r.increment_sites.iter().zip(&r.median_increment) {
            out.row(0, vec![e.into(), (*n).into(), (*inc).into()]);
        }
        for (i, n) in r.checkpoints.iter().enumerate() {
            let mut row: Vec<Cell> = vec![e.into(), (*n).into()];
            row.extend(r.mean[i].entries().iter().map(|x| Cell::from(*x)));
            row.extend(r.standard_error[i].entries().iter().map(|x| Cell::from(*x)));
            row.push(r.max_z_from_identity[i].into());
            out.row(1, row);
        }
        let mode = serde_json::to_value(r.mode)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        out.row(2, vec![e.into(), mode.into(), r.trials.into(), r.increment_slope.into()]);
        let points = r.increment_sites.iter().map(|n| *n as f64).zip(r.median_increment.iter().copied()).collect();
        out.trace(format!("increment_{}", tag(e)), "n", "median_increment", points);
        out.verdict(
            format!("{}: increments decay", tag(e)),
            r.increment_slope <= INCREMENT_SLOPE_MAX,
            format!("slope {}", format_real(r.increment_slope)),
        );
        let z = r.max_z_from_identity.iter().copied().fold(0.0, f64::max);
        out.verdict(
            format!("{}: mean of D is the identity", tag(e)),
            z <= MEAN_Z_MAX,
            format!("max z {}", format_real(z)),
        );
        if let Some(np) = &p.neumann {
            let ncfg = NeumannEnsembleConfig {
                n_start: np.n_start,
                n_tail: np.n_tail,
                k_max: np.k_max,
                branch: np.branch,
                f_plus: np.f_plus,
                trials,
                base_seed: base,
                checkpoints: np.checkpoints.clone(),
            };
            let nr = neumann_ensemble(spec, &m, e, &ncfg)?;
            out.row(
                3,
                vec![
                    e.into(),
                    nr.n_quarter.map_or(Cell::Text(String::new()), Cell::from),
                    nr.n_start.into(),
                    nr.contraction_at_start.into(),
                    nr.tail_bound.into(),
                    nr.geometric_ratio.into(),
                    nr.contraction_certified.into(),
                    nr.definitional_rel_error.into(),
                ],
            );
            for (k, (mean, se)) in nr.layer_moments.iter().enumerate() {
                out.row(4, vec![e.into(), k.into(), (*mean).into(), (*se).into()]);
            }
            out.verdict(
                format!("{}: layer moments decay geometrically", tag(e)),
                nr.geometric_ratio <= LAYER_RATIO_MAX,
                format!("ratio {}", format_real(nr.geometric_ratio)),
            );
            out.verdict(
                format!("{}: reconstruction matches the definitional path", tag(e)),
                nr.definitional_rel_error <= RECONSTRUCTION_TOL,
                format!("median relative error {}", format_real(nr.definitional_rel_error)),
            );
        }
        Ok(out)
    });
    (tables, keys, outputs)
}

fn sparse(cfg: &ExperimentConfig, energies: &[f64]) -> Result<Plan, HarnessError> {
    let tables = vec![
        Table::new(
            "sparse",
            &[
                "energy",
                "theta_star",
                "beta1_hat",
                "beta2_hat",
                "threshold",
                "s",
                "above_threshold",
                "beta",
                "sandwich",
                "wronskian_error",
                "max_deviation",
                "within_band",
                "tail_estimate",
            ],
        ),
        Table::new(
            "seeds",
            &["energy", "seed", "psi1_beta1", "psi1_beta2", "psi2_beta1", "psi2_beta2"],
        ),
    ];
    let p = cfg.sparse.clone().expect("resolved configuration has sparse parameters");
    let (v, gamma) = match cfg.spec {
        Some(Coefficients::Sparse { v, gamma }) => (v, gamma),
        _ => return Err(HarnessError::config("spec", "the sparse experiment needs a sparse spec")),
    };
    let sspec = SparseSpec::new(v, gamma, p.j_max).map_err(|e| HarnessError::config("sparse", e.to_string()))?;
    let (base, count) = seeds(cfg);
    let l_grid = cfg.grids.l.as_ref().map(|g| g.points());
    let (keys, outputs) = over_energies(energies, |e| {
        let s = match p.s {
            Some(s) => s,
            None => {
                let a = analyze_sparse(&sspec, e, l_grid.as_deref())?;
                let t = a.threshold.ok_or_else(|| {
                    LabError::InvalidArgument(format!("no threshold: fitted β₂ = {} ≥ 1/2", a.beta2_hat))
                })?;
                t.threshold + p.s_offset
            }
        };
        let mut ecfg = SparseExperimentConfig::new(s, count, vec![e]);
        ecfg.base_seed = base;
        ecfg.cut_bump = p.cut_bump;
        ecfg.l_grid = l_grid.clone();
        ecfg.experiment_id = experiment_id(cfg);
        let report = perturbed_sparse_experiment(&sspec, &ecfg)?;
        let r = &report.results[0];
        let a = &r.analysis;
        let mut out = CellOut::default();
        out.row(
            0,
            vec![
                e.into(),
                a.theta_star.into(),
                a.beta1_hat.into(),
                a.beta2_hat.into(),
                a.threshold.map(|t| t.threshold).into(),
                s.into(),
                r.above_threshold.map_or(Cell::Text(String::new()), Cell::from),
                a.beta.into(),
                a.sandwich.holds().into(),
                a.wronskian_error.into(),
                r.max_deviation.into(),
                r.within_band.into(),
                r.tail_estimate.into(),
            ],
        );
        for row in &r.rows {
            out.row(
                1,
                vec![
                    e.into(),
                    row.seed.into(),
                    row.fit_psi1.beta1_hat.into(),
                    row.fit_psi1.beta2_hat.into(),
                    row.fit_psi2.beta1_hat.into(),
                    row.fit_psi2.beta2_hat.into(),
                ],
            );
        }
        let sol = sparse_propagate(&sspec, e, a.theta_star)?;
        let amps = sol.amplitudes();
        let points = sspec.bump_sites.iter().map(|n| *n as f64).zip(amps).collect();
        out.trace(format!("amplitude_phi1_{}", tag(e)), "n", "amplitude", points);
        out.verdict(
            format!("{}: perturbed envelopes within band", tag(e)),
            r.within_band,
            format!("max deviation {}", format_real(r.max_deviation)),
        );
        out.verdict(
            format!("{}: unperturbed sandwich", tag(e)),
            a.sandwich.holds(),
            format!("beta {}", format_real(a.beta)),
        );
        Ok(out)
    });
    Ok((tables, keys, outputs))
}

fn singular(cfg: &ExperimentConfig, spec: &OperatorSpec, energies: &[f64]) -> Plan {
    let tables = vec![
        Table::new(
            "singular",
            &[
                "energy",
                "theta",
                "beta",
                "eta",
                "eta_tilde",
                "r_sum_partial",
                "lambda_member",
                "terminal_ratio_psi1",
                "terminal_ratio_psi2",
                "terminal_in_band",
                "trend_toward_one",
                "sandwich",
                "bound_chain_worst_ratio",
            ],
        ),
        Table::new("ratios", &["energy", "l", "ratio_psi1", "iqr_psi1", "ratio_psi2", "iqr_psi2"]),
    ];
    let p = cfg.singular.clone().expect("resolved configuration has singular parameters");
    let m = model(cfg);
    let (base, count) = seeds(cfg);
    let scfg = SingularConfig {
        l_grid: cfg.grids.l.as_ref().map(|g| g.points()).unwrap_or_default(),
        theta: p.theta,
        eta_grid: cfg.grids.eta_tilde.clone(),
        base_seed: base,
        seeds: count,
        enforce_membership: p.enforce_membership,
    };
    let (keys, outputs) = over_energies(energies, |e| {
        let r = stability_experiment(spec, &m, e, &scfg)?;
        let last = |t: &[(f64, f64)]| t.last().map(|x| x.1);
        let mut out = CellOut::default();
        out.row(
            0,
            vec![
                e.into(),
                r.theta.into(),
                r.beta.into(),
                r.eta.into(),
                r.eta_tilde.into(),
                r.r_sum_partial.into(),
                r.lambda_member.into(),
                last(&r.ratio_psi1).into(),
                last(&r.ratio_psi2).into(),
                r.terminal_in_band.into(),
                r.trend_toward_one.into(),
                r.sandwich.holds().into(),
                r.bound_chain.as_ref().map(|b| b.worst_ratio).into(),
            ],
        );
        for (i, (l, r1)) in r.ratio_psi1.iter().enumerate() {
            out.row(
                1,
                vec![e.into(), (*l).into(), (*r1).into(), r.iqr_psi1[i].into(), r.ratio_psi2[i].1.into(), r.iqr_psi2[i].into()],
            );
        }
        out.trace(format!("ratio_psi1_{}", tag(e)), "L", "ratio", r.ratio_psi1.clone());
        out.trace(format!("ratio_psi2_{}", tag(e)), "L", "ratio", r.ratio_psi2.clone());
        out.verdict(
            format!("{}: norm ratios stable", tag(e)),
            r.terminal_in_band && r.trend_toward_one,
            format!("lambda member {}", r.lambda_member),
        );
        Ok(out)
    });
    (tables, keys, outputs)
}
