//! Experiment configuration: a single JSON document, validated strictly and
//! resolved so that every default is written back into the provenance copy.

use std::path::{Path, PathBuf};

use jacobi_lab::randpert::{Distribution, FDescriptor, PerturbationModel, SeriesWeights, SiteLaw};
use jacobi_lab::cocycle::{Coefficients, DEFAULT_A_MIN};
use jacobi_lab::variation::{Branch, FPlus};
use jacobi_lab::{ac_criterion, stats, OperatorSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::HarnessError;

/// Energies are rounded to this resolution so that range grids are
/// reproducible across platforms.
pub const ENERGY_RESOLUTION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum Experiment {
    Transfer,
    Subordinacy,
    AcScan,
    Inequality,
    Series,
    Variation,
    Sparse,
    SingularStability,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Transfer => "transfer",
            Experiment::Subordinacy => "subordinacy",
            Experiment::AcScan => "ac-scan",
            Experiment::Inequality => "inequality",
            Experiment::Series => "series",
            Experiment::Variation => "variation",
            Experiment::Sparse => "sparse",
            Experiment::SingularStability => "singular-stability",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnergyGrid {
    Values(Vec<f64>),
    /// `start, start + step, …` up to and including `stop` (within half a step).
    Range { start: f64, stop: f64, step: f64 },
}

impl EnergyGrid {
    pub fn energies(&self) -> Result<Vec<f64>, HarnessError> {
        let raw = match self {
            EnergyGrid::Values(v) => v.clone(),
            EnergyGrid::Range { start, stop, step } => {
                if !(*step > 0.0) || !start.is_finite() || !stop.is_finite() || stop < start {
                    return Err(HarnessError::config(
                        "energies.range",
                        "need finite start ≤ stop and a positive step",
                    ));
                }
                let count = ((stop - start) / step + 0.5).floor() as usize + 1;
                (0..count).map(|k| start + k as f64 * step).collect()
            }
        };
        if raw.is_empty() || raw.iter().any(|e| !e.is_finite()) {
            return Err(HarnessError::config("energies", "energies must be finite and non-empty"));
        }
        Ok(raw.into_iter().map(round_energy).collect())
    }
}

pub fn round_energy(e: f64) -> f64 {
    // Through the decimal text so that the result is the double nearest to
    // the rounded decimal value.
    let digits = -ENERGY_RESOLUTION.log10().round() as usize;
    let r: f64 = format!("{e:.digits$}").parse().expect("formatted float parses");
    // Avoid emitting "-0".
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub base: u64,
    pub count: usize,
}

/// Either explicit values or a geometric grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum GridSpec {
    Values(Vec<f64>),
    Geometric { lo: f64, hi: f64, per_decade: usize },
}

impl GridSpec {
    pub fn points(&self) -> Vec<f64> {
        match self {
            GridSpec::Values(v) => v.clone(),
            GridSpec::Geometric { lo, hi, per_decade } => stats::geometric_grid(*lo, *hi, *per_decade),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grids {
    /// Cesàro checkpoints `N`.
    #[serde(default)]
    pub n: Option<Vec<u64>>,
    /// `L`-grid for norm ratios.
    #[serde(default)]
    pub l: Option<GridSpec>,
    /// `η̃` candidates for the membership scan.
    #[serde(default)]
    pub eta_tilde: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InequalityCase {
    pub n1: u64,
    pub n2: u64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InequalityParams {
    pub f: FDescriptor,
    pub cases: Vec<InequalityCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesParams {
    pub weights: SeriesWeights,
    pub n_tail: u64,
    #[serde(default)]
    pub checkpoints: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeumannParams {
    #[serde(default)]
    pub n_start: Option<u64>,
    pub n_tail: u64,
    pub k_max: usize,
    pub branch: Branch,
    pub f_plus: FPlus,
    pub checkpoints: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationParams {
    pub checkpoints: Vec<u64>,
    pub increment_sites: Vec<u64>,
    #[serde(default)]
    pub neumann: Option<NeumannParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseParams {
    pub j_max: u32,
    /// Decay exponent; when absent, `s_threshold + s_offset` per energy.
    #[serde(default)]
    pub s: Option<f64>,
    #[serde(default = "default_s_offset")]
    pub s_offset: f64,
    #[serde(default = "default_cut_bump")]
    pub cut_bump: u32,
}

fn default_s_offset() -> f64 {
    1.0
}

fn default_cut_bump() -> u32 {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingularParams {
    #[serde(default)]
    pub theta: Option<f64>,
    pub enforce_membership: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubordinacyParams {
    pub theta_grid: usize,
}

/// The configuration as written by the user: most fields are optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub spec: Option<Coefficients>,
    #[serde(default)]
    pub a_min: Option<f64>,
    #[serde(default)]
    pub model: Option<PerturbationModel>,
    #[serde(default)]
    pub energies: Option<EnergyGrid>,
    #[serde(default)]
    pub seeds: Option<Seeds>,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub subordinacy: Option<SubordinacyParams>,
    #[serde(default)]
    pub inequality: Option<InequalityParams>,
    #[serde(default)]
    pub series: Option<SeriesParams>,
    #[serde(default)]
    pub variation: Option<VariationParams>,
    #[serde(default)]
    pub sparse: Option<SparseParams>,
    #[serde(default)]
    pub singular: Option<SingularParams>,
}

impl ExperimentConfig {
    pub fn minimal(experiment: Experiment) -> Self {
        ExperimentConfig {
            experiment,
            spec: None,
            a_min: None,
            model: None,
            energies: None,
            seeds: None,
            grids: Grids::default(),
            output: None,
            workers: None,
            subordinacy: None,
            inequality: None,
            series: None,
            variation: None,
            sparse: None,
            singular: None,
        }
    }

    /// Parses JSON, reporting the path of the offending key on failure.
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            HarnessError::config(if path.is_empty() { "." } else { &path }, e.inner().to_string())
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::config(".", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Fills in every default for the selected experiment.
    pub fn resolve(mut self) -> Result<Self, HarnessError> {
        let exp = self.experiment;
        if self.spec.is_none() {
            self.spec = Some(match exp {
                Experiment::Sparse => Coefficients::Sparse { v: 0.2, gamma: 8 },
                _ => Coefficients::Free,
            });
        }
        self.a_min.get_or_insert(DEFAULT_A_MIN);
        if self.model.is_none() && needs_model(exp) {
            self.model = Some(match exp {
                Experiment::Inequality => PerturbationModel::diagonal(SiteLaw::new(
                    Distribution::Rademacher { c: 1.0 },
                    0.0,
                )),
                Experiment::SingularStability => PerturbationModel::uniform_decay(2.0),
                _ => PerturbationModel::uniform_decay(1.0),
            });
        }
        if self.energies.is_none() && needs_energies(exp) {
            self.energies = Some(match exp {
                Experiment::AcScan => EnergyGrid::Range { start: -3.0, stop: 3.0, step: 0.05 },
                Experiment::Sparse => EnergyGrid::Values(vec![0.6]),
                Experiment::Variation => EnergyGrid::Values(vec![0.3, 0.5, 1.1]),
                _ => EnergyGrid::Values(vec![0.0]),
            });
        }
        if self.seeds.is_none() && needs_seeds(exp) {
            let count = match exp {
                Experiment::Inequality | Experiment::Series => 10_000,
                Experiment::Variation => 200,
                _ => 50,
            };
            self.seeds = Some(Seeds { base: 0, count });
        }
        match exp {
            Experiment::Transfer | Experiment::AcScan => {
                if self.grids.n.is_none() {
                    self.grids.n = Some(ac_criterion::default_n_grid());
                }
            }
            Experiment::Subordinacy | Experiment::SingularStability => {
                if self.grids.l.is_none() {
                    self.grids.l = Some(GridSpec::Geometric { lo: 10.0, hi: 1e4, per_decade: 4 });
                }
            }
            _ => {}
        }
        match exp {
            Experiment::Subordinacy => {
                self.subordinacy.get_or_insert(SubordinacyParams {
                    theta_grid: jacobi_lab::subordinacy::THETA_GRID,
                });
            }
            Experiment::Inequality => {
                self.inequality.get_or_insert_with(|| InequalityParams {
                    f: FDescriptor::Shifted { offset: 1, scale: 1.0 },
                    cases: vec![
                        InequalityCase { n1: 1, n2: 8, r: 2.0 },
                        InequalityCase { n1: 3, n2: 16, r: 3.0 },
                    ],
                });
            }
            Experiment::Series => {
                self.series.get_or_insert(SeriesParams {
                    weights: SeriesWeights::Power { p: 1.0 },
                    n_tail: 10_000,
                    checkpoints: None,
                });
            }
            Experiment::Variation => {
                self.variation.get_or_insert_with(|| VariationParams {
                    checkpoints: vec![10_000],
                    increment_sites: vec![1_000, 3_000, 10_000, 30_000, 100_000],
                    neumann: None,
                });
            }
            Experiment::Sparse => {
                self.sparse.get_or_insert(SparseParams {
                    j_max: 30,
                    s: None,
                    s_offset: default_s_offset(),
                    cut_bump: default_cut_bump(),
                });
            }
            Experiment::SingularStability => {
                self.singular.get_or_insert(SingularParams {
                    theta: None,
                    enforce_membership: false,
                });
            }
            _ => {}
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let exp = self.experiment;
        let spec = self.operator()?;
        if exp == Experiment::Sparse && !matches!(spec.coefficients, Coefficients::Sparse { .. }) {
            return Err(HarnessError::config("spec", "the sparse experiment needs a spec of kind \"sparse\""));
        }
        if let Some(m) = &self.model {
            m.validate().map_err(|e| HarnessError::config("model", e.to_string()))?;
        }
        if let Some(g) = &self.energies {
            g.energies()?;
        }
        if let Some(s) = &self.seeds {
            if s.count == 0 {
                return Err(HarnessError::config("seeds.count", "need at least one seed"));
            }
        }
        if self.workers == Some(0) {
            return Err(HarnessError::config("workers", "need at least one worker"));
        }
        if let Some(n) = &self.grids.n {
            if n.is_empty() || n.contains(&0) || n.windows(2).any(|w| w[1] <= w[0]) {
                return Err(HarnessError::config("grids.n", "must be positive and strictly increasing"));
            }
        }
        if let Some(l) = &self.grids.l {
            let p = l.points();
            if p.is_empty() || p.iter().any(|x| !(*x >= 1.0) || !x.is_finite()) {
                return Err(HarnessError::config("grids.l", "points must be finite and ≥ 1"));
            }
        }
        Ok(())
    }

    pub fn operator(&self) -> Result<OperatorSpec, HarnessError> {
        let coefficients = self.spec.clone().unwrap_or(Coefficients::Free);
        OperatorSpec::new(coefficients, "config")
            .and_then(|s| s.with_a_min(self.a_min.unwrap_or(DEFAULT_A_MIN)))
            .map_err(|e| HarnessError::config("spec", e.to_string()))
    }

    /// Canonical JSON of the resolved configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    /// SHA-256 of [`canonical_json`](Self::canonical_json) with the worker
    /// count and output directory cleared, hex encoded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = None;
        c.output = None;
        let digest = Sha256::digest(c.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn needs_model(e: Experiment) -> bool {
    matches!(
        e,
        Experiment::Inequality | Experiment::Series | Experiment::Variation | Experiment::SingularStability
    )
}

fn needs_energies(e: Experiment) -> bool {
    !matches!(e, Experiment::Inequality | Experiment::Series)
}

fn needs_seeds(e: Experiment) -> bool {
    !matches!(e, Experiment::Transfer | Experiment::AcScan | Experiment::Subordinacy)
}
