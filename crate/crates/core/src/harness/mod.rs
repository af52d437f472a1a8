//! Training pipeline, evaluation, experiment sweeps, persistence and the CLI.

pub mod cli;
pub mod eval;
pub mod experiment;
pub mod persist;

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{BeliefError, CostModel, EvaluationCosts};
use crate::dataset::{fit_quantizer, quantize, DatasetError, LabeledDataset};
use crate::infotheory::{feature_scores, filter_by_scores, FeatureFilter};
use crate::policy::oracle::{brute_force_value, expected_cost_of, random_problem, ProblemShape};
use crate::policy::{sample_beliefs, solve, BeliefBank, PolicyError, SolverConfig, StoppingProblem};
use crate::runtime::{run_policy, PolicyModel, RuntimeError, StructureInfo, FORMAT_VERSION};
use crate::structure::{
    build_structure, compute_marginal_tables, derive_ordering, estimate_cpts, StructureError, StructureKind,
};

pub use eval::{cross_validate, evaluate, remove_features, EvalReport, FoldReport};
pub use experiment::{read_results, run_experiment, write_results, ExperimentKind, ExperimentSpec, ResultRow};
pub use persist::{load_model, save_model};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("model file is not valid: {0}")]
    ModelFormat(String),
    #[error("model format version {found} is not supported (expected {expected})")]
    Version { found: String, expected: u32 },
    #[error("invalid experiment spec: {0}")]
    Spec(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl HarnessError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

/// Misclassification costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QSpec {
    ZeroOne,
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub bins: usize,
    pub q: QSpec,
    pub evaluation: EvaluationCosts,
    pub structure: StructureKind,
    pub beta: usize,
    pub seed: u64,
    pub solver: SolverConfig,
}

pub const DEFAULT_COST_E: f64 = 0.01;
pub const DEFAULT_BINS_DENSE: usize = 4;
pub const DEFAULT_BINS_SPARSE: usize = 10;
pub const DEFAULT_BETA: usize = 100;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS_DENSE,
            q: QSpec::ZeroOne,
            evaluation: EvaluationCosts::Uniform(DEFAULT_COST_E),
            structure: StructureKind::Tree,
            beta: DEFAULT_BETA,
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn cost_model(&self, classes: usize) -> Result<CostModel, HarnessError> {
        let q = match &self.q {
            QSpec::ZeroOne => (0..classes)
                .map(|i| (0..classes).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
                .collect(),
            QSpec::Matrix(m) => {
                if m.len() != classes {
                    return Err(HarnessError::Config(format!(
                        "cost matrix is {}x{}, data has {classes} classes",
                        m.len(),
                        m.first().map_or(0, Vec::len)
                    )));
                }
                m.clone()
            }
        };
        Ok(CostModel::new(q, self.evaluation.clone())?)
    }

    /// Uniform evaluation cost, or the default of a per-feature table.
    pub fn base_cost_e(&self) -> f64 {
        match &self.evaluation {
            EvaluationCosts::Uniform(e) => *e,
            EvaluationCosts::PerFeature { default, .. } => *default,
        }
    }
}

/// Wall-clock seconds of the preprocessing, training and inference phases.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub preprocess_s: f64,
    pub train_s: f64,
    pub inference_s: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.preprocess_s + self.train_s + self.inference_s
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: PolicyModel,
    pub filter: FeatureFilter,
    pub times: PhaseTimes,
}

/// Quantize, filter, build the structure, derive the ordering, estimate the
/// tables, sample beliefs and solve.
pub fn train(ds: &LabeledDataset, cfg: &TrainConfig) -> Result<Trained, HarnessError> {
    if cfg.beta == 0 {
        return Err(HarnessError::Config("beta must be at least 1".into()));
    }
    let costs = cfg.cost_model(ds.n_classes())?;

    let t0 = Instant::now();
    let quantizer = fit_quantizer(ds, cfg.bins)?;
    let qds = quantize(ds, &quantizer)?;
    let scores = feature_scores(&qds);
    let filter = filter_by_scores(scores);
    let preprocess_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let graph = build_structure(&qds, &filter.kept, cfg.structure, cfg.seed)?;
    let ordering = derive_ordering(&graph, &filter.scores)?;
    let cpts = estimate_cpts(&qds, &graph)?;
    let tables = compute_marginal_tables(&cpts, &graph, &ordering)?;
    let stage_costs = costs.stage_costs(ordering.features());
    let problem = StoppingProblem::new(tables, cpts.priors.clone(), costs, stage_costs)?;
    let bank = sample_beliefs(&problem, &qds, &ordering, cfg.beta, cfg.seed)?;
    let policy = solve(&problem, &bank, &cfg.solver)?;
    let train_s = t1.elapsed().as_secs_f64();

    let model = PolicyModel {
        format_version: FORMAT_VERSION,
        feature_names: ds.feature_names().to_vec(),
        class_labels: ds.class_labels().to_vec(),
        quantizer,
        structure: StructureInfo {
            kind: cfg.structure,
            seed: cfg.seed,
            graph,
        },
        ordering,
        problem,
        policy,
        bank_seed: cfg.seed,
        beta: cfg.beta,
    };
    Ok(Trained {
        model,
        filter,
        times: PhaseTimes {
            preprocess_s,
            train_s,
            inference_s: 0.0,
        },
    })
}

/// Outcome of comparing solved policies with exhaustive enumeration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    pub cases: usize,
    /// Largest `|J_0(pi_0) - brute force|`.
    pub max_value_gap: f64,
    /// Largest gap between the executed policy's expected cost and the optimum.
    pub max_policy_gap: f64,
}

/// Solves `cases` random small problems on their full reachable belief sets
/// and compares with exhaustive enumeration.
pub fn oracle_check(cases: usize, seed: u64) -> Result<OracleReport, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport {
        cases,
        max_value_gap: 0.0,
        max_policy_gap: 0.0,
    };
    for i in 0..cases {
        let shape = ProblemShape {
            horizon: rng.gen_range(1..=3),
            bins: 2,
            classes: 2 + i % 2,
            random_q: (i / 2) % 2 == 1,
        };
        let problem = random_problem(&mut rng, &shape);
        let bank = BeliefBank::reachable(&problem, 1e6)?;
        let policy = solve(&problem, &bank, &SolverConfig::default())?;
        let optimum = brute_force_value(&problem)?.value;
        let value = policy.value(0, &[], problem.priors().as_slice());
        let executed = expected_cost_of(&problem, |seq| -> Result<(usize, usize), RuntimeError> {
            match run_policy(&problem, &policy, |k| Ok::<_, ()>(Some(seq[k])))? {
                Ok(d) => Ok((d.features_used, d.class)),
                Err(()) => unreachable!("sequence access cannot fail"),
            }
        })??;
        report.max_value_gap = report.max_value_gap.max((value - optimum).abs());
        report.max_policy_gap = report.max_policy_gap.max((executed - optimum).abs());
    }
    Ok(report)
}
