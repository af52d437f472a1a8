//! Parameter sweeps described by a TOML file, written as one CSV row per
//! (dataset, grid point, fold).
//!
//! ```toml
//! kind = "cost-sweep"
//! datasets = ["spambase.csv"]
//! folds = 5
//! seed = 7
//!
//! [base]
//! bins = 10
//!
//! [grid]
//! cost_e = [0.1, 0.01, 0.001, 0.0001]
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::run_fold;
use super::{HarnessError, QSpec, TrainConfig, DEFAULT_BETA, DEFAULT_BINS_DENSE, DEFAULT_BINS_SPARSE, DEFAULT_COST_E};
use crate::belief::EvaluationCosts;
use crate::dataset::{kfold_split, load, DataFormat, Fold, LabeledDataset};
use crate::policy::SolverConfig;
use crate::structure::StructureKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    BinSweep,
    CostSweep,
    StructureCompare,
    MissingRobustness,
    Single,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::BinSweep => "bin-sweep",
            ExperimentKind::CostSweep => "cost-sweep",
            ExperimentKind::StructureCompare => "structure-compare",
            ExperimentKind::MissingRobustness => "missing-robustness",
            ExperimentKind::Single => "single",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub bins: Option<usize>,
    #[serde(default = "default_cost_e")]
    pub cost_e: f64,
    pub cost_q: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_structure")]
    pub structure: StructureKind,
    #[serde(default = "default_beta")]
    pub beta: usize,
    #[serde(default)]
    pub missing_pct: f64,
    pub max_contexts: Option<usize>,
}

fn default_cost_e() -> f64 {
    DEFAULT_COST_E
}

fn default_structure() -> StructureKind {
    StructureKind::Tree
}

fn default_beta() -> usize {
    DEFAULT_BETA
}

fn default_folds() -> usize {
    5
}

fn default_format() -> String {
    "dense".into()
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            bins: None,
            cost_e: DEFAULT_COST_E,
            cost_q: None,
            structure: StructureKind::Tree,
            beta: DEFAULT_BETA,
            missing_pct: 0.0,
            max_contexts: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default)]
    pub bins: Vec<usize>,
    #[serde(default)]
    pub cost_e: Vec<f64>,
    #[serde(default)]
    pub structure: Vec<StructureKind>,
    #[serde(default)]
    pub missing_pct: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub datasets: Vec<PathBuf>,
    #[serde(default = "default_format")]
    pub format: String,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Test fraction of a single seeded split, used instead of k folds.
    pub holdout: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(default)]
    pub grid: Grid,
}

/// One grid point: its label plus the overrides it applies.
#[derive(Debug, Clone, PartialEq)]
struct GridPoint {
    label: String,
    bins: Option<usize>,
    cost_e: Option<f64>,
    structure: Option<StructureKind>,
    missing_pct: Option<f64>,
}

impl GridPoint {
    fn plain(label: String) -> Self {
        Self {
            label,
            bins: None,
            cost_e: None,
            structure: None,
            missing_pct: None,
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let spec: Self = toml::from_str(text).map_err(|e| HarnessError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| HarnessError::io(&path, e))?;
        Self::from_toml(&text)
    }

    pub fn data_format(&self) -> Result<DataFormat, HarnessError> {
        self.format.parse().map_err(|e: String| HarnessError::Spec(e))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Spec(m.to_string()));
        if self.datasets.is_empty() {
            return bad("no datasets listed");
        }
        self.data_format()?;
        match self.holdout {
            Some(h) if !(h > 0.0 && h < 1.0) => return bad("holdout must lie in (0, 1)"),
            None if self.folds < 2 => return bad("folds must be at least 2"),
            _ => {}
        }
        if self.grid_points().is_empty() {
            return bad("the grid for this experiment kind is empty");
        }
        Ok(())
    }

    fn grid_points(&self) -> Vec<GridPoint> {
        let g = &self.grid;
        match self.kind {
            ExperimentKind::Single => vec![GridPoint::plain("-".into())],
            ExperimentKind::BinSweep => g
                .bins
                .iter()
                .map(|&b| GridPoint {
                    bins: Some(b),
                    ..GridPoint::plain(b.to_string())
                })
                .collect(),
            ExperimentKind::CostSweep => g
                .cost_e
                .iter()
                .map(|&e| GridPoint {
                    cost_e: Some(e),
                    ..GridPoint::plain(e.to_string())
                })
                .collect(),
            ExperimentKind::StructureCompare => g
                .structure
                .iter()
                .map(|&s| GridPoint {
                    structure: Some(s),
                    ..GridPoint::plain(s.to_string())
                })
                .collect(),
            ExperimentKind::MissingRobustness => g
                .missing_pct
                .iter()
                .map(|&x| GridPoint {
                    missing_pct: Some(x),
                    ..GridPoint::plain(x.to_string())
                })
                .collect(),
        }
    }

    /// Number of rows a run emits.
    pub fn row_count(&self) -> usize {
        let splits = if self.holdout.is_some() { 1 } else { self.folds };
        self.datasets.len() * self.grid_points().len() * splits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub kind: String,
    pub grid_index: usize,
    pub grid_value: String,
    pub fold: usize,
    pub bins: usize,
    pub cost_e: f64,
    pub structure: String,
    pub beta: usize,
    pub seed: u64,
    pub missing_pct: f64,
    pub accuracy: Option<f64>,
    pub avg_features: Option<f64>,
    pub n_test: Option<usize>,
    pub horizon: Option<usize>,
    pub kept_features: Option<usize>,
    pub error: Option<String>,
    pub preprocess_s: Option<f64>,
    pub train_s: Option<f64>,
    pub inference_s: Option<f64>,
    pub total_s: Option<f64>,
}

/// Columns excluded from determinism comparisons.
pub const TIMING_COLUMNS: [&str; 4] = ["preprocess_s", "train_s", "inference_s", "total_s"];

fn splits(n: usize, spec: &ExperimentSpec) -> Result<Vec<Fold>, HarnessError> {
    match spec.holdout {
        Some(h) => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            let n_test = ((n as f64 * h).round() as usize).clamp(1, n.saturating_sub(1).max(1));
            let mut test = order[..n_test].to_vec();
            let mut train = order[n_test..].to_vec();
            test.sort_unstable();
            train.sort_unstable();
            Ok(vec![Fold { train, test }])
        }
        None => Ok(kfold_split(n, spec.folds, spec.seed)?),
    }
}

/// Runs every (dataset, grid point, fold) in order. Training failures become
/// row-level errors; unreadable datasets abort the run.
pub fn run_experiment(spec: &ExperimentSpec, base_dir: &Path) -> Result<Vec<ResultRow>, HarnessError> {
    spec.validate()?;
    let format = spec.data_format()?;
    let points = spec.grid_points();
    let mut rows = Vec::with_capacity(spec.row_count());
    for path in &spec.datasets {
        let full = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
        let ds: LabeledDataset = load(&full, format)?;
        let name = path
            .file_stem()
            .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        let parts = splits(ds.n_instances(), spec)?;
        for (grid_index, point) in points.iter().enumerate() {
            let default_bins = match format {
                DataFormat::DenseCsv => DEFAULT_BINS_DENSE,
                DataFormat::Sparse => DEFAULT_BINS_SPARSE,
            };
            let cfg = TrainConfig {
                bins: point.bins.or(spec.base.bins).unwrap_or(default_bins),
                q: spec.base.cost_q.clone().map_or(QSpec::ZeroOne, QSpec::Matrix),
                evaluation: EvaluationCosts::Uniform(point.cost_e.unwrap_or(spec.base.cost_e)),
                structure: point.structure.unwrap_or(spec.base.structure),
                beta: spec.base.beta,
                seed: spec.seed,
                solver: SolverConfig {
                    max_contexts: spec.base.max_contexts.unwrap_or(SolverConfig::default().max_contexts),
                    ..SolverConfig::default()
                },
            };
            let missing_pct = point.missing_pct.unwrap_or(spec.base.missing_pct);
            for (fold, part) in parts.iter().enumerate() {
                let mut row = ResultRow {
                    dataset: name.clone(),
                    kind: spec.kind.name().into(),
                    grid_index,
                    grid_value: point.label.clone(),
                    fold,
                    bins: cfg.bins,
                    cost_e: cfg.base_cost_e(),
                    structure: cfg.structure.to_string(),
                    beta: cfg.beta,
                    seed: cfg.seed,
                    missing_pct,
                    accuracy: None,
                    avg_features: None,
                    n_test: None,
                    horizon: None,
                    kept_features: None,
                    error: None,
                    preprocess_s: None,
                    train_s: None,
                    inference_s: None,
                    total_s: None,
                };
                match run_fold(&ds, &cfg, fold, &part.train, &part.test, missing_pct) {
                    Ok(r) => {
                        row.accuracy = Some(r.accuracy);
                        row.avg_features = Some(r.avg_features);
                        row.n_test = Some(r.n_test);
                        row.horizon = Some(r.horizon);
                        row.kept_features = Some(r.kept_features);
                        row.preprocess_s = Some(r.times.preprocess_s);
                        row.train_s = Some(r.times.train_s);
                        row.inference_s = Some(r.times.inference_s);
                        row.total_s = Some(r.times.total());
                    }
                    Err(e) => row.error = Some(e.to_string()),
                }
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub fn write_results(rows: &[ResultRow], out: impl Write) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(result_header())?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io("results", e))?;
    Ok(())
}

/// Column names in output order.
pub fn result_header() -> Vec<&'static str> {
    vec![
        "dataset",
        "kind",
        "grid_index",
        "grid_value",
        "fold",
        "bins",
        "cost_e",
        "structure",
        "beta",
        "seed",
        "missing_pct",
        "accuracy",
        "avg_features",
        "n_test",
        "horizon",
        "kept_features",
        "error",
        "preprocess_s",
        "train_s",
        "inference_s",
        "total_s",
    ]
}

pub fn read_results(input: impl Read) -> Result<Vec<ResultRow>, HarnessError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != result_header() {
        return Err(HarnessError::Spec(format!("unexpected results header: {header:?}")));
    }
    Ok(r.deserialize().collect::<Result<Vec<ResultRow>, _>>()?)
}
