//! Per-instance inference: request features along the trained ordering until
//! the stage's argmin alpha vector says stop, then declare the minimum-cost
//! class under the final posterior.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{classify, Belief, BeliefError};
use crate::dataset::{Bin, Quantizer};
use crate::policy::{PolicyError, StagePolicy, StoppingProblem};
use crate::structure::{DependencyStructure, FeatureOrdering, StructureKind};

/// Serialization format version of [`PolicyModel`].
pub const FORMAT_VERSION: u32 = 1;

pub type AccessFailure = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("fetching feature {feature} failed: {source}")]
    Accessor {
        feature: usize,
        #[source]
        source: AccessFailure,
    },
    #[error("observed bin {bin} of feature {feature} exceeds its {bins} bins")]
    BinOutOfRange { feature: usize, bin: usize, bins: usize },
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("inconsistent model: {0}")]
    Model(String),
}

/// Pull-style source of raw feature values; `Ok(None)` means missing.
pub trait FeatureAccessor {
    fn fetch(&mut self, feature: usize) -> Result<Option<f64>, AccessFailure>;
}

/// Reads from a dense row; `NaN` cells are missing.
#[derive(Debug, Clone, Copy)]
pub struct RowAccessor<'a>(pub &'a [f64]);

impl FeatureAccessor for RowAccessor<'_> {
    fn fetch(&mut self, feature: usize) -> Result<Option<f64>, AccessFailure> {
        let x = *self
            .0
            .get(feature)
            .ok_or_else(|| format!("row has {} values", self.0.len()))?;
        Ok((!x.is_nan()).then_some(x))
    }
}

impl<F> FeatureAccessor for F
where
    F: FnMut(usize) -> Result<Option<f64>, AccessFailure>,
{
    fn fetch(&mut self, feature: usize) -> Result<Option<f64>, AccessFailure> {
        self(feature)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub feature: usize,
    /// `None` when the value was missing.
    pub bin: Option<Bin>,
    pub posterior: Belief,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub class: usize,
    /// Number of features requested, missing ones included.
    pub features_used: usize,
    pub trace: Vec<TraceStep>,
    /// Sum of the evaluation costs paid.
    pub realized_cost: f64,
}

/// Runs the stop/continue loop on binned observations. `observe(k)` yields
/// the bin of the stage-`k` feature, or `None` when it is missing.
pub fn run_policy<E>(
    problem: &StoppingProblem,
    policy: &StagePolicy,
    mut observe: impl FnMut(usize) -> Result<Option<Bin>, E>,
) -> Result<Result<Decision, E>, RuntimeError> {
    let horizon = problem.horizon();
    if policy.horizon() != horizon || policy.classes() != problem.classes() {
        return Err(RuntimeError::Model("policy and problem dimensions differ".into()));
    }
    let mut b = problem.priors().clone();
    let mut history: Vec<Option<Bin>> = Vec::with_capacity(horizon);
    let mut trace = Vec::new();
    let mut realized_cost = 0.0;
    while history.len() < horizon {
        let k = history.len();
        if policy.best(k, &history, b.as_slice()).action.is_stop() {
            break;
        }
        let table = problem.table(k);
        let bin = match observe(k) {
            Ok(bin) => bin,
            Err(e) => return Ok(Err(e)),
        };
        if let Some(v) = bin {
            if usize::from(v) >= table.bins() {
                return Err(RuntimeError::BinOutOfRange {
                    feature: table.feature(),
                    bin: v.into(),
                    bins: table.bins(),
                });
            }
            b = b.update(problem.likelihood(k, v.into(), &history))?;
        }
        history.push(bin);
        realized_cost += problem.stage_costs()[k];
        trace.push(TraceStep {
            feature: table.feature(),
            bin,
            posterior: b.clone(),
        });
    }
    Ok(Ok(Decision {
        class: classify(&b, problem.costs()),
        features_used: history.len(),
        trace,
        realized_cost,
    }))
}

/// Summary of the dependency structure a model was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureInfo {
    pub kind: StructureKind,
    pub seed: u64,
    pub graph: DependencyStructure,
}

/// Everything needed to classify raw instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub format_version: u32,
    pub feature_names: Vec<String>,
    pub class_labels: Vec<String>,
    pub quantizer: Quantizer,
    pub structure: StructureInfo,
    pub ordering: FeatureOrdering,
    pub problem: StoppingProblem,
    pub policy: StagePolicy,
    pub bank_seed: u64,
    pub beta: usize,
}

impl PolicyModel {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn horizon(&self) -> usize {
        self.ordering.len()
    }

    /// Cross-checks every component's dimensions.
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let bad = |m: &str| Err(RuntimeError::Model(m.to_string()));
        if self.format_version != FORMAT_VERSION {
            return bad("unsupported format version");
        }
        if self.quantizer.n_features() != self.feature_names.len() {
            return bad("quantizer and feature names disagree");
        }
        if self.class_labels.len() != self.problem.classes() {
            return bad("class labels and prior disagree");
        }
        self.problem.validate()?;
        self.policy.validate(&self.problem)?;
        if self.ordering.len() != self.problem.horizon() {
            return bad("ordering and horizon disagree");
        }
        for (k, t) in self.problem.tables().iter().enumerate() {
            let f = self.ordering.feature(k);
            if t.feature() != f || t.ancestor() != self.ordering.ancestor(k) {
                return bad("stage tables do not follow the ordering");
            }
            if f >= self.n_features() || self.quantizer.bins(f) != t.bins() {
                return bad("stage table bins do not match the quantizer");
            }
            if !self.structure.graph.contains(f) {
                return bad("ordered feature missing from the structure");
            }
        }
        Ok(())
    }

    /// Classifies one instance pulled through `accessor`.
    pub fn classify_instance(&self, accessor: &mut impl FeatureAccessor) -> Result<Decision, RuntimeError> {
        let observe = |k: usize| -> Result<Option<Bin>, (usize, AccessFailure)> {
            let f = self.ordering.feature(k);
            let x = accessor.fetch(f).map_err(|e| (f, e))?;
            Ok(x.and_then(|x| self.quantizer.bin(f, x)))
        };
        run_policy(&self.problem, &self.policy, observe)?
            .map_err(|(feature, source)| RuntimeError::Accessor { feature, source })
    }

    /// Classifies a dense row (`NaN` = missing).
    pub fn classify_row(&self, row: &[f64]) -> Result<Decision, RuntimeError> {
        self.classify_instance(&mut RowAccessor(row))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::oracle::toy_problem;
    use crate::policy::{solve, BeliefBank, SolverConfig};

    fn toy(e: f64) -> (StoppingProblem, StagePolicy) {
        let p = toy_problem(e);
        let pol = solve(&p, &BeliefBank::reachable(&p, 1e6).unwrap(), &SolverConfig::default()).unwrap();
        (p, pol)
    }

    #[test]
    fn toy_run_observes_once() {
        let (p, pol) = toy(0.05);
        let d = run_policy(&p, &pol, |_| Ok::<_, ()>(Some(0))).unwrap().unwrap();
        assert_eq!(d.features_used, 1);
        assert_eq!(d.class, 0);
        let post = d.trace[0].posterior.as_slice();
        assert!((post[0] - 0.9).abs() < 1e-12 && (post[1] - 0.1).abs() < 1e-12);
        assert!((d.realized_cost - 0.05).abs() < 1e-15);
    }

    #[test]
    fn expensive_features_are_never_requested() {
        let (p, pol) = toy(0.5);
        let d = run_policy(&p, &pol, |_| -> Result<Option<Bin>, ()> { panic!("no fetch expected") })
            .unwrap()
            .unwrap();
        assert_eq!(d.features_used, 0);
        assert!(d.trace.is_empty());
        assert_eq!(d.class, 0);
    }

    #[test]
    fn missing_keeps_prior_and_counts() {
        let (p, pol) = toy(0.05);
        let d = run_policy(&p, &pol, |_| Ok::<_, ()>(None)).unwrap().unwrap();
        assert_eq!(d.features_used, 1);
        assert_eq!(d.trace[0].bin, None);
        assert_eq!(d.trace[0].posterior, *p.priors());
    }

    #[test]
    fn accessor_failure_propagates() {
        let (p, pol) = toy(0.05);
        let out = run_policy(&p, &pol, Err::<Option<Bin>, _>).unwrap();
        assert_eq!(out, Err(0));
    }

    #[test]
    fn out_of_range_bin_is_rejected() {
        let (p, pol) = toy(0.05);
        assert!(matches!(
            run_policy(&p, &pol, |_| Ok::<_, ()>(Some(7))),
            Err(RuntimeError::BinOutOfRange { .. })
        ));
    }

    #[test]
    fn row_accessor_reads_nan_as_missing() {
        let mut a = RowAccessor(&[1.0, f64::NAN]);
        assert_eq!(a.fetch(0).unwrap(), Some(1.0));
        assert_eq!(a.fetch(1).unwrap(), None);
        assert!(a.fetch(2).is_err());
    }
}
