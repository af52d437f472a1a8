//! Class-posterior arithmetic on the probability simplex.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BeliefError {
    #[error("belief has {0} entries; at least 2 classes are required")]
    TooShort(usize),
    #[error("belief entry {index} is invalid ({value})")]
    InvalidEntry { index: usize, value: f64 },
    #[error("belief sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("likelihood has {got} entries, belief has {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("update denominator is {0}; likelihood table is corrupt")]
    ZeroEvidence(f64),
    #[error("misclassification matrix must be square with at least 2 classes (got {0} entries)")]
    BadMatrix(usize),
    #[error("misclassification cost Q[{i}][{j}] = {value} is negative or not finite")]
    NegativeCost { i: usize, j: usize, value: f64 },
    #[error("feature evaluation cost must be positive and finite, got {0}")]
    NonPositiveEvalCost(f64),
}

/// Tolerance on the sum of a belief vector.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Posterior probability vector over the `L` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Belief(Vec<f64>);

impl Belief {
    pub fn new(probs: Vec<f64>) -> Result<Self, BeliefError> {
        if probs.len() < 2 {
            return Err(BeliefError::TooShort(probs.len()));
        }
        if let Some((index, &value)) = probs.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p >= 0.0)) {
            return Err(BeliefError::InvalidEntry { index, value });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(BeliefError::NotNormalized(sum));
        }
        Ok(Self(probs))
    }

    /// Normalizes non-negative weights into a belief.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, BeliefError> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(BeliefError::ZeroEvidence(sum));
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn vertex(classes: usize, class: usize) -> Self {
        let mut v = vec![0.0; classes];
        v[class] = 1.0;
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Probability of the observation whose class likelihoods are given.
    pub fn evidence(&self, likelihood: &[f64]) -> f64 {
        dot(likelihood, &self.0)
    }

    /// Bayes update: `diag(likelihood) b / (likelihood . b)`, renormalized.
    pub fn update(&self, likelihood: &[f64]) -> Result<Belief, BeliefError> {
        if likelihood.len() != self.0.len() {
            return Err(BeliefError::LengthMismatch {
                expected: self.0.len(),
                got: likelihood.len(),
            });
        }
        let mut next: Vec<f64> = self.0.iter().zip(likelihood).map(|(b, l)| b * l).collect();
        let z: f64 = next.iter().sum();
        if !(z > 0.0 && z.is_finite()) {
            return Err(BeliefError::ZeroEvidence(z));
        }
        next.iter_mut().for_each(|p| *p /= z);
        Ok(Belief(next))
    }

    /// Largest absolute coordinate difference.
    pub fn max_abs_diff(&self, other: &Belief) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-feature evaluation costs `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationCosts {
    /// The same cost for every feature.
    Uniform(f64),
    /// Cost per feature id; unlisted features use `default`.
    PerFeature { default: f64, costs: BTreeMap<usize, f64> },
}

impl EvaluationCosts {
    pub fn cost_of(&self, feature: usize) -> f64 {
        match self {
            EvaluationCosts::Uniform(e) => *e,
            EvaluationCosts::PerFeature { default, costs } => *costs.get(&feature).unwrap_or(default),
        }
    }

    fn validate(&self) -> Result<(), BeliefError> {
        let ok = |e: f64| if e > 0.0 && e.is_finite() { Ok(()) } else { Err(BeliefError::NonPositiveEvalCost(e)) };
        match self {
            EvaluationCosts::Uniform(e) => ok(*e),
            EvaluationCosts::PerFeature { default, costs } => {
                ok(*default)?;
                costs.values().try_for_each(|&e| ok(e))
            }
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        match self {
            EvaluationCosts::Uniform(e) => EvaluationCosts::Uniform(e * c),
            EvaluationCosts::PerFeature { default, costs } => EvaluationCosts::PerFeature {
                default: default * c,
                costs: costs.iter().map(|(&k, &v)| (k, v * c)).collect(),
            },
        }
    }
}

/// Misclassification matrix `Q` (row = true class, column = declared class)
/// plus feature evaluation costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    classes: usize,
    misclassification: Vec<f64>,
    evaluation: EvaluationCosts,
}

impl CostModel {
    /// `q[i][j]` is the cost of declaring `j` when `i` is true.
    pub fn new(q: Vec<Vec<f64>>, evaluation: EvaluationCosts) -> Result<Self, BeliefError> {
        let classes = q.len();
        if classes < 2 || q.iter().any(|row| row.len() != classes) {
            return Err(BeliefError::BadMatrix(q.iter().map(Vec::len).sum()));
        }
        for (i, row) in q.iter().enumerate() {
            for (j, &value) in row.iter().enumerate() {
                if !(value >= 0.0 && value.is_finite()) {
                    return Err(BeliefError::NegativeCost { i, j, value });
                }
            }
        }
        evaluation.validate()?;
        Ok(Self {
            classes,
            misclassification: q.into_iter().flatten().collect(),
            evaluation,
        })
    }

    /// 0-1 misclassification costs with a uniform evaluation cost.
    pub fn zero_one(classes: usize, e: f64) -> Result<Self, BeliefError> {
        let q = (0..classes)
            .map(|i| (0..classes).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect();
        Self::new(q, EvaluationCosts::Uniform(e))
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn q(&self, truth: usize, declared: usize) -> f64 {
        self.misclassification[truth * self.classes + declared]
    }

    pub fn max_q(&self) -> f64 {
        self.misclassification.iter().copied().fold(0.0, f64::max)
    }

    pub fn evaluation(&self) -> &EvaluationCosts {
        &self.evaluation
    }

    /// Column `j` of `Q`: the expected-cost weights of declaring class `j`.
    pub fn stop_vector(&self, declared: usize) -> Vec<f64> {
        (0..self.classes).map(|i| self.q(i, declared)).collect()
    }

    /// Evaluation cost of each feature in an acquisition order.
    pub fn stage_costs(&self, features: &[usize]) -> Vec<f64> {
        features.iter().map(|&f| self.evaluation.cost_of(f)).collect()
    }

    /// Multiplies every cost by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            classes: self.classes,
            misclassification: self.misclassification.iter().map(|q| q * c).collect(),
            evaluation: self.evaluation.scaled(c),
        }
    }

    fn declare_costs<'a>(&'a self, b: &'a Belief) -> impl Iterator<Item = f64> + 'a {
        (0..self.classes).map(move |j| (0..self.classes).map(|i| self.q(i, j) * b.0[i]).sum())
    }
}

/// Expected cost of classifying now: `min_j Q_j . b`.
pub fn stop_cost(b: &Belief, cm: &CostModel) -> f64 {
    cm.declare_costs(b).fold(f64::INFINITY, f64::min)
}

/// Minimum-expected-cost class; ties go to the smallest index.
pub fn classify(b: &Belief, cm: &CostModel) -> usize {
    let mut best = 0;
    let mut best_cost = f64::INFINITY;
    for (j, cost) in cm.declare_costs(b).enumerate() {
        if cost < best_cost {
            best = j;
            best_cost = cost;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(v: &[f64]) -> Belief {
        Belief::new(v.to_vec()).unwrap()
    }

    fn asym() -> CostModel {
        CostModel::new(vec![vec![0.0, 1.0], vec![5.0, 0.0]], EvaluationCosts::Uniform(0.01)).unwrap()
    }

    fn random_simplex(rng: &mut impl Rng, l: usize) -> Belief {
        let w: Vec<f64> = (0..l).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
        Belief::from_weights(w).unwrap()
    }

    #[test]
    fn update_examples() {
        let u = b(&[0.5, 0.5]).update(&[0.8, 0.2]).unwrap();
        assert!((u.as_slice()[0] - 0.8).abs() < 1e-15 && (u.as_slice()[1] - 0.2).abs() < 1e-15);
        assert_eq!(b(&[0.3, 0.7]).update(&[0.5, 0.5]).unwrap(), b(&[0.3, 0.7]));
        assert_eq!(b(&[1.0, 0.0]).update(&[0.1, 0.9]).unwrap(), b(&[1.0, 0.0]));
    }

    #[test]
    fn update_errors() {
        assert!(matches!(b(&[1.0, 0.0]).update(&[0.0, 0.9]), Err(BeliefError::ZeroEvidence(_))));
        assert!(matches!(
            b(&[0.5, 0.5]).update(&[0.5]),
            Err(BeliefError::LengthMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn construction_rejects_invalid() {
        assert!(Belief::new(vec![0.5, 0.6]).is_err());
        assert!(Belief::new(vec![1.0]).is_err());
        assert!(Belief::new(vec![-0.1, 1.1]).is_err());
        assert!(CostModel::zero_one(2, 0.0).is_err());
        assert!(CostModel::new(vec![vec![0.0, -1.0], vec![1.0, 0.0]], EvaluationCosts::Uniform(0.1)).is_err());
    }

    #[test]
    fn stop_cost_examples() {
        let zo = CostModel::zero_one(3, 0.01).unwrap();
        assert!((stop_cost(&b(&[0.2, 0.5, 0.3]), &zo) - 0.5).abs() < 1e-15);
        assert!((stop_cost(&b(&[0.3, 0.7]), &asym()) - 0.3).abs() < 1e-15);
        assert_eq!(stop_cost(&Belief::vertex(3, 1), &zo), 0.0);
    }

    #[test]
    fn classify_examples() {
        let zo = CostModel::zero_one(3, 0.01).unwrap();
        assert_eq!(classify(&b(&[0.2, 0.5, 0.3]), &zo), 1);
        // Q_1.b = 3.5, Q_2.b = 0.3
        assert_eq!(classify(&b(&[0.3, 0.7]), &asym()), 1);
        assert_eq!(classify(&b(&[0.5, 0.5]), &CostModel::zero_one(2, 0.01).unwrap()), 0);
    }

    #[test]
    fn stop_vectors_are_columns() {
        assert_eq!(asym().stop_vector(0), vec![0.0, 5.0]);
        assert_eq!(asym().stop_vector(1), vec![1.0, 0.0]);
    }

    #[test]
    fn update_normalizes_random_trials() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            let l = rng.gen_range(2..6);
            let prior = random_simplex(&mut rng, l);
            let lik: Vec<f64> = (0..l).map(|_| rng.gen_range(1e-6..1.0)).collect();
            let post = prior.update(&lik).unwrap();
            assert!((post.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn stop_cost_is_concave() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let l = rng.gen_range(2..5);
            let q: Vec<Vec<f64>> = (0..l)
                .map(|i| (0..l).map(|j| if i == j { 0.0 } else { rng.gen_range(0.0..5.0) }).collect())
                .collect();
            let cm = CostModel::new(q, EvaluationCosts::Uniform(0.1)).unwrap();
            let (b1, b2) = (random_simplex(&mut rng, l), random_simplex(&mut rng, l));
            let lam: f64 = rng.gen();
            let mix: Vec<f64> = b1.0.iter().zip(&b2.0).map(|(x, y)| lam * x + (1.0 - lam) * y).collect();
            let mix = Belief::from_weights(mix).unwrap();
            assert!(stop_cost(&mix, &cm) >= lam * stop_cost(&b1, &cm) + (1.0 - lam) * stop_cost(&b2, &cm) - 1e-12);
        }
    }

    proptest! {
        #[test]
        fn update_order_invariant(
            p in prop::collection::vec(0.01f64..1.0, 3),
            l1 in prop::collection::vec(0.01f64..1.0, 3),
            l2 in prop::collection::vec(0.01f64..1.0, 3),
        ) {
            let prior = Belief::from_weights(p).unwrap();
            let a = prior.update(&l1).unwrap().update(&l2).unwrap();
            let c = prior.update(&l2).unwrap().update(&l1).unwrap();
            prop_assert!(a.max_abs_diff(&c) <= 1e-12);
        }

        #[test]
        fn classify_scale_invariant(p in prop::collection::vec(0.01f64..1.0, 3),
                                    q in prop::collection::vec(0.0f64..4.0, 9),
                                    c in 0.01f64..100.0) {
            let b = Belief::from_weights(p).unwrap();
            let rows: Vec<Vec<f64>> = q.chunks(3).map(<[f64]>::to_vec).collect();
            let cm = CostModel::new(rows, EvaluationCosts::Uniform(0.1)).unwrap();
            prop_assert_eq!(classify(&b, &cm), classify(&b, &cm.scaled(c)));
        }
    }
}
