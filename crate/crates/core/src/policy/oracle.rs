//! Exhaustive reference solutions and random problem generators.

use std::collections::BTreeMap;

use rand::Rng;

use super::{Action, PolicyError, StoppingProblem};
use crate::belief::{classify, stop_cost, Belief, CostModel, EvaluationCosts};
use crate::dataset::Bin;
use crate::structure::MarginalTable;

/// Largest number of complete observation sequences the enumerators accept.
pub const ENUMERATION_LIMIT: f64 = 1e6;

/// Exact optimum at the prior and the optimal action at every history.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForce {
    pub value: f64,
    pub decisions: BTreeMap<Vec<Bin>, Action>,
}

fn guard(problem: &StoppingProblem) -> Result<(), PolicyError> {
    let size = problem.sequence_count();
    if size > ENUMERATION_LIMIT {
        return Err(PolicyError::GuardExceeded {
            size,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(())
}

/// Backward induction over every observation history, with beliefs from
/// Bayes updates and branch probabilities `likelihood . belief`.
pub fn brute_force_value(problem: &StoppingProblem) -> Result<BruteForce, PolicyError> {
    guard(problem)?;
    fn go(
        p: &StoppingProblem,
        b: &Belief,
        history: &mut Vec<Option<Bin>>,
        out: &mut BTreeMap<Vec<Bin>, Action>,
    ) -> Result<f64, PolicyError> {
        let k = history.len();
        let g = stop_cost(b, p.costs());
        let key: Vec<Bin> = history.iter().map(|h| h.expect("full history")).collect();
        if k == p.horizon() {
            out.insert(key, Action::Stop(classify(b, p.costs())));
            return Ok(g);
        }
        let mut cont = p.stage_costs()[k];
        for v in 0..p.table(k).bins() {
            let lik = p.likelihood(k, v, history);
            let prob = b.evidence(lik);
            let next = b.update(lik)?;
            history.push(Some(v as Bin));
            cont += prob * go(p, &next, history, out)?;
            history.pop();
        }
        let action = if g <= cont {
            Action::Stop(classify(b, p.costs()))
        } else {
            Action::Continue
        };
        out.insert(key, action);
        Ok(g.min(cont))
    }
    let mut decisions = BTreeMap::new();
    let value = go(problem, problem.priors(), &mut Vec::new(), &mut decisions)?;
    Ok(BruteForce { value, decisions })
}

/// Exact expected cost of a decision rule under the model's joint
/// distribution `P(x, c) = pi0[c] prod_k P(x_k | x_a(k), c)`.
///
/// `run` receives a complete observation sequence and returns the number of
/// features it consumed and the declared class; it may only look at the first
/// `R` entries.
pub fn expected_cost_of<E>(
    problem: &StoppingProblem,
    mut run: impl FnMut(&[Bin]) -> Result<(usize, usize), E>,
) -> Result<Result<f64, E>, PolicyError> {
    guard(problem)?;
    let l = problem.classes();
    let k_max = problem.horizon();
    let mut total = 0.0;
    let mut seq: Vec<Bin> = vec![0; k_max];
    loop {
        let history: Vec<Option<Bin>> = seq.iter().copied().map(Some).collect();
        let mut joint = problem.priors().as_slice().to_vec();
        for (k, &v) in seq.iter().enumerate() {
            let lik = problem.likelihood(k, usize::from(v), &history);
            joint.iter_mut().zip(lik).for_each(|(j, x)| *j *= x);
        }
        let (r, class) = match run(&seq) {
            Ok(d) => d,
            Err(e) => return Ok(Err(e)),
        };
        let paid: f64 = problem.stage_costs()[..r].iter().sum();
        for (c, &w) in joint.iter().enumerate().take(l) {
            total += w * (paid + problem.costs().q(c, class));
        }
        // odometer over all sequences
        let mut k = k_max;
        loop {
            if k == 0 {
                return Ok(Ok(total));
            }
            k -= 1;
            seq[k] += 1;
            if usize::from(seq[k]) < problem.table(k).bins() {
                break;
            }
            seq[k] = 0;
        }
    }
}

/// The two-leaf example: one binary feature, uniform prior, 0-1 costs and
/// `P(f = 0 | c) = (0.9, 0.1)`.
pub fn toy_problem(e: f64) -> StoppingProblem {
    let table = MarginalTable::new(0, 0, 2, 2, None, None, vec![0.9, 0.1, 0.1, 0.9]).expect("valid table");
    StoppingProblem::new(
        vec![table],
        Belief::uniform(2),
        CostModel::zero_one(2, e).expect("valid costs"),
        vec![e],
    )
    .expect("valid problem")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProblemShape {
    pub horizon: usize,
    pub bins: usize,
    pub classes: usize,
    /// Random off-diagonal misclassification costs instead of 0-1.
    pub random_q: bool,
}

fn smoothed(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let counts: Vec<u32> = (0..n).map(|_| rng.gen_range(0..12)).collect();
    let total: u32 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| (c + 1) as f64 / (total as usize + n) as f64)
        .collect()
}

/// Random problem with Laplace-smoothed count tables, random ancestor links,
/// `e ~ U[0.01, 1]` per stage and 0-1 or random `Q`.
pub fn random_problem(rng: &mut impl Rng, shape: &ProblemShape) -> StoppingProblem {
    let (l, v) = (shape.classes, shape.bins);
    // class_only[k][x * l + c]
    let mut class_only: Vec<Vec<f64>> = Vec::new();
    let mut tables = Vec::with_capacity(shape.horizon);
    for k in 0..shape.horizon {
        let ancestor = if k > 0 && rng.gen_bool(0.75) {
            Some(rng.gen_range(0..k))
        } else {
            None
        };
        let table = match ancestor {
            None => {
                let mut t = vec![0.0; v * l];
                for c in 0..l {
                    for (x, p) in smoothed(rng, v).into_iter().enumerate() {
                        t[x * l + c] = p;
                    }
                }
                class_only.push(t.clone());
                MarginalTable::new(k, k, l, v, None, None, t)
            }
            Some(a) => {
                let mut t = vec![0.0; v * v * l];
                for u in 0..v {
                    for c in 0..l {
                        for (x, p) in smoothed(rng, v).into_iter().enumerate() {
                            t[(u * v + x) * l + c] = p;
                        }
                    }
                }
                let mut marg = vec![0.0; v * l];
                for u in 0..v {
                    for x in 0..v {
                        for c in 0..l {
                            marg[x * l + c] += class_only[a][u * l + c] * t[(u * v + x) * l + c];
                        }
                    }
                }
                for c in 0..l {
                    let s: f64 = (0..v).map(|x| marg[x * l + c]).sum();
                    (0..v).for_each(|x| marg[x * l + c] /= s);
                }
                class_only.push(marg.clone());
                MarginalTable::new(k, k, l, v, Some((a, v)), Some(t), marg)
            }
        };
        tables.push(table.expect("generated tables are normalized"));
    }
    let q: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            (0..l)
                .map(|j| match (i == j, shape.random_q) {
                    (true, _) => 0.0,
                    (false, false) => 1.0,
                    (false, true) => rng.gen_range(0.1..2.0),
                })
                .collect()
        })
        .collect();
    let stage_costs: Vec<f64> = (0..shape.horizon).map(|_| rng.gen_range(0.01..=1.0)).collect();
    let costs = CostModel::new(q, EvaluationCosts::Uniform(stage_costs.first().copied().unwrap_or(0.01)))
        .expect("valid costs");
    let priors = Belief::new(smoothed(rng, l)).expect("smoothed prior");
    StoppingProblem::new(tables, priors, costs, stage_costs).expect("consistent problem")
}
