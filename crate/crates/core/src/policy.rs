//! Offline solution of the finite-horizon stopping problem.
//!
//! A stage-`k` value function is a set of action-tagged alpha vectors,
//! `J_k(b) = min_i alpha_i . b`. Because each stage's likelihood depends on an
//! earlier feature's bin, the alpha sets are keyed by a *context*: the bins of
//! those earlier positions that some later stage still conditions on. Within a
//! context, the belief is a sufficient statistic, so point-based backups at
//! every reachable belief reproduce the exact optimum at those beliefs.
//!
//! Context sizes can be capped with [`SolverConfig::max_contexts`]; positions
//! that do not fit are forgotten, and a backup whose ancestor was forgotten
//! emits one vector per possible ancestor bin.

pub mod oracle;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{dot, stop_cost, Belief, BeliefError, CostModel};
use crate::dataset::{Bin, QuantizedDataset};
use crate::structure::{FeatureOrdering, MarginalTable};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("inconsistent problem: {0}")]
    Problem(String),
    #[error("inconsistent policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error("enumeration needs {size} histories, above the limit of {limit}")]
    GuardExceeded { size: f64, limit: f64 },
    #[error("belief sampling needs a non-empty training set")]
    EmptyTraining,
    #[error("belief bank size must be at least 1")]
    ZeroBeta,
}

/// Ties within this distance count as equal when choosing actions.
pub const TIE_TOL: f64 = 1e-12;
/// Beliefs closer than this (max-norm) are merged in a bank.
pub const BANK_DEDUP_TOL: f64 = 1e-9;

/// Everything the solver and the runtime need: per-stage likelihoods, the
/// prior, costs, and the evaluation cost of each stage's feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingProblem {
    tables: Vec<MarginalTable>,
    priors: Belief,
    costs: CostModel,
    stage_costs: Vec<f64>,
}

impl StoppingProblem {
    pub fn new(
        tables: Vec<MarginalTable>,
        priors: Belief,
        costs: CostModel,
        stage_costs: Vec<f64>,
    ) -> Result<Self, PolicyError> {
        let p = Self {
            tables,
            priors,
            costs,
            stage_costs,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Problem(m));
        let l = self.priors.len();
        if self.costs.classes() != l {
            return bad(format!("cost model has {} classes, prior has {l}", self.costs.classes()));
        }
        if self.stage_costs.len() != self.tables.len() {
            return bad("one evaluation cost per stage required".into());
        }
        if let Some(e) = self.stage_costs.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return bad(format!("evaluation cost {e} is not positive"));
        }
        for (k, t) in self.tables.iter().enumerate() {
            if t.stage() != k {
                return bad(format!("table {k} is labeled stage {}", t.stage()));
            }
            if t.classes() != l {
                return bad(format!("table {k} has {} classes", t.classes()));
            }
            if let Some(a) = t.ancestor() {
                if self.tables[a].bins() != t.ancestor_bins() {
                    return bad(format!("table {k} expects {} ancestor bins", t.ancestor_bins()));
                }
            }
        }
        Ok(())
    }

    /// Horizon `K'`.
    pub fn horizon(&self) -> usize {
        self.tables.len()
    }

    pub fn classes(&self) -> usize {
        self.priors.len()
    }

    pub fn tables(&self) -> &[MarginalTable] {
        &self.tables
    }

    pub fn table(&self, stage: usize) -> &MarginalTable {
        &self.tables[stage]
    }

    pub fn priors(&self) -> &Belief {
        &self.priors
    }

    pub fn costs(&self) -> &CostModel {
        &self.costs
    }

    pub fn stage_costs(&self) -> &[f64] {
        &self.stage_costs
    }

    /// Multiplies every cost by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            tables: self.tables.clone(),
            priors: self.priors.clone(),
            costs: self.costs.scaled(c),
            stage_costs: self.stage_costs.iter().map(|e| e * c).collect(),
        }
    }

    /// Likelihood column of observing `v` at `stage` given the full history.
    pub fn likelihood(&self, stage: usize, v: usize, history: &[Option<Bin>]) -> &[f64] {
        let t = &self.tables[stage];
        let u = t.ancestor().and_then(|a| history[a]).map(usize::from);
        t.likelihood(v, u)
    }

    /// Number of complete observation sequences, `prod_k V_k`.
    pub fn sequence_count(&self) -> f64 {
        self.tables.iter().map(|t| t.bins() as f64).product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Stop(usize),
    Continue,
}

impl Action {
    pub fn is_stop(self) -> bool {
        matches!(self, Action::Stop(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaVector {
    pub weights: Vec<f64>,
    pub action: Action,
    pub stage: usize,
}

impl AlphaVector {
    pub fn value(&self, b: &[f64]) -> f64 {
        dot(&self.weights, b)
    }
}

/// Which earlier positions a stage's alpha sets are keyed by.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLayout {
    positions: Vec<usize>,
    radices: Vec<usize>,
}

impl ContextLayout {
    pub fn new(positions: Vec<usize>, radices: Vec<usize>) -> Result<Self, PolicyError> {
        if positions.len() != radices.len() || positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PolicyError::Policy("context positions must be strictly increasing".into()));
        }
        if radices.contains(&0) {
            return Err(PolicyError::Policy("zero-bin context position".into()));
        }
        Ok(Self { positions, radices })
    }

    pub fn empty() -> Self {
        Self {
            positions: Vec::new(),
            radices: Vec::new(),
        }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn radices(&self) -> &[usize] {
        &self.radices
    }

    /// Number of distinct contexts.
    pub fn size(&self) -> usize {
        self.radices.iter().product()
    }

    fn encode(&self, mut bin_of: impl FnMut(usize) -> usize) -> usize {
        self.positions
            .iter()
            .zip(&self.radices)
            .fold(0, |acc, (&p, &r)| acc * r + bin_of(p))
    }

    fn decode(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.positions.len()];
        for i in (0..self.positions.len()).rev() {
            out[i] = index % self.radices[i];
            index /= self.radices[i];
        }
        out
    }

    /// Indices of every context consistent with the known bins; unknown
    /// positions range over all their bins.
    pub fn matching(&self, history: &[Option<Bin>]) -> Vec<usize> {
        let mut out = vec![0usize];
        for (&p, &r) in self.positions.iter().zip(&self.radices) {
            out = match history.get(p).copied().flatten() {
                Some(v) => out.into_iter().map(|i| i * r + usize::from(v)).collect(),
                None => out.into_iter().flat_map(|i| (0..r).map(move |v| i * r + v)).collect(),
            };
        }
        out
    }
}

/// Alpha sets of one stage, one set per context. Contexts that no bank point
/// reached are unsupported and answer with `fallback`, the pruned union of
/// the supported sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSet {
    pub stage: usize,
    pub layout: ContextLayout,
    pub vectors: Vec<Vec<AlphaVector>>,
    pub supported: Vec<bool>,
    pub fallback: Vec<AlphaVector>,
}

impl StageSet {
    fn stop_only(costs: &CostModel, stage: usize, layout: ContextLayout) -> Self {
        let stops = stop_vectors(costs, stage);
        let size = layout.size();
        Self {
            stage,
            layout,
            vectors: vec![stops.clone(); size],
            supported: vec![true; size],
            fallback: stops,
        }
    }

    /// The set used for a fully known context.
    pub fn effective(&self, ctx: usize) -> &[AlphaVector] {
        if self.supported[ctx] {
            &self.vectors[ctx]
        } else {
            &self.fallback
        }
    }

    /// Vectors eligible under a partially known history: the union over
    /// matching supported contexts, or the fallback when none is supported.
    pub fn candidates<'a>(&'a self, history: &[Option<Bin>]) -> Box<dyn Iterator<Item = &'a AlphaVector> + 'a> {
        let ctxs: Vec<usize> = self.layout.matching(history).into_iter().filter(|&c| self.supported[c]).collect();
        if ctxs.is_empty() {
            Box::new(self.fallback.iter())
        } else {
            Box::new(ctxs.into_iter().flat_map(move |c| self.vectors[c].iter()))
        }
    }
}

/// Alpha sets for stages `0..=K'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePolicy {
    classes: usize,
    stages: Vec<StageSet>,
}

impl StagePolicy {
    pub fn new(classes: usize, stages: Vec<StageSet>) -> Result<Self, PolicyError> {
        let p = Self { classes, stages };
        p.validate_shape()?;
        Ok(p)
    }

    fn validate_shape(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Policy(m));
        if self.stages.is_empty() {
            return bad("no stages".into());
        }
        for (k, s) in self.stages.iter().enumerate() {
            if s.stage != k {
                return bad(format!("stage {k} is labeled {}", s.stage));
            }
            if s.layout.positions.iter().any(|&p| p >= k) {
                return bad(format!("stage {k} is keyed by a later position"));
            }
            if s.vectors.len() != s.layout.size() {
                return bad(format!("stage {k} has {} sets for {} contexts", s.vectors.len(), s.layout.size()));
            }
            if s.supported.len() != s.vectors.len() {
                return bad(format!("stage {k} support flags do not match its contexts"));
            }
            for set in s.vectors.iter().chain([&s.fallback]) {
                if set.is_empty() {
                    return bad(format!("stage {k} has an empty set"));
                }
                for a in set {
                    if a.weights.len() != self.classes || a.stage != k {
                        return bad(format!("malformed vector at stage {k}"));
                    }
                    if a.weights.iter().any(|w| !w.is_finite()) {
                        return bad(format!("non-finite weight at stage {k}"));
                    }
                    if matches!(a.action, Action::Stop(j) if j >= self.classes) {
                        return bad(format!("stop class out of range at stage {k}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Full consistency check against the problem it was solved for: every
    /// set contains every Stop vector and context radices match the tables.
    pub fn validate(&self, problem: &StoppingProblem) -> Result<(), PolicyError> {
        self.validate_shape()?;
        let bad = |m: String| Err(PolicyError::Policy(m));
        if self.classes != problem.classes() || self.stages.len() != problem.horizon() + 1 {
            return bad("policy does not match the problem dimensions".into());
        }
        let stops: Vec<Vec<f64>> = (0..self.classes).map(|j| problem.costs().stop_vector(j)).collect();
        for s in &self.stages {
            for (&p, &r) in s.layout.positions.iter().zip(&s.layout.radices) {
                if problem.table(p).bins() != r {
                    return bad(format!("stage {} context radix mismatch", s.stage));
                }
            }
            for set in s.vectors.iter().chain([&s.fallback]) {
                for (j, stop) in stops.iter().enumerate() {
                    if !set.iter().any(|a| a.action == Action::Stop(j) && &a.weights == stop) {
                        return bad(format!("stage {} lacks the Stop({j}) vector", s.stage));
                    }
                }
            }
        }
        let last = &self.stages[problem.horizon()];
        if last.vectors.iter().flatten().chain(&last.fallback).any(|a| !a.action.is_stop()) {
            return bad("final stage must hold Stop vectors only".into());
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn horizon(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn stage(&self, k: usize) -> &StageSet {
        &self.stages[k]
    }

    pub fn stages(&self) -> &[StageSet] {
        &self.stages
    }

    /// Total vector count over all stages and contexts.
    pub fn vector_count(&self) -> usize {
        self.stages.iter().flat_map(|s| &s.vectors).map(Vec::len).sum()
    }

    /// Largest set size of any stage context.
    pub fn max_set_size(&self) -> usize {
        self.stages.iter().flat_map(|s| &s.vectors).map(Vec::len).max().unwrap_or(0)
    }

    /// `J_k(b)` under the contexts consistent with `history`.
    pub fn value(&self, k: usize, history: &[Option<Bin>], b: &[f64]) -> f64 {
        self.best(k, history, b).value(b)
    }

    /// Argmin vector at stage `k` over [`StageSet::candidates`]. Ties within
    /// [`TIE_TOL`] prefer Stop, then the lower index.
    pub fn best(&self, k: usize, history: &[Option<Bin>], b: &[f64]) -> &AlphaVector {
        let candidates = self.stages[k].candidates(history);
        let mut min = f64::INFINITY;
        let mut scored: Vec<(f64, &AlphaVector)> = Vec::new();
        for a in candidates {
            let v = a.value(b);
            min = min.min(v);
            scored.push((v, a));
        }
        let near = scored.iter().filter(|(v, _)| *v <= min + TIE_TOL);
        let mut first = None;
        for &(_, a) in near {
            if a.action.is_stop() {
                return a;
            }
            first.get_or_insert(a);
        }
        first.expect("every set is non-empty")
    }
}

/// A bank belief with the observations that produced it. `None` entries are
/// unknown and match every bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BankPoint {
    pub belief: Belief,
    pub history: Vec<Option<Bin>>,
}

/// Reachable belief points per stage `0..=K'`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefBank {
    stages: Vec<Vec<BankPoint>>,
}

impl BeliefBank {
    pub fn new(stages: Vec<Vec<BankPoint>>) -> Self {
        Self {
            stages: stages.into_iter().map(dedup_points).collect(),
        }
    }

    /// Bank of bare beliefs; every point matches every context.
    pub fn from_beliefs(stages: Vec<Vec<Belief>>) -> Self {
        Self::new(
            stages
                .into_iter()
                .enumerate()
                .map(|(k, bs)| {
                    bs.into_iter()
                        .map(|belief| BankPoint {
                            belief,
                            history: vec![None; k],
                        })
                        .collect()
                })
                .collect(),
        )
    }

    pub fn stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, k: usize) -> &[BankPoint] {
        &self.stages[k]
    }

    pub fn beliefs(&self, k: usize) -> impl Iterator<Item = &Belief> {
        self.stages[k].iter().map(|p| &p.belief)
    }

    /// Every belief reachable by some observation sequence.
    pub fn reachable(problem: &StoppingProblem, limit: f64) -> Result<Self, PolicyError> {
        let size = problem.sequence_count();
        if size > limit {
            return Err(PolicyError::GuardExceeded { size, limit });
        }
        let mut stages = vec![Vec::new(); problem.horizon() + 1];
        fn walk(
            p: &StoppingProblem,
            k: usize,
            b: Belief,
            history: &mut Vec<Option<Bin>>,
            out: &mut [Vec<BankPoint>],
        ) -> Result<(), PolicyError> {
            if k < p.horizon() {
                for v in 0..p.table(k).bins() {
                    let next = b.update(p.likelihood(k, v, history))?;
                    history.push(Some(v as Bin));
                    walk(p, k + 1, next, history, out)?;
                    history.pop();
                }
            }
            out[k].push(BankPoint {
                belief: b,
                history: history.clone(),
            });
            Ok(())
        }
        walk(problem, 0, problem.priors().clone(), &mut Vec::new(), &mut stages)?;
        Ok(Self::new(stages))
    }
}

fn dedup_points(points: Vec<BankPoint>) -> Vec<BankPoint> {
    let mut out: Vec<BankPoint> = Vec::with_capacity(points.len());
    for p in points {
        if !out
            .iter()
            .any(|o| o.history == p.history && o.belief.max_abs_diff(&p.belief) <= BANK_DEDUP_TOL)
        {
            out.push(p);
        }
    }
    out
}

/// Runs the update chain of up to `beta` seeded training instances along the
/// ordering and collects each stage's points. Stage 0 is the prior alone.
pub fn sample_beliefs(
    problem: &StoppingProblem,
    train: &QuantizedDataset,
    ord: &FeatureOrdering,
    beta: usize,
    seed: u64,
) -> Result<BeliefBank, PolicyError> {
    if beta == 0 {
        return Err(PolicyError::ZeroBeta);
    }
    if train.n_instances() == 0 {
        return Err(PolicyError::EmptyTraining);
    }
    if ord.len() != problem.horizon() {
        return Err(PolicyError::Problem("ordering length differs from the horizon".into()));
    }
    let mut picks: Vec<usize> = (0..train.n_instances()).collect();
    picks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    picks.truncate(beta);
    let mut stages: Vec<Vec<BankPoint>> = vec![Vec::new(); problem.horizon() + 1];
    stages[0].push(BankPoint {
        belief: problem.priors().clone(),
        history: Vec::new(),
    });
    for &i in &picks {
        let mut b = problem.priors().clone();
        let mut history: Vec<Option<Bin>> = Vec::with_capacity(problem.horizon());
        for k in 0..problem.horizon() {
            let v = train.bin(i, ord.feature(k));
            b = b.update(problem.likelihood(k, usize::from(v), &history))?;
            history.push(Some(v));
            stages[k + 1].push(BankPoint {
                belief: b.clone(),
                history: history.clone(),
            });
        }
    }
    Ok(BeliefBank::new(stages))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackupMode {
    /// Back up every bank point in each context it matches.
    Full,
    /// Visit a context's points in seeded random order and skip those already
    /// improved over stopping by an earlier backup of the same context.
    Randomized { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Upper bound on contexts per stage; `1` keys nothing and unions backups
    /// over ancestor bins.
    pub max_contexts: usize,
    pub mode: BackupMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_contexts: 4096,
            mode: BackupMode::Full,
        }
    }
}

/// Context layouts for stages `0..=K'`.
pub fn context_layouts(problem: &StoppingProblem, max_contexts: usize) -> Vec<ContextLayout> {
    let k_max = problem.horizon();
    let ancestors: Vec<Option<usize>> = problem.tables().iter().map(MarginalTable::ancestor).collect();
    let mut out = vec![ContextLayout::empty()];
    let mut prev: BTreeSet<usize> = BTreeSet::new();
    for k in 1..=k_max {
        let live: BTreeSet<usize> = ancestors[k..].iter().flatten().copied().filter(|&p| p < k).collect();
        let mut keep: Vec<usize> = prev.iter().copied().chain([k - 1]).filter(|p| live.contains(p)).collect();
        keep.sort_unstable();
        keep.dedup();
        let radix = |p: &usize| problem.table(*p).bins();
        while keep.iter().map(radix).product::<usize>() > max_contexts.max(1) {
            keep.remove(0);
        }
        prev = keep.iter().copied().collect();
        let radices = keep.iter().map(radix).collect();
        out.push(ContextLayout {
            positions: keep,
            radices,
        });
    }
    out
}

fn stop_vectors(costs: &CostModel, stage: usize) -> Vec<AlphaVector> {
    (0..costs.classes())
        .map(|j| AlphaVector {
            weights: costs.stop_vector(j),
            action: Action::Stop(j),
            stage,
        })
        .collect()
}

/// Drops near-duplicates and Continue vectors that some kept vector beats
/// pointwise. Stop vectors are always kept and come first.
pub fn prune(stops: Vec<AlphaVector>, continues: Vec<AlphaVector>) -> Vec<AlphaVector> {
    let mut kept = stops;
    let n_stop = kept.len();
    for c in continues {
        let redundant = kept.iter().any(|k| {
            k.weights
                .iter()
                .zip(&c.weights)
                .all(|(kw, cw)| *kw <= *cw || (kw - cw).abs() <= TIE_TOL)
        });
        if redundant {
            continue;
        }
        let mut i = n_stop;
        while i < kept.len() {
            if kept[i].weights.iter().zip(&c.weights).all(|(kw, cw)| kw >= cw) {
                kept.remove(i);
            } else {
                i += 1;
            }
        }
        kept.push(c);
    }
    kept
}

/// One backward step: stage-`k` sets from the stage-`k+1` sets. Each bank
/// point is backed up only in the contexts its history matches.
pub fn backup_stage(
    problem: &StoppingProblem,
    k: usize,
    layout: &ContextLayout,
    next: &StageSet,
    bank: &[BankPoint],
    mode: BackupMode,
) -> StageSet {
    let table = problem.table(k);
    let e = problem.stage_costs()[k];
    let l = problem.classes();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); layout.size()];
    for (i, p) in bank.iter().enumerate() {
        for ctx in layout.matching(&p.history) {
            members[ctx].push(i);
        }
    }
    let vectors: Vec<Vec<AlphaVector>> = members
        .par_iter()
        .enumerate()
        .map(|(ctx, points)| {
            if points.is_empty() {
                return stop_vectors(problem.costs(), k);
            }
            let bins = layout.decode(ctx);
            let bin_at = |p: usize| layout.positions.iter().position(|&q| q == p).map(|i| bins[i]);
            // projections[v][i] = next vector i scaled by the likelihood of v
            let project = |u: Option<usize>| -> Vec<Vec<Vec<f64>>> {
                (0..table.bins())
                    .map(|v| {
                        let nctx = next.layout.encode(|p| if p == k { v } else { bin_at(p).expect("kept position") });
                        let lik = table.likelihood(v, u);
                        next.effective(nctx)
                            .iter()
                            .map(|a| a.weights.iter().zip(lik).map(|(w, x)| w * x).collect())
                            .collect()
                    })
                    .collect()
            };
            let mut cache: Vec<Option<Vec<Vec<Vec<f64>>>>> = vec![None; table.ancestor_bins() + 1];
            let u_options = |p: &BankPoint| -> Vec<Option<usize>> {
                match table.ancestor() {
                    None => vec![None],
                    Some(a) => match bin_at(a).or_else(|| p.history.get(a).copied().flatten().map(usize::from)) {
                        Some(u) => vec![Some(u)],
                        None => (0..table.ancestor_bins()).map(Some).collect(),
                    },
                }
            };
            let mut back_up = |p: &BankPoint, out: &mut Vec<AlphaVector>| {
                let b = p.belief.as_slice();
                for u in u_options(p) {
                    let slot = u.map_or(0, |u| u + 1);
                    let projections = cache[slot].get_or_insert_with(|| project(u));
                    let mut w = vec![e; l];
                    for proj in projections.iter() {
                        let mut best = &proj[0];
                        let mut best_val = dot(best, b);
                        for g in &proj[1..] {
                            let val = dot(g, b);
                            if val < best_val {
                                best = g;
                                best_val = val;
                            }
                        }
                        w.iter_mut().zip(best).for_each(|(wi, gi)| *wi += gi);
                    }
                    out.push(AlphaVector {
                        weights: w,
                        action: Action::Continue,
                        stage: k,
                    });
                }
            };
            let mut continues = Vec::new();
            match mode {
                BackupMode::Full => points.iter().for_each(|&i| back_up(&bank[i], &mut continues)),
                BackupMode::Randomized { seed } => {
                    let mix = seed ^ ((k as u64) << 32) ^ (ctx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                    let mut order = points.clone();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
                    let mut improved = vec![false; bank.len()];
                    for i in order {
                        if improved[i] {
                            continue;
                        }
                        let from = continues.len();
                        back_up(&bank[i], &mut continues);
                        for &j in points {
                            let b = bank[j].belief.as_slice();
                            if !improved[j]
                                && continues[from..]
                                    .iter()
                                    .any(|a| a.value(b) < stop_cost(&bank[j].belief, problem.costs()) - TIE_TOL)
                            {
                                improved[j] = true;
                            }
                        }
                        improved[i] = true;
                    }
                }
            }
            prune(stop_vectors(problem.costs(), k), continues)
        })
        .collect();
    let supported: Vec<bool> = members.iter().map(|m| !m.is_empty()).collect();
    let pooled = vectors
        .iter()
        .zip(&supported)
        .filter(|(_, s)| **s)
        .flat_map(|(set, _)| set.iter().filter(|a| !a.action.is_stop()).cloned())
        .collect();
    StageSet {
        stage: k,
        layout: layout.clone(),
        vectors,
        supported,
        fallback: prune(stop_vectors(problem.costs(), k), pooled),
    }
}

/// Single backward sweep `K'-1 .. 0`; the final stage holds Stop vectors only.
pub fn solve(problem: &StoppingProblem, bank: &BeliefBank, config: &SolverConfig) -> Result<StagePolicy, PolicyError> {
    problem.validate()?;
    let horizon = problem.horizon();
    if bank.stages() != horizon + 1 {
        return Err(PolicyError::Problem(format!(
            "bank covers {} stages, horizon needs {}",
            bank.stages(),
            horizon + 1
        )));
    }
    let layouts = context_layouts(problem, config.max_contexts);
    let mut stages = Vec::with_capacity(horizon + 1);
    stages.push(StageSet::stop_only(problem.costs(), horizon, layouts[horizon].clone()));
    for k in (0..horizon).rev() {
        let next = stages.last().expect("stage k+1 exists");
        let mut stage_bank = bank.stage(k).to_vec();
        if stage_bank.is_empty() {
            stage_bank.push(BankPoint {
                belief: problem.priors().clone(),
                history: vec![None; k],
            });
        }
        let set = backup_stage(problem, k, &layouts[k], next, &stage_bank, config.mode);
        stages.push(set);
    }
    stages.reverse();
    StagePolicy::new(problem.classes(), stages)
}
