//! Dependency graphs over (features, class), the Markov-blanket acquisition
//! order, smoothed conditional probability tables and per-stage likelihood
//! tables.
//!
//! The class is an implicit parent of every feature. Each feature keeps one
//! *primary* feature-parent (its only parent in a tree); CPTs condition on the
//! primary parent and the class only, so the primary-parent edges form a
//! forest and every stage table can be obtained by chaining CPTs along a
//! forest path, conditioned on the class.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::Belief;
use crate::dataset::QuantizedDataset;
use crate::infotheory::cmi_counts;

#[derive(Debug, Error, PartialEq)]
pub enum StructureError {
    #[error("no features to build a structure over")]
    NoFeatures,
    #[error("feature {0} is not part of the dataset")]
    UnknownFeature(usize),
    #[error("node {0} is not part of the structure")]
    UnknownNode(Node),
    #[error("class {0} has no training instances")]
    EmptyClass(usize),
    #[error("ordering does not match the structure: {0}")]
    OrderingMismatch(String),
    #[error("invalid marginal table: {0}")]
    InvalidTable(String),
}

/// Shape of the feature-feature dependencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    Tree,
    Line,
    Random,
    Clique,
}

impl StructureKind {
    pub const ALL: [StructureKind; 4] = [
        StructureKind::Tree,
        StructureKind::Line,
        StructureKind::Random,
        StructureKind::Clique,
    ];
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StructureKind::Tree => "tree",
            StructureKind::Line => "line",
            StructureKind::Random => "random",
            StructureKind::Clique => "clique",
        })
    }
}

impl std::str::FromStr for StructureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tree" => Ok(StructureKind::Tree),
            "line" => Ok(StructureKind::Line),
            "random" => Ok(StructureKind::Random),
            "clique" => Ok(StructureKind::Clique),
            other => Err(format!("unknown structure `{other}` (tree, line, random, clique)")),
        }
    }
}

/// A node of the dependency graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Node {
    Class,
    Feature(usize),
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Class => f.write_str("class"),
            Node::Feature(id) => write!(f, "feature {id}"),
        }
    }
}

/// Directed acyclic graph over the kept features plus the class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyStructure {
    kind: StructureKind,
    seed: u64,
    features: Vec<usize>,
    parents: Vec<Vec<usize>>,
    primary_parent: Vec<Option<usize>>,
    #[serde(skip)]
    index: HashMap<usize, usize>,
}

impl DependencyStructure {
    /// Assembles a structure from feature ids and local parent lists.
    /// `primary` must pick one of each node's parents.
    pub fn from_parts(
        kind: StructureKind,
        seed: u64,
        features: Vec<usize>,
        parents: Vec<Vec<usize>>,
        primary_parent: Vec<Option<usize>>,
    ) -> Result<Self, StructureError> {
        if features.is_empty() {
            return Err(StructureError::NoFeatures);
        }
        let m = features.len();
        if parents.len() != m || primary_parent.len() != m {
            return Err(StructureError::OrderingMismatch("parent lists do not match nodes".into()));
        }
        for (i, ps) in parents.iter().enumerate() {
            if ps.iter().any(|&p| p >= m || p == i) {
                return Err(StructureError::OrderingMismatch(format!("bad parent of node {i}")));
            }
            match primary_parent[i] {
                Some(p) if !ps.contains(&p) => {
                    return Err(StructureError::OrderingMismatch(format!("primary parent of node {i}")))
                }
                None if !ps.is_empty() => {
                    return Err(StructureError::OrderingMismatch(format!("node {i} lacks a primary parent")))
                }
                _ => {}
            }
        }
        let mut s = Self {
            kind,
            seed,
            features,
            parents,
            primary_parent,
            index: HashMap::new(),
        };
        s.rebuild_index();
        if !s.is_acyclic() {
            return Err(StructureError::OrderingMismatch("graph has a cycle".into()));
        }
        Ok(s)
    }

    /// Restores the id lookup after deserialization.
    pub(crate) fn rebuild_index(&mut self) {
        self.index = self.features.iter().enumerate().map(|(i, &f)| (f, i)).collect();
    }

    pub fn kind(&self) -> StructureKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Feature ids in construction order.
    pub fn features(&self) -> &[usize] {
        &self.features
    }

    pub fn contains(&self, feature: usize) -> bool {
        self.index.contains_key(&feature)
    }

    fn local(&self, feature: usize) -> Option<usize> {
        self.index.get(&feature).copied()
    }

    /// Feature-parents of a feature (the class is always an extra parent).
    pub fn feature_parents(&self, feature: usize) -> Option<Vec<usize>> {
        let i = self.local(feature)?;
        Some(self.parents[i].iter().map(|&p| self.features[p]).collect())
    }

    /// The parent a feature's CPT conditions on, besides the class.
    pub fn primary_parent(&self, feature: usize) -> Option<usize> {
        let i = self.local(feature)?;
        self.primary_parent[i].map(|p| self.features[p])
    }

    /// All directed edges, class edges included.
    pub fn edges(&self) -> Vec<(Node, Node)> {
        let mut out: Vec<(Node, Node)> = self
            .features
            .iter()
            .map(|&f| (Node::Class, Node::Feature(f)))
            .collect();
        for (i, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                out.push((Node::Feature(self.features[p]), Node::Feature(self.features[i])));
            }
        }
        out
    }

    fn is_acyclic(&self) -> bool {
        // 0 = unvisited, 1 = on stack, 2 = done
        fn visit(i: usize, parents: &[Vec<usize>], state: &mut [u8]) -> bool {
            match state[i] {
                1 => return false,
                2 => return true,
                _ => {}
            }
            state[i] = 1;
            for &p in &parents[i] {
                if !visit(p, parents, state) {
                    return false;
                }
            }
            state[i] = 2;
            true
        }
        let mut state = vec![0u8; self.features.len()];
        (0..self.features.len()).all(|i| visit(i, &self.parents, &mut state))
    }

    /// Parents, children and co-parents of children.
    pub fn markov_blanket(&self, node: Node) -> Result<BTreeSet<Node>, StructureError> {
        let mut out = BTreeSet::new();
        match node {
            Node::Class => {
                out.extend(self.features.iter().map(|&f| Node::Feature(f)));
            }
            Node::Feature(f) => {
                let i = self.local(f).ok_or(StructureError::UnknownNode(node))?;
                out.insert(Node::Class);
                out.extend(self.parents[i].iter().map(|&p| Node::Feature(self.features[p])));
                for (c, ps) in self.parents.iter().enumerate() {
                    if ps.contains(&i) {
                        out.insert(Node::Feature(self.features[c]));
                        out.extend(ps.iter().filter(|&&p| p != i).map(|&p| Node::Feature(self.features[p])));
                    }
                }
            }
        }
        out.remove(&node);
        Ok(out)
    }
}

/// Builds the dependency graph over `ranked` (kept features, AMI-descending).
///
/// - `Tree`: maximum spanning tree under `I(F_a; F_b | C)`, rooted at
///   `ranked[0]`, edges directed away from the root.
/// - `Line`: the path `ranked[0] -> ranked[1] -> ...`.
/// - `Clique`: every earlier ranked feature is a parent of every later one.
/// - `Random`: a seeded random topological order with each forward edge
///   present with probability 1/2.
pub fn build_structure(
    qds: &QuantizedDataset,
    ranked: &[usize],
    kind: StructureKind,
    seed: u64,
) -> Result<DependencyStructure, StructureError> {
    if ranked.is_empty() {
        return Err(StructureError::NoFeatures);
    }
    if let Some(&bad) = ranked.iter().find(|&&f| f >= qds.n_features()) {
        return Err(StructureError::UnknownFeature(bad));
    }
    let m = ranked.len();
    let (features, parents, primary): (Vec<usize>, Vec<Vec<usize>>, Vec<Option<usize>>) = match kind {
        StructureKind::Line => {
            let parents = (0..m).map(|i| if i == 0 { vec![] } else { vec![i - 1] }).collect();
            let primary = (0..m).map(|i| i.checked_sub(1)).collect();
            (ranked.to_vec(), parents, primary)
        }
        StructureKind::Clique => {
            let parents = (0..m).map(|i| (0..i).collect()).collect();
            let primary = (0..m).map(|i| i.checked_sub(1)).collect();
            (ranked.to_vec(), parents, primary)
        }
        StructureKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut order = ranked.to_vec();
            order.shuffle(&mut rng);
            let mut parents = vec![Vec::new(); m];
            for (j, ps) in parents.iter_mut().enumerate() {
                for i in 0..j {
                    if rng.gen_bool(0.5) {
                        ps.push(i);
                    }
                }
            }
            let primary = parents.iter().map(|ps| ps.last().copied()).collect();
            (order, parents, primary)
        }
        StructureKind::Tree => {
            let weights = cmi_matrix(qds, ranked);
            let tree_parent = max_spanning_tree(&weights, ranked);
            let parents = tree_parent.iter().map(|p| p.iter().copied().collect()).collect();
            (ranked.to_vec(), parents, tree_parent)
        }
    };
    DependencyStructure::from_parts(kind, seed, features, parents, primary)
}

/// Pairwise class-conditional mutual information among the given features.
pub fn cmi_matrix(qds: &QuantizedDataset, features: &[usize]) -> Vec<Vec<f64>> {
    let m = features.len();
    let labels = qds.labels();
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let (fa, fb) = (features[a], features[b]);
            cmi_counts(
                qds.column(fa),
                qds.column(fb),
                labels,
                qds.bins(fa),
                qds.bins(fb),
                qds.n_classes(),
            )
        })
        .collect();
    let mut w = vec![vec![0.0; m]; m];
    for (&(a, b), &v) in pairs.iter().zip(&values) {
        w[a][b] = v;
        w[b][a] = v;
    }
    w
}

/// Prim's algorithm from node 0; returns each node's parent. Ties prefer the
/// smaller feature id, first for the joining node and then for its parent.
fn max_spanning_tree(weights: &[Vec<f64>], ids: &[usize]) -> Vec<Option<usize>> {
    let m = weights.len();
    let mut parent = vec![None; m];
    let mut in_tree = vec![false; m];
    let mut best: Vec<(f64, usize)> = (0..m).map(|j| (weights[0][j], 0)).collect();
    in_tree[0] = true;
    for _ in 1..m {
        let mut pick: Option<usize> = None;
        for j in (0..m).filter(|&j| !in_tree[j]) {
            pick = match pick {
                None => Some(j),
                Some(p) if best[j].0 > best[p].0 || (best[j].0 == best[p].0 && ids[j] < ids[p]) => Some(j),
                keep => keep,
            };
        }
        let j = pick.expect("a node remains");
        in_tree[j] = true;
        parent[j] = Some(best[j].1);
        for x in (0..m).filter(|&x| !in_tree[x]) {
            let w = weights[j][x];
            if w > best[x].0 || (w == best[x].0 && ids[j] < ids[best[x].1]) {
                best[x] = (w, j);
            }
        }
    }
    parent
}

/// Acquisition order with the nearest earlier ancestor of each position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureOrdering {
    features: Vec<usize>,
    ancestors: Vec<Option<usize>>,
}

impl FeatureOrdering {
    pub fn new(features: Vec<usize>, ancestors: Vec<Option<usize>>) -> Result<Self, StructureError> {
        if features.len() != ancestors.len() {
            return Err(StructureError::OrderingMismatch("one ancestor slot per position".into()));
        }
        for (k, a) in ancestors.iter().enumerate() {
            if matches!(a, Some(p) if *p >= k) {
                return Err(StructureError::OrderingMismatch(format!("ancestor of position {k} is not earlier")));
            }
        }
        let unique: BTreeSet<&usize> = features.iter().collect();
        if unique.len() != features.len() {
            return Err(StructureError::OrderingMismatch("repeated feature".into()));
        }
        Ok(Self { features, ancestors })
    }

    pub fn empty() -> Self {
        Self {
            features: Vec::new(),
            ancestors: Vec::new(),
        }
    }

    /// Horizon `K'`.
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[usize] {
        &self.features
    }

    pub fn feature(&self, position: usize) -> usize {
        self.features[position]
    }

    pub fn ancestors(&self) -> &[Option<usize>] {
        &self.ancestors
    }

    /// Position of the ancestor of the feature at `position`.
    pub fn ancestor(&self, position: usize) -> Option<usize> {
        self.ancestors[position]
    }
}

/// Greedy Markov-blanket ordering.
///
/// The first feature is the highest-scoring one; each later feature is the
/// highest-scoring feature outside the union of the Markov blankets of those
/// already chosen. The order ends when no candidate remains.
pub fn derive_ordering(g: &DependencyStructure, scores: &[f64]) -> Result<FeatureOrdering, StructureError> {
    let score = |f: usize| scores.get(f).copied().ok_or(StructureError::UnknownFeature(f));
    let mut excluded: BTreeSet<usize> = BTreeSet::new();
    let mut chosen: Vec<usize> = Vec::new();
    loop {
        let mut best: Option<(usize, f64)> = None;
        for &f in g.features() {
            if excluded.contains(&f) {
                continue;
            }
            let s = score(f)?;
            best = match best {
                Some((bf, bs)) if bs > s || (bs == s && bf < f) => Some((bf, bs)),
                _ => Some((f, s)),
            };
        }
        let Some((f, _)) = best else { break };
        chosen.push(f);
        excluded.insert(f);
        for node in g.markov_blanket(Node::Feature(f))? {
            if let Node::Feature(x) = node {
                excluded.insert(x);
            }
        }
    }
    let position: HashMap<usize, usize> = chosen.iter().enumerate().map(|(k, &f)| (f, k)).collect();
    let ancestors = chosen
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            let mut cur = g.primary_parent(f);
            while let Some(p) = cur {
                if let Some(&pos) = position.get(&p) {
                    if pos < k {
                        return Some(pos);
                    }
                }
                cur = g.primary_parent(p);
            }
            None
        })
        .collect();
    FeatureOrdering::new(chosen, ancestors)
}

/// Smoothed CPT of one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCpt {
    pub feature: usize,
    pub bins: usize,
    /// Primary parent id and its bin count.
    pub parent: Option<(usize, usize)>,
    /// `P(F = v | parent = u, C = c)` at `[(u * L + c) * bins + v]`, or
    /// `P(F = v | C = c)` at `[c * bins + v]` without a parent.
    pub table: Vec<f64>,
}

impl FeatureCpt {
    pub fn prob(&self, v: usize, parent_bin: Option<usize>, class: usize, classes: usize) -> f64 {
        let u = parent_bin.unwrap_or(0);
        self.table[(u * classes + class) * self.bins + v]
    }
}

/// Class priors and per-feature smoothed conditionals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cpts {
    pub classes: usize,
    pub priors: Belief,
    pub features: Vec<FeatureCpt>,
}

impl Cpts {
    pub fn get(&self, feature: usize) -> Option<&FeatureCpt> {
        self.features.iter().find(|c| c.feature == feature)
    }
}

/// Laplace-smoothed estimates `(N_{a,b,i} + 1) / (N_{b,i} + V)` and empirical
/// class priors.
pub fn estimate_cpts(qds: &QuantizedDataset, g: &DependencyStructure) -> Result<Cpts, StructureError> {
    let l = qds.n_classes();
    let labels = qds.labels();
    let mut class_counts = vec![0usize; l];
    labels.iter().for_each(|&c| class_counts[c] += 1);
    if let Some(empty) = class_counts.iter().position(|&n| n == 0) {
        return Err(StructureError::EmptyClass(empty));
    }
    let n = labels.len() as f64;
    let priors = Belief::new(class_counts.iter().map(|&c| c as f64 / n).collect())
        .expect("empirical frequencies are a distribution");

    let features = g
        .features()
        .iter()
        .map(|&f| {
            if f >= qds.n_features() {
                return Err(StructureError::UnknownFeature(f));
            }
            let v = qds.bins(f);
            let col = qds.column(f);
            match g.primary_parent(f) {
                None => {
                    let mut counts = vec![0usize; l * v];
                    for (i, &b) in col.iter().enumerate() {
                        counts[labels[i] * v + b as usize] += 1;
                    }
                    let table = (0..l * v)
                        .map(|idx| (counts[idx] + 1) as f64 / (class_counts[idx / v] + v) as f64)
                        .collect();
                    Ok(FeatureCpt {
                        feature: f,
                        bins: v,
                        parent: None,
                        table,
                    })
                }
                Some(p) => {
                    let pv = qds.bins(p);
                    let pcol = qds.column(p);
                    let mut joint = vec![0usize; pv * l * v];
                    let mut cond = vec![0usize; pv * l];
                    for i in 0..labels.len() {
                        let ctx = pcol[i] as usize * l + labels[i];
                        joint[ctx * v + col[i] as usize] += 1;
                        cond[ctx] += 1;
                    }
                    let table = (0..pv * l * v)
                        .map(|idx| (joint[idx] + 1) as f64 / (cond[idx / v] + v) as f64)
                        .collect();
                    Ok(FeatureCpt {
                        feature: f,
                        bins: v,
                        parent: Some((p, pv)),
                        table,
                    })
                }
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Cpts {
        classes: l,
        priors,
        features,
    })
}

/// Per-stage likelihood table `P(F_k = v | F_a(k) = u, C = c)`, plus the
/// class-only table `P(F_k = v | C = c)` used when the ancestor is unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTable {
    stage: usize,
    feature: usize,
    classes: usize,
    bins: usize,
    ancestor: Option<usize>,
    ancestor_bins: usize,
    /// `[(u * bins + v) * classes + c]`
    conditional: Option<Vec<f64>>,
    /// `[v * classes + c]`
    class_only: Vec<f64>,
}

/// Slice-sum tolerance for stage tables.
pub const TABLE_TOL: f64 = 1e-9;

impl MarginalTable {
    /// Validates and wraps raw tables. `stage` is the 0-based position of the
    /// feature in the ordering.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        stage: usize,
        feature: usize,
        classes: usize,
        bins: usize,
        ancestor: Option<(usize, usize)>,
        conditional: Option<Vec<f64>>,
        class_only: Vec<f64>,
    ) -> Result<Self, StructureError> {
        let bad = |m: String| Err(StructureError::InvalidTable(m));
        if classes < 2 || bins < 1 {
            return bad("need at least 2 classes and 1 bin".into());
        }
        if class_only.len() != bins * classes {
            return bad(format!("class-only table has {} entries", class_only.len()));
        }
        check_slices(&class_only, 1, bins, classes)?;
        let ancestor_bins = ancestor.map_or(0, |(_, b)| b);
        match (&ancestor, &conditional) {
            (Some((pos, ab)), Some(t)) => {
                if *pos >= stage {
                    return bad(format!("ancestor position {pos} is not before stage {stage}"));
                }
                if t.len() != ab * bins * classes {
                    return bad(format!("conditional table has {} entries", t.len()));
                }
                check_slices(t, *ab, bins, classes)?;
            }
            (None, None) => {}
            _ => return bad("ancestor and conditional table must come together".into()),
        }
        Ok(Self {
            stage,
            feature,
            classes,
            bins,
            ancestor: ancestor.map(|(p, _)| p),
            ancestor_bins,
            conditional,
            class_only,
        })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn feature(&self) -> usize {
        self.feature
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn ancestor(&self) -> Option<usize> {
        self.ancestor
    }

    pub fn ancestor_bins(&self) -> usize {
        self.ancestor_bins
    }

    /// Class likelihoods of observing bin `v`, given the ancestor's bin when
    /// known. Falls back to the class-only table when `ancestor_bin` is
    /// `None` or the stage has no ancestor.
    pub fn likelihood(&self, v: usize, ancestor_bin: Option<usize>) -> &[f64] {
        let l = self.classes;
        match (&self.conditional, ancestor_bin) {
            (Some(t), Some(u)) => &t[(u * self.bins + v) * l..(u * self.bins + v + 1) * l],
            _ => &self.class_only[v * l..(v + 1) * l],
        }
    }

    pub fn class_only(&self) -> &[f64] {
        &self.class_only
    }

    pub fn conditional(&self) -> Option<&[f64]> {
        self.conditional.as_deref()
    }
}

fn check_slices(t: &[f64], contexts: usize, bins: usize, classes: usize) -> Result<(), StructureError> {
    for u in 0..contexts {
        for c in 0..classes {
            let mut sum = 0.0;
            for v in 0..bins {
                let p = t[(u * bins + v) * classes + c];
                if !(p > 0.0 && p.is_finite()) {
                    return Err(StructureError::InvalidTable(format!("non-positive entry {p}")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > TABLE_TOL {
                return Err(StructureError::InvalidTable(format!(
                    "slice (context {u}, class {c}) sums to {sum}"
                )));
            }
        }
    }
    Ok(())
}

/// Matrix `M[u][v]` per class: `P(F_to = v | F_from = u, C = c)` along the
/// primary-parent chain. Layout `[(c * from_bins + u) * to_bins + v]`.
fn chain_matrix(cpts: &Cpts, chain: &[usize]) -> (usize, Vec<f64>) {
    let l = cpts.classes;
    let from = cpts.get(chain[0]).expect("chain nodes have cpts");
    let from_bins = from.bins;
    let mut bins = from_bins;
    let mut m = vec![0.0; l * from_bins * from_bins];
    for c in 0..l {
        for u in 0..from_bins {
            m[(c * from_bins + u) * from_bins + u] = 1.0;
        }
    }
    for &node in &chain[1..] {
        let cpt = cpts.get(node).expect("chain nodes have cpts");
        let nb = cpt.bins;
        let mut next = vec![0.0; l * from_bins * nb];
        for c in 0..l {
            for u in 0..from_bins {
                for x in 0..bins {
                    let w = m[(c * from_bins + u) * bins + x];
                    if w == 0.0 {
                        continue;
                    }
                    for y in 0..nb {
                        next[(c * from_bins + u) * nb + y] += w * cpt.prob(y, Some(x), c, l);
                    }
                }
            }
        }
        m = next;
        bins = nb;
    }
    (from_bins, m)
}

/// `P(F = v | C = c)` for every feature, summing out primary ancestors.
fn class_marginals(cpts: &Cpts, g: &DependencyStructure) -> HashMap<usize, Vec<f64>> {
    fn marginal(
        f: usize,
        cpts: &Cpts,
        g: &DependencyStructure,
        memo: &mut HashMap<usize, Vec<f64>>,
    ) -> Vec<f64> {
        if let Some(m) = memo.get(&f) {
            return m.clone();
        }
        let l = cpts.classes;
        let cpt = cpts.get(f).expect("every structure feature has a cpt");
        let v = cpt.bins;
        // layout [c * v + x]
        let out = match g.primary_parent(f) {
            None => cpt.table.clone(),
            Some(p) => {
                let pm = marginal(p, cpts, g, memo);
                let pv = pm.len() / l;
                let mut out = vec![0.0; l * v];
                for c in 0..l {
                    for u in 0..pv {
                        let w = pm[c * pv + u];
                        for x in 0..v {
                            out[c * v + x] += w * cpt.prob(x, Some(u), c, l);
                        }
                    }
                }
                out
            }
        };
        memo.insert(f, out.clone());
        out
    }
    let mut memo = HashMap::new();
    for &f in g.features() {
        marginal(f, cpts, g, &mut memo);
    }
    memo
}

fn renormalize(t: &mut [f64], contexts: usize, bins: usize, classes: usize) {
    for u in 0..contexts {
        for c in 0..classes {
            let sum: f64 = (0..bins).map(|v| t[(u * bins + v) * classes + c]).sum();
            for v in 0..bins {
                t[(u * bins + v) * classes + c] /= sum;
            }
        }
    }
}

/// Stage tables for an ordering derived from `g`: class-conditioned exact
/// inference along primary-parent paths.
pub fn compute_marginal_tables(
    cpts: &Cpts,
    g: &DependencyStructure,
    ord: &FeatureOrdering,
) -> Result<Vec<MarginalTable>, StructureError> {
    let l = cpts.classes;
    let marginals = class_marginals(cpts, g);
    let mut out = Vec::with_capacity(ord.len());
    for k in 0..ord.len() {
        let f = ord.feature(k);
        if !g.contains(f) {
            return Err(StructureError::OrderingMismatch(format!("feature {f} not in structure")));
        }
        let bins = cpts.get(f).ok_or(StructureError::UnknownFeature(f))?.bins;
        let cm = &marginals[&f];
        let mut class_only = vec![0.0; bins * l];
        for c in 0..l {
            for v in 0..bins {
                class_only[v * l + c] = cm[c * bins + v];
            }
        }
        renormalize(&mut class_only, 1, bins, l);

        let (ancestor, conditional) = match ord.ancestor(k) {
            None => (None, None),
            Some(pos) => {
                let a = ord.feature(pos);
                let mut chain = vec![f];
                let mut cur = f;
                while cur != a {
                    cur = g.primary_parent(cur).ok_or_else(|| {
                        StructureError::OrderingMismatch(format!("feature {a} is not an ancestor of {f}"))
                    })?;
                    chain.push(cur);
                }
                chain.reverse();
                let (ab, m) = chain_matrix(cpts, &chain);
                let mut t = vec![0.0; ab * bins * l];
                for u in 0..ab {
                    for v in 0..bins {
                        for c in 0..l {
                            t[(u * bins + v) * l + c] = m[(c * ab + u) * bins + v];
                        }
                    }
                }
                renormalize(&mut t, ab, bins, l);
                (Some((pos, ab)), Some(t))
            }
        };
        out.push(MarginalTable::new(k, f, l, bins, ancestor, conditional, class_only)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Bin, QuantizedDataset};
    use rand::Rng;

    fn qds_from(cols: Vec<Vec<Bin>>, labels: Vec<usize>, bins: usize) -> QuantizedDataset {
        let n = cols.len();
        QuantizedDataset::from_columns(cols, vec![bins; n], labels, 2).unwrap()
    }

    fn dummy(features: usize) -> QuantizedDataset {
        let cols = (0..features).map(|f| (0..8).map(|i| ((i + f) % 2) as Bin).collect()).collect();
        qds_from(cols, (0..8).map(|i| i % 2).collect(), 2)
    }

    fn set(nodes: &[Node]) -> BTreeSet<Node> {
        nodes.iter().copied().collect()
    }

    #[test]
    fn single_feature_structure() {
        for kind in StructureKind::ALL {
            let g = build_structure(&dummy(1), &[0], kind, 1).unwrap();
            assert_eq!(g.edges(), vec![(Node::Class, Node::Feature(0))]);
            let ord = derive_ordering(&g, &[0.5]).unwrap();
            assert_eq!(ord.features(), [0]);
            assert_eq!(ord.ancestor(0), None);
        }
    }

    #[test]
    fn line_structure_and_ordering() {
        // A = 0, B = 1, C = 2; AMI order (B, A, C)
        let g = build_structure(&dummy(3), &[1, 0, 2], StructureKind::Line, 0).unwrap();
        let mut edges = g.edges();
        edges.sort();
        assert_eq!(
            edges,
            vec![
                (Node::Class, Node::Feature(0)),
                (Node::Class, Node::Feature(1)),
                (Node::Class, Node::Feature(2)),
                (Node::Feature(0), Node::Feature(2)),
                (Node::Feature(1), Node::Feature(0)),
            ]
        );
        let scores = [0.5, 0.9, 0.1];
        let ord = derive_ordering(&g, &scores).unwrap();
        assert_eq!(ord.features(), [1, 2]);
        assert_eq!(ord.ancestors(), [None, Some(0)]);
    }

    #[test]
    fn clique_ordering_has_length_one() {
        let g = build_structure(&dummy(5), &[3, 1, 4, 0, 2], StructureKind::Clique, 0).unwrap();
        let ord = derive_ordering(&g, &[0.1, 0.4, 0.05, 0.9, 0.2]).unwrap();
        assert_eq!(ord.features(), [3]);
        for f in 0..5 {
            let mb = g.markov_blanket(Node::Feature(f)).unwrap();
            let mut expected: BTreeSet<Node> = (0..5).filter(|&x| x != f).map(Node::Feature).collect();
            expected.insert(Node::Class);
            assert_eq!(mb, expected);
        }
    }

    #[test]
    fn class_blanket_is_all_features() {
        for kind in StructureKind::ALL {
            let g = build_structure(&dummy(4), &[0, 1, 2, 3], kind, 9).unwrap();
            assert_eq!(
                g.markov_blanket(Node::Class).unwrap(),
                (0..4).map(Node::Feature).collect::<BTreeSet<_>>()
            );
        }
    }

    #[test]
    fn unknown_node_errors() {
        let g = build_structure(&dummy(2), &[0, 1], StructureKind::Line, 0).unwrap();
        assert_eq!(
            g.markov_blanket(Node::Feature(7)),
            Err(StructureError::UnknownNode(Node::Feature(7)))
        );
    }

    #[test]
    fn tree_picks_heaviest_acyclic_edges() {
        // Within each class: B is A with 3% flips, C is B with 15% flips, so
        // CMI(A,B) > CMI(B,C) > CMI(A,C).
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 400;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let a: Vec<Bin> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let b: Vec<Bin> = a.iter().map(|&x| if rng.gen_bool(0.03) { 1 - x } else { x }).collect();
        let c: Vec<Bin> = b.iter().map(|&x| if rng.gen_bool(0.15) { 1 - x } else { x }).collect();
        let qds = qds_from(vec![a, b, c], labels, 2);
        let w = cmi_matrix(&qds, &[0, 1, 2]);
        assert!(w[0][1] > w[1][2] && w[1][2] > w[0][2]);
        // root = A (highest AMI)
        let g = build_structure(&qds, &[0, 1, 2], StructureKind::Tree, 0).unwrap();
        assert_eq!(g.feature_parents(0).unwrap(), Vec::<usize>::new());
        assert_eq!(g.feature_parents(1).unwrap(), vec![0]);
        assert_eq!(g.feature_parents(2).unwrap(), vec![1]);
        // leaf C with parent B
        assert_eq!(g.markov_blanket(Node::Feature(2)).unwrap(), set(&[Node::Class, Node::Feature(1)]));
    }

    #[test]
    fn random_structure_is_seeded_dag() {
        let a = build_structure(&dummy(8), &(0..8).collect::<Vec<_>>(), StructureKind::Random, 17).unwrap();
        let b = build_structure(&dummy(8), &(0..8).collect::<Vec<_>>(), StructureKind::Random, 17).unwrap();
        assert_eq!(a, b);
        let ord = derive_ordering(&a, &[0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]).unwrap();
        for (k, anc) in ord.ancestors().iter().enumerate() {
            assert!(anc.is_none_or(|p| p < k));
        }
    }

    #[test]
    fn ordering_ties_prefer_smaller_id() {
        let g = build_structure(&dummy(3), &[2, 1, 0], StructureKind::Tree, 0).unwrap();
        let ord = derive_ordering(&g, &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(ord.feature(0), 0);
        assert_eq!(ord, derive_ordering(&g, &[0.5, 0.5, 0.5]).unwrap());
    }

    #[test]
    fn smoothed_cpt_values() {
        // parent F1, child F0; within class 0 with F1 = 1: seven rows, three with F0 = 1
        let mut child = vec![];
        let mut parent = vec![];
        let mut labels = vec![];
        for i in 0..7 {
            child.push(if i < 3 { 1 } else { 0 });
            parent.push(1);
            labels.push(0);
        }
        for _ in 0..3 {
            child.push(0);
            parent.push(0);
            labels.push(1);
        }
        let qds = qds_from(vec![child, parent], labels, 2);
        let g = DependencyStructure::from_parts(StructureKind::Tree, 0, vec![1, 0], vec![vec![], vec![0]], vec![None, Some(0)])
            .unwrap();
        let cpts = estimate_cpts(&qds, &g).unwrap();
        let c0 = cpts.get(0).unwrap();
        assert!((c0.prob(1, Some(1), 0, 2) - 4.0 / 9.0).abs() < 1e-15);
        // unseen (parent = 1, class 1): pure smoothing 1/V
        assert!((c0.prob(1, Some(1), 1, 2) - 0.5).abs() < 1e-15);
        assert!((cpts.priors.as_slice()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn priors_from_class_counts() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 30)).collect();
        let qds = qds_from(vec![vec![0; 100]], labels, 4);
        let g = build_structure(&qds, &[0], StructureKind::Tree, 0).unwrap();
        let cpts = estimate_cpts(&qds, &g).unwrap();
        assert_eq!(cpts.priors.as_slice(), [0.3, 0.7]);
        // unseen bins with N_{b,i} = 30, V = 4 -> 1/34; seen bin 0 -> 31/34
        assert!((cpts.get(0).unwrap().prob(3, None, 0, 2) - 1.0 / 34.0).abs() < 1e-15);
    }

    #[test]
    fn empty_class_rejected() {
        let qds = QuantizedDataset::from_columns(vec![vec![0, 1]], vec![2], vec![0, 0], 3).unwrap();
        let g = build_structure(&qds, &[0], StructureKind::Tree, 0).unwrap();
        assert_eq!(estimate_cpts(&qds, &g), Err(StructureError::EmptyClass(1)));
    }

    fn random_cpts(g: &DependencyStructure, bins: usize, classes: usize, seed: u64) -> Cpts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dist = |n: usize| -> Vec<f64> {
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        };
        let features = g
            .features()
            .iter()
            .map(|&f| {
                let parent = g.primary_parent(f).map(|p| (p, bins));
                let contexts = if parent.is_some() { bins * classes } else { classes };
                let table = (0..contexts).flat_map(|_| dist(bins)).collect();
                FeatureCpt { feature: f, bins, parent, table }
            })
            .collect();
        let priors = Belief::new(dist(classes)).unwrap();
        Cpts { classes, priors, features }
    }

    #[test]
    fn direct_child_table_is_cpt() {
        let g = build_structure(&dummy(2), &[0, 1], StructureKind::Line, 0).unwrap();
        let cpts = random_cpts(&g, 3, 2, 1);
        let ord = FeatureOrdering::new(vec![0, 1], vec![None, Some(0)]).unwrap();
        let tables = compute_marginal_tables(&cpts, &g, &ord).unwrap();
        let child = cpts.get(1).unwrap();
        for u in 0..3 {
            for v in 0..3 {
                for c in 0..2 {
                    assert!((tables[1].likelihood(v, Some(u))[c] - child.prob(v, Some(u), c, 2)).abs() < 1e-15);
                }
            }
        }
        // root stage equals the root cpt
        for v in 0..3 {
            for c in 0..2 {
                assert!((tables[0].likelihood(v, None)[c] - cpts.get(0).unwrap().prob(v, None, c, 2)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_step_path_sums_intermediate() {
        // F0 -> F1 -> F2 with binary F1
        let g = build_structure(&dummy(3), &[0, 1, 2], StructureKind::Line, 0).unwrap();
        let cpts = random_cpts(&g, 2, 2, 8);
        let ord = FeatureOrdering::new(vec![0, 2], vec![None, Some(0)]).unwrap();
        let tables = compute_marginal_tables(&cpts, &g, &ord).unwrap();
        let (x, k) = (cpts.get(1).unwrap(), cpts.get(2).unwrap());
        for a in 0..2 {
            for v in 0..2 {
                for c in 0..2 {
                    let by_hand = k.prob(v, Some(0), c, 2) * x.prob(0, Some(a), c, 2)
                        + k.prob(v, Some(1), c, 2) * x.prob(1, Some(a), c, 2);
                    assert!((tables[1].likelihood(v, Some(a))[c] - by_hand).abs() < 1e-15);
                }
            }
        }
    }

    /// Full joint enumeration over a 4-node tree: r -> {a, b}, a -> d.
    #[test]
    fn tables_match_joint_enumeration() {
        let g = DependencyStructure::from_parts(
            StructureKind::Tree,
            0,
            vec![10, 11, 12, 13],
            vec![vec![], vec![0], vec![0], vec![1]],
            vec![None, Some(0), Some(0), Some(1)],
        )
        .unwrap();
        for (l, seed) in [(2usize, 3u64), (3, 4)] {
            let cpts = random_cpts(&g, 2, l, seed);
            let ord = FeatureOrdering::new(vec![11, 13, 12, 10], vec![None, Some(0), None, None]).unwrap();
            let tables = compute_marginal_tables(&cpts, &g, &ord).unwrap();
            let ids = [10usize, 11, 12, 13];
            let parent_of = [None, Some(0usize), Some(0), Some(1)];
            // joint[c][assignment]
            let joint = |c: usize, x: &[usize; 4]| -> f64 {
                (0..4)
                    .map(|i| cpts.get(ids[i]).unwrap().prob(x[i], parent_of[i].map(|p| x[p]), c, l))
                    .product()
            };
            let idx = |f: usize| ids.iter().position(|&i| i == f).unwrap();
            for c in 0..l {
                // class-only marginals
                for (k, t) in tables.iter().enumerate() {
                    let fi = idx(ord.feature(k));
                    for v in 0..2 {
                        let mut p = 0.0;
                        for m in 0..16 {
                            let x = [m & 1, (m >> 1) & 1, (m >> 2) & 1, (m >> 3) & 1];
                            if x[fi] == v {
                                p += joint(c, &x);
                            }
                        }
                        assert!((t.class_only()[v * l + c] - p).abs() < 1e-12);
                    }
                }
                // P(d | a, c)
                for u in 0..2 {
                    for v in 0..2 {
                        let (mut num, mut den) = (0.0, 0.0);
                        for m in 0..16 {
                            let x = [m & 1, (m >> 1) & 1, (m >> 2) & 1, (m >> 3) & 1];
                            if x[1] == u {
                                den += joint(c, &x);
                                if x[3] == v {
                                    num += joint(c, &x);
                                }
                            }
                        }
                        assert!((tables[1].likelihood(v, Some(u))[c] - num / den).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn table_validation() {
        assert!(MarginalTable::new(0, 0, 2, 2, None, None, vec![0.5, 0.5, 0.5, 0.5]).is_ok());
        assert!(MarginalTable::new(0, 0, 2, 2, None, None, vec![0.6, 0.5, 0.5, 0.5]).is_err());
        assert!(MarginalTable::new(0, 0, 2, 2, None, None, vec![1.0, 0.5, 0.0, 0.5]).is_err());
        assert!(MarginalTable::new(0, 0, 2, 2, Some((0, 2)), Some(vec![0.5; 8]), vec![0.5; 4]).is_err());
    }

    #[test]
    fn ordering_validation() {
        assert!(FeatureOrdering::new(vec![1, 2], vec![None, Some(1)]).is_err());
        assert!(FeatureOrdering::new(vec![1, 1], vec![None, None]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn stage_tables_are_normalized(
            seed in proptest::prelude::any::<u64>(),
            n_features in 1usize..6,
            bins in 2usize..5,
            kind_index in 0usize..4,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 60;
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let cols: Vec<Vec<Bin>> = (0..n_features)
                .map(|_| (0..n).map(|_| rng.gen_range(0..bins) as Bin).collect())
                .collect();
            let qds = QuantizedDataset::from_columns(cols, vec![bins; n_features], labels, 2).unwrap();
            let ids: Vec<usize> = (0..n_features).collect();
            let g = build_structure(&qds, &ids, StructureKind::ALL[kind_index], seed).unwrap();
            let scores: Vec<f64> = (0..n_features).map(|_| rng.gen_range(0.0..1.0)).collect();
            let ord = derive_ordering(&g, &scores).unwrap();
            let cpts = estimate_cpts(&qds, &g).unwrap();
            for t in compute_marginal_tables(&cpts, &g, &ord).unwrap() {
                let contexts: Vec<Option<usize>> = std::iter::once(None).chain((0..t.ancestor_bins()).map(Some)).collect();
                for u in contexts {
                    for c in 0..2 {
                        let sum: f64 = (0..t.bins()).map(|v| t.likelihood(v, u)[c]).sum();
                        proptest::prop_assert!((sum - 1.0).abs() <= 1e-9);
                    }
                }
            }
        }
    }
}
