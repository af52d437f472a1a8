use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, HarnessError, PhaseTimes, QSpec, TrainConfig};
use crate::dataset::{kfold_split, DatasetError, LabeledDataset};
use crate::runtime::{Decision, PolicyModel};
use crate::structure::StructureKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub bins: usize,
    pub cost_e: f64,
    pub q: QSpec,
    pub beta: usize,
    pub structure: StructureKind,
    pub seed: u64,
    pub missing_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_test: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub avg_features: f64,
    pub horizon: usize,
    pub kept_features: usize,
    pub times: PhaseTimes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_test: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub avg_features: f64,
    pub times: PhaseTimes,
    pub total_s: f64,
    pub folds: Vec<FoldReport>,
    pub config: Option<ConfigEcho>,
}

/// Brings a test set onto the model's schema and label vocabulary.
pub fn conform(model: &PolicyModel, test: &LabeledDataset) -> Result<LabeledDataset, HarnessError> {
    let test = if test.n_features() < model.n_features() {
        test.widen(model.n_features())?
    } else if test.n_features() > model.n_features() {
        return Err(DatasetError::Schema(format!(
            "model expects {} features, data has {}",
            model.n_features(),
            test.n_features()
        ))
        .into());
    } else {
        test.clone()
    };
    Ok(test.align_labels(&model.class_labels)?)
}

/// Classifies every instance, in parallel, preserving input order.
pub fn decide_all(model: &PolicyModel, test: &LabeledDataset) -> Result<Vec<Decision>, HarnessError> {
    let test = conform(model, test)?;
    let out: Result<Vec<Decision>, _> = (0..test.n_instances())
        .into_par_iter()
        .map(|i| model.classify_row(test.row(i)))
        .collect();
    Ok(out?)
}

fn summarize(labels: &[usize], decisions: &[Decision]) -> (usize, f64, f64) {
    let n = decisions.len();
    let correct = decisions.iter().zip(labels).filter(|(d, &y)| d.class == y).count();
    let used: usize = decisions.iter().map(|d| d.features_used).sum();
    let accuracy = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
    let avg = if n == 0 { 0.0 } else { used as f64 / n as f64 };
    (correct, accuracy, avg)
}

/// Runs the model over a labeled test set.
pub fn evaluate(model: &PolicyModel, test: &LabeledDataset) -> Result<EvalReport, HarnessError> {
    let aligned = conform(model, test)?;
    let t = Instant::now();
    let decisions = decide_all(model, &aligned)?;
    let inference_s = t.elapsed().as_secs_f64();
    let (correct, accuracy, avg_features) = summarize(aligned.labels(), &decisions);
    let times = PhaseTimes {
        inference_s,
        ..PhaseTimes::default()
    };
    Ok(EvalReport {
        n_test: decisions.len(),
        correct,
        accuracy,
        avg_features,
        times,
        total_s: times.total(),
        folds: Vec::new(),
        config: None,
    })
}

/// Blanks `round(pct% * K)` seeded-random feature values of every instance.
pub fn remove_features(ds: &LabeledDataset, pct: f64, seed: u64) -> Result<LabeledDataset, HarnessError> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(HarnessError::Config(format!("missing percentage {pct} outside [0, 100]")));
    }
    let k = ds.n_features();
    let m = ((pct / 100.0) * k as f64).round() as usize;
    if m == 0 {
        return Ok(ds.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Vec::with_capacity(ds.n_instances() * m);
    for i in 0..ds.n_instances() {
        mask.extend(sample(&mut rng, k, m).into_iter().map(|f| (i, f)));
    }
    Ok(ds.with_missing(mask))
}

/// Seeded k-fold cross-validation; `missing_pct` of each test instance's
/// values are blanked before inference.
pub fn cross_validate(
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    folds: usize,
    missing_pct: f64,
) -> Result<EvalReport, HarnessError> {
    let splits = kfold_split(ds.n_instances(), folds, cfg.seed)?;
    let mut reports = Vec::with_capacity(folds);
    for (fold, split) in splits.iter().enumerate() {
        reports.push(run_fold(ds, cfg, fold, &split.train, &split.test, missing_pct)?);
    }
    Ok(aggregate(reports, cfg, missing_pct))
}

pub(crate) fn run_fold(
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    fold: usize,
    train_idx: &[usize],
    test_idx: &[usize],
    missing_pct: f64,
) -> Result<FoldReport, HarnessError> {
    let train_set = ds.subset(train_idx);
    let trained = train(&train_set, cfg)?;
    let mask_seed = cfg.seed ^ (0xA5A5_0000 + fold as u64);
    let test_set = remove_features(&ds.subset(test_idx), missing_pct, mask_seed)?;
    let t = Instant::now();
    let decisions = decide_all(&trained.model, &test_set)?;
    let inference_s = t.elapsed().as_secs_f64();
    let labels = conform(&trained.model, &test_set)?.labels().to_vec();
    let (correct, accuracy, avg_features) = summarize(&labels, &decisions);
    Ok(FoldReport {
        fold,
        n_test: decisions.len(),
        correct,
        accuracy,
        avg_features,
        horizon: trained.model.horizon(),
        kept_features: trained.filter.kept.len(),
        times: PhaseTimes {
            inference_s,
            ..trained.times
        },
    })
}

fn aggregate(folds: Vec<FoldReport>, cfg: &TrainConfig, missing_pct: f64) -> EvalReport {
    let n_test: usize = folds.iter().map(|f| f.n_test).sum();
    let correct: usize = folds.iter().map(|f| f.correct).sum();
    let used: f64 = folds.iter().map(|f| f.avg_features * f.n_test as f64).sum();
    let times = PhaseTimes {
        preprocess_s: folds.iter().map(|f| f.times.preprocess_s).sum(),
        train_s: folds.iter().map(|f| f.times.train_s).sum(),
        inference_s: folds.iter().map(|f| f.times.inference_s).sum(),
    };
    EvalReport {
        n_test,
        correct,
        accuracy: if n_test == 0 { 0.0 } else { correct as f64 / n_test as f64 },
        avg_features: if n_test == 0 { 0.0 } else { used / n_test as f64 },
        times,
        total_s: times.total(),
        folds,
        config: Some(ConfigEcho {
            bins: cfg.bins,
            cost_e: cfg.base_cost_e(),
            q: cfg.q.clone(),
            beta: cfg.beta,
            structure: cfg.structure,
            seed: cfg.seed,
            missing_pct,
        }),
    }
}
