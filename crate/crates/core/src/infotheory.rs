//! Plug-in information estimators over discrete (quantized) variables.
//!
//! All quantities are in nats. The adjusted mutual information follows the
//! permutation-model correction with arithmetic-mean normalization, so two
//! independent variables score near zero and a bijective coupling scores one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::QuantizedDataset;

#[derive(Debug, Error, PartialEq)]
pub enum InfoError {
    #[error("contingency table is empty")]
    EmptyTable,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Joint counts of two discrete variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    rows: usize,
    cols: usize,
    counts: Vec<u64>,
    row_sums: Vec<u64>,
    col_sums: Vec<u64>,
    total: u64,
}

impl ContingencyTable {
    /// Builds a table from row-major counts.
    pub fn from_counts(rows: usize, cols: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), rows * cols, "counts must be rows x cols");
        let mut row_sums = vec![0; rows];
        let mut col_sums = vec![0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let n = counts[r * cols + c];
                row_sums[r] += n;
                col_sums[c] += n;
            }
        }
        let total = row_sums.iter().sum();
        Self {
            rows,
            cols,
            counts,
            row_sums,
            col_sums,
            total,
        }
    }

    /// Tallies paired observations.
    pub fn from_pairs<A, B>(x: &[A], y: &[B]) -> Result<Self, InfoError>
    where
        A: Copy + Into<usize>,
        B: Copy + Into<usize>,
    {
        if x.len() != y.len() {
            return Err(InfoError::LengthMismatch(x.len(), y.len()));
        }
        let rows = x.iter().map(|&v| v.into() + 1).max().unwrap_or(0);
        let cols = y.iter().map(|&v| v.into() + 1).max().unwrap_or(0);
        let mut counts = vec![0u64; rows * cols];
        for (&a, &b) in x.iter().zip(y) {
            counts[a.into() * cols + b.into()] += 1;
        }
        Ok(Self::from_counts(rows, cols, counts))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn count(&self, r: usize, c: usize) -> u64 {
        self.counts[r * self.cols + c]
    }

    pub fn row_sums(&self) -> &[u64] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[u64] {
        &self.col_sums
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

/// Shannon entropy of a count vector.
pub fn entropy(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in mutual information with `0 log 0 = 0`.
pub fn mutual_information(t: &ContingencyTable) -> Result<f64, InfoError> {
    if t.total == 0 {
        return Err(InfoError::EmptyTable);
    }
    let n = t.total as f64;
    let mut mi = 0.0;
    for r in 0..t.rows {
        if t.row_sums[r] == 0 {
            continue;
        }
        for c in 0..t.cols {
            let nij = t.count(r, c);
            if nij == 0 {
                continue;
            }
            let nij = nij as f64;
            mi += nij / n * (nij * n / (t.row_sums[r] as f64 * t.col_sums[c] as f64)).ln();
        }
    }
    Ok(mi)
}

/// `ln(k!)` for `k = 0..=n`.
fn log_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Expected plug-in MI of two labelings with the given marginals under the
/// hypergeometric (random permutation) model.
pub fn expected_mutual_information(row_sums: &[u64], col_sums: &[u64]) -> f64 {
    let n: u64 = row_sums.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let lf = log_factorials(n as usize);
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in row_sums.iter().filter(|&&a| a > 0) {
        for &b in col_sums.iter().filter(|&&b| b > 0) {
            let start = 1.max((a + b).saturating_sub(n));
            let end = a.min(b);
            let (au, bu, nu) = (a as usize, b as usize, n as usize);
            let fixed = lf[au] + lf[bu] + lf[nu - au] + lf[nu - bu] - lf[nu];
            for nij in start..=end {
                let k = nij as usize;
                let log_p = fixed - lf[k] - lf[au - k] - lf[bu - k] - lf[nu + k - au - bu];
                let term = (nij as f64 / nf) * ((nf * nij as f64) / (a as f64 * b as f64)).ln();
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// Adjusted mutual information, arithmetic-mean normalized.
///
/// Returns 0 when either variable is constant (including the 0/0 case).
pub fn adjusted_mutual_information<A, B>(x: &[A], y: &[B]) -> Result<f64, InfoError>
where
    A: Copy + Into<usize>,
    B: Copy + Into<usize>,
{
    let table = ContingencyTable::from_pairs(x, y)?;
    if table.total == 0 {
        return Err(InfoError::EmptyTable);
    }
    Ok(ami_from_table(&table))
}

pub(crate) fn ami_from_table(table: &ContingencyTable) -> f64 {
    let hx = entropy(&table.row_sums);
    let hy = entropy(&table.col_sums);
    if hx == 0.0 || hy == 0.0 {
        return 0.0;
    }
    let mi = mutual_information(table).expect("non-empty table");
    let emi = expected_mutual_information(&table.row_sums, &table.col_sums);
    let mut denom = 0.5 * (hx + hy) - emi;
    if denom < 0.0 {
        denom = denom.min(-f64::EPSILON);
    } else {
        denom = denom.max(f64::EPSILON);
    }
    (mi - emi) / denom
}

/// `I(A; B | C) = sum_c p(c) I(A; B | C = c)` from per-class plug-in tables.
pub fn conditional_mutual_information<A, B, C>(a: &[A], b: &[B], c: &[C]) -> Result<f64, InfoError>
where
    A: Copy + Into<usize>,
    B: Copy + Into<usize>,
    C: Copy + Into<usize>,
{
    if a.len() != b.len() {
        return Err(InfoError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() != c.len() {
        return Err(InfoError::LengthMismatch(a.len(), c.len()));
    }
    if a.is_empty() {
        return Err(InfoError::EmptyTable);
    }
    let ra = a.iter().map(|&v| v.into() + 1).max().unwrap_or(0);
    let rb = b.iter().map(|&v| v.into() + 1).max().unwrap_or(0);
    let rc = c.iter().map(|&v| v.into() + 1).max().unwrap_or(0);
    Ok(cmi_counts(a, b, c, ra, rb, rc))
}

pub(crate) fn cmi_counts<A, B, C>(a: &[A], b: &[B], c: &[C], ra: usize, rb: usize, rc: usize) -> f64
where
    A: Copy + Into<usize>,
    B: Copy + Into<usize>,
    C: Copy + Into<usize>,
{
    let mut counts = vec![0u64; rc * ra * rb];
    for i in 0..a.len() {
        counts[(c[i].into() * ra + a[i].into()) * rb + b[i].into()] += 1;
    }
    let n = a.len() as f64;
    let mut total = 0.0;
    for k in 0..rc {
        let slice = counts[k * ra * rb..(k + 1) * ra * rb].to_vec();
        let t = ContingencyTable::from_counts(ra, rb, slice);
        if t.total == 0 {
            continue;
        }
        total += t.total as f64 / n * mutual_information(&t).expect("non-empty");
    }
    total
}

/// Outcome of the AMI threshold filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFilter {
    /// Kept feature ids, sorted by AMI descending (ties by smaller id).
    pub kept: Vec<usize>,
    /// AMI of every feature with the class label, indexed by feature id.
    pub scores: Vec<f64>,
    /// Threshold at which the kept set first became non-empty.
    pub eta: f64,
}

/// Thresholds below this switch to keeping every positively scored feature.
pub const ETA_FLOOR: f64 = 1.0 / (1u64 << 20) as f64;

/// Scores every feature by AMI with the label.
pub fn feature_scores(qds: &QuantizedDataset) -> Vec<f64> {
    let labels = qds.labels();
    (0..qds.n_features())
        .into_par_iter()
        .map(|f| {
            let t = ContingencyTable::from_pairs(qds.column(f), labels).expect("equal lengths");
            ami_from_table(&t)
        })
        .collect()
}

/// Keeps features with AMI >= eta, halving eta from 1 until the set is
/// non-empty.
pub fn filter_features(qds: &QuantizedDataset) -> FeatureFilter {
    filter_by_scores(feature_scores(qds))
}

/// The halving loop over precomputed scores.
pub fn filter_by_scores(scores: Vec<f64>) -> FeatureFilter {
    let mut eta = 1.0;
    let mut kept: Vec<usize>;
    loop {
        kept = (0..scores.len()).filter(|&f| scores[f] >= eta).collect();
        if !kept.is_empty() {
            break;
        }
        eta /= 2.0;
        if eta < ETA_FLOOR {
            kept = (0..scores.len()).filter(|&f| scores[f] > 0.0).collect();
            if kept.is_empty() {
                kept = (0..scores.len()).collect();
            }
            break;
        }
    }
    kept.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    FeatureFilter { kept, scores, eta }
}
