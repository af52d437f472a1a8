//! Labeled datasets: loading, equal-width quantization and k-fold splitting.
//!
//! Two on-disk formats are supported:
//!
//! - dense CSV with a header row and a `label` column, every other column a
//!   numeric feature;
//! - sparse `label idx:val ...` lines with 1-based feature indices, where
//!   unmentioned entries are zero.
//!
//! Labels are remapped to contiguous class indices `0..L` (sorted numerically
//! when every label parses as a number, lexicographically otherwise) and the
//! original label strings are retained. Feature values are stored row-major;
//! `NaN` marks a missing cell (empty, `?` or `NA` in the dense format).

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bin index type of a quantized feature.
pub type Bin = u16;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: expected {expected} columns, found {found}")]
    ColumnCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("dense csv has no `label` column")]
    MissingLabelColumn,
    #[error("dataset is empty")]
    Empty,
    #[error("dataset has {0} class(es); at least 2 are required")]
    TooFewClasses(usize),
    #[error("label `{0}` is not one of the model's classes")]
    UnknownLabel(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("number of bins must be at least 2, got {0}")]
    TooFewBins(usize),
    #[error("number of bins {0} exceeds the supported maximum {max}", max = Bin::MAX)]
    TooManyBins(usize),
    #[error("missing value for feature {feature} in instance {instance}; training data must be complete")]
    MissingValue { instance: usize, feature: usize },
    #[error("fold count {folds} is out of range for {n} instances")]
    FoldRange { folds: usize, n: usize },
}

/// On-disk dataset layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    DenseCsv,
    Sparse,
}

impl std::str::FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" | "dense-csv" | "csv" => Ok(DataFormat::DenseCsv),
            "sparse" | "sparse-index-value" | "svmlight" => Ok(DataFormat::Sparse),
            other => Err(format!("unknown data format `{other}` (expected dense or sparse)")),
        }
    }
}

/// Labeled instances with real-valued features.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    n_features: usize,
    values: Vec<f64>,
    labels: Vec<usize>,
    feature_names: Vec<String>,
    class_labels: Vec<String>,
}

impl LabeledDataset {
    /// Builds a dataset from row-major values and 0-based class indices.
    pub fn new(
        feature_names: Vec<String>,
        values: Vec<f64>,
        labels: Vec<usize>,
        class_labels: Vec<String>,
    ) -> Result<Self, DatasetError> {
        let n_features = feature_names.len();
        if labels.is_empty() {
            return Err(DatasetError::Empty);
        }
        if class_labels.len() < 2 {
            return Err(DatasetError::TooFewClasses(class_labels.len()));
        }
        if values.len() != labels.len() * n_features {
            return Err(DatasetError::Schema(format!(
                "{} values for {} instances x {} features",
                values.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_labels.len()) {
            return Err(DatasetError::Schema(format!("class index {bad} out of range")));
        }
        Ok(Self {
            n_features,
            values,
            labels,
            feature_names,
            class_labels,
        })
    }

    pub fn n_instances(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, instance: usize) -> usize {
        self.labels[instance]
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Original label strings, indexed by class index.
    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn row(&self, instance: usize) -> &[f64] {
        let start = instance * self.n_features;
        &self.values[start..start + self.n_features]
    }

    pub fn value(&self, instance: usize, feature: usize) -> f64 {
        self.values[instance * self.n_features + feature]
    }

    /// Copies the given instances (in the given order) into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            n_features: self.n_features,
            values,
            labels,
            feature_names: self.feature_names.clone(),
            class_labels: self.class_labels.clone(),
        }
    }

    /// Re-expresses class indices against another label vocabulary, e.g. the
    /// one a model was trained with.
    pub fn align_labels(&self, class_labels: &[String]) -> Result<Self, DatasetError> {
        let mut mapping = Vec::with_capacity(self.class_labels.len());
        for name in &self.class_labels {
            let idx = class_labels
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| DatasetError::UnknownLabel(name.clone()))?;
            mapping.push(idx);
        }
        let mut out = self.clone();
        out.labels = self.labels.iter().map(|&l| mapping[l]).collect();
        out.class_labels = class_labels.to_vec();
        Ok(out)
    }

    /// Pads a sparse-origin dataset with zero columns up to `n_features`.
    pub fn widen(&self, n_features: usize) -> Result<Self, DatasetError> {
        if n_features < self.n_features {
            return Err(DatasetError::Schema(format!(
                "cannot narrow {} features to {}",
                self.n_features, n_features
            )));
        }
        if n_features == self.n_features {
            return Ok(self.clone());
        }
        let mut values = Vec::with_capacity(self.n_instances() * n_features);
        for i in 0..self.n_instances() {
            values.extend_from_slice(self.row(i));
            values.resize((i + 1) * n_features, 0.0);
        }
        let mut feature_names = self.feature_names.clone();
        feature_names.extend((self.n_features + 1..=n_features).map(|i| i.to_string()));
        Ok(Self {
            n_features,
            values,
            labels: self.labels.clone(),
            feature_names,
            class_labels: self.class_labels.clone(),
        })
    }

    /// Returns a copy where `values[i][f]` is replaced by `NaN` for every
    /// `(i, f)` pair yielded by `mask`.
    pub fn with_missing(&self, mask: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut out = self.clone();
        for (i, f) in mask {
            out.values[i * self.n_features + f] = f64::NAN;
        }
        out
    }
}

/// Loads a dataset from disk.
pub fn load(path: impl AsRef<Path>, format: DataFormat) -> Result<LabeledDataset, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match format {
        DataFormat::DenseCsv => parse_dense(file),
        DataFormat::Sparse => parse_sparse(BufReader::new(file)),
    }
}

fn parse_cell(cell: &str, line: usize) -> Result<f64, DatasetError> {
    let cell = cell.trim();
    if cell.is_empty() || cell == "?" || cell.eq_ignore_ascii_case("na") {
        return Ok(f64::NAN);
    }
    cell.parse::<f64>().map_err(|_| DatasetError::Parse {
        line,
        message: format!("non-numeric feature value `{cell}`"),
    })
}

/// Parses a dense CSV stream (header row, one `label` column).
pub fn parse_dense(reader: impl Read) -> Result<LabeledDataset, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| DatasetError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let label_col = header
        .iter()
        .position(|h| h == "label")
        .ok_or(DatasetError::MissingLabelColumn)?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_col)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| DatasetError::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.len() == 1 && record.get(0).is_some_and(str::is_empty) {
            continue;
        }
        if record.len() != header.len() {
            return Err(DatasetError::ColumnCount {
                line,
                expected: header.len(),
                found: record.len(),
            });
        }
        for (i, cell) in record.iter().enumerate() {
            if i == label_col {
                raw_labels.push(cell.to_string());
            } else {
                values.push(parse_cell(cell, line)?);
            }
        }
    }
    build(feature_names, values, raw_labels)
}

/// Parses the sparse `label idx:val ...` format (1-based indices).
pub fn parse_sparse(reader: impl BufRead) -> Result<LabeledDataset, DatasetError> {
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut raw_labels = Vec::new();
    let mut n_features = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| DatasetError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label = tokens.next().expect("non-empty line has a token");
        let mut entries = Vec::new();
        for tok in tokens {
            let (i, v) = tok.split_once(':').ok_or_else(|| DatasetError::Parse {
                line: lineno,
                message: format!("expected idx:val, found `{tok}`"),
            })?;
            let i: usize = i.parse().map_err(|_| DatasetError::Parse {
                line: lineno,
                message: format!("bad feature index `{i}`"),
            })?;
            if i == 0 {
                return Err(DatasetError::Parse {
                    line: lineno,
                    message: "feature indices are 1-based".into(),
                });
            }
            let v: f64 = v.parse().map_err(|_| DatasetError::Parse {
                line: lineno,
                message: format!("non-numeric feature value `{v}`"),
            })?;
            n_features = n_features.max(i);
            entries.push((i - 1, v));
        }
        raw_labels.push(label.to_string());
        rows.push(entries);
    }
    let mut values = vec![0.0; rows.len() * n_features];
    for (r, entries) in rows.iter().enumerate() {
        for &(f, v) in entries {
            values[r * n_features + f] = v;
        }
    }
    let names = (1..=n_features).map(|i| i.to_string()).collect();
    build(names, values, raw_labels)
}

fn build(
    feature_names: Vec<String>,
    values: Vec<f64>,
    raw_labels: Vec<String>,
) -> Result<LabeledDataset, DatasetError> {
    if raw_labels.is_empty() {
        return Err(DatasetError::Empty);
    }
    let class_labels = sorted_label_vocabulary(&raw_labels);
    let labels = raw_labels
        .iter()
        .map(|l| class_labels.iter().position(|c| c == l).expect("vocabulary covers labels"))
        .collect();
    LabeledDataset::new(feature_names, values, labels, class_labels)
}

fn sorted_label_vocabulary(raw: &[String]) -> Vec<String> {
    let unique: BTreeSet<&String> = raw.iter().collect();
    let mut vocab: Vec<String> = unique.into_iter().cloned().collect();
    let numeric: Option<Vec<f64>> = vocab.iter().map(|l| l.parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        let mut paired: Vec<(f64, String)> = nums.into_iter().zip(vocab).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0));
        vocab = paired.into_iter().map(|(_, s)| s).collect();
    }
    vocab
}

/// Per-feature equal-width bin boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    cuts: Vec<Vec<f64>>,
    degenerate: Vec<bool>,
}

impl Quantizer {
    /// Builds a quantizer from explicit cut points (each strictly increasing).
    pub fn from_cuts(cuts: Vec<Vec<f64>>) -> Result<Self, DatasetError> {
        for (f, c) in cuts.iter().enumerate() {
            if c.is_empty() {
                return Err(DatasetError::TooFewBins(1));
            }
            if c.windows(2).any(|w| w[0] >= w[1]) || c.iter().any(|x| !x.is_finite()) {
                return Err(DatasetError::Schema(format!(
                    "cut points of feature {f} are not strictly increasing"
                )));
            }
        }
        let degenerate = vec![false; cuts.len()];
        Ok(Self { cuts, degenerate })
    }

    pub fn n_features(&self) -> usize {
        self.cuts.len()
    }

    /// Number of bins `V` of a feature.
    pub fn bins(&self, feature: usize) -> usize {
        self.cuts[feature].len() + 1
    }

    pub fn cuts(&self, feature: usize) -> &[f64] {
        &self.cuts[feature]
    }

    pub fn is_degenerate(&self, feature: usize) -> bool {
        self.degenerate[feature]
    }

    /// Bin of a value: the number of cut points at or below it. Out-of-range
    /// values clamp to the first/last bin. Returns `None` for `NaN`.
    pub fn bin(&self, feature: usize, value: f64) -> Option<Bin> {
        if value.is_nan() {
            return None;
        }
        if self.degenerate[feature] {
            return Some(0);
        }
        Some(self.cuts[feature].partition_point(|&c| c <= value) as Bin)
    }
}

/// Fits `V`-bin equal-width quantizers over each feature's training range.
pub fn fit_quantizer(ds: &LabeledDataset, bins: usize) -> Result<Quantizer, DatasetError> {
    if bins < 2 {
        return Err(DatasetError::TooFewBins(bins));
    }
    if bins > Bin::MAX as usize {
        return Err(DatasetError::TooManyBins(bins));
    }
    let k = ds.n_features();
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    for i in 0..ds.n_instances() {
        for (f, &v) in ds.row(i).iter().enumerate() {
            if v.is_nan() {
                continue;
            }
            lo[f] = lo[f].min(v);
            hi[f] = hi[f].max(v);
        }
    }
    let mut cuts = Vec::with_capacity(k);
    let mut degenerate = Vec::with_capacity(k);
    for f in 0..k {
        if !lo[f].is_finite() || !hi[f].is_finite() || lo[f] >= hi[f] {
            let c = if lo[f].is_finite() { lo[f] } else { 0.0 };
            cuts.push(vec![c; bins - 1]);
            degenerate.push(true);
            continue;
        }
        let width = (hi[f] - lo[f]) / bins as f64;
        cuts.push((1..bins).map(|j| lo[f] + width * j as f64).collect());
        degenerate.push(false);
    }
    Ok(Quantizer { cuts, degenerate })
}

/// Labeled instances with per-feature bin indices, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedDataset {
    columns: Vec<Vec<Bin>>,
    bins: Vec<usize>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl QuantizedDataset {
    /// Builds a quantized dataset directly from bin columns.
    pub fn from_columns(
        columns: Vec<Vec<Bin>>,
        bins: Vec<usize>,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self, DatasetError> {
        if labels.is_empty() {
            return Err(DatasetError::Empty);
        }
        if n_classes < 2 {
            return Err(DatasetError::TooFewClasses(n_classes));
        }
        if columns.len() != bins.len() {
            return Err(DatasetError::Schema("one bin count per column required".into()));
        }
        for (f, col) in columns.iter().enumerate() {
            if col.len() != labels.len() {
                return Err(DatasetError::Schema(format!("column {f} has wrong length")));
            }
            if col.iter().any(|&b| b as usize >= bins[f]) {
                return Err(DatasetError::Schema(format!("column {f} has a bin >= {}", bins[f])));
            }
        }
        if labels.iter().any(|&l| l >= n_classes) {
            return Err(DatasetError::Schema("class index out of range".into()));
        }
        Ok(Self {
            columns,
            bins,
            labels,
            n_classes,
        })
    }

    pub fn n_instances(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn column(&self, feature: usize) -> &[Bin] {
        &self.columns[feature]
    }

    pub fn bins(&self, feature: usize) -> usize {
        self.bins[feature]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn bin(&self, instance: usize, feature: usize) -> Bin {
        self.columns[feature][instance]
    }
}

/// Maps every value through the quantizer. Training data must be complete.
pub fn quantize(ds: &LabeledDataset, q: &Quantizer) -> Result<QuantizedDataset, DatasetError> {
    if q.n_features() != ds.n_features() {
        return Err(DatasetError::Schema(format!(
            "quantizer has {} features, dataset has {}",
            q.n_features(),
            ds.n_features()
        )));
    }
    let n = ds.n_instances();
    let mut columns = vec![Vec::with_capacity(n); ds.n_features()];
    for i in 0..n {
        for (f, &v) in ds.row(i).iter().enumerate() {
            let b = q
                .bin(f, v)
                .ok_or(DatasetError::MissingValue { instance: i, feature: f })?;
            columns[f].push(b);
        }
    }
    let bins = (0..ds.n_features()).map(|f| q.bins(f)).collect();
    QuantizedDataset::from_columns(columns, bins, ds.labels().to_vec(), ds.n_classes())
}

/// One train/test partition of instance indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded k-fold split of `n` instances; test-set sizes differ by at most one.
pub fn kfold_split(n: usize, folds: usize, seed: u64) -> Result<Vec<Fold>, DatasetError> {
    if folds < 2 || folds > n {
        return Err(DatasetError::FoldRange { folds, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / folds;
    let extra = n % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for k in 0..folds {
        let len = base + usize::from(k < extra);
        let mut test = order[start..start + len].to_vec();
        test.sort_unstable();
        let mut train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + len..])
            .copied()
            .collect();
        train.sort_unstable();
        out.push(Fold { train, test });
        start += len;
    }
    Ok(out)
}
