//! Datasets, CSV ingestion and labeled/unlabeled partitioning.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from;

/// Name of the extra CSV column carrying partition tags.
pub const PARTITION_COLUMN: &str = "__partition";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
    Unlabel,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Test => "test",
            Partition::Unlabel => "unlabel",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Partition::Train),
            "test" => Ok(Partition::Test),
            "unlabel" => Ok(Partition::Unlabel),
            other => Err(Error::invalid(format!("unknown partition tag `{other}`"))),
        }
    }
}

/// Role of a CSV column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnRole {
    /// Numeric feature.
    Feature,
    /// Categorical feature, integer-encoded by first appearance.
    Categorical,
    /// Ground-truth column (may be empty on unlabeled rows).
    Truth,
    Ignore,
}

/// Column-role map used by [`load_csv`]. Columns not listed take `default`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    #[serde(default)]
    pub columns: BTreeMap<String, ColumnRole>,
    #[serde(default = "default_role")]
    pub default: ColumnRole,
}

fn default_role() -> ColumnRole {
    ColumnRole::Ignore
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            columns: BTreeMap::new(),
            default: ColumnRole::Ignore,
        }
    }
}

impl Schema {
    /// Every column is a numeric feature except `truth`.
    pub fn with_truth(truth: &str) -> Self {
        let mut columns = BTreeMap::new();
        columns.insert(truth.to_string(), ColumnRole::Truth);
        Schema {
            columns,
            default: ColumnRole::Feature,
        }
    }

    pub fn set(mut self, column: &str, role: ColumnRole) -> Self {
        self.columns.insert(column.to_string(), role);
        self
    }

    fn role(&self, column: &str) -> ColumnRole {
        self.columns.get(column).copied().unwrap_or(self.default)
    }
}

/// Feature matrix with optional ground truth and partition tags.
///
/// Immutable once built; `split` returns a re-tagged copy.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    n: usize,
    p: usize,
    /// Row-major n×p.
    features: Vec<f64>,
    truth: Vec<Option<f64>>,
    partition: Vec<Partition>,
    feature_names: Vec<String>,
    truth_name: Option<String>,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        p: usize,
        truth: Vec<Option<f64>>,
        partition: Vec<Partition>,
        feature_names: Vec<String>,
        truth_name: Option<String>,
    ) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("dataset needs at least one feature"));
        }
        if features.is_empty() {
            return Err(Error::ZeroRows);
        }
        if features.len() % p != 0 {
            return Err(Error::invalid("feature buffer is not a multiple of p"));
        }
        let n = features.len() / p;
        if truth.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: truth.len(),
            });
        }
        if partition.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: partition.len(),
            });
        }
        if feature_names.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: feature_names.len(),
            });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite feature value at row {}, column {}",
                i / p,
                i % p
            )));
        }
        for (row, (t, part)) in truth.iter().zip(&partition).enumerate() {
            match t {
                Some(v) if !v.is_finite() => {
                    return Err(Error::invalid(format!("non-finite truth at row {row}")))
                }
                None if *part != Partition::Unlabel => return Err(Error::MissingTruth(row)),
                _ => {}
            }
        }
        Ok(Dataset {
            n,
            p,
            features,
            truth,
            partition,
            feature_names,
            truth_name,
        })
    }

    /// Dataset whose rows all carry truth and start out tagged `unlabel`.
    pub fn from_parts(features: Vec<f64>, p: usize, truth: Vec<f64>) -> Result<Self> {
        let n = truth.len();
        let names = (0..p).map(|j| format!("f{j}")).collect();
        Dataset::new(
            features,
            p,
            truth.into_iter().map(Some).collect(),
            vec![Partition::Unlabel; n],
            names,
            Some("truth".to_string()),
        )
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_features(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.p..(i + 1) * self.p]
    }

    pub fn feature(&self, i: usize, j: usize) -> f64 {
        self.features[i * self.p + j]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn truth(&self, i: usize) -> Option<f64> {
        self.truth[i]
    }

    pub fn truth_column(&self) -> &[Option<f64>] {
        &self.truth
    }

    pub fn partition(&self, i: usize) -> Partition {
        self.partition[i]
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partition
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn truth_name(&self) -> Option<&str> {
        self.truth_name.as_deref()
    }

    /// Row indices tagged with `part`, in ascending order.
    pub fn rows_in(&self, part: Partition) -> Vec<usize> {
        (0..self.n).filter(|&i| self.partition[i] == part).collect()
    }

    /// Truth values for `rows`; errors if any is missing.
    pub fn truth_for(&self, rows: &[usize]) -> Result<Vec<f64>> {
        rows.iter()
            .map(|&i| self.truth[i].ok_or(Error::MissingTruth(i)))
            .collect()
    }

    pub fn with_partition(&self, partition: Vec<Partition>) -> Result<Self> {
        Dataset::new(
            self.features.clone(),
            self.p,
            self.truth.clone(),
            partition,
            self.feature_names.clone(),
            self.truth_name.clone(),
        )
    }

    /// New dataset made of `rows` (duplicates allowed), keeping their tags.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(rows.len() * self.p);
        for &i in rows {
            features.extend_from_slice(self.row(i));
        }
        Dataset::new(
            features,
            self.p,
            rows.iter().map(|&i| self.truth[i]).collect(),
            rows.iter().map(|&i| self.partition[i]).collect(),
            self.feature_names.clone(),
            self.truth_name.clone(),
        )
    }

    /// Writes features, truth and the partition tag column.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        if let Some(t) = &self.truth_name {
            header.push(t);
        }
        header.push(PARTITION_COLUMN);
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n {
            record.clear();
            record.extend(self.row(i).iter().map(|v| v.to_string()));
            if self.truth_name.is_some() {
                record.push(self.truth[i].map(|v| v.to_string()).unwrap_or_default());
            }
            record.push(self.partition[i].to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Loads a comma-separated file with a mandatory header row.
///
/// A `__partition` column, when present, restores partition tags; otherwise
/// every row starts as `unlabel`.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();

    for name in schema.columns.keys() {
        if !header.iter().any(|h| h == name) {
            return Err(Error::MissingColumn(name.clone()));
        }
    }

    let mut feature_cols = Vec::new();
    let mut categorical = Vec::new();
    let mut truth_col = None;
    let mut partition_col = None;
    for (c, name) in header.iter().enumerate() {
        if name == PARTITION_COLUMN {
            partition_col = Some(c);
            continue;
        }
        match schema.role(name) {
            ColumnRole::Feature => {
                feature_cols.push(c);
                categorical.push(false);
            }
            ColumnRole::Categorical => {
                feature_cols.push(c);
                categorical.push(true);
            }
            ColumnRole::Truth => {
                if truth_col.replace(c).is_some() {
                    return Err(Error::invalid("more than one truth column"));
                }
            }
            ColumnRole::Ignore => {}
        }
    }
    if feature_cols.is_empty() {
        return Err(Error::invalid("schema selects no feature columns"));
    }

    let p = feature_cols.len();
    let mut codes: Vec<HashMap<String, f64>> = vec![HashMap::new(); p];
    let mut features = Vec::new();
    let mut truth = Vec::new();
    let mut partition = Vec::new();

    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        for (j, &c) in feature_cols.iter().enumerate() {
            let cell = record.get(c).unwrap_or("");
            let value = if categorical[j] {
                if cell.is_empty() {
                    return Err(non_numeric(&header[c], row, cell));
                }
                let next = codes[j].len() as f64;
                *codes[j].entry(cell.to_string()).or_insert(next)
            } else {
                parse_number(cell).ok_or_else(|| non_numeric(&header[c], row, cell))?
            };
            features.push(value);
        }
        let t = match truth_col {
            Some(c) => {
                let cell = record.get(c).unwrap_or("");
                if cell.is_empty() {
                    None
                } else {
                    Some(parse_number(cell).ok_or_else(|| non_numeric(&header[c], row, cell))?)
                }
            }
            None => None,
        };
        truth.push(t);
        partition.push(match partition_col {
            Some(c) => record.get(c).unwrap_or("").parse()?,
            None => Partition::Unlabel,
        });
    }
    if truth.is_empty() {
        return Err(Error::ZeroRows);
    }

    Dataset::new(
        features,
        p,
        truth,
        partition,
        feature_cols.iter().map(|&c| header[c].clone()).collect(),
        truth_col.map(|c| header[c].clone()),
    )
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn non_numeric(column: &str, row: usize, value: &str) -> Error {
    Error::NonNumeric {
        column: column.to_string(),
        row,
        value: value.to_string(),
    }
}

/// Uniformly random disjoint assignment of `n_train` train and `n_test` test
/// rows; all other rows become `unlabel`.
pub fn split(d: &Dataset, n_train: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    let n = d.n_rows();
    if n_train + n_test > n {
        return Err(Error::InsufficientRows {
            needed: n_train + n_test,
            available: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed));
    let mut tags = vec![Partition::Unlabel; n];
    for (k, &i) in order.iter().take(n_train + n_test).enumerate() {
        if d.truth(i).is_none() {
            return Err(Error::MissingTruth(i));
        }
        tags[i] = if k < n_train {
            Partition::Train
        } else {
            Partition::Test
        };
    }
    d.with_partition(tags)
}

/// Regression sample: outcome, covariate of interest and controls.
///
/// `controls` always starts with an all-ones intercept column.
#[derive(Clone, Debug)]
pub struct EconSample {
    pub y: DVector<f64>,
    pub x: DVector<f64>,
    pub controls: DMatrix<f64>,
    pub row_ids: Vec<usize>,
}

impl EconSample {
    pub fn new(
        y: DVector<f64>,
        x: DVector<f64>,
        controls: DMatrix<f64>,
        row_ids: Vec<usize>,
    ) -> Result<Self> {
        let m = y.len();
        if x.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: x.len(),
            });
        }
        if controls.nrows() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: controls.nrows(),
            });
        }
        if row_ids.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: row_ids.len(),
            });
        }
        if controls.ncols() == 0 || controls.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::invalid(
                "first control column must be an all-ones intercept",
            ));
        }
        Ok(EconSample {
            y,
            x,
            controls,
            row_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Number of coefficients in `y ~ [1, x, controls...]`.
    pub fn n_coef(&self) -> usize {
        self.controls.ncols() + 1
    }

    /// Design matrix `[1, x, other controls]`.
    pub fn design(&self) -> DMatrix<f64> {
        design_with(&self.x, &self.controls)
    }

    /// Same sample with `x` replaced.
    pub fn with_x(&self, x: DVector<f64>) -> Result<Self> {
        EconSample::new(self.y.clone(), x, self.controls.clone(), self.row_ids.clone())
    }

    /// Sub-sample at positions `idx` (positions, not row ids).
    pub fn subset(&self, idx: &[usize]) -> Self {
        EconSample {
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            x: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.x[i])),
            controls: self.controls.select_rows(idx),
            row_ids: idx.iter().map(|&i| self.row_ids[i]).collect(),
        }
    }

    /// Positions whose row id satisfies `keep`.
    pub fn positions_where(&self, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&k| keep(self.row_ids[k])).collect()
    }
}

/// Outcome and controls for every row of a [`Dataset`], from which
/// regression samples are cut with a chosen covariate.
#[derive(Clone, Debug)]
pub struct EconData {
    pub y: DVector<f64>,
    /// Includes the leading intercept column.
    pub controls: DMatrix<f64>,
}

impl EconData {
    pub fn new(y: DVector<f64>, controls: DMatrix<f64>) -> Result<Self> {
        if controls.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: y.len(),
                got: controls.nrows(),
            });
        }
        if controls.ncols() == 0 || controls.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::invalid(
                "first control column must be an all-ones intercept",
            ));
        }
        if y.iter().chain(controls.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite value in outcome or controls"));
        }
        Ok(EconData { y, controls })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_coef(&self) -> usize {
        self.controls.ncols() + 1
    }

    /// Sample over `rows` with covariate values `x` (aligned with `rows`).
    pub fn sample(&self, rows: &[usize], x: DVector<f64>) -> Result<EconSample> {
        EconSample::new(
            DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
            x,
            self.controls.select_rows(rows),
            rows.to_vec(),
        )
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        EconData {
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
            controls: self.controls.select_rows(rows),
        }
    }
}

/// `[intercept, x, remaining controls]`, the coefficient order used throughout.
pub fn design_with(x: &DVector<f64>, controls: &DMatrix<f64>) -> DMatrix<f64> {
    let m = x.len();
    let k = controls.ncols();
    DMatrix::from_fn(m, k + 1, |i, j| match j {
        0 => controls[(i, 0)],
        1 => x[i],
        _ => controls[(i, j - 1)],
    })
}
