//! Regression datasets: CSV ingestion, train/test splitting with
//! train-only standardization, and synthetic computer-experiment data.

mod synth;

pub use synth::{synth_generate, SyntheticFunction};

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}: malformed CSV record: {message}")]
    MalformedRow { row: usize, message: String },
    #[error("row {row}, column {column}: '{value}' is not a number")]
    NonNumeric { row: usize, column: usize, value: String },
    #[error("row {row}: expected {expected} columns, found {found}")]
    ColumnCount { row: usize, expected: usize, found: usize },
    #[error("expected {expected} rows, found {found}")]
    RowCount { expected: usize, found: usize },
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("{0} rows are too few to split")]
    TooFewRows(usize),
    #[error("dataset '{0}' has not been split")]
    NotSplit(String),
    #[error("dataset '{name}' is not listed in manifest {manifest}")]
    UnknownDataset { name: String, manifest: PathBuf },
    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("target column {index} out of range ({available} targets)")]
    TargetIndex { index: usize, available: usize },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Column layout of a numeric CSV file: features first, then targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub n_features: usize,
    pub n_targets: usize,
    #[serde(default)]
    pub has_header: bool,
    /// Checked against the parsed row count when set.
    #[serde(default)]
    pub n_rows: Option<usize>,
}

/// Per-column affine statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    /// Population mean and standard deviation of the selected rows.
    /// Constant columns get a unit standard deviation.
    pub fn of_rows(m: &Tensor, rows: &[usize]) -> Self {
        let cols = m.last_dim();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; cols];
        for &r in rows {
            for (acc, v) in mean.iter_mut().zip(m.row(r)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; cols];
        for &r in rows {
            for ((acc, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    fn standardize(&self, m: &Tensor, rows: &[usize]) -> Tensor {
        let cols = m.last_dim();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend(
                m.row(r)
                    .iter()
                    .zip(&self.mean)
                    .zip(&self.std)
                    .map(|((v, mu), s)| (v - mu) / s),
            );
        }
        Tensor::new(vec![rows.len(), cols], data).expect("sized")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub features: ColumnStats,
    pub targets: ColumnStats,
}

/// Features and unnormalized targets, optionally with a train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    x: Tensor,
    y: Tensor,
    split: Option<Split>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: Tensor, y: Tensor) -> Self {
        assert_eq!(x.rank(), 2, "features must be a matrix");
        assert_eq!(y.rank(), 2, "targets must be a matrix");
        assert_eq!(x.shape()[0], y.shape()[0], "row counts differ");
        Self {
            name: name.into(),
            x,
            y,
            split: None,
        }
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn n_targets(&self) -> usize {
        self.y.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.x
    }

    pub fn targets(&self) -> &Tensor {
        &self.y
    }

    pub fn split_info(&self) -> Option<&Split> {
        self.split.as_ref()
    }

    fn require_split(&self) -> Result<&Split> {
        self.split
            .as_ref()
            .ok_or_else(|| DataError::NotSplit(self.name.clone()))
    }

    /// Keeps only the listed target columns, in the given order.
    pub fn select_targets(&self, columns: &[usize]) -> Result<Self> {
        let t = self.n_targets();
        if let Some(&bad) = columns.iter().find(|&&c| c >= t) {
            return Err(DataError::TargetIndex {
                index: bad,
                available: t,
            });
        }
        let data = (0..self.len())
            .flat_map(|r| columns.iter().map(move |&c| self.y.get2(r, c)))
            .collect();
        let y = Tensor::new(vec![self.len(), columns.len()], data).expect("sized");
        Ok(Self::new(self.name.clone(), self.x.clone(), y))
    }

    /// Random disjoint train/test partition with standardization statistics
    /// computed from the training rows only.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(DataError::InvalidFraction(train_fraction));
        }
        let n = self.len();
        if n < 2 {
            return Err(DataError::TooFewRows(n));
        }
        let n_train = ((n as f64) * train_fraction).round().clamp(1.0, (n - 1) as f64) as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test = idx.split_off(n_train);
        let train = idx;
        let features = ColumnStats::of_rows(&self.x, &train);
        let targets = ColumnStats::of_rows(&self.y, &train);
        Ok(Self {
            split: Some(Split {
                train,
                test,
                features,
                targets,
            }),
            ..self.clone()
        })
    }

    pub fn train_x(&self) -> Result<Tensor> {
        let s = self.require_split()?;
        Ok(s.features.standardize(&self.x, &s.train))
    }

    pub fn test_x(&self) -> Result<Tensor> {
        let s = self.require_split()?;
        Ok(s.features.standardize(&self.x, &s.test))
    }

    pub fn train_y(&self) -> Result<Tensor> {
        let s = self.require_split()?;
        Ok(gather_rows(&self.y, &s.train))
    }

    pub fn test_y(&self) -> Result<Tensor> {
        let s = self.require_split()?;
        Ok(gather_rows(&self.y, &s.test))
    }

    /// Training-split target mean and standard deviation.
    pub fn target_stats(&self) -> Result<&ColumnStats> {
        Ok(&self.require_split()?.targets)
    }
}

pub fn gather_rows(m: &Tensor, rows: &[usize]) -> Tensor {
    let cols = m.last_dim();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(m.row(r));
    }
    Tensor::new(vec![rows.len(), cols], data).expect("sized")
}

/// Parses a numeric CSV whose last `n_targets` columns are targets.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(file, name, schema)
}

pub fn read_csv(reader: impl std::io::Read, name: String, schema: &CsvSchema) -> Result<Dataset> {
    let width = schema.n_features + schema.n_targets;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rows = 0;
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DataError::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != width {
            return Err(DataError::ColumnCount {
                row,
                expected: width,
                found: record.len(),
            });
        }
        for (column, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| DataError::NonNumeric {
                row,
                column: column + 1,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonNumeric {
                    row,
                    column: column + 1,
                    value: cell.to_string(),
                });
            }
            if column < schema.n_features {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
        rows += 1;
    }
    if let Some(expected) = schema.n_rows {
        if expected != rows {
            return Err(DataError::RowCount { expected, found: rows });
        }
    }
    let x = Tensor::new(vec![rows, schema.n_features], xs).expect("sized");
    let y = Tensor::new(vec![rows, schema.n_targets], ys).expect("sized");
    Ok(Dataset::new(name, x, y))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub n_rows: usize,
    pub n_features: usize,
    pub n_targets: usize,
    #[serde(default)]
    pub header: bool,
}

/// Dataset name → CSV fixture description.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub datasets: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, root))
    }

    /// Loads `name` from the manifest at `manifest_path`, validating its shape.
    pub fn load_dataset(manifest_path: impl AsRef<Path>, name: &str) -> Result<Dataset> {
        let manifest_path = manifest_path.as_ref();
        let (manifest, root) = Self::load(manifest_path)?;
        let entry = manifest.datasets.get(name).ok_or_else(|| DataError::UnknownDataset {
            name: name.to_string(),
            manifest: manifest_path.to_path_buf(),
        })?;
        let schema = CsvSchema {
            n_features: entry.n_features,
            n_targets: entry.n_targets,
            has_header: entry.header,
            n_rows: Some(entry.n_rows),
        };
        let mut ds = load_csv(root.join(&entry.path), &schema)?;
        ds.name = name.to_string();
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "1.0,2.0,3.5\n-4.25,5.0,6.0\n7.0,8.125,-9.0\n";

    fn schema(rows: Option<usize>) -> CsvSchema {
        CsvSchema {
            n_features: 2,
            n_targets: 1,
            has_header: false,
            n_rows: rows,
        }
    }

    #[test]
    fn toy_csv_round_trips() {
        let ds = read_csv(TOY.as_bytes(), "toy".into(), &schema(Some(3))).unwrap();
        assert_eq!(ds.features().data(), &[1.0, 2.0, -4.25, 5.0, 7.0, 8.125]);
        assert_eq!(ds.targets().data(), &[3.5, 6.0, -9.0]);
        let with_header = format!("a,b,y\n{TOY}");
        let s = CsvSchema {
            has_header: true,
            ..schema(Some(3))
        };
        let ds2 = read_csv(with_header.as_bytes(), "toy".into(), &s).unwrap();
        assert_eq!(ds2.features(), ds.features());
    }

    #[test]
    fn csv_errors_name_the_row() {
        let bad = "1,2,3\n4,5\n";
        match read_csv(bad.as_bytes(), "t".into(), &schema(None)) {
            Err(e @ DataError::ColumnCount { row: 2, .. }) => assert!(e.to_string().contains("row 2")),
            other => panic!("{other:?}"),
        }
        let nan = "1,2,3\n4,x,6\n";
        assert!(matches!(
            read_csv(nan.as_bytes(), "t".into(), &schema(None)),
            Err(DataError::NonNumeric { row: 2, column: 2, .. })
        ));
        assert!(matches!(
            read_csv(TOY.as_bytes(), "t".into(), &schema(Some(4))),
            Err(DataError::RowCount { expected: 4, found: 3 })
        ));
    }

    fn ramp(n: usize) -> Dataset {
        let x = Tensor::new(vec![n, 2], (0..2 * n).map(|i| (i * i % 17) as f64).collect()).unwrap();
        let y = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64 * 3.0).collect()).unwrap();
        Dataset::new("ramp", x, y)
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = ramp(10).split(0.9, 1).unwrap();
        let s = ds.split_info().unwrap();
        assert_eq!((s.train.len(), s.test.len()), (9, 1));
        let ds = ramp(50).split(0.8, 3).unwrap();
        let s = ds.split_info().unwrap();
        let mut all: Vec<_> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert!(matches!(ramp(10).split(1.0, 0), Err(DataError::InvalidFraction(_))));
        assert!(matches!(ramp(10).split(0.0, 0), Err(DataError::InvalidFraction(_))));
    }

    #[test]
    fn split_is_seeded() {
        let a = ramp(40).split(0.9, 7).unwrap();
        let b = ramp(40).split(0.9, 7).unwrap();
        let c = ramp(40).split(0.9, 8).unwrap();
        assert_eq!(a.split_info(), b.split_info());
        assert_ne!(a.split_info().unwrap().train, c.split_info().unwrap().train);
    }

    #[test]
    fn standardization_uses_train_rows_only() {
        let ds = ramp(60).split(0.8, 5).unwrap();
        let tx = ds.train_x().unwrap();
        let rows: Vec<usize> = (0..tx.shape()[0]).collect();
        let st = ColumnStats::of_rows(&tx, &rows);
        for (m, s) in st.mean.iter().zip(&st.std) {
            assert!(m.abs() < 1e-10);
            assert!((s - 1.0).abs() < 1e-10);
        }
        let split = ds.split_info().unwrap();
        let from_test = ColumnStats::of_rows(ds.features(), &split.test);
        assert_ne!(from_test, split.features);
        // Targets stay on their original scale.
        let ty = ds.test_y().unwrap();
        for (k, &r) in split.test.iter().enumerate() {
            assert_eq!(ty.data()[k], r as f64 * 3.0);
        }
    }

    #[test]
    fn unsplit_access_is_an_error() {
        assert!(matches!(ramp(5).train_x(), Err(DataError::NotSplit(_))));
    }

    #[test]
    fn target_selection() {
        let x = Tensor::zeros(vec![2, 1]);
        let y = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let ds = Dataset::new("two", x, y);
        assert_eq!(ds.select_targets(&[1]).unwrap().targets().data(), &[2.0, 4.0]);
        assert!(ds.select_targets(&[2]).is_err());
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("toy.csv"), TOY).unwrap();
        let manifest = r#"{"toy": {"path": "toy.csv", "n_rows": 3, "n_features": 2, "n_targets": 1}}"#;
        let mpath = dir.path().join("manifest.json");
        std::fs::write(&mpath, manifest).unwrap();
        let ds = Manifest::load_dataset(&mpath, "toy").unwrap();
        assert_eq!((ds.len(), ds.n_features(), ds.name.as_str()), (3, 2, "toy"));
        assert!(matches!(
            Manifest::load_dataset(&mpath, "nope"),
            Err(DataError::UnknownDataset { .. })
        ));
    }
}
