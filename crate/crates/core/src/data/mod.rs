//! Tabular churn datasets: schema, CSV ingestion, stratified splitting and
//! the synthetic generator used as ground truth throughout the test suite.

mod synth;

pub use synth::{generate_synthetic, PlantedRisk, PlantedStructure, SynthConfig};

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub kind: FeatureKind,
}

/// Raw feature space: ordered features, the label column, and identifier
/// columns that are dropped at load time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    features: Vec<Feature>,
    label_column: String,
    id_columns: Vec<String>,
}

/// On-disk layout of the schema sidecar file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SchemaSidecar {
    pub label: String,
    #[serde(default)]
    pub ids: Vec<String>,
    #[serde(default)]
    pub numeric: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
}

impl FeatureSchema {
    pub fn new(
        features: Vec<Feature>,
        label_column: impl Into<String>,
        id_columns: Vec<String>,
    ) -> Result<Self> {
        let label_column = label_column.into();
        let mut seen = HashSet::new();
        for f in &features {
            if f.name.is_empty() {
                return Err(Error::Schema("feature names must be non-empty".into()));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature `{}`", f.name)));
            }
            if f.name == label_column || id_columns.contains(&f.name) {
                return Err(Error::Schema(format!(
                    "feature `{}` is also the label or an id column",
                    f.name
                )));
            }
        }
        if label_column.is_empty() {
            return Err(Error::Schema("label column must be non-empty".into()));
        }
        if id_columns.contains(&label_column) {
            return Err(Error::Schema(format!(
                "label column `{label_column}` is listed as an id column"
            )));
        }
        Ok(Self {
            features,
            label_column,
            id_columns,
        })
    }

    /// Builds a schema from the sidecar. Numeric features come first, then
    /// categorical, each in the order listed.
    pub fn from_sidecar(sidecar: SchemaSidecar) -> Result<Self> {
        let features = sidecar
            .numeric
            .into_iter()
            .map(|name| Feature {
                name,
                kind: FeatureKind::Numeric,
            })
            .chain(sidecar.categorical.into_iter().map(|name| Feature {
                name,
                kind: FeatureKind::Categorical,
            }))
            .collect();
        Self::new(features, sidecar.label, sidecar.ids)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let sidecar: SchemaSidecar =
            serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
        Self::from_sidecar(sidecar)
    }

    pub fn to_sidecar(&self) -> SchemaSidecar {
        let names = |kind| {
            self.features
                .iter()
                .filter(|f| f.kind == kind)
                .map(|f| f.name.clone())
                .collect()
        };
        SchemaSidecar {
            label: self.label_column.clone(),
            ids: self.id_columns.clone(),
            numeric: names(FeatureKind::Numeric),
            categorical: names(FeatureKind::Categorical),
        }
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn label_column(&self) -> &str {
        &self.label_column
    }

    pub fn id_columns(&self) -> &[String] {
        &self.id_columns
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn feature(&self, name: &str) -> Option<&Feature> {
        self.features.iter().find(|f| f.name == name)
    }
}

/// A single raw cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Num(f64),
    Cat(String),
}

impl Value {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(v) => Some(*v),
            Value::Cat(_) => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            Value::Cat(s) => Some(s),
            Value::Num(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(v) => write!(f, "{v}"),
            Value::Cat(s) => f.write_str(s),
        }
    }
}

/// A row paired with the schema that names its cells.
#[derive(Debug, Clone, Copy)]
pub struct Record<'a> {
    pub schema: &'a FeatureSchema,
    pub values: &'a [Value],
}

impl<'a> Record<'a> {
    pub fn get(&self, name: &str) -> Option<&'a Value> {
        self.schema.index_of(name).map(|i| &self.values[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: FeatureSchema,
    rows: Vec<Vec<Value>>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, rows: Vec<Vec<Value>>, labels: Vec<u8>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Schema(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(Error::InvalidCell {
                    row: i,
                    message: format!("expected {} cells, found {}", schema.len(), row.len()),
                });
            }
            for (feature, cell) in schema.features().iter().zip(row) {
                match (feature.kind, cell) {
                    (FeatureKind::Numeric, Value::Num(v)) if v.is_finite() => {}
                    (FeatureKind::Categorical, Value::Cat(s)) if !s.is_empty() => {}
                    _ => {
                        return Err(Error::InvalidCell {
                            row: i,
                            message: format!("invalid value `{cell}` for `{}`", feature.name),
                        })
                    }
                }
            }
            if labels[i] > 1 {
                return Err(Error::Label {
                    row: i,
                    value: labels[i].to_string(),
                });
            }
        }
        Ok(Self {
            schema,
            rows,
            labels,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn rows(&self) -> &[Vec<Value>] {
        &self.rows
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn record(&self, i: usize) -> Record<'_> {
        Record {
            schema: &self.schema,
            values: &self.rows[i],
        }
    }

    pub fn records(&self) -> impl Iterator<Item = Record<'_>> + '_ {
        (0..self.len()).map(move |i| self.record(i))
    }

    pub fn churn_count(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Writes the dataset as CSV: id columns (if any) first, then the
    /// features in schema order, then the label. Ids are synthesized from
    /// the row index.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.schema.id_columns.iter().map(String::as_str).collect();
        header.extend(self.schema.features.iter().map(|f| f.name.as_str()));
        header.push(&self.schema.label_column);
        w.write_record(&header)?;
        for (i, (row, label)) in self.rows.iter().zip(&self.labels).enumerate() {
            let mut record: Vec<String> = self
                .schema
                .id_columns
                .iter()
                .map(|_| format!("C{:06}", i + 1))
                .collect();
            record.extend(row.iter().map(Value::to_string));
            record.push(label.to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loads a CSV file, dropping the schema's id columns.
pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &FeatureSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    for id in &schema.id_columns {
        position(id)?;
    }
    let feature_cols = schema
        .features
        .iter()
        .map(|f| position(&f.name))
        .collect::<Result<Vec<_>>>()?;
    let label_col = position(&schema.label_column)?;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(feature_cols.len());
        for (feature, &col) in schema.features.iter().zip(&feature_cols) {
            let raw = record.get(col).unwrap_or("").trim();
            let value = match feature.kind {
                FeatureKind::Numeric => {
                    let v: f64 = raw.parse().map_err(|_| Error::NumericParse {
                        row: row_idx,
                        column: feature.name.clone(),
                        value: raw.to_string(),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::NumericParse {
                            row: row_idx,
                            column: feature.name.clone(),
                            value: raw.to_string(),
                        });
                    }
                    Value::Num(v)
                }
                FeatureKind::Categorical => {
                    if raw.is_empty() {
                        return Err(Error::InvalidCell {
                            row: row_idx,
                            message: format!("empty category in `{}`", feature.name),
                        });
                    }
                    Value::Cat(raw.to_string())
                }
            };
            row.push(value);
        }
        let raw_label = record.get(label_col).unwrap_or("").trim();
        let label = match raw_label {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Label {
                    row: row_idx,
                    value: other.to_string(),
                })
            }
        };
        rows.push(row);
        labels.push(label);
    }
    Dataset::new(schema.clone(), rows, labels)
}

/// Stratified split returning sorted (train, test) row indices. Each label's
/// test count is `round(count * test_fraction)`.
pub fn split_indices(
    ds: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Split(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in [0u8, 1] {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == label).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Split(format!(
            "split of {} rows at fraction {test_fraction} leaves an empty side",
            ds.len()
        )));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds, test_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}
