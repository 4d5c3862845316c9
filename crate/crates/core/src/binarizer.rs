//! Encodes raw features as a binary matrix of atomic propositions and their
//! negations.
//!
//! Numeric features get quantile thresholds `t` and the complementary pair
//! `(f <= t, f > t)`; categorical features get one `(f == c, f != c)` pair per
//! category seen at fit time. Pairs are always adjacent in the column layout,
//! so column `j ^ 1` is the complement of column `j`.

use std::fmt;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureKind, FeatureSchema, Record, Value};
use crate::error::{Error, Result};
use crate::ARTIFACT_VERSION;

pub const DEFAULT_N_QUANTILES: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

impl Comparator {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Eq => "==",
            Comparator::Ne => "!=",
        }
    }

    pub fn negate(self) -> Self {
        match self {
            Comparator::Le => Comparator::Gt,
            Comparator::Gt => Comparator::Le,
            Comparator::Eq => Comparator::Ne,
            Comparator::Ne => Comparator::Eq,
        }
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, Comparator::Le | Comparator::Gt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threshold {
    Num(f64),
    Cat(String),
}

/// A single condition `feature <op> threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicPredicate {
    pub feature: String,
    #[serde(rename = "op")]
    pub comparator: Comparator,
    pub threshold: Threshold,
}

impl AtomicPredicate {
    pub fn numeric(feature: impl Into<String>, comparator: Comparator, threshold: f64) -> Self {
        assert!(comparator.is_numeric());
        Self {
            feature: feature.into(),
            comparator,
            threshold: Threshold::Num(threshold),
        }
    }

    pub fn categorical(
        feature: impl Into<String>,
        comparator: Comparator,
        category: impl Into<String>,
    ) -> Self {
        assert!(!comparator.is_numeric());
        Self {
            feature: feature.into(),
            comparator,
            threshold: Threshold::Cat(category.into()),
        }
    }

    pub fn negate(&self) -> Self {
        Self {
            feature: self.feature.clone(),
            comparator: self.comparator.negate(),
            threshold: self.threshold.clone(),
        }
    }

    /// Truth value on a single cell; `None` when the cell kind does not
    /// match the comparator.
    pub fn test(&self, value: &Value) -> Option<bool> {
        match (self.comparator, &self.threshold, value) {
            (Comparator::Le, Threshold::Num(t), Value::Num(v)) => Some(*v <= *t),
            (Comparator::Gt, Threshold::Num(t), Value::Num(v)) => Some(*v > *t),
            (Comparator::Eq, Threshold::Cat(c), Value::Cat(v)) => Some(v == c),
            (Comparator::Ne, Threshold::Cat(c), Value::Cat(v)) => Some(v != c),
            _ => None,
        }
    }

    pub fn evaluate(&self, record: &Record<'_>) -> Result<bool> {
        let value = record
            .get(&self.feature)
            .ok_or_else(|| Error::RuleBinding(format!("unknown feature `{}`", self.feature)))?;
        self.test(value).ok_or_else(|| {
            Error::RuleBinding(format!(
                "`{self}` cannot be applied to value `{value}` of `{}`",
                self.feature
            ))
        })
    }
}

impl fmt::Display for AtomicPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} ", self.feature, self.comparator.symbol())?;
        match &self.threshold {
            Threshold::Num(t) => write!(f, "{t}"),
            Threshold::Cat(c) => write!(f, "{c:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Thresholds(Vec<f64>),
    Categories(Vec<String>),
}

impl Encoding {
    fn kind(&self) -> FeatureKind {
        match self {
            Encoding::Thresholds(_) => FeatureKind::Numeric,
            Encoding::Categories(_) => FeatureKind::Categorical,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinarizerModel {
    encodings: IndexMap<String, Encoding>,
    layout: Vec<AtomicPredicate>,
}

#[derive(Serialize, Deserialize)]
struct BinarizerArtifact {
    version: u32,
    kind: String,
    features: IndexMap<String, Encoding>,
    column_layout: Vec<AtomicPredicate>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BinarizerModel {
    /// Builds a model from explicit per-feature encodings (feature order is
    /// preserved). Thresholds and categories are sorted and deduplicated.
    pub fn from_encodings(encodings: impl IntoIterator<Item = (String, Encoding)>) -> Self {
        let encodings: IndexMap<String, Encoding> = encodings
            .into_iter()
            .map(|(name, enc)| {
                let enc = match enc {
                    Encoding::Thresholds(mut t) => {
                        t.sort_by(f64::total_cmp);
                        t.dedup();
                        Encoding::Thresholds(t)
                    }
                    Encoding::Categories(mut c) => {
                        c.sort();
                        c.dedup();
                        Encoding::Categories(c)
                    }
                };
                (name, enc)
            })
            .collect();
        let mut layout = Vec::new();
        for (name, enc) in &encodings {
            match enc {
                Encoding::Thresholds(ts) => {
                    for &t in ts {
                        layout.push(AtomicPredicate::numeric(name, Comparator::Le, t));
                        layout.push(AtomicPredicate::numeric(name, Comparator::Gt, t));
                    }
                }
                Encoding::Categories(cs) => {
                    for c in cs {
                        layout.push(AtomicPredicate::categorical(name, Comparator::Eq, c));
                        layout.push(AtomicPredicate::categorical(name, Comparator::Ne, c));
                    }
                }
            }
        }
        Self { encodings, layout }
    }

    pub fn fit(ds: &Dataset, n_quantiles: usize) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Empty("cannot fit a binarizer on an empty dataset".into()));
        }
        if n_quantiles == 0 {
            return Err(Error::Config("n_quantiles must be at least 1".into()));
        }
        let mut encodings = Vec::with_capacity(ds.schema().len());
        for (j, feature) in ds.schema().features().iter().enumerate() {
            let enc = match feature.kind {
                FeatureKind::Numeric => {
                    let mut vals: Vec<f64> =
                        ds.rows().iter().filter_map(|r| r[j].as_num()).collect();
                    vals.sort_by(f64::total_cmp);
                    let max = *vals.last().expect("non-empty dataset");
                    let thresholds = (1..=n_quantiles)
                        .map(|k| quantile_sorted(&vals, k as f64 / (n_quantiles + 1) as f64))
                        // a threshold at the maximum gives an empty `>` column
                        .filter(|&t| t < max)
                        .collect();
                    Encoding::Thresholds(thresholds)
                }
                FeatureKind::Categorical => {
                    let mut cats: Vec<String> = ds
                        .rows()
                        .iter()
                        .filter_map(|r| r[j].as_cat().map(str::to_string))
                        .collect();
                    cats.sort();
                    cats.dedup();
                    if cats.len() < 2 {
                        cats.clear();
                    }
                    Encoding::Categories(cats)
                }
            };
            encodings.push((feature.name.clone(), enc));
        }
        Ok(Self::from_encodings(encodings))
    }

    pub fn encodings(&self) -> &IndexMap<String, Encoding> {
        &self.encodings
    }

    pub fn columns(&self) -> &[AtomicPredicate] {
        &self.layout
    }

    pub fn n_columns(&self) -> usize {
        self.layout.len()
    }

    /// Column index of an exact predicate, if present in the layout.
    pub fn column_of(&self, predicate: &AtomicPredicate) -> Option<usize> {
        self.layout.iter().position(|p| p == predicate)
    }

    /// Maps each fitted feature to its index in `schema`, checking kinds.
    fn bind(&self, schema: &FeatureSchema) -> Result<Vec<usize>> {
        self.encodings
            .iter()
            .map(|(name, enc)| match schema.index_of(name) {
                Some(i) if schema.features()[i].kind == enc.kind() => Ok(i),
                _ => Err(Error::FeatureMismatch(name.clone())),
            })
            .collect()
    }

    fn encode_row(&self, positions: &[usize], values: &[Value], out: &mut [bool]) {
        let mut col = 0;
        for ((_, enc), &pos) in self.encodings.iter().zip(positions) {
            let value = &values[pos];
            match enc {
                Encoding::Thresholds(ts) => {
                    let v = value.as_num().expect("kind checked at bind");
                    for &t in ts {
                        out[col] = v <= t;
                        out[col + 1] = v > t;
                        col += 2;
                    }
                }
                Encoding::Categories(cs) => {
                    let v = value.as_cat().expect("kind checked at bind");
                    for c in cs {
                        out[col] = v == c;
                        out[col + 1] = v != c;
                        col += 2;
                    }
                }
            }
        }
    }

    pub fn binarize(&self, ds: &Dataset) -> Result<BinarizedMatrix> {
        let positions = self.bind(ds.schema())?;
        let m = self.n_columns();
        let mut bits = vec![false; ds.len() * m];
        if m > 0 {
            bits.par_chunks_mut(m)
                .zip(ds.rows().par_iter())
                .for_each(|(out, row)| self.encode_row(&positions, row, out));
        }
        Ok(BinarizedMatrix {
            columns: self.layout.clone(),
            n_rows: ds.len(),
            bits,
        })
    }

    pub fn binarize_record(&self, record: &Record<'_>) -> Result<Vec<bool>> {
        let positions = self.bind(record.schema)?;
        let mut out = vec![false; self.n_columns()];
        self.encode_row(&positions, record.values, &mut out);
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let artifact = BinarizerArtifact {
            version: ARTIFACT_VERSION,
            kind: "binarizer".into(),
            features: self.encodings.clone(),
            column_layout: self.layout.clone(),
        };
        Ok(serde_json::to_string_pretty(&artifact)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let artifact: BinarizerArtifact = serde_json::from_str(text)?;
        let model = Self::from_encodings(artifact.features);
        if model.layout != artifact.column_layout {
            return Err(Error::Artifact(
                "binarizer column_layout does not match its feature encodings".into(),
            ));
        }
        Ok(model)
    }
}

/// Row-major N x M bit matrix; column `j` holds the truth of `columns[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedMatrix {
    columns: Vec<AtomicPredicate>,
    n_rows: usize,
    bits: Vec<bool>,
}

impl BinarizedMatrix {
    pub fn from_rows(columns: Vec<AtomicPredicate>, rows: &[Vec<bool>]) -> Result<Self> {
        let m = columns.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != m) {
            return Err(Error::WidthMismatch {
                expected: m,
                actual: bad.len(),
            });
        }
        Ok(Self {
            columns,
            n_rows: rows.len(),
            bits: rows.concat(),
        })
    }

    pub fn columns(&self) -> &[AtomicPredicate] {
        &self.columns
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.n_cols() + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        let m = self.n_cols();
        &self.bits[row * m..(row + 1) * m]
    }

    /// Indices of rows where column `col` is set.
    pub fn column_rows(&self, col: usize) -> Vec<usize> {
        (0..self.n_rows).filter(|&i| self.get(i, col)).collect()
    }

    /// Indices of the set columns in each row.
    pub fn active_columns(&self) -> Vec<Vec<u32>> {
        (0..self.n_rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(|(j, _)| j as u32)
                    .collect()
            })
            .collect()
    }
}
