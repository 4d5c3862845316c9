//! Per-row explanation codes: 1-3 safety tiers, 4-11 risk rules, 12 drift.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::binarizer::BinarizerModel;
use crate::data::{Dataset, Record};
use crate::error::{Error, Result};
use crate::lrr::SafetyTiers;
use crate::ruledsl::RiskRuleSet;

pub const DRIFT_CODE: u8 = 12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precedence {
    #[default]
    RiskFirst,
    SafetyFirst,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Safety { tier: u8, rule: String },
    Risk { name: String },
    Drift,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Safety { tier, rule } => write!(f, "safety tier {tier}: {rule}"),
            Provenance::Risk { name } => write!(f, "risk: {name}"),
            Provenance::Drift => f.write_str("drift"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplanationVector {
    codes: Vec<u8>,
    provenance: Vec<Provenance>,
}

impl ExplanationVector {
    pub fn new(codes: Vec<u8>, provenance: Vec<Provenance>) -> Result<Self> {
        if codes.len() != provenance.len() {
            return Err(Error::WidthMismatch {
                expected: codes.len(),
                actual: provenance.len(),
            });
        }
        for (code, prov) in codes.iter().zip(&provenance) {
            let ok = match prov {
                Provenance::Safety { tier, .. } => (1..=3).contains(code) && tier == code,
                Provenance::Risk { .. } => (4..=11).contains(code),
                Provenance::Drift => *code == DRIFT_CODE,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "code {code} inconsistent with provenance `{prov}`"
                )));
            }
        }
        Ok(Self { codes, provenance })
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Count of rows per code; every code 1..=12 is present.
    pub fn histogram(&self) -> BTreeMap<u8, usize> {
        let mut h: BTreeMap<u8, usize> = (1..=DRIFT_CODE).map(|c| (c, 0)).collect();
        for &c in &self.codes {
            *h.entry(c).or_default() += 1;
        }
        h
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            codes: indices.iter().map(|&i| self.codes[i]).collect(),
            provenance: indices.iter().map(|&i| self.provenance[i].clone()).collect(),
        }
    }

    /// CSV with columns `row_index, code, provenance`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["row_index", "code", "provenance"])?;
        for (i, (code, prov)) in self.codes.iter().zip(&self.provenance).enumerate() {
            w.write_record([i.to_string(), code.to_string(), prov.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the code column of an explanation CSV.
    pub fn read_codes<R: std::io::Read>(reader: R) -> Result<Vec<u8>> {
        let mut rdr = csv::Reader::from_reader(reader);
        rdr.records()
            .map(|rec| {
                let rec = rec?;
                rec.get(1)
                    .and_then(|c| c.parse().ok())
                    .filter(|c| (1..=DRIFT_CODE).contains(c))
                    .ok_or_else(|| Error::Artifact(format!("bad explanation row {rec:?}")))
            })
            .collect()
    }
}

/// Fuses safety tiers and risk rules into one code per row.
#[derive(Debug, Clone, Copy)]
pub struct Explainer<'a> {
    pub tiers: &'a SafetyTiers,
    pub binarizer: &'a BinarizerModel,
    pub risks: &'a RiskRuleSet,
    pub precedence: Precedence,
}

impl<'a> Explainer<'a> {
    pub fn new(
        tiers: &'a SafetyTiers,
        binarizer: &'a BinarizerModel,
        risks: &'a RiskRuleSet,
    ) -> Self {
        Self {
            tiers,
            binarizer,
            risks,
            precedence: Precedence::RiskFirst,
        }
    }

    pub fn with_precedence(mut self, precedence: Precedence) -> Self {
        self.precedence = precedence;
        self
    }

    fn risk_match(&self, record: &Record<'_>) -> Result<Option<(u8, Provenance)>> {
        for rule in self.risks.by_precedence() {
            if rule.evaluate(record)? {
                return Ok(Some((
                    rule.code,
                    Provenance::Risk {
                        name: rule.name.clone(),
                    },
                )));
            }
        }
        Ok(None)
    }

    fn safety_match(&self, bits: &[bool]) -> Option<(u8, Provenance)> {
        for tier in 1..=3u8 {
            if let Some(rule) = self.tiers.tier(tier).iter().find(|r| r.candidate.matches(bits)) {
                return Some((
                    tier,
                    Provenance::Safety {
                        tier,
                        rule: rule.candidate.to_string(),
                    },
                ));
            }
        }
        None
    }

    pub fn assign_code(&self, record: &Record<'_>) -> Result<(u8, Provenance)> {
        let bits = self.binarizer.binarize_record(record)?;
        let width = self.binarizer.n_columns();
        if let Some(bad) = self
            .tiers
            .tiers
            .values()
            .flatten()
            .flat_map(|r| &r.candidate.columns)
            .find(|&&c| c >= width)
        {
            return Err(Error::WidthMismatch {
                expected: width,
                actual: bad + 1,
            });
        }
        let hit = match self.precedence {
            Precedence::RiskFirst => match self.risk_match(record)? {
                Some(hit) => Some(hit),
                None => self.safety_match(&bits),
            },
            Precedence::SafetyFirst => match self.safety_match(&bits) {
                Some(hit) => Some(hit),
                None => self.risk_match(record)?,
            },
        };
        Ok(hit.unwrap_or((DRIFT_CODE, Provenance::Drift)))
    }

    pub fn build_matrix(&self, ds: &Dataset) -> Result<ExplanationVector> {
        self.risks.bind(ds.schema())?;
        let (codes, provenance) = ds
            .records()
            .map(|r| self.assign_code(&r))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(ExplanationVector { codes, provenance })
    }
}
