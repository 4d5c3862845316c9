//! Coverage / orthogonality down-selection of expert rules.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ruledsl::{RiskRule, RiskRuleSet};
use crate::ARTIFACT_VERSION;

pub const DEFAULT_MIN_COVERAGE: f64 = 0.01;
pub const DEFAULT_MAX_JACCARD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct RuleStats<'a> {
    pub rule: &'a RiskRule,
    /// Fraction of churn rows matched.
    pub coverage: f64,
    /// Matched rows over the whole dataset.
    pub match_set: BTreeSet<usize>,
}

/// `|A ∩ B| / |A ∪ B|`, with two empty sets defined as 0.
pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn coverage<'a>(rule: &'a RiskRule, ds: &Dataset) -> Result<RuleStats<'a>> {
    let churners = ds.churn_count();
    if churners == 0 {
        return Err(Error::Coverage("dataset has no churn rows".into()));
    }
    let mut match_set = BTreeSet::new();
    let mut churn_hits = 0;
    for (i, record) in ds.records().enumerate() {
        if rule.evaluate(&record)? {
            match_set.insert(i);
            if ds.labels()[i] == 1 {
                churn_hits += 1;
            }
        }
    }
    Ok(RuleStats {
        rule,
        coverage: churn_hits as f64 / churners as f64,
        match_set,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DropReason {
    LowCoverage { coverage: f64 },
    Redundant { with: String, jaccard: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRule {
    pub rule: String,
    pub code: u8,
    #[serde(flatten)]
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptRule {
    pub rule: String,
    pub code: u8,
    pub coverage: f64,
    pub matched_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub version: u32,
    pub kind: String,
    pub min_coverage: f64,
    pub max_jaccard: f64,
    /// In selection order (descending coverage, ties by ascending code).
    pub kept: Vec<KeptRule>,
    pub dropped: Vec<DroppedRule>,
    /// Row/column order follows `kept`.
    pub pairwise_jaccard: Vec<Vec<f64>>,
    pub mean_pairwise_jaccard: f64,
    pub max_pairwise_jaccard: f64,
}

impl SelectionReport {
    pub fn kept_names(&self) -> Vec<String> {
        self.kept.iter().map(|k| k.rule.clone()).collect()
    }

    /// The kept rules of `rules`, in selection order.
    pub fn kept_rules(&self, rules: &RiskRuleSet) -> RiskRuleSet {
        let ordered = self
            .kept
            .iter()
            .filter_map(|k| rules.rules().iter().find(|r| r.name == k.rule).cloned())
            .collect();
        RiskRuleSet::new(ordered).expect("subset of a valid rule set")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mean and max over the strict upper triangle.
pub fn off_diagonal_summary(matrix: &[Vec<f64>]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    let mut n = 0usize;
    for i in 0..matrix.len() {
        for j in i + 1..matrix.len() {
            sum += matrix[i][j];
            max = max.max(matrix[i][j]);
            n += 1;
        }
    }
    (if n == 0 { 0.0 } else { sum / n as f64 }, max)
}

/// Drops rules below `min_coverage`, then scans the rest by descending
/// coverage and keeps a rule iff its Jaccard similarity with every rule
/// already kept is at most `max_jaccard`.
pub fn select(
    rules: &RiskRuleSet,
    ds: &Dataset,
    min_coverage: f64,
    max_jaccard: f64,
) -> Result<SelectionReport> {
    if !(0.0..=1.0).contains(&min_coverage) {
        return Err(Error::Config(format!("min_coverage {min_coverage} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&max_jaccard) {
        return Err(Error::Config(format!("max_jaccard {max_jaccard} outside [0, 1]")));
    }
    let mut stats: Vec<RuleStats<'_>> = rules
        .rules()
        .par_iter()
        .map(|r| coverage(r, ds))
        .collect::<Result<_>>()?;
    stats.sort_by(|a, b| {
        b.coverage
            .total_cmp(&a.coverage)
            .then(a.rule.code.cmp(&b.rule.code))
    });

    let mut kept: Vec<&RuleStats<'_>> = Vec::new();
    let mut dropped = Vec::new();
    for s in &stats {
        if s.coverage < min_coverage {
            dropped.push(DroppedRule {
                rule: s.rule.name.clone(),
                code: s.rule.code,
                reason: DropReason::LowCoverage {
                    coverage: s.coverage,
                },
            });
            continue;
        }
        let clash = kept
            .iter()
            .map(|k| (k, jaccard(&k.match_set, &s.match_set)))
            .find(|(_, j)| *j > max_jaccard);
        match clash {
            Some((k, j)) => dropped.push(DroppedRule {
                rule: s.rule.name.clone(),
                code: s.rule.code,
                reason: DropReason::Redundant {
                    with: k.rule.name.clone(),
                    jaccard: j,
                },
            }),
            None => kept.push(s),
        }
    }

    let pairwise: Vec<Vec<f64>> = kept
        .iter()
        .map(|a| kept.iter().map(|b| jaccard(&a.match_set, &b.match_set)).collect())
        .collect();
    let (mean, max) = off_diagonal_summary(&pairwise);
    Ok(SelectionReport {
        version: ARTIFACT_VERSION,
        kind: "selection".into(),
        min_coverage,
        max_jaccard,
        kept: kept
            .iter()
            .map(|s| KeptRule {
                rule: s.rule.name.clone(),
                code: s.rule.code,
                coverage: s.coverage,
                matched_rows: s.match_set.len(),
            })
            .collect(),
        dropped,
        pairwise_jaccard: pairwise,
        mean_pairwise_jaccard: mean,
        max_pairwise_jaccard: max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Feature, FeatureKind, FeatureSchema, Value};
    use crate::ruledsl::parse;

    fn set(xs: &[usize]) -> BTreeSet<usize> {
        xs.iter().copied().collect()
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&set(&[1, 2, 3]), &set(&[2, 3, 4])), 0.5);
        assert_eq!(jaccard(&set(&[1, 2]), &set(&[1, 2])), 1.0);
        assert_eq!(jaccard(&set(&[1]), &set(&[2])), 0.0);
        assert_eq!(jaccard(&set(&[]), &set(&[])), 0.0);
    }

    /// x = row index, churn for the first `churners` rows.
    fn dataset(n: usize, churners: usize) -> Dataset {
        let schema = FeatureSchema::new(
            vec![Feature {
                name: "x".into(),
                kind: FeatureKind::Numeric,
            }],
            "y",
            vec![],
        )
        .unwrap();
        Dataset::new(
            schema,
            (0..n).map(|i| vec![Value::Num(i as f64)]).collect(),
            (0..n).map(|i| u8::from(i < churners)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn coverage_uses_churn_denominator() {
        let ds = dataset(2000, 1000);
        let rules = parse(
            "rule \"few\" code 4 quadrant financial: x <= 4\n\
             rule \"all\" code 5 quadrant financial: x <= 999\n\
             rule \"stay\" code 6 quadrant financial: x > 1500\n",
        )
        .unwrap();
        let few = coverage(&rules.rules()[0], &ds).unwrap();
        assert_eq!(few.coverage, 0.005);
        assert_eq!(coverage(&rules.rules()[1], &ds).unwrap().coverage, 1.0);
        let stay = coverage(&rules.rules()[2], &ds).unwrap();
        assert_eq!(stay.coverage, 0.0);
        assert_eq!(stay.match_set.len(), 499);
    }

    #[test]
    fn coverage_requires_churners() {
        let ds = dataset(10, 0);
        let rules = parse("rule \"a\" code 4 quadrant financial: x > 1").unwrap();
        assert!(matches!(coverage(&rules.rules()[0], &ds), Err(Error::Coverage(_))));
    }

    #[test]
    fn identical_rules_are_redundant() {
        let ds = dataset(100, 50);
        let rules = parse(
            "rule \"a\" code 4 quadrant financial: x <= 20\n\
             rule \"b\" code 5 quadrant financial: x <= 20\n",
        )
        .unwrap();
        let r = select(&rules, &ds, DEFAULT_MIN_COVERAGE, DEFAULT_MAX_JACCARD).unwrap();
        assert_eq!(r.kept_names(), vec!["a"]);
        assert_eq!(
            r.dropped[0].reason,
            DropReason::Redundant {
                with: "a".into(),
                jaccard: 1.0
            }
        );
    }

    #[test]
    fn disabled_filter_keeps_all_by_coverage() {
        let ds = dataset(100, 50);
        let rules = parse(
            "rule \"small\" code 4 quadrant financial: x <= 0\n\
             rule \"big\" code 5 quadrant financial: x <= 30\n\
             rule \"mid\" code 6 quadrant financial: x <= 10\n",
        )
        .unwrap();
        let r = select(&rules, &ds, 0.0, 1.0).unwrap();
        assert_eq!(r.kept_names(), vec!["big", "mid", "small"]);
        assert!(r.dropped.is_empty());
        assert_eq!(r.pairwise_jaccard.len(), 3);
        // idempotent on its own output
        let again = select(&r.kept_rules(&rules), &ds, 0.0, 1.0).unwrap();
        assert_eq!(again.kept_names(), r.kept_names());
    }

    #[test]
    fn select_validates_ranges() {
        let ds = dataset(10, 5);
        let rules = RiskRuleSet::empty();
        assert!(select(&rules, &ds, 1.5, 0.5).is_err());
        assert!(select(&rules, &ds, 0.5, -0.1).is_err());
        let r = select(&rules, &ds, 0.5, 0.5).unwrap();
        assert!(r.kept.is_empty());
        assert_eq!(r.max_pairwise_jaccard, 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn jaccard_properties(
                a in proptest::collection::btree_set(0usize..40, 0..20),
                b in proptest::collection::btree_set(0usize..40, 0..20),
            ) {
                let j = jaccard(&a, &b);
                prop_assert_eq!(j, jaccard(&b, &a));
                prop_assert!((0.0..=1.0).contains(&j));
                if !a.is_empty() {
                    prop_assert_eq!(jaccard(&a, &a), 1.0);
                }
                if a.is_disjoint(&b) {
                    prop_assert_eq!(j, 0.0);
                }
            }
        }
    }
}
