use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: u8,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedAverage {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Support-weighted mean of per-class values.
pub fn weighted_average(values: &[f64], supports: &[usize]) -> f64 {
    let total: usize = supports.iter().sum();
    if total == 0 {
        return 0.0;
    }
    values
        .iter()
        .zip(supports)
        .map(|(v, &s)| v * s as f64)
        .sum::<f64>()
        / total as f64
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Binary label metrics; `confusion[t][p]` counts true label `t` predicted
/// as `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub classes: Vec<ClassMetrics>,
    pub weighted: WeightedAverage,
    pub confusion: [[usize; 2]; 2],
}

impl LabelReport {
    pub fn from_predictions(y_true: &[u8], y_pred: &[u8]) -> Self {
        let mut confusion = [[0usize; 2]; 2];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            confusion[t as usize][p as usize] += 1;
        }
        let classes: Vec<ClassMetrics> = (0..2)
            .map(|c| {
                let tp = confusion[c][c];
                let predicted = confusion[0][c] + confusion[1][c];
                let support = confusion[c][0] + confusion[c][1];
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                ClassMetrics {
                    label: c as u8,
                    precision,
                    recall,
                    f1: f1(precision, recall),
                    support,
                }
            })
            .collect();
        let supports: Vec<usize> = classes.iter().map(|c| c.support).collect();
        let avg = |f: fn(&ClassMetrics) -> f64| {
            weighted_average(&classes.iter().map(f).collect::<Vec<_>>(), &supports)
        };
        let weighted = WeightedAverage {
            precision: avg(|c| c.precision),
            recall: avg(|c| c.recall),
            f1: avg(|c| c.f1),
            support: supports.iter().sum(),
        };
        Self {
            classes,
            weighted,
            confusion,
        }
    }
}

impl fmt::Display for LabelReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12}{:>10}{:>10}{:>10}{:>10}",
            "Class", "Precision", "Recall", "F1-Score", "Support"
        )?;
        for c in &self.classes {
            let name = if c.label == 0 { "0 (Stay)" } else { "1 (Churn)" };
            writeln!(
                f,
                "{:<12}{:>10.2}{:>10.2}{:>10.2}{:>10}",
                name, c.precision, c.recall, c.f1, c.support
            )?;
        }
        write!(
            f,
            "{:<12}{:>10.2}{:>10.2}{:>10.2}{:>10}",
            "Wt. Avg",
            self.weighted.precision,
            self.weighted.recall,
            self.weighted.f1,
            self.weighted.support
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_average_matches_hand_computation() {
        assert!((weighted_average(&[0.92, 0.99], &[860, 1140]) - 0.9599).abs() < 1e-12);
        assert!((weighted_average(&[0.98, 0.93], &[860, 1140]) - 0.9515).abs() < 1e-12);
        assert_eq!(weighted_average(&[], &[]), 0.0);
    }

    #[test]
    fn report_from_predictions() {
        let y = [0, 0, 1, 1, 1];
        let p = [0, 1, 1, 1, 0];
        let r = LabelReport::from_predictions(&y, &p);
        assert_eq!(r.confusion, [[1, 1], [1, 2]]);
        assert_eq!(r.classes[0].precision, 0.5);
        assert_eq!(r.classes[1].recall, 2.0 / 3.0);
        assert_eq!(r.weighted.support, 5);
        let recomputed = (r.classes[0].f1 * 2.0 + r.classes[1].f1 * 3.0) / 5.0;
        assert!((r.weighted.f1 - recomputed).abs() < 1e-12);
        let table = r.to_string();
        assert!(table.contains("Wt. Avg"));
        assert!(table.lines().count() == 4);
    }

    #[test]
    fn zero_division_is_zero() {
        let r = LabelReport::from_predictions(&[1, 1], &[1, 1]);
        assert_eq!(r.classes[0].precision, 0.0);
        assert_eq!(r.classes[0].support, 0);
        assert_eq!(r.classes[1].f1, 1.0);
    }
}
