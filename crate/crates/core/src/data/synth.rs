//! Synthetic churn data with planted structure.
//!
//! Stay customers come from a few dense regions ("safety patterns"), each a
//! conjunction of 2-3 conditions on tenure / contract / usage style features.
//! Churners split into sparse risk disjuncts, each a distinct conjunction of
//! two risk-feature conditions, plus background churners matching nothing.
//! Risk-disjunct churners are placed inside a safety region so that broad
//! structural rules alone mislabel them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureSchema, SchemaSidecar, Value};
use crate::binarizer::{AtomicPredicate, Comparator, Threshold};
use crate::error::{Error, Result};
use crate::explain::{ExplanationVector, Provenance, DRIFT_CODE};
use crate::ruledsl::Quadrant;

/// Marginal rate of each risk condition among rows that are not forced to
/// satisfy it.
const RISK_BASE_RATE: f64 = 0.4;
const MAX_REJECTIONS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_rows: usize,
    pub churn_rate: f64,
    pub n_safety_patterns: usize,
    pub n_risk_disjuncts: usize,
    pub risk_disjunct_coverage: f64,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_rows: 5000,
            churn_rate: 0.56,
            n_safety_patterns: 2,
            n_risk_disjuncts: 4,
            risk_disjunct_coverage: 0.06,
            noise_rate: 0.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_rows == 0 {
            return err("n_rows must be positive".into());
        }
        if !(self.churn_rate > 0.0 && self.churn_rate < 1.0) {
            return err(format!("churn_rate {} outside (0, 1)", self.churn_rate));
        }
        if self.n_safety_patterns == 0 || self.n_safety_patterns > SAFETY_PATTERNS.len() {
            return err(format!(
                "n_safety_patterns must be in 1..={}",
                SAFETY_PATTERNS.len()
            ));
        }
        if self.n_risk_disjuncts > RISK_DISJUNCTS.len() {
            return err(format!(
                "n_risk_disjuncts must be at most {}",
                RISK_DISJUNCTS.len()
            ));
        }
        if !(0.0..=1.0).contains(&self.risk_disjunct_coverage) {
            return err("risk_disjunct_coverage must be a fraction".into());
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return err(format!("noise_rate {} outside [0, 0.5)", self.noise_rate));
        }
        if self.n_risk_disjuncts as f64 * self.risk_disjunct_coverage > self.churn_rate + 1e-12
            || self.n_risk_disjuncts * self.rows_per_disjunct() > self.n_churn()
        {
            return err(format!(
                "risk coverage budget exceeded: {} disjuncts x {} > churn rate {}",
                self.n_risk_disjuncts, self.risk_disjunct_coverage, self.churn_rate
            ));
        }
        Ok(())
    }

    pub fn n_churn(&self) -> usize {
        (self.n_rows as f64 * self.churn_rate).round() as usize
    }

    pub fn rows_per_disjunct(&self) -> usize {
        (self.n_rows as f64 * self.risk_disjunct_coverage).round() as usize
    }
}

/// A planted churn disjunct and the risk code it carries.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedRisk {
    pub name: String,
    pub code: u8,
    pub quadrant: Quadrant,
    pub atoms: Vec<AtomicPredicate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedStructure {
    /// Pattern `i` carries safety tier `min(i + 1, 3)`.
    pub safety_patterns: Vec<Vec<AtomicPredicate>>,
    pub risks: Vec<PlantedRisk>,
}

impl PlantedStructure {
    pub fn for_config(cfg: &SynthConfig) -> Self {
        Self {
            safety_patterns: SAFETY_PATTERNS[..cfg.n_safety_patterns]
                .iter()
                .map(|atoms| atoms.iter().map(Atom::predicate).collect())
                .collect(),
            risks: RISK_DISJUNCTS[..cfg.n_risk_disjuncts]
                .iter()
                .enumerate()
                .map(|(k, d)| PlantedRisk {
                    name: d.name.to_string(),
                    code: 4 + k as u8,
                    quadrant: d.quadrant,
                    atoms: d.atoms.iter().map(Atom::predicate).collect(),
                })
                .collect(),
        }
    }

    pub fn safety_tier(pattern: usize) -> u8 {
        (pattern + 1).min(3) as u8
    }

    /// Risk rules for the planted disjuncts in rule-file syntax.
    pub fn risk_rules_source(&self) -> String {
        let mut out = String::from("# planted risk disjuncts of the synthetic generator\n");
        for r in &self.risks {
            let conj: Vec<String> = r.atoms.iter().map(ToString::to_string).collect();
            out.push_str(&format!(
                "rule {:?} code {} quadrant {}: {}\n",
                r.name,
                r.code,
                r.quadrant,
                conj.join(" AND ")
            ));
        }
        out
    }
}

#[derive(Clone, Copy)]
enum Domain {
    /// Integer segments `(weight, lo, hi)`; the cell value is `k / scale`.
    Int {
        segments: &'static [(f64, i64, i64)],
        scale: f64,
    },
    Cat(&'static [(&'static str, f64)]),
}

struct FeatureSpec {
    name: &'static str,
    domain: Domain,
}

const fn int(name: &'static str, segments: &'static [(f64, i64, i64)]) -> FeatureSpec {
    FeatureSpec {
        name,
        domain: Domain::Int {
            segments,
            scale: 1.0,
        },
    }
}

const LOW: f64 = 1.0 - RISK_BASE_RATE;

// Risk features put LOW mass at or below their planted threshold.
const NUMERIC: &[FeatureSpec] = &[
    int("tenure", &[(1.0, 0, 72)]),
    int("monthly_usage", &[(1.0, 0, 100)]),
    int("products", &[(1.0, 1, 5)]),
    int("referrals", &[(1.0, 0, 5)]),
    int("payment_delay", &[(LOW, 0, 20), (RISK_BASE_RATE, 21, 60)]),
    int("support_calls", &[(LOW, 0, 4), (RISK_BASE_RATE, 5, 12)]),
    int("spend_drop", &[(LOW, 0, 30), (RISK_BASE_RATE, 31, 80)]),
    int("login_gap", &[(LOW, 0, 14), (RISK_BASE_RATE, 15, 45)]),
    int("plan_changes", &[(LOW, 0, 2), (RISK_BASE_RATE, 3, 8)]),
    int("age", &[(1.0, 18, 80)]),
    FeatureSpec {
        name: "monthly_charges",
        domain: Domain::Int {
            segments: &[(1.0, 2000, 12000)],
            scale: 100.0,
        },
    },
];

const CATEGORICAL: &[FeatureSpec] = &[
    FeatureSpec {
        name: "contract",
        domain: Domain::Cat(&[("monthly", 0.5), ("one_year", 0.25), ("two_year", 0.25)]),
    },
    FeatureSpec {
        name: "autopay",
        domain: Domain::Cat(&[("no", 0.5), ("yes", 0.5)]),
    },
    FeatureSpec {
        name: "bundle",
        domain: Domain::Cat(&[("no", 0.6), ("yes", 0.4)]),
    },
    FeatureSpec {
        name: "region",
        domain: Domain::Cat(&[("east", 0.25), ("north", 0.25), ("south", 0.25), ("west", 0.25)]),
    },
];

#[derive(Clone, Copy)]
enum Atom {
    Gt(&'static str, i64),
    Is(&'static str, &'static str),
}

impl Atom {
    fn predicate(&self) -> AtomicPredicate {
        match *self {
            Atom::Gt(f, t) => AtomicPredicate::numeric(f, Comparator::Gt, t as f64),
            Atom::Is(f, c) => AtomicPredicate::categorical(f, Comparator::Eq, c),
        }
    }
}

const SAFETY_PATTERNS: &[&[Atom]] = &[
    &[Atom::Gt("tenure", 24), Atom::Is("contract", "two_year")],
    &[Atom::Gt("monthly_usage", 60), Atom::Is("autopay", "yes")],
    &[
        Atom::Gt("products", 2),
        Atom::Is("bundle", "yes"),
        Atom::Gt("referrals", 0),
    ],
];

struct Disjunct {
    name: &'static str,
    quadrant: Quadrant,
    atoms: [Atom; 2],
}

const RISK_DISJUNCTS: &[Disjunct] = &[
    Disjunct {
        name: "late_payer",
        quadrant: Quadrant::Financial,
        atoms: [Atom::Gt("payment_delay", 20), Atom::Gt("spend_drop", 30)],
    },
    Disjunct {
        name: "plan_hopper",
        quadrant: Quadrant::Structural,
        atoms: [Atom::Gt("plan_changes", 2), Atom::Gt("payment_delay", 20)],
    },
    Disjunct {
        name: "support_escalation",
        quadrant: Quadrant::Interaction,
        atoms: [Atom::Gt("support_calls", 4), Atom::Gt("spend_drop", 30)],
    },
    Disjunct {
        name: "gone_quiet",
        quadrant: Quadrant::Engagement,
        atoms: [Atom::Gt("login_gap", 14), Atom::Gt("plan_changes", 2)],
    },
    Disjunct {
        name: "disputed_bill",
        quadrant: Quadrant::Financial,
        atoms: [Atom::Gt("payment_delay", 20), Atom::Gt("support_calls", 4)],
    },
    Disjunct {
        name: "downgrade_loop",
        quadrant: Quadrant::Structural,
        atoms: [Atom::Gt("plan_changes", 2), Atom::Gt("support_calls", 4)],
    },
    Disjunct {
        name: "unresolved_tickets",
        quadrant: Quadrant::Interaction,
        atoms: [Atom::Gt("support_calls", 4), Atom::Gt("login_gap", 14)],
    },
    Disjunct {
        name: "fading_spend",
        quadrant: Quadrant::Engagement,
        atoms: [Atom::Gt("login_gap", 14), Atom::Gt("spend_drop", 30)],
    },
];

pub(crate) fn synthetic_schema() -> FeatureSchema {
    FeatureSchema::from_sidecar(SchemaSidecar {
        label: "churn".into(),
        ids: vec!["customer_id".into()],
        numeric: NUMERIC.iter().map(|f| f.name.to_string()).collect(),
        categorical: CATEGORICAL.iter().map(|f| f.name.to_string()).collect(),
    })
    .expect("static schema is valid")
}

/// The feature specs in schema order (numeric first).
fn specs() -> impl Iterator<Item = &'static FeatureSpec> {
    NUMERIC.iter().chain(CATEGORICAL.iter())
}

fn sample_feature(
    spec: &FeatureSpec,
    required: &[AtomicPredicate],
    rng: &mut ChaCha8Rng,
) -> Option<Value> {
    let constraints: Vec<&AtomicPredicate> =
        required.iter().filter(|a| a.feature == spec.name).collect();
    match spec.domain {
        Domain::Int { segments, scale } => {
            // integer bounds implied by the constraints, in domain units
            let (mut lo, mut hi) = (i64::MIN, i64::MAX);
            for c in &constraints {
                let Threshold::Num(t) = c.threshold else {
                    return None;
                };
                let t = t * scale;
                match c.comparator {
                    Comparator::Le => hi = hi.min(t.floor() as i64),
                    Comparator::Gt => lo = lo.max(t.floor() as i64 + 1),
                    _ => return None,
                }
            }
            let clipped: Vec<(f64, i64, i64)> = segments
                .iter()
                .filter_map(|&(w, a, b)| {
                    let (a2, b2) = (a.max(lo), b.min(hi));
                    (a2 <= b2).then(|| (w * (b2 - a2 + 1) as f64 / (b - a + 1) as f64, a2, b2))
                })
                .collect();
            let total: f64 = clipped.iter().map(|s| s.0).sum();
            if clipped.is_empty() || total <= 0.0 {
                return None;
            }
            let mut pick = rng.gen::<f64>() * total;
            let mut chosen = clipped[clipped.len() - 1];
            for s in &clipped {
                if pick < s.0 {
                    chosen = *s;
                    break;
                }
                pick -= s.0;
            }
            let k = rng.gen_range(chosen.1..=chosen.2);
            Some(Value::Num(k as f64 / scale))
        }
        Domain::Cat(choices) => {
            let allowed: Vec<(&str, f64)> = choices
                .iter()
                .copied()
                .filter(|(c, _)| {
                    let v = Value::Cat(c.to_string());
                    constraints.iter().all(|a| a.test(&v) == Some(true))
                })
                .collect();
            let total: f64 = allowed.iter().map(|c| c.1).sum();
            if allowed.is_empty() {
                return None;
            }
            let mut pick = rng.gen::<f64>() * total;
            let mut chosen = allowed[allowed.len() - 1].0;
            for (c, w) in &allowed {
                if pick < *w {
                    chosen = c;
                    break;
                }
                pick -= w;
            }
            Some(Value::Cat(chosen.to_string()))
        }
    }
}

fn matches(schema: &FeatureSchema, row: &[Value], atoms: &[AtomicPredicate]) -> bool {
    atoms.iter().all(|a| {
        let i = schema.index_of(&a.feature).expect("planted feature");
        a.test(&row[i]) == Some(true)
    })
}

/// Samples a row satisfying every `required` atom and none of the
/// `forbidden` conjunctions. `None` when the requirements are contradictory.
fn sample_row(
    schema: &FeatureSchema,
    required: &[AtomicPredicate],
    forbidden: &[&[AtomicPredicate]],
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Value>> {
    for _ in 0..MAX_REJECTIONS {
        let row: Vec<Value> = specs()
            .map(|spec| sample_feature(spec, required, rng))
            .collect::<Option<_>>()?;
        if !forbidden.iter().any(|conj| matches(schema, &row, conj)) {
            return Some(row);
        }
    }
    None
}

/// Generates a dataset and its ground-truth explanation codes.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Dataset, ExplanationVector)> {
    cfg.validate()?;
    let schema = synthetic_schema();
    let planted = PlantedStructure::for_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let n_churn = cfg.n_churn();
    let n_stay = cfg.n_rows - n_churn;
    let per_disjunct = cfg.rows_per_disjunct();
    let n_background = n_churn - per_disjunct * planted.risks.len();

    let n_patterns = planted.safety_patterns.len();
    let weights: Vec<usize> = (0..n_patterns).map(|i| n_patterns - i).collect();
    let weight_total: usize = weights.iter().sum();
    let pick_pattern = |rng: &mut ChaCha8Rng| {
        let mut r = rng.gen_range(0..weight_total);
        for (i, &w) in weights.iter().enumerate() {
            if r < w {
                return i;
            }
            r -= w;
        }
        n_patterns - 1
    };

    let risk_atoms: Vec<&[AtomicPredicate]> =
        planted.risks.iter().map(|r| r.atoms.as_slice()).collect();
    let pattern_atoms: Vec<&[AtomicPredicate]> =
        planted.safety_patterns.iter().map(Vec::as_slice).collect();

    let mut rows = Vec::with_capacity(cfg.n_rows);
    let mut labels = Vec::with_capacity(cfg.n_rows);
    let mut truth = Vec::with_capacity(cfg.n_rows);

    // stayers: pattern quotas proportional to weights, remainder to pattern 0
    let mut quotas: Vec<usize> = weights.iter().map(|w| n_stay * w / weight_total).collect();
    quotas[0] += n_stay - quotas.iter().sum::<usize>();
    for (p, &quota) in quotas.iter().enumerate() {
        let forbidden: Vec<&[AtomicPredicate]> = pattern_atoms
            .iter()
            .enumerate()
            .filter(|&(q, _)| q != p)
            .map(|(_, a)| *a)
            .chain(risk_atoms.iter().copied())
            .collect();
        for _ in 0..quota {
            let row = sample_row(&schema, pattern_atoms[p], &forbidden, &mut rng)
                .ok_or_else(|| Error::Config("cannot sample safety pattern row".into()))?;
            rows.push(row);
            labels.push(0);
            truth.push((
                PlantedStructure::safety_tier(p),
                Provenance::Safety {
                    tier: PlantedStructure::safety_tier(p),
                    rule: conj_string(pattern_atoms[p]),
                },
            ));
        }
    }

    // risk churners, hosted inside a safety region
    for (k, risk) in planted.risks.iter().enumerate() {
        for _ in 0..per_disjunct {
            let mut row = None;
            for _ in 0..64 {
                let host = pick_pattern(&mut rng);
                let required: Vec<AtomicPredicate> = pattern_atoms[host]
                    .iter()
                    .chain(&risk.atoms)
                    .cloned()
                    .collect();
                let forbidden: Vec<&[AtomicPredicate]> = pattern_atoms
                    .iter()
                    .enumerate()
                    .filter(|&(q, _)| q != host)
                    .map(|(_, a)| *a)
                    .chain(
                        risk_atoms
                            .iter()
                            .enumerate()
                            .filter(|&(j, _)| j != k)
                            .map(|(_, a)| *a),
                    )
                    .collect();
                row = sample_row(&schema, &required, &forbidden, &mut rng);
                if row.is_some() {
                    break;
                }
            }
            let row =
                row.ok_or_else(|| Error::Config(format!("cannot sample risk row `{}`", risk.name)))?;
            rows.push(row);
            labels.push(1);
            truth.push((
                risk.code,
                Provenance::Risk {
                    name: risk.name.clone(),
                },
            ));
        }
    }

    let all_forbidden: Vec<&[AtomicPredicate]> = pattern_atoms
        .iter()
        .chain(risk_atoms.iter())
        .copied()
        .collect();
    for _ in 0..n_background {
        let row = sample_row(&schema, &[], &all_forbidden, &mut rng)
            .ok_or_else(|| Error::Config("cannot sample background row".into()))?;
        rows.push(row);
        labels.push(1);
        truth.push((DRIFT_CODE, Provenance::Drift));
    }

    let n_flip = (cfg.n_rows as f64 * cfg.noise_rate).round() as usize;
    let mut order: Vec<usize> = (0..cfg.n_rows).collect();
    order.shuffle(&mut rng);
    for &i in &order[..n_flip] {
        labels[i] = 1 - labels[i];
        truth[i] = (DRIFT_CODE, Provenance::Drift);
    }

    order.shuffle(&mut rng);
    let rows: Vec<Vec<Value>> = order.iter().map(|&i| rows[i].clone()).collect();
    let labels: Vec<u8> = order.iter().map(|&i| labels[i]).collect();
    let (codes, provenance): (Vec<u8>, Vec<Provenance>) =
        order.iter().map(|&i| truth[i].clone()).unzip();

    let ds = Dataset::new(schema, rows, labels)?;
    Ok((ds, ExplanationVector::new(codes, provenance)?))
}

fn conj_string(atoms: &[AtomicPredicate]) -> String {
    atoms
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" AND ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_matching(ds: &Dataset, atoms: &[AtomicPredicate]) -> usize {
        ds.rows()
            .iter()
            .filter(|r| matches(ds.schema(), r, atoms))
            .count()
    }

    #[test]
    fn exact_churn_count_without_noise() {
        let cfg = SynthConfig {
            n_rows: 1000,
            churn_rate: 0.56,
            ..SynthConfig::default()
        };
        let (ds, _) = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.churn_count(), 560);
    }

    #[test]
    fn disjunct_coverage_by_brute_force() {
        let cfg = SynthConfig {
            n_rows: 1000,
            n_risk_disjuncts: 8,
            risk_disjunct_coverage: 0.015,
            ..SynthConfig::default()
        };
        let (ds, truth) = generate_synthetic(&cfg).unwrap();
        let planted = PlantedStructure::for_config(&cfg);
        for r in &planted.risks {
            assert_eq!(count_matching(&ds, &r.atoms), 15, "{}", r.name);
            let coded = truth.codes().iter().filter(|&&c| c == r.code).count();
            assert_eq!(coded, 15);
        }
    }

    #[test]
    fn risk_rows_match_their_conjunction() {
        let cfg = SynthConfig {
            n_risk_disjuncts: 8,
            risk_disjunct_coverage: 0.02,
            ..SynthConfig::default()
        };
        let (ds, truth) = generate_synthetic(&cfg).unwrap();
        let planted = PlantedStructure::for_config(&cfg);
        for (i, &code) in truth.codes().iter().enumerate() {
            let row = &ds.rows()[i];
            match code {
                1..=3 => {
                    let p = planted
                        .safety_patterns
                        .iter()
                        .position(|atoms| matches(ds.schema(), row, atoms))
                        .expect("stay row inside a pattern");
                    assert_eq!(PlantedStructure::safety_tier(p), code);
                    assert_eq!(ds.labels()[i], 0);
                }
                4..=11 => {
                    let r = &planted.risks[(code - 4) as usize];
                    assert!(matches(ds.schema(), row, &r.atoms));
                    assert_eq!(ds.labels()[i], 1);
                }
                _ => {
                    assert_eq!(ds.labels()[i], 1);
                    assert!(planted
                        .safety_patterns
                        .iter()
                        .all(|a| !matches(ds.schema(), row, a)));
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig {
            noise_rate: 0.05,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = generate_synthetic(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn noise_flips_exact_count() {
        let cfg = SynthConfig {
            n_rows: 1000,
            noise_rate: 0.05,
            ..SynthConfig::default()
        };
        let (_, truth) = generate_synthetic(&cfg).unwrap();
        let clean = generate_synthetic(&SynthConfig {
            noise_rate: 0.0,
            ..cfg.clone()
        })
        .unwrap();
        // flipped rows all carry the drift code
        let drift_noisy = truth.codes().iter().filter(|&&c| c == DRIFT_CODE).count();
        let drift_clean = clean.1.codes().iter().filter(|&&c| c == DRIFT_CODE).count();
        assert!(drift_noisy >= drift_clean);
    }

    #[test]
    fn coverage_budget_enforced() {
        let cfg = SynthConfig {
            churn_rate: 0.1,
            n_risk_disjuncts: 8,
            risk_disjunct_coverage: 0.02,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn planted_rules_source_lists_every_disjunct() {
        let cfg = SynthConfig {
            n_risk_disjuncts: 3,
            ..SynthConfig::default()
        };
        let src = PlantedStructure::for_config(&cfg).risk_rules_source();
        assert_eq!(src.matches("rule ").count(), 3);
        assert!(src.contains("payment_delay > 20 AND spend_drop > 30"));
    }
}
