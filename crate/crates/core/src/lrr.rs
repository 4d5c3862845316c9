//! Sparse linear rule regression.
//!
//! Minimizes
//!
//! ```text
//! 1/2 ||y - b - X w||^2 + sum_j (lambda1 + lambda2 * C_j) |w_j|
//! ```
//!
//! over rule weights `w` and an unpenalized intercept `b`, where column `j`
//! of `X` is the 0/1 evaluation of candidate rule `j` and `C_j` its
//! complexity. Solved by cyclic coordinate descent with soft-thresholding on
//! centered columns, which profiles out the intercept exactly.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binarizer::{AtomicPredicate, BinarizedMatrix};
use crate::error::{Error, Result};
use crate::ARTIFACT_VERSION;

pub const DEFAULT_MAX_PAIRS: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 1000;
/// Default `lambda1` as a fraction of `max_j |x_j^T y|`.
pub const DEFAULT_LAMBDA1_FRACTION: f64 = 0.01;

/// A conjunction of one or two binarized columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleCandidate {
    pub columns: Vec<usize>,
    pub atoms: Vec<AtomicPredicate>,
    pub complexity: usize,
}

impl RuleCandidate {
    pub fn new(bm: &BinarizedMatrix, columns: Vec<usize>) -> Self {
        let atoms = columns.iter().map(|&c| bm.columns()[c].clone()).collect();
        let complexity = 1 + columns.len();
        Self {
            columns,
            atoms,
            complexity,
        }
    }

    /// Truth value on a binarized row.
    pub fn matches(&self, bits: &[bool]) -> bool {
        self.columns.iter().all(|&c| bits[c])
    }

    pub fn degree(&self) -> usize {
        self.columns.len()
    }
}

impl std::fmt::Display for RuleCandidate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.atoms.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(" AND "))
    }
}

struct ColumnBits {
    words: Vec<u64>,
}

impl ColumnBits {
    fn from_column(bm: &BinarizedMatrix, col: usize) -> Self {
        let mut words = vec![0u64; bm.n_rows().div_ceil(64)];
        for i in 0..bm.n_rows() {
            if bm.get(i, col) {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        Self { words }
    }

    fn from_labels(y: &[u8]) -> Self {
        let mut words = vec![0u64; y.len().div_ceil(64)];
        for (i, &v) in y.iter().enumerate() {
            if v == 1 {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        Self { words }
    }

    fn and_count(&self, other: &Self) -> u64 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| u64::from((a & b).count_ones()))
            .sum()
    }

    fn and3_count(&self, b: &Self, c: &Self) -> u64 {
        self.words
            .iter()
            .zip(&b.words)
            .zip(&c.words)
            .map(|((x, y), z)| u64::from((x & y & z).count_ones()))
            .sum()
    }
}

/// Pearson correlation of two 0/1 vectors from their counts.
fn binary_correlation(n: f64, n_a: f64, n_b: f64, n_ab: f64) -> f64 {
    let denom = (n_a * (n - n_a) * n_b * (n - n_b)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (n * n_ab - n_a * n_b) / denom
    }
}

/// All atomic columns as degree-1 candidates, plus (when `max_degree == 2`)
/// the `max_pairs` cross-feature pairs with the highest
/// `support * |corr(pair, y)|`. Pairs never true on any row are skipped;
/// ties keep column-index order.
pub fn enumerate_candidates(
    bm: &BinarizedMatrix,
    labels: &[u8],
    max_degree: usize,
    max_pairs: usize,
) -> Result<Vec<RuleCandidate>> {
    if !(1..=2).contains(&max_degree) {
        return Err(Error::Config(format!("max_degree must be 1 or 2, got {max_degree}")));
    }
    if labels.len() != bm.n_rows() {
        return Err(Error::WidthMismatch {
            expected: bm.n_rows(),
            actual: labels.len(),
        });
    }
    let mut candidates: Vec<RuleCandidate> =
        (0..bm.n_cols()).map(|c| RuleCandidate::new(bm, vec![c])).collect();
    if max_degree == 1 || max_pairs == 0 {
        return Ok(candidates);
    }

    let cols: Vec<ColumnBits> = (0..bm.n_cols())
        .into_par_iter()
        .map(|c| ColumnBits::from_column(bm, c))
        .collect();
    let yb = ColumnBits::from_labels(labels);
    let n = bm.n_rows() as f64;
    let n_y = labels.iter().filter(|&&v| v == 1).count() as f64;
    let features: Vec<&str> = bm.columns().iter().map(|p| p.feature.as_str()).collect();

    let mut scored: Vec<(f64, usize, usize)> = (0..bm.n_cols())
        .into_par_iter()
        .flat_map_iter(|a| {
            let cols = &cols;
            let yb = &yb;
            let features = &features;
            (a + 1..cols.len()).filter_map(move |b| {
                if features[a] == features[b] {
                    return None;
                }
                let n_ab = cols[a].and_count(&cols[b]) as f64;
                if n_ab == 0.0 {
                    return None;
                }
                let n_aby = cols[a].and3_count(&cols[b], yb) as f64;
                let corr = binary_correlation(n, n_ab, n_y, n_aby);
                Some(((n_ab / n) * corr.abs(), a, b))
            })
        })
        .collect();
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    candidates.extend(
        scored
            .into_iter()
            .take(max_pairs)
            .map(|(_, a, b)| RuleCandidate::new(bm, vec![a, b])),
    );
    Ok(candidates)
}

/// Column-major real matrix of rule evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleMatrix {
    n_rows: usize,
    columns: Vec<Vec<f64>>,
}

impl RuleMatrix {
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = columns.first().map_or(0, Vec::len);
        if let Some(bad) = columns.iter().find(|c| c.len() != n_rows) {
            return Err(Error::WidthMismatch {
                expected: n_rows,
                actual: bad.len(),
            });
        }
        Ok(Self { n_rows, columns })
    }

    pub fn evaluate(bm: &BinarizedMatrix, candidates: &[RuleCandidate]) -> Self {
        let columns = candidates
            .par_iter()
            .map(|cand| {
                (0..bm.n_rows())
                    .map(|i| {
                        if cand.columns.iter().all(|&c| bm.get(i, c)) {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            n_rows: bm.n_rows(),
            columns,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleModel {
    pub candidates: Vec<RuleCandidate>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Objective value after each full sweep.
    #[serde(skip)]
    pub history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RuleEntry {
    rule: String,
    columns: Vec<usize>,
    atoms: Vec<AtomicPredicate>,
    complexity: usize,
    weight: f64,
}

#[derive(Serialize, Deserialize)]
struct RuleModelArtifact {
    version: u32,
    kind: String,
    intercept: f64,
    lambda1: f64,
    lambda2: f64,
    converged: bool,
    iterations: usize,
    candidates: Vec<RuleEntry>,
}

impl RuleModel {
    pub fn nonzero(&self) -> impl Iterator<Item = (&RuleCandidate, f64)> + '_ {
        self.candidates
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|(c, &w)| (c, w))
    }

    pub fn predict(&self, rm: &RuleMatrix) -> Vec<f64> {
        let mut out = vec![self.intercept; rm.n_rows()];
        for (j, &w) in self.weights.iter().enumerate() {
            if w != 0.0 {
                for (o, x) in out.iter_mut().zip(rm.column(j)) {
                    *o += w * x;
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let artifact = RuleModelArtifact {
            version: ARTIFACT_VERSION,
            kind: "lrr".into(),
            intercept: self.intercept,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            converged: self.converged,
            iterations: self.iterations,
            candidates: self
                .candidates
                .iter()
                .zip(&self.weights)
                .map(|(c, &w)| RuleEntry {
                    rule: c.to_string(),
                    columns: c.columns.clone(),
                    atoms: c.atoms.clone(),
                    complexity: c.complexity,
                    weight: w,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&artifact)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: RuleModelArtifact = serde_json::from_str(text)?;
        let (candidates, weights) = a
            .candidates
            .into_iter()
            .map(|e| {
                (
                    RuleCandidate {
                        columns: e.columns,
                        atoms: e.atoms,
                        complexity: e.complexity,
                    },
                    e.weight,
                )
            })
            .unzip();
        Ok(Self {
            candidates,
            weights,
            intercept: a.intercept,
            lambda1: a.lambda1,
            lambda2: a.lambda2,
            converged: a.converged,
            iterations: a.iterations,
            history: Vec::new(),
        })
    }
}

fn check_dims(y: &[f64], rm: &RuleMatrix, n_weights: usize) -> Result<()> {
    if y.len() != rm.n_rows() {
        return Err(Error::WidthMismatch {
            expected: rm.n_rows(),
            actual: y.len(),
        });
    }
    if n_weights != rm.n_cols() {
        return Err(Error::WidthMismatch {
            expected: rm.n_cols(),
            actual: n_weights,
        });
    }
    Ok(())
}

/// The penalized least-squares objective at `model`'s weights.
pub fn objective(y: &[f64], rm: &RuleMatrix, model: &RuleModel) -> Result<f64> {
    check_dims(y, rm, model.weights.len())?;
    if let Some(w) = model.weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("rule weight {w}")));
    }
    if !model.intercept.is_finite() {
        return Err(Error::NonFinite(format!("intercept {}", model.intercept)));
    }
    let pred = model.predict(rm);
    let rss: f64 = y.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum();
    let penalty: f64 = model
        .candidates
        .iter()
        .zip(&model.weights)
        .map(|(c, w)| (model.lambda1 + model.lambda2 * c.complexity as f64) * w.abs())
        .sum();
    Ok(0.5 * rss + penalty)
}

/// Gradient of the smooth part with respect to each weight, with the
/// intercept at its optimum.
pub fn smooth_gradient(y: &[f64], rm: &RuleMatrix, model: &RuleModel) -> Result<Vec<f64>> {
    check_dims(y, rm, model.weights.len())?;
    let pred = model.predict(rm);
    let resid: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
    Ok((0..rm.n_cols())
        .map(|j| -rm.column(j).iter().zip(&resid).map(|(x, r)| x * r).sum::<f64>())
        .collect())
}

pub fn soft_threshold(rho: f64, lambda: f64) -> f64 {
    rho.signum() * (rho.abs() - lambda).max(0.0)
}

/// Default penalties: `lambda1 = DEFAULT_LAMBDA1_FRACTION * max_j |x_j^T y|`
/// and `lambda2 = lambda1 / 2`.
pub fn default_lambdas(y: &[f64], rm: &RuleMatrix) -> (f64, f64) {
    let max = (0..rm.n_cols())
        .map(|j| rm.column(j).iter().zip(y).map(|(x, v)| x * v).sum::<f64>().abs())
        .fold(0.0, f64::max);
    let l1 = DEFAULT_LAMBDA1_FRACTION * max;
    (l1, l1 / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tol: f64,
    pub max_iters: usize,
}

pub fn fit(
    y: &[f64],
    rm: &RuleMatrix,
    candidates: &[RuleCandidate],
    opts: FitOptions,
) -> Result<RuleModel> {
    let FitOptions {
        lambda1,
        lambda2,
        tol,
        max_iters,
    } = opts;
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(Error::Config("lambda1 and lambda2 must be non-negative".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Config("tol must be positive".into()));
    }
    if candidates.len() != rm.n_cols() {
        return Err(Error::WidthMismatch {
            expected: rm.n_cols(),
            actual: candidates.len(),
        });
    }
    if y.len() != rm.n_rows() {
        return Err(Error::WidthMismatch {
            expected: rm.n_rows(),
            actual: y.len(),
        });
    }
    let n = rm.n_rows();
    let k = rm.n_cols();
    if n == 0 {
        return Err(Error::Empty("no rows to fit".into()));
    }

    let y_mean = y.iter().sum::<f64>() / n as f64;
    let col_means: Vec<f64> = (0..k)
        .map(|j| rm.column(j).iter().sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|j| rm.column(j).iter().map(|x| x - col_means[j]).collect())
        .collect();
    let norms: Vec<f64> = centered.iter().map(|c| c.iter().map(|x| x * x).sum()).collect();
    let thresholds: Vec<f64> = candidates
        .iter()
        .map(|c| lambda1 + lambda2 * c.complexity as f64)
        .collect();

    let mut w = vec![0.0; k];
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let objective_now = |resid: &[f64], w: &[f64]| {
        0.5 * resid.iter().map(|r| r * r).sum::<f64>()
            + w.iter().zip(&thresholds).map(|(w, t)| t * w.abs()).sum::<f64>()
    };

    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last = objective_now(&resid, &w);
    let mut saved = w.clone();
    while iterations < max_iters {
        iterations += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..k {
            if norms[j] <= 1e-12 {
                continue;
            }
            let xj = &centered[j];
            let rho = xj.iter().zip(&resid).map(|(x, r)| x * r).sum::<f64>() + norms[j] * w[j];
            let new = soft_threshold(rho, thresholds[j]) / norms[j];
            let delta = new - w[j];
            // coordinate objective 1/2 n v^2 - rho v + t |v|; skip moves that
            // do not lower it, which are pure rounding noise
            let f = |v: f64| 0.5 * norms[j] * v * v - rho * v + thresholds[j] * v.abs();
            if delta != 0.0 && f(new) < f(w[j]) {
                for (r, x) in resid.iter_mut().zip(xj) {
                    *r -= delta * x;
                }
                w[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        let now = objective_now(&resid, &w);
        if now > last {
            // only rounding can raise the objective: no progress is left at
            // machine precision, so keep the previous sweep
            w = saved;
            history.push(last);
            converged = true;
            break;
        }
        history.push(now);
        last = now;
        if max_change < tol {
            converged = true;
            break;
        }
        saved.copy_from_slice(&w);
    }

    let mut intercept = y_mean - w.iter().zip(&col_means).map(|(w, m)| w * m).sum::<f64>();
    fold_collinear_atoms(rm, candidates, &mut w, &mut intercept);
    Ok(RuleModel {
        candidates: candidates.to_vec(),
        weights: w,
        intercept,
        lambda1,
        lambda2,
        converged,
        iterations,
        history,
    })
}

/// Degree-1 candidates whose 0/1 columns are equal or complementary are
/// collinear with the intercept, so only their combined effect is
/// identified. Moves that effect onto one member, oriented to carry a
/// non-positive weight where the group allows it. Predictions are unchanged
/// and the penalty can only shrink.
fn fold_collinear_atoms(
    rm: &RuleMatrix,
    candidates: &[RuleCandidate],
    w: &mut [f64],
    intercept: &mut f64,
) {
    // key: the column oriented so row 0 is false; value: (index, flipped)
    let mut groups: BTreeMap<Vec<bool>, Vec<(usize, bool)>> = BTreeMap::new();
    for (j, c) in candidates.iter().enumerate() {
        let col = rm.column(j);
        if c.degree() != 1 || col.is_empty() || col.iter().any(|&x| x != 0.0 && x != 1.0) {
            continue;
        }
        let flipped = col[0] == 1.0;
        let key = col.iter().map(|&x| (x == 1.0) != flipped).collect();
        groups.entry(key).or_default().push((j, flipped));
    }
    for members in groups.values().filter(|m| m.len() > 1) {
        // sum_j w_j x_j = a * key + c
        let mut a = 0.0;
        let mut c = 0.0;
        for &(j, flipped) in members {
            if flipped {
                a -= w[j];
                c += w[j];
            } else {
                a += w[j];
            }
        }
        if members.iter().all(|&(j, _)| w[j] == 0.0) {
            continue;
        }
        let plain = members.iter().find(|m| !m.1).map(|m| m.0);
        let flipped = members.iter().find(|m| m.1).map(|m| m.0);
        // a * key == -a * (1 - key) + a
        let (j, weight, shift) = match (plain, flipped) {
            (Some(j), _) if a <= 0.0 => (j, a, 0.0),
            (_, Some(j)) => (j, -a, a),
            (Some(j), None) => (j, a, 0.0),
            (None, None) => unreachable!("group has members"),
        };
        for &(j, _) in members {
            w[j] = 0.0;
        }
        w[j] = weight;
        *intercept += c + shift;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierRule {
    pub candidate: RuleCandidate,
    pub weight: f64,
}

/// Negative-weight rules grouped into codes 1 (strongest) to 3 by |w|.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyTiers {
    pub tiers: BTreeMap<u8, Vec<TierRule>>,
    /// `|w|` lower bounds of tiers 1 and 2.
    pub tier_cutoffs: [f64; 2],
}

impl SafetyTiers {
    pub fn tier(&self, code: u8) -> &[TierRule] {
        self.tiers.get(&code).map_or(&[], Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.tiers.values().all(Vec::is_empty)
    }

    pub fn len(&self) -> usize {
        self.tiers.values().map(Vec::len).sum()
    }
}

pub fn extract_safety_tiers(model: &RuleModel) -> SafetyTiers {
    let mut safety: Vec<TierRule> = model
        .candidates
        .iter()
        .zip(&model.weights)
        .filter(|(_, &w)| w < 0.0)
        .map(|(c, &w)| TierRule {
            candidate: c.clone(),
            weight: w,
        })
        .collect();
    // strongest first; stable sort keeps candidate order among equals
    safety.sort_by(|a, b| b.weight.abs().total_cmp(&a.weight.abs()));

    let mut tiers: BTreeMap<u8, Vec<TierRule>> = (1..=3).map(|c| (c, Vec::new())).collect();
    if safety.is_empty() {
        return SafetyTiers {
            tiers,
            tier_cutoffs: [0.0, 0.0],
        };
    }
    let mut mags: Vec<f64> = safety.iter().map(|r| r.weight.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let cutoffs = if safety.len() < 3 {
        [mags[0], mags[0]]
    } else {
        [
            crate::binarizer::quantile_sorted(&mags, 2.0 / 3.0),
            crate::binarizer::quantile_sorted(&mags, 1.0 / 3.0),
        ]
    };
    for rule in safety {
        let m = rule.weight.abs();
        let code = if m >= cutoffs[0] {
            1
        } else if m >= cutoffs[1] {
            2
        } else {
            3
        };
        tiers.get_mut(&code).expect("tier present").push(rule);
    }
    SafetyTiers {
        tiers,
        tier_cutoffs: cutoffs,
    }
}
