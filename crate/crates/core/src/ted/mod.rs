//! Joint label + explanation classifier over Cartesian (y, e) classes.

mod metrics;

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binarizer::BinarizedMatrix;
use crate::error::{Error, Result};
use crate::ARTIFACT_VERSION;

pub use metrics::{f1, weighted_average, ClassMetrics, LabelReport, WeightedAverage};

/// Bijection between the (y, e) pairs seen at fit time and class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u8, u8)>", into = "Vec<(u8, u8)>")]
pub struct CartesianCodec {
    pairs: Vec<(u8, u8)>,
    index: BTreeMap<(u8, u8), usize>,
}

impl CartesianCodec {
    /// Pairs are sorted and deduplicated, so the index only depends on the
    /// set of pairs observed.
    pub fn from_observed(y: &[u8], e: &[u8]) -> Result<Self> {
        if y.len() != e.len() {
            return Err(Error::WidthMismatch {
                expected: y.len(),
                actual: e.len(),
            });
        }
        let mut pairs: Vec<(u8, u8)> = y.iter().copied().zip(e.iter().copied()).collect();
        pairs.sort_unstable();
        pairs.dedup();
        Self::try_from(pairs)
    }

    pub fn pairs(&self) -> &[(u8, u8)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn encode(&self, y: u8, e: u8) -> Result<usize> {
        self.index
            .get(&(y, e))
            .copied()
            .ok_or(Error::UnobservedPair { y, e })
    }

    pub fn decode(&self, class: usize) -> (u8, u8) {
        self.pairs[class]
    }
}

impl TryFrom<Vec<(u8, u8)>> for CartesianCodec {
    type Error = Error;

    /// Keeps the given order.
    fn try_from(pairs: Vec<(u8, u8)>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, &(y, e)) in pairs.iter().enumerate() {
            if y > 1 || !(1..=12).contains(&e) {
                return Err(Error::Artifact(format!("invalid class pair ({y}, {e})")));
            }
            if index.insert((y, e), i).is_some() {
                return Err(Error::Artifact(format!("duplicate class pair ({y}, {e})")));
            }
        }
        Ok(Self { pairs, index })
    }
}

impl From<CartesianCodec> for Vec<(u8, u8)> {
    fn from(codec: CartesianCodec) -> Self {
        codec.pairs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TedConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    /// Recorded for provenance; zero initialisation makes training seed-free.
    pub seed: u64,
}

impl Default for TedConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            epochs: 400,
            l2: 1e-4,
            seed: 0,
        }
    }
}

impl TedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "ted learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::Config(format!("ted l2 must be >= 0, got {}", self.l2)));
        }
        Ok(())
    }
}

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let ez = z.exp();
        ez / (1.0 + ez)
    }
}

/// Mean binary cross-entropy of `sigmoid(x·w + b)` against targets `t` in
/// {0, 1}, plus `l2/2 · ‖w‖²`. Returns the loss and its gradient in `w`
/// and `b`.
pub fn logistic_objective(
    x: &[Vec<f64>],
    t: &[f64],
    w: &[f64],
    b: f64,
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = x.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; w.len()];
    let mut grad_b = 0.0;
    for (row, &ti) in x.iter().zip(t) {
        let z = b + row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
        loss += log1p_exp(z) - ti * z;
        let g = sigmoid(z) - ti;
        grad_b += g;
        for (gw, a) in grad_w.iter_mut().zip(row) {
            *gw += g * a;
        }
    }
    loss /= n;
    grad_b /= n;
    for (gw, wi) in grad_w.iter_mut().zip(w) {
        *gw = *gw / n + l2 * wi;
    }
    loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    (loss, grad_w, grad_b)
}

/// Row-major centred design built from a binarized matrix.
struct Design {
    n: usize,
    m: usize,
    x: Vec<f64>,
    means: Vec<f64>,
}

impl Design {
    fn new(bm: &BinarizedMatrix) -> Self {
        let (n, m) = (bm.n_rows(), bm.n_cols());
        let mut means = vec![0.0; m];
        for i in 0..n {
            for (mu, &bit) in means.iter_mut().zip(bm.row(i)) {
                *mu += f64::from(u8::from(bit));
            }
        }
        for mu in &mut means {
            *mu /= n as f64;
        }
        let mut x = Vec::with_capacity(n * m);
        for i in 0..n {
            x.extend(
                bm.row(i)
                    .iter()
                    .zip(&means)
                    .map(|(&bit, mu)| f64::from(u8::from(bit)) - mu),
            );
        }
        Self { n, m, x, means }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.m..(i + 1) * self.m]
    }

    fn margins(&self, w: &[f64], b: f64, out: &mut [f64]) {
        for (i, z) in out.iter_mut().enumerate() {
            *z = b + self.row(i).iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
        }
    }

    fn loss(&self, t: &[bool], z: &[f64], w: &[f64], l2: f64) -> f64 {
        let data: f64 = z
            .iter()
            .zip(t)
            .map(|(&zi, &ti)| log1p_exp(zi) - if ti { zi } else { 0.0 })
            .sum();
        data / self.n as f64 + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn gradient(&self, t: &[bool], z: &[f64], w: &[f64], l2: f64) -> (Vec<f64>, f64) {
        let mut gw = vec![0.0; self.m];
        let mut gb = 0.0;
        for (i, (&zi, &ti)) in z.iter().zip(t).enumerate() {
            let g = sigmoid(zi) - f64::from(u8::from(ti));
            gb += g;
            for (acc, a) in gw.iter_mut().zip(self.row(i)) {
                *acc += g * a;
            }
        }
        let n = self.n as f64;
        for (acc, wi) in gw.iter_mut().zip(w) {
            *acc = *acc / n + l2 * wi;
        }
        (gw, gb / n)
    }
}

struct ClassFit {
    weights: Vec<f64>,
    bias: f64,
    losses: Vec<f64>,
}

/// Gradient descent from zero; a step that would raise the loss is halved
/// until it does not (and the smaller rate is kept), so losses never rise.
fn fit_class(design: &Design, t: &[bool], cfg: &TedConfig) -> ClassFit {
    let mut w = vec![0.0; design.m];
    let mut b = 0.0;
    let mut z = vec![0.0; design.n];
    design.margins(&w, b, &mut z);
    let mut loss = design.loss(t, &z, &w, cfg.l2);
    let mut lr = cfg.learning_rate;
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    losses.push(loss);
    let mut trial_w = vec![0.0; design.m];
    let mut trial_z = vec![0.0; design.n];
    for _ in 0..cfg.epochs {
        let (gw, gb) = design.gradient(t, &z, &w, cfg.l2);
        let mut accepted = false;
        for _ in 0..60 {
            for ((tw, wi), g) in trial_w.iter_mut().zip(&w).zip(&gw) {
                *tw = wi - lr * g;
            }
            let trial_b = b - lr * gb;
            design.margins(&trial_w, trial_b, &mut trial_z);
            let trial_loss = design.loss(t, &trial_z, &trial_w, cfg.l2);
            if trial_loss <= loss {
                std::mem::swap(&mut w, &mut trial_w);
                std::mem::swap(&mut z, &mut trial_z);
                b = trial_b;
                loss = trial_loss;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        losses.push(loss);
        if !accepted {
            break;
        }
    }
    // Fold the centring back in so scoring works on raw bits.
    let offset: f64 = w.iter().zip(&design.means).map(|(a, m)| a * m).sum();
    ClassFit {
        weights: w,
        bias: b - offset,
        losses,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TedModel {
    pub codec: CartesianCodec,
    /// One weight vector per class, over raw (uncentred) binarized columns.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub n_features: usize,
    pub config: TedConfig,
    /// Summed one-vs-rest training loss, index 0 at initialisation.
    #[serde(skip)]
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y: u8,
    pub e: u8,
    pub class: usize,
    pub scores: Vec<f64>,
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn fit(bm: &BinarizedMatrix, y: &[u8], e: &[u8], cfg: &TedConfig) -> Result<TedModel> {
    cfg.validate()?;
    if bm.n_rows() == 0 {
        return Err(Error::Empty("ted training data has no rows".into()));
    }
    for len in [y.len(), e.len()] {
        if len != bm.n_rows() {
            return Err(Error::WidthMismatch {
                expected: bm.n_rows(),
                actual: len,
            });
        }
    }
    let codec = CartesianCodec::from_observed(y, e)?;
    let classes: Vec<usize> = y
        .iter()
        .zip(e)
        .map(|(&yi, &ei)| codec.encode(yi, ei))
        .collect::<Result<_>>()?;
    for (k, &(py, pe)) in codec.pairs().iter().enumerate() {
        let count = classes.iter().filter(|&&c| c == k).count();
        if count < 2 {
            log::warn!("class ({py}, {pe}) has {count} training example(s)");
        }
    }

    let design = Design::new(bm);
    let fits: Vec<ClassFit> = (0..codec.len())
        .into_par_iter()
        .map(|k| {
            let t: Vec<bool> = classes.iter().map(|&c| c == k).collect();
            fit_class(&design, &t, cfg)
        })
        .collect();

    let epochs = fits.iter().map(|f| f.losses.len()).max().unwrap_or(0);
    let loss_history = (0..epochs)
        .map(|i| {
            fits.iter()
                .map(|f| f.losses[i.min(f.losses.len() - 1)])
                .sum()
        })
        .collect();
    let (weights, biases) = fits.into_iter().map(|f| (f.weights, f.bias)).unzip();
    Ok(TedModel {
        codec,
        weights,
        biases,
        n_features: bm.n_cols(),
        config: *cfg,
        loss_history,
    })
}

impl TedModel {
    pub fn scores(&self, row_bits: &[bool]) -> Result<Vec<f64>> {
        if row_bits.len() != self.n_features {
            return Err(Error::WidthMismatch {
                expected: self.n_features,
                actual: row_bits.len(),
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| {
                b + w
                    .iter()
                    .zip(row_bits)
                    .filter(|(_, &bit)| bit)
                    .map(|(wi, _)| wi)
                    .sum::<f64>()
            })
            .collect())
    }

    pub fn predict(&self, row_bits: &[bool]) -> Result<Prediction> {
        let scores = self.scores(row_bits)?;
        let class = argmax(&scores);
        let (y, e) = self.codec.decode(class);
        Ok(Prediction { y, e, class, scores })
    }

    pub fn predict_matrix(&self, bm: &BinarizedMatrix) -> Result<Vec<(u8, u8)>> {
        (0..bm.n_rows())
            .map(|i| self.predict(bm.row(i)).map(|p| (p.y, p.e)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TedArtifact {
            version: ARTIFACT_VERSION,
            kind: "ted".into(),
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: TedArtifact = serde_json::from_str(text)?;
        if a.kind != "ted" {
            return Err(Error::Artifact(format!("expected a ted artifact, found {:?}", a.kind)));
        }
        let m = a.model;
        if m.weights.len() != m.codec.len()
            || m.biases.len() != m.codec.len()
            || m.weights.iter().any(|w| w.len() != m.n_features)
        {
            return Err(Error::Artifact("ted weight shapes do not match codec".into()));
        }
        if m.weights.iter().flatten().chain(&m.biases).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ted weights".into()));
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct TedArtifact {
    version: u32,
    kind: String,
    #[serde(flatten)]
    model: TedModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub y_accuracy: f64,
    pub e_accuracy: f64,
    pub ye_accuracy: f64,
    pub label: LabelReport,
}

impl EvalReport {
    pub fn from_predictions(y: &[u8], e: &[u8], predicted: &[(u8, u8)]) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Empty("evaluation set has no rows".into()));
        }
        if e.len() != n || predicted.len() != n {
            return Err(Error::WidthMismatch {
                expected: n,
                actual: e.len().min(predicted.len()),
            });
        }
        let (mut y_hits, mut e_hits, mut both) = (0usize, 0usize, 0usize);
        for i in 0..n {
            let (py, pe) = predicted[i];
            let (ok_y, ok_e) = (py == y[i], pe == e[i]);
            y_hits += usize::from(ok_y);
            e_hits += usize::from(ok_e);
            both += usize::from(ok_y && ok_e);
        }
        let y_pred: Vec<u8> = predicted.iter().map(|p| p.0).collect();
        Ok(Self {
            n,
            y_accuracy: y_hits as f64 / n as f64,
            e_accuracy: e_hits as f64 / n as f64,
            ye_accuracy: both as f64 / n as f64,
            label: LabelReport::from_predictions(y, &y_pred),
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows        {}", self.n)?;
        writeln!(f, "Y accuracy  {:.4}", self.y_accuracy)?;
        writeln!(f, "E accuracy  {:.4}", self.e_accuracy)?;
        writeln!(f, "Y+E accuracy {:.4}", self.ye_accuracy)?;
        writeln!(f)?;
        write!(f, "{}", self.label)
    }
}

pub fn evaluate(model: &TedModel, bm: &BinarizedMatrix, y: &[u8], e: &[u8]) -> Result<EvalReport> {
    if bm.n_rows() == 0 {
        return Err(Error::Empty("evaluation set has no rows".into()));
    }
    let predicted = model.predict_matrix(bm)?;
    EvalReport::from_predictions(y, e, &predicted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binarizer::{AtomicPredicate, Comparator};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[Vec<bool>]) -> BinarizedMatrix {
        let cols = (0..rows[0].len())
            .map(|j| AtomicPredicate::numeric(format!("f{j}"), Comparator::Gt, 0.0))
            .collect();
        BinarizedMatrix::from_rows(cols, rows).unwrap()
    }

    #[test]
    fn codec_examples() {
        let codec = CartesianCodec::from_observed(&[1, 0, 1, 0, 1], &[12, 2, 4, 1, 4]).unwrap();
        assert_eq!(codec.pairs(), &[(0, 1), (0, 2), (1, 4), (1, 12)]);
        assert_eq!(codec.encode(1, 4).unwrap(), 2);
        assert_eq!(codec.decode(0), (0, 1));
        assert!(matches!(codec.encode(1, 5), Err(Error::UnobservedPair { y: 1, e: 5 })));
        for (k, &(y, e)) in codec.pairs().iter().enumerate() {
            assert_eq!(codec.encode(y, e).unwrap(), k);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 2.0, 1.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }

    #[test]
    fn separable_toy() {
        let bm = matrix(&[
            vec![true, false],
            vec![true, false],
            vec![false, true],
            vec![false, true],
        ]);
        let y = [0, 0, 1, 1];
        let e = [1, 1, 4, 4];
        let model = fit(&bm, &y, &e, &TedConfig::default()).unwrap();
        let report = evaluate(&model, &bm, &y, &e).unwrap();
        assert_eq!(report.ye_accuracy, 1.0);
        let p = model.predict(&[false, true]).unwrap();
        assert_eq!((p.y, p.e), (1, 4));
        assert!(model.loss_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn single_class_is_constant() {
        let bm = matrix(&[vec![true, false], vec![false, true], vec![false, false]]);
        let model = fit(&bm, &[1, 1, 1], &[12, 12, 12], &TedConfig::default()).unwrap();
        assert_eq!(model.codec.len(), 1);
        let report = evaluate(&model, &bm, &[1, 1, 1], &[12, 12, 12]).unwrap();
        assert_eq!(report.ye_accuracy, 1.0);
    }

    #[test]
    fn errors() {
        let bm = matrix(&[vec![true], vec![false]]);
        assert!(matches!(
            fit(&bm, &[0], &[1], &TedConfig::default()),
            Err(Error::WidthMismatch { .. })
        ));
        let model = fit(&bm, &[0, 1], &[1, 12], &TedConfig::default()).unwrap();
        assert!(matches!(
            model.predict(&[true, false]),
            Err(Error::WidthMismatch { expected: 1, actual: 2 })
        ));
        assert!(EvalReport::from_predictions(&[], &[], &[]).is_err());
    }

    #[test]
    fn perfect_predictor_report() {
        let r = EvalReport::from_predictions(&[0, 1, 1], &[1, 4, 12], &[(0, 1), (1, 4), (1, 12)])
            .unwrap();
        assert_eq!((r.y_accuracy, r.e_accuracy, r.ye_accuracy), (1.0, 1.0, 1.0));
    }

    #[test]
    fn centred_training_matches_dense_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<bool>> = (0..30).map(|_| (0..5).map(|_| rng.gen()).collect()).collect();
        let bm = matrix(&rows);
        let t: Vec<bool> = (0..30).map(|_| rng.gen()).collect();
        let design = Design::new(&bm);
        let cfg = TedConfig {
            epochs: 20,
            ..TedConfig::default()
        };
        let fit = fit_class(&design, &t, &cfg);
        let dense: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|&b| f64::from(u8::from(b))).collect())
            .collect();
        let tf: Vec<f64> = t.iter().map(|&b| f64::from(u8::from(b))).collect();
        let (loss, _, _) = logistic_objective(&dense, &tf, &fit.weights, fit.bias, cfg.l2);
        assert!((loss - fit.losses.last().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let bm = matrix(&[vec![true, false], vec![false, true], vec![true, true]]);
        let model = fit(&bm, &[0, 1, 1], &[1, 4, 12], &TedConfig::default()).unwrap();
        let back = TedModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back.weights, model.weights);
        assert_eq!(back.codec, model.codec);
        assert!(model.to_json().unwrap().contains("\"version\""));
    }
}
