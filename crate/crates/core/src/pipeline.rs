//! End-to-end orchestration: data, binarize, rule regression, expert rules,
//! selection, explanations, joint classifier, evaluation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binarizer::{BinarizedMatrix, BinarizerModel, DEFAULT_N_QUANTILES};
use crate::data::{self, Dataset, FeatureSchema};
use crate::error::{Error, Result};
use crate::explain::{ExplanationVector, Explainer, Precedence};
use crate::lrr::{self, RuleMatrix, RuleModel, SafetyTiers};
use crate::pareto::{self, SelectionReport};
use crate::ruledsl::{self, RiskRuleSet};
use crate::ted::{self, EvalReport, TedConfig, TedModel};
use crate::ARTIFACT_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrrSettings {
    /// `None` picks the data-dependent default.
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub tol: f64,
    pub max_iters: usize,
    pub max_degree: usize,
    pub max_pairs: usize,
}

impl Default for LrrSettings {
    fn default() -> Self {
        Self {
            lambda1: None,
            lambda2: None,
            tol: lrr::DEFAULT_TOL,
            max_iters: lrr::DEFAULT_MAX_ITERS,
            max_degree: 2,
            max_pairs: lrr::DEFAULT_MAX_PAIRS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParetoSettings {
    pub min_coverage: f64,
    pub max_jaccard: f64,
}

impl Default for ParetoSettings {
    fn default() -> Self {
        Self {
            min_coverage: pareto::DEFAULT_MIN_COVERAGE,
            max_jaccard: pareto::DEFAULT_MAX_JACCARD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: PathBuf,
    pub schema: PathBuf,
    /// No file means no expert rules.
    pub rules: Option<PathBuf>,
    pub n_quantiles: usize,
    pub lrr: LrrSettings,
    pub pareto: ParetoSettings,
    pub precedence: Precedence,
    pub ted: TedConfig,
    pub split: SplitSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data.csv"),
            schema: PathBuf::from("schema.json"),
            rules: None,
            n_quantiles: DEFAULT_N_QUANTILES,
            lrr: LrrSettings::default(),
            pareto: ParetoSettings::default(),
            precedence: Precedence::default(),
            ted: TedConfig::default(),
            split: SplitSettings::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data = base.join(&cfg.data);
        cfg.schema = base.join(&cfg.schema);
        cfg.rules = cfg.rules.map(|r| base.join(r));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let files = [Some(&self.data), Some(&self.schema), self.rules.as_ref()];
        for path in files.into_iter().flatten() {
            if !path.is_file() {
                return Err(Error::Config(format!("{} does not exist", path.display())));
            }
        }
        if self.n_quantiles == 0 {
            return Err(Error::Config("n_quantiles must be at least 1".into()));
        }
        for (name, v) in [("lambda1", self.lrr.lambda1), ("lambda2", self.lrr.lambda2)] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
                }
            }
        }
        if !(self.lrr.tol > 0.0) {
            return Err(Error::Config("lrr tol must be positive".into()));
        }
        if !(1..=2).contains(&self.lrr.max_degree) {
            return Err(Error::Config("lrr max_degree must be 1 or 2".into()));
        }
        for (name, v) in [
            ("min_coverage", self.pareto.min_coverage),
            ("max_jaccard", self.pareto.max_jaccard),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.split.test_fraction
            )));
        }
        self.ted.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Split,
    Binarize,
    Lrr,
    Rules,
    Pareto,
    Explain,
    Ted,
    Evaluate,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Split => "split",
            Stage::Binarize => "binarize",
            Stage::Lrr => "lrr",
            Stage::Rules => "rules",
            Stage::Pareto => "pareto",
            Stage::Explain => "explain",
            Stage::Ted => "ted",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    /// 2 for bad configuration or rule files, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.stage == Stage::Config || self.stage == Stage::Rules || self.source.is_input_error()
        {
            2
        } else {
            1
        }
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub version: u32,
    pub kind: String,
    pub rule_count: usize,
    pub safety_rule_count: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub train_rows: usize,
    pub test_rows: usize,
    pub classes: Vec<(u8, u8)>,
    pub test: EvalReport,
    pub train: EvalReport,
}

/// Everything up to and including the safety tiers; independent of the
/// expert rules.
pub struct Prepared {
    pub config: PipelineConfig,
    pub dataset: Dataset,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub binarizer: BinarizerModel,
    pub train_bits: BinarizedMatrix,
    pub test_bits: BinarizedMatrix,
    pub rule_model: RuleModel,
    pub tiers: SafetyTiers,
}

pub struct PipelineOutput {
    pub report: PipelineReport,
    pub selection: SelectionReport,
    pub explanations: ExplanationVector,
    pub ted: TedModel,
}

pub fn prepare(cfg: &PipelineConfig) -> StageResult<Prepared> {
    cfg.validate().at(Stage::Config)?;
    let schema = FeatureSchema::load(&cfg.schema).at(Stage::Config)?;
    let dataset = data::load_csv(&cfg.data, &schema).at(Stage::Data)?;
    let (train_idx, test_idx) =
        data::split_indices(&dataset, cfg.split.test_fraction, cfg.split.seed).at(Stage::Split)?;
    let train = dataset.subset(&train_idx);
    let test = dataset.subset(&test_idx);

    let binarizer = BinarizerModel::fit(&train, cfg.n_quantiles).at(Stage::Binarize)?;
    let train_bits = binarizer.binarize(&train).at(Stage::Binarize)?;
    let test_bits = binarizer.binarize(&test).at(Stage::Binarize)?;

    let candidates = lrr::enumerate_candidates(
        &train_bits,
        train.labels(),
        cfg.lrr.max_degree,
        cfg.lrr.max_pairs,
    )
    .at(Stage::Lrr)?;
    let rm = RuleMatrix::evaluate(&train_bits, &candidates);
    let y: Vec<f64> = train.labels().iter().map(|&l| f64::from(l)).collect();
    let (d1, d2) = lrr::default_lambdas(&y, &rm);
    let opts = lrr::FitOptions {
        lambda1: cfg.lrr.lambda1.unwrap_or(d1),
        lambda2: cfg.lrr.lambda2.unwrap_or(d2),
        tol: cfg.lrr.tol,
        max_iters: cfg.lrr.max_iters,
    };
    let rule_model = lrr::fit(&y, &rm, &candidates, opts).at(Stage::Lrr)?;
    if !rule_model.converged {
        log::warn!(
            "rule regression stopped after {} sweeps without converging",
            rule_model.iterations
        );
    }
    let tiers = lrr::extract_safety_tiers(&rule_model);

    Ok(Prepared {
        config: cfg.clone(),
        dataset,
        train_idx,
        test_idx,
        binarizer,
        train_bits,
        test_bits,
        rule_model,
        tiers,
    })
}

impl Prepared {
    pub fn load_rules(path: Option<&Path>) -> StageResult<RiskRuleSet> {
        match path {
            Some(p) => ruledsl::load(p).at(Stage::Rules),
            None => Ok(RiskRuleSet::empty()),
        }
    }

    /// Runs the rule-dependent stages for one expert rule set.
    pub fn finish(&self, rules: &RiskRuleSet) -> StageResult<PipelineOutput> {
        let cfg = &self.config;
        rules.bind(self.dataset.schema()).at(Stage::Rules)?;
        let train = self.dataset.subset(&self.train_idx);
        let selection = pareto::select(
            rules,
            &train,
            cfg.pareto.min_coverage,
            cfg.pareto.max_jaccard,
        )
        .at(Stage::Pareto)?;
        let kept = selection.kept_rules(rules);

        let explanations = Explainer::new(&self.tiers, &self.binarizer, &kept)
            .with_precedence(cfg.precedence)
            .build_matrix(&self.dataset)
            .at(Stage::Explain)?;
        let e_train = explanations.subset(&self.train_idx);
        let e_test = explanations.subset(&self.test_idx);
        let y_train: Vec<u8> = train.labels().to_vec();
        let y_test: Vec<u8> = self.test_idx.iter().map(|&i| self.dataset.labels()[i]).collect();

        let ted = ted::fit(&self.train_bits, &y_train, e_train.codes(), &cfg.ted).at(Stage::Ted)?;
        let test = ted::evaluate(&ted, &self.test_bits, &y_test, e_test.codes())
            .at(Stage::Evaluate)?;
        let train_report = ted::evaluate(&ted, &self.train_bits, &y_train, e_train.codes())
            .at(Stage::Evaluate)?;

        let report = PipelineReport {
            version: ARTIFACT_VERSION,
            kind: "report".into(),
            rule_count: kept.len(),
            safety_rule_count: self.tiers.len(),
            lambda1: self.rule_model.lambda1,
            lambda2: self.rule_model.lambda2,
            train_rows: self.train_idx.len(),
            test_rows: self.test_idx.len(),
            classes: ted.codec.pairs().to_vec(),
            test,
            train: train_report,
        };
        Ok(PipelineOutput {
            report,
            selection,
            explanations,
            ted,
        })
    }

    /// Writes the fixed artifact layout into `out`.
    pub fn write(&self, output: &PipelineOutput, out: &Path) -> StageResult<()> {
        let write = || -> Result<()> {
            fs::create_dir_all(out)?;
            fs::write(out.join("binarizer.json"), self.binarizer.to_json()?)?;
            fs::write(out.join("lrr.json"), self.rule_model.to_json()?)?;
            fs::write(out.join("selection.json"), output.selection.to_json()?)?;
            output
                .explanations
                .write_csv(fs::File::create(out.join("explanations.csv"))?)?;
            fs::write(out.join("ted.json"), output.ted.to_json()?)?;
            fs::write(
                out.join("report.json"),
                serde_json::to_string_pretty(&output.report)?,
            )?;
            Ok(())
        };
        write().at(Stage::Write)
    }
}

pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> StageResult<PipelineReport> {
    let prepared = prepare(cfg)?;
    let rules = Prepared::load_rules(cfg.rules.as_deref())?;
    let output = prepared.finish(&rules)?;
    prepared.write(&output, out)?;
    Ok(output.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub configuration: String,
    pub rule_count: usize,
    pub y_acc: f64,
    pub e_acc: f64,
    pub ye_acc: f64,
}

/// One pipeline per `(name, rules file)` on the same split, each written to
/// `out/<name>/`, plus `out/frontier.csv`. Held-out accuracies are reported.
pub fn run_frontier(
    cfg: &PipelineConfig,
    subsets: &[(String, PathBuf)],
    out: &Path,
) -> StageResult<Vec<FrontierRow>> {
    if subsets.len() < 2 {
        return Err(StageError {
            stage: Stage::Config,
            source: Error::Config(format!(
                "frontier needs at least 2 rule subsets, got {}",
                subsets.len()
            )),
        });
    }
    let mut names: Vec<&str> = subsets.iter().map(|(n, _)| n.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(StageError {
            stage: Stage::Config,
            source: Error::Config("frontier subset names must be unique".into()),
        });
    }
    let rule_sets = subsets
        .iter()
        .map(|(_, path)| Prepared::load_rules(Some(path)))
        .collect::<StageResult<Vec<_>>>()?;
    let prepared = prepare(cfg)?;

    let mut rows = Vec::with_capacity(subsets.len());
    for ((name, _), rules) in subsets.iter().zip(&rule_sets) {
        let output = prepared.finish(rules)?;
        prepared.write(&output, &out.join(name))?;
        let t = &output.report.test;
        rows.push(FrontierRow {
            configuration: name.clone(),
            rule_count: output.report.rule_count,
            y_acc: t.y_accuracy,
            e_acc: t.e_accuracy,
            ye_acc: t.ye_accuracy,
        });
    }

    let write = || -> Result<()> {
        let mut w = csv::Writer::from_path(out.join("frontier.csv"))?;
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    };
    write().at(Stage::Write)?;
    Ok(rows)
}
