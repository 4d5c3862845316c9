use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rulefuse::data::{generate_synthetic, PlantedStructure, SynthConfig};
use rulefuse::explain::Precedence;
use rulefuse::pipeline::{self, PipelineConfig, PipelineReport, Stage, StageError};
use rulefuse::Error;

#[derive(Parser)]
#[command(name = "rulefuse", version, about = "Hybrid rule regression + explanation-supervised churn classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted rule structure.
    Synth(SynthArgs),
    /// Run the full pipeline once.
    Run(RunArgs),
    /// Run the pipeline once per expert rule subset.
    Frontier(FrontierArgs),
    /// Pretty-print a JSON artifact.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_rows: Option<usize>,
    #[arg(long)]
    churn_rate: Option<f64>,
    #[arg(long)]
    n_safety_patterns: Option<usize>,
    #[arg(long)]
    n_risk_disjuncts: Option<usize>,
    #[arg(long)]
    risk_disjunct_coverage: Option<f64>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    n_quantiles: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    max_degree: Option<usize>,
    #[arg(long)]
    max_pairs: Option<usize>,
    #[arg(long)]
    min_coverage: Option<f64>,
    #[arg(long)]
    max_jaccard: Option<f64>,
    #[arg(long, value_parser = parse_precedence)]
    precedence: Option<Precedence>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    ted_seed: Option<u64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: PipelineArgs,
    #[arg(long)]
    rules: Option<PathBuf>,
}

#[derive(Args)]
struct FrontierArgs {
    #[command(flatten)]
    common: PipelineArgs,
    /// `name=path` of an expert rule file; repeat for each row.
    #[arg(long = "subset", value_parser = parse_subset)]
    subsets: Vec<(String, PathBuf)>,
}

fn parse_precedence(s: &str) -> Result<Precedence, String> {
    match s {
        "risk_first" => Ok(Precedence::RiskFirst),
        "safety_first" => Ok(Precedence::SafetyFirst),
        _ => Err(format!("expected risk_first or safety_first, got `{s}`")),
    }
}

fn parse_subset(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected name=path, got `{s}`")),
    }
}

fn config_error(source: Error) -> StageError {
    StageError {
        stage: Stage::Config,
        source,
    }
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig, StageError> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path).map_err(config_error)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$($field).+ = v.into(); })*
            };
        }
        set!(
            data => data,
            schema => schema,
            n_quantiles => n_quantiles,
            tol => lrr.tol,
            max_iters => lrr.max_iters,
            max_degree => lrr.max_degree,
            max_pairs => lrr.max_pairs,
            min_coverage => pareto.min_coverage,
            max_jaccard => pareto.max_jaccard,
            precedence => precedence,
            learning_rate => ted.learning_rate,
            epochs => ted.epochs,
            l2 => ted.l2,
            ted_seed => ted.seed,
            test_fraction => split.test_fraction,
            split_seed => split.seed,
        );
        if self.lambda1.is_some() {
            cfg.lrr.lambda1 = self.lambda1;
        }
        if self.lambda2.is_some() {
            cfg.lrr.lambda2 = self.lambda2;
        }
        Ok(cfg)
    }
}

fn print_report(report: &PipelineReport) {
    println!(
        "expert rules kept: {}  safety rules: {}  classes: {}",
        report.rule_count,
        report.safety_rule_count,
        report.classes.len()
    );
    println!("\n[train]\n{}", report.train);
    println!("\n[test]\n{}", report.test);
}

fn synth(args: &SynthArgs) -> Result<(), StageError> {
    let mut cfg = match &args.config {
        Some(path) => fs::read_to_string(path)
            .map_err(Error::from)
            .and_then(|text| serde_json::from_str::<SynthConfig>(&text).map_err(Error::from))
            .map_err(config_error)?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { cfg.$field = v; })* };
    }
    set!(n_rows, churn_rate, n_safety_patterns, n_risk_disjuncts, risk_disjunct_coverage, noise_rate, seed);
    cfg.validate().map_err(config_error)?;

    let (ds, truth) = generate_synthetic(&cfg).map_err(|source| StageError {
        stage: Stage::Data,
        source,
    })?;
    let planted = PlantedStructure::for_config(&cfg);
    let write = |out: &Path| -> rulefuse::Result<()> {
        fs::create_dir_all(out)?;
        ds.write_csv(fs::File::create(out.join("data.csv"))?)?;
        fs::write(
            out.join("schema.json"),
            serde_json::to_string_pretty(&ds.schema().to_sidecar())?,
        )?;
        truth.write_csv(fs::File::create(out.join("truth.csv"))?)?;
        fs::write(out.join("planted.rules"), planted.risk_rules_source())?;
        Ok(())
    };
    write(&args.out).map_err(|source| StageError {
        stage: Stage::Write,
        source,
    })?;
    println!(
        "wrote {} rows ({} churn) to {}",
        ds.len(),
        ds.churn_count(),
        args.out.display()
    );
    Ok(())
}

fn inspect(path: &Path) -> Result<(), StageError> {
    let read = || -> rulefuse::Result<String> {
        let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
        if value.get("kind").and_then(|k| k.as_str()) == Some("report") {
            let report: PipelineReport = serde_json::from_value(value)?;
            return Ok(format!("[train]\n{}\n\n[test]\n{}", report.train, report.test));
        }
        Ok(serde_json::to_string_pretty(&value)?)
    };
    let text = read().map_err(config_error)?;
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => synth(args),
        Command::Run(args) => args.common.resolve().and_then(|mut cfg| {
            if args.rules.is_some() {
                cfg.rules = args.rules.clone();
            }
            pipeline::run_pipeline(&cfg, &args.common.out).map(|r| print_report(&r))
        }),
        Command::Frontier(args) => args.common.resolve().and_then(|cfg| {
            pipeline::run_frontier(&cfg, &args.subsets, &args.common.out).map(|rows| {
                println!("configuration,rule_count,y_acc,e_acc,ye_acc");
                for r in rows {
                    println!(
                        "{},{},{:.4},{:.4},{:.4}",
                        r.configuration, r.rule_count, r.y_acc, r.e_acc, r.ye_acc
                    );
                }
            })
        }),
        Command::Inspect { path } => inspect(path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
