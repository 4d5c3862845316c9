//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rulefuse::binarizer::{AtomicPredicate, BinarizerModel, Comparator, DEFAULT_N_QUANTILES};
use rulefuse::data::{generate_synthetic, Dataset, PlantedStructure, SynthConfig};
use rulefuse::lrr::{self, FitOptions, RuleCandidate, RuleMatrix};
use rulefuse::pareto::{self, jaccard, DropReason};
use rulefuse::pipeline::{self, ParetoSettings, PipelineConfig};
use rulefuse::ruledsl;
use rulefuse::ted::{self, EvalReport};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rules_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../rules")
}

fn within(limit: Duration, started: Instant) -> (bool, String) {
    let took = started.elapsed();
    (took < limit, format!("{:.2}s (limit {}s)", took.as_secs_f64(), limit.as_secs()))
}

fn atom_rows(ds: &Dataset, atom: &AtomicPredicate) -> BTreeSet<usize> {
    ds.records()
        .enumerate()
        .filter(|(_, r)| atom.evaluate(r).unwrap())
        .map(|(i, _)| i)
        .collect()
}

fn lrr_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for _ in 0..100 {
        let n = rng.gen_range(4..60);
        let x: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let complexity = rng.gen_range(2..4);
        let (l1, l2) = (rng.gen_range(0.0..2.0), rng.gen_range(0.0..1.0));
        let cand = RuleCandidate {
            columns: vec![0],
            atoms: vec![AtomicPredicate::numeric("x", Comparator::Gt, 0.0)],
            complexity,
        };
        let rm = RuleMatrix::from_columns(vec![x.clone()]).unwrap();
        let model = lrr::fit(
            &y,
            &rm,
            &[cand],
            FitOptions {
                lambda1: l1,
                lambda2: l2,
                tol: 1e-12,
                max_iters: 100,
            },
        )
        .unwrap();

        let xm = x.iter().sum::<f64>() / n as f64;
        let ym = y.iter().sum::<f64>() / n as f64;
        let xc: Vec<f64> = x.iter().map(|v| v - xm).collect();
        let xtx: f64 = xc.iter().map(|v| v * v).sum();
        let rho: f64 = xc.iter().zip(&y).map(|(a, b)| a * (b - ym)).sum();
        let expected = if xtx == 0.0 {
            0.0
        } else {
            lrr::soft_threshold(rho, l1 + l2 * complexity as f64) / xtx
        };
        worst = worst.max((model.weights[0] - expected).abs());
        monotone &= model.history.windows(2).all(|w| w[1] <= w[0]);
    }
    let (fast, time) = within(Duration::from_secs(5), started);
    outcome(
        worst <= 1e-8 && monotone && fast,
        format!("max |w - closed form| = {worst:.2e}, objective monotone: {monotone}, {time}"),
    )
}

fn kkt_certificate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, k) = (500, 50);
    let cols: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let p = rng.gen_range(0.1..0.6);
            (0..n).map(|_| f64::from(u8::from(rng.gen_bool(p)))).collect()
        })
        .collect();
    let truth: Vec<f64> = (0..k)
        .map(|j| if j % 7 == 0 { rng.gen_range(-1.0..1.0) } else { 0.0 })
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let signal: f64 = (0..k).map(|j| cols[j][i] * truth[j]).sum();
            signal + rng.gen_range(-0.3..0.3)
        })
        .collect();
    let cands: Vec<RuleCandidate> = (0..k)
        .map(|j| RuleCandidate {
            columns: vec![j],
            atoms: vec![AtomicPredicate::numeric(format!("x{j}"), Comparator::Gt, 0.0)],
            complexity: 2 + j % 2,
        })
        .collect();
    let rm = RuleMatrix::from_columns(cols).unwrap();
    let tol = lrr::DEFAULT_TOL;
    let (l1, l2) = (2.0, 1.0);
    let model = lrr::fit(
        &y,
        &rm,
        &cands,
        FitOptions {
            lambda1: l1,
            lambda2: l2,
            tol: 1e-10,
            max_iters: 10_000,
        },
    )
    .unwrap();
    let grad = lrr::smooth_gradient(&y, &rm, &model).unwrap();
    let mut worst_slack = f64::NEG_INFINITY;
    let mut zeros = 0;
    for ((g, w), c) in grad.iter().zip(&model.weights).zip(&cands) {
        if *w == 0.0 {
            zeros += 1;
            worst_slack = worst_slack.max(g.abs() - (l1 + l2 * c.complexity as f64));
        }
    }
    outcome(
        model.converged && zeros > 0 && worst_slack <= tol,
        format!(
            "{zeros} zero coordinates, max |g| - threshold = {worst_slack:.3e} (tol {tol:e}), converged: {}",
            model.converged
        ),
    )
}

fn safety_biased_discovery() -> Outcome {
    let started = Instant::now();
    let cfg = SynthConfig {
        n_safety_patterns: 2,
        n_risk_disjuncts: 8,
        risk_disjunct_coverage: 0.015,
        noise_rate: 0.0,
        ..SynthConfig::default()
    };
    let (ds, truth) = generate_synthetic(&cfg).unwrap();
    let planted = PlantedStructure::for_config(&cfg);
    let bm_model = BinarizerModel::fit(&ds, DEFAULT_N_QUANTILES).unwrap();
    let bm = bm_model.binarize(&ds).unwrap();
    let cands = lrr::enumerate_candidates(&bm, ds.labels(), 2, lrr::DEFAULT_MAX_PAIRS).unwrap();
    let rm = RuleMatrix::evaluate(&bm, &cands);
    let y: Vec<f64> = ds.labels().iter().map(|&l| f64::from(l)).collect();
    let (l1, l2) = lrr::default_lambdas(&y, &rm);
    let model = lrr::fit(
        &y,
        &rm,
        &cands,
        FitOptions {
            lambda1: l1,
            lambda2: l2,
            tol: lrr::DEFAULT_TOL,
            max_iters: lrr::DEFAULT_MAX_ITERS,
        },
    )
    .unwrap();

    let nonzero: Vec<(usize, f64)> = model
        .weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w != 0.0)
        .map(|(j, w)| (j, *w))
        .collect();
    let negative = nonzero.iter().filter(|(_, w)| *w < 0.0).count();
    let neg_frac = negative as f64 / nonzero.len().max(1) as f64;

    // A planted atom counts as recovered when some negative-weight rule
    // contains an atom on the same feature that selects nearly the same rows
    // (`autopay != "no"` recovers `autopay == "yes"`).
    let column_rows: Vec<BTreeSet<usize>> = (0..bm.n_cols())
        .map(|c| bm.column_rows(c).into_iter().collect())
        .collect();
    let planted_atoms: Vec<&AtomicPredicate> = planted.safety_patterns.iter().flatten().collect();
    let recovered = planted_atoms
        .iter()
        .filter(|atom| {
            let rows = atom_rows(&ds, atom);
            nonzero.iter().filter(|(_, w)| *w < 0.0).any(|&(j, _)| {
                cands[j].columns.iter().any(|&c| {
                    let col = &bm.columns()[c];
                    col.feature == atom.feature && jaccard(&column_rows[c], &rows) >= 0.8
                })
            })
        })
        .count();
    let atom_frac = recovered as f64 / planted_atoms.len() as f64;

    // A positive rule is dedicated to a disjunct when most rows it fires
    // on belong to that disjunct.
    let dedicated: BTreeSet<u8> = nonzero
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .filter_map(|&(j, _)| {
            let rows: Vec<usize> = (0..bm.n_rows()).filter(|&i| cands[j].matches(bm.row(i))).collect();
            planted.risks.iter().map(|r| r.code).find(|&code| {
                let hits = rows.iter().filter(|&&i| truth.codes()[i] == code).count();
                !rows.is_empty() && hits * 2 > rows.len()
            })
        })
        .collect();
    let (fast, time) = within(Duration::from_secs(30), started);
    outcome(
        neg_frac >= 0.7 && atom_frac >= 0.9 && dedicated.len() * 2 < planted.risks.len() && fast,
        format!(
            "{negative}/{} nonzero rules negative ({:.0}%), planted safety atoms recovered {recovered}/{} , disjuncts with a dedicated positive rule {}/{}, {time}",
            nonzero.len(),
            neg_frac * 100.0,
            planted_atoms.len(),
            dedicated.len(),
            planted.risks.len()
        ),
    )
}

struct Oracle {
    _dir: tempfile::TempDir,
    config: PipelineConfig,
}

fn frontier_oracle() -> Oracle {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        noise_rate: 0.05,
        ..SynthConfig::default()
    };
    let (ds, _) = generate_synthetic(&cfg).unwrap();
    ds.write_csv(fs::File::create(dir.path().join("data.csv")).unwrap())
        .unwrap();
    fs::write(
        dir.path().join("schema.json"),
        serde_json::to_string(&ds.schema().to_sidecar()).unwrap(),
    )
    .unwrap();
    let config = PipelineConfig {
        data: dir.path().join("data.csv"),
        schema: dir.path().join("schema.json"),
        ..PipelineConfig::default()
    };
    Oracle { _dir: dir, config }
}

fn efficiency_frontier(oracle: &Oracle, evals: &mut Vec<EvalReport>) -> Outcome {
    let started = Instant::now();
    let out = tempfile::tempdir().unwrap();
    // every row keeps its full rule file, as in the hand-written baselines
    let cfg = PipelineConfig {
        pareto: ParetoSettings {
            min_coverage: 0.0,
            max_jaccard: 1.0,
        },
        ..oracle.config.clone()
    };
    let subsets: Vec<(String, PathBuf)> = ["none", "golden4", "manual8"]
        .iter()
        .map(|n| (n.to_string(), rules_dir().join(format!("{n}.rules"))))
        .collect();
    let rows = pipeline::run_frontier(&cfg, &subsets, out.path()).unwrap();
    for name in ["none", "golden4", "manual8"] {
        let text = fs::read_to_string(out.path().join(name).join("report.json")).unwrap();
        let report: pipeline::PipelineReport = serde_json::from_str(&text).unwrap();
        evals.push(report.test);
        evals.push(report.train);
    }
    let (none, golden, manual) = (&rows[0], &rows[1], &rows[2]);
    let (fast, time) = within(Duration::from_secs(120), started);
    outcome(
        golden.ye_acc >= none.ye_acc + 0.10 && golden.ye_acc >= manual.ye_acc - 0.02 && fast,
        format!(
            "held-out Y+E: 0 rules {:.4}, golden-4 ({} rules) {:.4}, manual-8 ({} rules) {:.4}, {time}",
            none.ye_acc, golden.rule_count, golden.ye_acc, manual.rule_count, manual.ye_acc
        ),
    )
}

fn jaccard_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let to_set = |mask: u32| -> BTreeSet<usize> { (0..10).filter(|b| mask >> b & 1 == 1).collect() };
    let mut checked = 0;
    let mut ok = true;
    for a in 0u32..1024 {
        for b in 0u32..1024 {
            if !rng.gen_bool(0.01) {
                continue;
            }
            checked += 1;
            let (sa, sb) = (to_set(a), to_set(b));
            let inter = (a & b).count_ones();
            let union = (a | b).count_ones();
            let brute = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            let j = jaccard(&sa, &sb);
            ok &= j == brute && j == jaccard(&sb, &sa) && (0.0..=1.0).contains(&j);
            if !sa.is_empty() {
                ok &= jaccard(&sa, &sa) == 1.0;
            }
            if a & b == 0 {
                ok &= j == 0.0;
            }
        }
    }
    outcome(ok, format!("{checked} sampled pairs, all exact: {ok}"))
}

fn pareto_filter(oracle: &Oracle) -> Outcome {
    let schema = rulefuse::data::FeatureSchema::load(&oracle.config.schema).unwrap();
    let ds = rulefuse::data::load_csv(&oracle.config.data, &schema).unwrap();
    let rules = ruledsl::load(rules_dir().join("manual8.rules")).unwrap();
    let report = pareto::select(
        &rules,
        &ds,
        pareto::DEFAULT_MIN_COVERAGE,
        pareto::DEFAULT_MAX_JACCARD,
    )
    .unwrap();
    let mut kept = report.kept_names();
    kept.sort();
    let expected = ["gone_quiet", "late_payer", "plan_hopper", "support_escalation"];

    let churn: BTreeSet<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == 1).collect();
    let match_set = |name: &str| -> BTreeSet<usize> {
        let rule = rules.rules().iter().find(|r| r.name == name).unwrap();
        ds.records()
            .enumerate()
            .filter(|(_, r)| rule.evaluate(r).unwrap())
            .map(|(i, _)| i)
            .collect()
    };
    let reasons_ok = report.dropped.iter().all(|d| match &d.reason {
        DropReason::LowCoverage { coverage } => {
            let m = match_set(&d.rule);
            let cov = m.intersection(&churn).count() as f64 / churn.len() as f64;
            cov == *coverage && cov < pareto::DEFAULT_MIN_COVERAGE
        }
        DropReason::Redundant { with, jaccard: j } => {
            jaccard(&match_set(&d.rule), &match_set(with)) == *j && *j > pareto::DEFAULT_MAX_JACCARD
        }
    });
    outcome(
        kept == expected && reasons_ok,
        format!(
            "kept {kept:?}, {} dropped, drop reasons recomputed: {reasons_ok}",
            report.dropped.len()
        ),
    )
}

fn ted_gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (n, m) = (rng.gen_range(3..12), rng.gen_range(1..6));
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let t: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
        let w: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = rng.gen_range(-1.0..1.0);
        let l2 = rng.gen_range(0.0..0.5);
        let (_, gw, gb) = ted::logistic_objective(&x, &t, &w, b, l2);
        let h = 1e-5;
        let rel = |analytic: f64, numeric: f64| {
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
        };
        for j in 0..m {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += h;
            wm[j] -= h;
            let fd = (ted::logistic_objective(&x, &t, &wp, b, l2).0
                - ted::logistic_objective(&x, &t, &wm, b, l2).0)
                / (2.0 * h);
            worst = worst.max(rel(gw[j], fd));
        }
        let fd = (ted::logistic_objective(&x, &t, &w, b + h, l2).0
            - ted::logistic_objective(&x, &t, &w, b - h, l2).0)
            / (2.0 * h);
        worst = worst.max(rel(gb, fd));
    }
    outcome(worst <= 1e-5, format!("max relative error {worst:.2e} over 20 instances"))
}

fn metric_algebra() -> Outcome {
    let p = ted::weighted_average(&[0.92, 0.99], &[860, 1140]);
    let r = ted::weighted_average(&[0.98, 0.93], &[860, 1140]);
    outcome(
        (p - 0.96).abs() <= 0.005 && (r - 0.95).abs() <= 0.005,
        format!("weighted precision {p:.4} (0.96), weighted recall {r:.4} (0.95)"),
    )
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism(oracle: &Oracle, evals: &mut Vec<EvalReport>) -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = PipelineConfig {
        rules: Some(rules_dir().join("golden4.rules")),
        ..oracle.config.clone()
    };
    let ra = pipeline::run_pipeline(&cfg, a.path()).unwrap();
    pipeline::run_pipeline(&cfg, b.path()).unwrap();
    evals.push(ra.test);
    evals.push(ra.train);
    let (fa, fb) = (read_dir_bytes(a.path()), read_dir_bytes(b.path()));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    outcome(
        fa == fb && fa.len() == 6,
        format!("{} artifacts compared byte for byte: {names:?}", fa.len()),
    )
}

fn accuracy_bound(evals: &[EvalReport]) -> Outcome {
    let violations = evals
        .iter()
        .filter(|r| r.ye_accuracy > r.y_accuracy.min(r.e_accuracy))
        .count();
    outcome(
        violations == 0 && !evals.is_empty(),
        format!("{} evaluations, {violations} violations", evals.len()),
    )
}

fn main() {
    let oracle = frontier_oracle();
    let mut evals = Vec::new();
    let results = vec![
        ("LRR single-candidate oracle", lrr_oracle()),
        ("KKT certificate", kkt_certificate()),
        ("safety-biased rule discovery", safety_biased_discovery()),
        ("efficiency frontier ordering", efficiency_frontier(&oracle, &mut evals)),
        ("Jaccard oracle", jaccard_oracle()),
        ("Pareto filter", pareto_filter(&oracle)),
        ("TED gradient check", ted_gradient_check()),
        ("weighted-average algebra", metric_algebra()),
        ("end-to-end determinism", determinism(&oracle, &mut evals)),
        ("Y+E accuracy bound", accuracy_bound(&evals)),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        println!(
            "criterion {:>2} {:<30} {}  {}",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
