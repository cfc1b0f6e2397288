//! Acceptance checks. Each criterion prints one PASS/FAIL line (written
//! straight to stderr so it shows even when output is captured); the test
//! fails if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ponzilens::detect::{
    build_analysis_prompt, DetectionReport, Detector, FrozenClock, LlmConfig, Mode, Pricing, RunRecord, Templates,
};
use ponzilens::eval::{
    aggregate_overhead, balanced_accuracy, run_batch, BatchOptions, DatasetManifest, Label, ManifestEntry, REPORTS_FILE,
};
use ponzilens::hypergraph::{BuildOptions, HypernodeGraph};
use ponzilens::pipeline::{AnalysisOptions, StaticAnalysis};
use ponzilens::render::{to_dot, RenderOptions};
use ponzilens::slice::{slice_contracts, SliceOptions};
use ponzilens::taint::{default_sources, tpa, tpa_from};

use common::*;

type Outcome = Result<String, String>;

// Pinned tolerances.
const BAC_TOLERANCE_PP: f64 = 0.01;
const COST_TOLERANCE: f64 = 1e-6;
const STD_TOLERANCE: f64 = 1e-12;
const TAINT_GRAPHS: usize = 1000;
const RANDOM_MODELS: usize = 200;
const TAINT_BUDGET: Duration = Duration::from_secs(10);
const SLICE_BUDGET: Duration = Duration::from_secs(5);
const E2E_BUDGET: Duration = Duration::from_secs(2);
const STATIC_BUDGET: Duration = Duration::from_secs(1);
const BATCH_BUDGET: Duration = Duration::from_secs(30);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mock_detector() -> Detector {
    Detector::with_backend(LlmConfig::mock(), Arc::new(ponzilens::detect::MockBackend))
        .with_clock(Arc::new(FrozenClock))
}

// Published (TPR, TNR, FNR, FPR, BAC) rows in percent, hundredths as integers.
type RateRow = (&'static str, [i64; 5]);

const RATE_TABLES: &[(&str, &[RateRow])] = &[
    (
        "overall",
        &[
            ("gpt-3.5-turbo", [9640, 9571, 360, 429, 9606]),
            ("llama2", [7914, 8602, 2086, 1398, 8258]),
            ("llama3", [9568, 9214, 432, 786, 9391]),
            ("mistral", [9568, 9286, 432, 714, 9427]),
        ],
    ),
    (
        "tool comparison",
        &[
            ("no training data", [9640, 9571, 360, 429, 9606]),
            ("sadponzi 45%", [7194, 9924, 2806, 76, 8559]),
            ("ponziguard 45%", [9640, 9962, 360, 38, 9801]),
            ("ponziguard 30%", [7363, 9565, 2637, 435, 8464]),
            ("ponziguard 20%", [6907, 9212, 3093, 788, 8059]),
            ("sourcep 45%", [8667, 9840, 1333, 160, 9254]),
            ("sourcep 30%", [8491, 9825, 1509, 175, 9158]),
            ("sourcep 20%", [8105, 9771, 1895, 229, 8939]),
        ],
    ),
    (
        "without taint graph",
        &[
            ("gpt-3.5-turbo", [9424, 9429, 576, 571, 9427]),
            ("llama2", [10000, 1563, 0, 8437, 5782]),
            ("llama3", [9712, 6071, 288, 3929, 7892]),
            ("mistral", [9353, 7929, 647, 2071, 8641]),
        ],
    ),
    (
        "raw code",
        &[
            ("gpt-3.5-turbo", [9065, 9643, 935, 357, 9354]),
            ("llama2", [10000, 1349, 0, 8651, 5675]),
            ("llama3", [10000, 5722, 0, 4278, 7861]),
            ("mistral", [9209, 8929, 791, 1071, 9069]),
        ],
    ),
];

fn criterion_1() -> Outcome {
    let pct = |hundredths: i64| Ratio::new(hundredths, 10_000);
    let tol = Ratio::new((BAC_TOLERANCE_PP * 100.0).round() as i64, 10_000);
    let mut rows = 0;
    let mut worst = Ratio::new(0i64, 1);
    for (table, entries) in RATE_TABLES {
        for (name, [tpr, tnr, fnr, fpr, bac]) in *entries {
            let (tpr, tnr) = (pct(*tpr), pct(*tnr));
            let got = balanced_accuracy(tpr, tnr);
            let d = got - pct(*bac);
            let diff = if d < Ratio::from_integer(0) { -d } else { d };
            worst = worst.max(diff);
            ensure(diff <= tol, || format!("{table}/{name}: BAC {} vs published {}", got, pct(*bac)))?;
            let one = Ratio::from_integer(1);
            ensure(one - tpr == pct(*fnr) && one - tnr == pct(*fpr), || {
                format!("{table}/{name}: complement rates differ")
            })?;
            rows += 1;
        }
    }
    let worst_pp = *worst.numer() as f64 / *worst.denom() as f64 * 100.0;
    Ok(format!("{rows} rows, max |BAC diff| {worst_pp:.3} pp (tolerance {BAC_TOLERANCE_PP} pp)"))
}

fn compare_tpa(
    h: &HypernodeGraph,
    sources: &BTreeSet<ponzilens::Endpoint>,
    edges: &[(ponzilens::Endpoint, ponzilens::Endpoint)],
) -> Result<(), String> {
    let t = tpa_from(h, sources.iter().copied());
    let (tainted, taint_edges) = closure(sources, edges);
    ensure(t.tainted == tainted, || format!("tainted sets differ: {:?} vs {:?}", t.tainted, tainted))?;
    ensure(t.taint_edges == taint_edges, || "taint edge sets differ".into())
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7a1a7);
    let mut edges_seen = 0;
    for i in 0..TAINT_GRAPHS {
        let shape = GraphShape::random(&mut rng, 50, 4);
        let sources = shape.random_sources(&mut rng);
        for _ in 0..2 {
            let order = shape.shuffled_edges(&mut rng);
            let h = shape.build(&order);
            compare_tpa(&h, &sources, &shape.edges).map_err(|e| format!("graph {i}: {e}"))?;
        }
        edges_seen += shape.edges.len();
    }
    let elapsed = start.elapsed();
    ensure(elapsed < TAINT_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("{TAINT_GRAPHS} graphs x 2 edge orders, {edges_seen} edges, {elapsed:.2?}"))
}

fn check_slice(
    label: &str,
    h: &HypernodeGraph,
    models: &[ponzilens::ContractModel],
    source: &str,
    with_ctors: bool,
) -> Result<(), String> {
    let t = tpa(h, &default_sources(h));
    let bundle = slice_contracts(&t, h, models, SliceOptions { include_constructors: with_ctors });
    let (oracle_tainted, _) = closure_of(h, &builtin_sources(h));
    let expected = expected_selection(h, models, &oracle_tainted, with_ctors);
    let got: BTreeSet<String> =
        bundle.selected.iter().chain(bundle.aliases.keys()).chain(&bundle.stats.skipped_no_span).cloned().collect();
    ensure(got == expected, || format!("{label}: selected {got:?}, expected {expected:?}"))?;
    let total: usize = models.iter().map(|c| c.functions.len()).sum();
    ensure(bundle.stats.bytes <= source.len(), || format!("{label}: slice larger than source"))?;
    if expected.len() < total {
        ensure(bundle.stats.bytes < source.len(), || format!("{label}: functions excluded but slice not smaller"))?;
    }
    Ok(())
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let fixtures = fixture_names();
    for name in &fixtures {
        let a = analyse_fixture(name);
        for with_ctors in [true, false] {
            let h = HypernodeGraph::build(&a.models, &a.unit.source_text, BuildOptions::default());
            check_slice(name, &h, &a.models, &a.unit.source_text, with_ctors)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x511ce);
    for i in 0..RANDOM_MODELS {
        let (models, source) = random_contracts(&mut rng);
        let h = HypernodeGraph::build(&models, &source, BuildOptions::default());
        for with_ctors in [true, false] {
            check_slice(&format!("random model {i}"), &h, &models, &source, with_ctors)?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < SLICE_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("{} fixtures + {RANDOM_MODELS} random models, both constructor settings, {elapsed:.2?}", fixtures.len()))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let detector = mock_detector();
    let run = |name: &str| -> Result<(DetectionReport, String), String> {
        let r = detector.detect_unit(load_fixture(name), Mode::Full, 5);
        let json = serde_json::to_string(&r).map_err(|e| e.to_string())?;
        Ok((r, json))
    };
    for (name, expected) in [("doubler_ponzi", true), ("erc20_token", false)] {
        let (r, first) = run(name)?;
        let (_, second) = run(name)?;
        ensure(r.error.is_none(), || format!("{name}: {:?}", r.error))?;
        ensure(r.final_verdict == Some(expected), || format!("{name}: verdict {:?}", r.final_verdict))?;
        let agreeing = r.runs.iter().filter(|run| run.verdict == Some(expected)).count();
        ensure(r.runs.len() == 5 && agreeing == 5, || format!("{name}: {agreeing}/{} runs agree", r.runs.len()))?;
        ensure(first == second, || format!("{name}: reports differ between invocations"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < E2E_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("doubler true 5/5, erc20 false 5/5, byte-identical reruns, {elapsed:.2?}"))
}

fn criterion_5() -> Outcome {
    let templates = Templates::default();
    let mut checked = 0;
    for name in fixture_names() {
        let a = analyse_fixture(&name);
        let prompt = |mode| build_analysis_prompt(&templates, &a.slice, Some(&a.dot), mode, &a.unit.source_text);
        let raw = prompt(Mode::Raw).map_err(|e| format!("{name}: raw: {e}"))?;
        ensure(raw.rendered.contains(a.unit.source_text.trim_end()), || {
            format!("{name}: raw prompt lacks the source")
        })?;
        ensure(!raw.rendered.contains("digraph"), || format!("{name}: raw prompt has DOT"))?;
        if !a.slice.header.is_empty() {
            ensure(!raw.rendered.contains(&a.slice.header), || format!("{name}: raw prompt has the slice header"))?;
        }
        if a.slice.is_empty() {
            ensure(prompt(Mode::Full).is_err() && prompt(Mode::NoTaint).is_err(), || {
                format!("{name}: empty slice accepted")
            })?;
            checked += 1;
            continue;
        }
        let no_taint = prompt(Mode::NoTaint).map_err(|e| format!("{name}: no-taint: {e}"))?;
        ensure(!no_taint.rendered.contains("digraph") && !no_taint.rendered.contains(a.dot.text.trim_end()), || {
            format!("{name}: no-taint prompt has DOT")
        })?;
        ensure(no_taint.rendered.contains(&a.slice.combined_text), || {
            format!("{name}: no-taint prompt lacks the slice")
        })?;
        let full = prompt(Mode::Full).map_err(|e| format!("{name}: full: {e}"))?;
        ensure(full.rendered.contains(&a.slice.combined_text), || format!("{name}: full prompt lacks the slice"))?;
        ensure(full.rendered.contains(a.dot.text.trim_end()), || format!("{name}: full prompt lacks the DOT"))?;
        checked += 1;
    }
    Ok(format!("{checked} fixtures x 3 modes"))
}

fn criterion_6() -> Outcome {
    let mut docs = 0;
    let mut check = |label: &str, a: &StaticAnalysis| -> Result<(), String> {
        for cluster in [false, true] {
            let opts = RenderOptions { cluster };
            let doc = to_dot(&a.taint, &a.graph, opts);
            let again = to_dot(&a.taint, &a.graph, opts);
            ensure(doc.text == again.text, || format!("{label}: output not deterministic"))?;
            let (nodes, edges) = parse_dot(&doc.text).map_err(|e| format!("{label}: DOT does not parse: {e}"))?;
            let expected = labelled_taint_edges(&a.graph, &a.taint.taint_edges);
            ensure(edges == expected, || format!("{label}: edges {edges:?} vs {expected:?}"))?;
            ensure(nodes.len() == doc.node_count, || format!("{label}: node count mismatch"))?;
            docs += 1;
        }
        Ok(())
    };
    for name in fixture_names() {
        let a = analyse_fixture(&name);
        let rebuilt = analyse_fixture(&name);
        ensure(a.dot.text == rebuilt.dot.text, || format!("{name}: DOT differs across runs"))?;
        check(&name, &a)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xd07);
    for i in 0..50 {
        let (models, source) = random_contracts(&mut rng);
        let unit = ponzilens::SourceUnit::from_source(format!("random{i}"), "random.sol", source.clone());
        let graph = HypernodeGraph::build(&models, &source, BuildOptions::default());
        let taint = tpa(&graph, &default_sources(&graph));
        let slice = slice_contracts(&taint, &graph, &models, SliceOptions::default());
        let dot = to_dot(&taint, &graph, RenderOptions::default());
        check(&format!("random {i}"), &StaticAnalysis { unit, models, graph, taint, slice, dot })?;
    }
    Ok(format!("{docs} documents parsed, edge multisets recovered"))
}

fn criterion_7() -> Outcome {
    let price = 0.001;
    let cfg = LlmConfig { pricing: Pricing::new(price, price), ..LlmConfig::mock() };
    let detector =
        Detector::with_backend(cfg, Arc::new(ponzilens::detect::MockBackend)).with_clock(Arc::new(FrozenClock));
    let reports: Vec<DetectionReport> =
        fixture_names().iter().map(|n| detector.detect_unit(load_fixture(n), Mode::Full, 5)).collect();
    let overhead = aggregate_overhead::<f64>(&reports);
    let exact_rate = Ratio::new(1i64, 1000);
    let exact = ponzilens::ExactPricing::new(exact_rate, exact_rate);
    let total: Ratio<i64> = reports
        .iter()
        .flat_map(|r| &r.runs)
        .map(|run| exact.cost(run.input_tokens, run.output_tokens))
        .fold(Ratio::from_integer(0), |a, b| a + b);
    let expected_mean = total / Ratio::from_integer(reports.len() as i64);
    let expected = *expected_mean.numer() as f64 / *expected_mean.denom() as f64;
    ensure((overhead.mean_cost - expected).abs() <= COST_TOLERANCE, || {
        format!("mean cost {} vs recomputed {expected}", overhead.mean_cost)
    })?;
    ensure(total > Ratio::from_integer(0), || "no tokens were billed".into())?;

    let timed = |secs: f64| DetectionReport {
        runs: vec![RunRecord {
            index: 0,
            verdict: Some(false),
            error: None,
            analysis_text: String::new(),
            detection_text: String::new(),
            input_tokens: 0,
            output_tokens: 0,
            wall_seconds: secs,
            cost: 0.0,
        }],
        wall_seconds: secs,
        ..reports[0].clone()
    };
    let two = aggregate_overhead::<f64>(&[timed(1.0), timed(3.0)]);
    ensure(
        (two.mean_wall_seconds - 2.0).abs() <= STD_TOLERANCE && (two.std_wall_seconds - 1.0).abs() <= STD_TOLERANCE,
        || format!("two-report mean/std {} / {}", two.mean_wall_seconds, two.std_wall_seconds),
    )?;
    Ok(format!(
        "mean cost {:.9} = recomputed {expected:.9}; std(1s, 3s) = {}",
        overhead.mean_cost, two.std_wall_seconds
    ))
}

fn hundred_entry_manifest(dir: &std::path::Path) -> DatasetManifest {
    let names = fixture_names();
    let entries = (0..100)
        .map(|i| {
            let name = &names[i % names.len()];
            let label = if name.contains("ponzi") { Label::Ponzi } else { Label::NonPonzi };
            ManifestEntry {
                id: format!("{i:03}_{name}"),
                path_or_address: fixture_path(name).display().to_string(),
                label,
            }
        })
        .collect();
    let m = DatasetManifest::new("hundred", entries).expect("unique ids");
    fs::create_dir_all(dir).expect("out dir");
    m
}

fn criterion_8() -> Outcome {
    let source_lines =
        fs::read_to_string(fixtures_dir().join("large_contract.sol")).map_err(|e| e.to_string())?.lines().count();
    let start = Instant::now();
    let unit = load_fixture("large_contract");
    let a = StaticAnalysis::run(unit, AnalysisOptions::default()).map_err(|e| e.to_string())?;
    let static_elapsed = start.elapsed();
    ensure(source_lines >= 450, || format!("large fixture has only {source_lines} lines"))?;
    ensure(static_elapsed < STATIC_BUDGET, || format!("static pipeline took {static_elapsed:?}"))?;
    ensure(!a.slice.is_empty(), || "large fixture produced no slice".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = hundred_entry_manifest(dir.path());
    let start = Instant::now();
    let outcome = run_batch(&manifest, &mock_detector(), &BatchOptions::new(Mode::Full, 5, dir.path().join("out")))
        .map_err(|e| e.to_string())?;
    let batch_elapsed = start.elapsed();
    ensure(outcome.complete && outcome.reports.len() == 100, || format!("{} reports", outcome.reports.len()))?;
    ensure(outcome.reports.iter().all(|r| r.error.is_none()), || "a fixture failed in the batch".into())?;
    ensure(batch_elapsed < BATCH_BUDGET, || format!("batch took {batch_elapsed:?}"))?;
    Ok(format!("{source_lines}-line contract in {static_elapsed:.2?}; 100-contract mock batch in {batch_elapsed:.2?}"))
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = hundred_entry_manifest(dir.path());
    let detector = mock_detector();

    let straight_dir = dir.path().join("straight");
    let straight =
        run_batch(&manifest, &detector, &BatchOptions::new(Mode::Full, 5, &straight_dir)).map_err(|e| e.to_string())?;

    let resumed_dir = dir.path().join("resumed");
    let cancel = Arc::new(AtomicBool::new(false));
    let finished = AtomicUsize::new(0);
    let stop_at_50 = |_: &DetectionReport| {
        if finished.fetch_add(1, Ordering::SeqCst) + 1 >= 50 {
            cancel.store(true, Ordering::SeqCst);
        }
    };
    let mut first = BatchOptions::new(Mode::Full, 5, &resumed_dir);
    first.cancel = Some(cancel.clone());
    first.on_report = Some(&stop_at_50);
    let partial = run_batch(&manifest, &detector, &first).map_err(|e| e.to_string())?;
    ensure(!partial.complete && partial.reports.len() >= 50 && partial.reports.len() < 100, || {
        format!("interrupted run kept {} reports", partial.reports.len())
    })?;
    // An append cut short by the interruption.
    let journal = resumed_dir.join(REPORTS_FILE);
    let mut f = fs::OpenOptions::new().append(true).open(&journal).map_err(|e| e.to_string())?;
    f.write_all(b"{\"contract_id\":\"torn").map_err(|e| e.to_string())?;
    drop(f);

    let rerun =
        run_batch(&manifest, &detector, &BatchOptions::new(Mode::Full, 5, &resumed_dir)).map_err(|e| e.to_string())?;
    ensure(rerun.resumed == partial.reports.len(), || {
        format!("resumed {} of {}", rerun.resumed, partial.reports.len())
    })?;
    ensure(rerun.reports == straight.reports, || "resumed reports differ from the uninterrupted run".into())?;
    let a = fs::read(straight_dir.join(REPORTS_FILE)).map_err(|e| e.to_string())?;
    let b = fs::read(&journal).map_err(|e| e.to_string())?;
    ensure(a == b, || "reports files differ byte-wise".into())?;
    Ok(format!("interrupted after {} of 100, resumed {}, reports byte-identical", partial.reports.len(), rerun.resumed))
}

type Criterion = (&'static str, fn() -> Outcome);

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 9] = [
        ("metric arithmetic", criterion_1),
        ("taint oracle equivalence", criterion_2),
        ("slicing soundness and completeness", criterion_3),
        ("end-to-end determinism", criterion_4),
        ("ablation separation", criterion_5),
        ("DOT validity and faithfulness", criterion_6),
        ("overhead ledger", criterion_7),
        ("throughput", criterion_8),
        ("resumability", criterion_9),
    ];
    let mut failed = Vec::new();
    let mut err = std::io::stderr();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (status, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(i + 1);
                ("FAIL", d)
            }
        };
        let _ = writeln!(err, "criterion {} [{name}]: {status} - {detail}", i + 1);
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
