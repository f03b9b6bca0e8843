mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use memaudit_core::canary::{synthetic_background, BackgroundSpec};
use memaudit_core::error::Error;
use memaudit_core::generation::Strategy;
use memaudit_core::metrics::MetricKind;
use memaudit_core::pipeline::io::read_jsonl;
use memaudit_core::pipeline::labels::{import_labels, LabelLine, Verdict};
use memaudit_core::pipeline::report::{CellCount, Report};
use memaudit_core::pipeline::select::CandidateRecord;
use memaudit_core::pipeline::{run_attack, AttackConfig};
use memaudit_core::reference::{train, TrainingConfig};

const CONFIG: &str = r#"
output_dir = "out"
master_seed = 11
num_samples = 150
strategies = ["top_n", "prefix_conditioned"]
metrics = ["perplexity", "small", "zlib"]
[models.target]
path = "target.bin"
[models.small]
path = "small.bin"
[sampler]
max_tokens = 40
[pool]
path = "seed.txt"
[selection]
pool_size = 60
pick = 12
[verify]
corpus = "corpus.jsonl"
"#;

fn fixture(dir: &Path) -> PathBuf {
    let corpus = synthetic_background(
        &BackgroundSpec {
            documents: 24,
            boilerplate_rate: 1.0,
            ..Default::default()
        },
        21,
    )
    .unwrap();
    corpus.save_jsonl(dir.join("corpus.jsonl")).unwrap();
    train(&TrainingConfig::new(10, "target"), &corpus).unwrap().save(dir.join("target.bin")).unwrap();
    train(&TrainingConfig::new(2, "small"), &corpus).unwrap().save(dir.join("small.bin")).unwrap();
    let seed = synthetic_background(
        &BackgroundSpec {
            documents: 50,
            ..Default::default()
        },
        22,
    )
    .unwrap();
    let lines: String = seed.documents().iter().map(|d| format!("{}\n", d.text)).collect();
    fs::write(dir.join("seed.txt"), lines).unwrap();
    let path = dir.join("attack.toml");
    fs::write(&path, CONFIG).unwrap();
    path
}

fn config(path: &Path, env: &[(&str, &str)]) -> AttackConfig {
    let text = fs::read_to_string(path).unwrap();
    AttackConfig::from_toml_str(&text, env.iter().copied(), path.parent().unwrap()).unwrap()
}

fn read_candidates(out: &Path) -> Vec<CandidateRecord> {
    let mut all = Vec::new();
    let mut files: Vec<PathBuf> = fs::read_dir(out.join("candidates"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    for f in files {
        all.extend(read_jsonl::<CandidateRecord>(&f).unwrap());
    }
    all
}

#[test]
fn report_matches_independent_recount_and_rerun_reuses_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let path = fixture(tmp.path());
    let cfg = config(&path, &[]);
    let out = cfg.output_dir.clone();
    let first = run_attack(&cfg).unwrap();
    assert_eq!(first.reused_stages, 0);
    assert_eq!(first.candidate_files.len(), 6);
    assert_eq!(first.candidates, 72);

    // Recount the per-cell totals from the files on disk.
    let labels: Vec<LabelLine> = read_jsonl(out.join("labels/auto.jsonl")).unwrap();
    let by_id: BTreeMap<&str, &LabelLine> = labels.iter().map(|l| (l.candidate_id.as_str(), l)).collect();
    let candidates = read_candidates(&out);
    assert_eq!(candidates.len(), 72);
    let mut cells: BTreeMap<(Strategy, MetricKind), CellCount> = BTreeMap::new();
    for c in &candidates {
        let l = by_id[c.candidate_id.as_str()];
        let cell = cells.entry((c.strategy, c.metric)).or_default();
        cell.labeled += 1;
        cell.memorized += (l.verdict == Verdict::Memorized) as usize;
        assert!(c.full_text_ref.starts_with(&format!("scored/{}.jsonl#sample_id=", c.strategy)));
    }
    let report: Report = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(Some(&report), first.report.as_ref());
    for ((s, m), want) in &cells {
        assert_eq!(report.cells[s][m], *want, "{s} {m}");
    }
    let confirmed: usize = cells.values().map(|c| c.memorized).sum();
    assert_eq!(report.confirmed, confirmed);
    assert_eq!(report.labeled, 72);
    assert!(confirmed > 0, "fixture should produce memorized boilerplate");
    assert!(report.overall_unique <= report.strategy_unique.values().sum::<usize>());
    assert!(report.overall_unique >= 1);
    let md = fs::read_to_string(out.join("report.md")).unwrap();
    assert!(md.contains("perplexity") && md.contains("top_n"));

    let csv = fs::read_to_string(out.join("candidates/top_n__zlib.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "candidate_id,strategy,metric,rank,value,text_snippet_256chars,full_text_ref"
    );
    assert_eq!(csv.lines().count(), 13);

    let snapshot: Vec<Vec<u8>> = candidates_bytes(&out);
    let second = run_attack(&cfg).unwrap();
    assert_eq!(second.reused_stages, 2 * 2 + 6 * 3 + 3);
    assert_eq!(candidates_bytes(&out), snapshot);

    // A damaged stage is regenerated rather than trusted.
    let victim = out.join("candidates/prefix_conditioned__small.jsonl");
    let good = fs::read(&victim).unwrap();
    fs::write(&victim, b"garbage\n").unwrap();
    let third = run_attack(&cfg).unwrap();
    assert_eq!(third.reused_stages, second.reused_stages - 1);
    assert_eq!(fs::read(&victim).unwrap(), good);

    // Changing a hashed field invalidates everything; workers does not.
    let more_workers = config(&path, &[("MEMAUDIT_WORKERS", "3")]);
    assert_eq!(run_attack(&more_workers).unwrap().reused_stages, second.reused_stages);
    let reseeded = config(&path, &[("MEMAUDIT_MASTER_SEED", "12")]);
    assert_eq!(run_attack(&reseeded).unwrap().reused_stages, 0);

    // Retraining a model in place also invalidates earlier stages.
    assert_eq!(run_attack(&cfg).unwrap().reused_stages, 0);
    let corpus = memaudit_core::ground_truth::Corpus::load_jsonl(tmp.path().join("corpus.jsonl"), false).unwrap();
    train(&TrainingConfig::new(3, "small"), &corpus).unwrap().save(tmp.path().join("small.bin")).unwrap();
    assert_eq!(run_attack(&cfg).unwrap().reused_stages, 0);
}

fn candidates_bytes(out: &Path) -> Vec<Vec<u8>> {
    let mut files: Vec<PathBuf> = fs::read_dir(out.join("candidates")).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.iter().map(|f| fs::read(f).unwrap()).collect()
}

#[test]
fn env_overrides_and_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let path = fixture(tmp.path());
    let cfg = config(
        &path,
        &[
            ("MEMAUDIT_SELECTION__PICK", "5"),
            ("MEMAUDIT_SAMPLER__N", "7"),
            ("MEMAUDIT_ADAPTER_PORT", "9000"),
            ("UNRELATED", "x"),
        ],
    );
    assert_eq!(cfg.selection.pick, 5);
    assert_eq!(cfg.sampler.n, 7);
    assert_eq!(cfg.sampler_for(Strategy::TopN).n, 7);
    assert_eq!(cfg.output_dir, tmp.path().join("out"));
    assert_ne!(
        cfg.first_sample_id(Strategy::TopN),
        cfg.first_sample_id(Strategy::PrefixConditioned)
    );

    let text = fs::read_to_string(&path).unwrap();
    let bad = AttackConfig::from_toml_str(&text, [("MEMAUDIT_SELECTION__PICK", "1000")], tmp.path());
    assert!(matches!(bad, Err(Error::Config(_))));
}

#[test]
fn label_import_rejects_bad_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let path = fixture(tmp.path());
    let mut cfg = config(&path, &[]);
    cfg.verify = None;
    cfg.strategies = vec![Strategy::TopN];
    cfg.metrics = vec![MetricKind::Perplexity];
    let summary = run_attack(&cfg).unwrap();
    assert!(summary.report.is_none());
    let mut candidates = read_candidates(&cfg.output_dir);
    let id = candidates[0].candidate_id.clone();

    let line = |id: &str, verdict: &str, cats: &[&str]| -> LabelLine {
        serde_json::from_value(serde_json::json!({
            "candidate_id": id, "verdict": verdict, "categories": cats, "notes": ""
        }))
        .unwrap()
    };
    assert!(matches!(
        import_labels(&mut candidates, &[line("nope", "memorized", &[])]),
        Err(Error::UnknownCandidate(_))
    ));
    assert!(matches!(
        import_labels(&mut candidates, &[line(&id, "memorized", &["not_a_category"])]),
        Err(Error::InvalidCategory(_))
    ));
    assert!(matches!(
        import_labels(
            &mut candidates,
            &[line(&id, "memorized", &[]), line(&id, "not_memorized", &[])]
        ),
        Err(Error::LabelConflict(_))
    ));
    let n = import_labels(
        &mut candidates,
        &[line(&id, "memorized", &["contact_info", "code"])],
    )
    .unwrap();
    assert_eq!(n, 1);
    let label = candidates[0].label.as_ref().unwrap();
    assert_eq!(label.verdict, Verdict::Memorized);
    assert_eq!(label.categories.len(), 2);
}
