//! The full attack as a sequence of resumable stages.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! samples/<strategy>.jsonl
//! scored/<strategy>.jsonl
//! dedup/<strategy>__<metric>.jsonl
//! candidates/<strategy>__<metric>.{csv,jsonl}
//! labels/auto.jsonl, report.md, report.json   (when [verify] is set)
//! manifest.json
//! ```
//!
//! Each stage file is written atomically and its checksum recorded in the
//! manifest. A later run with the same config hash reuses any stage whose
//! file still matches its recorded checksum.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dedup::dedup_ranked;
use crate::error::{Error, Result};
use crate::generation::{build_context_pool, sample_range, GeneratedSample, Strategy};
use crate::ground_truth::{build_index, normalize_whitespace, Corpus, NgramIndex, Verification};
use crate::lm::{LanguageModel, ModelHandle};
use crate::metrics::{rank_by, score_samples, MetricKind, MetricModels, ScoredSample};
use crate::pipeline::config::{AttackConfig, ModelRef};
use crate::pipeline::io::{file_sha256, jsonl_bytes, parse_jsonl, sha256_hex, write_atomic};
use crate::pipeline::labels::{import_labels, Label, LabelLine, Verdict};
use crate::pipeline::report::{build_report, Report};
use crate::pipeline::select::{candidates_csv, select_candidates, CandidateRecord, PoolEntry};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedInfo {
    pub master_seed: u64,
    pub first_sample_id: u64,
    pub num_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config: AttackConfig,
    pub models: BTreeMap<String, String>,
    pub seeds: BTreeMap<Strategy, SeedInfo>,
    /// Relative stage path to SHA-256 of its contents.
    pub stages: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub candidate_files: Vec<PathBuf>,
    pub candidates: usize,
    pub reused_stages: usize,
    pub report: Option<Report>,
}

struct Stages<'a> {
    dir: &'a Path,
    previous: BTreeMap<String, String>,
    manifest: RunManifest,
    reused: usize,
}

impl Stages<'_> {
    /// Returns the stage bytes, reusing a verified earlier output if present.
    fn run(&mut self, rel: &str, produce: impl FnOnce() -> Result<Vec<u8>>) -> Result<Vec<u8>> {
        let path = self.dir.join(rel);
        if let Some(want) = self.previous.get(rel) {
            if let Ok(bytes) = fs::read(&path) {
                if &sha256_hex(&bytes) == want {
                    self.reused += 1;
                    self.manifest.stages.insert(rel.to_string(), want.clone());
                    return Ok(bytes);
                }
            }
        }
        let bytes = produce()?;
        write_atomic(&path, &bytes)?;
        self.manifest.stages.insert(rel.to_string(), sha256_hex(&bytes));
        self.save()?;
        Ok(bytes)
    }

    fn save(&self) -> Result<()> {
        write_atomic(
            self.dir.join(MANIFEST_FILE),
            &serde_json::to_vec_pretty(&self.manifest)?,
        )
    }
}

fn parse_stage<T: serde::de::DeserializeOwned>(rel: &str, bytes: &[u8]) -> Result<Vec<T>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(format!("{rel}: {e}")))?;
    parse_jsonl(text).map_err(|e| Error::Format(format!("{rel}: {e}")))
}

/// Reads a manifest written by an earlier run, if any.
pub fn read_manifest(dir: &Path) -> Result<Option<RunManifest>> {
    let path = dir.join(MANIFEST_FILE);
    match fs::read(&path) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

struct Models {
    target: ModelHandle,
    small: Option<ModelHandle>,
    medium: Option<ModelHandle>,
}

impl Models {
    fn metric_models(&self) -> MetricModels<'_> {
        MetricModels {
            target: &*self.target,
            small: self.small.as_deref(),
            medium: self.medium.as_deref(),
        }
    }
}

/// Auto-labels candidates against a known corpus. An exact substring of a
/// document counts as memorized; otherwise the fuzzy trigram check decides.
/// The exact pass catches samples cut off mid-word, whose last trigram is
/// absent from the index.
pub fn auto_label(
    candidates: &[CandidateRecord],
    corpus: &Corpus,
    index: &NgramIndex,
    proximity_factor: f64,
) -> Result<Vec<LabelLine>> {
    candidates
        .iter()
        .map(|c| {
            let query = if corpus.is_normalized() {
                normalize_whitespace(&c.text)
            } else {
                c.text.clone()
            };
            let exact = (!query.is_empty())
                .then(|| corpus.documents().iter().find(|d| d.text.contains(query.as_str())))
                .flatten();
            let (verdict, notes) = match exact {
                Some(d) => (Verdict::Memorized, format!("auto: exact {}", d.doc_id)),
                None => match index.fuzzy_3gram_verify(&c.text, proximity_factor) {
                    Ok(Verification::Confirmed { doc_id, .. }) => (Verdict::Memorized, format!("auto: {doc_id}")),
                    Ok(Verification::NotFound) => (Verdict::NotMemorized, "auto".to_string()),
                    Err(Error::TooShort(_)) => (Verdict::NotMemorized, "auto: too short".to_string()),
                    Err(e) => return Err(e),
                },
            };
            let label = Label {
                verdict,
                categories: Default::default(),
                notes,
            };
            Ok(LabelLine::from_label(c.candidate_id.clone(), &label))
        })
        .collect()
}

pub fn full_text_ref(strategy: Strategy, sample_id: u64) -> String {
    format!("scored/{strategy}.jsonl#sample_id={sample_id}")
}

/// Ranks, de-duplicates and selects candidates for one metric.
pub fn candidates_for(
    scored: &[ScoredSample],
    strategy: Strategy,
    metric: MetricKind,
    plan: crate::pipeline::select::SelectionPlan,
) -> Result<(Vec<CandidateRecord>, Vec<crate::dedup::DedupDecision>)> {
    let order = rank_by(scored, metric)?;
    let outcome = dedup_ranked(
        order
            .iter()
            .map(|&i| (scored[i].sample.sample_id, scored[i].sample.text.as_str())),
        Some(plan.pool_size),
    );
    let pool: Vec<PoolEntry<'_>> = outcome
        .kept
        .iter()
        .map(|&k| {
            let s = &scored[order[k]];
            PoolEntry {
                sample_id: s.sample.sample_id,
                value: s.scores[&metric],
                text: &s.sample.text,
            }
        })
        .collect();
    let picked = select_candidates(&pool, plan, strategy, metric, |id| full_text_ref(strategy, id))?;
    Ok((picked, outcome.log))
}

/// Config hash extended with the checksums of local model files, so a
/// retrained model invalidates earlier stages.
fn run_hash(config: &AttackConfig) -> Result<String> {
    let mut key = config.content_hash()?;
    for m in [Some(&config.models.target), config.models.small.as_ref(), config.models.medium.as_ref()]
        .into_iter()
        .flatten()
    {
        if let ModelRef::File(f) = m {
            key.push(':');
            key.push_str(&file_sha256(&f.path)?);
        }
    }
    Ok(sha256_hex(key.as_bytes()))
}

/// A rayon pool with `workers` threads; 0 means one per core.
pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

pub fn run_attack(config: &AttackConfig) -> Result<RunSummary> {
    config.validate()?;
    let dir = config.output_dir.as_path();
    let config_hash = run_hash(config)?;
    let previous = match read_manifest(dir)? {
        Some(m) if m.config_hash == config_hash => m.stages,
        _ => BTreeMap::new(),
    };

    let models = Models {
        target: config.models.target.load()?,
        small: config.models.small.as_ref().map(|m| m.load()).transpose()?,
        medium: config.models.medium.as_ref().map(|m| m.load()).transpose()?,
    };
    let mut model_ids = BTreeMap::new();
    model_ids.insert("target".to_string(), models.target.model_id().to_string());
    if let Some(m) = &models.small {
        model_ids.insert("small".to_string(), m.model_id().to_string());
    }
    if let Some(m) = &models.medium {
        model_ids.insert("medium".to_string(), m.model_id().to_string());
    }

    let pool = match &config.pool {
        Some(p) if config.strategies.contains(&Strategy::PrefixConditioned) => {
            let mut pool = build_context_pool(&p.path, p.min_words)?;
            let mut users: Vec<&dyn LanguageModel> = vec![&*models.target];
            users.extend(models.small.as_deref());
            users.extend(models.medium.as_deref());
            pool.retain_encodable(&users);
            Some(pool)
        }
        _ => None,
    };

    let seeds = config
        .strategies
        .iter()
        .map(|&s| {
            (
                s,
                SeedInfo {
                    master_seed: config.master_seed,
                    first_sample_id: config.first_sample_id(s),
                    num_samples: config.num_samples,
                },
            )
        })
        .collect();
    let mut stages = Stages {
        dir,
        previous,
        manifest: RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            config: config.clone(),
            models: model_ids,
            seeds,
            stages: BTreeMap::new(),
        },
        reused: 0,
    };

    let threads = worker_pool(config.workers)?;

    let mut all_candidates: Vec<CandidateRecord> = Vec::new();
    let mut candidate_files = Vec::new();
    threads.install(|| -> Result<()> {
        for &strategy in &config.strategies {
            let rel = format!("samples/{strategy}.jsonl");
            let mut fresh: Option<Vec<GeneratedSample>> = None;
            let sample_bytes = stages.run(&rel, || {
                let sampler = config.sampler_for(strategy);
                let samples = sample_range(&*models.target, &sampler, pool.as_ref(), config.first_sample_id(strategy))?;
                let bytes = jsonl_bytes(&samples)?;
                fresh = Some(samples);
                Ok(bytes)
            })?;

            let rel_scored = format!("scored/{strategy}.jsonl");
            let mut scored_fresh: Option<Vec<ScoredSample>> = None;
            let scored_bytes = stages.run(&rel_scored, || {
                let samples = match fresh.take() {
                    Some(s) => s,
                    None => parse_stage(&rel, &sample_bytes)?,
                };
                let scored = score_samples(samples, &config.metrics, models.metric_models())?;
                let bytes = jsonl_bytes(&scored)?;
                scored_fresh = Some(scored);
                Ok(bytes)
            })?;
            drop(sample_bytes);
            let scored = match scored_fresh {
                Some(s) => s,
                None => parse_stage(&rel_scored, &scored_bytes)?,
            };
            drop(scored_bytes);

            for &metric in &config.metrics {
                let stem = format!("{strategy}__{metric}");
                let (picked, log) = candidates_for(&scored, strategy, metric, config.selection)?;
                stages.run(&format!("dedup/{stem}.jsonl"), || jsonl_bytes(&log))?;
                stages.run(&format!("candidates/{stem}.jsonl"), || jsonl_bytes(&picked))?;
                let csv_rel = format!("candidates/{stem}.csv");
                stages.run(&csv_rel, || candidates_csv(&picked))?;
                candidate_files.push(dir.join(&csv_rel));
                all_candidates.extend(picked);
            }
        }
        Ok(())
    })?;

    let report = match &config.verify {
        Some(v) => {
            let corpus = Corpus::load_jsonl(&v.corpus, v.normalize)?;
            let index = build_index(&corpus);
            let labels = auto_label(&all_candidates, &corpus, &index, v.proximity_factor)?;
            stages.run("labels/auto.jsonl", || jsonl_bytes(&labels))?;
            import_labels(&mut all_candidates, &labels)?;
            let report = build_report(&all_candidates);
            stages.run("report.json", || Ok(serde_json::to_vec_pretty(&report)?))?;
            stages.run("report.md", || Ok(report.to_markdown().into_bytes()))?;
            Some(report)
        }
        None => None,
    };
    stages.save()?;

    Ok(RunSummary {
        output_dir: dir.to_path_buf(),
        candidate_files,
        candidates: all_candidates.len(),
        reused_stages: stages.reused,
        report,
    })
}
