use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use memaudit_core::canary::{
    context_probe, frequency_study, plant_canaries, standard_benchmark, synthetic_background, BackgroundSpec,
    CanaryManifest, CanarySpec, StudyConfig, STANDARD_ORDERS,
};
use memaudit_core::generation::{build_context_pool, sample_range, SamplerConfig, Strategy};
use memaudit_core::ground_truth::{build_index, count_eidetic, Corpus, Verification, DEFAULT_PROXIMITY_FACTOR};
use memaudit_core::lm::{LanguageModel, ModelHandle};
use memaudit_core::metrics::{export_scatter, score_samples, Axis, MetricKind, MetricModels, ScoredSample};
use memaudit_core::pipeline::io::{read_jsonl, write_atomic, write_jsonl};
use memaudit_core::pipeline::labels::{import_labels, LabelLine, Verdict};
use memaudit_core::pipeline::report::build_report;
use memaudit_core::pipeline::run::{auto_label, candidates_for, worker_pool};
use memaudit_core::pipeline::select::{write_candidates_csv, CandidateRecord, SelectionPlan};
use memaudit_core::pipeline::{run_attack, AttackConfig};
use memaudit_core::reference::{train, NgramModel, TrainingConfig};
use memaudit_core::remote::{RemoteEndpoint, RemoteModel};

/// Bearer token sent to remote model servers.
const AUTH_ENV: &str = "MEMAUDIT_AUTH_TOKEN";

#[derive(Parser)]
#[command(name = "memaudit", version, about = "Training-data extraction and memorization auditing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a character n-gram reference model on a JSONL corpus.
    TrainRef {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        order: usize,
        #[arg(long)]
        model_id: Option<String>,
        #[arg(long, default_value_t = 0.01)]
        smoothing_k: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the models a remote server offers.
    Models {
        #[arg(long)]
        url: String,
    },
    /// Context pools for prefix-conditioned sampling.
    #[command(subcommand)]
    Pool(PoolCommand),
    /// Sample from a model into a JSONL file.
    Generate(GenerateArgs),
    /// Score samples with membership-inference metrics.
    Score(ScoreArgs),
    /// Rank by one metric, de-duplicate and select candidates.
    Select(SelectArgs),
    /// Check texts against a known corpus.
    Verify(VerifyArgs),
    /// Human labels.
    #[command(subcommand)]
    Labels(LabelsCommand),
    /// Summarize labeled candidates.
    Report(ReportArgs),
    /// Export two quantities per sample as TSV for plotting.
    Scatter(ScatterArgs),
    /// Planted-canary experiments.
    #[command(subcommand)]
    Canary(CanaryCommand),
    /// How much of a known string a model reproduces after each prompt.
    Probe(ProbeArgs),
    /// Run the full attack from a TOML config.
    Run {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Subcommand)]
enum PoolCommand {
    /// One prefix line per input line with enough words.
    Build {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_words: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A model file path, or `URL#MODEL_ID` for a remote server.
#[derive(Args)]
struct ModelArg {
    #[arg(long)]
    model: String,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long, default_value = "top_n")]
    strategy: Strategy,
    #[arg(long, default_value_t = 1000)]
    num_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    first_id: u64,
    #[arg(long, default_value_t = 256)]
    max_tokens: usize,
    #[arg(long, default_value_t = 40)]
    n: usize,
    /// Temper before top-n truncation instead of after.
    #[arg(long)]
    temperature_before_truncation: bool,
    /// Context pool file, required for prefix_conditioned.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    target: String,
    #[arg(long)]
    small: Option<String>,
    #[arg(long)]
    medium: Option<String>,
    /// Comma-separated metric names; defaults to every metric the given models allow.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<MetricKind>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    scored: PathBuf,
    #[arg(long)]
    metric: MetricKind,
    #[arg(long, default_value_t = 1000)]
    pool_size: usize,
    #[arg(long, default_value_t = 100)]
    pick: usize,
    /// Output stem: writes `<stem>.csv`, `<stem>.jsonl` and `<stem>.dedup.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    normalize: bool,
    /// A single text to check.
    #[arg(long, conflicts_with = "candidates")]
    text: Option<String>,
    /// Candidate JSONL; writes auto-labels to `--out`.
    #[arg(long, requires = "out")]
    candidates: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PROXIMITY_FACTOR)]
    proximity_factor: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum LabelsCommand {
    /// Attach labels to candidates and write the labeled records.
    Import {
        #[arg(long, required = true, num_args = 1..)]
        candidates: Vec<PathBuf>,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ReportArgs {
    /// Labeled candidate JSONL files.
    #[arg(long, required = true, num_args = 1..)]
    candidates: Vec<PathBuf>,
    /// Labels to apply first, if the candidates are not yet labeled.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out_md: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Args)]
struct ScatterArgs {
    #[arg(long)]
    scored: PathBuf,
    /// Metric name or aux key, e.g. `target_perplexity`.
    #[arg(long)]
    x: String,
    #[arg(long)]
    y: String,
    /// Candidate JSONL files whose samples count as selected.
    #[arg(long, num_args = 0..)]
    candidates: Vec<PathBuf>,
    /// Label file; memorized verdicts mark samples as memorized.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum CanaryCommand {
    /// Plant canaries into a background corpus.
    Plant {
        /// Background corpus JSONL; a synthetic one is generated when absent.
        #[arg(long)]
        background: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        synthetic_docs: usize,
        /// Comma-separated copy counts, one canary each.
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_corpus: PathBuf,
        #[arg(long)]
        out_manifest: PathBuf,
    },
    /// Write the standard benchmark corpus, manifest and reference models.
    Benchmark {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Extraction matrix of models against canaries.
    Study {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        models: Vec<String>,
        #[arg(long, default_value_t = 10_000)]
        attempts: usize,
        #[arg(long, default_value_t = 40)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        beam_width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        always_check_hint: bool,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_md: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    model: ModelArg,
    /// The string the model should reproduce.
    #[arg(long)]
    truth: String,
    #[arg(long = "prompt", required = true, num_args = 1..)]
    prompts: Vec<String>,
    #[arg(long)]
    beam_width: Option<usize>,
}

fn load_model(spec: &str) -> Result<ModelHandle> {
    if spec.starts_with("http://") || spec.starts_with("https://") {
        let (url, id) = spec
            .split_once('#')
            .with_context(|| format!("remote model {spec:?} must look like URL#MODEL_ID"))?;
        let endpoint = RemoteEndpoint {
            auth_token: std::env::var(AUTH_ENV).ok(),
            ..RemoteEndpoint::new(url, id)
        };
        return Ok(Arc::new(RemoteModel::new(endpoint)?));
    }
    Ok(Arc::new(
        NgramModel::load(spec).with_context(|| format!("loading model {spec}"))?,
    ))
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    Ok(worker_pool(workers.unwrap_or(0))?.install(f))
}

fn read_candidates(paths: &[PathBuf]) -> Result<Vec<CandidateRecord>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_jsonl::<CandidateRecord>(p).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(all)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::TrainRef {
            corpus,
            order,
            model_id,
            smoothing_k,
            out,
        } => {
            let docs = Corpus::load_jsonl(&corpus, false)?;
            let config = TrainingConfig {
                smoothing_k,
                corpus_path: Some(corpus.clone()),
                ..TrainingConfig::new(order, model_id.unwrap_or_else(|| format!("ngram-{order}")))
            };
            let model = train(&config, &docs)?;
            model.save(&out)?;
            println!(
                "trained {} (order {order}, |V| = {}, {} contexts) -> {}",
                model.model_id(),
                model.alphabet_size(),
                model.context_count(),
                out.display()
            );
        }
        Command::Models { url } => {
            let client = RemoteModel::new(RemoteEndpoint {
                auth_token: std::env::var(AUTH_ENV).ok(),
                ..RemoteEndpoint::new(url, "-")
            })?;
            for m in client.list_models()? {
                println!("{}\tvocab={}", m.id, m.vocab_size);
            }
        }
        Command::Pool(PoolCommand::Build { input, min_words, out }) => {
            let pool = build_context_pool(&input, min_words)?;
            write_atomic(&out, pool.to_text().as_bytes())?;
            println!("{} prefixes -> {}", pool.len(), out.display());
        }
        Command::Generate(a) => generate(a)?,
        Command::Score(a) => score(a)?,
        Command::Select(a) => select(a)?,
        Command::Verify(a) => verify(a)?,
        Command::Labels(LabelsCommand::Import { candidates, labels, out }) => {
            let mut records = read_candidates(&candidates)?;
            let lines: Vec<LabelLine> = read_jsonl(&labels)?;
            let n = import_labels(&mut records, &lines)?;
            write_jsonl(&out, &records)?;
            println!("applied {n} labels to {} candidates -> {}", records.len(), out.display());
        }
        Command::Report(a) => {
            let mut records = read_candidates(&a.candidates)?;
            if let Some(l) = &a.labels {
                import_labels(&mut records, &read_jsonl::<LabelLine>(l)?)?;
            }
            let report = build_report(&records);
            let md = report.to_markdown();
            if let Some(p) = &a.out_md {
                write_atomic(p, md.as_bytes())?;
            }
            if let Some(p) = &a.out_json {
                write_atomic(p, &serde_json::to_vec_pretty(&report)?)?;
            }
            print!("{md}");
        }
        Command::Scatter(a) => scatter(a)?,
        Command::Canary(c) => canary(c)?,
        Command::Probe(a) => {
            let model = load_model(&a.model.model)?;
            for r in context_probe(&model, &a.truth, &a.prompts, a.beam_width)? {
                let beam = r.beam_match.map_or(String::new(), |b| format!("\tbeam={b}"));
                println!("{:?}\tgreedy={}{beam}", r.prompt, r.greedy_match);
            }
        }
        Command::Run {
            config,
            output_dir,
            workers,
        } => {
            let mut cfg = AttackConfig::load(&config)?;
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let summary = run_attack(&cfg)?;
            println!(
                "{} candidates in {} files under {} ({} stages reused)",
                summary.candidates,
                summary.candidate_files.len(),
                summary.output_dir.display(),
                summary.reused_stages
            );
            if let Some(r) = &summary.report {
                print!("{}", r.to_markdown());
            }
        }
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let model = load_model(&a.model.model)?;
    let pool = match (&a.pool, a.strategy) {
        (Some(p), _) => {
            let mut pool = build_context_pool(p, 1)?;
            pool.retain_encodable(&[&*model]);
            Some(pool)
        }
        (None, Strategy::PrefixConditioned) => bail!("prefix_conditioned needs --pool"),
        (None, _) => None,
    };
    let config = SamplerConfig {
        strategy: a.strategy,
        n: a.n,
        max_tokens: a.max_tokens,
        master_seed: a.seed,
        num_samples: a.num_samples,
        temperature_before_truncation: a.temperature_before_truncation,
        ..Default::default()
    };
    let samples = with_workers(a.workers, || sample_range(&*model, &config, pool.as_ref(), a.first_id))??;
    write_jsonl(&a.out, &samples)?;
    println!("{} samples -> {}", samples.len(), a.out.display());
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let target = load_model(&a.target)?;
    let small = a.small.as_deref().map(load_model).transpose()?;
    let medium = a.medium.as_deref().map(load_model).transpose()?;
    let metrics: Vec<MetricKind> = if a.metrics.is_empty() {
        MetricKind::ALL
            .into_iter()
            .filter(|m| match m {
                MetricKind::SmallRatio => small.is_some(),
                MetricKind::MediumRatio => medium.is_some(),
                _ => true,
            })
            .collect()
    } else {
        a.metrics
    };
    let samples = read_jsonl(&a.samples)?;
    let models = MetricModels {
        target: &*target,
        small: small.as_deref(),
        medium: medium.as_deref(),
    };
    let scored = with_workers(a.workers, || score_samples(samples, &metrics, models))??;
    write_jsonl(&a.out, &scored)?;
    println!("{} scored samples -> {}", scored.len(), a.out.display());
    Ok(())
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn select(a: SelectArgs) -> Result<()> {
    let scored: Vec<ScoredSample> = read_jsonl(&a.scored)?;
    let strategy = scored
        .first()
        .map(|s| s.sample.strategy.strategy)
        .context("no scored samples")?;
    if scored.iter().any(|s| s.sample.strategy.strategy != strategy) {
        bail!("scored file mixes sampling strategies");
    }
    let plan = SelectionPlan {
        pool_size: a.pool_size,
        pick: a.pick,
    };
    let (picked, log) = candidates_for(&scored, strategy, a.metric, plan)?;
    write_candidates_csv(with_suffix(&a.out, ".csv"), &picked)?;
    write_jsonl(with_suffix(&a.out, ".jsonl"), &picked)?;
    write_jsonl(with_suffix(&a.out, ".dedup.jsonl"), &log)?;
    println!(
        "{} candidates ({} duplicates dropped) -> {}.csv",
        picked.len(),
        log.len(),
        a.out.display()
    );
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<()> {
    let corpus = Corpus::load_jsonl(&a.corpus, a.normalize)?;
    let index = build_index(&corpus);
    if let Some(text) = &a.text {
        let exact = count_eidetic(&corpus, text)?;
        println!("exact: {} occurrences in {} documents", exact.total, exact.docs);
        match index.fuzzy_3gram_verify(text, a.proximity_factor)? {
            Verification::Confirmed { doc_id, start, span } => {
                println!("fuzzy: confirmed in {doc_id} at word {start}, span {span}")
            }
            Verification::NotFound => println!("fuzzy: not found"),
        }
        return Ok(());
    }
    let Some(path) = &a.candidates else {
        bail!("pass --text or --candidates");
    };
    let records = read_candidates(std::slice::from_ref(path))?;
    let labels = auto_label(&records, &corpus, &index, a.proximity_factor)?;
    let out = a.out.as_ref().expect("clap requires --out with --candidates");
    write_jsonl(out, &labels)?;
    let hits = labels.iter().filter(|l| l.verdict == Verdict::Memorized).count();
    println!("{hits} of {} candidates confirmed -> {}", labels.len(), out.display());
    Ok(())
}

fn scatter(a: ScatterArgs) -> Result<()> {
    let scored: Vec<ScoredSample> = read_jsonl(&a.scored)?;
    let x: Axis = a.x.parse()?;
    let y: Axis = a.y.parse()?;
    let records = read_candidates(&a.candidates)?;
    let selected: BTreeSet<u64> = records.iter().map(|r| r.sample_id).collect();
    let mut memorized = BTreeSet::new();
    if let Some(l) = &a.labels {
        let lines: Vec<LabelLine> = read_jsonl(l)?;
        let by_id: std::collections::HashMap<&str, u64> =
            records.iter().map(|r| (r.candidate_id.as_str(), r.sample_id)).collect();
        for line in lines.iter().filter(|l| l.verdict == Verdict::Memorized) {
            let id = by_id
                .get(line.candidate_id.as_str())
                .with_context(|| format!("label for unknown candidate {}", line.candidate_id))?;
            memorized.insert(*id);
        }
    }
    let tsv = export_scatter(&scored, &x, &y, &selected, &memorized)?;
    write_atomic(&a.out, tsv.as_bytes())?;
    println!("{} rows -> {}", scored.len(), a.out.display());
    Ok(())
}

fn canary(c: CanaryCommand) -> Result<()> {
    match c {
        CanaryCommand::Plant {
            background,
            synthetic_docs,
            counts,
            seed,
            out_corpus,
            out_manifest,
        } => {
            let (bg, bg_ref) = match &background {
                Some(p) => (Corpus::load_jsonl(p, false)?, p.display().to_string()),
                None => (
                    synthetic_background(
                        &BackgroundSpec {
                            documents: synthetic_docs,
                            ..Default::default()
                        },
                        seed,
                    )?,
                    format!("synthetic background, {synthetic_docs} documents, seed {seed}"),
                ),
            };
            let mut spec = CanarySpec::default();
            if !counts.is_empty() {
                spec.counts = counts;
            }
            let (corpus, manifest) = plant_canaries(&bg, &spec, seed, bg_ref)?;
            corpus.save_jsonl(&out_corpus)?;
            write_atomic(&out_manifest, &serde_json::to_vec_pretty(&manifest)?)?;
            println!(
                "planted {} canaries into {} documents -> {}",
                manifest.canaries.len(),
                corpus.len(),
                out_corpus.display()
            );
        }
        CanaryCommand::Benchmark { seed, out_dir } => {
            let bench = standard_benchmark(seed)?;
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            bench.corpus.save_jsonl(out_dir.join("corpus.jsonl"))?;
            write_atomic(out_dir.join("manifest.json"), &serde_json::to_vec_pretty(&bench.manifest)?)?;
            write_atomic(out_dir.join("digits.json"), &serde_json::to_vec_pretty(&bench.digits)?)?;
            for (model, order) in bench.train_models(&STANDARD_ORDERS)?.iter().zip(STANDARD_ORDERS) {
                model.save(out_dir.join(format!("order{order}.bin")))?;
            }
            println!("standard benchmark (seed {seed}) -> {}", out_dir.display());
        }
        CanaryCommand::Study {
            manifest,
            models,
            attempts,
            n,
            beam_width,
            seed,
            always_check_hint,
            out_csv,
            out_md,
        } => {
            let manifest: CanaryManifest = serde_json::from_slice(
                &fs::read(&manifest).with_context(|| format!("reading {}", manifest.display()))?,
            )?;
            let handles = models.iter().map(|m| load_model(m)).collect::<Result<Vec<_>>>()?;
            let config = StudyConfig {
                attempts,
                n,
                beam_width,
                seed,
                always_check_hint,
            };
            let matrix = frequency_study(&handles, &manifest, &config)?;
            if let Some(p) = &out_csv {
                write_atomic(p, &matrix.to_csv()?)?;
            }
            let md = matrix.to_markdown();
            if let Some(p) = &out_md {
                write_atomic(p, md.as_bytes())?;
            }
            print!("{md}");
        }
    }
    Ok(())
}

