//! Stage graph, staleness checks and the stage bodies.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use fire_core::attribution::{write_dump, AttributionRecord};
use fire_core::classifier::{per_class_recall, predict, train_with_log, tune, weighted_f1, Hyperparams, TreeEnsemble, Trial};
use fire_core::clustering::{
    kmeans_with_log, load_cluster_file, name_clusters, representative_phrases, save_cluster_file, ClusterKind, KMeansParams,
    RestartLog,
};
use fire_core::corpus::{dataset_stats, filter_min_interactions, load_reviews, split_dataset, DatasetSplit, DatasetStats, Review, SentimentLabel, SplitManifest};
use fire_core::evaluation::{build_report, run_judges, write_report, JudgeOutputs};
use fire_core::exec::Execution;
use fire_core::explainer::{audit_faithfulness, explain_split, ExplanationRecord};
use fire_core::extraction::{extract_corpus, ExtractionResult};
use fire_core::featurization::{featurize_split, FeatureMatrix, FeatureSpace, PhraseAssignments, TrainHistory};
use fire_core::io::{read_json, read_jsonl, sha256_file, sha256_hex, write_json, write_jsonl};
use fire_core::llm::{Gateway, GatewayStats};
use fire_core::prompts::DomainProfile;

use crate::config::RunConfig;
use crate::error::RunError;
use crate::manifest::{hash_files, now_secs, RunLock, RunManifest, StageRecord};

pub const REVIEWS: &str = "reviews.jsonl";
pub const SPLIT: &str = "split.json";
pub const STATS: &str = "stats.json";
pub const EXTRACTIONS: &str = "extractions.jsonl";
pub const EXTRACT_LOG: &str = "extract_log.json";
pub const NEEDS: &str = "needs.clu";
pub const FEATURES: &str = "features.clu";
pub const CLUSTER_LOG: &str = "cluster_log.json";
pub const TRAIN_BIN: &str = "matrix/train.bin";
pub const TRAIN_META: &str = "matrix/train.json";
pub const VALID_BIN: &str = "matrix/valid.bin";
pub const VALID_META: &str = "matrix/valid.json";
pub const TEST_BIN: &str = "matrix/test.bin";
pub const TEST_META: &str = "matrix/test.json";
pub const HYPERPARAMS: &str = "hyperparams.json";
pub const MODEL: &str = "model.fgb";
pub const MODEL_SUMMARY: &str = "model_summary.json";
pub const TRAIN_LOG: &str = "train_log.json";
pub const EXPLANATIONS: &str = "explanations.jsonl";
pub const ATTRIBUTIONS: &str = "attributions.jsonl";
pub const JUDGMENTS: &str = "judgments.json";
pub const METRICS: &str = "metrics.json";
pub const REPORT: &str = "report.json";
pub const CONSISTENCY: &str = "consistency.csv";
pub const SUMMARY: &str = "summary.txt";
pub const AUDIT: &str = "audit.json";

/// Label under which ingest records the hash of the source dataset.
const DATASET_INPUT: &str = "<dataset>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Extract,
    Cluster,
    Featurize,
    Tune,
    Train,
    Explain,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Extract,
        Stage::Cluster,
        Stage::Featurize,
        Stage::Tune,
        Stage::Train,
        Stage::Explain,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Extract => "extract",
            Stage::Cluster => "cluster",
            Stage::Featurize => "featurize",
            Stage::Tune => "tune",
            Stage::Train => "train",
            Stage::Explain => "explain",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Artifacts read from the run directory.
    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &[],
            Stage::Extract => &[REVIEWS, SPLIT],
            Stage::Cluster => &[EXTRACTIONS],
            Stage::Featurize => &[REVIEWS, SPLIT, EXTRACTIONS, NEEDS, FEATURES],
            Stage::Tune => &[TRAIN_BIN, TRAIN_META, VALID_BIN, VALID_META],
            Stage::Train => &[TRAIN_BIN, TRAIN_META, HYPERPARAMS],
            Stage::Explain => &[MODEL, TEST_BIN, TEST_META],
            Stage::Evaluate => &[EXPLANATIONS, REVIEWS, SPLIT, MODEL, TEST_BIN, TEST_META],
            Stage::Report => &[EXPLANATIONS, ATTRIBUTIONS, JUDGMENTS, METRICS],
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &[REVIEWS, SPLIT, STATS],
            Stage::Extract => &[EXTRACTIONS, EXTRACT_LOG],
            Stage::Cluster => &[NEEDS, FEATURES, CLUSTER_LOG],
            Stage::Featurize => &[TRAIN_BIN, TRAIN_META, VALID_BIN, VALID_META, TEST_BIN, TEST_META],
            Stage::Tune => &[HYPERPARAMS],
            Stage::Train => &[MODEL, MODEL_SUMMARY, TRAIN_LOG],
            Stage::Explain => &[EXPLANATIONS, ATTRIBUTIONS],
            Stage::Evaluate => &[JUDGMENTS, METRICS],
            Stage::Report => &[REPORT, CONSISTENCY, SUMMARY, AUDIT],
        }
    }

    /// The stage that writes `artifact`.
    fn owner(artifact: &str) -> Stage {
        *Stage::ALL
            .iter()
            .find(|s| s.outputs().contains(&artifact))
            .expect("every input is some stage's output")
    }

    /// Every stage this one transitively reads from, in pipeline order.
    pub fn ancestors(self) -> Vec<Stage> {
        let mut found = BTreeSet::new();
        let mut queue = vec![self];
        while let Some(s) = queue.pop() {
            for input in s.inputs() {
                let up = Stage::owner(input);
                if found.insert(up) {
                    queue.push(up);
                }
            }
        }
        found.into_iter().collect()
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Fresh,
    Stale(String),
    Missing(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunOutcome {
    pub stages: Vec<(Stage, Action)>,
    pub gateway: GatewayStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Run one stage; `None` runs every stage that is not up to date.
    pub stage: Option<Stage>,
    /// Re-run even when up to date, and ignore stale upstream stages.
    pub force: bool,
}

/// Ingest counts before and after the interaction filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub loaded: usize,
    pub kept: usize,
    pub split_sizes: [usize; 3],
    pub split_warnings: Vec<String>,
    pub stats: DatasetStats,
}

/// Phrase-count histograms over extracted reviews: count to number of reviews.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtractLog {
    pub reviews: usize,
    pub failures: usize,
    pub needs_per_review: BTreeMap<usize, usize>,
    pub features_per_review: BTreeMap<usize, usize>,
}

impl ExtractLog {
    pub fn from_results(results: &[ExtractionResult]) -> Self {
        let mut log = ExtractLog {
            reviews: results.len(),
            ..ExtractLog::default()
        };
        for r in results {
            if r.failure.is_some() {
                log.failures += 1;
                continue;
            }
            *log.needs_per_review.entry(r.user_needs.len()).or_default() += 1;
            *log.features_per_review.entry(r.item_features.len()).or_default() += 1;
        }
        log
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindLog {
    pub phrases: usize,
    pub k: usize,
    pub best_restart: usize,
    pub inertia: f64,
    pub restarts: Vec<RestartLog>,
    pub naming_failures: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLog {
    pub needs: KindLog,
    pub features: KindLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparamChoice {
    /// "config" or "tuned".
    pub source: String,
    pub params: Hyperparams,
    pub best_valid_f1: Option<f64>,
    pub trials: Vec<Trial>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: usize,
    pub train_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub test_rows: usize,
    pub weighted_f1: f64,
    /// Indexed by class (negative, neutral, positive).
    pub per_class_recall: [Option<f64>; 3],
}

struct Ctx<'a> {
    config: &'a RunConfig,
    dir: PathBuf,
    exec: Execution,
    profile: DomainProfile,
    gateway: Gateway,
}

impl Ctx<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn load_split(&self) -> Result<DatasetSplit, RunError> {
        let reviews: Vec<Review> = read_jsonl(&self.path(REVIEWS))?;
        let manifest: SplitManifest = read_json(&self.path(SPLIT))?;
        Ok(DatasetSplit::from_manifest(&manifest, &reviews)?)
    }

    fn load_matrix(&self, bin: &str, meta: &str) -> Result<FeatureMatrix, RunError> {
        Ok(FeatureMatrix::load(&self.path(bin), &self.path(meta))?)
    }
}

/// Fields of the gateway config that change what the backend answers.
fn gateway_identity(config: &RunConfig) -> Value {
    let g = config.gateway_config();
    json!({
        "backend": g.backend,
        "base_url": g.base_url,
        "model_name": g.model_name,
        "embedding_model": g.embedding_model,
        "sentiment_model": g.sentiment_model,
        "judge_temperature": g.judge_temperature,
        "generation_temperature": g.generation_temperature,
        "seed": g.seed,
        "mock_fault_rate": g.mock_fault_rate,
    })
}

/// The configuration slice each stage depends on.
pub fn stage_params(stage: Stage, config: &RunConfig, profile: &DomainProfile) -> Value {
    let c = config;
    match stage {
        Stage::Ingest => json!({
            "format": c.dataset.format,
            "min_interactions": c.dataset.min_interactions,
            "split": c.dataset.split,
            "seed": c.run.seed,
        }),
        Stage::Extract => json!({ "profile": profile, "gateway": gateway_identity(c) }),
        Stage::Cluster => json!({
            "k_u": c.k_u(),
            "k_i": c.k_i(),
            "max_iter": c.max_iter(),
            "restarts": c.clustering.restarts,
            "representatives": c.clustering.representatives,
            "seed": c.run.seed,
            "profile": profile,
            "gateway": gateway_identity(c),
        }),
        Stage::Featurize => json!({ "gateway": gateway_identity(c) }),
        Stage::Tune => json!({
            "params": c.hyperparams(),
            "tune_budget": c.classifier.tune_budget,
            "search": c.classifier.search,
            "seed": c.run.seed,
        }),
        Stage::Train => json!({ "seed": c.run.seed }),
        Stage::Explain => json!({
            "top_k": c.explainer.top_k,
            "profile": profile,
            "gateway": gateway_identity(c),
        }),
        Stage::Evaluate => json!({ "profile": profile, "gateway": gateway_identity(c) }),
        Stage::Report => json!({}),
    }
}

fn params_hash(stage: Stage, config: &RunConfig, profile: &DomainProfile) -> String {
    sha256_hex(stage_params(stage, config, profile).to_string().as_bytes())
}

fn current_inputs(stage: Stage, dir: &Path, config: &RunConfig) -> BTreeMap<String, Option<String>> {
    let mut inputs = hash_files(dir, &stage.inputs().iter().map(|s| s.to_string()).collect::<Vec<_>>());
    if stage == Stage::Ingest {
        inputs.insert(DATASET_INPUT.into(), sha256_file(&config.dataset.path).ok());
    }
    inputs
}

/// Whether `stage` would produce different outputs if run now.
pub fn stage_status(stage: Stage, dir: &Path, manifest: &RunManifest, config: &RunConfig, profile: &DomainProfile) -> Status {
    if let Some(missing) = stage.outputs().iter().find(|o| !dir.join(o).is_file()) {
        return Status::Missing(dir.join(missing));
    }
    let Some(record) = manifest.stages.get(stage.name()) else {
        return Status::Stale("no completion record".into());
    };
    if record.params_hash != params_hash(stage, config, profile) {
        return Status::Stale("parameters changed".into());
    }
    let inputs = current_inputs(stage, dir, config);
    for (label, hash) in &inputs {
        if hash.as_ref() != record.inputs.get(label) {
            return Status::Stale(format!("input {label} changed"));
        }
    }
    let outputs = hash_files(dir, &stage.outputs().iter().map(|s| s.to_string()).collect::<Vec<_>>());
    for (label, hash) in &outputs {
        if hash.as_ref() != record.outputs.get(label) {
            return Status::Stale(format!("output {label} was modified"));
        }
    }
    Status::Fresh
}

/// Runs one stage or the whole pipeline against `config`.
pub fn run(config: &RunConfig, options: RunOptions) -> Result<RunOutcome, RunError> {
    config.validate()?;
    let profile = config.profile()?;
    let dir = config.run.output_dir.clone();
    let _lock = RunLock::acquire(&dir)?;
    let mut manifest = RunManifest::load_or_default(&dir)?;
    manifest.tool_version = env!("CARGO_PKG_VERSION").into();
    manifest.config = serde_json::to_value(config)?;

    if let Some(stage) = options.stage {
        for up in stage.ancestors() {
            match stage_status(up, &dir, &manifest, config, &profile) {
                Status::Fresh => {}
                Status::Missing(path) => {
                    return Err(RunError::MissingUpstream {
                        stage: stage.name(),
                        upstream: up.name(),
                        missing: path,
                    })
                }
                Status::Stale(reason) if options.force => {
                    log::warn!("{up} is out of date ({reason}); continuing because of --force");
                }
                Status::Stale(reason) => {
                    log::error!("{up} is out of date: {reason}");
                    return Err(RunError::Stale {
                        stage: stage.name(),
                        upstream: up.name(),
                    });
                }
            }
        }
    }

    let gateway = Gateway::from_config(config.gateway_config())?;
    let ctx = Ctx {
        config,
        dir: dir.clone(),
        exec: if config.run.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        },
        profile,
        gateway,
    };

    let stages: Vec<Stage> = match options.stage {
        Some(s) => vec![s],
        None => Stage::ALL.to_vec(),
    };
    let mut outcome = RunOutcome::default();
    for stage in stages {
        if !options.force && stage_status(stage, &dir, &manifest, config, &ctx.profile) == Status::Fresh {
            log::info!("{stage}: up to date");
            outcome.stages.push((stage, Action::UpToDate));
            continue;
        }
        log::info!("{stage}: running");
        let inputs = current_inputs(stage, &dir, config);
        run_stage(stage, &ctx)?;
        let outputs = hash_files(&dir, &stage.outputs().iter().map(|s| s.to_string()).collect::<Vec<_>>());
        let record = StageRecord {
            params_hash: params_hash(stage, config, &ctx.profile),
            inputs: inputs.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect(),
            outputs: outputs
                .into_iter()
                .map(|(k, v)| v.map(|v| (k.clone(), v)).ok_or_else(|| RunError::Other(format!("{stage} did not write {k}"))))
                .collect::<Result<_, _>>()?,
            completed_at: now_secs(),
        };
        manifest.stages.insert(stage.name().into(), record);
        manifest.save(&dir)?;
        outcome.stages.push((stage, Action::Ran));
    }
    outcome.gateway = ctx.gateway.stats();
    Ok(outcome)
}

fn run_stage(stage: Stage, ctx: &Ctx) -> Result<(), RunError> {
    match stage {
        Stage::Ingest => ingest(ctx),
        Stage::Extract => extract(ctx),
        Stage::Cluster => cluster(ctx),
        Stage::Featurize => featurize(ctx),
        Stage::Tune => tune_stage(ctx),
        Stage::Train => train_stage(ctx),
        Stage::Explain => explain(ctx),
        Stage::Evaluate => evaluate(ctx),
        Stage::Report => report(ctx),
    }
}

fn ingest(ctx: &Ctx) -> Result<(), RunError> {
    let c = ctx.config;
    let format = c.corpus_format().map_err(|e| RunError::Config(vec![e]))?;
    let loaded = load_reviews(&c.dataset.path, format)?;
    let reviews = filter_min_interactions(&loaded, c.dataset.min_interactions);
    if reviews.is_empty() {
        return Err(RunError::Other(format!(
            "no reviews left after requiring {} interactions per user and item",
            c.dataset.min_interactions
        )));
    }
    let split = split_dataset(&reviews, c.dataset.split, c.run.seed);
    for w in &split.warnings {
        log::warn!("{w}");
    }
    let summary = IngestSummary {
        loaded: loaded.len(),
        kept: reviews.len(),
        split_sizes: [split.train.len(), split.valid.len(), split.test.len()],
        split_warnings: split.warnings.clone(),
        stats: dataset_stats(&reviews)?,
    };
    write_jsonl(&ctx.path(REVIEWS), &reviews)?;
    write_json(&ctx.path(SPLIT), &split.manifest())?;
    write_json(&ctx.path(STATS), &summary)?;
    Ok(())
}

fn extract(ctx: &Ctx) -> Result<(), RunError> {
    let split = ctx.load_split()?;
    let results = extract_corpus(&ctx.profile, &split.train, &ctx.gateway)?;
    write_jsonl(&ctx.path(EXTRACTIONS), &results)?;
    write_json(&ctx.path(EXTRACT_LOG), &ExtractLog::from_results(&results))?;
    Ok(())
}

fn cluster_kind(ctx: &Ctx, kind: ClusterKind, phrases: Vec<String>, k: usize, path: &str) -> Result<KindLog, RunError> {
    let c = ctx.config;
    let vectors: Vec<Vec<f64>> = ctx.gateway.embed(&phrases)?.into_iter().map(|e| e.values).collect();
    let params = KMeansParams {
        k,
        max_iter: c.max_iter(),
        restarts: c.clustering.restarts,
        seed: c.run.seed,
    };
    let fit = kmeans_with_log(kind, &vectors, &params, ctx.exec)?;
    let naming = representative_phrases(&fit.model, &phrases, &vectors, c.clustering.representatives)?;
    let naming = name_clusters(naming, &ctx.profile, &ctx.gateway);
    if !naming.failures.is_empty() {
        log::warn!("{} {} clusters fell back to placeholder names", naming.failures.len(), kind.tag());
    }
    save_cluster_file(&ctx.path(path), &fit.model, &naming)?;
    Ok(KindLog {
        phrases: phrases.len(),
        k,
        best_restart: fit.best_restart,
        inertia: fit.model.inertia,
        restarts: fit.restarts,
        naming_failures: naming.failures,
    })
}

fn cluster(ctx: &Ctx) -> Result<(), RunError> {
    let extractions: Vec<ExtractionResult> = read_jsonl(&ctx.path(EXTRACTIONS))?;
    let needs: BTreeSet<String> = extractions.iter().flat_map(|e| e.user_needs.iter().cloned()).collect();
    let features: BTreeSet<String> = extractions.iter().flat_map(|e| e.item_features.iter().cloned()).collect();
    let log = ClusterLog {
        needs: cluster_kind(ctx, ClusterKind::UserNeeds, needs.into_iter().collect(), ctx.config.k_u(), NEEDS)?,
        features: cluster_kind(ctx, ClusterKind::ItemFeatures, features.into_iter().collect(), ctx.config.k_i(), FEATURES)?,
    };
    write_json(&ctx.path(CLUSTER_LOG), &log)?;
    Ok(())
}

fn featurize(ctx: &Ctx) -> Result<(), RunError> {
    let split = ctx.load_split()?;
    let extractions: Vec<ExtractionResult> = read_jsonl(&ctx.path(EXTRACTIONS))?;
    let (need_model, need_naming) = load_cluster_file(&ctx.path(NEEDS))?;
    let (feature_model, feature_naming) = load_cluster_file(&ctx.path(FEATURES))?;
    let assignments = PhraseAssignments::from_models(&extractions, &need_model, &feature_model, &ctx.gateway)?;
    let history = TrainHistory::build(&split.train, &extractions, &assignments)?;
    let space = FeatureSpace::from_namings(&need_naming, &feature_naming);
    let m = featurize_split(&split, &history, &space, ctx.exec);
    m.train.save(&ctx.path(TRAIN_BIN), &ctx.path(TRAIN_META))?;
    m.valid.save(&ctx.path(VALID_BIN), &ctx.path(VALID_META))?;
    m.test.save(&ctx.path(TEST_BIN), &ctx.path(TEST_META))?;
    Ok(())
}

fn tune_stage(ctx: &Ctx) -> Result<(), RunError> {
    let c = ctx.config;
    let choice = if c.classifier.tune_budget == 0 {
        HyperparamChoice {
            source: "config".into(),
            params: c.hyperparams(),
            best_valid_f1: None,
            trials: Vec::new(),
        }
    } else {
        let train = ctx.load_matrix(TRAIN_BIN, TRAIN_META)?.to_dataset()?;
        let valid = ctx.load_matrix(VALID_BIN, VALID_META)?;
        if valid.is_empty() {
            return Err(RunError::Other("tuning needs a non-empty validation split".into()));
        }
        let result = tune(&train, &valid.to_dataset()?, &c.classifier.search, c.classifier.tune_budget, c.run.seed, ctx.exec)?;
        HyperparamChoice {
            source: "tuned".into(),
            params: result.best,
            best_valid_f1: Some(result.best_f1),
            trials: result.trials,
        }
    };
    write_json(&ctx.path(HYPERPARAMS), &choice)?;
    Ok(())
}

fn train_stage(ctx: &Ctx) -> Result<(), RunError> {
    let data = ctx.load_matrix(TRAIN_BIN, TRAIN_META)?.to_dataset()?;
    let choice: HyperparamChoice = read_json(&ctx.path(HYPERPARAMS))?;
    let trained = train_with_log(&data, &choice.params, ctx.config.run.seed, ctx.exec)?;
    trained.ensemble.save(&ctx.path(MODEL))?;
    write_json(&ctx.path(MODEL_SUMMARY), &trained.ensemble.summary())?;
    write_json(
        &ctx.path(TRAIN_LOG),
        &TrainLog {
            rows: data.n_rows(),
            train_loss: trained.train_loss,
        },
    )?;
    Ok(())
}

fn explain(ctx: &Ctx) -> Result<(), RunError> {
    let model = TreeEnsemble::load(&ctx.path(MODEL))?;
    let test = ctx.load_matrix(TEST_BIN, TEST_META)?;
    let explained = explain_split(&model, &test, &ctx.profile, &ctx.gateway, ctx.config.explainer.top_k)?;
    let dump: Vec<AttributionRecord> = explained
        .iter()
        .map(|e| AttributionRecord::new(&e.record.review_id, &e.attribution, e.record.top_features.clone()))
        .collect();
    let records: Vec<ExplanationRecord> = explained.into_iter().map(|e| e.record).collect();
    write_jsonl(&ctx.path(EXPLANATIONS), &records)?;
    write_dump(&ctx.path(ATTRIBUTIONS), &dump)?;
    Ok(())
}

fn evaluate(ctx: &Ctx) -> Result<(), RunError> {
    let model = TreeEnsemble::load(&ctx.path(MODEL))?;
    let test = ctx.load_matrix(TEST_BIN, TEST_META)?;
    let predictions: Vec<SentimentLabel> = test
        .rows
        .iter()
        .map(|r| predict(&model, &r.values))
        .collect::<Result<_, _>>()?;
    let metrics = Metrics {
        test_rows: test.len(),
        weighted_f1: weighted_f1(&predictions, &test.labels)?,
        per_class_recall: per_class_recall(&predictions, &test.labels)?,
    };
    let records: Vec<ExplanationRecord> = read_jsonl(&ctx.path(EXPLANATIONS))?;
    let split = ctx.load_split()?;
    let judges = run_judges(&records, &split.test, &ctx.profile, &ctx.gateway)?;
    write_json(&ctx.path(JUDGMENTS), &judges)?;
    write_json(&ctx.path(METRICS), &metrics)?;
    Ok(())
}

fn report(ctx: &Ctx) -> Result<(), RunError> {
    let records: Vec<ExplanationRecord> = read_jsonl(&ctx.path(EXPLANATIONS))?;
    let dump: Vec<AttributionRecord> = read_jsonl(&ctx.path(ATTRIBUTIONS))?;
    let judges: JudgeOutputs = read_json(&ctx.path(JUDGMENTS))?;
    let metrics: Metrics = read_json(&ctx.path(METRICS))?;
    let report = build_report(&records, metrics.weighted_f1, &judges)?;
    write_report(&ctx.dir, &report)?;
    let audit = audit_faithfulness(&records, &dump);
    if !audit.passed() {
        log::warn!("faithfulness audit found {} violations", audit.violations.len());
    }
    write_json(&ctx.path(AUDIT), &audit)?;
    Ok(())
}
