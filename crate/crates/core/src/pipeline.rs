//! Stage orchestration: each stage reads its inputs from the corpus files or
//! from earlier stage artifacts under `out_dir`, writes JSON artifacts, and
//! reports soft failures instead of aborting on them.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! corpus/{interactions,catalog,queries}.jsonl   ingest_report.json
//! memory/local.jsonl  memory/global.jsonl        memory/global_aspects.json
//! index_local_report.json                        index_global_report.json
//! traces/recommend_<query>.json
//! eval/report.json    eval/traces/<query>.json
//! grpo/verify_report.json                        grpo/group_<query>.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{recommend, AgentContext, AgentError, ReasoningTrace};
use crate::config::{ChatBackend, EmbeddingBackend, RunConfig};
use crate::corpus::{
    self, group_by_user, partition_by_category, simplify_query, unresolved_queries, Catalog,
    CorpusError, InteractionRecord, QueryRecord,
};
use crate::evaluator::{evaluate_queryset, render_table, EvalError, EvalOptions, EvalReport};
use crate::gateway::{
    ChatModel, ChatSettings, Embedder, GatewayError, HashEmbedder, HttpGateway, HttpSettings, Llm,
    MeteredChat, RetryPolicy, ScriptedGateway, Usage,
};
use crate::grpo::{
    export_group, run_verification, GrpoError, RolloutGroup, VerifyConfig, VerifyReport,
};
use crate::indexer::{build_global_memory, build_local_memory, GlobalAspectMap, ScenarioFailure};
use crate::memory::{MemoryEntry, MemoryError, MemoryScope, MemoryStore, StoreStats};
use crate::retriever::{
    search_items, search_memory, CatalogIndex, RetrievalBackend, RetrievalError, Retriever,
};
use crate::reward::{combined_reward, RankedList};
use crate::seed::derive_seed;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("usage: {0}")]
    Usage(String),
    #[error("corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("memory: {0}")]
    Memory(#[from] MemoryError),
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("query {query_id}: {error}")]
    Agent { query_id: String, error: AgentError },
    #[error("grpo: {0}")]
    Grpo(#[from] GrpoError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{0}")]
    Data(String),
    #[error("verification failed; see {0}")]
    VerificationFailed(String),
}

impl PipelineError {
    /// 1 usage/config, 2 data, 3 gateway.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Usage(_) => 1,
            PipelineError::Gateway(_) | PipelineError::Corpus(CorpusError::Gateway(_)) => 3,
            PipelineError::Retrieval(RetrievalError::Embedding(_)) => 3,
            PipelineError::Agent { error, .. } if error.is_gateway() => 3,
            _ => 2,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Pretty JSON with a trailing newline; parent directories are created.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// Keeps `[A-Za-z0-9_.-]`, replacing everything else with `_`.
pub fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Omit wall-clock durations from reports.
    pub deterministic: bool,
    pub jobs: usize,
}

/// What a stage produced.
#[derive(Clone, Debug, Default)]
pub struct StageOutput {
    pub artifacts: Vec<PathBuf>,
    pub soft_failures: usize,
    pub message: String,
}

impl StageOutput {
    fn merge(&mut self, other: StageOutput) {
        self.artifacts.extend(other.artifacts);
        self.soft_failures += other.soft_failures;
        if !other.message.is_empty() {
            if !self.message.is_empty() {
                self.message.push('\n');
            }
            self.message.push_str(&other.message);
        }
    }
}

/// Script file names per stage for the scripted backend.
pub mod stage {
    pub const INGEST: &str = "ingest";
    pub const INDEX_LOCAL: &str = "index_local";
    pub const INDEX_GLOBAL: &str = "index_global";
    pub const RECOMMEND: &str = "recommend";
    pub const EVAL: &str = "eval";
    pub const GRPO: &str = "grpo";
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct IngestReport {
    pub seed: u64,
    pub interactions: usize,
    pub users: usize,
    pub items: usize,
    pub queries: usize,
    pub interactions_per_category: BTreeMap<String, usize>,
    pub queries_per_scenario: BTreeMap<String, usize>,
    pub unresolved_queries: Vec<String>,
    pub unknown_interaction_items: Vec<String>,
    pub simplified: usize,
    pub simplify_failures: Vec<String>,
    pub llm_calls: usize,
    pub usage: Usage,
    pub duration_secs: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct IndexReport {
    pub seed: u64,
    pub tier: String,
    /// Users (local) or scenarios (global) covered.
    pub units: usize,
    pub entries: usize,
    pub entries_by_tier: BTreeMap<String, usize>,
    pub failures: Vec<String>,
    pub llm_calls: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub input_tokens_per_entry: Option<f64>,
    pub output_tokens_per_entry: Option<f64>,
    pub embedded_entries: usize,
    pub duration_secs: Option<f64>,
    pub secs_per_entry: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct IngestArgs {
    pub interactions: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub simplify: bool,
}

#[derive(Clone, Debug, Default)]
pub struct IndexLocalArgs {
    /// Restrict to these users; all users when empty.
    pub users: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct IndexGlobalArgs {
    pub scenarios: Vec<String>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default)]
pub struct RecommendArgs {
    pub query_id: String,
    pub k: Option<usize>,
    pub trace: Option<PathBuf>,
    pub queries: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalArgs {
    pub queries: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mpc_mrc: bool,
    pub judge_model: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SearchArgs {
    pub backend: Option<RetrievalBackend>,
    pub k: usize,
    pub query: String,
    /// Search this user's local memory instead of the catalog.
    pub user: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct GrpoVerifyArgs {
    /// Run a group of rollouts for this query and export it.
    pub export_group: Option<String>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SearchResult {
    pub rank: usize,
    pub id: String,
    pub text: String,
}

/// Chat model and embedder for one stage.
struct Backends {
    chat: Box<dyn ChatModel>,
    embedder: Box<dyn Embedder>,
}

pub struct Pipeline {
    cfg: RunConfig,
    opts: RunOptions,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, opts: RunOptions) -> Self {
        Self { cfg, opts }
    }

    pub fn from_config_file(path: &Path, opts: RunOptions) -> Result<Self, PipelineError> {
        Ok(Self::new(RunConfig::load(path)?, opts))
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn out_path(&self, rel: &str) -> PathBuf {
        self.cfg.out_dir().join(rel)
    }

    fn jobs(&self) -> usize {
        self.opts.jobs.max(1)
    }

    fn elapsed(&self, start: Instant) -> Option<f64> {
        (!self.opts.deterministic).then(|| start.elapsed().as_secs_f64())
    }

    fn chat_settings(&self) -> ChatSettings {
        ChatSettings {
            model: self.cfg.gateway.chat_model.clone(),
            temperature: self.cfg.gateway.temperature,
            max_tokens: self.cfg.gateway.max_tokens,
        }
    }

    fn http(&self) -> Result<HttpGateway, PipelineError> {
        let g = &self.cfg.gateway;
        let endpoint = g
            .endpoint
            .clone()
            .ok_or_else(|| PipelineError::Usage("gateway.endpoint is not set".into()))?;
        let api_key = g.api_key_env.as_ref().and_then(|v| std::env::var(v).ok());
        Ok(HttpGateway::new(HttpSettings {
            endpoint,
            api_key,
            embedding_model: self.cfg.embedding.model.clone(),
            embedding_dim: self.cfg.embedding.dim,
            timeout: Duration::from_secs(g.timeout_secs),
            retry: RetryPolicy {
                max_retries: g.max_retries,
                ..RetryPolicy::default()
            },
        })?)
    }

    fn backends(&self, stage_name: &str) -> Result<Backends, PipelineError> {
        let chat: Box<dyn ChatModel> = match self.cfg.gateway.backend {
            ChatBackend::Http => Box::new(self.http()?),
            ChatBackend::Scripted => {
                let dir = self.cfg.resolve(
                    self.cfg
                        .gateway
                        .script_dir
                        .as_deref()
                        .unwrap_or(Path::new(".")),
                );
                let path = dir.join(format!("{stage_name}.json"));
                if path.exists() {
                    Box::new(ScriptedGateway::from_file(&path)?)
                } else {
                    Box::new(ScriptedGateway::new(Vec::new()))
                }
            }
        };
        let embedder: Box<dyn Embedder> = match self.cfg.embedding.backend {
            EmbeddingBackend::Http => Box::new(self.http()?),
            EmbeddingBackend::Hash => Box::new(HashEmbedder::new(
                self.cfg.embedding.dim,
                derive_seed(self.cfg.seed, "embedding"),
            )),
        };
        Ok(Backends { chat, embedder })
    }

    fn interactions(&self) -> Result<Vec<InteractionRecord>, PipelineError> {
        Ok(corpus::load_interactions(
            &self.cfg.resolve(&self.cfg.corpus.interactions),
        )?)
    }

    fn catalog(&self) -> Result<Catalog, PipelineError> {
        Ok(corpus::load_catalog(
            &self.cfg.resolve(&self.cfg.corpus.catalog),
        )?)
    }

    fn queries(&self, over: Option<&Path>) -> Result<Vec<QueryRecord>, PipelineError> {
        let path = match over {
            Some(p) => p.to_path_buf(),
            None => self.cfg.resolve(&self.cfg.corpus.queries),
        };
        Ok(corpus::load_queries(&path)?)
    }

    fn local_store_path(&self) -> PathBuf {
        self.out_path("memory/local.jsonl")
    }

    fn global_store_path(&self) -> PathBuf {
        self.out_path("memory/global.jsonl")
    }

    /// Local and global stores merged; fails when neither has been built.
    pub fn load_store(&self) -> Result<MemoryStore, PipelineError> {
        let mut store = MemoryStore::new(self.cfg.embedding.dim);
        let mut found = false;
        for path in [self.local_store_path(), self.global_store_path()] {
            if path.exists() {
                found = true;
                let part = MemoryStore::load(&path)?;
                store.put_entries(part.entries().cloned())?;
            }
        }
        if !found {
            return Err(PipelineError::Data(format!(
                "no memory store under {}; run `memrec index local` first",
                self.out_path("memory").display()
            )));
        }
        Ok(store)
    }

    fn embed_if_dense(
        &self,
        retriever: &Retriever<'_>,
        entries: &mut [MemoryEntry],
    ) -> Result<usize, PipelineError> {
        if self.cfg.retrieval.backend != RetrievalBackend::Dense || entries.is_empty() {
            return Ok(0);
        }
        retriever.embed_entries(entries)?;
        Ok(entries.len())
    }

    pub fn ingest(&self, args: &IngestArgs) -> Result<StageOutput, PipelineError> {
        let start = Instant::now();
        let resolve =
            |o: &Option<PathBuf>, d: &Path| o.clone().unwrap_or_else(|| self.cfg.resolve(d));
        let interactions =
            corpus::load_interactions(&resolve(&args.interactions, &self.cfg.corpus.interactions))?;
        let catalog = corpus::load_catalog(&resolve(&args.catalog, &self.cfg.corpus.catalog))?;
        let mut queries = corpus::load_queries(&resolve(&args.queries, &self.cfg.corpus.queries))?;

        let backends = self.backends(stage::INGEST)?;
        let metered = MeteredChat::new(backends.chat.as_ref());
        let settings = self.chat_settings();
        let mut simplified = 0;
        let mut simplify_failures = Vec::new();
        if args.simplify {
            let llm = Llm::new(&metered, &settings);
            for q in &mut queries {
                match simplify_query(&q.query_text, llm) {
                    Ok(text) => {
                        q.query_text = text;
                        simplified += 1;
                    }
                    Err(e) => simplify_failures.push(format!("{}: {e}", q.query_id)),
                }
            }
        }

        let unresolved: Vec<String> = unresolved_queries(&queries, &catalog)
            .iter()
            .map(|q| q.query_id.clone())
            .collect();
        let unknown: Vec<String> = interactions
            .iter()
            .filter(|r| !catalog.contains(&r.item_id))
            .map(|r| format!("{}/{}", r.user_id, r.item_id))
            .collect();
        let mut per_scenario = BTreeMap::new();
        for q in &queries {
            *per_scenario.entry(q.scenario.clone()).or_insert(0) += 1;
        }
        let report = IngestReport {
            seed: self.cfg.seed,
            interactions: interactions.len(),
            users: group_by_user(&interactions).len(),
            items: catalog.len(),
            queries: queries.len(),
            interactions_per_category: partition_by_category(&interactions)
                .into_iter()
                .map(|(c, v)| (c, v.len()))
                .collect(),
            queries_per_scenario: per_scenario,
            unresolved_queries: unresolved,
            unknown_interaction_items: unknown,
            simplified,
            simplify_failures,
            llm_calls: metered.calls(),
            usage: metered.usage(),
            duration_secs: self.elapsed(start),
        };

        let dir = self.out_path("corpus");
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let paths = [
            dir.join("interactions.jsonl"),
            dir.join("catalog.jsonl"),
            dir.join("queries.jsonl"),
        ];
        corpus::write_jsonl(&paths[0], &interactions)?;
        corpus::write_jsonl(&paths[1], catalog.items())?;
        corpus::write_jsonl(&paths[2], &queries)?;
        let report_path = self.out_path("ingest_report.json");
        write_json(&report_path, &report)?;

        let soft = report.unresolved_queries.len()
            + report.unknown_interaction_items.len()
            + report.simplify_failures.len();
        let mut artifacts = paths.to_vec();
        artifacts.push(report_path);
        Ok(StageOutput {
            artifacts,
            soft_failures: soft,
            message: format!(
                "ingested {} interactions, {} items, {} queries ({} simplified, {} unresolved)",
                report.interactions,
                report.items,
                report.queries,
                simplified,
                report.unresolved_queries.len()
            ),
        })
    }

    pub fn index_local(&self, args: &IndexLocalArgs) -> Result<StageOutput, PipelineError> {
        let start = Instant::now();
        let interactions = self.interactions()?;
        let catalog = self.catalog()?;
        let mut users = group_by_user(&interactions);
        if !args.users.is_empty() {
            if let Some(u) = args.users.iter().find(|u| !users.contains_key(*u)) {
                return Err(PipelineError::Data(format!("unknown user {u}")));
            }
            users.retain(|u, _| args.users.contains(u));
        }

        let backends = self.backends(stage::INDEX_LOCAL)?;
        let metered = MeteredChat::new(backends.chat.as_ref());
        let settings = self.chat_settings();
        let llm = Llm::new(&metered, &settings);
        let chunk = self.cfg.chunking;
        let build = |(user, recs): (&String, &Vec<InteractionRecord>)| {
            build_local_memory(user, recs, &catalog, llm, chunk)
        };
        let results: Vec<_> = if self.jobs() > 1 && !metered.is_sequential() {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.jobs())
                .build()
                .map_err(|e| PipelineError::Data(e.to_string()))?;
            pool.install(|| users.par_iter().map(build).collect())
        } else {
            users.iter().map(build).collect()
        };

        let mut entries = Vec::new();
        let mut failures = Vec::new();
        for ((user, _), result) in users.iter().zip(results) {
            match result {
                Ok(mem) => {
                    entries.extend(mem.entries);
                    failures.extend(mem.failures);
                }
                Err(e) => failures.push(format!("user {user}: {e}")),
            }
        }
        let retriever = Retriever::new(self.cfg.retrieval.backend, backends.embedder.as_ref());
        let embedded = self.embed_if_dense(&retriever, &mut entries)?;
        let mut store = MemoryStore::new(self.cfg.embedding.dim);
        store.put_entries(entries)?;

        let store_path = self.local_store_path();
        if let Some(dir) = store_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        store.persist(&store_path)?;
        let report = self.index_report(
            "local",
            users.len(),
            &store,
            failures,
            &metered,
            embedded,
            start,
        );
        let report_path = self.out_path("index_local_report.json");
        write_json(&report_path, &report)?;
        Ok(StageOutput {
            message: format!(
                "indexed {} users into {} entries ({} failures)",
                report.units,
                report.entries,
                report.failures.len()
            ),
            soft_failures: report.failures.len(),
            artifacts: vec![store_path, report_path],
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn index_report(
        &self,
        tier: &str,
        units: usize,
        store: &MemoryStore,
        failures: Vec<String>,
        metered: &MeteredChat<'_>,
        embedded: usize,
        start: Instant,
    ) -> IndexReport {
        let stats = store.stats();
        let usage = metered.usage();
        let per_entry = |x: f64| (stats.total > 0).then(|| x / stats.total as f64);
        let duration = self.elapsed(start);
        IndexReport {
            seed: self.cfg.seed,
            tier: tier.to_string(),
            units,
            entries: stats.total,
            entries_by_tier: stats.by_tier,
            failures,
            llm_calls: metered.calls(),
            input_tokens: usage.prompt_tokens,
            output_tokens: usage.completion_tokens,
            input_tokens_per_entry: per_entry(usage.prompt_tokens as f64),
            output_tokens_per_entry: per_entry(usage.completion_tokens as f64),
            embedded_entries: embedded,
            duration_secs: duration,
            secs_per_entry: duration.and_then(per_entry),
        }
    }

    pub fn index_global(&self, args: &IndexGlobalArgs) -> Result<StageOutput, PipelineError> {
        let start = Instant::now();
        let catalog = self.catalog()?;
        let mut queries = self.queries(None)?;
        if !args.scenarios.is_empty() {
            queries.retain(|q| args.scenarios.contains(&q.scenario));
            if queries.is_empty() {
                return Err(PipelineError::Data(format!(
                    "no queries in scenarios {:?}",
                    args.scenarios
                )));
            }
        }
        let seed = args.seed.unwrap_or(self.cfg.seed);
        let backends = self.backends(stage::INDEX_GLOBAL)?;
        let metered = MeteredChat::new(backends.chat.as_ref());
        let settings = self.chat_settings();
        let llm = Llm::new(&metered, &settings);
        let mut outcome =
            build_global_memory(&queries, &catalog, &self.cfg.global_memory(), llm, seed);

        let retriever = Retriever::new(self.cfg.retrieval.backend, backends.embedder.as_ref());
        let embedded = self.embed_if_dense(&retriever, &mut outcome.entries)?;
        let mut store = MemoryStore::new(self.cfg.embedding.dim);
        store.put_entries(outcome.entries)?;

        let store_path = self.global_store_path();
        if let Some(dir) = store_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        store.persist(&store_path)?;
        let maps_path = self.out_path("memory/global_aspects.json");
        write_json(&maps_path, &outcome.maps)?;
        let failures: Vec<String> = outcome
            .failures
            .iter()
            .map(describe_scenario_failure)
            .collect();
        let mut report = self.index_report(
            "global",
            outcome.maps.len(),
            &store,
            failures,
            &metered,
            embedded,
            start,
        );
        report.seed = seed;
        let report_path = self.out_path("index_global_report.json");
        write_json(&report_path, &report)?;
        Ok(StageOutput {
            message: format!(
                "built global memory for {} scenarios: {} entries ({} extraction, {} merge calls, {} failures)",
                outcome.maps.len(),
                report.entries,
                outcome.extraction_calls,
                outcome.merge_calls,
                report.failures.len()
            ),
            soft_failures: report.failures.len(),
            artifacts: vec![store_path, maps_path, report_path],
        })
    }

    pub fn global_aspects(&self) -> Result<BTreeMap<String, GlobalAspectMap>, PipelineError> {
        read_json(&self.out_path("memory/global_aspects.json"))
    }

    fn find_query(
        &self,
        queries: Vec<QueryRecord>,
        id: &str,
    ) -> Result<QueryRecord, PipelineError> {
        queries
            .into_iter()
            .find(|q| q.query_id == id)
            .ok_or_else(|| PipelineError::Data(format!("unknown query {id}")))
    }

    pub fn recommend(&self, args: &RecommendArgs) -> Result<StageOutput, PipelineError> {
        let query = self.find_query(self.queries(args.queries.as_deref())?, &args.query_id)?;
        let catalog = self.catalog()?;
        let store = self.load_store()?;
        let backends = self.backends(stage::RECOMMEND)?;
        let settings = self.chat_settings();
        let retriever = Retriever::new(self.cfg.retrieval.backend, backends.embedder.as_ref());
        let catalog_index = CatalogIndex::build(&catalog, &retriever)?;
        let ctx = AgentContext {
            store: &store,
            llm: Llm::new(backends.chat.as_ref(), &settings),
            retriever,
            catalog_index: &catalog_index,
        };
        let mut limits = self.cfg.limits();
        if let Some(k) = args.k {
            if k == 0 {
                return Err(PipelineError::Usage("--k must be at least 1".into()));
            }
            limits.k_items = k;
        }
        let trace_path = args.trace.clone().unwrap_or_else(|| {
            self.out_path(&format!(
                "traces/recommend_{}.json",
                sanitize_id(&query.query_id)
            ))
        });
        match recommend(&query, &ctx, &limits) {
            Ok(ep) => {
                write_json(&trace_path, &ep.trace)?;
                let top: Vec<String> = ep
                    .ranked
                    .item_ids
                    .iter()
                    .take(10)
                    .enumerate()
                    .map(|(i, id)| {
                        let title = catalog.get(id).map(|d| d.title.as_str()).unwrap_or("");
                        format!("{:>4}. {id}  {title}", i + 1)
                    })
                    .collect();
                let gt = match ep.ranked.ground_truth_rank() {
                    Some(r) => format!("ground truth {} at rank {r}", query.ground_truth_item_id),
                    None => format!("ground truth {} not retrieved", query.ground_truth_item_id),
                };
                Ok(StageOutput {
                    artifacts: vec![trace_path],
                    soft_failures: 0,
                    message: format!("{gt}\n{}", top.join("\n")),
                })
            }
            Err(failure) => {
                write_json(&trace_path, &failure.trace)?;
                eprintln!("wrote {}", trace_path.display());
                Err(PipelineError::Agent {
                    query_id: query.query_id,
                    error: failure.error,
                })
            }
        }
    }

    /// The configuration as it applies to an evaluation with these overrides.
    pub fn effective_eval_config(&self, args: &EvalArgs) -> RunConfig {
        let mut cfg = self.cfg.clone();
        cfg.eval.mpc_mrc |= args.mpc_mrc;
        if args.judge_model.is_some() {
            cfg.gateway.judge_model = args.judge_model.clone();
        }
        cfg
    }

    pub fn eval(&self, args: &EvalArgs) -> Result<StageOutput, PipelineError> {
        let cfg = self.effective_eval_config(args);
        let queries = self.queries(args.queries.as_deref())?;
        if queries.is_empty() {
            return Err(PipelineError::Data("query set is empty".into()));
        }
        let catalog = self.catalog()?;
        let store = self.load_store()?;
        let backends = self.backends(stage::EVAL)?;
        let settings = self.chat_settings();
        let judge_settings = cfg.gateway.judge_model.as_ref().map(|m| ChatSettings {
            model: m.clone(),
            temperature: 0.0,
            max_tokens: cfg.gateway.max_tokens,
        });
        let retriever = Retriever::new(cfg.retrieval.backend, backends.embedder.as_ref());
        let catalog_index = CatalogIndex::build(&catalog, &retriever)?;
        let ctx = AgentContext {
            store: &store,
            llm: Llm::new(backends.chat.as_ref(), &settings),
            retriever,
            catalog_index: &catalog_index,
        };
        let opts = EvalOptions {
            weights: cfg.reward,
            limits: cfg.limits(),
            memory_contribution: cfg.eval.mpc_mrc,
            tau: cfg.eval.tau,
            judge: match (&judge_settings, cfg.eval.mpc_mrc) {
                (Some(s), true) => Some(Llm::new(backends.chat.as_ref(), s)),
                _ => None,
            },
            jobs: self.jobs(),
            seed: cfg.seed,
        };
        let mut output = evaluate_queryset(&queries, &ctx, &catalog, &opts)?;
        output.report.config = Some(cfg.to_toml());

        let report_path = args
            .out
            .clone()
            .unwrap_or_else(|| self.out_path("eval/report.json"));
        let trace_dir = report_path
            .parent()
            .map(|p| p.join("traces"))
            .unwrap_or_else(|| PathBuf::from("traces"));
        let mut artifacts = Vec::new();
        for o in &output.outcomes {
            let path = trace_dir.join(format!("{}.json", sanitize_id(&o.row.query_id)));
            write_json(&path, &o.trace)?;
            artifacts.push(path);
        }
        write_json(&report_path, &output.report)?;
        artifacts.push(report_path);
        let failed = output
            .report
            .rows
            .iter()
            .filter(|r| r.error.is_some())
            .count();
        Ok(StageOutput {
            artifacts,
            soft_failures: failed,
            message: render_table(&output.report),
        })
    }

    pub fn report(&self, input: Option<&Path>, table: bool) -> Result<String, PipelineError> {
        let path = input
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.out_path("eval/report.json"));
        let report: EvalReport = read_json(&path)?;
        Ok(if table {
            render_table(&report)
        } else {
            serde_json::to_string_pretty(&report.aggregate).expect("aggregate serializes")
        })
    }

    pub fn search(&self, args: &SearchArgs) -> Result<Vec<SearchResult>, PipelineError> {
        if args.k == 0 {
            return Err(PipelineError::Usage("--k must be at least 1".into()));
        }
        let backends = self.backends(stage::RECOMMEND)?;
        let retriever = Retriever::new(
            args.backend.unwrap_or(self.cfg.retrieval.backend),
            backends.embedder.as_ref(),
        );
        match &args.user {
            Some(user) => {
                let store = self.load_store()?;
                let hits = search_memory(
                    &store,
                    user,
                    std::slice::from_ref(&args.query),
                    args.k,
                    &retriever,
                )?;
                Ok(hits
                    .into_iter()
                    .map(|h| SearchResult {
                        rank: h.hit.rank,
                        text: store
                            .get(&h.hit.doc_id)
                            .map(|e| e.text.clone())
                            .unwrap_or_default(),
                        id: h.hit.doc_id,
                    })
                    .collect())
            }
            None => {
                let catalog = self.catalog()?;
                let index = CatalogIndex::build(&catalog, &retriever)?;
                Ok(search_items(&index, &args.query, args.k, &retriever)?
                    .into_iter()
                    .enumerate()
                    .map(|(i, id)| SearchResult {
                        rank: i + 1,
                        text: catalog
                            .get(&id)
                            .map(|d| d.title.clone())
                            .unwrap_or_default(),
                        id,
                    })
                    .collect())
            }
        }
    }

    /// Entries as JSON lines, optionally limited to one user's local tiers.
    pub fn memory_dump(&self, user: Option<&str>) -> Result<Vec<String>, PipelineError> {
        let store = self.load_store()?;
        let scope = user.map(MemoryScope::user);
        Ok(store
            .entries()
            .filter(|e| scope.as_ref().is_none_or(|s| &e.scope == s))
            .map(|e| serde_json::to_string(e).expect("entry serializes"))
            .collect())
    }

    pub fn memory_stats(&self) -> Result<StoreStats, PipelineError> {
        Ok(self.load_store()?.stats())
    }

    pub fn verify_config(&self) -> VerifyConfig {
        VerifyConfig {
            params: self.cfg.grpo_params(),
            bandit_lr: self.cfg.grpo.learning_rate,
            bandit_steps: self.cfg.grpo.steps,
            seed: self.cfg.seed,
            ..VerifyConfig::default()
        }
    }

    pub fn grpo_verify(&self, args: &GrpoVerifyArgs) -> Result<StageOutput, PipelineError> {
        let report: VerifyReport = run_verification(&self.verify_config())?;
        let report_path = args
            .out
            .clone()
            .unwrap_or_else(|| self.out_path("grpo/verify_report.json"));
        write_json(&report_path, &report)?;
        let mut out = StageOutput {
            artifacts: vec![report_path.clone()],
            soft_failures: 0,
            message: verify_summary(&report),
        };
        if let Some(qid) = &args.export_group {
            let (group, path) = self.export_group(qid)?;
            out.message.push_str(&format!(
                "\nexported group for {qid}: {} rollouts, {} unmasked tokens",
                group.group_size(),
                group.unmasked_tokens()
            ));
            out.artifacts.push(path);
        }
        if !report.passed {
            return Err(PipelineError::VerificationFailed(
                report_path.display().to_string(),
            ));
        }
        Ok(out)
    }

    /// Runs `group_size` agent episodes for one query and writes the rollout group.
    pub fn export_group(&self, query_id: &str) -> Result<(RolloutGroup, PathBuf), PipelineError> {
        let query = self.find_query(self.queries(None)?, query_id)?;
        let catalog = self.catalog()?;
        let store = self.load_store()?;
        let backends = self.backends(stage::GRPO)?;
        let settings = self.chat_settings();
        let retriever = Retriever::new(self.cfg.retrieval.backend, backends.embedder.as_ref());
        let catalog_index = CatalogIndex::build(&catalog, &retriever)?;
        let ctx = AgentContext {
            store: &store,
            llm: Llm::new(backends.chat.as_ref(), &settings),
            retriever,
            catalog_index: &catalog_index,
        };
        let limits = self.cfg.limits();
        let mut episodes: Vec<(ReasoningTrace, f64)> = Vec::new();
        for _ in 0..self.cfg.grpo.group_size {
            let (trace, ranked) = match recommend(&query, &ctx, &limits) {
                Ok(ep) => (ep.trace, ep.ranked),
                Err(f) if f.error.is_gateway() => {
                    return Err(PipelineError::Agent {
                        query_id: query.query_id.clone(),
                        error: f.error,
                    })
                }
                Err(f) => (
                    f.trace,
                    RankedList::empty(&query.query_id, &query.ground_truth_item_id),
                ),
            };
            let reward = combined_reward(&trace, &ranked, &self.cfg.reward).combined;
            episodes.push((trace, reward));
        }
        let group = export_group(&query.query_id, &episodes, &self.cfg.grpo_params())?;
        let path = self.out_path(&format!("grpo/group_{}.json", sanitize_id(&query.query_id)));
        write_json(&path, &group)?;
        Ok((group, path))
    }

    /// ingest, index local, index global, eval, grpo-verify.
    pub fn run_all(&self) -> Result<StageOutput, PipelineError> {
        let mut out = self.ingest(&IngestArgs::default())?;
        out.merge(self.index_local(&IndexLocalArgs::default())?);
        out.merge(self.index_global(&IndexGlobalArgs::default())?);
        out.merge(self.eval(&EvalArgs::default())?);
        out.merge(self.grpo_verify(&GrpoVerifyArgs::default())?);
        Ok(out)
    }
}

fn describe_scenario_failure(f: &ScenarioFailure) -> String {
    match &f.query_id {
        Some(q) => format!("scenario {} query {q}: {}", f.scenario, f.error),
        None => format!("scenario {} merge: {}", f.scenario, f.error),
    }
}

pub fn verify_summary(r: &VerifyReport) -> String {
    let mark = |ok: bool| if ok { "pass" } else { "FAIL" };
    let mut lines = Vec::new();
    for g in &r.gradient {
        lines.push(format!(
            "gradient V={} L={}: {} (max abs err {:.2e}, max rel err {:.2e})",
            g.vocab,
            g.len,
            mark(g.passed),
            g.max_abs_err,
            g.max_rel_err
        ));
    }
    lines.push(format!(
        "identity-ratio gradient: {}",
        mark(r.identity.iter().all(|c| c.passed))
    ));
    lines.push(format!(
        "mask invariance over {} trials: {} ({} objective changes)",
        r.mask.trials,
        mark(r.mask.passed),
        r.mask.objective_changes
    ));
    lines.push(format!(
        "bandit: {} (trailing mean {:.4}, lr=0 flat: {})",
        mark(r.bandit.passed),
        r.bandit.trailing_mean_reward,
        r.bandit.zero_lr_flat
    ));
    lines.push(format!("overall: {}", mark(r.passed)));
    lines.join("\n")
}
