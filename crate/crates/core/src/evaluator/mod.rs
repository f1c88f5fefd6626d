//! Batch evaluation: ranking metrics per query, memory-contribution checks
//! (keyword overlap and an LLM judge), and token accounting.

mod stopwords;

pub use stopwords::{is_stopword, STOPWORDS};

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{recommend, AgentContext, BoxedAnswer, ReasoningTrace, RecommendLimits};
use crate::corpus::{Catalog, ItemDoc, QueryRecord};
use crate::gateway::{render_prompt, templates, GatewayError, Llm, TokenCounting};
use crate::retriever::tokenize;
use crate::reward::{
    combined_reward, ndcg_at_k, recall_at_k, RankedList, RewardBreakdown, RewardWeights,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("report has no rows")]
    EmptyReport,
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

pub fn keywords(text: &str) -> BTreeSet<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !is_stopword(t))
        .collect()
}

/// Number of shared keywords; symmetric in its arguments.
pub fn keyword_overlap(a: &str, b: &str) -> usize {
    keywords(a).intersection(&keywords(b)).count()
}

fn overlap_holds(retrieved: &[&str], other: &str, tau: usize) -> bool {
    if retrieved.is_empty() {
        return false;
    }
    keyword_overlap(&retrieved.join("\n"), other) >= tau
}

/// Retrieved memory shares at least `tau` keywords with the ideal profile.
pub fn mpc_heuristic(answer: &BoxedAnswer, retrieved: &[&str], tau: usize) -> bool {
    overlap_holds(retrieved, &answer.ideal_item_profile, tau)
}

/// Retrieved memory shares at least `tau` keywords with the purchased item's metadata.
pub fn mrc_heuristic(retrieved: &[&str], ground_truth: &ItemDoc, tau: usize) -> bool {
    overlap_holds(retrieved, &ground_truth.metadata_text, tau)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
    Unparseable,
}

impl Verdict {
    pub fn as_bool(self) -> bool {
        self == Verdict::Yes
    }
}

/// First word that reads YES or NO, case-insensitively.
pub fn parse_verdict(text: &str) -> Verdict {
    for token in tokenize(text) {
        match token.as_str() {
            "yes" => return Verdict::Yes,
            "no" => return Verdict::No,
            _ => {}
        }
    }
    Verdict::Unparseable
}

fn numbered(texts: &[&str]) -> String {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {}", i + 1, t))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn mpc_llm_judge(
    answer: &BoxedAnswer,
    retrieved: &[&str],
    llm: Llm<'_>,
) -> Result<Verdict, GatewayError> {
    let prompt = render_prompt(
        templates::JUDGE_MPC,
        &[
            ("memory", &numbered(retrieved)),
            ("profile", &answer.ideal_item_profile),
        ],
    )
    .expect("judge template binds");
    Ok(parse_verdict(&llm.ask(&prompt)?.0))
}

pub fn mrc_llm_judge(
    retrieved: &[&str],
    ground_truth: &ItemDoc,
    llm: Llm<'_>,
) -> Result<Verdict, GatewayError> {
    let item = format!("{} | {}", ground_truth.title, ground_truth.metadata_text);
    let prompt = render_prompt(
        templates::JUDGE_MRC,
        &[
            ("memory", &numbered(retrieved)),
            ("ground truth item", &item),
        ],
    )
    .expect("judge template binds");
    Ok(parse_verdict(&llm.ask(&prompt)?.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Gateway,
    Agent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub query_id: String,
    pub ground_truth_rank: Option<usize>,
    pub ndcg100: f64,
    pub ndcg1000: f64,
    pub recall100: f64,
    pub recall1000: f64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Whitespace tokens of retrieved memory placed in the context.
    pub memory_tokens: u64,
    pub memory_tool_called: bool,
    pub reward: RewardBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<ErrorKind>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub queries: usize,
    pub failed: usize,
    pub ndcg100: f64,
    pub ndcg1000: f64,
    pub recall100: f64,
    pub recall1000: f64,
    pub prompt_tokens: f64,
    pub completion_tokens: f64,
    pub memory_tokens: f64,
    pub memory_tool_rate: f64,
    pub reward: f64,
}

impl Aggregate {
    pub fn from_rows(rows: &[EvalRow]) -> Self {
        if rows.is_empty() {
            return Self::default();
        }
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            queries: rows.len(),
            failed: rows.iter().filter(|r| r.error.is_some()).count(),
            ndcg100: mean(&|r| r.ndcg100),
            ndcg1000: mean(&|r| r.ndcg1000),
            recall100: mean(&|r| r.recall100),
            recall1000: mean(&|r| r.recall1000),
            prompt_tokens: mean(&|r| r.prompt_tokens as f64),
            completion_tokens: mean(&|r| r.completion_tokens as f64),
            memory_tokens: mean(&|r| r.memory_tokens as f64),
            memory_tool_rate: mean(&|r| r.memory_tool_called as u8 as f64),
            reward: mean(&|r| r.reward.combined),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryContribution {
    pub query_id: String,
    pub mpc_heuristic: bool,
    pub mrc_heuristic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpc_llm: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mrc_llm: Option<Verdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryContributionReport {
    pub tau: usize,
    pub mpc_heuristic: f64,
    pub mrc_heuristic: f64,
    pub mpc_llm: Option<f64>,
    pub mrc_llm: Option<f64>,
    pub unparseable_verdicts: usize,
    pub per_query: Vec<QueryContribution>,
}

impl MemoryContributionReport {
    fn from_queries(tau: usize, per_query: Vec<QueryContribution>, judged: bool) -> Self {
        let n = per_query.len().max(1) as f64;
        let frac = |f: &dyn Fn(&QueryContribution) -> bool| {
            per_query.iter().filter(|q| f(q)).count() as f64 / n
        };
        let verdict_true = |v: Option<Verdict>| v.is_some_and(Verdict::as_bool);
        Self {
            tau,
            mpc_heuristic: frac(&|q| q.mpc_heuristic),
            mrc_heuristic: frac(&|q| q.mrc_heuristic),
            mpc_llm: judged.then(|| frac(&|q| verdict_true(q.mpc_llm))),
            mrc_llm: judged.then(|| frac(&|q| verdict_true(q.mrc_llm))),
            unparseable_verdicts: per_query
                .iter()
                .flat_map(|q| [q.mpc_llm, q.mrc_llm])
                .filter(|v| *v == Some(Verdict::Unparseable))
                .count(),
            per_query,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub total_prompt_tokens: u64,
    pub total_completion_tokens: u64,
    pub prompt_tokens_per_query: f64,
    pub completion_tokens_per_query: f64,
    pub memory_tokens_per_query: f64,
    pub mean_recall100: f64,
    /// Recall@100 per 100 prompt tokens; `None` without prompt tokens.
    pub efficiency: Option<f64>,
    /// Recall@100 per 100 retrieved-memory tokens.
    pub memory_efficiency: Option<f64>,
}

/// `100 · mean_recall100 / mean_tokens`.
pub fn efficiency(mean_recall100: f64, mean_tokens: f64) -> Option<f64> {
    (mean_tokens > 0.0).then(|| 100.0 * mean_recall100 / mean_tokens)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregate: Aggregate,
    pub token_counting: TokenCounting,
    pub weights: RewardWeights,
    pub limits: RecommendLimits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_contribution: Option<MemoryContributionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_stats: Option<TokenStats>,
    pub seed: u64,
    /// Effective run configuration, when produced by the pipeline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
}

pub fn token_efficiency(report: &EvalReport) -> Result<TokenStats, EvalError> {
    if report.rows.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let agg = Aggregate::from_rows(&report.rows);
    Ok(TokenStats {
        total_prompt_tokens: report.rows.iter().map(|r| r.prompt_tokens).sum(),
        total_completion_tokens: report.rows.iter().map(|r| r.completion_tokens).sum(),
        prompt_tokens_per_query: agg.prompt_tokens,
        completion_tokens_per_query: agg.completion_tokens,
        memory_tokens_per_query: agg.memory_tokens,
        mean_recall100: agg.recall100,
        efficiency: efficiency(agg.recall100, agg.prompt_tokens),
        memory_efficiency: efficiency(agg.recall100, agg.memory_tokens),
    })
}

#[derive(Clone, Copy)]
pub struct EvalOptions<'a> {
    pub weights: RewardWeights,
    pub limits: RecommendLimits,
    pub memory_contribution: bool,
    pub tau: usize,
    pub judge: Option<Llm<'a>>,
    pub jobs: usize,
    pub seed: u64,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            limits: RecommendLimits::default(),
            memory_contribution: false,
            tau: 1,
            judge: None,
            jobs: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutcome {
    pub row: EvalRow,
    pub trace: ReasoningTrace,
    pub ranked: RankedList,
    pub contribution: Option<QueryContribution>,
}

pub fn evaluate_query(
    query: &QueryRecord,
    ctx: &AgentContext<'_>,
    catalog: &Catalog,
    opts: &EvalOptions<'_>,
) -> QueryOutcome {
    let (trace, ranked, error) = match recommend(query, ctx, &opts.limits) {
        Ok(ep) => (ep.trace, ep.ranked, None),
        Err(f) => {
            let kind = if f.error.is_gateway() {
                ErrorKind::Gateway
            } else {
                ErrorKind::Agent
            };
            (
                f.trace,
                RankedList::empty(&query.query_id, &query.ground_truth_item_id),
                Some((f.error.to_string(), kind)),
            )
        }
    };
    let row = EvalRow {
        query_id: query.query_id.clone(),
        ground_truth_rank: ranked.ground_truth_rank(),
        ndcg100: ndcg_at_k(&ranked, 100),
        ndcg1000: ndcg_at_k(&ranked, 1000),
        recall100: recall_at_k(&ranked, 100),
        recall1000: recall_at_k(&ranked, 1000),
        prompt_tokens: trace.usage.prompt_tokens,
        completion_tokens: trace.usage.completion_tokens,
        memory_tokens: trace.memory_tokens(),
        memory_tool_called: trace.memory_tool_called,
        reward: combined_reward(&trace, &ranked, &opts.weights),
        error: error.as_ref().map(|e| e.0.clone()),
        error_kind: error.map(|e| e.1),
    };
    let contribution = opts
        .memory_contribution
        .then(|| contribution_for(query, &trace, ctx, catalog, opts));
    QueryOutcome {
        row,
        trace,
        ranked,
        contribution,
    }
}

fn contribution_for(
    query: &QueryRecord,
    trace: &ReasoningTrace,
    ctx: &AgentContext<'_>,
    catalog: &Catalog,
    opts: &EvalOptions<'_>,
) -> QueryContribution {
    let ids: Vec<&String> = trace.retrieved_entry_ids.iter().collect();
    let lookup = ctx.store.get_by_ids(&ids);
    let texts: Vec<&str> = lookup.found.iter().map(|e| e.text.as_str()).collect();
    let gt = catalog.get(&query.ground_truth_item_id);
    let answer = trace.final_answer.as_ref();
    let judge = |f: &dyn Fn(Llm<'_>) -> Result<Verdict, GatewayError>| -> Option<Verdict> {
        let llm = opts.judge?;
        if texts.is_empty() {
            return Some(Verdict::No);
        }
        Some(f(llm).unwrap_or_else(|e| {
            log::warn!("judge failed for {}: {e}", query.query_id);
            Verdict::Unparseable
        }))
    };
    QueryContribution {
        query_id: query.query_id.clone(),
        mpc_heuristic: answer.is_some_and(|a| mpc_heuristic(a, &texts, opts.tau)),
        mrc_heuristic: gt.is_some_and(|g| mrc_heuristic(&texts, g, opts.tau)),
        mpc_llm: match answer {
            Some(a) => judge(&|llm| mpc_llm_judge(a, &texts, llm)),
            None => opts.judge.map(|_| Verdict::No),
        },
        mrc_llm: match gt {
            Some(g) => judge(&|llm| mrc_llm_judge(&texts, g, llm)),
            None => opts.judge.map(|_| Verdict::No),
        },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub outcomes: Vec<QueryOutcome>,
}

/// Runs every query; failures become zero-metric rows and the run continues.
/// Queries run in parallel only when the gateways allow it and `jobs > 1`.
pub fn evaluate_queryset(
    queries: &[QueryRecord],
    ctx: &AgentContext<'_>,
    catalog: &Catalog,
    opts: &EvalOptions<'_>,
) -> Result<EvalOutput, EvalError> {
    let sequential =
        ctx.llm.chat.is_sequential() || opts.judge.is_some_and(|j| j.chat.is_sequential());
    let outcomes: Vec<QueryOutcome> = if sequential || opts.jobs <= 1 {
        queries
            .iter()
            .map(|q| evaluate_query(q, ctx, catalog, opts))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| EvalError::ThreadPool(e.to_string()))?;
        pool.install(|| {
            queries
                .par_iter()
                .map(|q| evaluate_query(q, ctx, catalog, opts))
                .collect()
        })
    };
    let rows: Vec<EvalRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    let memory_contribution = opts.memory_contribution.then(|| {
        MemoryContributionReport::from_queries(
            opts.tau,
            outcomes
                .iter()
                .filter_map(|o| o.contribution.clone())
                .collect(),
            opts.judge.is_some(),
        )
    });
    let mut report = EvalReport {
        aggregate: Aggregate::from_rows(&rows),
        rows,
        token_counting: ctx.llm.chat.token_counting(),
        weights: opts.weights,
        limits: opts.limits,
        memory_contribution,
        token_stats: None,
        seed: opts.seed,
        config: None,
    };
    report.token_stats = token_efficiency(&report).ok();
    Ok(EvalOutput { report, outcomes })
}

/// Summary table with the columns nDCG@100/1000 and Recall@100/1000.
pub fn render_table(report: &EvalReport) -> String {
    let a = &report.aggregate;
    let mut out = String::new();
    out.push_str("| Queries | Failed | nDCG@100 | nDCG@1000 | Recall@100 | Recall@1000 | Prompt tok/q | Tool rate | Reward |\n");
    out.push_str("|--------:|-------:|---------:|----------:|-----------:|------------:|-------------:|----------:|-------:|\n");
    out.push_str(&format!(
        "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.2} | {:.3} | {:.4} |\n",
        a.queries,
        a.failed,
        a.ndcg100,
        a.ndcg1000,
        a.recall100,
        a.recall1000,
        a.prompt_tokens,
        a.memory_tool_rate,
        a.reward
    ));
    if let Some(m) = &report.memory_contribution {
        out.push_str(&format!(
            "\nMPC (heuristic) {:.3}  MRC (heuristic) {:.3}",
            m.mpc_heuristic, m.mrc_heuristic
        ));
        if let (Some(p), Some(r)) = (m.mpc_llm, m.mrc_llm) {
            out.push_str(&format!("  MPC (judge) {p:.3}  MRC (judge) {r:.3}"));
        }
        out.push('\n');
    }
    if let Some(t) = &report.token_stats {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        out.push_str(&format!(
            "\nTokens ({:?}): prompt/q {:.2}, memory/q {:.2}, R@100 per 100 prompt tokens {}, per 100 memory tokens {}\n",
            report.token_counting,
            t.prompt_tokens_per_query,
            t.memory_tokens_per_query,
            fmt(t.efficiency),
            fmt(t.memory_efficiency)
        ));
    }
    out
}
