//! Builds the memory hierarchy: raw behavior records, per-category preference
//! patterns, a cross-category user profile, and per-scenario global aspects
//! mined by contrasting purchased items with similar unchosen ones.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{partition_by_category, Catalog, InteractionRecord, ItemDoc, QueryRecord};
use crate::gateway::{render_prompt, templates, GatewayError, Llm};
use crate::memory::{chunk_text, ChunkParams, MemoryEntry, MemoryError, MemoryScope, MemoryTier};
use crate::retriever::{tokenize, Bm25Index, Bm25Params};
use crate::seed::rng_for;

#[derive(Debug, thiserror::Error)]
pub enum IndexerError {
    #[error("interaction of user {user_id} references unknown item {item_id}")]
    UnknownItem { user_id: String, item_id: String },
    #[error("interaction belongs to {found}, expected {expected}")]
    ForeignInteraction { expected: String, found: String },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("scenario {scenario:?} has {available} negative candidates, {needed} needed")]
    InsufficientCandidates {
        scenario: String,
        needed: usize,
        available: usize,
    },
    #[error("could not parse structured output ({reason}); raw: {raw}")]
    ParseError { reason: String, raw: String },
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("memory: {0}")]
    Memory(#[from] MemoryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AspectLevel {
    CategoryLevel,
    SubcategoryLevel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectRecord {
    pub level: AspectLevel,
    /// Category or subcategory name.
    pub key: String,
    pub aspect: String,
    pub description: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalAspectMap {
    pub scenario: String,
    pub aspects: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampler {
    SameCategoryRandom,
    #[default]
    Bm25Similar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSampleConfig {
    pub per_query_negatives: usize,
    pub sampler: NegativeSampler,
}

impl Default for NegativeSampleConfig {
    fn default() -> Self {
        Self {
            per_query_negatives: 4,
            sampler: NegativeSampler::Bm25Similar,
        }
    }
}

pub fn render_interaction(rec: &InteractionRecord, item: &ItemDoc) -> String {
    let rating = rec
        .rating
        .map_or_else(|| "n/a".to_string(), |r| format!("{r}"));
    let review = if rec.review_text.trim().is_empty() {
        "n/a"
    } else {
        rec.review_text.trim()
    };
    format!(
        "{} | {} | rating: {} | review: {}",
        item.title, item.metadata_text, rating, review
    )
}

fn item_of<'c>(
    user_id: &str,
    rec: &InteractionRecord,
    catalog: &'c Catalog,
) -> Result<&'c ItemDoc, IndexerError> {
    if rec.user_id != user_id {
        return Err(IndexerError::ForeignInteraction {
            expected: user_id.to_string(),
            found: rec.user_id.clone(),
        });
    }
    catalog
        .get(&rec.item_id)
        .ok_or_else(|| IndexerError::UnknownItem {
            user_id: user_id.to_string(),
            item_id: rec.item_id.clone(),
        })
}

pub fn build_behavior_records(
    user_id: &str,
    interactions: &[InteractionRecord],
    catalog: &Catalog,
) -> Result<Vec<MemoryEntry>, IndexerError> {
    interactions
        .iter()
        .map(|rec| {
            let item = item_of(user_id, rec, catalog)?;
            Ok(MemoryEntry::new(
                MemoryTier::BehaviorRecord,
                MemoryScope::user(user_id),
                Some(rec.category.clone()),
                render_interaction(rec, item),
                vec![rec.item_id.clone()],
            )?)
        })
        .collect()
}

fn chunked_entries(
    tier: MemoryTier,
    scope: &MemoryScope,
    category: Option<&str>,
    text: &str,
    sources: &[String],
    chunk: ChunkParams,
) -> Result<Vec<MemoryEntry>, MemoryError> {
    chunk_text(text, chunk.max_chars, chunk.overlap_chars)
        .into_iter()
        .filter(|c| !c.trim().is_empty())
        .map(|c| {
            MemoryEntry::new(
                tier,
                scope.clone(),
                category.map(str::to_string),
                c,
                sources.to_vec(),
            )
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct PatternOutcome {
    pub entries: Vec<MemoryEntry>,
    /// Categories whose gateway call failed; the rest were still built.
    pub failures: Vec<(String, GatewayError)>,
    pub skipped_empty: Vec<String>,
}

pub fn build_preference_patterns(
    user_id: &str,
    interactions: &[InteractionRecord],
    catalog: &Catalog,
    llm: Llm<'_>,
    chunk: ChunkParams,
) -> Result<PatternOutcome, IndexerError> {
    let mut out = PatternOutcome::default();
    let scope = MemoryScope::user(user_id);
    for (category, records) in partition_by_category(interactions) {
        let mut lines = Vec::with_capacity(records.len());
        let mut sources: Vec<String> = Vec::new();
        for rec in &records {
            lines.push(format!(
                "- {}",
                render_interaction(rec, item_of(user_id, rec, catalog)?)
            ));
            if !sources.contains(&rec.item_id) {
                sources.push(rec.item_id.clone());
            }
        }
        let prompt = render_prompt(
            templates::PREFERENCE_PATTERNS,
            &[("category", &category), ("reviews", &lines.join("\n"))],
        )
        .expect("preference template binds");
        match llm.ask(&prompt) {
            Ok((text, _)) if text.trim().is_empty() => {
                log::warn!("empty preference summary for user {user_id}, category {category}");
                out.skipped_empty.push(category);
            }
            Ok((text, _)) => out.entries.extend(chunked_entries(
                MemoryTier::PreferencePattern,
                &scope,
                Some(&category),
                text.trim(),
                &sources,
                chunk,
            )?),
            Err(e) => out.failures.push((category, e)),
        }
    }
    Ok(out)
}

pub fn build_user_profile(
    user_id: &str,
    preference_entries: &[MemoryEntry],
    llm: Llm<'_>,
    chunk: ChunkParams,
) -> Result<Vec<MemoryEntry>, IndexerError> {
    if preference_entries.is_empty() {
        return Err(IndexerError::EmptyInput(format!(
            "user {user_id} has no preference patterns"
        )));
    }
    let mut sources = BTreeSet::new();
    let lines: Vec<String> = preference_entries
        .iter()
        .map(|e| {
            sources.extend(e.source_ids.iter().cloned());
            match &e.category {
                Some(c) => format!("- {c}: {}", e.text),
                None => format!("- {}", e.text),
            }
        })
        .collect();
    let prompt = render_prompt(
        templates::USER_PROFILE,
        &[("preference patterns", &lines.join("\n"))],
    )
    .expect("profile template binds");
    let (text, _) = llm.ask(&prompt)?;
    let text = text.trim();
    if text.is_empty() {
        return Err(IndexerError::EmptyInput(format!(
            "empty profile for user {user_id}"
        )));
    }
    let sources: Vec<String> = sources.into_iter().collect();
    Ok(chunked_entries(
        MemoryTier::UserProfile,
        &MemoryScope::user(user_id),
        None,
        text,
        &sources,
        chunk,
    )?)
}

/// All three local tiers for one user.
#[derive(Debug, Default)]
pub struct UserMemory {
    pub entries: Vec<MemoryEntry>,
    pub failures: Vec<String>,
}

pub fn build_local_memory(
    user_id: &str,
    interactions: &[InteractionRecord],
    catalog: &Catalog,
    llm: Llm<'_>,
    chunk: ChunkParams,
) -> Result<UserMemory, IndexerError> {
    let mut out = UserMemory {
        entries: build_behavior_records(user_id, interactions, catalog)?,
        failures: Vec::new(),
    };
    let patterns = build_preference_patterns(user_id, interactions, catalog, llm, chunk)?;
    for (category, e) in &patterns.failures {
        out.failures
            .push(format!("user {user_id} preference pattern {category}: {e}"));
    }
    if !patterns.entries.is_empty() {
        match build_user_profile(user_id, &patterns.entries, llm, chunk) {
            Ok(profile) => out.entries.extend(profile),
            Err(e) => out.failures.push(format!("user {user_id} profile: {e}")),
        }
    }
    out.entries.extend(patterns.entries);
    Ok(out)
}

pub fn sample_negatives(
    query: &QueryRecord,
    catalog: &Catalog,
    config: &NegativeSampleConfig,
    rng_seed: u64,
) -> Result<Vec<ItemDoc>, IndexerError> {
    let needed = config.per_query_negatives;
    if needed == 0 {
        return Err(IndexerError::EmptyInput(
            "per_query_negatives must be at least 1".into(),
        ));
    }
    let gt = catalog
        .get(&query.ground_truth_item_id)
        .ok_or_else(|| IndexerError::UnknownItem {
            user_id: query.user_id.clone(),
            item_id: query.ground_truth_item_id.clone(),
        })?;
    let candidates: Vec<&ItemDoc> = catalog
        .in_scenario(&query.scenario)
        .filter(|i| i.item_id != gt.item_id)
        .collect();
    if candidates.len() < needed {
        return Err(IndexerError::InsufficientCandidates {
            scenario: query.scenario.clone(),
            needed,
            available: candidates.len(),
        });
    }
    let chosen: Vec<&ItemDoc> = match config.sampler {
        NegativeSampler::SameCategoryRandom => {
            let mut rng = rng_for(rng_seed, &query.query_id);
            candidates
                .choose_multiple(&mut rng, needed)
                .copied()
                .collect()
        }
        NegativeSampler::Bm25Similar => {
            let index = Bm25Index::build(
                candidates
                    .iter()
                    .map(|i| (i.item_id.clone(), tokenize(&i.metadata_text))),
                Bm25Params::default(),
            );
            index
                .search(&tokenize(&gt.metadata_text), needed)
                .expect("candidate index is non-empty")
                .into_iter()
                .map(|h| catalog.get(&h.doc_id).expect("candidate from catalog"))
                .collect()
        }
    };
    Ok(chosen.into_iter().cloned().collect())
}

fn describe_item(item: &ItemDoc) -> String {
    format!("{} | {}", item.title, item.metadata_text)
}

/// Extracts the JSON value from ragged model output: fenced or bare, with
/// trailing commas, single quotes, or doubled braces.
pub fn parse_structured(raw: &str) -> Option<Value> {
    let mut body = raw.trim();
    if let Some(start) = body.find("```") {
        let after = &body[start + 3..];
        let after = after.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
        if let Some(end) = after.find("```") {
            body = after[..end].trim();
        }
    }
    let open = body.find(['{', '['])?;
    let close = body.rfind(['}', ']'])?;
    if close < open {
        return None;
    }
    let candidate = &body[open..=close];
    let attempt = |s: &str| -> Option<Value> {
        serde_json::from_str(s)
            .ok()
            .or_else(|| json5::from_str(s).ok())
    };
    attempt(candidate).or_else(|| attempt(&candidate.replace("{{", "{").replace("}}", "}")))
}

fn str_field(obj: &Value, key: &str) -> Option<String> {
    obj.get(key)
        .and_then(Value::as_str)
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
}

fn aspect_records(raw: &str, scenario: &str) -> Result<Vec<AspectRecord>, IndexerError> {
    let err = |reason: &str| IndexerError::ParseError {
        reason: reason.to_string(),
        raw: raw.to_string(),
    };
    let value = parse_structured(raw).ok_or_else(|| err("no JSON object"))?;
    let levels = [
        (
            "category_level_personalization_aspects",
            "category",
            AspectLevel::CategoryLevel,
        ),
        (
            "subcategory_level_personalization_aspects",
            "subcategory",
            AspectLevel::SubcategoryLevel,
        ),
    ];
    if !levels.iter().any(|(k, _, _)| value.get(k).is_some()) {
        return Err(err("missing aspect lists"));
    }
    let mut out = Vec::new();
    for (list_key, key_field, level) in levels {
        let items = match value.get(list_key) {
            None | Some(Value::Null) => continue,
            Some(Value::Array(items)) => items,
            Some(_) => return Err(err("aspect list is not an array")),
        };
        for item in items {
            match (str_field(item, "aspect"), str_field(item, "description")) {
                (Some(aspect), Some(description)) => out.push(AspectRecord {
                    level,
                    key: str_field(item, key_field).unwrap_or_else(|| scenario.to_string()),
                    aspect,
                    description,
                }),
                _ => log::warn!("skipping aspect without name or description: {item}"),
            }
        }
    }
    Ok(out)
}

pub fn extract_scenario_aspects(
    query: &QueryRecord,
    ground_truth: &ItemDoc,
    negatives: &[ItemDoc],
    llm: Llm<'_>,
) -> Result<Vec<AspectRecord>, IndexerError> {
    if negatives.is_empty() {
        return Err(IndexerError::EmptyInput("no negative items".into()));
    }
    let negative_text: Vec<String> = negatives
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{}. {}", i + 1, describe_item(n)))
        .collect();
    let prompt = render_prompt(
        templates::GLOBAL_MEMORY_A,
        &[
            ("scenario", &query.scenario),
            ("query", &query.query_text),
            ("ground truth item metadata", &describe_item(ground_truth)),
            ("negative items", &negative_text.join("\n")),
        ],
    )
    .expect("aspect extraction template binds");
    let (raw, _) = llm.ask(&prompt)?;
    aspect_records(&raw, &query.scenario)
}

pub fn merge_global_aspects(
    scenario: &str,
    aspect_batches: &[Vec<AspectRecord>],
    llm: Llm<'_>,
) -> Result<GlobalAspectMap, IndexerError> {
    let lines: Vec<String> = aspect_batches
        .iter()
        .flatten()
        .map(|a| format!("- {}: {}", a.aspect, a.description))
        .collect();
    let mut map = GlobalAspectMap {
        scenario: scenario.to_string(),
        aspects: BTreeMap::new(),
    };
    if lines.is_empty() {
        return Ok(map);
    }
    let prompt = render_prompt(
        templates::GLOBAL_MEMORY_B,
        &[("category", scenario), ("aspects", &lines.join("\n"))],
    )
    .expect("aspect merge template binds");
    let (raw, _) = llm.ask(&prompt)?;
    let err = |reason: &str| IndexerError::ParseError {
        reason: reason.to_string(),
        raw: raw.clone(),
    };
    let Some(Value::Object(obj)) = parse_structured(&raw) else {
        return Err(err("expected an object of aspect_name to descriptions"));
    };
    for (name, descriptions) in obj {
        let name = name.trim().to_string();
        let list: Vec<String> = match descriptions {
            Value::String(s) => vec![s],
            Value::Array(items) => items
                .into_iter()
                .filter_map(|v| v.as_str().map(str::to_string))
                .collect(),
            _ => return Err(err("descriptions must be strings")),
        };
        let list: Vec<String> = list
            .into_iter()
            .map(|d| d.trim().to_string())
            .filter(|d| !d.is_empty())
            .collect();
        if name.is_empty() || list.is_empty() {
            continue;
        }
        map.aspects.entry(name).or_default().extend(list);
    }
    Ok(map)
}

/// One GlobalAspect entry per aspect (more if the text needs chunking).
pub fn global_entries(
    map: &GlobalAspectMap,
    chunk: ChunkParams,
) -> Result<Vec<MemoryEntry>, IndexerError> {
    let mut out = Vec::new();
    for (name, descriptions) in &map.aspects {
        let text = format!("{}: {}", name, descriptions.join("; "));
        out.extend(chunked_entries(
            MemoryTier::GlobalAspect,
            &MemoryScope::Global,
            Some(&map.scenario),
            &text,
            &[],
            chunk,
        )?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalMemoryConfig {
    pub negatives: NegativeSampleConfig,
    pub queries_per_scenario: usize,
    pub chunk: ChunkParams,
}

impl Default for GlobalMemoryConfig {
    fn default() -> Self {
        Self {
            negatives: NegativeSampleConfig::default(),
            queries_per_scenario: 5,
            chunk: ChunkParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFailure {
    pub scenario: String,
    pub query_id: Option<String>,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct GlobalMemoryOutcome {
    pub maps: BTreeMap<String, GlobalAspectMap>,
    pub entries: Vec<MemoryEntry>,
    pub failures: Vec<ScenarioFailure>,
    pub extraction_calls: usize,
    pub merge_calls: usize,
}

pub fn build_global_memory(
    queries: &[QueryRecord],
    catalog: &Catalog,
    config: &GlobalMemoryConfig,
    llm: Llm<'_>,
    seed: u64,
) -> GlobalMemoryOutcome {
    let mut by_scenario: BTreeMap<&str, Vec<&QueryRecord>> = BTreeMap::new();
    for q in queries {
        by_scenario.entry(&q.scenario).or_default().push(q);
    }
    let mut out = GlobalMemoryOutcome::default();
    for (scenario, mut group) in by_scenario {
        let fail = |query_id: Option<&str>, error: String| ScenarioFailure {
            scenario: scenario.to_string(),
            query_id: query_id.map(str::to_string),
            error,
        };
        if group.len() > config.queries_per_scenario {
            group.shuffle(&mut rng_for(seed, &format!("global-sample/{scenario}")));
            group.truncate(config.queries_per_scenario);
        }
        let mut batches = Vec::with_capacity(group.len());
        for q in group {
            let result = sample_negatives(q, catalog, &config.negatives, seed).and_then(|negs| {
                let gt = catalog
                    .get(&q.ground_truth_item_id)
                    .expect("checked by sample_negatives");
                out.extraction_calls += 1;
                extract_scenario_aspects(q, gt, &negs, llm)
            });
            match result {
                Ok(b) => batches.push(b),
                Err(e) => out.failures.push(fail(Some(&q.query_id), e.to_string())),
            }
        }
        if batches.iter().all(Vec::is_empty) {
            if !batches.is_empty() {
                out.maps.insert(
                    scenario.to_string(),
                    GlobalAspectMap {
                        scenario: scenario.to_string(),
                        ..Default::default()
                    },
                );
            }
            continue;
        }
        out.merge_calls += 1;
        match merge_global_aspects(scenario, &batches, llm)
            .and_then(|m| Ok((global_entries(&m, config.chunk)?, m)))
        {
            Ok((entries, map)) => {
                out.entries.extend(entries);
                out.maps.insert(scenario.to_string(), map);
            }
            Err(e) => out.failures.push(fail(None, e.to_string())),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatSettings, ScriptStep, ScriptedGateway};

    fn item(id: &str, cat: &str, meta: &str) -> ItemDoc {
        ItemDoc {
            item_id: id.into(),
            title: format!("T{id}"),
            category: cat.into(),
            metadata_text: meta.into(),
        }
    }

    fn catalog() -> Catalog {
        Catalog::from_items(vec![
            item("gt", "Clothing", "leather snapback cap adjustable"),
            item("n1", "Clothing", "leather cap brown"),
            item("n2", "Clothing", "wool beanie"),
            item("n3", "Clothing", "cotton cap adjustable"),
            item("n4", "Clothing", "silk scarf"),
            item("e1", "Electronics", "usb cable"),
            item("e2", "Electronics", "phone charger"),
        ])
        .unwrap()
    }

    fn rec(user: &str, item: &str, cat: &str) -> InteractionRecord {
        InteractionRecord {
            user_id: user.into(),
            item_id: item.into(),
            category: cat.into(),
            rating: Some(5.0),
            review_text: "great".into(),
            timestamp: 1,
        }
    }

    fn query(id: &str, scenario: &str, gt: &str) -> QueryRecord {
        QueryRecord {
            query_id: id.into(),
            user_id: "u1".into(),
            query_text: "a cap".into(),
            ground_truth_item_id: gt.into(),
            scenario: scenario.into(),
        }
    }

    #[test]
    fn behavior_records() {
        let cat = catalog();
        assert!(build_behavior_records("u1", &[], &cat).unwrap().is_empty());
        let entries = build_behavior_records(
            "u1",
            &[rec("u1", "gt", "Clothing"), rec("u1", "e1", "Electronics")],
            &cat,
        )
        .unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1].category.as_deref(), Some("Electronics"));
        assert_eq!(entries[0].source_ids, vec!["gt"]);
        assert_eq!(
            entries[0].text,
            "Tgt | leather snapback cap adjustable | rating: 5 | review: great"
        );
        assert!(matches!(
            build_behavior_records("u1", &[rec("u1", "zz", "Clothing")], &cat),
            Err(IndexerError::UnknownItem { .. })
        ));
    }

    #[test]
    fn patterns_per_category_with_chunking_and_failure_isolation() {
        let cat = catalog();
        let long = "Likes leather. ".repeat(20);
        let gw = ScriptedGateway::new(vec![
            ScriptStep::text(Some("Category: Clothing"), long.clone()),
            ScriptStep::text(Some("Category: Electronics"), "SUMMARY(Electronics)"),
        ]);
        let settings = ChatSettings::default();
        let chunk = ChunkParams {
            max_chars: 100,
            overlap_chars: 10,
        };
        let interactions = [rec("u1", "gt", "Clothing"), rec("u1", "e1", "Electronics")];
        let out =
            build_preference_patterns("u1", &interactions, &cat, Llm::new(&gw, &settings), chunk)
                .unwrap();
        let clothing: Vec<_> = out
            .entries
            .iter()
            .filter(|e| e.category.as_deref() == Some("Clothing"))
            .collect();
        assert!(clothing.len() > 1);
        assert!(out.entries.iter().any(|e| e.text == "SUMMARY(Electronics)"));
        assert!(out
            .entries
            .iter()
            .all(|e| e.tier == MemoryTier::PreferencePattern));

        let failing = ScriptedGateway::new(vec![
            ScriptStep::error(None, 500, "x"),
            ScriptStep::text(None, "SUMMARY(Electronics)"),
        ]);
        let out = build_preference_patterns(
            "u1",
            &interactions,
            &cat,
            Llm::new(&failing, &settings),
            chunk,
        )
        .unwrap();
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.entries.len(), 1);

        let empty = ScriptedGateway::new(vec![]);
        assert!(
            build_preference_patterns("u1", &[], &cat, Llm::new(&empty, &settings), chunk)
                .unwrap()
                .entries
                .is_empty()
        );
    }

    #[test]
    fn user_profile() {
        let settings = ChatSettings::default();
        let gw = ScriptedGateway::new(vec![]);
        assert!(matches!(
            build_user_profile("u1", &[], Llm::new(&gw, &settings), ChunkParams::default()),
            Err(IndexerError::EmptyInput(_))
        ));
        let pattern = MemoryEntry::new(
            MemoryTier::PreferencePattern,
            MemoryScope::user("u1"),
            Some("C".into()),
            "likes leather",
            vec!["gt".into()],
        )
        .unwrap();
        let make = || {
            let gw = ScriptedGateway::new(vec![ScriptStep::text(
                Some("- C: likes leather"),
                "Quality-focused buyer.",
            )]);
            build_user_profile(
                "u1",
                std::slice::from_ref(&pattern),
                Llm::new(&gw, &settings),
                ChunkParams::default(),
            )
            .unwrap()
        };
        let a = make();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].text, "Quality-focused buyer.");
        assert_eq!(a[0].category, None);
        assert_eq!(a[0].source_ids, vec!["gt"]);
        assert_eq!(a, make());
    }

    #[test]
    fn negatives() {
        let cat = catalog();
        let q = query("q", "Clothing", "gt");
        let cfg = NegativeSampleConfig::default();
        let mut ids: Vec<String> = sample_negatives(&q, &cat, &cfg, 1)
            .unwrap()
            .into_iter()
            .map(|i| i.item_id)
            .collect();
        ids.sort();
        assert_eq!(ids, vec!["n1", "n2", "n3", "n4"]);
        let too_many = NegativeSampleConfig {
            per_query_negatives: 5,
            ..cfg
        };
        assert!(matches!(
            sample_negatives(&q, &cat, &too_many, 1),
            Err(IndexerError::InsufficientCandidates { .. })
        ));

        let two = NegativeSampleConfig {
            per_query_negatives: 2,
            sampler: NegativeSampler::Bm25Similar,
        };
        let top: Vec<String> = sample_negatives(&q, &cat, &two, 1)
            .unwrap()
            .into_iter()
            .map(|i| i.item_id)
            .collect();
        assert_eq!(top, vec!["n1", "n3"]);
        let random = NegativeSampleConfig {
            per_query_negatives: 2,
            sampler: NegativeSampler::SameCategoryRandom,
        };
        let a = sample_negatives(&q, &cat, &random, 9).unwrap();
        assert_eq!(a, sample_negatives(&q, &cat, &random, 9).unwrap());
        assert!(a
            .iter()
            .all(|i| i.item_id != "gt" && i.category == "Clothing"));
    }

    const PROMPT_A_OUTPUT: &str = r#"```json
{
  "category_level_personalization_aspects": [
    {"category": "Clothing", "aspect": "Material Quality and Feel", "description": "Prefers premium natural materials"},
  ],
  "subcategory_level_personalization_aspects": [
    {'subcategory': 'Caps', 'aspect': 'Fit and Comfort', 'description': 'Adjustable closure'}
  ]
}
```"#;

    #[test]
    fn aspect_extraction_parsing() {
        let cat = catalog();
        let q = query("q", "Clothing", "gt");
        let negs = sample_negatives(&q, &cat, &NegativeSampleConfig::default(), 0).unwrap();
        let settings = ChatSettings::default();
        let gw = ScriptedGateway::new(vec![ScriptStep::text(
            Some("Negative items"),
            PROMPT_A_OUTPUT,
        )]);
        let aspects =
            extract_scenario_aspects(&q, cat.get("gt").unwrap(), &negs, Llm::new(&gw, &settings))
                .unwrap();
        assert_eq!(aspects.len(), 2);
        assert_eq!(aspects[0].level, AspectLevel::CategoryLevel);
        assert_eq!(aspects[1].key, "Caps");

        let prose = ScriptedGateway::new(vec![ScriptStep::text(None, "The user likes caps.")]);
        assert!(matches!(
            extract_scenario_aspects(
                &q,
                cat.get("gt").unwrap(),
                &negs,
                Llm::new(&prose, &settings)
            ),
            Err(IndexerError::ParseError { .. })
        ));
        let empty = ScriptedGateway::new(vec![ScriptStep::text(
            None,
            r#"{{"category_level_personalization_aspects": [], "subcategory_level_personalization_aspects": []}}"#,
        )]);
        assert!(extract_scenario_aspects(
            &q,
            cat.get("gt").unwrap(),
            &negs,
            Llm::new(&empty, &settings)
        )
        .unwrap()
        .is_empty());
    }

    fn record(aspect: &str, description: &str) -> AspectRecord {
        AspectRecord {
            level: AspectLevel::CategoryLevel,
            key: "Clothing".into(),
            aspect: aspect.into(),
            description: description.into(),
        }
    }

    #[test]
    fn merging() {
        let settings = ChatSettings::default();
        let none = ScriptedGateway::new(vec![]);
        let m = merge_global_aspects("Clothing", &[vec![], vec![]], Llm::new(&none, &settings))
            .unwrap();
        assert!(m.aspects.is_empty());
        assert!(global_entries(&m, ChunkParams::default())
            .unwrap()
            .is_empty());

        let gw = ScriptedGateway::new(vec![ScriptStep::text(
            Some("- Budget: cheap"),
            r#"{"Price Sensitivity": ["Watches the budget", "Compares price ranges"]}"#,
        )]);
        let m = merge_global_aspects(
            "Clothing",
            &[vec![
                record("Budget", "cheap"),
                record("Price Range", "mid"),
            ]],
            Llm::new(&gw, &settings),
        )
        .unwrap();
        assert_eq!(m.aspects.len(), 1);
        assert_eq!(m.aspects["Price Sensitivity"].len(), 2);
        let entries = global_entries(&m, ChunkParams::default()).unwrap();
        assert_eq!(
            entries[0].text,
            "Price Sensitivity: Watches the budget; Compares price ranges"
        );
        assert_eq!(entries[0].category.as_deref(), Some("Clothing"));
        assert_eq!(entries[0].scope, MemoryScope::Global);
    }

    fn global_catalog() -> Catalog {
        let mut items = catalog().items().to_vec();
        items.push(item("e3", "Electronics", "usb hub"));
        items.push(item("e4", "Electronics", "hdmi cable"));
        items.push(item("e5", "Electronics", "power bank"));
        Catalog::from_items(items).unwrap()
    }

    const EMPTY_A: &str = r#"{"category_level_personalization_aspects": [{"aspect": "Style", "description": "Classic look"}]}"#;

    #[test]
    fn global_memory_call_counts_and_isolation() {
        let cat = global_catalog();
        let queries = vec![
            query("c1", "Clothing", "gt"),
            query("c2", "Clothing", "n1"),
            query("e1", "Electronics", "e1"),
            query("e2", "Electronics", "e2"),
        ];
        let settings = ChatSettings::default();
        let cfg = GlobalMemoryConfig::default();
        let merged = r#"{"Style": ["Classic look"]}"#;
        let steps = || {
            vec![
                ScriptStep::text(Some("scenario: Clothing"), EMPTY_A),
                ScriptStep::text(Some("scenario: Clothing"), EMPTY_A),
                ScriptStep::text(Some("Category: Clothing"), merged),
                ScriptStep::text(Some("scenario: Electronics"), EMPTY_A),
                ScriptStep::text(Some("scenario: Electronics"), EMPTY_A),
                ScriptStep::text(Some("Category: Electronics"), merged),
            ]
        };
        let gw = ScriptedGateway::new(steps());
        let out = build_global_memory(&queries, &cat, &cfg, Llm::new(&gw, &settings), 3);
        assert!(out.failures.is_empty(), "{:?}", out.failures);
        assert_eq!(out.maps.len(), 2);
        assert_eq!((out.extraction_calls, out.merge_calls), (4, 2));
        assert_eq!(gw.remaining(), 0);

        let mut faulty = steps();
        faulty[2] = ScriptStep::error(None, 503, "down");
        let gw = ScriptedGateway::new(faulty);
        let out = build_global_memory(&queries, &cat, &cfg, Llm::new(&gw, &settings), 3);
        assert_eq!(out.maps.keys().collect::<Vec<_>>(), vec!["Electronics"]);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].scenario, "Clothing");

        let none = ScriptedGateway::new(vec![]);
        assert!(
            build_global_memory(&[], &cat, &cfg, Llm::new(&none, &settings), 3)
                .maps
                .is_empty()
        );
    }

    #[test]
    fn structured_parsing_tolerance() {
        assert_eq!(
            parse_structured("{'a': [1,2,],}").unwrap(),
            serde_json::json!({"a": [1, 2]})
        );
        assert_eq!(
            parse_structured("noise {{\"a\": 1}} tail").unwrap(),
            serde_json::json!({"a": 1})
        );
        assert!(parse_structured("nothing").is_none());
    }
}
