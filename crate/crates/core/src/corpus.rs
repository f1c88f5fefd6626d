//! Corpus files: interactions, item catalog and evaluation queries, one JSON
//! object per line.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{render_prompt, templates, GatewayError, Llm};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: {reason}")]
    SchemaViolation {
        line: usize,
        field: String,
        reason: String,
    },
    #[error("line {line}: duplicate item_id {item_id:?}")]
    DuplicateItem { line: usize, item_id: String },
    #[error("query text is empty")]
    EmptyQuery,
    #[error("model returned an empty rewrite")]
    EmptyResponse,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
    #[serde(default)]
    pub review_text: String,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemDoc {
    pub item_id: String,
    pub title: String,
    pub category: String,
    pub metadata_text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub user_id: String,
    pub query_text: String,
    pub ground_truth_item_id: String,
    pub scenario: String,
}

/// Row types with field-level checks beyond what serde enforces.
pub trait CorpusRow: DeserializeOwned {
    const REQUIRED: &'static [&'static str];

    /// `Err((field, reason))` on violation.
    fn check(&self) -> Result<(), (&'static str, String)>;
}

fn non_empty(field: &'static str, value: &str) -> Result<(), (&'static str, String)> {
    if value.trim().is_empty() {
        Err((field, "must be non-empty".into()))
    } else {
        Ok(())
    }
}

impl CorpusRow for InteractionRecord {
    const REQUIRED: &'static [&'static str] = &["user_id", "item_id", "category", "timestamp"];

    fn check(&self) -> Result<(), (&'static str, String)> {
        non_empty("user_id", &self.user_id)?;
        non_empty("item_id", &self.item_id)?;
        if self.timestamp < 0 {
            return Err(("timestamp", "must be >= 0".into()));
        }
        if let Some(r) = self.rating {
            if !(1.0..=5.0).contains(&r) {
                return Err(("rating", format!("{r} outside [1, 5]")));
            }
        }
        Ok(())
    }
}

impl CorpusRow for ItemDoc {
    const REQUIRED: &'static [&'static str] = &["item_id", "title", "category", "metadata_text"];

    fn check(&self) -> Result<(), (&'static str, String)> {
        non_empty("item_id", &self.item_id)?;
        non_empty("metadata_text", &self.metadata_text)
    }
}

impl CorpusRow for QueryRecord {
    const REQUIRED: &'static [&'static str] = &[
        "query_id",
        "user_id",
        "query_text",
        "ground_truth_item_id",
        "scenario",
    ];

    fn check(&self) -> Result<(), (&'static str, String)> {
        non_empty("query_id", &self.query_id)?;
        non_empty("user_id", &self.user_id)?;
        non_empty("query_text", &self.query_text)?;
        non_empty("ground_truth_item_id", &self.ground_truth_item_id)
    }
}

/// Parses JSONL text; blank lines are skipped, line numbers are 1-based.
pub fn parse_jsonl<T: CorpusRow>(text: &str) -> Result<Vec<T>, CorpusError> {
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let violation = |field: &str, reason: String| CorpusError::SchemaViolation {
            line,
            field: field.to_string(),
            reason,
        };
        let value: Value =
            serde_json::from_str(raw).map_err(|e| violation("<line>", e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| violation("<line>", "expected a JSON object".into()))?;
        if let Some(field) = T::REQUIRED.iter().find(|f| !obj.contains_key(**f)) {
            return Err(violation(field, "missing".into()));
        }
        let mut track = serde_path_to_error::Track::new();
        let de = serde_path_to_error::Deserializer::new(&value, &mut track);
        let row =
            T::deserialize(de).map_err(|e| violation(&track.path().to_string(), e.to_string()))?;
        row.check()
            .map_err(|(field, reason)| violation(field, reason))?;
        rows.push(row);
    }
    Ok(rows)
}

fn read_file(path: &Path) -> Result<String, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.display().to_string()));
    }
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_interactions(path: &Path) -> Result<Vec<InteractionRecord>, CorpusError> {
    parse_jsonl(&read_file(path)?)
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryRecord>, CorpusError> {
    parse_jsonl(&read_file(path)?)
}

pub fn load_catalog(path: &Path) -> Result<Catalog, CorpusError> {
    let text = read_file(path)?;
    let items: Vec<ItemDoc> = parse_jsonl(&text)?;
    Catalog::from_items(items).map_err(|(pos, item_id)| {
        // Map the item position back to its source line.
        let line = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .nth(pos)
            .map(|(i, _)| i + 1)
            .unwrap_or(0);
        CorpusError::DuplicateItem { line, item_id }
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for row in rows {
        let line = serde_json::to_string(row).expect("corpus rows serialize");
        writeln!(file, "{line}").map_err(io_err)?;
    }
    file.flush().map_err(io_err)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalog {
    items: Vec<ItemDoc>,
    index: HashMap<String, usize>,
}

impl Catalog {
    /// Fails with `(position, item_id)` of the first duplicate.
    pub fn from_items(items: Vec<ItemDoc>) -> Result<Self, (usize, String)> {
        let mut index = HashMap::with_capacity(items.len());
        for (pos, item) in items.iter().enumerate() {
            if index.insert(item.item_id.clone(), pos).is_some() {
                return Err((pos, item.item_id.clone()));
            }
        }
        Ok(Self { items, index })
    }

    pub fn get(&self, item_id: &str) -> Option<&ItemDoc> {
        self.index.get(item_id).map(|&i| &self.items[i])
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.index.contains_key(item_id)
    }

    pub fn items(&self) -> &[ItemDoc] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn in_scenario<'a>(&'a self, scenario: &'a str) -> impl Iterator<Item = &'a ItemDoc> + 'a {
        self.items.iter().filter(move |i| i.category == scenario)
    }
}

/// Buckets records by category, keeping input order inside each bucket.
pub fn partition_by_category(
    records: &[InteractionRecord],
) -> BTreeMap<String, Vec<InteractionRecord>> {
    let mut buckets: BTreeMap<String, Vec<InteractionRecord>> = BTreeMap::new();
    for rec in records {
        buckets
            .entry(rec.category.clone())
            .or_default()
            .push(rec.clone());
    }
    buckets
}

/// Groups records by user, keeping input order inside each group.
pub fn group_by_user(records: &[InteractionRecord]) -> BTreeMap<String, Vec<InteractionRecord>> {
    let mut users: BTreeMap<String, Vec<InteractionRecord>> = BTreeMap::new();
    for rec in records {
        users
            .entry(rec.user_id.clone())
            .or_default()
            .push(rec.clone());
    }
    users
}

/// Rewrites a detailed query into one casual sentence.
pub fn simplify_query(raw_query: &str, llm: Llm<'_>) -> Result<String, CorpusError> {
    if raw_query.trim().is_empty() {
        return Err(CorpusError::EmptyQuery);
    }
    let prompt = render_prompt(
        templates::QUERY_SIMPLIFICATION,
        &[("original query", raw_query)],
    )
    .expect("query simplification template binds");
    let (text, _usage) = llm.ask(&prompt)?;
    let text = text.trim();
    if text.is_empty() {
        return Err(CorpusError::EmptyResponse);
    }
    Ok(text.to_string())
}

/// Queries whose ground-truth item is missing from the catalog.
pub fn unresolved_queries<'a>(
    queries: &'a [QueryRecord],
    catalog: &Catalog,
) -> Vec<&'a QueryRecord> {
    queries
        .iter()
        .filter(|q| !catalog.contains(&q.ground_truth_item_id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatSettings, ScriptStep, ScriptedGateway};
    use proptest::prelude::*;

    fn rec(user: &str, item: &str, cat: &str) -> InteractionRecord {
        InteractionRecord {
            user_id: user.into(),
            item_id: item.into(),
            category: cat.into(),
            rating: None,
            review_text: String::new(),
            timestamp: 0,
        }
    }

    #[test]
    fn empty_file_is_empty_collection() {
        assert!(parse_jsonl::<InteractionRecord>("").unwrap().is_empty());
    }

    #[test]
    fn one_valid_line() {
        let line = r#"{"user_id":"u1","item_id":"i1","category":"Clothing","rating":5,"review_text":"great","timestamp":1700000000}"#;
        let rows: Vec<InteractionRecord> = parse_jsonl(line).unwrap();
        assert_eq!(
            rows,
            vec![InteractionRecord {
                user_id: "u1".into(),
                item_id: "i1".into(),
                category: "Clothing".into(),
                rating: Some(5.0),
                review_text: "great".into(),
                timestamp: 1_700_000_000,
            }]
        );
    }

    #[test]
    fn missing_user_id_reports_line() {
        let text = concat!(
            r#"{"user_id":"u1","item_id":"i1","category":"A","timestamp":1}"#,
            "\n",
            r#"{"item_id":"i2","category":"A","timestamp":2}"#,
        );
        match parse_jsonl::<InteractionRecord>(text) {
            Err(CorpusError::SchemaViolation { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "user_id");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_type_names_field() {
        let text = r#"{"user_id":"u1","item_id":"i1","category":"A","timestamp":"soon"}"#;
        match parse_jsonl::<InteractionRecord>(text) {
            Err(CorpusError::SchemaViolation { line: 1, field, .. }) => {
                assert_eq!(field, "timestamp")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariants_enforced() {
        let neg = r#"{"user_id":"u1","item_id":"i1","category":"A","timestamp":-1}"#;
        assert!(matches!(
            parse_jsonl::<InteractionRecord>(neg),
            Err(CorpusError::SchemaViolation { field, .. }) if field == "timestamp"
        ));
        let rating = r#"{"user_id":"u1","item_id":"i1","category":"A","timestamp":1,"rating":7}"#;
        assert!(matches!(
            parse_jsonl::<InteractionRecord>(rating),
            Err(CorpusError::SchemaViolation { field, .. }) if field == "rating"
        ));
        let empty_user = r#"{"user_id":"","item_id":"i1","category":"A","timestamp":1}"#;
        assert!(parse_jsonl::<InteractionRecord>(empty_user).is_err());
    }

    #[test]
    fn duplicate_catalog_item() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"item_id":"a","title":"A","category":"C","metadata_text":"x"}"#,
                "\n\n",
                r#"{"item_id":"a","title":"A2","category":"C","metadata_text":"y"}"#,
                "\n"
            ),
        )
        .unwrap();
        match load_catalog(&path) {
            Err(CorpusError::DuplicateItem { line, item_id }) => {
                assert_eq!(line, 3);
                assert_eq!(item_id, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_queries(Path::new("/nonexistent/q.jsonl")),
            Err(CorpusError::MissingFile(_))
        ));
    }

    #[test]
    fn partition_counts() {
        assert!(partition_by_category(&[]).is_empty());
        let recs = vec![rec("u", "1", "A"), rec("u", "2", "A"), rec("u", "3", "B")];
        let parts = partition_by_category(&recs);
        assert_eq!(parts["A"].len(), 2);
        assert_eq!(parts["B"].len(), 1);
    }

    #[test]
    fn simplify_query_paths() {
        let settings = ChatSettings::default();
        let rewritten = "Hey, can you recommend an external Blu-ray drive that reads discs reliably and plays them smoothly right from the start?";
        let gw = ScriptedGateway::new(vec![
            ScriptStep::text(
                Some("Original Query: I'm in need of an external Blu-ray drive"),
                rewritten,
            ),
            ScriptStep::text(None, "  a  "),
            ScriptStep::text(None, ""),
        ]);
        let llm = Llm::new(&gw, &settings);
        let raw = "I'm in need of an external Blu-ray drive that actually works well with reading Blu-rays.";
        assert_eq!(simplify_query(raw, llm).unwrap(), rewritten);
        assert_eq!(simplify_query("x", llm).unwrap(), "a");
        assert!(matches!(
            simplify_query("x", llm),
            Err(CorpusError::EmptyResponse)
        ));
        assert!(matches!(
            simplify_query(" ", llm),
            Err(CorpusError::EmptyQuery)
        ));
    }

    fn arb_record() -> impl Strategy<Value = InteractionRecord> {
        (
            "[a-c]",
            "[a-z]{1,4}",
            prop::sample::select(vec!["A", "B", "C"]),
            prop::option::of(1u8..=5),
            "[ -~]{0,20}",
            0i64..2_000_000_000,
        )
            .prop_map(|(u, i, c, r, review, ts)| InteractionRecord {
                user_id: u,
                item_id: i,
                category: c.to_string(),
                rating: r.map(f64::from),
                review_text: review,
                timestamp: ts,
            })
    }

    proptest! {
        #[test]
        fn partition_is_a_partition(records in prop::collection::vec(arb_record(), 0..40)) {
            let parts = partition_by_category(&records);
            let total: usize = parts.values().map(Vec::len).sum();
            prop_assert_eq!(total, records.len());
            for (cat, bucket) in &parts {
                let expected: Vec<_> = records.iter().filter(|r| &r.category == cat).cloned().collect();
                prop_assert_eq!(bucket, &expected);
            }
        }

        #[test]
        fn serialize_then_parse_round_trips(records in prop::collection::vec(arb_record(), 0..20)) {
            let text: String = records
                .iter()
                .map(|r| serde_json::to_string(r).unwrap() + "\n")
                .collect();
            let parsed: Vec<InteractionRecord> = parse_jsonl(&text).unwrap();
            prop_assert_eq!(parsed, records);
        }
    }
}
