//! Hierarchical memory store.
//!
//! Entries are immutable and content-addressed; the store only grows. On
//! disk it is a JSONL file whose first line is a header carrying the
//! embedding dimensionality, followed by one entry per line in id order.

mod chunk;

pub use chunk::{chunk_text, reconstruct, ChunkParams};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("memory entry text must be non-empty")]
    EmptyText,
    #[error("tier {tier:?} cannot live in scope {scope}")]
    TierScopeMismatch { tier: MemoryTier, scope: String },
    #[error("entry {entry_id}: embedding has {actual} dims, store expects {expected}")]
    DimensionMismatch {
        entry_id: String,
        expected: usize,
        actual: usize,
    },
    #[error("entry {0}: embedding contains non-finite values")]
    NonFiniteEmbedding(String),
    #[error("entry id {found} does not match content hash {expected}")]
    IdMismatch { found: String, expected: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryTier {
    BehaviorRecord,
    PreferencePattern,
    UserProfile,
    GlobalAspect,
}

impl MemoryTier {
    pub const ALL: [MemoryTier; 4] = [
        MemoryTier::BehaviorRecord,
        MemoryTier::PreferencePattern,
        MemoryTier::UserProfile,
        MemoryTier::GlobalAspect,
    ];

    pub const LOCAL: [MemoryTier; 3] = [
        MemoryTier::BehaviorRecord,
        MemoryTier::PreferencePattern,
        MemoryTier::UserProfile,
    ];

    pub fn is_local(self) -> bool {
        self != MemoryTier::GlobalAspect
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MemoryTier::BehaviorRecord => "behavior_record",
            MemoryTier::PreferencePattern => "preference_pattern",
            MemoryTier::UserProfile => "user_profile",
            MemoryTier::GlobalAspect => "global_aspect",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryScope {
    User(String),
    Global,
}

impl MemoryScope {
    pub fn user(id: impl Into<String>) -> Self {
        MemoryScope::User(id.into())
    }
}

impl std::fmt::Display for MemoryScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MemoryScope::User(id) => write!(f, "user:{id}"),
            MemoryScope::Global => f.write_str("global"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub entry_id: String,
    pub tier: MemoryTier,
    pub scope: MemoryScope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default)]
    pub source_ids: Vec<String>,
}

/// First 16 hex chars of SHA-256 over the canonical JSON of `(tier, scope, category, text)`.
pub fn entry_id_for(
    tier: MemoryTier,
    scope: &MemoryScope,
    category: Option<&str>,
    text: &str,
) -> String {
    let canonical =
        serde_json::to_string(&(tier, scope, category, text)).expect("canonical form serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    hex::encode(&digest[..8])
}

impl MemoryEntry {
    pub fn new(
        tier: MemoryTier,
        scope: MemoryScope,
        category: Option<String>,
        text: impl Into<String>,
        source_ids: Vec<String>,
    ) -> Result<Self, MemoryError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(MemoryError::EmptyText);
        }
        let scope_ok = matches!(
            (&scope, tier.is_local()),
            (MemoryScope::User(_), true) | (MemoryScope::Global, false)
        );
        if !scope_ok {
            return Err(MemoryError::TierScopeMismatch {
                tier,
                scope: scope.to_string(),
            });
        }
        Ok(Self {
            entry_id: entry_id_for(tier, &scope, category.as_deref(), &text),
            tier,
            scope,
            category,
            text,
            embedding: None,
            source_ids,
        })
    }

    pub fn with_embedding(mut self, embedding: Vec<f64>) -> Self {
        self.embedding = Some(embedding);
        self
    }

    pub fn user_id(&self) -> Option<&str> {
        match &self.scope {
            MemoryScope::User(id) => Some(id),
            MemoryScope::Global => None,
        }
    }

    fn validate(&self, dim: usize) -> Result<(), MemoryError> {
        // Re-run the constructor checks for entries that arrive deserialized.
        let rebuilt = MemoryEntry::new(
            self.tier,
            self.scope.clone(),
            self.category.clone(),
            self.text.clone(),
            Vec::new(),
        )?;
        if rebuilt.entry_id != self.entry_id {
            return Err(MemoryError::IdMismatch {
                found: self.entry_id.clone(),
                expected: rebuilt.entry_id,
            });
        }
        if let Some(e) = &self.embedding {
            if e.len() != dim {
                return Err(MemoryError::DimensionMismatch {
                    entry_id: self.entry_id.clone(),
                    expected: dim,
                    actual: e.len(),
                });
            }
            if e.iter().any(|x| !x.is_finite()) {
                return Err(MemoryError::NonFiniteEmbedding(self.entry_id.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    memrec_memory: u32,
    embedding_dim: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    pub total: usize,
    pub users: usize,
    pub by_tier: BTreeMap<String, usize>,
    pub with_embedding: usize,
}

/// Lookup result: found entries in request order plus the ids that were not present.
#[derive(Debug, Default, PartialEq)]
pub struct Lookup<'a> {
    pub found: Vec<&'a MemoryEntry>,
    pub missing: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryStore {
    embedding_dim: usize,
    entries: BTreeMap<String, MemoryEntry>,
}

impl MemoryStore {
    pub fn new(embedding_dim: usize) -> Self {
        Self {
            embedding_dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts entries not already present; returns how many ids were new.
    /// The batch is validated up front, so an error leaves the store unchanged.
    pub fn put_entries(
        &mut self,
        entries: impl IntoIterator<Item = MemoryEntry>,
    ) -> Result<usize, MemoryError> {
        let entries: Vec<MemoryEntry> = entries.into_iter().collect();
        for e in &entries {
            e.validate(self.embedding_dim)?;
        }
        let mut inserted = 0;
        for e in entries {
            if !self.entries.contains_key(&e.entry_id) {
                self.entries.insert(e.entry_id.clone(), e);
                inserted += 1;
            }
        }
        Ok(inserted)
    }

    pub fn get(&self, id: &str) -> Option<&MemoryEntry> {
        self.entries.get(id)
    }

    pub fn get_by_ids<S: AsRef<str>>(&self, ids: &[S]) -> Lookup<'_> {
        let mut out = Lookup::default();
        for id in ids {
            match self.entries.get(id.as_ref()) {
                Some(e) => out.found.push(e),
                None => out.missing.push(id.as_ref().to_string()),
            }
        }
        out
    }

    /// Entries matching every given filter, in entry-id order.
    pub fn scan(
        &self,
        scope: &MemoryScope,
        tier: Option<MemoryTier>,
        category: Option<&str>,
    ) -> Vec<&MemoryEntry> {
        self.entries
            .values()
            .filter(|e| &e.scope == scope)
            .filter(|e| tier.is_none_or(|t| e.tier == t))
            .filter(|e| category.is_none_or(|c| e.category.as_deref() == Some(c)))
            .collect()
    }

    /// A user's entries across the three local tiers, in entry-id order.
    pub fn local_entries(&self, user_id: &str) -> Vec<&MemoryEntry> {
        let scope = MemoryScope::user(user_id);
        self.entries
            .values()
            .filter(|e| e.tier.is_local() && e.scope == scope)
            .collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.values()
    }

    pub fn scopes(&self) -> BTreeSet<MemoryScope> {
        self.entries.values().map(|e| e.scope.clone()).collect()
    }

    pub fn stats(&self) -> StoreStats {
        let mut stats = StoreStats {
            total: self.entries.len(),
            ..Default::default()
        };
        let mut users = BTreeSet::new();
        for e in self.entries.values() {
            *stats
                .by_tier
                .entry(e.tier.as_str().to_string())
                .or_default() += 1;
            if let Some(u) = e.user_id() {
                users.insert(u);
            }
            if e.embedding.is_some() {
                stats.with_embedding += 1;
            }
        }
        stats.users = users.len();
        stats
    }

    pub fn persist(&self, path: &Path) -> Result<(), MemoryError> {
        let io_err = |source| MemoryError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        let header = StoreHeader {
            memrec_memory: 1,
            embedding_dim: self.embedding_dim,
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&header).expect("header serializes")
        )
        .map_err(io_err)?;
        for e in self.entries.values() {
            writeln!(
                out,
                "{}",
                serde_json::to_string(e).expect("entry serializes")
            )
            .map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let shown = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|source| MemoryError::Io {
            path: shown.clone(),
            source,
        })?;
        let parse_err = |line: usize, reason: String| MemoryError::Parse {
            path: shown.clone(),
            line,
            reason,
        };
        let mut lines = std::io::BufReader::new(file).lines().enumerate();
        let header: StoreHeader = match lines.next() {
            Some((_, Ok(l))) => {
                serde_json::from_str(&l).map_err(|e| parse_err(1, format!("bad header: {e}")))?
            }
            Some((_, Err(e))) => return Err(parse_err(1, e.to_string())),
            None => return Err(parse_err(1, "missing header".into())),
        };
        let mut store = MemoryStore::new(header.embedding_dim);
        let mut batch = Vec::new();
        for (idx, line) in lines {
            let line = line.map_err(|e| parse_err(idx + 1, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: MemoryEntry =
                serde_json::from_str(&line).map_err(|e| parse_err(idx + 1, e.to_string()))?;
            batch.push(entry);
        }
        store.put_entries(batch)?;
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pref(user: &str, cat: &str, text: &str) -> MemoryEntry {
        MemoryEntry::new(
            MemoryTier::PreferencePattern,
            MemoryScope::user(user),
            Some(cat.into()),
            text,
            vec![],
        )
        .unwrap()
    }

    fn fixture() -> (MemoryStore, Vec<MemoryEntry>) {
        let entries = vec![
            MemoryEntry::new(
                MemoryTier::BehaviorRecord,
                MemoryScope::user("u1"),
                Some("Clothing".into()),
                "leather jacket | 5",
                vec!["i1".into()],
            )
            .unwrap(),
            pref("u1", "Clothing", "likes real leather"),
            pref("u1", "Electronics", "likes long battery life"),
            MemoryEntry::new(
                MemoryTier::UserProfile,
                MemoryScope::user("u1"),
                None,
                "quality-focused buyer",
                vec![],
            )
            .unwrap(),
            pref("u2", "Clothing", "prefers cotton"),
            MemoryEntry::new(
                MemoryTier::GlobalAspect,
                MemoryScope::Global,
                Some("Clothing".into()),
                "Fit and Comfort: true to size",
                vec!["Fit and Comfort".into()],
            )
            .unwrap(),
        ];
        let mut store = MemoryStore::new(4);
        assert_eq!(store.put_entries(entries.clone()).unwrap(), 6);
        (store, entries)
    }

    fn brute<'a>(
        all: &'a [MemoryEntry],
        scope: &MemoryScope,
        tier: Option<MemoryTier>,
        cat: Option<&str>,
    ) -> Vec<&'a MemoryEntry> {
        let mut v: Vec<_> = all
            .iter()
            .filter(|e| {
                &e.scope == scope
                    && tier.is_none_or(|t| t == e.tier)
                    && cat.is_none_or(|c| e.category.as_deref() == Some(c))
            })
            .collect();
        v.sort_by(|a, b| a.entry_id.cmp(&b.entry_id));
        v
    }

    #[test]
    fn scan_filters_match_brute_force() {
        let (store, all) = fixture();
        let cases = [
            (MemoryScope::user("u1"), None, None, 4),
            (
                MemoryScope::user("u1"),
                Some(MemoryTier::PreferencePattern),
                Some("Clothing"),
                1,
            ),
            (MemoryScope::Global, Some(MemoryTier::GlobalAspect), None, 1),
        ];
        for (scope, tier, cat, n) in cases {
            let got = store.scan(&scope, tier, cat);
            assert_eq!(got, brute(&all, &scope, tier, cat));
            assert_eq!(got.len(), n);
        }
    }

    #[test]
    fn put_is_idempotent() {
        let mut store = MemoryStore::new(4);
        let e1 = pref("u", "c", "one");
        let e2 = pref("u", "c", "two");
        assert_eq!(store.put_entries([e1.clone()]).unwrap(), 1);
        assert_eq!(store.put_entries([e1.clone()]).unwrap(), 0);
        assert_eq!(store.put_entries([e1, e2]).unwrap(), 1);
        let mut fresh = MemoryStore::new(4);
        assert_eq!(
            fresh
                .put_entries([pref("u", "c", "a"), pref("u", "c", "b")])
                .unwrap(),
            2
        );
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut store = MemoryStore::new(8);
        let e = pref("u", "c", "x").with_embedding(vec![0.1; 5]);
        assert!(matches!(
            store.put_entries([e]),
            Err(MemoryError::DimensionMismatch {
                expected: 8,
                actual: 5,
                ..
            })
        ));
        assert!(store.is_empty());
    }

    #[test]
    fn tier_scope_discipline() {
        assert!(MemoryEntry::new(
            MemoryTier::GlobalAspect,
            MemoryScope::user("u"),
            None,
            "x",
            vec![]
        )
        .is_err());
        assert!(MemoryEntry::new(
            MemoryTier::UserProfile,
            MemoryScope::Global,
            None,
            "x",
            vec![]
        )
        .is_err());
        assert!(matches!(
            MemoryEntry::new(
                MemoryTier::UserProfile,
                MemoryScope::user("u"),
                None,
                "  ",
                vec![]
            ),
            Err(MemoryError::EmptyText)
        ));
    }

    #[test]
    fn entry_id_is_stable_content_hash() {
        let a = entry_id_for(
            MemoryTier::UserProfile,
            &MemoryScope::user("u1"),
            None,
            "text",
        );
        let b = entry_id_for(
            MemoryTier::UserProfile,
            &MemoryScope::user("u1"),
            None,
            "text",
        );
        let c = entry_id_for(
            MemoryTier::UserProfile,
            &MemoryScope::user("u2"),
            None,
            "text",
        );
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 16);
        assert!(a.chars().all(|ch| ch.is_ascii_hexdigit()));
        // sha256(["user_profile",{"user":"u1"},null,"text"]) computed externally.
        assert_eq!(a, "09ad3fe0fa216f75");
    }

    #[test]
    fn get_by_ids_preserves_order_and_reports_missing() {
        let (store, all) = fixture();
        let empty: Vec<String> = vec![];
        assert_eq!(store.get_by_ids(&empty), Lookup::default());
        let (a, b) = (&all[0].entry_id, &all[1].entry_id);
        let got = store.get_by_ids(&[b.as_str(), "nope", a.as_str()]);
        assert_eq!(
            got.found.iter().map(|e| &e.entry_id).collect::<Vec<_>>(),
            vec![b, a]
        );
        assert_eq!(got.missing, vec!["nope".to_string()]);
    }

    #[test]
    fn persist_round_trip() {
        let (mut store, _) = fixture();
        store
            .put_entries([pref("u3", "c", "with vector").with_embedding(vec![0.5, 0.5, 0.5, 0.5])])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.jsonl");
        store.persist(&path).unwrap();
        let loaded = MemoryStore::load(&path).unwrap();
        assert_eq!(loaded, store);
        for scope in store.scopes() {
            for tier in MemoryTier::ALL {
                assert_eq!(
                    loaded.scan(&scope, Some(tier), None),
                    store.scan(&scope, Some(tier), None)
                );
            }
        }
        let first = std::fs::read_to_string(&path).unwrap();
        loaded.persist(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), first);
    }

    #[test]
    fn tampered_entry_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(
            &path,
            "{\"memrec_memory\":1,\"embedding_dim\":4}\n{\"entry_id\":\"0000000000000000\",\"tier\":\"user_profile\",\"scope\":{\"user\":\"u\"},\"text\":\"x\"}\n",
        )
        .unwrap();
        assert!(matches!(
            MemoryStore::load(&path),
            Err(MemoryError::IdMismatch { .. })
        ));
    }

    #[test]
    fn stats_count_tiers() {
        let (store, _) = fixture();
        let s = store.stats();
        assert_eq!(s.total, 6);
        assert_eq!(s.users, 2);
        assert_eq!(s.by_tier["preference_pattern"], 3);
    }
}
