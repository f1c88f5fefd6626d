//! Exact lexical (BM25) and dense (cosine) top-k search over memory entries
//! and the item catalog.

mod bm25;
mod dense;

pub use bm25::{Bm25Index, Bm25Params};
pub use dense::DenseIndex;

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Catalog;
use crate::gateway::{Embedder, GatewayError};
use crate::memory::{MemoryEntry, MemoryStore};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("index is empty")]
    EmptyIndex,
    #[error("unknown document {0:?}")]
    UnknownDoc(String),
    #[error("vector dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero or non-finite vector for {0:?}")]
    DegenerateVector(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no aspects given")]
    NoAspects,
    #[error("embedding failed: {0}")]
    Embedding(#[from] GatewayError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub doc_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Lowercases and splits on anything that is not alphanumeric. No stemming.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Sorts by score descending, ties by ascending doc id, keeps the top `k`.
pub(crate) fn rank_scored<'a, I>(scored: I, k: usize) -> Vec<RetrievalHit>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let mut all: Vec<(&str, f64)> = scored.into_iter().collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    all.into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (id, score))| RetrievalHit {
            doc_id: id.to_string(),
            score,
            rank: i + 1,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalBackend {
    Bm25,
    #[default]
    Dense,
}

impl std::str::FromStr for RetrievalBackend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bm25" => Ok(Self::Bm25),
            "dense" => Ok(Self::Dense),
            other => Err(format!("unknown backend {other:?} (expected bm25|dense)")),
        }
    }
}

/// A document to index: id, text, and an optional precomputed embedding.
#[derive(Clone, Debug)]
pub struct IndexDoc {
    pub id: String,
    pub text: String,
    pub embedding: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub enum TextIndex {
    Bm25(Bm25Index),
    Dense(DenseIndex),
}

impl TextIndex {
    pub fn len(&self) -> usize {
        match self {
            TextIndex::Bm25(i) => i.len(),
            TextIndex::Dense(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Backend choice plus the embedder used for dense indexing and queries.
#[derive(Clone, Copy)]
pub struct Retriever<'a> {
    pub backend: RetrievalBackend,
    pub bm25: Bm25Params,
    pub embedder: &'a dyn Embedder,
}

impl<'a> Retriever<'a> {
    pub fn new(backend: RetrievalBackend, embedder: &'a dyn Embedder) -> Self {
        Self {
            backend,
            bm25: Bm25Params::default(),
            embedder,
        }
    }

    pub fn build(&self, docs: Vec<IndexDoc>) -> Result<TextIndex, RetrievalError> {
        match self.backend {
            RetrievalBackend::Bm25 => Ok(TextIndex::Bm25(Bm25Index::build(
                docs.into_iter().map(|d| {
                    let tokens = tokenize(&d.text);
                    (d.id, tokens)
                }),
                self.bm25,
            ))),
            RetrievalBackend::Dense => {
                let dim = self.embedder.dim();
                let missing: Vec<String> = docs
                    .iter()
                    .filter(|d| d.embedding.as_ref().is_none_or(|e| e.len() != dim))
                    .map(|d| d.text.clone())
                    .collect();
                let mut fresh = if missing.is_empty() {
                    Vec::new()
                } else {
                    self.embedder.embed(&missing)?
                }
                .into_iter();
                let mut rows = Vec::with_capacity(docs.len());
                for d in docs {
                    let v = match d.embedding {
                        Some(e) if e.len() == dim => e,
                        _ => fresh.next().expect("one embedding per missing doc").values,
                    };
                    rows.push((d.id, v));
                }
                Ok(TextIndex::Dense(DenseIndex::build(dim, rows)?))
            }
        }
    }

    pub fn search(
        &self,
        index: &TextIndex,
        query: &str,
        k: usize,
    ) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        match index {
            TextIndex::Bm25(idx) => idx.search(&tokenize(query), k),
            TextIndex::Dense(idx) => {
                if idx.is_empty() {
                    return Err(RetrievalError::EmptyIndex);
                }
                let q = self.embedder.embed(&[query.to_string()])?;
                idx.search(&q[0].values, k)
            }
        }
    }

    /// Embeds entries lacking a vector of the right dimensionality.
    pub fn embed_entries(&self, entries: &mut [MemoryEntry]) -> Result<(), GatewayError> {
        let dim = self.embedder.dim();
        let todo: Vec<usize> = (0..entries.len())
            .filter(|&i| entries[i].embedding.as_ref().is_none_or(|e| e.len() != dim))
            .collect();
        if todo.is_empty() {
            return Ok(());
        }
        let texts: Vec<String> = todo.iter().map(|&i| entries[i].text.clone()).collect();
        for (i, v) in todo.into_iter().zip(self.embedder.embed(&texts)?) {
            entries[i].embedding = Some(v.values);
        }
        Ok(())
    }
}

pub fn index_docs<'e>(entries: impl IntoIterator<Item = &'e MemoryEntry>) -> Vec<IndexDoc> {
    entries
        .into_iter()
        .map(|e| IndexDoc {
            id: e.entry_id.clone(),
            text: e.text.clone(),
            embedding: e.embedding.clone(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AspectHit {
    pub aspect: String,
    pub hit: RetrievalHit,
}

pub const DEFAULT_K_PER_ASPECT: usize = 3;

/// Searches a user's local-tier memory once per aspect and merges the hits.
///
/// An entry reached by several aspects appears once, under the aspect where
/// it ranked best (earlier aspect on equal rank). Output is ordered by
/// aspect position, then rank. An empty local memory yields no hits.
pub fn search_memory(
    store: &MemoryStore,
    user_id: &str,
    aspects: &[String],
    k_per_aspect: usize,
    retriever: &Retriever<'_>,
) -> Result<Vec<AspectHit>, RetrievalError> {
    if aspects.is_empty() {
        return Err(RetrievalError::NoAspects);
    }
    let local = store.local_entries(user_id);
    if local.is_empty() {
        log::warn!("user {user_id} has no local memory");
        return Ok(Vec::new());
    }
    let index = retriever.build(index_docs(local))?;
    let mut best: HashMap<String, (usize, usize, RetrievalHit)> = HashMap::new();
    for (ai, aspect) in aspects.iter().enumerate() {
        for hit in retriever.search(&index, aspect, k_per_aspect)? {
            let key = (hit.rank, ai);
            match best.get(&hit.doc_id) {
                Some(&(r, a, _)) if (r, a) <= key => {}
                _ => {
                    best.insert(hit.doc_id.clone(), (hit.rank, ai, hit));
                }
            }
        }
    }
    let mut merged: Vec<(usize, usize, RetrievalHit)> = best.into_values().collect();
    merged.sort_by(|a, b| {
        (a.1, a.0)
            .cmp(&(b.1, b.0))
            .then_with(|| a.2.doc_id.cmp(&b.2.doc_id))
    });
    Ok(merged
        .into_iter()
        .map(|(_, ai, hit)| AspectHit {
            aspect: aspects[ai].clone(),
            hit,
        })
        .collect())
}

/// Item index over catalog `metadata_text`.
#[derive(Clone, Debug)]
pub struct CatalogIndex {
    index: TextIndex,
}

impl CatalogIndex {
    pub fn build(catalog: &Catalog, retriever: &Retriever<'_>) -> Result<Self, RetrievalError> {
        let docs = catalog
            .items()
            .iter()
            .map(|i| IndexDoc {
                id: i.item_id.clone(),
                text: i.metadata_text.clone(),
                embedding: None,
            })
            .collect();
        Ok(Self {
            index: retriever.build(docs)?,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

pub const DEFAULT_K_ITEMS: usize = 1000;

/// Ranks catalog items against an ideal item profile.
pub fn search_items(
    catalog_index: &CatalogIndex,
    profile_text: &str,
    k: usize,
    retriever: &Retriever<'_>,
) -> Result<Vec<String>, RetrievalError> {
    Ok(retriever
        .search(&catalog_index.index, profile_text, k)?
        .into_iter()
        .map(|h| h.doc_id)
        .collect())
}

/// Orders hits by rank, then doc id, for callers merging hit lists.
pub fn by_rank(a: &RetrievalHit, b: &RetrievalHit) -> Ordering {
    a.rank.cmp(&b.rank).then_with(|| a.doc_id.cmp(&b.doc_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ItemDoc;
    use crate::gateway::HashEmbedder;
    use crate::memory::{MemoryScope, MemoryTier};
    use proptest::prelude::*;

    #[test]
    fn tokenize_rules() {
        assert!(tokenize("").is_empty());
        assert_eq!(
            tokenize("Leather-Patch hat!"),
            vec!["leather", "patch", "hat"]
        );
        assert_eq!(
            tokenize("6-Panel  Snapback"),
            vec!["6", "panel", "snapback"]
        );
    }

    proptest! {
        #[test]
        fn tokenize_idempotent(s in "\\PC{0,60}") {
            let once = tokenize(&s);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }
    }

    fn store() -> MemoryStore {
        let mut s = MemoryStore::new(64);
        let mk = |tier, text: &str| {
            MemoryEntry::new(
                tier,
                MemoryScope::user("u1"),
                Some("Clothing".into()),
                text,
                vec![],
            )
            .unwrap()
        };
        s.put_entries([
            mk(
                MemoryTier::PreferencePattern,
                "prefers real leather and premium materials",
            ),
            mk(
                MemoryTier::PreferencePattern,
                "adjustable fit and comfort matter",
            ),
            MemoryEntry::new(
                MemoryTier::GlobalAspect,
                MemoryScope::Global,
                Some("Clothing".into()),
                "Material Quality: leather",
                vec![],
            )
            .unwrap(),
        ])
        .unwrap();
        s
    }

    #[test]
    fn search_memory_counts_and_dedups() {
        let e = HashEmbedder::new(64, 1);
        let r = Retriever::new(RetrievalBackend::Bm25, &e);
        let s = store();
        let hits = search_memory(&s, "u1", &["leather".to_string()], 3, &r).unwrap();
        // Both local entries are returned (BM25 ranks zero-score docs too); global is excluded.
        assert_eq!(hits.len(), 2);
        assert!(hits
            .iter()
            .all(|h| s.get(&h.hit.doc_id).unwrap().tier.is_local()));
        let twice = search_memory(
            &s,
            "u1",
            &["leather".to_string(), "leather".to_string()],
            3,
            &r,
        )
        .unwrap();
        assert_eq!(twice.len(), 2);
        assert!(twice.iter().all(|h| h.aspect == "leather"));
        assert!(search_memory(&s, "nobody", &["x".to_string()], 3, &r)
            .unwrap()
            .is_empty());
        assert!(matches!(
            search_memory(&s, "u1", &[], 3, &r),
            Err(RetrievalError::NoAspects)
        ));
        assert_eq!(DEFAULT_K_PER_ASPECT, 3);
    }

    fn catalog(n: usize) -> Catalog {
        let words = [
            "leather",
            "cap",
            "hat",
            "wool",
            "usb",
            "cable",
            "cotton",
            "shirt",
            "snapback",
            "adjustable",
        ];
        Catalog::from_items(
            (0..n)
                .map(|i| ItemDoc {
                    item_id: format!("item{i:03}"),
                    title: format!("Item {i}"),
                    category: "C".into(),
                    metadata_text: format!(
                        "{} {} {} number{i}",
                        words[i % 10],
                        words[(i * 3 + 1) % 10],
                        words[(i * 7 + 2) % 10]
                    ),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn item_self_retrieval_dense() {
        let e = HashEmbedder::new(64, 9);
        let r = Retriever::new(RetrievalBackend::Dense, &e);
        let cat = catalog(50);
        let idx = CatalogIndex::build(&cat, &r).unwrap();
        let target = &cat.items()[17];
        let ranked = search_items(&idx, &target.metadata_text, 1000, &r).unwrap();
        assert_eq!(ranked[0], target.item_id);
        assert_eq!(ranked.len(), 50);
    }

    #[test]
    fn backends_return_same_candidate_set() {
        let e = HashEmbedder::new(64, 9);
        let cat = catalog(50);
        let mut sets = Vec::new();
        for backend in [RetrievalBackend::Bm25, RetrievalBackend::Dense] {
            let r = Retriever::new(backend, &e);
            let idx = CatalogIndex::build(&cat, &r).unwrap();
            let mut ids = search_items(&idx, "leather cap", 1000, &r).unwrap();
            ids.sort();
            sets.push(ids);
        }
        assert_eq!(sets[0], sets[1]);
    }

    #[test]
    fn zero_k_rejected() {
        let e = HashEmbedder::new(8, 0);
        let r = Retriever::new(RetrievalBackend::Bm25, &e);
        let idx = r
            .build(vec![IndexDoc {
                id: "a".into(),
                text: "x".into(),
                embedding: None,
            }])
            .unwrap();
        assert!(matches!(r.search(&idx, "x", 0), Err(RetrievalError::ZeroK)));
    }
}
