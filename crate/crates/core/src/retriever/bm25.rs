use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{rank_scored, RetrievalError, RetrievalHit};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Okapi BM25 over pre-tokenized documents.
///
/// `IDF(t) = ln((N - df + 0.5) / (df + 0.5) + 1)`, and each query term
/// occurrence contributes `IDF(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len / avg_len))`.
#[derive(Clone, Debug)]
pub struct Bm25Index {
    doc_ids: Vec<String>,
    positions: HashMap<String, usize>,
    term_frequencies: Vec<HashMap<String, u32>>,
    document_frequencies: HashMap<String, u32>,
    postings: HashMap<String, Vec<(usize, u32)>>,
    doc_lengths: Vec<u32>,
    avg_doc_len: f64,
    params: Bm25Params,
}

impl Bm25Index {
    /// Later duplicates of a doc id are ignored.
    pub fn build<I>(docs: I, params: Bm25Params) -> Self
    where
        I: IntoIterator<Item = (String, Vec<String>)>,
    {
        let mut index = Bm25Index {
            doc_ids: Vec::new(),
            positions: HashMap::new(),
            term_frequencies: Vec::new(),
            document_frequencies: HashMap::new(),
            postings: HashMap::new(),
            doc_lengths: Vec::new(),
            avg_doc_len: 0.0,
            params,
        };
        for (id, tokens) in docs {
            if index.positions.contains_key(&id) {
                log::warn!("duplicate document id {id:?} ignored");
                continue;
            }
            let pos = index.doc_ids.len();
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, &count) in &tf {
                *index.document_frequencies.entry(term.clone()).or_default() += 1;
                index
                    .postings
                    .entry(term.clone())
                    .or_default()
                    .push((pos, count));
            }
            index.positions.insert(id.clone(), pos);
            index.doc_ids.push(id);
            index.doc_lengths.push(tokens.len() as u32);
            index.term_frequencies.push(tf);
        }
        let n = index.doc_lengths.len();
        if n > 0 {
            index.avg_doc_len = index.doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / n as f64;
        }
        index
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn document_frequency(&self, term: &str) -> u32 {
        self.document_frequencies.get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.document_frequency(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_weight(&self, term: &str, tf: u32, doc: usize) -> f64 {
        if tf == 0 {
            return 0.0;
        }
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let rel_len = if self.avg_doc_len > 0.0 {
            self.doc_lengths[doc] as f64 / self.avg_doc_len
        } else {
            0.0
        };
        self.idf(term) * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * rel_len))
    }

    pub fn score(&self, query_tokens: &[String], doc_id: &str) -> Result<f64, RetrievalError> {
        let &doc = self
            .positions
            .get(doc_id)
            .ok_or_else(|| RetrievalError::UnknownDoc(doc_id.to_string()))?;
        let tf = &self.term_frequencies[doc];
        Ok(query_tokens
            .iter()
            .map(|t| self.term_weight(t, tf.get(t).copied().unwrap_or(0), doc))
            .sum())
    }

    /// Scores every document; contributions are summed in query-term order,
    /// so results agree bit-for-bit with [`Bm25Index::score`].
    pub fn score_all(&self, query_tokens: &[String]) -> Vec<f64> {
        let mut scores = vec![0.0; self.len()];
        for t in query_tokens {
            if let Some(posting) = self.postings.get(t) {
                for &(doc, tf) in posting {
                    scores[doc] += self.term_weight(t, tf, doc);
                }
            }
        }
        scores
    }

    pub fn search(
        &self,
        query_tokens: &[String],
        k: usize,
    ) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let scores = self.score_all(query_tokens);
        Ok(rank_scored(
            self.doc_ids.iter().map(String::as_str).zip(scores),
            k,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retriever::tokenize;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn two_docs() -> Bm25Index {
        Bm25Index::build(
            vec![
                ("d1".to_string(), toks("a b")),
                ("d2".to_string(), toks("a a")),
            ],
            Bm25Params::default(),
        )
    }

    #[test]
    fn hand_computed_two_document_scores() {
        // Oracle by hand: N=2, df(a)=2 -> IDF = ln(0.5/2.5 + 1) = ln(1.2); avg_len = 2.
        // d1: tf=1, len=2 -> 1*2.2 / (1 + 1.2*1) = 1.0
        // d2: tf=2, len=2 -> 2*2.2 / (2 + 1.2*1) = 1.375
        let idx = two_docs();
        let q = toks("a");
        let idf = 1.2f64.ln();
        let d1 = idx.score(&q, "d1").unwrap();
        let d2 = idx.score(&q, "d2").unwrap();
        assert!((d1 - idf * 1.0).abs() < 1e-12);
        assert!((d2 - idf * 1.375).abs() < 1e-12);
        assert!(d2 > d1);
    }

    #[test]
    fn absent_terms_contribute_nothing() {
        let idx = two_docs();
        assert_eq!(idx.score(&toks("zzz"), "d1").unwrap(), 0.0);
        assert_eq!(idx.score(&toks("b"), "d2").unwrap(), 0.0);
        assert_eq!(idx.score(&[], "d1").unwrap(), 0.0);
    }

    #[test]
    fn duplicate_query_terms_add() {
        let idx = two_docs();
        let once = idx.score(&toks("a"), "d1").unwrap();
        let twice = idx.score(&toks("a a"), "d1").unwrap();
        assert_eq!(twice, 2.0 * once);
    }

    #[test]
    fn unknown_doc_and_empty_index() {
        assert!(matches!(
            two_docs().score(&toks("a"), "d9"),
            Err(RetrievalError::UnknownDoc(_))
        ));
        let empty = Bm25Index::build(Vec::<(String, Vec<String>)>::new(), Bm25Params::default());
        assert!(matches!(
            empty.search(&toks("a"), 3),
            Err(RetrievalError::EmptyIndex)
        ));
    }

    #[test]
    fn search_ranks_with_tie_break() {
        let idx = Bm25Index::build(
            vec![
                ("z".to_string(), toks("cap hat")),
                ("a".to_string(), toks("cap hat")),
                ("m".to_string(), toks("phone")),
            ],
            Bm25Params::default(),
        );
        let hits = idx.search(&toks("cap"), 10).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "z", "m"]);
        assert_eq!(
            hits.iter().map(|h| h.rank).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert_eq!(idx.search(&toks("cap"), 1).unwrap().len(), 1);
    }

    proptest! {
        #[test]
        fn search_agrees_with_pointwise_score(
            docs in prop::collection::vec(prop::collection::vec(0u8..6, 0..12), 1..15),
            query in prop::collection::vec(0u8..8, 0..5),
        ) {
            let docs: Vec<(String, Vec<String>)> = docs
                .into_iter()
                .enumerate()
                .map(|(i, d)| (format!("d{i:02}"), d.into_iter().map(|t| format!("t{t}")).collect()))
                .collect();
            let q: Vec<String> = query.into_iter().map(|t| format!("t{t}")).collect();
            let idx = Bm25Index::build(docs.clone(), Bm25Params::default());
            for hit in idx.search(&q, docs.len()).unwrap() {
                prop_assert_eq!(hit.score, idx.score(&q, &hit.doc_id).unwrap());
            }
        }
    }
}
