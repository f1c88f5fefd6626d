use super::{rank_scored, RetrievalError, RetrievalHit};

/// Exact cosine search over unit-normalized rows.
#[derive(Clone, Debug)]
pub struct DenseIndex {
    doc_ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

pub(crate) fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm.is_nan() || norm <= 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

impl DenseIndex {
    pub fn build<I>(dim: usize, docs: I) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut doc_ids = Vec::new();
        let mut vectors = Vec::new();
        for (id, v) in docs {
            if v.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            let unit =
                normalized(&v).ok_or_else(|| RetrievalError::DegenerateVector(id.clone()))?;
            doc_ids.push(id);
            vectors.push(unit);
        }
        Ok(Self {
            doc_ids,
            vectors,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if query.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let q =
            normalized(query).ok_or_else(|| RetrievalError::DegenerateVector("<query>".into()))?;
        let scores = self.vectors.iter().map(|row| {
            let dot: f64 = row.iter().zip(&q).map(|(a, b)| a * b).sum();
            dot.clamp(-1.0, 1.0)
        });
        Ok(rank_scored(
            self.doc_ids.iter().map(String::as_str).zip(scores),
            k,
        ))
    }
}
