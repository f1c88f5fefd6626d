//! Ranking metrics and the episode reward `w_format·R_format + w_rec·R_rec + w_mem·R_mem`.
//!
//! Relevance is binary with one ground-truth item per query, so the ideal DCG
//! is 1 and nDCG@k reduces to `1/log2(rank + 1)` inside the window.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::agent::{parse_boxed_answer, ReasoningTrace};

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("duplicate item {item_id:?} at rank {rank}")]
    DuplicateItem { item_id: String, rank: usize },
    #[error("reward weights must be finite")]
    NonFiniteWeight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub item_ids: Vec<String>,
    pub ground_truth_item_id: String,
}

impl RankedList {
    pub fn new(
        query_id: impl Into<String>,
        item_ids: Vec<String>,
        ground_truth_item_id: impl Into<String>,
    ) -> Result<Self, RewardError> {
        let mut seen = HashSet::new();
        for (i, id) in item_ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(RewardError::DuplicateItem {
                    item_id: id.clone(),
                    rank: i + 1,
                });
            }
        }
        Ok(Self {
            query_id: query_id.into(),
            item_ids,
            ground_truth_item_id: ground_truth_item_id.into(),
        })
    }

    /// An empty list: the ground truth was not retrieved.
    pub fn empty(query_id: impl Into<String>, ground_truth_item_id: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            item_ids: Vec::new(),
            ground_truth_item_id: ground_truth_item_id.into(),
        }
    }

    /// 1-indexed rank of the ground truth, if present.
    pub fn ground_truth_rank(&self) -> Option<usize> {
        self.item_ids
            .iter()
            .position(|id| *id == self.ground_truth_item_id)
            .map(|p| p + 1)
    }
}

fn assert_k(k: usize) {
    assert!(k >= 1, "k must be at least 1");
}

/// nDCG@k for a single relevant item at `rank` (1-indexed). Panics if `k == 0`.
pub fn ndcg_for_rank(rank: Option<usize>, k: usize) -> f64 {
    assert_k(k);
    match rank {
        Some(p) if p >= 1 && p <= k => 1.0 / ((p + 1) as f64).log2(),
        _ => 0.0,
    }
}

pub fn recall_for_rank(rank: Option<usize>, k: usize) -> f64 {
    assert_k(k);
    match rank {
        Some(p) if p >= 1 && p <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_at_k(ranked: &RankedList, k: usize) -> f64 {
    ndcg_for_rank(ranked.ground_truth_rank(), k)
}

pub fn recall_at_k(ranked: &RankedList, k: usize) -> f64 {
    recall_for_rank(ranked.ground_truth_rank(), k)
}

/// 1 when the trace ends in a well-formed boxed answer.
pub fn format_reward(trace: &ReasoningTrace) -> f64 {
    match &trace.final_text {
        Some(text) if parse_boxed_answer(text).is_ok() => 1.0,
        _ => 0.0,
    }
}

/// nDCG@1000 + nDCG@100.
pub fn rec_reward(ranked: &RankedList) -> f64 {
    ndcg_at_k(ranked, 1000) + ndcg_at_k(ranked, 100)
}

pub fn memory_reward(trace: &ReasoningTrace) -> f64 {
    if trace.memory_tool_called {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w_format: f64,
    pub w_rec: f64,
    pub w_mem: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_format: 0.1,
            w_rec: 5.0,
            w_mem: 0.1,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        if [self.w_format, self.w_rec, self.w_mem]
            .iter()
            .all(|w| w.is_finite())
        {
            Ok(())
        } else {
            Err(RewardError::NonFiniteWeight)
        }
    }

    pub fn combine(&self, r_format: f64, r_rec: f64, r_mem: f64) -> RewardBreakdown {
        RewardBreakdown {
            r_format,
            r_rec,
            r_mem,
            combined: self.w_format * r_format + self.w_rec * r_rec + self.w_mem * r_mem,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_rec: f64,
    pub r_mem: f64,
    pub combined: f64,
}

pub fn combined_reward(
    trace: &ReasoningTrace,
    ranked: &RankedList,
    weights: &RewardWeights,
) -> RewardBreakdown {
    weights.combine(
        format_reward(trace),
        rec_reward(ranked),
        memory_reward(trace),
    )
}
