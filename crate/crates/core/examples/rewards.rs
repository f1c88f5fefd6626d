//! Ranking metrics and the combined episode reward as the ground-truth rank moves.
//!
//! cargo run --example rewards

use memrec::reward::{ndcg_for_rank, recall_for_rank, RewardWeights};

fn main() {
    let w = RewardWeights::default();
    println!(
        "weights: format {}, rec {}, memory {}\n",
        w.w_format, w.w_rec, w.w_mem
    );
    println!(
        "{:>6} {:>9} {:>9} {:>10} {:>10} {:>8}",
        "rank", "nDCG@10", "R@100", "nDCG@100", "nDCG@1000", "reward"
    );
    for rank in [
        Some(1),
        Some(2),
        Some(5),
        Some(10),
        Some(50),
        Some(100),
        Some(500),
        Some(1000),
        None,
    ] {
        let r_rec = ndcg_for_rank(rank, 1000) + ndcg_for_rank(rank, 100);
        let total = w.combine(1.0, r_rec, 1.0).combined;
        let label = rank.map_or("miss".to_string(), |r| r.to_string());
        println!(
            "{label:>6} {:>9.4} {:>9.0} {:>10.4} {:>10.4} {:>8.3}",
            ndcg_for_rank(rank, 10),
            recall_for_rank(rank, 100),
            ndcg_for_rank(rank, 100),
            ndcg_for_rank(rank, 1000),
            total
        );
    }
    println!(
        "\nno boxed answer and no memory use at rank 1: {:.2}",
        w.combine(0.0, 2.0, 0.0).combined
    );
}
