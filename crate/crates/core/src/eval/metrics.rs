//! Single-relevant-item ranking metrics over a 1-based rank.

fn within(rank: Option<usize>, k: usize) -> Option<usize> {
    assert!(k >= 1, "k must be at least 1");
    rank.filter(|&r| r >= 1 && r <= k)
}

pub fn recall_at_k(rank: Option<usize>, k: usize) -> f64 {
    if within(rank, k).is_some() {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: Option<usize>, k: usize) -> f64 {
    within(rank, k).map_or(0.0, |r| 1.0 / ((r + 1) as f64).log2())
}

pub fn mrr_at_k(rank: Option<usize>, k: usize) -> f64 {
    within(rank, k).map_or(0.0, |r| 1.0 / r as f64)
}
