use std::cmp::Ordering;

/// Harmonic mean of two 1-based ranks: `2ab / (a + b)`. Lower is better.
pub fn harmonic_rank_merge(rank_a: usize, rank_b: usize) -> f64 {
    let (a, b) = (rank_a as f64, rank_b as f64);
    2.0 * a * b / (a + b)
}

/// Indices of `keys` ordered by score descending, then by the id pair.
pub fn order_desc<K: Ord>(scores: &[f64], keys: &[K]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| {
        scores[j]
            .total_cmp(&scores[i])
            .then_with(|| keys[i].cmp(&keys[j]))
    });
    idx
}

/// Indices ordered by value ascending, then by key.
pub fn order_asc<K: Ord>(values: &[f64], keys: &[K]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| match values[i].total_cmp(&values[j]) {
        Ordering::Equal => keys[i].cmp(&keys[j]),
        o => o,
    });
    idx
}

/// 1-based ordinal rank of each position given a preference order.
pub fn ordinal_ranks(order: &[usize]) -> Vec<usize> {
    let mut ranks = vec![0; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    ranks
}
