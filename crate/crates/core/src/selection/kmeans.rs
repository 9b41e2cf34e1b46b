//! Seeded Lloyd's K-means with k-means++ initialisation.
//!
//! The procedure is fixed so that a seed fully determines the result:
//!
//! 1. First centre: `rng.gen_range(0..n)`. Each further centre: draw
//!    `r = rng.gen::<f64>() * total` where `total` is the sum of squared
//!    distances to the nearest chosen centre, and take the first point
//!    whose running sum exceeds `r`.
//! 2. Lloyd iterations (at most 100): assign every point to its nearest
//!    centre (lowest index on ties), repair empty clusters, move centres
//!    to member means, stop once no centre moves by 1e-6 or more.
//! 3. Empty-cluster repair: move the empty cluster's centre onto the point
//!    farthest from its own centre, then reassign.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SelectionError;

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Indices into the input point list, ascending.
    pub members: Vec<usize>,
    pub centroid: Vec<f64>,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut seen: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !seen.contains(&p) {
            seen.push(p);
        }
    }
    seen.len()
}

fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.gen_range(0..n)].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let r = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, d) in d2.iter().enumerate() {
            acc += d;
            if acc > r {
                pick = Some(i);
                break;
            }
        }
        // Rounding can leave `acc <= r` at the end; fall back to the last
        // point with positive distance.
        let pick = pick.unwrap_or_else(|| d2.iter().rposition(|d| *d > 0.0).expect("distinct points remain"));
        centroids.push(points[pick].clone());
    }
    centroids
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.iter().map(|p| nearest(p, centroids).0).collect()
}

/// Reassigns until every cluster has at least one member.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignment: &mut Vec<usize>) {
    let k = centroids.len();
    for _ in 0..k * points.len().max(1) {
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = (usize::MAX, -1.0f64);
        for (i, p) in points.iter().enumerate() {
            if sizes[assignment[i]] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[assignment[i]]);
            if d > far.1 {
                far = (i, d);
            }
        }
        if far.0 == usize::MAX {
            return;
        }
        centroids[empty] = points[far.0].clone();
        *assignment = assign(points, centroids);
    }
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize, previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(j, (s, c))| {
            if c == 0 {
                previous[j].clone()
            } else {
                s.into_iter().map(|v| v / c as f64).collect()
            }
        })
        .collect()
}

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Cluster>, SelectionError> {
    if k == 0 || points.len() < k {
        return Err(SelectionError::Insufficient {
            needed: k.max(1),
            available: points.len(),
        });
    }
    let distinct = distinct_count(points);
    if distinct < k {
        return Err(SelectionError::DegenerateClustering { distinct, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut assignment = assign(points, &centroids);
    for _ in 0..MAX_ITERATIONS {
        repair_empty(points, &mut centroids, &mut assignment);
        let next = means(points, &assignment, k, &centroids);
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        assignment = assign(points, &centroids);
        if shift < TOLERANCE {
            break;
        }
    }
    repair_empty(points, &mut centroids, &mut assignment);

    let mut clusters: Vec<Cluster> = centroids
        .into_iter()
        .map(|centroid| Cluster {
            members: Vec::new(),
            centroid,
        })
        .collect();
    for (i, &a) in assignment.iter().enumerate() {
        clusters[a].members.push(i);
    }
    Ok(clusters)
}

/// Member closest to the centroid (lowest index on ties).
pub fn representative(cluster: &Cluster, points: &[Vec<f64>]) -> usize {
    let mut best = (cluster.members[0], f64::INFINITY);
    for &m in &cluster.members {
        let d = squared_distance(&points[m], &cluster.centroid);
        if d < best.1 {
            best = (m, d);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_equals_n_gives_singletons() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let clusters = kmeans(&pts, 5, 7).unwrap();
        let mut members: Vec<usize> = clusters.iter().flat_map(|c| c.members.clone()).collect();
        members.sort();
        assert_eq!(members, vec![0, 1, 2, 3, 4]);
        assert!(clusters.iter().all(|c| c.members.len() == 1));
    }

    #[test]
    fn k_one_is_the_mean() {
        let pts = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]];
        let clusters = kmeans(&pts, 1, 3).unwrap();
        assert_eq!(clusters[0].members, vec![0, 1, 2]);
        assert!(squared_distance(&clusters[0].centroid, &[1.0, 1.0]) < 1e-18);
    }

    #[test]
    fn separated_blobs_split_cleanly_and_are_a_fixed_point() {
        let mut pts = Vec::new();
        for i in 0..6 {
            let jitter = i as f64 * 0.01;
            pts.push(vec![jitter, 1.0 - jitter]);
            pts.push(vec![50.0 + jitter, 50.0 - jitter]);
        }
        for seed in 0..20 {
            let clusters = kmeans(&pts, 2, seed).unwrap();
            for c in &clusters {
                let blob = c.members[0] % 2;
                assert!(c.members.iter().all(|m| m % 2 == blob), "seed {seed}");
            }
            // Independent check: every point's nearest converged centroid is
            // the centroid of its own cluster.
            for (j, c) in clusters.iter().enumerate() {
                for &m in &c.members {
                    let d = |x: &[f64]| pts[m].iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                    let own = d(&c.centroid);
                    for (o, other) in clusters.iter().enumerate() {
                        if o != j {
                            assert!(own <= d(&other.centroid));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn duplicates_below_k_are_degenerate() {
        let pts = vec![vec![1.0], vec![1.0], vec![1.0], vec![2.0]];
        assert_eq!(
            kmeans(&pts, 3, 0),
            Err(SelectionError::DegenerateClustering { distinct: 2, k: 3 })
        );
        let clusters = kmeans(&pts, 2, 0).unwrap();
        assert!(clusters.iter().all(|c| !c.members.is_empty()));
    }

    #[test]
    fn deterministic_for_a_seed() {
        let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![(i * 7 % 11) as f64, (i * 3 % 5) as f64]).collect();
        assert_eq!(kmeans(&pts, 4, 99).unwrap(), kmeans(&pts, 4, 99).unwrap());
    }
}
