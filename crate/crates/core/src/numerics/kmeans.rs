//! Lloyd's K-means with distance-weighted seeding.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NumericsError;

/// Outcome of a K-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster index of every input point, in `[0, k)`.
    pub assignments: Vec<usize>,
    /// Cluster means, sorted lexicographically by coordinate.
    pub centers: Vec<Vec<f64>>,
    /// Sum of squared distances of every point to its assigned center.
    pub objective: f64,
    /// Objective after every Lloyd iteration of the winning restart.
    pub history: Vec<f64>,
}

/// Tuning knobs beyond the required arguments.
#[derive(Debug, Clone, Copy)]
pub struct KMeansOptions {
    /// Number of independently seeded restarts; the lowest objective wins.
    pub restarts: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { restarts: 32 }
    }
}

/// Cluster `points` into `k` groups, minimizing the within-cluster sum of
/// squared Euclidean distances.
pub fn kmeans<P: AsRef<[f64]>>(
    points: &[P],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<KMeansResult, NumericsError> {
    kmeans_with(points, k, seed, max_iter, KMeansOptions::default())
}

pub fn kmeans_with<P: AsRef<[f64]>>(
    points: &[P],
    k: usize,
    seed: u64,
    max_iter: usize,
    options: KMeansOptions,
) -> Result<KMeansResult, NumericsError> {
    if points.is_empty() {
        return Err(NumericsError::EmptyInput);
    }
    if k == 0 {
        return Err(NumericsError::InvalidArgument("k must be at least 1".into()));
    }
    if max_iter == 0 {
        return Err(NumericsError::InvalidArgument("max_iter must be at least 1".into()));
    }
    let dim = points[0].as_ref().len();
    if dim == 0 || points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(NumericsError::InvalidArgument(
            "points must share a non-zero dimension".into(),
        ));
    }
    let data: Vec<f64> = points.iter().flat_map(|p| p.as_ref().iter().copied()).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::InvalidArgument("points must be finite".into()));
    }
    let distinct = count_distinct(&data, dim, k);
    if distinct < k {
        return Err(NumericsError::InsufficientDistinctPoints { needed: k, found: distinct });
    }

    let mut best: Option<Run> = None;
    for restart in 0..options.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart as u64);
        let run = lloyd(&data, dim, k, max_iter, &mut rng);
        let better = match &best {
            None => true,
            Some(b) => run.objective < b.objective,
        };
        if better {
            best = Some(run);
        }
    }
    let run = best.expect("at least one restart");
    Ok(canonicalize(run, &data, dim))
}

struct Run {
    centers: Vec<f64>,
    objective: f64,
    history: Vec<f64>,
}

/// Counts distinct points, stopping early once `cap` is reached.
fn count_distinct(data: &[f64], dim: usize, cap: usize) -> usize {
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for p in data.chunks_exact(dim) {
        // -0.0 and 0.0 are the same point
        seen.insert(p.iter().map(|v| (v + 0.0).to_bits()).collect());
        if seen.len() >= cap {
            break;
        }
    }
    seen.len()
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_centers(data: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centers.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = data.chunks_exact(dim).map(|p| sq_dist(p, &centers[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        // distinct-point precondition guarantees total > 0 here
        let mut target = rng.gen::<f64>() * total;
        let mut chosen = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if target < w {
                chosen = i;
                break;
            }
            target -= w;
            chosen = i;
        }
        let c = &data[chosen * dim..(chosen + 1) * dim];
        centers.extend_from_slice(c);
        for (p, w) in data.chunks_exact(dim).zip(d2.iter_mut()) {
            *w = w.min(sq_dist(p, c));
        }
    }
    centers
}

fn lloyd(data: &[f64], dim: usize, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> Run {
    let n = data.len() / dim;
    let mut centers = seed_centers(data, dim, k, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();

    for _ in 0..max_iter {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, p) in data.chunks_exact(dim).enumerate() {
            let (j, d) = nearest(p, &centers, dim);
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
            dists[i] = d;
        }
        // An empty cluster takes over the point farthest from its own center.
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] == 0 {
                let (far, _) = dists
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| counts[assignments[*i]] > 1)
                    .fold((0, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
                counts[assignments[far]] -= 1;
                assignments[far] = j;
                counts[j] = 1;
                dists[far] = 0.0;
                changed = true;
            }
        }
        update_centers(data, dim, k, &assignments, &counts, &mut centers);
        history.push(objective(data, dim, &assignments, &centers));
        if !changed {
            break;
        }
    }
    refine_single_moves(data, dim, k, &mut assignments, &mut centers, &mut history);
    let objective = *history.last().expect("max_iter >= 1");
    Run { centers, objective, history }
}

/// Moves single points between clusters while a move strictly lowers the
/// objective (Hartigan's criterion), escaping Lloyd fixed points that are not
/// local optima under point transfers.
fn refine_single_moves(
    data: &[f64],
    dim: usize,
    k: usize,
    assignments: &mut [usize],
    centers: &mut [f64],
    history: &mut Vec<f64>,
) {
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    update_centers(data, dim, k, assignments, &counts, centers);
    let n = assignments.len();
    for _sweep in 0..100 {
        let mut moved = false;
        for i in 0..n {
            let p = &data[i * dim..(i + 1) * dim];
            let from = assignments[i];
            if counts[from] < 2 {
                continue;
            }
            let nf = counts[from] as f64;
            let removal_gain = nf / (nf - 1.0) * sq_dist(p, &centers[from * dim..(from + 1) * dim]);
            let mut best: Option<(usize, f64)> = None;
            for j in (0..k).filter(|&j| j != from) {
                let nj = counts[j] as f64;
                let cost = nj / (nj + 1.0) * sq_dist(p, &centers[j * dim..(j + 1) * dim]);
                if cost < best.map_or(f64::INFINITY, |b| b.1) {
                    best = Some((j, cost));
                }
            }
            let Some((to, cost)) = best else { continue };
            if cost < removal_gain * (1.0 - 1e-12) {
                for t in 0..dim {
                    let cf = &mut centers[from * dim + t];
                    *cf = (*cf * nf - p[t]) / (nf - 1.0);
                    let nt = counts[to] as f64;
                    let ct = &mut centers[to * dim + t];
                    *ct = (*ct * nt + p[t]) / (nt + 1.0);
                }
                counts[from] -= 1;
                counts[to] += 1;
                assignments[i] = to;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        // recompute exactly to shed incremental round-off
        update_centers(data, dim, k, assignments, &counts, centers);
        let obj = objective(data, dim, assignments, centers);
        let last = *history.last().unwrap_or(&f64::INFINITY);
        debug_assert!(obj <= last * (1.0 + 1e-12) + 1e-300);
        history.push(obj);
    }
}

fn update_centers(
    data: &[f64],
    dim: usize,
    k: usize,
    assignments: &[usize],
    counts: &[usize],
    centers: &mut [f64],
) {
    let mut sums = vec![0.0; k * dim];
    for (p, &a) in data.chunks_exact(dim).zip(assignments) {
        for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
            *s += v;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            for t in 0..dim {
                centers[j * dim + t] = sums[j * dim + t] / counts[j] as f64;
            }
        }
    }
}

fn objective(data: &[f64], dim: usize, assignments: &[usize], centers: &[f64]) -> f64 {
    data.chunks_exact(dim)
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centers[a * dim..(a + 1) * dim]))
        .sum()
}

/// Reorders clusters so that centers are lexicographically ascending, then
/// re-assigns every point to its nearest center (ties to the lowest index).
fn canonicalize(run: Run, data: &[f64], dim: usize) -> KMeansResult {
    let k = run.centers.len() / dim;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ca = &run.centers[a * dim..(a + 1) * dim];
        let cb = &run.centers[b * dim..(b + 1) * dim];
        ca.partial_cmp(cb).unwrap_or(std::cmp::Ordering::Equal)
    });
    let centers: Vec<f64> = order
        .iter()
        .flat_map(|&j| run.centers[j * dim..(j + 1) * dim].iter().copied())
        .collect();
    let assignments: Vec<usize> =
        data.chunks_exact(dim).map(|p| nearest(p, &centers, dim).0).collect();
    let objective = objective(data, dim, &assignments, &centers);
    let mut history = run.history;
    if history.last() != Some(&objective) {
        history.push(objective);
    }
    KMeansResult {
        assignments,
        centers: centers.chunks_exact(dim).map(|c| c.to_vec()).collect(),
        objective,
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive minimum over all 2-partitions with both parts non-empty.
    fn brute_force_k2(points: &[Vec<f64>]) -> f64 {
        let n = points.len();
        let dim = points[0].len();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let mut cost = 0.0;
            for side in [true, false] {
                let members: Vec<&Vec<f64>> = (0..n)
                    .filter(|&i| ((mask >> i) & 1 == 1) == side)
                    .map(|i| &points[i])
                    .collect();
                let mut mean = vec![0.0; dim];
                for m in &members {
                    for t in 0..dim {
                        mean[t] += m[t] / members.len() as f64;
                    }
                }
                cost += members.iter().map(|m| sq_dist(m, &mean)).sum::<f64>();
            }
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn two_points_two_clusters() {
        let r = kmeans(&[vec![0.0], vec![10.0]], 2, 1, 10).unwrap();
        assert_eq!(r.centers, vec![vec![0.0], vec![10.0]]);
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn four_points_matches_brute_force() {
        let pts = vec![vec![0.0], vec![1.0], vec![9.0], vec![10.0]];
        let r = kmeans(&pts, 2, 3, 50).unwrap();
        assert_eq!(r.centers, vec![vec![0.5], vec![9.5]]);
        assert!((r.objective - 1.0).abs() < 1e-12);
        assert!((brute_force_k2(&pts) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_is_global_mean() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![5.0, 8.0], vec![-2.0, 0.5]];
        let r = kmeans(&pts, 1, 0, 10).unwrap();
        let mean = [7.0 / 4.0, 9.5 / 4.0];
        assert!((r.centers[0][0] - mean[0]).abs() < 1e-12);
        assert!((r.centers[0][1] - mean[1]).abs() < 1e-12);
        let total: f64 = pts.iter().map(|p| sq_dist(p, &mean)).sum();
        assert!((r.objective - total).abs() < 1e-9);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(kmeans(&empty, 2, 0, 10), Err(NumericsError::EmptyInput)));
        let same = vec![vec![3.0, 3.0]; 20];
        assert!(matches!(
            kmeans(&same, 2, 0, 10),
            Err(NumericsError::InsufficientDistinctPoints { needed: 2, found: 1 })
        ));
    }

    #[test]
    fn deterministic_for_seed() {
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|i| vec![((i * 37) % 101) as f64, ((i * 53) % 89) as f64])
            .collect();
        let a = kmeans(&pts, 4, 11, 100).unwrap();
        let b = kmeans(&pts, 4, 11, 100).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn objective_is_consistent_and_monotone(
            pts in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 2), 6..60),
            k in 1usize..5,
            seed in any::<u64>(),
        ) {
            let distinct = count_distinct(&pts.concat(), 2, usize::MAX);
            prop_assume!(distinct >= k);
            let r = kmeans(&pts, k, seed, 100).unwrap();
            for w in r.history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
            // nearest-center assignment, ties to the lowest index
            let flat: Vec<f64> = r.centers.concat();
            for (p, &a) in pts.iter().zip(&r.assignments) {
                prop_assert_eq!(nearest(p, &flat, 2).0, a);
            }
            let recomputed: f64 = pts.iter().zip(&r.assignments)
                .map(|(p, &a)| sq_dist(p, &r.centers[a])).sum();
            prop_assert!((recomputed - r.objective).abs() <= 1e-9 * recomputed.max(1.0));
        }

        #[test]
        fn small_instances_reach_brute_force_optimum(
            pts in prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 2), 2..=8),
            seed in any::<u64>(),
        ) {
            prop_assume!(count_distinct(&pts.concat(), 2, usize::MAX) >= 2);
            let r = kmeans(&pts, 2, seed, 100).unwrap();
            let opt = brute_force_k2(&pts);
            prop_assert!((r.objective - opt).abs() <= 1e-9 * opt.max(1.0));
        }
    }
}
