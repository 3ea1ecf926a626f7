//! K-means with k-means++ seeding: Lloyd iterations, then Hartigan's
//! single-point transfers, which escape some of Lloyd's fixed points.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves further than this (Euclidean).
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest-inertia fit wins.
    pub n_init: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            max_iter: 300,
            tol: 1e-6,
            n_init: 1,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut sorted: Vec<&Vec<f64>> = points.iter().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    sorted.dedup();
    sorted.len()
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, cfg: &KMeansConfig) -> KMeansFit {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments = vec![0; points.len()];
    let mut iterations = 0;
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        for (a, p) in assignments.iter_mut().zip(points) {
            *a = nearest(&centroids, p).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        // An emptied cluster takes over the point furthest from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let (far, _) = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, &centroids[assignments[i]])))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                let old = assignments[far];
                counts[old] -= 1;
                for (s, v) in sums[old].iter_mut().zip(&points[far]) {
                    *s -= v;
                }
                assignments[far] = c;
                counts[c] = 1;
                sums[c] = points[far].clone();
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if shift < cfg.tol {
            break;
        }
    }
    for (a, p) in assignments.iter_mut().zip(points) {
        *a = nearest(&centroids, p).0;
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    KMeansFit {
        centroids,
        assignments,
        inertia,
        iterations,
    }
}

/// Moves single points between clusters while a move lowers the total
/// within-cluster sum of squares. Every fixed point is also a Lloyd fixed
/// point, so the result keeps nearest-centroid assignments.
fn hartigan(points: &[Vec<f64>], fit: KMeansFit) -> KMeansFit {
    let KMeansFit {
        mut centroids,
        mut assignments,
        iterations,
        ..
    } = fit;
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    // Each accepted move strictly lowers the inertia, so this terminates;
    // the pass cap only guards against floating-point cycling.
    for _ in 0..1000 {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let from = assignments[i];
            let n_from = counts[from] as f64;
            if counts[from] <= 1 {
                continue;
            }
            let removal = n_from / (n_from - 1.0) * sq_dist(p, &centroids[from]);
            let mut best = (from, removal);
            for to in (0..k).filter(|&c| c != from) {
                let n_to = counts[to] as f64;
                let addition = n_to / (n_to + 1.0) * sq_dist(p, &centroids[to]);
                if addition < best.1 {
                    best = (to, addition);
                }
            }
            let to = best.0;
            if to == from || removal - best.1 <= 1e-12 * (1.0 + removal) {
                continue;
            }
            let n_to = counts[to] as f64;
            for d in 0..p.len() {
                centroids[from][d] = (centroids[from][d] * n_from - p[d]) / (n_from - 1.0);
                centroids[to][d] = (centroids[to][d] * n_to + p[d]) / (n_to + 1.0);
            }
            counts[from] -= 1;
            counts[to] += 1;
            assignments[i] = to;
            moved = true;
        }
        if !moved {
            break;
        }
    }
    // Recompute centroids exactly to shed drift from the incremental updates.
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    for (p, &a) in points.iter().zip(&assignments) {
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for c in 0..k {
        centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    KMeansFit {
        centroids,
        assignments,
        inertia,
        iterations,
    }
}

/// Deterministic given `cfg.seed`.
pub fn kmeans(points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<KMeansFit> {
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let distinct = count_distinct(points);
    if distinct < cfg.k {
        return Err(Error::TooFewPoints {
            needed: cfg.k,
            got: distinct,
        });
    }
    let mut best: Option<KMeansFit> = None;
    for run in 0..cfg.n_init.max(1) {
        let mut rng = seed::rng(cfg.seed, &[run as u64]);
        let init = plus_plus_init(points, cfg.k, &mut rng);
        let fit = hartigan(points, lloyd(points, init, cfg));
        if best.as_ref().map_or(true, |b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one run"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Vec<f64>> {
        v.iter().map(|&(a, b)| vec![a, b]).collect()
    }

    #[test]
    fn k_points_are_their_own_centroids() {
        let p = pts(&[(0.0, 0.0), (1.0, 5.0), (3.0, -2.0)]);
        let fit = kmeans(&p, &KMeansConfig::new(3, 7)).unwrap();
        assert_eq!(fit.inertia, 0.0);
        let mut c = fit.centroids.clone();
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(c, p);
    }

    #[test]
    fn too_few_distinct_points() {
        let p = pts(&[(0.0, 0.0), (0.0, 0.0), (1.0, 1.0)]);
        assert!(matches!(
            kmeans(&p, &KMeansConfig::new(3, 1)),
            Err(Error::TooFewPoints { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn two_tight_clusters_match_brute_force() {
        let mut rng = seed::rng(3, &[]);
        let mut p = Vec::new();
        for _ in 0..6 {
            p.push(vec![rng.gen::<f64>() * 0.1, rng.gen::<f64>() * 0.1]);
            p.push(vec![5.0 + rng.gen::<f64>() * 0.1, 5.0 + rng.gen::<f64>() * 0.1]);
        }
        // Exhaustive 2-partition search.
        let n = p.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << n) - 1 {
            let mut groups = [vec![], vec![]];
            for (i, q) in p.iter().enumerate() {
                groups[((mask >> i) & 1) as usize].push(q.clone());
            }
            let means: Vec<Vec<f64>> = groups
                .iter()
                .map(|g| {
                    (0..2)
                        .map(|d| g.iter().map(|q| q[d]).sum::<f64>() / g.len() as f64)
                        .collect()
                })
                .collect();
            let sse: f64 = groups
                .iter()
                .zip(&means)
                .map(|(g, m)| g.iter().map(|q| sq_dist(q, m)).sum::<f64>())
                .sum();
            if sse < best.0 {
                best = (sse, means);
            }
        }
        let fit = kmeans(&p, &KMeansConfig::new(2, 11)).unwrap();
        assert!((fit.inertia - best.0).abs() < 1e-9);
        for m in &best.1 {
            let (_, d) = nearest(&fit.centroids, m);
            assert!(d < 1e-18);
        }
    }

    #[test]
    fn same_seed_same_result() {
        let mut rng = seed::rng(5, &[]);
        let p: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.gen(), rng.gen(), rng.gen()]).collect();
        let a = kmeans(&p, &KMeansConfig::new(8, 42)).unwrap();
        let b = kmeans(&p, &KMeansConfig::new(8, 42)).unwrap();
        assert_eq!(a, b);
    }
}
