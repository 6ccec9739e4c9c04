//! Seeded k-means and cluster purity against speaker labels.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

const RESTARTS: usize = 10;
const MAX_ITERS: usize = 200;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = dist2(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    // k-means++ seeding
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let weights: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
    }

    let dim = points[0].len();
    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (a, p) in assignment.iter_mut().zip(points) {
            let (k, _) = nearest(p, &centroids);
            if *a != k {
                *a = k;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignment.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    let inertia = assignment
        .iter()
        .zip(points)
        .map(|(&a, p)| dist2(p, &centroids[a]))
        .sum();
    KMeansResult {
        assignment,
        centroids,
        inertia,
    }
}

/// Best of several seeded k-means++ runs by inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::Empty("kmeans"));
    }
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in [1, {}]",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..RESTARTS {
        let run = kmeans_once(points, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Fraction of points whose cluster's majority label matches their own:
/// `(1/N) Σ_clusters max_label count`.
pub fn purity_of_assignment<L: std::hash::Hash + Eq>(assignment: &[usize], labels: &[L]) -> f64 {
    let mut counts: HashMap<usize, HashMap<&L, usize>> = HashMap::new();
    for (&a, l) in assignment.iter().zip(labels) {
        *counts.entry(a).or_default().entry(l).or_default() += 1;
    }
    let hit: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    hit as f64 / labels.len() as f64
}

/// Purity of a `k`-cluster k-means partition of `points` against `labels`.
pub fn cluster_purity<L: std::hash::Hash + Eq>(points: &[Vec<f64>], labels: &[L], k: usize, seed: u64) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cluster_purity",
            left: vec![points.len()],
            right: vec![labels.len()],
        });
    }
    let result = kmeans(points, k, seed)?;
    Ok(purity_of_assignment(&result.assignment, labels))
}

/// Frequency of the most common label: the purity of a single cluster.
pub fn modal_frequency<L: std::hash::Hash + Eq>(labels: &[L]) -> f64 {
    purity_of_assignment(&vec![0; labels.len()], labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_groups_are_pure() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (g, centre) in [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]].iter().enumerate() {
            for j in 0..5 {
                pts.push(vec![centre[0] + 0.01 * j as f64, centre[1] - 0.02 * j as f64]);
                labels.push(format!("s{g}"));
            }
        }
        assert_eq!(cluster_purity(&pts, &labels, 3, 1).unwrap(), 1.0);
    }

    #[test]
    fn single_record() {
        assert_eq!(cluster_purity(&[vec![0.3]], &["a"], 1, 0).unwrap(), 1.0);
    }

    #[test]
    fn one_cluster_is_modal_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels: Vec<usize> = (0..500).map(|_| rng.random_range(0..5)).collect();
        let pts: Vec<Vec<f64>> = (0..500).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let mut counts = [0usize; 5];
        labels.iter().for_each(|&l| counts[l] += 1);
        let expect = *counts.iter().max().unwrap() as f64 / 500.0;
        assert_eq!(cluster_purity(&pts, &labels, 1, 0).unwrap(), expect);
        assert_eq!(modal_frequency(&labels), expect);
    }

    #[test]
    fn k_too_large() {
        assert!(cluster_purity(&[vec![0.0]], &[1], 2, 0).is_err());
        assert!(cluster_purity::<u8>(&[], &[], 1, 0).is_err());
    }
}
