//! K-nearest-neighbour density peaks clustering.
//!
//! Local density is a Gaussian of the mean squared distance to the `k`
//! nearest neighbours; relative distance `δ` is the distance to the nearest
//! point of higher density. Centers are the tokens with the largest
//! `γ = density · δ`, and every other token joins its nearest center.
//! All ties resolve towards the lower index.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::kernels;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Center token indices, ordered by the earliest member of each cluster.
    pub centers: Vec<usize>,
    /// `assignment[t]` is the center token index that `t` belongs to.
    pub assignment: Vec<usize>,
    /// Members of each cluster (same order as `centers`), ascending.
    pub provenance: Vec<Vec<usize>>,
    /// One aggregated vector per cluster.
    pub aggregated: Vec<Vec<f64>>,
}

impl ClusterResult {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Round half away from zero, floored at one.
pub fn center_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n.max(1))
}

/// `max(2, round(0.1·N))`, capped at `N − 1`.
pub fn default_k(n: usize) -> usize {
    ((0.1 * n as f64).round() as usize)
        .max(2)
        .min(n.saturating_sub(1))
        .max(1)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points(points: &[Vec<f64>]) -> Result<()> {
    let Some(first) = points.first() else {
        return Err(invalid!("clustering needs at least one point"));
    };
    if points.iter().any(|p| p.len() != first.len()) {
        return Err(invalid!("points have inconsistent dimensions"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("clustering input".into()));
    }
    Ok(())
}

/// `ρ_i = exp(−(1/k)·Σ_{n ∈ kNN(i)} ‖x_i − x_n‖²)`.
pub fn knn_density(points: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
    check_points(points)?;
    let n = points.len();
    if k == 0 || k >= n {
        return Err(invalid!("k = {k} must satisfy 1 <= k < N = {n}"));
    }
    let mut dists = Vec::with_capacity(n - 1);
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            dists.clear();
            dists.extend(
                points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, q)| sq_dist(p, q)),
            );
            dists.select_nth_unstable_by(k - 1, f64::total_cmp);
            let mean = dists[..k].iter().sum::<f64>() / k as f64;
            (-mean).exp()
        })
        .collect())
}

/// `true` when `j` ranks above `i` in density order (ties: lower index wins).
fn denser(densities: &[f64], j: usize, i: usize) -> bool {
    densities[j] > densities[i] || (densities[j] == densities[i] && j < i)
}

/// Distance to the nearest denser point; the top point gets the largest
/// pairwise distance.
pub fn relative_distance(points: &[Vec<f64>], densities: &[f64]) -> Result<Vec<f64>> {
    check_points(points)?;
    if densities.len() != points.len() {
        return Err(invalid!(
            "{} densities for {} points",
            densities.len(),
            points.len()
        ));
    }
    let n = points.len();
    let mut max_pair: f64 = 0.0;
    let mut delta = vec![f64::INFINITY; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = sq_dist(&points[i], &points[j]).sqrt();
            max_pair = max_pair.max(d);
            if denser(densities, j, i) && d < delta[i] {
                delta[i] = d;
            }
        }
    }
    for d in &mut delta {
        if d.is_infinite() {
            *d = max_pair;
        }
    }
    Ok(delta)
}

/// Clusters `points` into `center_count(N, ratio)` groups.
///
/// `k` defaults to [`default_k`]. When `weights` is given, each cluster's
/// aggregated vector is the softmax(weights)-weighted mean over its members;
/// otherwise it is the plain mean.
pub fn cluster(
    points: &[Vec<f64>],
    ratio: f64,
    k: Option<usize>,
    weights: Option<&[f64]>,
) -> Result<ClusterResult> {
    check_points(points)?;
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(invalid!("compression ratio {ratio} must lie in (0, 1]"));
    }
    let n = points.len();
    if let Some(w) = weights {
        if w.len() != n {
            return Err(invalid!("{} weights for {n} points", w.len()));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cluster weights".into()));
        }
    }
    let m = center_count(n, ratio);
    let mut centers: Vec<usize> = if m == n {
        (0..n).collect()
    } else {
        let k = k.unwrap_or_else(|| default_k(n));
        let density = knn_density(points, k)?;
        let delta = relative_distance(points, &density)?;
        let gamma: Vec<f64> = density.iter().zip(&delta).map(|(r, d)| r * d).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| gamma[b].total_cmp(&gamma[a]).then(a.cmp(&b)));
        order.truncate(m);
        order
    };
    centers.sort_unstable();

    let mut assignment = vec![0; n];
    for (t, p) in points.iter().enumerate() {
        assignment[t] = if centers.binary_search(&t).is_ok() {
            t
        } else {
            // Centers are ascending, so strict `<` keeps the lower index on ties.
            let mut best = centers[0];
            let mut best_d = f64::INFINITY;
            for &c in &centers {
                let d = sq_dist(p, &points[c]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        };
    }

    let mut groups: Vec<(usize, Vec<usize>)> = centers
        .iter()
        .map(|&c| (c, (0..n).filter(|&t| assignment[t] == c).collect()))
        .collect();
    groups.sort_by_key(|(_, members)| members[0]);

    let aggregated = groups
        .iter()
        .map(|(_, members)| {
            let coef = match weights {
                Some(w) => kernels::softmax(&members.iter().map(|&t| w[t]).collect::<Vec<_>>()),
                None => vec![1.0 / members.len() as f64; members.len()],
            };
            let mut acc = vec![0.0; points[0].len()];
            for (&t, c) in members.iter().zip(&coef) {
                acc.iter_mut()
                    .zip(&points[t])
                    .for_each(|(a, v)| *a += c * v);
            }
            acc
        })
        .collect();

    Ok(ClusterResult {
        centers: groups.iter().map(|(c, _)| *c).collect(),
        assignment,
        provenance: groups.into_iter().map(|(_, m)| m).collect(),
        aggregated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_blobs() -> Vec<Vec<f64>> {
        vec![
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![0.0, 0.1],
            vec![0.1, 0.1],
            vec![5.0, 5.0],
            vec![5.1, 5.0],
            vec![5.0, 5.1],
            vec![5.12, 5.1],
        ]
    }

    #[test]
    fn identical_points() {
        let pts = vec![vec![1.0, 2.0]; 4];
        assert_eq!(knn_density(&pts, 2).unwrap(), vec![1.0; 4]);
        let r = cluster(&pts, 0.25, None, None).unwrap();
        assert_eq!(r.centers, vec![0]);
        assert_eq!(r.assignment, vec![0; 4]);
        assert_eq!(r.provenance, vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn outlier_has_lowest_density() {
        let mut pts = two_blobs();
        pts.push(vec![-3.0, 9.0]);
        let d = knn_density(&pts, 2).unwrap();
        let min = (0..pts.len())
            .min_by(|&a, &b| d[a].total_cmp(&d[b]))
            .unwrap();
        assert_eq!(min, 8);
    }

    #[test]
    fn tie_break_on_two_points() {
        let pts = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        let d = knn_density(&pts, 1).unwrap();
        assert_eq!(relative_distance(&pts, &d).unwrap(), vec![5.0, 5.0]);
    }

    #[test]
    fn two_blobs_recovered() {
        let pts = two_blobs();
        let r = cluster(&pts, 0.25, None, None).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.provenance, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
        assert!(r.centers[0] < 4 && r.centers[1] >= 4);
    }

    #[test]
    fn ratio_one_is_identity() {
        let pts = two_blobs();
        let r = cluster(&pts, 1.0, None, None).unwrap();
        assert_eq!(r.centers, (0..8).collect::<Vec<_>>());
        assert_eq!(r.assignment, (0..8).collect::<Vec<_>>());
        assert_eq!(r.aggregated, pts);
    }

    #[test]
    fn errors() {
        assert!(knn_density(&two_blobs(), 8).is_err());
        assert!(knn_density(&two_blobs(), 0).is_err());
        assert!(cluster(&[vec![f64::NAN]], 0.5, None, None).is_err());
        assert!(cluster(&two_blobs(), 0.0, None, None).is_err());
        assert!(cluster(&[], 0.5, None, None).is_err());
    }

    #[test]
    fn weighted_aggregation() {
        let pts = vec![vec![0.0], vec![1.0]];
        let r = cluster(&pts, 0.5, None, Some(&[0.0, 2f64.ln()])).unwrap();
        assert!((r.aggregated[0][0] - 2.0 / 3.0).abs() < 1e-15);
    }
}
