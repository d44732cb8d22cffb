//! Grouping variates by simple series statistics with k-means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;

pub const MAX_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster id (0-based) of each variate.
    pub assignment: Vec<usize>,
    /// `[G x 3]` centroids in the standardized feature space.
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
}

/// `[mean, std, lag-1 autocorrelation]` of one series. A flat series has
/// zero autocorrelation.
pub fn series_features(x: &[f64]) -> [f64; 3] {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let acf = if var > 0.0 {
        x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (n * var)
    } else {
        0.0
    };
    [mean, var.sqrt(), acf]
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Cluster the columns of a `[T x N]` training series into `g` groups.
pub fn cluster_variates(series: &Tensor, g: usize, seed: u64) -> Result<ClusterAssignment> {
    let (t, n) = (series.rows(), series.cols());
    if t < 3 {
        return Err(Error::Data(format!("clustering needs at least 3 time steps, got {t}")));
    }
    if g == 0 || g > n {
        return Err(Error::Config(format!("cluster count {g} outside 1..={n}")));
    }
    let mut feats: Vec<Vec<f64>> = (0..n)
        .map(|v| {
            let col: Vec<f64> = (0..t).map(|i| series.get(i, v)).collect();
            series_features(&col).to_vec()
        })
        .collect();
    for f in 0..3 {
        let m = feats.iter().map(|x| x[f]).sum::<f64>() / n as f64;
        let sd = (feats.iter().map(|x| (x[f] - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        for x in &mut feats {
            x[f] = if sd > 1e-12 { (x[f] - m) / sd } else { 0.0 };
        }
    }
    let degenerate = feats.iter().all(|x| x.iter().all(|&v| v == 0.0));
    if g == 1 || degenerate {
        let centroid = vec![0.0; 3];
        return Ok(ClusterAssignment {
            assignment: vec![0; n],
            centroids: vec![centroid; g.max(1)],
            iterations: 0,
        });
    }
    Ok(kmeans(&feats, g, seed))
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters take the point
/// farthest from its centroid among clusters with more than one member.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> ClusterAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, di) in d.iter().enumerate() {
                if r < *di {
                    pick = i;
                    break;
                }
                r -= di;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
    }

    let nearest = |p: &[f64], cs: &[Vec<f64>]| {
        let mut best = 0;
        for c in 1..cs.len() {
            if dist2(p, &cs[c]) < dist2(p, &cs[best]) {
                best = c;
            }
        }
        best
    };
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut iterations = 0;
    for it in 1..=MAX_ITERS {
        iterations = it;
        repair_empty(points, &mut assignment, &centroids, k);
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assignment).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            for f in 0..centroid.len() {
                centroid[f] = members.iter().map(|p| p[f]).sum::<f64>() / members.len() as f64;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    repair_empty(points, &mut assignment, &centroids, k);
    ClusterAssignment {
        assignment,
        centroids,
        iterations,
    }
}

fn repair_empty(points: &[Vec<f64>], assignment: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let donor = (0..points.len())
            .filter(|&i| sizes[assignment[i]] > 1)
            .max_by(|&a, &b| {
                let da = dist2(&points[a], &centroids[assignment[a]]);
                let db = dist2(&points[b], &centroids[assignment[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("k <= n leaves a cluster with spare members");
        assignment[donor] = empty;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster() {
        let x = Tensor::matrix(4, 2, vec![1.0, 2.0, 3.0, 1.0, 0.0, 5.0, 2.0, 2.0]);
        assert_eq!(cluster_variates(&x, 1, 0).unwrap().assignment, vec![0, 0]);
    }

    #[test]
    fn constants_group_apart_from_sine() {
        let t = 200;
        let mut d = Vec::new();
        for i in 0..t {
            d.extend([0.0, 0.0, (2.5 * i as f64).sin()]);
        }
        let a = cluster_variates(&Tensor::matrix(t, 3, d), 2, 7).unwrap().assignment;
        assert_eq!(a[0], a[1]);
        assert_ne!(a[0], a[2]);
    }

    #[test]
    fn one_cluster_per_variate() {
        let t = 50;
        let mut d = Vec::new();
        for i in 0..t {
            let x = i as f64;
            d.extend([x, (0.3 * x).sin(), 5.0 + (1.7 * x).cos() * 3.0]);
        }
        let mut a = cluster_variates(&Tensor::matrix(t, 3, d), 3, 1).unwrap().assignment;
        a.sort();
        assert_eq!(a, vec![0, 1, 2]);
    }

    #[test]
    fn flat_series_collapse_to_first_cluster() {
        let x = Tensor::matrix(5, 3, vec![2.0; 15]);
        assert_eq!(cluster_variates(&x, 2, 0).unwrap().assignment, vec![0, 0, 0]);
    }
}
