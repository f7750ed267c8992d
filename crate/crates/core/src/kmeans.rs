//! Lloyd's k-means with k-means++ seeding, used for warm-start initializers.

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Returns `k` centroids (k×d) of the rows of `data`, sorted lexicographically.
pub fn kmeans(data: &Tensor, k: usize, iterations: usize, rng: &mut Rng) -> Result<Tensor> {
    let (n, d) = (data.rows(), data.cols());
    if n == 0 {
        return Err(Error::invalid("k-means on an empty batch"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k-means with k = {k} on {n} points")));
    }

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = vec![data.row(rng.index(n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sqdist(data.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // rounding can land on a zero-weight tail; step back to a positive one
            if nearest[chosen] == 0.0 {
                chosen = nearest.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.index(n)
        };
        let c = data.row(pick).to_vec();
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(sqdist(data.row(i), &c));
        }
        centroids.push(c);
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best = (0..k)
                .min_by(|&x, &y| {
                    sqdist(data.row(i), &centroids[x])
                        .partial_cmp(&sqdist(data.row(i), &centroids[y]))
                        .expect("finite")
                })
                .expect("k > 0");
            if best != *a {
                *a = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    centroids.sort_by(|a, b| a.partial_cmp(b).expect("finite centroids"));
    Tensor::new(&[k, d], centroids.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exactly_k_distinct_points_are_recovered() {
        let pts = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![-1.0, -1.0],
            vec![0.0, 1.0],
        ]);
        let c = kmeans(&pts, 3, 20, &mut Rng::seeded(4)).unwrap();
        let want = Tensor::from_rows(&[vec![-1.0, -1.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(c, want);
    }

    #[test]
    fn rejects_empty_and_oversized() {
        assert!(kmeans(&Tensor::zeros(&[0, 2]), 1, 5, &mut Rng::seeded(0)).is_err());
        assert!(kmeans(&Tensor::zeros(&[2, 2]), 3, 5, &mut Rng::seeded(0)).is_err());
    }
}
