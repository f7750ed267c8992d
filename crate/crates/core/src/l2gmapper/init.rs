use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::numerics::{Rng, Tensor};

/// Produces the initial `q` references, each t×kₐ.
pub trait ReferenceInit: Send + Sync {
    fn name(&self) -> &'static str;

    /// `warmup` holds embedded codes ψ(z) (rows of length kₐ), when available.
    fn init(
        &self,
        rng: &mut Rng,
        t: usize,
        k_a: usize,
        q: usize,
        warmup: Option<&Tensor>,
    ) -> Result<Vec<Tensor>>;
}

/// Gaussian rows normalized to unit length.
#[derive(Debug, Default, Clone, Copy)]
pub struct RandomUnit;

/// k-means centroids of the warm-up embeddings, one independent k-means
/// seed per reference.
#[derive(Debug, Default, Clone, Copy)]
pub struct KMeansWarmStart;

impl ReferenceInit for RandomUnit {
    fn name(&self) -> &'static str {
        "random-unit"
    }

    fn init(&self, rng: &mut Rng, t: usize, k_a: usize, q: usize, _: Option<&Tensor>) -> Result<Vec<Tensor>> {
        Ok((0..q).map(|_| self.init_one(rng, t, k_a)).collect())
    }
}

impl RandomUnit {
    pub fn init_one(&self, rng: &mut Rng, t: usize, k_a: usize) -> Tensor {
        let mut r = rng.normal_tensor(&[t, k_a], 1.0);
        for row in r.data_mut().chunks_mut(k_a) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                row[0] = 1.0;
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        r
    }
}

impl ReferenceInit for KMeansWarmStart {
    fn name(&self) -> &'static str {
        "kmeans-warmstart"
    }

    fn init(&self, rng: &mut Rng, t: usize, k_a: usize, q: usize, warmup: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let batch = warmup
            .filter(|b| b.rows() > 0)
            .ok_or_else(|| Error::invalid("kmeans-warmstart needs a non-empty warm-up batch"))?;
        if batch.cols() != k_a {
            return Err(Error::shape(
                "kmeans-warmstart",
                format!("warm-up rows have length {}, expected {k_a}", batch.cols()),
            ));
        }
        if batch.rows() < t {
            return Err(Error::invalid(format!(
                "kmeans-warmstart needs at least t = {t} warm-up rows, got {}",
                batch.rows()
            )));
        }
        (0..q)
            .map(|r| {
                let mut local = rng.fork(r as u64);
                kmeans(batch, t, 50, &mut local)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_unit_rows_have_unit_norm() {
        let refs = RandomUnit.init(&mut Rng::seeded(3), 4, 6, 2, None).unwrap();
        assert_eq!(refs.len(), 2);
        for r in &refs {
            for row in r.data().chunks(6) {
                let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_references() {
        let a = RandomUnit.init(&mut Rng::seeded(8), 3, 5, 2, None).unwrap();
        let b = RandomUnit.init(&mut Rng::seeded(8), 3, 5, 2, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn warmstart_recovers_distinct_points() {
        let batch = Tensor::from_rows(&[
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.5, 0.5],
            vec![1.0, 0.0],
        ]);
        let refs = KMeansWarmStart
            .init(&mut Rng::seeded(1), 3, 2, 2, Some(&batch))
            .unwrap();
        let want = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.5], vec![1.0, 0.0]]);
        for r in refs {
            assert_eq!(r, want);
        }
    }

    #[test]
    fn warmstart_needs_a_batch() {
        assert!(KMeansWarmStart.init(&mut Rng::seeded(1), 2, 2, 1, None).is_err());
        let empty = Tensor::zeros(&[0, 2]);
        assert!(KMeansWarmStart.init(&mut Rng::seeded(1), 2, 2, 1, Some(&empty)).is_err());
    }
}
