//! Wall-time and marginal-residual measurements for the mapper.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::l2gmapper::{
    embed_multi_ref, init_anchors, median_heuristic, transport_plans, MapperSettings, NystromEmbedding,
    RandomUnit, ReferenceSet,
};
use crate::numerics::{Rng, Tensor};
use crate::sinkhorn::marginal_residual;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Code counts n.
    pub sizes: Vec<usize>,
    /// Bin counts t.
    pub bins: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub iterations: Vec<usize>,
    pub anchors: usize,
    pub code_dim: usize,
    pub references: usize,
    /// Timed repetitions; the median is reported.
    pub repeats: usize,
    /// Each repetition loops until at least this long.
    pub min_seconds: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![256, 512, 1024, 2048, 4096],
            bins: vec![8],
            epsilons: vec![0.1],
            iterations: vec![10],
            anchors: 16,
            code_dim: 16,
            references: 2,
            repeats: 5,
            min_seconds: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub t: usize,
    pub epsilon: f64,
    pub iterations: usize,
    /// Median seconds per full mapper call.
    pub seconds: f64,
    /// Largest marginal residual over the references.
    pub marginal_residual: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite timing"));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn time_call(repeats: usize, min_seconds: f64, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let mut calls = 0usize;
        loop {
            f()?;
            calls += 1;
            let el = start.elapsed().as_secs_f64();
            if el >= min_seconds {
                samples.push(el / calls as f64);
                break;
            }
        }
    }
    Ok(median(samples))
}

/// One row per (n, t, ε, iterations), in that nesting order.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.sizes.iter().chain(&cfg.bins).chain(&cfg.iterations).any(|&v| v == 0) {
        return Err(Error::invalid("sizes, bins and iterations must be positive"));
    }
    if cfg.anchors == 0 || cfg.code_dim == 0 || cfg.references == 0 {
        return Err(Error::invalid("anchors, code_dim and references must be positive"));
    }
    let mut rng = Rng::seeded(cfg.seed);
    let mut rows = Vec::new();
    for &n in &cfg.sizes {
        let z = rng.normal_tensor(&[n, cfg.code_dim], 1.0);
        let k_a = cfg.anchors.min(n);
        let anchors = init_anchors(&z, k_a, &mut rng)?;
        let head = Tensor::new(&[n.min(256), cfg.code_dim], z.data()[..n.min(256) * cfg.code_dim].to_vec())?;
        let bandwidth = median_heuristic(&head)?.max(1e-3);
        let emb = NystromEmbedding::new(anchors, bandwidth)?;
        for &t in &cfg.bins {
            let refs: Vec<Tensor> = (0..cfg.references).map(|_| RandomUnit.init_one(&mut rng, t, k_a)).collect();
            for &epsilon in &cfg.epsilons {
                for &iterations in &cfg.iterations {
                    let settings = MapperSettings {
                        epsilon,
                        iterations,
                        ..MapperSettings::default()
                    };
                    let set = ReferenceSet::new(refs.clone(), settings)?;
                    let seconds = time_call(cfg.repeats, cfg.min_seconds, || embed_multi_ref(&z, &set, &emb).map(drop))?;
                    let (a, b) = (vec![1.0 / n as f64; n], vec![1.0 / t as f64; t]);
                    let marginal_residual = transport_plans(&z, &set, &emb)?
                        .iter()
                        .map(|p| marginal_residual(p, &a, &b))
                        .fold(0.0, f64::max);
                    rows.push(BenchRow {
                        n,
                        t,
                        epsilon,
                        iterations,
                        seconds,
                        marginal_residual,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::invalid("slope fit needs at least two positive points"));
    }
    let m = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("slope fit needs distinct x values"));
    }
    Ok(sxy / sxx)
}

/// Time-versus-n slope for each (t, ε, iterations) group with at least two sizes.
pub fn scaling_slopes(rows: &[BenchRow]) -> Result<Vec<(usize, f64, usize, f64)>> {
    let mut keys: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows {
        let k = (r.t, r.epsilon, r.iterations);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = Vec::new();
    for (t, eps, it) in keys {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| (r.t, r.epsilon, r.iterations) == (t, eps, it))
            .map(|r| (r.n as f64, r.seconds))
            .collect();
        if pts.len() >= 2 {
            out.push((t, eps, it, log_log_slope(&pts)?));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law_is_exponent() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.5))).collect();
        assert!((log_log_slope(&pts).unwrap() - 1.5).abs() < 1e-12);
        assert!(log_log_slope(&pts[..1]).is_err());
    }

    #[test]
    fn single_code_single_bin_has_zero_residual() {
        let cfg = BenchConfig {
            sizes: vec![1],
            bins: vec![1],
            anchors: 1,
            repeats: 1,
            min_seconds: 0.0,
            ..BenchConfig::default()
        };
        let rows = run_bench(&cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].marginal_residual, 0.0);
    }

    #[test]
    fn more_iterations_shrink_the_residual() {
        let cfg = BenchConfig {
            sizes: vec![64],
            iterations: vec![1, 3, 10, 50, 200],
            repeats: 1,
            min_seconds: 0.0,
            ..BenchConfig::default()
        };
        let rows = run_bench(&cfg).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].marginal_residual <= w[0].marginal_residual, "{rows:?}");
        }
        assert!(rows.last().unwrap().marginal_residual < 1e-6);
    }
}
