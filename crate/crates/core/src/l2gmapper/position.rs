use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `S_ij = exp(−(i/n − j/t)² / σ²)` with 1-based `i ∈ [1, n]`, `j ∈ [1, t]`.
///
/// An infinite `sigma` disables positional weighting (all ones).
pub fn position_weights(n: usize, t: usize, sigma: f64) -> Result<Tensor> {
    if n == 0 || t == 0 {
        return Err(Error::invalid(format!("position weights need n, t ≥ 1 (got {n}, {t})")));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("positional bandwidth must be positive, got {sigma}")));
    }
    let inv = 1.0 / (sigma * sigma);
    let mut data = Vec::with_capacity(n * t);
    for i in 1..=n {
        for j in 1..=t {
            let d = i as f64 / n as f64 - j as f64 / t as f64;
            data.push((-inv * d * d).exp());
        }
    }
    Tensor::new(&[n, t], data)
}
