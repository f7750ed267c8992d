//! Nearest-code vector quantization with a straight-through gradient.

use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::numerics::{Parameter, Rng, Tape, Tensor, Var};

pub const DEFAULT_BETA: f64 = 0.25;

/// K×dim table of codes.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub table: Parameter,
}

impl Codebook {
    pub fn new(table: Tensor) -> Result<Self> {
        validate_table(&table)?;
        Ok(Self {
            table: Parameter::new("codebook", table),
        })
    }

    pub fn size(&self) -> usize {
        self.table.value.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.value.cols()
    }
}

pub(crate) fn validate_table(table: &Tensor) -> Result<()> {
    if !table.is_matrix() || table.rows() < 2 || table.cols() < 1 {
        return Err(Error::invalid(format!(
            "codebook must be K×dim with K ≥ 2, dim ≥ 1; got {:?}",
            table.shape()
        )));
    }
    if !table.is_finite() {
        return Err(Error::NonFinite { op: "codebook".into() });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub indices: Vec<usize>,
    pub z_dis: Tensor,
    pub quant_loss: f64,
}

/// Index of the nearest code per row; ties go to the lowest index.
pub fn nearest_codes(z_con: &Tensor, table: &Tensor) -> Result<Vec<usize>> {
    if !z_con.is_matrix() || z_con.cols() != table.cols() {
        return Err(Error::shape(
            "quantize",
            format!("inputs {:?} vs codebook {:?}", z_con.shape(), table.shape()),
        ));
    }
    if z_con.rows() == 0 {
        return Err(Error::invalid("quantize called with no input rows"));
    }
    Ok((0..z_con.rows())
        .map(|i| {
            let zi = z_con.row(i);
            let mut best = (f64::INFINITY, 0);
            for k in 0..table.rows() {
                let d: f64 = zi
                    .iter()
                    .zip(table.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1
        })
        .collect())
}

/// Forward-only quantization with the two-term loss at `beta`.
pub fn quantize(z_con: &Tensor, codebook: &Codebook, beta: f64) -> Result<QuantizeResult> {
    let indices = nearest_codes(z_con, &codebook.table.value)?;
    let z_dis = crate::numerics::gather_rows(&codebook.table.value, &indices)?;
    let quant_loss = quant_loss(z_con, &z_dis, beta)?;
    Ok(QuantizeResult {
        indices,
        z_dis,
        quant_loss,
    })
}

/// Value of `mean_i ‖z_con_i − e_i‖² + beta · mean_i ‖z_con_i − e_i‖²`.
///
/// The two terms differ only in where gradients stop, so forward they add up
/// to `(1 + beta)` times the mean squared distance.
pub fn quant_loss(z_con: &Tensor, z_dis: &Tensor, beta: f64) -> Result<f64> {
    if z_con.shape() != z_dis.shape() || !z_con.is_matrix() {
        return Err(Error::shape(
            "quant_loss",
            format!("{:?} vs {:?}", z_con.shape(), z_dis.shape()),
        ));
    }
    let n = z_con.rows().max(1) as f64;
    let sq: f64 = z_con
        .data()
        .iter()
        .zip(z_dis.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / n + beta * sq / n)
}

/// Histogram of code indices.
pub fn codebook_usage(indices: &[usize], size: usize) -> Result<Vec<usize>> {
    let mut hist = vec![0; size];
    for &i in indices {
        *hist
            .get_mut(i)
            .ok_or_else(|| Error::invalid(format!("code index {i} out of range {size}")))? += 1;
    }
    Ok(hist)
}

/// How the quantization loss routes gradients between encoder and codebook.
pub trait QuantObjective: Send + Sync {
    fn name(&self) -> &'static str;

    /// Loss on the tape. `codes` are the gathered rows `E[indices]`.
    fn loss(&self, tape: &Tape, z_con: Var, codes: Var) -> Result<Var>;
}

/// `‖sg(z_con) − e‖² + beta · ‖z_con − sg(e)‖²`, averaged over rows.
#[derive(Debug, Clone, Copy)]
pub struct StopGradientPair {
    pub beta: f64,
}

/// `‖z_con − e‖²` averaged over rows, gradients to both sides.
#[derive(Debug, Clone, Copy)]
pub struct LiteralSquaredError;

fn mean_row_sqdist(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.shape(a)[0].max(1) as f64;
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / n)
}

impl QuantObjective for StopGradientPair {
    fn name(&self) -> &'static str {
        "stop-gradient"
    }

    fn loss(&self, tape: &Tape, z_con: Var, codes: Var) -> Result<Var> {
        let z_sg = tape.detach(z_con)?;
        let codebook_term = mean_row_sqdist(tape, z_sg, codes)?;
        let codes_sg = tape.detach(codes)?;
        let commitment = mean_row_sqdist(tape, z_con, codes_sg)?;
        let commitment = tape.scale(commitment, self.beta)?;
        tape.add(codebook_term, commitment)
    }
}

impl QuantObjective for LiteralSquaredError {
    fn name(&self) -> &'static str {
        "literal"
    }

    fn loss(&self, tape: &Tape, z_con: Var, codes: Var) -> Result<Var> {
        mean_row_sqdist(tape, z_con, codes)
    }
}

pub struct TapeQuantized {
    pub indices: Vec<usize>,
    pub z_dis: Var,
    pub loss: Var,
}

/// Quantizes on the tape: `z_dis` carries the exact code values forward and
/// passes its gradient straight to `z_con`; the codebook is reached only
/// through the objective.
pub fn quantize_on_tape(
    tape: &Tape,
    z_con: Var,
    codebook: Var,
    objective: &dyn QuantObjective,
) -> Result<TapeQuantized> {
    let picked = tape.frozen(|| {
        let idx = tape.with_values(&[z_con, codebook], |v| nearest_codes(v[0], v[1]))?;
        Tensor::new(&[idx.len()], idx.iter().map(|&i| i as f64).collect())
    })?;
    let indices: Vec<usize> = picked.data().iter().map(|&i| i as usize).collect();
    let codes = tape.gather_rows(codebook, &indices)?;
    let code_values = tape.value(codes).clone();
    let z_dis = tape.straight_through(z_con, &code_values)?;
    let loss = objective.loss(tape, z_con, codes)?;
    Ok(TapeQuantized {
        indices,
        z_dis,
        loss,
    })
}

/// Uniform entries in `[−1/K, 1/K]`.
pub fn init_uniform(size: usize, dim: usize, rng: &mut Rng) -> Tensor {
    let r = 1.0 / size as f64;
    rng.uniform_tensor(&[size, dim], -r, r)
}

/// Codes placed on k-means centroids of a warm-up batch. When the batch has
/// fewer distinct rows than codes, the surplus codes are jittered copies.
pub fn init_kmeans(size: usize, warmup: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    if warmup.rows() == 0 {
        return Err(Error::invalid("k-means codebook init needs a non-empty warm-up batch"));
    }
    let k = size.min(warmup.rows());
    let centroids = kmeans(warmup, k, 25, rng)?;
    let dim = warmup.cols();
    let mut data = centroids.into_data();
    let scale = (warmup.data().iter().map(|v| v * v).sum::<f64>() / warmup.numel() as f64).sqrt();
    for extra in k..size {
        let src = extra % k;
        for c in 0..dim {
            let v = data[src * dim + c] + 1e-2 * scale * rng.normal();
            data.push(v);
        }
    }
    Tensor::new(&[size, dim], data)
}
