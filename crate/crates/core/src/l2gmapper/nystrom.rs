use crate::error::{Error, Result};
use crate::numerics::{pairwise_sqdist, Parameter, Rng, Tape, Tensor, Var};

/// Eigenvalue floor for the Gram inverse square root.
pub const GRAM_EIGEN_FLOOR: f64 = 1e-6;

/// Finite-dimensional kernel embedding `ψ(z) = κ(z, w) κ(w, w)^(−1/2)` over
/// a set of anchors `w`, with the Gaussian kernel
/// `κ(x, y) = exp(−‖x − y‖² / (2σ²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct NystromEmbedding {
    pub anchors: Parameter,
    pub bandwidth: Parameter,
    pub eigen_floor: f64,
}

impl NystromEmbedding {
    pub fn new(anchors: Tensor, bandwidth: f64) -> Result<Self> {
        if !anchors.is_matrix() || anchors.rows() == 0 {
            return Err(Error::invalid(format!("anchors must be kₐ×dim, got {:?}", anchors.shape())));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::invalid(format!("kernel bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self {
            anchors: Parameter::new("anchors", anchors),
            bandwidth: Parameter::new("bandwidth", Tensor::scalar(bandwidth)),
            eigen_floor: GRAM_EIGEN_FLOOR,
        })
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors.value.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.anchors.value.cols()
    }

    /// Forward-only embedding of the rows of `z`.
    pub fn embed(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let zv = tape.constant(z.clone());
        let w = tape.constant(self.anchors.value.clone());
        let s = tape.constant(self.bandwidth.value.clone());
        let psi = nystrom_on_tape(&tape, zv, w, s, self.eigen_floor)?;
        let out = tape.value(psi).clone();
        Ok(out)
    }
}

/// `ψ(z)` on the tape; differentiable in `z`, the anchors and the bandwidth.
pub fn nystrom_on_tape(tape: &Tape, z: Var, anchors: Var, bandwidth: Var, floor: f64) -> Result<Var> {
    let (zs, ws) = (tape.shape(z), tape.shape(anchors));
    if zs.len() != 2 || ws.len() != 2 || zs[1] != ws[1] {
        return Err(Error::shape("nystrom_embed", format!("inputs {zs:?} vs anchors {ws:?}")));
    }
    let k_zw = tape.gaussian_kernel(z, anchors, bandwidth)?;
    let k_ww = tape.gaussian_kernel(anchors, anchors, bandwidth)?;
    let inv_sqrt = tape.sym_inv_sqrt(k_ww, floor)?;
    tape.matmul(k_zw, inv_sqrt)
}

/// Median pairwise Euclidean distance between distinct rows; falls back to 1
/// when every row coincides.
pub fn median_heuristic(z: &Tensor) -> Result<f64> {
    let d = pairwise_sqdist(z, z)?;
    let n = z.rows();
    let mut dists: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| d.get(i, j).sqrt())
        .filter(|&v| v > 0.0)
        .collect();
    if dists.is_empty() {
        return Ok(1.0);
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let m = dists.len();
    Ok(if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    })
}

/// Picks `count` distinct rows of `codes` at random as anchors. If there are
/// fewer distinct rows, the remainder are jittered copies.
pub fn init_anchors(codes: &Tensor, count: usize, rng: &mut Rng) -> Result<Tensor> {
    if codes.rows() == 0 {
        return Err(Error::invalid("anchor init needs a non-empty batch"));
    }
    let mut distinct: Vec<usize> = Vec::new();
    for i in 0..codes.rows() {
        if !distinct.iter().any(|&j| codes.row(j) == codes.row(i)) {
            distinct.push(i);
        }
    }
    rng.shuffle(&mut distinct);
    let dim = codes.cols();
    let scale = (codes.data().iter().map(|v| v * v).sum::<f64>() / codes.numel() as f64)
        .sqrt()
        .max(1e-3);
    let mut data = Vec::with_capacity(count * dim);
    for a in 0..count {
        let src = codes.row(distinct[a % distinct.len()]);
        if a < distinct.len() {
            data.extend_from_slice(src);
        } else {
            data.extend(src.iter().map(|v| v + 0.1 * scale * rng.normal()));
        }
    }
    Tensor::new(&[count, dim], data)
}
