//! Differentiable tensor operations with analytic backward rules.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm_nn, gemm_nt, gemm_tn};
use crate::numerics::{pairwise_sqdist, Tape, Tensor, Var};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with_values(&[a, b], |v| {
            same_shape("add", v[0], v[1])?;
            Ok::<_, Error>(v[0].zip_map(v[1], |x, y| x + y))
        })?;
        self.push_op(
            "add",
            &[a, b],
            value,
            Some(Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with_values(&[a, b], |v| {
            same_shape("sub", v[0], v[1])?;
            Ok::<_, Error>(v[0].zip_map(v[1], |x, y| x - y))
        })?;
        self.push_op(
            "sub",
            &[a, b],
            value,
            Some(Box::new(|g, _, _| vec![Some(g.clone()), Some(g.scale(-1.0))])),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with_values(&[a, b], |v| {
            same_shape("mul", v[0], v[1])?;
            Ok::<_, Error>(v[0].zip_map(v[1], |x, y| x * y))
        })?;
        self.push_op(
            "mul",
            &[a, b],
            value,
            Some(Box::new(|g, x, _| {
                vec![
                    Some(g.zip_map(x[1], |g, y| g * y)),
                    Some(g.zip_map(x[0], |g, y| g * y)),
                ]
            })),
        )
    }

    /// Elementwise product with a fixed tensor.
    pub fn mul_const(&self, a: Var, c: &Tensor) -> Result<Var> {
        let value = self.with_values(&[a], |v| {
            same_shape("mul_const", v[0], c)?;
            Ok::<_, Error>(v[0].zip_map(c, |x, y| x * y))
        })?;
        let c = c.clone();
        self.push_op(
            "mul_const",
            &[a],
            value,
            Some(Box::new(move |g, _, _| {
                vec![Some(g.zip_map(&c, |g, y| g * y))]
            })),
        )
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        let value = self.with_values(&[a], |v| v[0].scale(s));
        self.push_op(
            "scale",
            &[a],
            value,
            Some(Box::new(move |g, _, _| vec![Some(g.scale(s))])),
        )
    }

    /// The gate pattern is a frozen value, so replays stay on the recorded
    /// linear piece.
    pub fn relu(&self, a: Var) -> Result<Var> {
        let gate = self.frozen(|| Ok(self.with_values(&[a], |v| v[0].map(|x| if x > 0.0 { 1.0 } else { 0.0 }))))?;
        if gate.shape() != self.shape(a).as_slice() {
            return Err(Error::invalid("relu gate does not match its replayed input"));
        }
        let value = self.with_values(&[a], |v| v[0].zip_map(&gate, |x, m| if m > 0.0 { x } else { 0.0 }));
        self.push_op(
            "relu",
            &[a],
            value,
            Some(Box::new(move |g, _, _| vec![Some(g.zip_map(&gate, |g, m| g * m))])),
        )
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let value = self.with_values(&[a], |v| v[0].map(f64::exp));
        self.push_op(
            "exp",
            &[a],
            value,
            Some(Box::new(|g, _, y| vec![Some(g.zip_map(y, |g, y| g * y))])),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let value = self.with_values(&[a], |v| v[0].map(sigmoid));
        self.push_op(
            "sigmoid",
            &[a],
            value,
            Some(Box::new(|g, _, y| {
                vec![Some(g.zip_map(y, |g, y| g * y * (1.0 - y)))]
            })),
        )
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let value = self.with_values(&[a], |v| Tensor::scalar(v[0].sum()));
        self.push_op(
            "sum",
            &[a],
            value,
            Some(Box::new(|g, x, _| vec![Some(Tensor::full(x[0].shape(), g.item()))])),
        )
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.with_values(&[a], |v| v[0].numel()) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.with_values(&[a], |v| v[0].clone().reshape(shape))?;
        self.push_op(
            "reshape",
            &[a],
            value,
            Some(Box::new(|g, x, _| {
                vec![Some(g.clone().reshape(x[0].shape()).expect("same numel"))]
            })),
        )
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = self.with_values(&[a], |v| {
            if !v[0].is_matrix() {
                return Err(Error::shape("transpose", format!("{:?}", v[0].shape())));
            }
            Ok(v[0].transpose())
        })?;
        self.push_op(
            "transpose",
            &[a],
            value,
            Some(Box::new(|g, _, _| vec![Some(g.transpose())])),
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with_values(&[a, b], |v| v[0].matmul(v[1]))?;
        self.push_op(
            "matmul",
            &[a, b],
            value,
            Some(Box::new(|g, x, _| {
                let (m, k, n) = (x[0].rows(), x[0].cols(), x[1].cols());
                let mut ga = vec![0.0; m * k];
                gemm_nt(m, n, k, g.data(), x[1].data(), &mut ga);
                let mut gb = vec![0.0; k * n];
                gemm_tn(k, m, n, x[0].data(), g.data(), &mut gb);
                vec![
                    Some(Tensor::new(&[m, k], ga).expect("shape")),
                    Some(Tensor::new(&[k, n], gb).expect("shape")),
                ]
            })),
        )
    }

    /// Adds a length-`m` bias to every row of an n×m matrix.
    pub fn add_row_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let value = self.with_values(&[a, bias], |v| {
            let (x, b) = (v[0], v[1]);
            if !x.is_matrix() || b.numel() != x.cols() {
                return Err(Error::shape(
                    "add_row_bias",
                    format!("{:?} + {:?}", x.shape(), b.shape()),
                ));
            }
            let mut out = x.clone();
            let c = x.cols();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o += b.data()[i % c];
            }
            Ok(out)
        })?;
        self.push_op(
            "add_row_bias",
            &[a, bias],
            value,
            Some(Box::new(|g, x, _| {
                let gb = Tensor::new(x[1].shape(), g.col_sums()).expect("shape");
                vec![Some(g.clone()), Some(gb)]
            })),
        )
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat0(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat0 of zero tensors"));
        }
        let value = self.with_values(parts, |v| {
            let tail = &v[0].shape()[1..];
            let mut lead = 0;
            let mut data = Vec::new();
            for t in v {
                if &t.shape()[1..] != tail {
                    return Err(Error::shape(
                        "concat0",
                        format!("{:?} vs {:?}", v[0].shape(), t.shape()),
                    ));
                }
                lead += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![lead];
            shape.extend_from_slice(tail);
            Tensor::new(&shape, data)
        })?;
        self.push_op(
            "concat0",
            parts,
            value,
            Some(Box::new(|g, x, _| {
                let mut offset = 0;
                x.iter()
                    .map(|t| {
                        let n = t.numel();
                        let part = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        Some(Tensor::new(t.shape(), part).expect("shape"))
                    })
                    .collect()
            })),
        )
    }

    /// Squared Euclidean distances between the rows of `a` and `b`.
    pub fn pairwise_sqdist(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with_values(&[a, b], |v| pairwise_sqdist(v[0], v[1]))?;
        self.push_op(
            "pairwise_sqdist",
            &[a, b],
            value,
            Some(Box::new(|g, x, _| {
                let (a, b) = (x[0], x[1]);
                let (n, m, d) = (a.rows(), b.rows(), a.cols());
                let mut ga = Tensor::zeros(a.shape());
                let mut gb = Tensor::zeros(b.shape());
                for i in 0..n {
                    for j in 0..m {
                        let w = 2.0 * g.data()[i * m + j];
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let diff = w * (a.data()[i * d + c] - b.data()[j * d + c]);
                            ga.data_mut()[i * d + c] += diff;
                            gb.data_mut()[j * d + c] -= diff;
                        }
                    }
                }
                vec![Some(ga), Some(gb)]
            })),
        )
    }

    /// `exp(-D / (2σ²))` elementwise, with `sigma` a one-element tensor.
    pub fn gaussian_from_sqdist(&self, sqdist: Var, sigma: Var) -> Result<Var> {
        let value = self.with_values(&[sqdist, sigma], |v| {
            if v[1].numel() != 1 {
                return Err(Error::shape("gaussian_from_sqdist", "sigma must be a scalar"));
            }
            let s = v[1].item();
            if s <= 0.0 {
                return Err(Error::invalid(format!("kernel bandwidth must be positive, got {s}")));
            }
            let c = 1.0 / (2.0 * s * s);
            Ok(v[0].map(|d| (-d * c).exp()))
        })?;
        self.push_op(
            "gaussian_from_sqdist",
            &[sqdist, sigma],
            value,
            Some(Box::new(|g, x, k| {
                let s = x[1].item();
                let c = 1.0 / (2.0 * s * s);
                let gd = g.zip_map(k, |g, k| -g * k * c);
                // dK/dσ = K · D / σ³
                let gs: f64 = g
                    .data()
                    .iter()
                    .zip(k.data())
                    .zip(x[0].data())
                    .map(|((g, k), d)| g * k * d)
                    .sum::<f64>()
                    / (s * s * s);
                vec![Some(gd), Some(Tensor::new(x[1].shape(), vec![gs]).expect("shape"))]
            })),
        )
    }

    /// Gaussian kernel matrix `κ(x_i, w_j) = exp(-‖x_i − w_j‖² / (2σ²))`.
    pub fn gaussian_kernel(&self, x: Var, w: Var, sigma: Var) -> Result<Var> {
        let d = self.pairwise_sqdist(x, w)?;
        self.gaussian_from_sqdist(d, sigma)
    }

    /// `S^(-1/2)` of the symmetric part `S = (A + Aᵀ)/2`, eigenvalues floored at `floor`.
    pub fn sym_inv_sqrt(&self, a: Var, floor: f64) -> Result<Var> {
        let (value, eig) = self.with_values(&[a], |v| sym_inv_sqrt_forward(v[0], floor))?;
        self.push_op(
            "sym_inv_sqrt",
            &[a],
            value,
            Some(Box::new(move |g, _, _| {
                vec![Some(sym_inv_sqrt_backward(&eig, floor, g))]
            })),
        )
    }

    /// Value copy that blocks gradients. Frozen, so finite-difference
    /// probes see the recorded value.
    pub fn detach(&self, a: Var) -> Result<Var> {
        let v = self.frozen(|| Ok(self.value(a).clone()))?;
        Ok(self.constant(v))
    }

    /// Selects rows `indices` of a 2-D tensor.
    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Result<Var> {
        let value = self.with_values(&[table], |v| gather_rows(v[0], indices))?;
        let idx = indices.to_vec();
        self.push_op(
            "gather_rows",
            &[table],
            value,
            Some(Box::new(move |g, x, _| {
                let c = x[0].cols();
                let mut gt = Tensor::zeros(x[0].shape());
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..c {
                        gt.data_mut()[i * c + k] += g.data()[r * c + k];
                    }
                }
                vec![Some(gt)]
            })),
        )
    }

    /// Straight-through estimator: forward value is `codes`, gradient passes to
    /// `input` unchanged. The offset `codes − input` is frozen, so a replaying
    /// tape evaluates `input + offset`.
    pub fn straight_through(&self, input: Var, codes: &Tensor) -> Result<Var> {
        let replay = self.is_replaying();
        let offset = self.frozen(|| {
            self.with_values(&[input], |v| {
                same_shape("straight_through", v[0], codes)?;
                Ok(codes.zip_map(v[0], |c, z| c - z))
            })
        })?;
        let value = if replay {
            self.with_values(&[input], |v| v[0].zip_map(&offset, |z, o| z + o))
        } else {
            codes.clone()
        };
        self.push_op(
            "straight_through",
            &[input],
            value,
            Some(Box::new(|g, _, _| vec![Some(g.clone())])),
        )
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gather_rows(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if !table.is_matrix() {
        return Err(Error::shape("gather_rows", format!("{:?}", table.shape())));
    }
    let (r, c) = (table.rows(), table.cols());
    let mut data = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        if i >= r {
            return Err(Error::invalid(format!("row index {i} out of range {r}")));
        }
        data.extend_from_slice(table.row(i));
    }
    Tensor::new(&[indices.len(), c], data)
}

pub(crate) struct SymEigen {
    vectors: Vec<f64>,
    values: Vec<f64>,
    n: usize,
}

fn sym_inv_sqrt_forward(a: &Tensor, floor: f64) -> Result<(Tensor, SymEigen)> {
    if !a.is_matrix() || a.rows() != a.cols() {
        return Err(Error::shape("sym_inv_sqrt", format!("{:?}", a.shape())));
    }
    let n = a.rows();
    let sym = DMatrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Eigen(format!("no convergence for {n}x{n} Gram matrix")))?;
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("non-finite eigenvalue".into()));
    }
    // row-major copy of the eigenvector matrix U (columns are eigenvectors)
    let mut vectors = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            vectors[i * n + j] = eig.eigenvectors[(i, j)];
        }
    }
    let f: Vec<f64> = values.iter().map(|&l| l.max(floor).powf(-0.5)).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += vectors[i * n + k] * f[k] * vectors[j * n + k];
            }
            out[i * n + j] = s;
        }
    }
    Ok((
        Tensor::new(&[n, n], out)?,
        SymEigen { vectors, values, n },
    ))
}

/// Daleckii–Krein backward for a spectral function: `Ā = sym(U (L ∘ Uᵀ Ḡ U) Uᵀ)`,
/// with `L` the divided-difference matrix of `f(λ) = max(λ, floor)^(-1/2)`.
fn sym_inv_sqrt_backward(eig: &SymEigen, floor: f64, g: &Tensor) -> Tensor {
    let n = eig.n;
    let u = &eig.vectors;
    let f = |l: f64| l.max(floor).powf(-0.5);
    let df = |l: f64| if l > floor { -0.5 * l.powf(-1.5) } else { 0.0 };
    let lam = &eig.values;

    // Uᵀ G U
    let mut tmp = vec![0.0; n * n];
    gemm_tn(n, n, n, u, g.data(), &mut tmp);
    let mut inner = vec![0.0; n * n];
    gemm_nn(n, n, n, &tmp, u, &mut inner);

    for i in 0..n {
        for j in 0..n {
            let (li, lj) = (lam[i], lam[j]);
            let scale = li.abs().max(lj.abs()).max(1.0);
            let l = if (li - lj).abs() > 1e-9 * scale {
                (f(li) - f(lj)) / (li - lj)
            } else {
                df(0.5 * (li + lj))
            };
            inner[i * n + j] *= l;
        }
    }
    let mut tmp2 = vec![0.0; n * n];
    gemm_nn(n, n, n, u, &inner, &mut tmp2);
    let mut out = vec![0.0; n * n];
    gemm_nt(n, n, n, &tmp2, u, &mut out);
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = 0.5 * (out[i * n + j] + out[j * n + i]);
        }
    }
    Tensor::new(&[n, n], sym).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn inner_product_gradient_is_twice_value() {
        let tape = Tape::new();
        let v = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let p = tape.leaf(v.clone());
        let sq = tape.mul(p, p).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap(), &v.scale(2.0));
    }

    #[test]
    fn inverse_sqrt_squares_to_inverse() {
        let a = Tensor::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]);
        let (r, _) = sym_inv_sqrt_forward(&a, 1e-6).unwrap();
        let prod = r.matmul(&r).unwrap().matmul(&a).unwrap();
        assert!(prod.max_abs_diff(&Tensor::identity(2)) < 1e-12);
    }

    #[test]
    fn straight_through_forward_is_exact_codes() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::new(&[1, 2], vec![0.1, 0.2]).unwrap());
        let codes = Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap();
        let st = tape.straight_through(z, &codes).unwrap();
        assert_eq!(*tape.value(st), codes);
    }
}
