//! Entropic optimal transport solved by log-domain Sinkhorn scaling.
//!
//! The plan is `T = diag(u) exp(−M/ε) diag(v)`, carried as log-potentials
//! `f = log u`, `g = log v`. Each iteration updates `f` against the row
//! marginal and then `g` against the column marginal, starting from
//! `g = 0` (uniform scaling vector). The tape version and the plain solver
//! share the same kernels, so both produce bit-identical plans.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Default number of unrolled scaling iterations inside the model.
pub const DEFAULT_ITERATIONS: usize = 10;
/// Default regularization, relative to costs of unit max-abs scale.
pub const DEFAULT_EPSILON: f64 = 0.1;

const MARGINAL_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct OtProblem {
    pub cost: Tensor,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub epsilon: f64,
    pub iterations: usize,
}

impl OtProblem {
    /// Uniform marginals `1/n` and `1/t` for an n×t cost.
    pub fn uniform(cost: Tensor, epsilon: f64, iterations: usize) -> Self {
        let (n, t) = (cost.rows(), cost.cols());
        Self {
            cost,
            a: vec![1.0 / n as f64; n],
            b: vec![1.0 / t as f64; t],
            epsilon,
            iterations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.cost.is_matrix() || self.cost.rows() != self.a.len() || self.cost.cols() != self.b.len() {
            return Err(Error::shape(
                "sinkhorn",
                format!(
                    "cost {:?} with marginals {} and {}",
                    self.cost.shape(),
                    self.a.len(),
                    self.b.len()
                ),
            ));
        }
        if !self.cost.is_finite() {
            return Err(Error::NonFinite {
                op: "sinkhorn cost".into(),
            });
        }
        for (name, m) in [("a", &self.a), ("b", &self.b)] {
            if m.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::invalid(format!("marginal {name} has negative entries")));
            }
            let s: f64 = m.iter().sum();
            if (s - 1.0).abs() > MARGINAL_SUM_TOL {
                return Err(Error::invalid(format!("marginal {name} sums to {s}, not 1")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("sinkhorn needs at least one iteration"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Tensor,
    /// Max-norm deviation of row and column sums from `a` and `b`.
    pub marginal_residual: f64,
}

/// Runs exactly `problem.iterations` scaling steps.
pub fn sinkhorn_solve(problem: &OtProblem) -> Result<TransportPlan> {
    problem.validate()?;
    let k = log_kernel(&problem.cost, problem.epsilon)?;
    let (log_a, log_b) = (logs(&problem.a), logs(&problem.b));
    let mut g = vec![0.0; problem.b.len()];
    let mut f = Vec::new();
    for _ in 0..problem.iterations {
        f = row_update(&k, &g, &log_a);
        g = col_update(&k, &f, &log_b);
    }
    finish(&k, &f, &g, problem)
}

/// Iterates until the marginal residual drops below `tol` (checked after
/// every step) or `max_iterations` is reached. Returns the plan and the
/// number of iterations used. Test and diagnostics use only; the model
/// always runs a fixed count.
pub fn sinkhorn_converge(
    problem: &OtProblem,
    tol: f64,
    max_iterations: usize,
) -> Result<(TransportPlan, usize)> {
    problem.validate()?;
    let k = log_kernel(&problem.cost, problem.epsilon)?;
    let (log_a, log_b) = (logs(&problem.a), logs(&problem.b));
    let mut g = vec![0.0; problem.b.len()];
    for it in 1..=max_iterations.max(1) {
        let f = row_update(&k, &g, &log_a);
        g = col_update(&k, &f, &log_b);
        let plan = finish(&k, &f, &g, problem)?;
        if plan.marginal_residual < tol || it == max_iterations.max(1) {
            return Ok((plan, it));
        }
    }
    unreachable!()
}

/// `−Σ T_ij (log T_ij − 1)` with `0 · log 0 = 0`.
pub fn entropy(plan: &TransportPlan) -> Result<f64> {
    if !plan.plan.is_finite() {
        return Err(Error::NonFinite { op: "entropy".into() });
    }
    Ok(plan
        .plan
        .data()
        .iter()
        .map(|&t| if t > 0.0 { -t * (t.ln() - 1.0) } else { 0.0 })
        .sum())
}

/// Frobenius inner product `⟨T, M⟩`.
pub fn transport_cost(plan: &TransportPlan, cost: &Tensor) -> Result<f64> {
    if plan.plan.shape() != cost.shape() {
        return Err(Error::shape(
            "transport_cost",
            format!("{:?} vs {:?}", plan.plan.shape(), cost.shape()),
        ));
    }
    Ok(plan.plan.dot(cost))
}

pub fn marginal_residual(plan: &Tensor, a: &[f64], b: &[f64]) -> f64 {
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    rows.iter()
        .zip(a)
        .chain(cols.iter().zip(b))
        .fold(0.0, |m, (s, t)| m.max((s - t).abs()))
}

fn logs(m: &[f64]) -> Vec<f64> {
    m.iter().map(|x| x.ln()).collect()
}

fn log_kernel(cost: &Tensor, epsilon: f64) -> Result<Tensor> {
    let k = cost.scale(-1.0 / epsilon);
    if !k.is_finite() {
        return Err(Error::SinkhornOverflow(format!(
            "−M/ε overflows for ε = {epsilon:e} (max |M| = {:e})",
            cost.max_abs()
        )));
    }
    Ok(k)
}

fn finish(k: &Tensor, f: &[f64], g: &[f64], problem: &OtProblem) -> Result<TransportPlan> {
    let plan = plan_from_potentials(k, f, g);
    if !plan.is_finite() {
        return Err(Error::SinkhornOverflow(format!(
            "plan is non-finite at ε = {:e}",
            problem.epsilon
        )));
    }
    let marginal_residual = marginal_residual(&plan, &problem.a, &problem.b);
    Ok(TransportPlan {
        plan,
        marginal_residual,
    })
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `f_i = log a_i − LSE_j(K_ij + g_j)`
fn row_update(k: &Tensor, g: &[f64], log_a: &[f64]) -> Vec<f64> {
    (0..k.rows())
        .map(|i| log_a[i] - logsumexp(k.row(i).iter().zip(g).map(|(kv, gv)| kv + gv)))
        .collect()
}

/// `g_j = log b_j − LSE_i(K_ij + f_i)`
fn col_update(k: &Tensor, f: &[f64], log_b: &[f64]) -> Vec<f64> {
    let t = k.cols();
    (0..t)
        .map(|j| log_b[j] - logsumexp((0..k.rows()).map(|i| k.data()[i * t + j] + f[i])))
        .collect()
}

fn plan_from_potentials(k: &Tensor, f: &[f64], g: &[f64]) -> Tensor {
    let t = k.cols();
    let data = k
        .data()
        .iter()
        .enumerate()
        .map(|(idx, kv)| (kv + f[idx / t] + g[idx % t]).exp())
        .collect();
    Tensor::new(k.shape(), data).expect("shape")
}

/// Row-softmax of `K_ij + g_j`: the Jacobian weights of a row update.
fn row_weights(k: &Tensor, g: &[f64]) -> Vec<f64> {
    let t = k.cols();
    let mut w = vec![0.0; k.numel()];
    for i in 0..k.rows() {
        let row = k.row(i);
        let lse = logsumexp(row.iter().zip(g).map(|(a, b)| a + b));
        for j in 0..t {
            w[i * t + j] = (row[j] + g[j] - lse).exp();
        }
    }
    w
}

/// Column-softmax of `K_ij + f_i`.
fn col_weights(k: &Tensor, f: &[f64]) -> Vec<f64> {
    let (n, t) = (k.rows(), k.cols());
    let mut w = vec![0.0; k.numel()];
    for j in 0..t {
        let lse = logsumexp((0..n).map(|i| k.data()[i * t + j] + f[i]));
        for i in 0..n {
            w[i * t + j] = (k.data()[i * t + j] + f[i] - lse).exp();
        }
    }
    w
}

impl Tape {
    fn sinkhorn_row_update(&self, k: Var, g: Var, log_a: Vec<f64>) -> Result<Var> {
        let value = self.with_values(&[k, g], |v| {
            Tensor::new(&[v[0].rows()], row_update(v[0], v[1].data(), &log_a))
        })?;
        self.push_op(
            "sinkhorn_row_update",
            &[k, g],
            value,
            Some(Box::new(|gf, v, _| {
                let (n, t) = (v[0].rows(), v[0].cols());
                let w = row_weights(v[0], v[1].data());
                let mut gk = vec![0.0; n * t];
                let mut gg = vec![0.0; t];
                for i in 0..n {
                    let gi = gf.data()[i];
                    for j in 0..t {
                        let d = -gi * w[i * t + j];
                        gk[i * t + j] = d;
                        gg[j] += d;
                    }
                }
                vec![
                    Some(Tensor::new(&[n, t], gk).expect("shape")),
                    Some(Tensor::new(&[t], gg).expect("shape")),
                ]
            })),
        )
    }

    fn sinkhorn_col_update(&self, k: Var, f: Var, log_b: Vec<f64>) -> Result<Var> {
        let value = self.with_values(&[k, f], |v| {
            Tensor::new(&[v[0].cols()], col_update(v[0], v[1].data(), &log_b))
        })?;
        self.push_op(
            "sinkhorn_col_update",
            &[k, f],
            value,
            Some(Box::new(|gg, v, _| {
                let (n, t) = (v[0].rows(), v[0].cols());
                let w = col_weights(v[0], v[1].data());
                let mut gk = vec![0.0; n * t];
                let mut gf = vec![0.0; n];
                for i in 0..n {
                    for j in 0..t {
                        let d = -gg.data()[j] * w[i * t + j];
                        gk[i * t + j] = d;
                        gf[i] += d;
                    }
                }
                vec![
                    Some(Tensor::new(&[n, t], gk).expect("shape")),
                    Some(Tensor::new(&[n], gf).expect("shape")),
                ]
            })),
        )
    }

    fn sinkhorn_plan(&self, k: Var, f: Var, g: Var) -> Result<Var> {
        let value =
            self.with_values(&[k, f, g], |v| plan_from_potentials(v[0], v[1].data(), v[2].data()));
        self.push_op(
            "sinkhorn_plan",
            &[k, f, g],
            value,
            Some(Box::new(|gt, v, tplan| {
                let (n, t) = (v[0].rows(), v[0].cols());
                let gk = gt.zip_map(tplan, |a, b| a * b);
                let gf = gk.row_sums();
                let gg = gk.col_sums();
                vec![
                    Some(gk),
                    Some(Tensor::new(&[n], gf).expect("shape")),
                    Some(Tensor::new(&[t], gg).expect("shape")),
                ]
            })),
        )
    }

    /// Unrolled Sinkhorn on the tape; gradients flow to `cost`.
    ///
    /// Marginals must be strictly positive here (their logs enter the graph).
    pub fn sinkhorn(&self, cost: Var, a: &[f64], b: &[f64], epsilon: f64, iterations: usize) -> Result<Var> {
        let shape = self.shape(cost);
        // validate through the plain problem type (cheap: cost is only cloned for shape checks)
        OtProblem {
            cost: self.value(cost).clone(),
            a: a.to_vec(),
            b: b.to_vec(),
            epsilon,
            iterations,
        }
        .validate()?;
        if a.iter().chain(b).any(|&x| x <= 0.0) {
            return Err(Error::invalid("tape sinkhorn requires strictly positive marginals"));
        }
        let k = self.scale(cost, -1.0 / epsilon).map_err(|e| match e {
            Error::NonFinite { .. } => Error::SinkhornOverflow(format!(
                "−M/ε overflows for ε = {epsilon:e}"
            )),
            other => other,
        })?;
        let (log_a, log_b) = (logs(a), logs(b));
        let mut g = self.constant(Tensor::zeros(&[shape[1]]));
        let mut f = g;
        for _ in 0..iterations {
            f = self.sinkhorn_row_update(k, g, log_a.clone())?;
            g = self.sinkhorn_col_update(k, f, log_b.clone())?;
        }
        self.sinkhorn_plan(k, f, g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn outer(a: &[f64], b: &[f64]) -> Tensor {
        let data = a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect();
        Tensor::new(&[a.len(), b.len()], data).unwrap()
    }

    #[test]
    fn constant_cost_gives_product_coupling() {
        for eps in [0.01, 0.1, 1.0] {
            let p = OtProblem {
                cost: Tensor::full(&[3, 4], 0.7),
                a: vec![0.2, 0.3, 0.5],
                b: vec![0.1, 0.2, 0.3, 0.4],
                epsilon: eps,
                iterations: 10,
            };
            let plan = sinkhorn_solve(&p).unwrap();
            assert!(plan.plan.max_abs_diff(&outer(&p.a, &p.b)) < 1e-12);
        }
    }

    #[test]
    fn singleton_problem() {
        let p = OtProblem::uniform(Tensor::full(&[1, 1], 3.0), 0.1, 10);
        let plan = sinkhorn_solve(&p).unwrap();
        assert_eq!(plan.plan.data(), &[1.0]);
        assert_eq!(plan.marginal_residual, 0.0);
    }

    #[test]
    fn anti_diagonal_cost_concentrates_on_diagonal() {
        let cost = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let p = OtProblem::uniform(cost.clone(), 0.01, 10);
        let (plan, _) = sinkhorn_converge(&p, 1e-9, 100_000).unwrap();
        assert!(plan.marginal_residual < 1e-9);
        // brute-force LP over the family [[x, .5−x], [.5−x, x]]
        let best = (0..=500)
            .map(|s| s as f64 / 1000.0)
            .min_by(|x, y| {
                let cx = 2.0 * (0.5 - x);
                let cy = 2.0 * (0.5 - y);
                cx.partial_cmp(&cy).unwrap()
            })
            .unwrap();
        let lp = Tensor::from_rows(&[vec![best, 0.5 - best], vec![0.5 - best, best]]);
        assert!(plan.plan.max_abs_diff(&lp) < 1e-3);
    }

    #[test]
    fn entropy_conventions() {
        let uniform = TransportPlan {
            plan: Tensor::full(&[2, 2], 0.25),
            marginal_residual: 0.0,
        };
        let direct = -4.0 * 0.25 * (0.25f64.ln() - 1.0);
        assert!((entropy(&uniform).unwrap() - direct).abs() < 1e-15);

        let point = TransportPlan {
            plan: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]),
            marginal_residual: 0.0,
        };
        assert_eq!(entropy(&point).unwrap(), 1.0);
    }

    #[test]
    fn entropy_is_maximal_at_product_coupling() {
        let h = |x: f64| {
            entropy(&TransportPlan {
                plan: Tensor::from_rows(&[vec![x, 0.5 - x], vec![0.5 - x, x]]),
                marginal_residual: 0.0,
            })
            .unwrap()
        };
        let at_product = h(0.25);
        for s in 0..=50 {
            assert!(h(s as f64 * 0.01) <= at_product + 1e-15);
        }
    }

    #[test]
    fn transport_cost_cases() {
        let mut rng = Rng::seeded(3);
        let m = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
        let (a, b) = (vec![0.2, 0.3, 0.5], vec![0.1, 0.2, 0.3, 0.4]);
        let plan = TransportPlan {
            plan: outer(&a, &b),
            marginal_residual: 0.0,
        };
        assert_eq!(transport_cost(&plan, &Tensor::zeros(&[3, 4])).unwrap(), 0.0);
        let mut direct = 0.0;
        for i in 0..3 {
            let mut inner = 0.0;
            for j in 0..4 {
                inner += b[j] * m.get(i, j);
            }
            direct += a[i] * inner;
        }
        assert!((transport_cost(&plan, &m).unwrap() - direct).abs() < 1e-14);

        let perm = TransportPlan {
            plan: Tensor::identity(3).scale(1.0 / 3.0),
            marginal_residual: 0.0,
        };
        let sq = rng.uniform_tensor(&[3, 3], 0.0, 1.0);
        let diag_mean = (sq.get(0, 0) + sq.get(1, 1) + sq.get(2, 2)) / 3.0;
        assert!((transport_cost(&perm, &sq).unwrap() - diag_mean).abs() < 1e-15);
        assert!(transport_cost(&perm, &m).is_err());
    }

    #[test]
    fn invalid_problems_are_rejected() {
        let mut p = OtProblem::uniform(Tensor::zeros(&[2, 2]), 0.1, 10);
        p.epsilon = 0.0;
        assert!(sinkhorn_solve(&p).is_err());
        let mut p = OtProblem::uniform(Tensor::zeros(&[2, 2]), 0.1, 10);
        p.a = vec![0.7, 0.7];
        assert!(sinkhorn_solve(&p).is_err());
        let p = OtProblem::uniform(Tensor::from_rows(&[vec![f64::NAN, 0.0]]), 0.1, 10);
        assert!(matches!(sinkhorn_solve(&p), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn overflow_is_reported() {
        let p = OtProblem::uniform(Tensor::from_rows(&[vec![1.0, 0.0]]), 1e-310, 10);
        assert!(matches!(sinkhorn_solve(&p), Err(Error::SinkhornOverflow(_))));
    }

    #[test]
    fn tape_and_plain_are_bit_identical() {
        let mut rng = Rng::seeded(11);
        let cost = rng.uniform_tensor(&[5, 3], -1.0, 1.0);
        let p = OtProblem::uniform(cost.clone(), 0.1, 10);
        let plain = sinkhorn_solve(&p).unwrap();
        let tape = Tape::new();
        let c = tape.leaf(cost);
        let t = tape.sinkhorn(c, &p.a, &p.b, 0.1, 10).unwrap();
        assert_eq!(*tape.value(t), plain.plan);
    }
}
