use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::sinkhorn::{sinkhorn_solve, OtProblem, TransportPlan};

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Alignment cost `M_ij = −⟨ψ_i, ref_j⟩`.
pub fn alignment_cost(psi: &Tensor, z_ref: &Tensor) -> Result<Tensor> {
    if !psi.is_matrix() || !z_ref.is_matrix() || psi.cols() != z_ref.cols() {
        return Err(Error::shape(
            "ot_align",
            format!("embedded codes {:?} vs reference {:?}", psi.shape(), z_ref.shape()),
        ));
    }
    Ok(psi.matmul(&z_ref.transpose())?.scale(-1.0))
}

/// Entropic OT plan between the embedded codes and one reference, uniform marginals.
pub fn ot_align(psi: &Tensor, z_ref: &Tensor, epsilon: f64, iterations: usize) -> Result<TransportPlan> {
    let cost = alignment_cost(psi, z_ref)?;
    sinkhorn_solve(&OtProblem::uniform(cost, epsilon, iterations))
}

pub fn ot_align_on_tape(tape: &Tape, psi: Var, z_ref: Var, epsilon: f64, iterations: usize) -> Result<Var> {
    let (ps, rs) = (tape.shape(psi), tape.shape(z_ref));
    if ps.len() != 2 || rs.len() != 2 || ps[1] != rs[1] {
        return Err(Error::shape(
            "ot_align",
            format!("embedded codes {ps:?} vs reference {rs:?}"),
        ));
    }
    let rt = tape.transpose(z_ref)?;
    let sim = tape.matmul(psi, rt)?;
    let cost = tape.scale(sim, -1.0)?;
    tape.sinkhorn(cost, &uniform(ps[0]), &uniform(rs[0]), epsilon, iterations)
}

/// One reference: `√t · (T ⊙ S)ᵀ ψ`, a t×kₐ matrix of pooled bins.
/// Returns the pooled bins and the transport plan.
pub fn embed_single_ref_on_tape(
    tape: &Tape,
    psi: Var,
    z_ref: Var,
    positions: &Tensor,
    epsilon: f64,
    iterations: usize,
) -> Result<(Var, Var)> {
    let plan = ot_align_on_tape(tape, psi, z_ref, epsilon, iterations)?;
    if tape.shape(plan) != positions.shape() {
        return Err(Error::shape(
            "embed_single_ref",
            format!("plan {:?} vs positions {:?}", tape.shape(plan), positions.shape()),
        ));
    }
    let t = positions.cols();
    let weighted = tape.mul_const(plan, positions)?;
    let wt = tape.transpose(weighted)?;
    let pooled = tape.matmul(wt, psi)?;
    Ok((tape.scale(pooled, (t as f64).sqrt())?, plan))
}

/// All references, bins stacked row-wise and scaled by `1/√q`.
pub fn embed_multi_ref_on_tape(
    tape: &Tape,
    psi: Var,
    refs: &[Var],
    positions: &Tensor,
    epsilon: f64,
    iterations: usize,
) -> Result<(Var, Vec<Var>)> {
    let first = refs
        .first()
        .map(|&r| tape.shape(r))
        .ok_or_else(|| Error::invalid("at least one reference is required"))?;
    if let Some(&bad) = refs.iter().find(|&&r| tape.shape(r) != first) {
        return Err(Error::shape(
            "embed_multi_ref",
            format!("reference shapes differ: {first:?} vs {:?}", tape.shape(bad)),
        ));
    }
    let mut blocks = Vec::with_capacity(refs.len());
    let mut plans = Vec::with_capacity(refs.len());
    for &r in refs {
        let (b, p) = embed_single_ref_on_tape(tape, psi, r, positions, epsilon, iterations)?;
        blocks.push(b);
        plans.push(p);
    }
    let stacked = tape.concat0(&blocks)?;
    let out = tape.scale(stacked, 1.0 / (refs.len() as f64).sqrt())?;
    Ok((out, plans))
}
