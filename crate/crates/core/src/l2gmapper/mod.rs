//! Local-to-global mapping: Nyström embedding of discrete codes, entropic
//! alignment to learnable references, positional weighting and pooling.

mod init;
mod nystrom;
mod pooling;
mod position;

pub use init::{KMeansWarmStart, RandomUnit, ReferenceInit};
pub use nystrom::{init_anchors, median_heuristic, nystrom_on_tape, NystromEmbedding, GRAM_EIGEN_FLOOR};
pub use pooling::{
    alignment_cost, embed_multi_ref_on_tape, embed_single_ref_on_tape, ot_align, ot_align_on_tape,
};
pub use position::position_weights;

use crate::error::{Error, Result};
use crate::numerics::{Parameter, Tape, Tensor, Var};
use crate::sinkhorn::DEFAULT_ITERATIONS;

pub const DEFAULT_SIGMA_POS: f64 = 0.3;

/// Settings shared by every reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapperSettings {
    pub sigma_pos: f64,
    pub epsilon: f64,
    pub iterations: usize,
}

impl Default for MapperSettings {
    fn default() -> Self {
        Self {
            sigma_pos: DEFAULT_SIGMA_POS,
            epsilon: crate::sinkhorn::DEFAULT_EPSILON,
            iterations: DEFAULT_ITERATIONS,
        }
    }
}

/// `q` learnable references of shape t×kₐ.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub references: Vec<Parameter>,
    pub settings: MapperSettings,
}

impl ReferenceSet {
    pub fn new(references: Vec<Tensor>, settings: MapperSettings) -> Result<Self> {
        let first = references
            .first()
            .ok_or_else(|| Error::invalid("a reference set needs q ≥ 1"))?;
        if !first.is_matrix() || first.rows() == 0 || first.cols() == 0 {
            return Err(Error::invalid(format!("references must be t×kₐ, got {:?}", first.shape())));
        }
        for r in &references {
            if r.shape() != first.shape() {
                return Err(Error::shape(
                    "reference_set",
                    format!("{:?} vs {:?}", first.shape(), r.shape()),
                ));
            }
            if !r.is_finite() {
                return Err(Error::NonFinite { op: "reference_set".into() });
            }
        }
        if !(settings.epsilon > 0.0) || settings.iterations == 0 || !(settings.sigma_pos > 0.0) {
            return Err(Error::invalid(format!("invalid mapper settings {settings:?}")));
        }
        Ok(Self {
            references: references
                .into_iter()
                .enumerate()
                .map(|(i, r)| Parameter::new(format!("ref{i}"), r))
                .collect(),
            settings,
        })
    }

    pub fn q(&self) -> usize {
        self.references.len()
    }

    pub fn t(&self) -> usize {
        self.references[0].value.rows()
    }

    pub fn dim(&self) -> usize {
        self.references[0].value.cols()
    }
}

/// Tape handles produced by one mapper pass.
pub struct MapperOutput {
    /// q·t×kₐ pooled bins.
    pub embedding: Var,
    /// n×kₐ embedded codes.
    pub psi: Var,
    /// One n×t plan per reference.
    pub plans: Vec<Var>,
}

/// Full chain on the tape: Nyström, alignment, weighting, pooling.
pub fn map_on_tape(
    tape: &Tape,
    z_dis: Var,
    anchors: Var,
    bandwidth: Var,
    references: &[Var],
    settings: &MapperSettings,
    eigen_floor: f64,
) -> Result<MapperOutput> {
    let psi = nystrom_on_tape(tape, z_dis, anchors, bandwidth, eigen_floor)?;
    let n = tape.shape(psi)[0];
    let t = references
        .first()
        .map(|&r| tape.shape(r)[0])
        .ok_or_else(|| Error::invalid("at least one reference is required"))?;
    let positions = position_weights(n, t, settings.sigma_pos)?;
    let (embedding, plans) =
        embed_multi_ref_on_tape(tape, psi, references, &positions, settings.epsilon, settings.iterations)?;
    Ok(MapperOutput { embedding, psi, plans })
}

/// Single-reference embedding, forward only.
pub fn embed_single_ref(
    z_dis: &Tensor,
    z_ref: &Tensor,
    emb: &NystromEmbedding,
    settings: &MapperSettings,
) -> Result<Tensor> {
    let refs = ReferenceSet::new(vec![z_ref.clone()], *settings)?;
    let tape = Tape::new();
    let out = map_constants(&tape, z_dis, emb, &refs)?;
    // with q = 1 the 1/√q factor is exactly 1
    let v = tape.value(out.embedding).clone();
    Ok(v)
}

/// Multi-reference embedding, forward only.
pub fn embed_multi_ref(z_dis: &Tensor, refs: &ReferenceSet, emb: &NystromEmbedding) -> Result<Tensor> {
    let tape = Tape::new();
    let out = map_constants(&tape, z_dis, emb, refs)?;
    let v = tape.value(out.embedding).clone();
    Ok(v)
}

/// Transport plans of every reference, forward only.
pub fn transport_plans(z_dis: &Tensor, refs: &ReferenceSet, emb: &NystromEmbedding) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let out = map_constants(&tape, z_dis, emb, refs)?;
    Ok(out.plans.iter().map(|&p| tape.value(p).clone()).collect())
}

fn map_constants(tape: &Tape, z_dis: &Tensor, emb: &NystromEmbedding, refs: &ReferenceSet) -> Result<MapperOutput> {
    let z = tape.constant(z_dis.clone());
    let w = tape.constant(emb.anchors.value.clone());
    let s = tape.constant(emb.bandwidth.value.clone());
    let r: Vec<Var> = refs
        .references
        .iter()
        .map(|p| tape.constant(p.value.clone()))
        .collect();
    map_on_tape(tape, z, w, s, &r, &refs.settings, emb.eigen_floor)
}
