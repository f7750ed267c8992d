//! Finite-difference checks over the quantizer, the mapper and the full model.

use anyhow::Result;
use l2gnet::l2gmapper::{map_on_tape, MapperSettings, GRAM_EIGEN_FLOOR};
use l2gnet::numerics::{grad_check, GradCheckOptions, GradCheckReport, Parameter, Rng, Tape, Tensor, Var};
use l2gnet::quantizer::quantize_on_tape;
use l2gnet::registry::quant_objectives;
use l2gnet::segmodel::{ModelConfig, SegModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scale {
    Tiny,
    Small,
}

impl Scale {
    pub fn model(self) -> ModelConfig {
        match self {
            Scale::Tiny => ModelConfig::tiny(),
            Scale::Small => ModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupResult {
    pub group: &'static str,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl GroupResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Identity whose backward is off by 10%; used to prove the checker notices.
fn faulty_identity(tape: &Tape, x: Var) -> l2gnet::Result<Var> {
    tape.custom_op(
        "faulty_identity",
        &[x],
        |v| Ok(v[0].clone()),
        Some(Box::new(|g, _, _| vec![Some(g.scale(1.1))])),
    )
}

fn project(tape: &Tape, x: Var, w: &Tensor) -> l2gnet::Result<Var> {
    let y = tape.mul_const(x, w)?;
    tape.sum(y)
}

pub fn run_suite(scale: Scale, seed: u64, inject_fault: bool) -> Result<Vec<GroupResult>> {
    let cfg = scale.model();
    let mut rng = Rng::seeded(seed);
    let wrap = |t: &Tape, l: Var| if inject_fault { faulty_identity(t, l) } else { Ok(l) };
    let component = GradCheckOptions::default();
    let mut out = Vec::new();

    // Quantizer loss path, including the straight-through route.
    let n = cfg.codes().min(16);
    let objective = quant_objectives().create(&cfg.quant_objective, &cfg.beta)?;
    let z = Parameter::new("z_con", rng.normal_tensor(&[n, cfg.code_dim], 1.0));
    let e = Parameter::new("codebook", rng.normal_tensor(&[cfg.codebook_size, cfg.code_dim], 1.0));
    let c = rng.normal_tensor(&[n, cfg.code_dim], 1.0);
    let report = grad_check(
        |t, v| {
            let q = quantize_on_tape(t, v[0], v[1], objective.as_ref())?;
            let down = project(t, q.z_dis, &c)?;
            let l = t.add(down, q.loss)?;
            wrap(t, l)
        },
        &[z, e],
        component,
    )?;
    out.push(GroupResult { group: "quantizer", report, tolerance: component.tolerance });

    // Mapper: Nyström, Sinkhorn alignment, positional weighting, pooling.
    let n = cfg.codes();
    let settings = MapperSettings {
        sigma_pos: cfg.sigma_pos,
        epsilon: cfg.epsilon,
        iterations: cfg.sinkhorn_iters,
    };
    let mut params = vec![
        Parameter::new("z_dis", rng.normal_tensor(&[n, cfg.code_dim], 1.0)),
        Parameter::new("anchors", rng.normal_tensor(&[cfg.anchors, cfg.code_dim], 1.0)),
        Parameter::new("bandwidth", Tensor::scalar((cfg.code_dim as f64).sqrt())),
    ];
    for r in 0..cfg.references {
        params.push(Parameter::new(format!("ref{r}"), rng.normal_tensor(&[cfg.bins, cfg.anchors], 0.5)));
    }
    let w = rng.normal_tensor(&[cfg.references * cfg.bins, cfg.anchors], 1.0);
    let report = grad_check(
        |t, v| {
            let out = map_on_tape(t, v[0], v[1], v[2], &v[3..], &settings, GRAM_EIGEN_FLOOR)?;
            let l = project(t, out.embedding, &w)?;
            wrap(t, l)
        },
        &params,
        GradCheckOptions {
            max_entries: Some(24),
            ..component
        },
    )?;
    out.push(GroupResult { group: "mapper", report, tolerance: component.tolerance });

    // End to end, through encoder, quantizer, mapper and decoder.
    let mut model = SegModel::new(cfg.clone(), &mut rng)?;
    let image = rng.uniform_tensor(&[cfg.channels, cfg.height, cfg.width], 0.0, 1.0);
    model.warm_start(&[&image], &mut rng)?;
    let labels: Vec<u8> = (0..cfg.height * cfg.width).map(|_| rng.index(cfg.classes) as u8).collect();
    let e2e = GradCheckOptions {
        tolerance: 1e-3,
        max_entries: Some(if scale == Scale::Tiny { 8 } else { 3 }),
        ..component
    };
    let report = grad_check(
        |t, v| {
            let l = model.loss_on_tape(t, v, &image, &labels)?;
            wrap(t, l)
        },
        model.params.params(),
        e2e,
    )?;
    out.push(GroupResult { group: "end-to-end", report, tolerance: e2e.tolerance });
    Ok(out)
}
