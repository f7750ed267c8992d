//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::{Parameter, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so entries with vanishing
    /// gradients are compared in absolute terms.
    pub abs_floor: f64,
    /// Probe at most this many entries per parameter (evenly strided).
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_entries: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EntryCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub entries: Vec<EntryCheck>,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `f` with central differences for every
/// entry of every parameter.
///
/// `f` receives a fresh tape and one leaf per parameter. Probe evaluations
/// replay the frozen values recorded during the analytic pass.
pub fn grad_check<F>(f: F, params: &[Parameter], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.step) {
        return Err(Error::invalid(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            opts.step
        )));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| p.bind(&tape)).collect();
    let loss = f(&tape, &vars)?;
    let loss_value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let analytic: Vec<_> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
    let log = tape.take_frozen_log();

    let eval = |values: &[Parameter]| -> Result<f64> {
        let probe = Tape::replaying(log.clone());
        let vars: Vec<Var> = values.iter().map(|p| p.bind(&probe)).collect();
        let out = f(&probe, &vars)?;
        let v = probe.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "grad_check probe".into(),
            });
        }
        Ok(v)
    };

    let mut work: Vec<Parameter> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, param) in params.iter().enumerate() {
        let n = param.value.numel();
        let stride = opts
            .max_entries
            .map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        let mut entries = Vec::new();
        for idx in (0..n).step_by(stride) {
            let orig = param.value.data()[idx];
            work[pi].value.data_mut()[idx] = orig + opts.step;
            let fp = eval(&work)?;
            work[pi].value.data_mut()[idx] = orig - opts.step;
            let fm = eval(&work)?;
            work[pi].value.data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[pi].data()[idx];
            entries.push(EntryCheck {
                index: idx,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric, opts.abs_floor),
            });
        }
        let max_rel_err = entries.iter().fold(0.0, |m: f64, e| m.max(e.rel_err));
        let mean_rel_err =
            entries.iter().map(|e| e.rel_err).sum::<f64>() / entries.len().max(1) as f64;
        checks.push(ParamCheck {
            name: param.name.clone(),
            entries,
            max_rel_err,
            mean_rel_err,
            passed: max_rel_err < opts.tolerance,
        });
    }
    Ok(GradCheckReport {
        loss: loss_value,
        params: checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn quadratic(tape: &Tape, v: &[Var]) -> Result<Var> {
        let sq = tape.mul(v[0], v[0])?;
        tape.sum(sq)
    }

    #[test]
    fn quadratic_passes_tightly() {
        let p = Parameter::new("p", Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap());
        let r = grad_check(quadratic, &[p], GradCheckOptions::default()).unwrap();
        assert!(r.passed());
        assert!(r.max_rel_err() < 1e-8, "{}", r.max_rel_err());
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let f = |tape: &Tape, v: &[Var]| -> Result<Var> {
            let sq = tape.custom_op(
                "bad_square",
                &[v[0]],
                |x| Ok(x[0].map(|a| a * a)),
                // correct rule would be 2x·g
                Some(Box::new(|g, x, _| vec![Some(g.zip_map(x[0], |g, a| 3.0 * a * g))])),
            )?;
            tape.sum(sq)
        };
        let p = Parameter::new("p", Tensor::new(&[3], vec![0.5, 1.5, -2.0]).unwrap());
        let r = grad_check(f, &[p], GradCheckOptions::default()).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn step_out_of_range_is_rejected() {
        let p = Parameter::new("p", Tensor::ones(&[1]));
        let opts = GradCheckOptions {
            step: 1e-2,
            ..Default::default()
        };
        assert!(grad_check(quadratic, &[p], opts).is_err());
    }
}
