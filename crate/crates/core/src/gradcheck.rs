//! Central finite-difference gradient checking.

use crate::tensor::{Result, Tape, Tensor, Var};

/// Finite-difference step used by every gradient check in the crate.
pub const FD_STEP: f64 = 1e-5;
/// Maximum tolerated relative error between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Outcome of comparing analytic gradients against finite differences.
#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize)>,
}

impl GradReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    pub fn merge(&mut self, other: &GradReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.checked += other.checked;
    }
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps coordinates whose true
/// gradient is zero from dividing rounding noise by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares the tape's gradient of a scalar function against central
/// differences for each input tensor. At most `max_coords` coordinates per
/// input are probed, spread evenly across the tensor.
pub fn check<F>(inputs: &[Tensor], max_coords: usize, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let len = input.len();
        let stride = (len / max_coords.max(1)).max(1);
        for ci in (0..len).step_by(stride).take(max_coords) {
            let orig = input.data()[ci];
            probe[ti].data_mut()[ci] = orig + FD_STEP;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[ci] = orig - FD_STEP;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[ti].data()[ci], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((ti, ci));
            }
        }
    }
    Ok(report)
}
