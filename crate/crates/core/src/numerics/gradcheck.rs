//! Central finite-difference oracle for analytic gradients.
//!
//! The oracle only ever evaluates the forward pass, so it is independent of
//! the backward rules it checks.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Elementwise errors below this absolute size are treated as agreement;
/// both gradients are then indistinguishable from f64 cancellation noise.
pub const ABS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|)` over checked
    /// coordinates whose absolute error exceeds [`ABS_FLOOR`].
    pub max_rel_err: f64,
    /// Largest normwise relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over inputs.
    pub max_norm_rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.max_norm_rel_err < tol
    }
}

fn rel(a: f64, n: f64) -> f64 {
    let diff = (a - n).abs();
    if diff <= ABS_FLOOR {
        return 0.0;
    }
    diff / a.abs().max(n.abs())
}

/// Compare backward-pass gradients of `loss(inputs)` with central differences.
///
/// `coords[i]` restricts which flat indices of input `i` are perturbed
/// (`None` = all of them).
pub fn check_gradients<F>(inputs: &[Tensor], coords: &[Option<Vec<usize>>], loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = loss(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = loss(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    compare(inputs, &analytic, coords, eval)
}

/// Compare given analytic gradients with central differences of `eval` around `inputs`.
pub fn compare<E>(inputs: &[Tensor], analytic: &[Tensor], coords: &[Option<Vec<usize>>], mut eval: E) -> Result<GradCheckReport>
where
    E: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut report = GradCheckReport { max_rel_err: 0.0, max_norm_rel_err: 0.0, checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let all: Vec<usize>;
        let idx: &[usize] = match coords.get(i).and_then(Option::as_ref) {
            Some(c) => c,
            None => {
                all = (0..input.numel()).collect();
                &all
            }
        };
        let (mut dd, mut aa, mut nn) = (0.0, 0.0, 0.0);
        for &j in idx {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j];
            report.max_rel_err = report.max_rel_err.max(rel(a, numeric));
            dd += (a - numeric).powi(2);
            aa += a * a;
            nn += numeric * numeric;
            report.checked += 1;
        }
        let denom = aa.sqrt().max(nn.sqrt());
        if denom > 0.0 && dd.sqrt() > ABS_FLOOR {
            report.max_norm_rel_err = report.max_norm_rel_err.max(dd.sqrt() / denom);
        }
    }
    Ok(report)
}
