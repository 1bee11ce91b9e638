use serde::Serialize;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub max_abs_err: f64,
    /// `max|a − n| / max(max|a|, max|n|)` over the group's entries.
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub groups: Vec<GroupCheck>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares taped gradients of `loss` against central differences with step `h`.
///
/// `loss` receives one handle per entry of `params`, in order, and must return
/// a scalar.
pub fn grad_check<F>(params: &[(String, Tensor)], h: f64, loss: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|(_, t)| tape.param(t)).collect();
    let out = loss(&tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, (_, t))| tape.grad(v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(loss(&tape, &vars)?.item())
    };

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut groups = Vec::with_capacity(params.len());
    for (g, (name, _)) in params.iter().enumerate() {
        let mut max_abs = 0.0f64;
        let (mut max_a, mut max_n) = (0.0f64, 0.0f64);
        for j in 0..values[g].numel() {
            let orig = values[g].data()[j];
            values[g].data_mut()[j] = orig + h;
            let plus = eval(&values)?;
            values[g].data_mut()[j] = orig - h;
            let minus = eval(&values)?;
            values[g].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[g][j];
            max_abs = max_abs.max((a - numeric).abs());
            max_a = max_a.max(a.abs());
            max_n = max_n.max(numeric.abs());
        }
        let scale = max_a.max(max_n).max(f64::MIN_POSITIVE);
        groups.push(GroupCheck {
            name: name.clone(),
            max_abs_err: max_abs,
            max_rel_err: if max_abs == 0.0 { 0.0 } else { max_abs / scale },
        });
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        h,
        groups,
        max_rel_err,
    })
}
