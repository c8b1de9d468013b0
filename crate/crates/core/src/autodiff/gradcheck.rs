use super::{ParamSet, Tape, Var};
use crate::error::Result;

/// Worst relative error per parameter from a central-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub worst: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn failures(&self) -> Vec<&str> {
        self.per_param
            .iter()
            .filter(|(_, e)| *e > self.tolerance)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    let diff = (a - n).abs();
    if diff < 1e-9 {
        0.0
    } else {
        diff / a.abs().max(n.abs())
    }
}

/// Compare analytic gradients of a deterministic scalar function against
/// central finite differences over every parameter element.
pub fn grad_check<F>(
    params: &mut ParamSet,
    step: f64,
    tolerance: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<Var>,
{
    // analytic pass
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = f(params, &mut tape)?;
    tape.backward(loss)?;
    tape.accumulate_param_grads(params);
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, e)| e.tensor.grad.clone().unwrap_or_default())
        .collect();

    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut per_param = Vec::with_capacity(ids.len());
    let mut worst = 0.0f64;
    for (pi, id) in ids.iter().enumerate() {
        let name = params.get(*id).name.clone();
        let n_elems = params.get(*id).tensor.numel();
        let mut p_worst = 0.0f64;
        for j in 0..n_elems {
            let orig = params.get(*id).tensor.data[j];

            params.get_mut(*id).tensor.data[j] = orig + step;
            let mut t = Tape::new();
            let v = f(params, &mut t)?;
            let plus = t.value_scalar(v);

            params.get_mut(*id).tensor.data[j] = orig - step;
            let mut t = Tape::new();
            let v = f(params, &mut t)?;
            let minus = t.value_scalar(v);

            params.get_mut(*id).tensor.data[j] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            p_worst = p_worst.max(rel_err(analytic[pi][j], numeric));
        }
        worst = worst.max(p_worst);
        per_param.push((name, p_worst));
    }

    Ok(GradCheckReport {
        per_param,
        worst,
        tolerance,
    })
}
