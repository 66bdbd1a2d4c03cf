//! Central finite-difference oracle for gradient checks.
//!
//! Evaluates only the forward function; it never touches the recorded graph,
//! so it is an independent check of [`Tensor::backward`].

use crate::backbone::{Bound, ParamSet};
use crate::tensor::{Array, Result, Tensor};

/// Errors below this magnitude are compared absolutely rather than relatively.
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (leaf index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Central differences of `f` with respect to each element of each leaf.
pub fn numeric_gradients<Fun>(leaves: &[Array<f64>], h: f64, f: Fun) -> Result<Vec<Vec<f64>>>
where
    Fun: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let mut work: Vec<Array<f64>> = leaves.to_vec();
    let mut out = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let mut g = vec![0.0; leaves[li].numel()];
        for (ei, slot) in g.iter_mut().enumerate() {
            let orig = work[li].data[ei];
            work[li].data[ei] = orig + h;
            let plus = eval(&work, &f)?;
            work[li].data[ei] = orig - h;
            let minus = eval(&work, &f)?;
            work[li].data[ei] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

fn eval<Fun>(arrays: &[Array<f64>], f: &Fun) -> Result<f64>
where
    Fun: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let ts: Vec<Tensor<f64>> = arrays.iter().map(|a| Tensor::from_array(a, false)).collect();
    Ok(f(&ts)?.item())
}

/// Analytic gradients through `backward`.
pub fn analytic_gradients<Fun>(leaves: &[Array<f64>], f: Fun) -> Result<Vec<Vec<f64>>>
where
    Fun: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let ts: Vec<Tensor<f64>> = leaves.iter().map(|a| Tensor::from_array(a, true)).collect();
    f(&ts)?.backward()?;
    Ok(ts
        .iter()
        .map(|t| t.grad_vec().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

/// Compare analytic and numeric gradients over every element of every leaf.
pub fn check<Fun>(leaves: &[Array<f64>], h: f64, f: Fun) -> Result<GradCheck>
where
    Fun: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let analytic = analytic_gradients(leaves, &f)?;
    let numeric = numeric_gradients(leaves, h, &f)?;
    Ok(compare(&analytic, &numeric))
}

pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheck {
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (li, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (ei, (&x, &y)) in a.iter().zip(n).enumerate() {
            report.checked += 1;
            let e = rel_err(x, y);
            if e > report.max_rel_err || e.is_nan() {
                report = GradCheck {
                    max_rel_err: e,
                    worst: (li, ei),
                    analytic: x,
                    numeric: y,
                    checked: report.checked,
                };
            }
        }
    }
    report
}

/// Worst relative error per parameter tensor for a scalar function of a
/// whole parameter set, against central differences over every element.
pub fn check_params<Fun>(params: &ParamSet<f64>, h: f64, f: Fun) -> crate::Result<Vec<(String, GradCheck)>>
where
    Fun: Fn(&Bound<f64>) -> crate::Result<Tensor<f64>>,
{
    let bound = params.bind(|_| true);
    f(&bound)?.backward()?;
    let analytic = bound.grads();
    let mut work = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let n = work.get(&name).map_or(0, Array::numel);
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work.get(&name).expect("name from set").data[i];
            let mut at = |v: f64| -> crate::Result<f64> {
                work.get_mut(&name).expect("name from set").data[i] = v;
                Ok(f(&work.constants())?.item())
            };
            let (plus, minus) = (at(orig + h)?, at(orig - h)?);
            at(orig)?;
            *slot = (plus - minus) / (2.0 * h);
        }
        let report = compare(&[analytic[&name].clone()], &[numeric]);
        out.push((name, report));
    }
    Ok(out)
}
