//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The numeric side only evaluates forward values on a non-recording graph,
//! so it shares no code with the backward rules it checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so gradients that are zero up to
/// round-off do not produce spurious failures.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Checks every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    check_gradients_at(inputs, f, h, &coords)
}

/// Checks only the listed `(input, element)` coordinates.
pub fn check_gradients_at<F>(
    inputs: &[Tensor<f64>],
    f: F,
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad()))
        .collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
        checked: 0,
    };
    for &(i, j) in coords {
        let analytic = g.grad(vars[i]).map(|gr| gr[j]).unwrap_or(0.0);
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let plus = eval(&work, &f)?;
        work[i].data_mut()[j] = orig - h;
        let minus = eval(&work, &f)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = Some((i, j));
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
        report.checked += 1;
    }
    Ok(report)
}
