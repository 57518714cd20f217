//! Analytic gradients of scalar functions of parameter blocks, and the
//! central-difference oracle used to check them.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Scalar value and one gradient block per parameter block.
#[derive(Clone, Debug, Serialize)]
pub struct GradResult {
    pub value: f64,
    pub grads: Vec<Matrix>,
}

impl GradResult {
    pub fn flat(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|g| g.as_slice().iter().copied()).collect()
    }
}

/// Evaluates `loss_fn` on a fresh graph and returns the scalar value.
pub fn eval<F>(loss_fn: &F, params: &[Matrix]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = loss_fn(&mut g, &vars)?;
    let v = g.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::Construction(format!(
            "loss must be scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Reverse-mode gradient of `loss_fn` with respect to every block of `params`.
pub fn grad<F>(loss_fn: &F, params: &[Matrix]) -> Result<GradResult>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = loss_fn(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let value = g.value(out).item();
    let grads: Vec<Matrix> = vars.iter().map(|&v| grads.get(v)).collect();
    if grads.iter().any(|m| !m.is_finite()) {
        return Err(Error::Input("non-finite gradient".into()));
    }
    Ok(GradResult { value, grads })
}

/// Central differences `(L(θ+εe) − L(θ−εe)) / 2ε` for every coordinate.
pub fn fd_grad<F>(loss_fn: &F, params: &[Matrix], eps: f64) -> Result<GradResult>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    fd_grad_with(|p: &[Matrix]| eval(loss_fn, p), params, eps)
}

/// Central differences of an arbitrary scalar function of parameter blocks.
pub fn fd_grad_with<F>(f: F, params: &[Matrix], eps: f64) -> Result<GradResult>
where
    F: Fn(&[Matrix]) -> Result<f64>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Input(format!("fd eps {eps} outside (0, 1e-2]")));
    }
    let value = f(params)?;
    if !value.is_finite() {
        return Err(Error::Input("non-finite evaluation".into()));
    }
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for b in 0..params.len() {
        let mut gb = Matrix::zeros(params[b].rows(), params[b].cols());
        for k in 0..params[b].len() {
            let orig = params[b].as_slice()[k];
            work[b].as_mut_slice()[k] = orig + eps;
            let plus = f(&work)?;
            work[b].as_mut_slice()[k] = orig - eps;
            let minus = f(&work)?;
            work[b].as_mut_slice()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Input("non-finite evaluation".into()));
            }
            gb.as_mut_slice()[k] = (plus - minus) / (2.0 * eps);
        }
        grads.push(gb);
    }
    Ok(GradResult { value, grads })
}

/// `max_i |a_i − f_i| / (|f_i| + 1e-8)` over all blocks.
pub fn max_relative_error(analytic: &GradResult, numeric: &GradResult) -> f64 {
    analytic
        .grads
        .iter()
        .zip(&numeric.grads)
        .flat_map(|(a, f)| a.as_slice().iter().zip(f.as_slice()))
        .map(|(a, f)| (a - f).abs() / (f.abs() + 1e-8))
        .fold(0.0, f64::max)
}
