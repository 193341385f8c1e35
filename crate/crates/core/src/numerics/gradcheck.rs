//! Central-difference gradient oracle.

use super::params::{Bound, ParamStore};
use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Denominator floor so near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

pub const DEFAULT_STEP: f64 = 1e-5;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval(f: &impl Fn(&Graph, Var) -> Result<Var>, x: &Tensor) -> Result<f64> {
    let g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&g, v)?;
    Ok(g.value(out).data()[0])
}

/// Max relative error between the backward gradient of the scalar `f` at
/// `x` and central differences with step `h`.
pub fn finite_diff_check(f: impl Fn(&Graph, Var) -> Result<Var>, x: &Tensor, h: f64) -> Result<f64> {
    let g = Graph::new();
    let v = g.leaf(x.clone());
    let out = f(&g, v)?;
    g.backward(out)?;
    let analytic = g.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&f, &plus)? - eval(&f, &minus)?) / (2.0 * h);
        worst = worst.max(rel_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// [`finite_diff_check`] over every element of every tensor in `params`.
pub fn param_grad_check(
    f: impl Fn(&Graph, &Bound) -> Result<Var>,
    params: &ParamStore,
    h: f64,
) -> Result<f64> {
    let g = Graph::new();
    let bound = params.bind(&g, true);
    let out = f(&g, &bound)?;
    g.backward(out)?;
    let grads = bound.grads(&g);

    let eval = |p: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        let b = p.bind(&g, false);
        let out = f(&g, &b)?;
        Ok(g.value(out).data()[0])
    };
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        for i in 0..t.len() {
            let orig = t.data()[i];
            probe.get_mut(name).expect("present").data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_error(grads[name].data()[i], numeric));
        }
    }
    Ok(worst)
}
