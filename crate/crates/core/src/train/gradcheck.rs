//! Central finite-difference gradient checking.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{ParamStore, Tensor};
use crate::seed;

/// Denominator floor for the relative error. Some gradients are exactly
/// zero (attention key biases cancel in the softmax) while a central
/// difference at `eps = 1e-5` carries roundoff near `1e-11`; below the
/// floor the comparison is effectively absolute.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    /// Errors with the offending coordinates when any exceeds `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        let bad: Vec<String> = self
            .coords
            .iter()
            .filter(|c| !(c.rel_error < tol))
            .map(|c| {
                format!(
                    "{}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                    c.param, c.index, c.analytic, c.numeric, c.rel_error
                )
            })
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("gradient check failed:\n{}", bad.join("\n"))))
        }
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Checks the given `(param, element)` coordinates.
pub fn grad_check_coords<F>(f: F, params: &ParamStore<f64>, coords: &[(usize, usize)], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    let (_, grads) = f(params)?;
    let mut work = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &(p, k) in coords {
        let orig = work.value(p).data[k];
        work.value_mut(p).data[k] = orig + eps;
        let (up, _) = f(&work)?;
        work.value_mut(p).data[k] = orig - eps;
        let (down, _) = f(&work)?;
        work.value_mut(p).data[k] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads[p].data[k];
        out.push(CoordCheck {
            param: params.get(p).name.clone(),
            index: k,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    let max_rel_error = out.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        coords: out,
    })
}

/// Samples `num_coords` coordinates (tensor uniformly, then element
/// uniformly) and compares analytic to central-difference gradients.
pub fn grad_check<F>(f: F, params: &ParamStore<f64>, num_coords: usize, eps: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    let mut rng = seed::rng(seed, &["grad-check"]);
    let coords: Vec<(usize, usize)> = (0..num_coords)
        .map(|_| {
            let p = rng.random_range(0..params.len());
            let k = rng.random_range(0..params.value(p).len());
            (p, k)
        })
        .collect();
    grad_check_coords(f, params, &coords, eps)
}
