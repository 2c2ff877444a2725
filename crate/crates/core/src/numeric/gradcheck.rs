use crate::error::{Error, Result};

use super::{Matrix, ParamStore};

/// Central-difference estimate of the gradient of `loss` with respect to
/// every scalar in `params`, returned in declaration order.
pub fn finite_diff_grad<F>(mut loss: F, params: &ParamStore, eps: f64) -> Result<Vec<Matrix>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite difference step {eps} must be positive")));
    }
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for id in params.ids() {
        let mut g = Matrix::zeros(params.value(id).rows(), params.value(id).cols());
        for k in 0..g.len() {
            let original = work.value(id).as_slice()[k];
            work.value_mut(id).as_mut_slice()[k] = original + eps;
            let up = loss(&work)?;
            work.value_mut(id).as_mut_slice()[k] = original - eps;
            let down = loss(&work)?;
            work.value_mut(id).as_mut_slice()[k] = original;
            g.as_mut_slice()[k] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest coordinate-wise relative error between an analytic and a
/// numeric gradient, `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &[Matrix], numeric: &[Matrix], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.as_slice().iter().zip(n.as_slice()))
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let mut p = ParamStore::new();
        let id = p.add("p", Matrix::filled(1, 1, 3.0));
        let g = finite_diff_grad(|s| Ok(s.value(id)[(0, 0)].powi(2)), &p, 1e-5).unwrap();
        assert!((g[0][(0, 0)] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function() {
        let mut p = ParamStore::new();
        p.add("p", Matrix::filled(2, 3, 1.5));
        let g = finite_diff_grad(|_| Ok(4.2), &p, 1e-5).unwrap();
        assert!(g[0].max_abs() < 1e-9);
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = ParamStore::new();
        assert!(finite_diff_grad(|_| Ok(0.0), &p, 0.0).is_err());
    }
}
