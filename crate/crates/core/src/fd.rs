//! Central finite differences: the independent gradient oracle used to
//! validate every analytic backward rule. Deliberately only ever calls the
//! forward path.

use crate::model::ParamStore;
use crate::tensor::{Result, Tensor, TensorError};

/// Central-difference gradient of a scalar function over a flat vector.
pub fn finite_diff_vec(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    assert!(h > 0.0, "step size must be positive");
    let mut work = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work)?;
        work[i] = orig - h;
        let fm = f(&work)?;
        work[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFiniteProbe);
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Central-difference gradient of a scalar function of a parameter store,
/// one tensor per registry entry.
pub fn finite_diff_grad(
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
    w: &ParamStore,
    h: f64,
) -> Result<Vec<Tensor>> {
    assert!(h > 0.0, "step size must be positive");
    let mut work = w.clone();
    let mut grads = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let shape = w.tensor(i).shape().to_vec();
        let n = w.tensor(i).numel();
        let mut g = vec![0.0; n];
        for j in 0..n {
            let orig = work.tensor(i).data()[j];
            work.tensor_mut(i).data_mut()[j] = orig + h;
            let fp = f(&work)?;
            work.tensor_mut(i).data_mut()[j] = orig - h;
            let fm = f(&work)?;
            work.tensor_mut(i).data_mut()[j] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(TensorError::NonFiniteProbe);
            }
            g[j] = (fp - fm) / (2.0 * h);
        }
        grads.push(Tensor::new(shape, g)?);
    }
    Ok(grads)
}

/// Relative error with a unit floor, the standard gradient-check distance:
/// exact relative error for large entries, absolute for small ones.
pub fn grad_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Activation, ModelSpec};

    #[test]
    fn quadratic_gradient_is_exact_to_roundoff() {
        let g = finite_diff_vec(|x| Ok(x[0] * x[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9, "{}", g[0]);
    }

    #[test]
    fn central_difference_at_abs_kink_is_zero() {
        let g = finite_diff_vec(|x| Ok(x[0].abs()), &[0.0], 1e-5).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn polynomial_matches_symbolic_gradient() {
        // f(a,b,c) = a^2 b + 3 b c^3 - 2 a c;  df/da = 2ab - 2c,
        // df/db = a^2 + 3c^3, df/dc = 9bc^2 - 2a.
        let at = [1.3, -0.7, 0.9];
        let f = |x: &[f64]| {
            Ok(x[0] * x[0] * x[1] + 3.0 * x[1] * x[2] * x[2] * x[2] - 2.0 * x[0] * x[2])
        };
        let g = finite_diff_vec(f, &at, 1e-5).unwrap();
        let (a, b, c) = (at[0], at[1], at[2]);
        let expect = [2.0 * a * b - 2.0 * c, a * a + 3.0 * c * c * c, 9.0 * b * c * c - 2.0 * a];
        for (got, want) in g.iter().zip(expect) {
            assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        }
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let f = |x: &[f64]| Ok(1.0 / (x[0] - 1.0));
        // Central difference probes x = 1 exactly at h = distance to pole.
        let r = finite_diff_vec(f, &[0.99999], 1e-5);
        assert!(r.is_err());
    }

    #[test]
    fn param_store_variant_matches_flat_variant() {
        let ps = build_model(&ModelSpec::Mlp {
            in_dim: 2,
            hidden: vec![3],
            n_classes: 2,
            activation: Activation::Tanh,
            init_seed: 4,
        })
        .unwrap();
        let f_ps = |w: &ParamStore| Ok(w.to_flat().iter().map(|v| v * v).sum::<f64>() / 2.0);
        let f_flat = |x: &[f64]| Ok(x.iter().map(|v| v * v).sum::<f64>() / 2.0);
        let gs = finite_diff_grad(f_ps, &ps, 1e-5).unwrap();
        let gv = finite_diff_vec(f_flat, &ps.to_flat(), 1e-5).unwrap();
        let flat_gs: Vec<f64> = gs.iter().flat_map(|t| t.data().to_vec()).collect();
        assert!(grad_rel_error(&flat_gs, &gv) < 1e-12);
        // And both equal w itself for this function.
        assert!(grad_rel_error(&flat_gs, &ps.to_flat()) < 1e-9);
    }
}
