use serde::Serialize;

use super::Matrix;
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_err: f64,
    pub per_param_err: Vec<(String, f64)>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param_err
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-12)` with `|.|` the Euclidean norm of the
/// whole parameter block.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .frobenius_norm()
        .max(numeric.frobenius_norm())
        .max(1e-12);
    diff / scale
}

/// Central-difference gradient of `loss` at `params`.
pub fn numeric_gradient<F>(names: &[String], params: &[Matrix], eps: f64, mut loss: F) -> Result<Vec<Matrix>>
where
    F: FnMut(&[Matrix]) -> f64,
{
    let mut work: Vec<Matrix> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Matrix::zeros(params[p].rows(), params[p].cols());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let up = loss(&work);
            work[p].data_mut()[i] = orig - eps;
            let down = loss(&work);
            work[p].data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss while perturbing parameter '{}' entry {i}",
                    names[p]
                )));
            }
            g.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Checks `analytic` gradients of a scalar `loss` against central
/// differences with step `eps`.
pub fn grad_check<F>(
    op_name: &str,
    named: &[(String, Matrix)],
    analytic: &[Matrix],
    eps: f64,
    mut loss: F,
) -> Result<GradReport>
where
    F: FnMut(&[Matrix]) -> f64,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }
    if named.len() != analytic.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters but {} analytic gradients",
            named.len(),
            analytic.len()
        )));
    }
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let values: Vec<Matrix> = named.iter().map(|(_, v)| v.clone()).collect();
    for ((name, v), a) in named.iter().zip(analytic) {
        if v.shape() != a.shape() {
            return Err(Error::InvalidArgument(format!(
                "gradient of '{name}' has shape {:?}, parameter {:?}",
                a.shape(),
                v.shape()
            )));
        }
    }
    let base = loss(&values);
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss of {op_name} at the unperturbed point")));
    }
    let numeric = numeric_gradient(&names, &values, eps, &mut loss)?;
    let per_param_err: Vec<(String, f64)> = names
        .into_iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|(n, (a, num))| (n, relative_error(a, num)))
        .collect();
    let max_rel_err = per_param_err.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradReport {
        op_name: op_name.to_string(),
        max_rel_err,
        per_param_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_all_ones_gradient() {
        let x = Matrix::from_rows(&[[0.3, -0.2, 0.1], [0.05, 0.4, -0.7]]);
        let analytic = vec![Matrix::filled(2, 3, 1.0)];
        let rep = grad_check("sum", &[("x".into(), x)], &analytic, 1e-5, |p| p[0].sum()).unwrap();
        assert!(rep.max_rel_err < 1e-10, "{rep:?}");
        assert_eq!(rep.per_param_err.len(), 1);
        assert_eq!(rep.max_rel_err, rep.per_param_err[0].1);
    }

    #[test]
    fn non_finite_loss_names_the_parameter() {
        let x = Matrix::from_rows(&[[1.0]]);
        let analytic = vec![Matrix::zeros(1, 1)];
        let err = grad_check("log", &[("weights".into(), x)], &analytic, 1e-5, |p| {
            if p[0].get(0, 0) > 1.0 {
                f64::NAN
            } else {
                0.0
            }
        })
        .unwrap_err();
        assert!(err.to_string().contains("weights"), "{err}");
    }

    #[test]
    fn eps_range_enforced() {
        let x = Matrix::from_rows(&[[1.0]]);
        let a = vec![Matrix::zeros(1, 1)];
        assert!(grad_check("c", &[("x".into(), x.clone())], &a, 1e-2, |_| 0.0).is_err());
        assert!(grad_check("c", &[("x".into(), x)], &a, 1e-9, |_| 0.0).is_err());
    }
}
