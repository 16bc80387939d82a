use rand::seq::index::sample;

use super::params::ParamStore;
use super::rng::SeedStream;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates_checked: usize,
    pub tensors_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares analytic gradients with central differences.
///
/// `loss` evaluates the objective at the given parameters and must write its
/// analytic gradient into the store's gradient buffers (they are zeroed before
/// each call). Up to `coords_per_tensor` coordinates of every tensor are
/// probed, chosen with `seed`.
pub fn grad_check<F>(
    params: &ParamStore,
    mut loss: F,
    h: f64,
    coords_per_tensor: usize,
    seed: SeedStream,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    let mut base = params.clone();
    base.zero_grads();
    let value = loss(&mut base)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {value}")));
    }
    let analytic = base.clone();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates_checked: 0,
        tensors_checked: 0,
    };
    let mut rng = seed.rng();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.value(&name).len();
        if n == 0 {
            continue;
        }
        report.tensors_checked += 1;
        let picks = sample(&mut rng, n, coords_per_tensor.min(n)).into_vec();
        for k in picks {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut p = base.clone();
                p.value_mut(&name).data_mut()[k] += delta;
                p.zero_grads();
                let v = loss(&mut p)?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite(format!("loss {v} probing {name}[{k}]")))
                }
            };
            let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
            let a = analytic.grad(&name).data()[k];
            let err = relative_error(a, numeric);
            report.coordinates_checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::array::Array;

    fn store(x: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Array::row_vector(vec![x])).unwrap();
        p
    }

    #[test]
    fn square_function() {
        let report = grad_check(
            &store(3.0),
            |p| {
                let x = p.value("x").data()[0];
                p.grad_mut("x").data_mut()[0] = 2.0 * x;
                Ok(x * x)
            },
            1e-5,
            1,
            SeedStream::new(0),
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let report = grad_check(&store(1.5), |_| Ok(4.0), 1e-5, 1, SeedStream::new(0)).unwrap();
        assert_eq!(report.max_relative_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let report = grad_check(
            &store(2.0),
            |p| {
                let x = p.value("x").data()[0];
                p.grad_mut("x").data_mut()[0] = 3.0 * x;
                Ok(x * x)
            },
            1e-5,
            1,
            SeedStream::new(0),
        )
        .unwrap();
        assert!(!report.passes(1e-4));
    }

    #[test]
    fn non_finite_loss_errors() {
        assert!(grad_check(&store(0.0), |_| Ok(f64::NAN), 1e-5, 1, SeedStream::new(0)).is_err());
    }
}
