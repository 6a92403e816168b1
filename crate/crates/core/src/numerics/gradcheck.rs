//! Finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GradMap, Graph, NumericsError, ParamMap, Tensor, Var};

/// Denominator floor for relative errors; gradients smaller than this are
/// compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// A scalar objective over a parameter map.
pub trait Objective {
    fn value(&self, params: &ParamMap) -> Result<f64, NumericsError>;
    fn value_and_grad(&self, params: &ParamMap) -> Result<(f64, GradMap), NumericsError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub max_rel_error: f64,
    /// Parameter key and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of `objective` with central differences
/// `(f(w+h) − f(w−h)) / 2h` on `samples` coordinates drawn uniformly from
/// all parameters. Parameters are restored before returning.
pub fn grad_check<O: Objective + ?Sized>(
    objective: &O,
    params: &mut ParamMap,
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport, NumericsError> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(NumericsError::InvalidArgument(format!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        )));
    }
    let (loss, analytic) = objective.value_and_grad(params)?;
    if !loss.is_finite() {
        return Err(NumericsError::NonFinite {
            context: "grad_check base loss".into(),
        });
    }
    let keys: Vec<String> = params.keys().cloned().collect();
    let sizes: Vec<usize> = keys.iter().map(|k| params[k].len()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Ok(GradCheckReport {
            loss,
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        loss,
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        let key = &keys[k];
        let original = params[key].data()[flat];

        params.get_mut(key).unwrap().data_mut()[flat] = original + h;
        let plus = objective.value(params);
        params.get_mut(key).unwrap().data_mut()[flat] = original - h;
        let minus = objective.value(params);
        params.get_mut(key).unwrap().data_mut()[flat] = original;
        let (plus, minus) = (plus?, minus?);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::NonFinite {
                context: format!("grad_check at {key}[{flat}]"),
            });
        }

        let numeric = (plus - minus) / (2.0 * h);
        let analytic_v = analytic.get(key).map_or(0.0, |g| g[flat]);
        let err = relative_error(analytic_v, numeric, REL_ERR_FLOOR);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((key.clone(), flat));
        }
    }
    Ok(report)
}

/// Checks every input coordinate of a graph-built scalar function against
/// the five-point central stencil
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`. Returns the worst
/// relative error (denominator floored at [`REL_ERR_FLOOR`]).
pub fn check_op_gradients<F>(inputs: &[Tensor], build: F, h: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |ins: &[Tensor]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            let mut at = |offset: f64| -> Result<f64, NumericsError> {
                work[i].data_mut()[j] = orig + offset;
                eval(&work)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            work[i].data_mut()[j] = orig;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            worst = worst.max(relative_error(analytic[j], numeric, REL_ERR_FLOOR));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumOfSquares;

    impl Objective for SumOfSquares {
        fn value(&self, params: &ParamMap) -> Result<f64, NumericsError> {
            Ok(params.values().flat_map(|t| t.data()).map(|v| v * v).sum())
        }

        fn value_and_grad(&self, params: &ParamMap) -> Result<(f64, GradMap), NumericsError> {
            let grads = params
                .iter()
                .map(|(k, t)| (k.clone(), t.data().iter().map(|v| 2.0 * v).collect()))
                .collect();
            Ok((self.value(params)?, grads))
        }
    }

    #[test]
    fn sum_of_squares_matches_analytic() {
        let mut params = ParamMap::new();
        params.insert("a".into(), Tensor::vector(vec![0.3, -1.2, 2.5]));
        params.insert("b".into(), Tensor::vector(vec![4.0, -0.7]));
        let report = grad_check(&SumOfSquares, &mut params, 50, 1e-5, 7).unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 50);
        assert_eq!(params["a"].data(), &[0.3, -1.2, 2.5]);
    }

    #[test]
    fn rejects_step_out_of_range() {
        let mut params = ParamMap::new();
        assert!(grad_check(&SumOfSquares, &mut params, 1, 1e-3, 0).is_err());
    }

    struct NanObjective;

    impl Objective for NanObjective {
        fn value(&self, _: &ParamMap) -> Result<f64, NumericsError> {
            Ok(f64::NAN)
        }
        fn value_and_grad(&self, params: &ParamMap) -> Result<(f64, GradMap), NumericsError> {
            Ok((1.0, params.keys().map(|k| (k.clone(), vec![0.0])).collect()))
        }
    }

    #[test]
    fn non_finite_loss_names_coordinate() {
        let mut params = ParamMap::new();
        params.insert("w".into(), Tensor::scalar(1.0));
        let err = grad_check(&NanObjective, &mut params, 1, 1e-5, 0).unwrap_err();
        assert!(err.to_string().contains("w[0]"), "{err}");
    }
}
