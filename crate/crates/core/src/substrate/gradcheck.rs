//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{SubstrateError, Tape, Tensor, Var};

const DENOM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("non-finite value while perturbing parameter {param} element {element}")]
    NonFinite { param: usize, element: usize },
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many elements per parameter, sampled without
    /// replacement. `None` checks every element.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_p |a_p - n_p| / (|a_p| + |n_p| + 1e-12)` with `|.|` the L2 norm
    /// over the checked elements of parameter `p`.
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub per_param: Vec<f64>,
    /// Largest single-element absolute discrepancy: (param, element, analytic, numeric).
    pub worst_element: (usize, usize, f64, f64),
    pub elements_checked: usize,
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with the given step, checking every element.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], step: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, SubstrateError>,
{
    grad_check_with(
        f,
        params,
        &GradCheckOptions {
            step,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(
    f: F,
    params: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, SubstrateError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let root = f(&mut tape, &vars)?;
    if !tape.value(root)[0].is_finite() {
        return Err(GradCheckError::NonFinite {
            param: 0,
            element: usize::MAX,
        });
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let eval = |params: &[Tensor<f64>]| -> Result<f64, SubstrateError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p)).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root)[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut worst_element = (0, 0, 0.0, 0.0);
    let mut worst_abs = -1.0;
    let mut elements_checked = 0;
    for p in 0..params.len() {
        let n = params[p].len();
        let elems: Vec<usize> = match opts.max_elements {
            Some(limit) if limit < n => sample(&mut rng, n, limit).into_vec(),
            _ => (0..n).collect(),
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for e in elems {
            let orig = work[p].data()[e];
            work[p].data_mut()[e] = orig + opts.step;
            let plus = eval(&work)?;
            work[p].data_mut()[e] = orig - opts.step;
            let minus = eval(&work)?;
            work[p].data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(GradCheckError::NonFinite {
                    param: p,
                    element: e,
                });
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[p][e];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            if (a - numeric).abs() > worst_abs {
                worst_abs = (a - numeric).abs();
                worst_element = (p, e, a, numeric);
            }
            elements_checked += 1;
        }
        per_param.push(diff2.sqrt() / (a2.sqrt() + n2.sqrt() + DENOM_FLOOR));
    }
    let (worst_param, max_rel_error) = per_param
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, r)| if r > best.1 { (i, r) } else { best });
    Ok(GradCheckReport {
        max_rel_error,
        worst_param,
        per_param,
        worst_element,
        elements_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let report = grad_check(|t, v| Ok(t.mul(v[0], v[0])?), &[x], 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn layer_norm_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![
            random(vec![3, 6], &mut rng),
            random(vec![6], &mut rng),
            random(vec![6], &mut rng),
            random(vec![3, 6], &mut rng),
        ];
        // A plain sum of a normalised row is constant in x, so weight it.
        let report = grad_check(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                let w = t.mul(y, v[3])?;
                Ok(t.sum(w))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        let plain = grad_check(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                Ok(t.sum(y))
            },
            &params[..3],
            1e-5,
        )
        .unwrap();
        assert!(plain.max_rel_error < 1e-7, "{plain:?}");
    }

    #[test]
    fn non_finite_is_reported_with_index() {
        let x = Tensor::new(vec![2], vec![1.0, 1e308]).unwrap();
        let err = grad_check(
            |t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.sum(y))
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, GradCheckError::NonFinite { param: 0, .. }), "{err}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![
            random(vec![2, 4], &mut rng),
            random(vec![4], &mut rng),
            random(vec![4], &mut rng),
            random(vec![2, 4], &mut rng),
        ];
        let report = grad_check(
            |t, v| {
                t.inject_backward_fault(1.5);
                let y = t.layer_norm(v[0], v[1], v[2])?;
                let w = t.mul(y, v[3])?;
                Ok(t.sum(w))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-2);
        assert_eq!(report.worst_param, 0);
    }
}
