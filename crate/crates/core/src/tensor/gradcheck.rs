use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::TensorError;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Failure threshold on the relative error.
    pub tol: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many coordinates (sampled without replacement).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-6,
            abs_floor: 1e-7,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` builds the scalar on a fresh graph from leaves holding `params`.
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, abs_floor)`.
pub fn grad_check<F, E>(
    mut f: F,
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    // Analytic pass.
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if !g.value(out).item().is_finite() {
            return Err(TensorError::NonFinite("grad_check objective".into()).into());
        }
        let mut grads = g.backward(out)?;
        vars.iter()
            .zip(params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    };

    let mut eval = |values: &[Tensor]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite("grad_check objective".into()).into());
        }
        Ok(v)
    };

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |e| (pi, e)))
        .collect();
    let chosen: Vec<(usize, usize)> = match opts.max_coords {
        Some(n) if n < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, coords.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let mut work = params.to_vec();
    let mut max_rel = 0.0;
    let mut worst = None;
    for &(pi, e) in &chosen {
        let orig = work[pi].data()[e];
        work[pi].data_mut()[e] = orig + opts.eps;
        let plus = eval(&work)?;
        work[pi].data_mut()[e] = orig - opts.eps;
        let minus = eval(&work)?;
        work[pi].data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic[pi].data()[e];
        let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel || worst.is_none() {
            max_rel = rel;
            worst = Some((pi, e));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        checked: chosen.len(),
        passed: max_rel <= opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let rep = grad_check::<_, TensorError>(
            |g, v| g.mul(v[0], v[0]),
            &[Tensor::scalar(3.0)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-9, "{rep:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let rep = grad_check::<_, TensorError>(
            |g, _| Ok(g.constant(Tensor::scalar(4.2))),
            &[Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0])],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
        assert!(rep.passed);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let res = grad_check::<_, TensorError>(
            |g, v| {
                let l = g.scale(v[0], f64::INFINITY);
                Ok(g.sum(l))
            },
            &[Tensor::scalar(1.0)],
            &GradCheckOptions::default(),
        );
        assert!(matches!(res, Err(TensorError::NonFinite(_))));
    }
}
