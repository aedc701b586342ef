use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(tensor index, element index, analytic, numeric)` for every sampled coordinate.
    pub samples: Vec<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients with central differences at `samples`
/// randomly drawn coordinates.
///
/// `loss_fn` receives a fresh graph with `params` already bound (in order)
/// and must return a scalar loss node. The relative error of a coordinate is
/// `|a - n| / (|a| + |n| + 1e-8)`.
pub fn grad_check<T, F>(
    params: &mut [Tensor<T>],
    mut loss_fn: F,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("grad_check: step must be positive, got {h}")));
    }
    fn eval<T: Real, F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var>>(params: &[Tensor<T>], f: &mut F) -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let l = f(&mut g, &vars)?;
        Ok(g.scalar(l).f64())
    }

    let base = eval(params, &mut loss_fn)?;
    if eval(params, &mut loss_fn)?.to_bits() != base.to_bits() {
        return Err(Error::Usage("grad_check: loss function is not deterministic".into()));
    }

    let analytic: Vec<Option<Vec<T>>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let l = loss_fn(&mut g, &vars)?;
        g.backward(l)?;
        vars.iter().map(|&v| g.grad(v).map(|s| s.to_vec())).collect()
    };

    let candidates: Vec<usize> = (0..params.len()).filter(|&i| params[i].requires_grad()).collect();
    if candidates.is_empty() {
        return Err(Error::config("grad_check: no parameter requires a gradient"));
    }
    let total: usize = candidates.iter().map(|&i| params[i].numel()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut ti = candidates[0];
        for &c in &candidates {
            if flat < params[c].numel() {
                ti = c;
                break;
            }
            flat -= params[c].numel();
        }
        let orig = params[ti].data()[flat];
        params[ti].data_mut()[flat] = orig + T::of(h);
        let plus = eval(params, &mut loss_fn)?;
        params[ti].data_mut()[flat] = orig - T::of(h);
        let minus = eval(params, &mut loss_fn)?;
        params[ti].data_mut()[flat] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[ti].as_ref().map_or(0.0, |g| g[flat].f64());
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
        worst = worst.max(rel);
        out.push((ti, flat, a, numeric));
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        samples: out,
    })
}
