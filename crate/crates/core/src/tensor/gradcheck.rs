//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of checking one input of a function.
#[derive(Clone, Debug)]
pub struct InputCheck {
    pub input: usize,
    pub entries: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over the checked entries.
    pub rel_err: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    /// Entries probed per input; larger inputs are subsampled.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions { step: 1e-3, max_entries: 64, seed: 0 }
    }
}

/// Norm-wise relative error with an absolute floor for vanishing gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Compares the gradient of the scalar produced by `f` against central
/// differences, for every input tensor.
///
/// `f` must rebuild the whole computation from the supplied leaves; it is
/// called once for the analytic pass and twice per probed entry.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], opts: FdOptions, f: F) -> Result<Vec<InputCheck>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &leaves)?;
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = inputs.to_vec();
    let mut report = Vec::with_capacity(inputs.len());
    for (i, &leaf) in leaves.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic_full = grads.get(leaf).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let idx: Vec<usize> = if n <= opts.max_entries {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.max_entries).into_vec();
            v.sort_unstable();
            v
        };
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * opts.step));
            analytic.push(analytic_full[j]);
        }
        report.push(InputCheck { input: i, entries: idx.len(), rel_err: relative_error(&analytic, &numeric) });
    }
    Ok(report)
}

/// Reduces `y` to a scalar `Σ r ⊙ y` with a fixed random weighting `r`, so
/// that every output element contributes a distinct adjoint.
pub fn random_projection(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r = g.constant(Tensor::randn(g.shape(y), 1.0, &mut rng));
    let p = g.mul(y, r)?;
    g.sum(p)
}
