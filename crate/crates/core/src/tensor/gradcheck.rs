//! Central finite-difference verification of analytic gradients.
//!
//! The function under test is reduced to a scalar by a fixed random
//! projection `sum(R * f(inputs))`, so a single backward pass checks a full
//! vector-Jacobian product. Numeric derivatives only use forward evaluation.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Upper bound on perturbed elements per input (sampled without replacement).
    pub max_elems: usize,
    /// Multiplies analytic gradients by `1 + corrupt`; nonzero only when
    /// demonstrating that the harness catches a broken kernel.
    pub corrupt: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-6,
            max_elems: 64,
            corrupt: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Norm-wise relative error per input: |a - n| / max(|a|, |n|).
    pub rel_err: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().cloned().fold(0.0, f64::max)
    }
}

fn projected(
    f: &dyn Fn(&Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    proj: &Tensor,
) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = g.value(f(&g, &vars)?);
    Ok(out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
}

/// Compares analytic gradients of `f` with central differences.
pub fn check(
    f: &dyn Fn(&Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    seed: u64,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let out_shape = g.shape(out);
    let proj = Tensor::from_fn(&out_shape, |_| rng.gen_range(-1.0..1.0));
    let mut grads = g.backward_with(out, proj.clone())?;

    let mut rel_err = Vec::with_capacity(inputs.len());
    for (idx, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let picks: Vec<usize> = if input.numel() <= cfg.max_elems {
            (0..input.numel()).collect()
        } else {
            sample(&mut rng, input.numel(), cfg.max_elems).into_vec()
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let mut perturbed = inputs.to_vec();
        for e in picks {
            let x0 = input.data()[e];
            perturbed[idx].data_mut()[e] = x0 + cfg.eps;
            let fp = projected(f, &perturbed, &proj)?;
            perturbed[idx].data_mut()[e] = x0 - cfg.eps;
            let fm = projected(f, &perturbed, &proj)?;
            perturbed[idx].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = analytic.data()[e] * (1.0 + cfg.corrupt);
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        rel_err.push(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom });
    }
    Ok(GradCheckReport { rel_err })
}
