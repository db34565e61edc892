//! Interventional sampling and counterfactual prediction with a trained flow.
//!
//! Queries target root variables only. The first variable of the flow's
//! ordering is always a root. Callers may declare further roots, provided
//! every variable placed before a declared root is itself a root: a root's
//! conditioner inputs are then other roots, which are either sampled from
//! their own marginals (interventions) or held at observed values
//! (counterfactuals). With the ordering `(x1, x2, x3, x4)` of the toy model
//! and `x2` declared, the `x2` latent computed from `(x1, x2)` is exact
//! because `x1` is observed.
//!
//! Both operations run in the flow's standardized units internally; inputs
//! and outputs are in original data units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{seeded_rng, Stream};
use crate::training::{DataMatrix, FittedFlow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionQuery {
    pub variable: usize,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub declared_roots: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualQuery {
    pub observed: Vec<f64>,
    pub variable: usize,
    pub value: f64,
    #[serde(default)]
    pub declared_roots: Vec<usize>,
}

/// Checks that `var` may be intervened on under the root rule above.
pub fn check_root(fitted: &FittedFlow, var: usize, declared: &[usize]) -> Result<()> {
    let d = fitted.dim();
    if var >= d {
        return Err(Error::invalid(format!(
            "variable {var} out of range for dimension {d}"
        )));
    }
    let ordering = fitted.flow.ordering();
    let is_root = |v: usize| v == ordering.first() || declared.contains(&v);
    let pos = ordering.position_of(var);
    if is_root(var) && ordering.perm()[..pos].iter().all(|&p| is_root(p)) {
        Ok(())
    } else {
        Err(Error::UnsupportedIntervention { variable: var })
    }
}

/// Samples from the flow's distribution under `do(x_var = value)`.
///
/// The remaining latents are drawn from the base distribution and the pinned
/// variable's latent is its image under its own transform, so each row is
/// `T(n)` with `n_var` fixed.
pub fn intervene(fitted: &FittedFlow, q: &InterventionQuery) -> Result<DataMatrix> {
    check_root(fitted, q.variable, &q.declared_roots)?;
    if q.n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    if !q.value.is_finite() {
        return Err(Error::invalid("intervention value must be finite"));
    }
    let d = fitted.dim();
    let flow = &fitted.flow;
    let pinned = [(q.variable, fitted.scaler.scale_value(q.variable, q.value))];
    let mut rng = seeded_rng(q.seed, Stream::Sampling);
    let mut values = Vec::with_capacity(q.n_samples * d);
    let mut z = vec![0.0; d];
    for _ in 0..q.n_samples {
        for zi in z.iter_mut() {
            *zi = flow.base().sample(&mut rng);
        }
        let (x, _) = flow.inverse_pinned(&z, &pinned)?;
        values.extend(fitted.scaler.unscale_row(&x));
    }
    DataMatrix::from_flat(q.n_samples, d, values)
}

/// Abduction, action, prediction: infer the latents of the observation,
/// replace the latent of `variable` by the image of `value`, map back.
pub fn counterfactual(fitted: &FittedFlow, q: &CounterfactualQuery) -> Result<Vec<f64>> {
    check_root(fitted, q.variable, &q.declared_roots)?;
    if q.observed.len() != fitted.dim() {
        return Err(Error::invalid(format!(
            "observation has {} values, flow dimension is {}",
            q.observed.len(),
            fitted.dim()
        )));
    }
    if q.observed.iter().any(|v| !v.is_finite()) || !q.value.is_finite() {
        return Err(Error::invalid("observation and value must be finite"));
    }
    let latent = abduct(fitted, &q.observed)?;
    let pinned = [(q.variable, fitted.scaler.scale_value(q.variable, q.value))];
    let (x, _) = fitted.flow.inverse_pinned(&latent, &pinned)?;
    Ok(fitted.scaler.unscale_row(&x))
}

/// Latent vector of an observation (original units).
pub fn abduct(fitted: &FittedFlow, observed: &[f64]) -> Result<Vec<f64>> {
    Ok(fitted.flow.forward(&fitted.scaler.scale_row(observed))?.z)
}

/// Column means of interventional samples for every value in `grid`.
pub fn intervention_sweep(
    fitted: &FittedFlow,
    variable: usize,
    grid: &[f64],
    n_samples: usize,
    seed: u64,
    declared_roots: &[usize],
) -> Result<Vec<(f64, Vec<f64>)>> {
    grid.iter()
        .map(|&alpha| {
            let q = InterventionQuery {
                variable,
                value: alpha,
                n_samples,
                seed,
                declared_roots: declared_roots.to_vec(),
            };
            let samples = intervene(fitted, &q)?;
            let n = samples.n_rows() as f64;
            let means = (0..samples.n_cols())
                .map(|j| samples.rows().map(|r| r[j]).sum::<f64>() / n)
                .collect();
            Ok((alpha, means))
        })
        .collect()
}

/// Counterfactual predictions for every value in `grid`.
pub fn counterfactual_sweep(
    fitted: &FittedFlow,
    observed: &[f64],
    variable: usize,
    grid: &[f64],
    declared_roots: &[usize],
) -> Result<Vec<(f64, Vec<f64>)>> {
    grid.iter()
        .map(|&alpha| {
            let q = CounterfactualQuery {
                observed: observed.to_vec(),
                variable,
                value: alpha,
                declared_roots: declared_roots.to_vec(),
            };
            Ok((alpha, counterfactual(fitted, &q)?))
        })
        .collect()
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}
