//! Ground-truth structural equation models used to generate synthetic data
//! and to compute exact interventional and counterfactual answers.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discovery::Direction;
use crate::error::{Error, Result};
use crate::noise::{self, seeded_rng, Stream};
use crate::training::DataMatrix;

/// Unit-scale noise family of a structural equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Laplace,
    Gaussian,
}

impl NoiseKind {
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            NoiseKind::Laplace => noise::standard_laplace(rng),
            NoiseKind::Gaussian => noise::standard_normal(rng),
        }
    }
}

/// `x_j = f(values, n_j)`, where `values` is indexed by variable and only the
/// entries of variables earlier in the ordering are meaningful.
pub type Mechanism = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;

/// An executable set of structural equations over `d` variables.
#[derive(Clone)]
pub struct SemSpec {
    ordering: Vec<usize>,
    mechanisms: Vec<Mechanism>,
    noise: Vec<NoiseKind>,
}

impl fmt::Debug for SemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SemSpec")
            .field("ordering", &self.ordering)
            .field("noise", &self.noise)
            .finish_non_exhaustive()
    }
}

impl SemSpec {
    /// `mechanisms[j]` defines variable `j`; `ordering` must be a topological
    /// order, which the caller guarantees by only reading predecessors.
    pub fn new(
        ordering: Vec<usize>,
        mechanisms: Vec<Mechanism>,
        noise: Vec<NoiseKind>,
    ) -> Result<Self> {
        let d = mechanisms.len();
        crate::flow::Ordering::new(ordering.clone())?;
        if ordering.len() != d || noise.len() != d {
            return Err(Error::invalid(
                "ordering, mechanisms and noises must have equal length",
            ));
        }
        Ok(SemSpec {
            ordering,
            mechanisms,
            noise,
        })
    }

    pub fn dim(&self) -> usize {
        self.mechanisms.len()
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    /// Propagates a noise vector through the equations, optionally replacing
    /// one equation by a constant.
    pub fn simulate(&self, noises: &[f64], intervention: Option<(usize, f64)>) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        for &j in &self.ordering {
            x[j] = match intervention {
                Some((v, a)) if v == j => a,
                _ => (self.mechanisms[j])(&x, noises[j]),
            };
        }
        x
    }

    fn draw_noises<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.noise.iter().map(|k| k.sample(rng)).collect()
    }

    /// `n` observational samples.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DataMatrix> {
        self.sample_with(n, None, rng)
    }

    /// `n` samples from the mutilated model under `do(x_var = value)`.
    pub fn sample_do<R: Rng + ?Sized>(
        &self,
        var: usize,
        value: f64,
        n: usize,
        rng: &mut R,
    ) -> Result<DataMatrix> {
        if var >= self.dim() {
            return Err(Error::invalid(format!("variable {var} out of range")));
        }
        self.sample_with(n, Some((var, value)), rng)
    }

    fn sample_with<R: Rng + ?Sized>(
        &self,
        n: usize,
        iv: Option<(usize, f64)>,
        rng: &mut R,
    ) -> Result<DataMatrix> {
        if n == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let d = self.dim();
        let mut values = Vec::with_capacity(n * d);
        for _ in 0..n {
            let noises = self.draw_noises(rng);
            values.extend(self.simulate(&noises, iv));
        }
        DataMatrix::from_flat(n, d, values)
    }
}

/// `n` i.i.d. draws from the zero-location, unit-scale Laplace distribution.
pub fn sample_laplace<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| noise::standard_laplace(rng)).collect()
}

pub fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Mechanism family of the synthetic cause-effect pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BivariateKind {
    /// `alpha * x + n`
    Linear,
    /// `x + alpha * x^3 + n`
    CubicNonlinear,
    /// `sigmoid(sigmoid(alpha * x) + n)`
    NeuralNet,
}

impl BivariateKind {
    pub const ALL: [BivariateKind; 3] = [
        BivariateKind::Linear,
        BivariateKind::CubicNonlinear,
        BivariateKind::NeuralNet,
    ];

    pub fn effect(self, alpha: f64, cause: f64, noise: f64) -> f64 {
        match self {
            BivariateKind::Linear => alpha * cause + noise,
            BivariateKind::CubicNonlinear => cause + alpha * cause.powi(3) + noise,
            BivariateKind::NeuralNet => sigmoid(sigmoid(alpha * cause) + noise),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BivariateKind::Linear => "linear",
            BivariateKind::CubicNonlinear => "cubic",
            BivariateKind::NeuralNet => "neural_net",
        }
    }
}

impl std::str::FromStr for BivariateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(BivariateKind::Linear),
            "cubic" | "nonlinear" | "cubic_nonlinear" => Ok(BivariateKind::CubicNonlinear),
            "neural_net" | "neural-net" | "nn" => Ok(BivariateKind::NeuralNet),
            other => Err(Error::invalid(format!("unknown mechanism kind {other:?}"))),
        }
    }
}

/// A generated pair with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct BivariateSample {
    pub data: DataMatrix,
    pub truth: Direction,
    pub kind: BivariateKind,
    pub alpha: f64,
}

/// Cause drawn as pure noise, effect through `kind`. For
/// [`Direction::Backward`] the cause is placed in the second column.
pub fn generate_bivariate<R: Rng + ?Sized>(
    kind: BivariateKind,
    alpha: f64,
    n: usize,
    direction: Direction,
    rng: &mut R,
) -> Result<BivariateSample> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if !alpha.is_finite() {
        return Err(Error::invalid("alpha must be finite"));
    }
    let cause = sample_laplace(n, rng);
    let effect: Vec<f64> = cause
        .iter()
        .map(|&c| kind.effect(alpha, c, noise::standard_laplace(rng)))
        .collect();
    let data = match direction {
        Direction::Forward => DataMatrix::from_columns(&[&cause, &effect])?,
        Direction::Backward => DataMatrix::from_columns(&[&effect, &cause])?,
    };
    Ok(BivariateSample {
        data,
        truth: direction,
        kind,
        alpha,
    })
}

/// Coefficient drawn uniformly from `[-1.5, -0.5] U [0.5, 1.5]`.
pub fn draw_alpha<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let mag = rng.random_range(0.5..=1.5);
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

/// One repetition of the synthetic protocol: random coefficient, random
/// causal direction, all derived from `seed`.
pub fn simulate_pair(kind: BivariateKind, n: usize, seed: u64) -> Result<BivariateSample> {
    let mut rng = seeded_rng(seed, Stream::Data);
    let alpha = draw_alpha(&mut rng);
    let direction = if rng.random::<bool>() {
        Direction::Forward
    } else {
        Direction::Backward
    };
    generate_bivariate(kind, alpha, n, direction, &mut rng)
}

/// The four-variable model
///
/// ```text
/// x1 = n1                      x3 = x1 + x2^3 / 2 + n3
/// x2 = n2                      x4 = x1^2 / 2 - x2 + n4
/// ```
///
/// with standard Laplace noises; variables are indexed `0..4`.
pub fn toy4_spec() -> SemSpec {
    let mechanisms: Vec<Mechanism> = vec![
        Arc::new(|_, n| n),
        Arc::new(|_, n| n),
        Arc::new(|x, n| x[0] + 0.5 * x[1].powi(3) + n),
        Arc::new(|x, n| 0.5 * x[0] * x[0] - x[1] + n),
    ];
    SemSpec::new(vec![0, 1, 2, 3], mechanisms, vec![NoiseKind::Laplace; 4])
        .expect("valid toy model")
}

pub fn generate_toy4<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<DataMatrix> {
    toy4_spec().sample(n, rng)?.with_column_names(vec![
        "x1".into(),
        "x2".into(),
        "x3".into(),
        "x4".into(),
    ])
}

/// Noise vector that reproduces the observation `x` under the toy model.
pub fn toy4_noises(x: &[f64; 4]) -> [f64; 4] {
    [
        x[0],
        x[1],
        x[2] - x[0] - 0.5 * x[1].powi(3),
        x[3] - 0.5 * x[0] * x[0] + x[1],
    ]
}

/// `E[x_target | do(x1 = alpha)]` in the toy model, for targets `x3` (index 2)
/// and `x4` (index 3).
pub fn analytic_do_mean(target: usize, alpha: f64) -> Result<f64> {
    match target {
        2 => Ok(alpha),
        3 => Ok(0.5 * alpha * alpha),
        _ => Err(Error::invalid(format!(
            "analytic interventional mean is available for x3 and x4 only (got index {target})"
        ))),
    }
}

/// Exact counterfactual in the toy model: abduct the noises of `x_obs`, set
/// root variable `var` (index 0 or 1) to `alpha`, and re-propagate.
pub fn analytic_counterfactual(x_obs: &[f64; 4], var: usize, alpha: f64) -> Result<[f64; 4]> {
    if var > 1 {
        return Err(Error::invalid(format!(
            "counterfactuals are defined for the root variables x1 and x2 (got index {var})"
        )));
    }
    let n = toy4_noises(x_obs);
    let x = toy4_spec().simulate(&n, Some((var, alpha)));
    Ok([x[0], x[1], x[2], x[3]])
}
