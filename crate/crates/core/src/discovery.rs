//! Bivariate causal direction by held-out likelihood ratio.
//!
//! Two flows are trained on one shared train split, one with `x1` first in the
//! ordering and one with `x2` first. The statistic is
//! `R = ll(x1 -> x2) - ll(x2 -> x1)`, both terms being mean log-likelihoods on
//! the same held-out rows. Positive `R` favours `x1` as the cause.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::DatasetPair;
use crate::error::{Error, Result};
use crate::flow::Ordering;
use crate::sem_sim::{simulate_pair, BivariateKind};
use crate::stats;
use crate::training::{evaluate, fit, split_indices, DataMatrix, Scaler, TrainConfig};

/// Ground-truth causal direction between the two columns of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "1->2")]
    Forward,
    #[serde(rename = "2->1")]
    Backward,
}

impl Direction {
    pub fn reversed(self) -> Self {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Forward => "1->2",
            Direction::Backward => "2->1",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    X1CausesX2,
    X2CausesX1,
    Undecided,
}

impl Decision {
    pub fn from_statistic(r: f64, tau: f64) -> Self {
        if r > tau {
            Decision::X1CausesX2
        } else if r < -tau {
            Decision::X2CausesX1
        } else {
            Decision::Undecided
        }
    }

    pub fn direction(self) -> Option<Direction> {
        match self {
            Decision::X1CausesX2 => Some(Direction::Forward),
            Decision::X2CausesX1 => Some(Direction::Backward),
            Decision::Undecided => None,
        }
    }

    /// The decision with the roles of the two columns exchanged.
    pub fn mirrored(self) -> Self {
        match self {
            Decision::X1CausesX2 => Decision::X2CausesX1,
            Decision::X2CausesX1 => Decision::X1CausesX2,
            Decision::Undecided => Decision::Undecided,
        }
    }

    /// Undecided never counts as correct.
    pub fn is_correct(self, truth: Direction) -> bool {
        self.direction() == Some(truth)
    }
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decision::X1CausesX2 => "x1_causes_x2",
            Decision::X2CausesX1 => "x2_causes_x1",
            Decision::Undecided => "undecided",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionOptions {
    pub test_fraction: f64,
    /// Half-width of the band around zero in which `R` is reported as undecided.
    pub tau: f64,
}

impl Default for DirectionOptions {
    fn default() -> Self {
        DirectionOptions {
            test_fraction: 0.5,
            tau: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionResult {
    /// `ll_fwd - ll_rev`.
    pub r: f64,
    /// Mean held-out log-likelihood with ordering `(x1, x2)`.
    pub ll_fwd: f64,
    /// Mean held-out log-likelihood with ordering `(x2, x1)`.
    pub ll_rev: f64,
    pub decision: Decision,
    pub seed: u64,
    pub config: TrainConfig,
    pub options: DirectionOptions,
    /// Rows scored by both models.
    pub test_rows: Vec<usize>,
    pub n_train: usize,
}

/// Decides the causal direction between two equally long columns.
///
/// One seeded split is shared by both candidate models, and both are trained
/// from the same seed; parameters are initialized position by position, so
/// swapping the columns swaps the two fits exactly.
pub fn direction_test(
    x1: &[f64],
    x2: &[f64],
    cfg: &TrainConfig,
    opts: &DirectionOptions,
    seed: u64,
) -> Result<DirectionResult> {
    if x1.len() != x2.len() {
        return Err(Error::invalid("columns have different lengths"));
    }
    if x1.len() < 8 {
        return Err(Error::invalid(format!(
            "direction test needs at least 8 rows, got {}",
            x1.len()
        )));
    }
    let data = DataMatrix::from_columns(&[x1, x2])?;
    // Fails early on constant columns.
    Scaler::fit(&data)?;
    let (train_idx, test_idx) = split_indices(data.n_rows(), opts.test_fraction, seed)?;
    let train = data.select_rows(&train_idx)?;
    let test = data.select_rows(&test_idx)?;

    let cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    let score = |first: usize| -> Result<f64> {
        let (flow, _) = fit(&train, Ordering::bivariate(first), &cfg)?;
        evaluate(&flow, &test)
    };
    let (fwd, rev) = rayon::join(|| score(0), || score(1));
    let (ll_fwd, ll_rev) = (fwd?, rev?);
    let r = ll_fwd - ll_rev;
    if !r.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(DirectionResult {
        r,
        ll_fwd,
        ll_rev,
        decision: Decision::from_statistic(r, opts.tau),
        seed,
        config: cfg,
        options: *opts,
        test_rows: test_idx,
        n_train: train_idx.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub id: String,
    pub truth: Option<Direction>,
    pub weight: Option<f64>,
    pub result: Option<DirectionResult>,
    /// Set when the pair could not be scored; counts as incorrect when labeled.
    pub error: Option<String>,
    pub correct: Option<bool>,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub outcomes: Vec<PairOutcome>,
    pub n_labeled: usize,
    /// Fraction of labeled pairs decided correctly; absent with no labels.
    pub accuracy: Option<f64>,
    /// Same, weighting each labeled pair by its weight (1 when missing).
    pub weighted_accuracy: Option<f64>,
}

/// Runs [`direction_test`] on every pair, in parallel, with seed `seed + i`
/// for pair `i`. Results keep the input order.
pub fn batch_direction_test(
    pairs: &[DatasetPair],
    cfg: &TrainConfig,
    opts: &DirectionOptions,
    seed: u64,
) -> Result<BatchReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to test"));
    }
    let outcomes: Vec<PairOutcome> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let started = Instant::now();
            let res = direction_test(&pair.x1, &pair.x2, cfg, opts, seed.wrapping_add(i as u64));
            let runtime_secs = started.elapsed().as_secs_f64();
            if let Err(e) = &res {
                log::warn!("pair {} failed: {e}", pair.id);
            }
            let correct = pair.truth.map(|t| match &res {
                Ok(r) => r.decision.is_correct(t),
                Err(_) => false,
            });
            let (result, error) = match res {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            PairOutcome {
                id: pair.id.clone(),
                truth: pair.truth,
                weight: pair.weight,
                result,
                error,
                correct,
                runtime_secs,
            }
        })
        .collect();
    Ok(summarize(outcomes))
}

pub(crate) fn summarize(outcomes: Vec<PairOutcome>) -> BatchReport {
    let labeled: Vec<&PairOutcome> = outcomes.iter().filter(|o| o.correct.is_some()).collect();
    let n_labeled = labeled.len();
    let (accuracy, weighted_accuracy) = if n_labeled == 0 {
        (None, None)
    } else {
        let hits = labeled.iter().filter(|o| o.correct == Some(true)).count();
        let w = |o: &&PairOutcome| o.weight.unwrap_or(1.0);
        let total_w: f64 = labeled.iter().map(w).sum();
        let hit_w: f64 = labeled
            .iter()
            .filter(|o| o.correct == Some(true))
            .map(w)
            .sum();
        (
            Some(hits as f64 / n_labeled as f64),
            (total_w > 0.0).then(|| hit_w / total_w),
        )
    };
    BatchReport {
        outcomes,
        n_labeled,
        accuracy,
        weighted_accuracy,
    }
}

/// Accuracy of [`direction_test`] on repeated synthetic pairs of one kind and size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub kind: BivariateKind,
    pub n: usize,
    pub repetitions: usize,
    pub correct: usize,
    pub failed: usize,
    pub accuracy: f64,
    pub ci95: (f64, f64),
    pub mean_runtime_secs: f64,
    pub base_seed: u64,
}

/// Repetition `i` simulates with `simulate_pair(kind, n, base_seed + i)` and
/// tests with the same seed. Failed repetitions count as incorrect.
pub fn simulation_benchmark(
    kind: BivariateKind,
    n: usize,
    repetitions: usize,
    base_seed: u64,
    cfg: &TrainConfig,
    opts: &DirectionOptions,
) -> Result<SimulationSummary> {
    if repetitions == 0 {
        return Err(Error::invalid("repetitions must be at least 1"));
    }
    let runs: Vec<(bool, bool, f64)> = (0..repetitions)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed.wrapping_add(i as u64);
            let started = Instant::now();
            let res = simulate_pair(kind, n, seed).and_then(|s| {
                let r = direction_test(&s.data.column(0), &s.data.column(1), cfg, opts, seed)?;
                Ok(r.decision.is_correct(s.truth))
            });
            let secs = started.elapsed().as_secs_f64();
            match res {
                Ok(c) => (c, false, secs),
                Err(e) => {
                    log::warn!("{} n={n} seed={seed}: {e}", kind.name());
                    (false, true, secs)
                }
            }
        })
        .collect();
    let correct = runs.iter().filter(|r| r.0).count();
    let failed = runs.iter().filter(|r| r.1).count();
    let times: Vec<f64> = runs.iter().map(|r| r.2).collect();
    Ok(SimulationSummary {
        kind,
        n,
        repetitions,
        correct,
        failed,
        accuracy: correct as f64 / repetitions as f64,
        ci95: stats::wilson95(correct, repetitions),
        mean_runtime_secs: stats::mean(&times),
        base_seed,
    })
}
