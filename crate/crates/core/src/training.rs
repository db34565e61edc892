//! Maximum-likelihood fitting of flows: data containers, splitting,
//! standardization and the minibatch Adam loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffnet::{adam_step, Activation, AdamConfig, AdamState, ParamBlocks};
use crate::error::{Error, Result};
use crate::flow::{AffineFlow, BaseDistribution, ConditionerSpec, Ordering, ScalerDocument};
use crate::noise::{seeded_rng, Stream};
use crate::Flow;

/// Row-major matrix of finite observations.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    n_rows: usize,
    n_cols: usize,
    values: Vec<f64>,
    column_names: Option<Vec<String>>,
}

impl DataMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(rows.len() * n_cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n_cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} values, expected {n_cols}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Self::from_flat(rows.len(), n_cols, values)
    }

    pub fn from_columns(cols: &[&[f64]]) -> Result<Self> {
        let n_rows = cols.first().map_or(0, |c| c.len());
        if cols.iter().any(|c| c.len() != n_rows) {
            return Err(Error::invalid("columns have different lengths"));
        }
        let mut values = Vec::with_capacity(n_rows * cols.len());
        for i in 0..n_rows {
            values.extend(cols.iter().map(|c| c[i]));
        }
        Self::from_flat(n_rows, cols.len(), values)
    }

    pub fn from_flat(n_rows: usize, n_cols: usize, values: Vec<f64>) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::invalid(
                "data matrix must have at least one row and one column",
            ));
        }
        if values.len() != n_rows * n_cols {
            return Err(Error::invalid(
                "value count does not match the matrix shape",
            ));
        }
        if let Some(p) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value at row {}, column {}",
                p / n_cols,
                p % n_cols
            )));
        }
        Ok(DataMatrix {
            n_rows,
            n_cols,
            values,
            column_names: None,
        })
    }

    pub fn with_column_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_cols {
            return Err(Error::invalid(
                "column name count does not match the matrix",
            ));
        }
        self.column_names = Some(names);
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn column_names(&self) -> Option<&[String]> {
        self.column_names.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.n_cols)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(idx.len() * self.n_cols);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        let mut m = Self::from_flat(idx.len(), self.n_cols, values)?;
        m.column_names = self.column_names.clone();
        Ok(m)
    }

    /// New matrix with the columns rearranged: column `k` of the result is
    /// column `cols[k]` of `self`.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if cols.iter().any(|&c| c >= self.n_cols) {
            return Err(Error::invalid("column index out of range"));
        }
        let mut values = Vec::with_capacity(self.n_rows * cols.len());
        for r in self.rows() {
            values.extend(cols.iter().map(|&c| r[c]));
        }
        let mut m = Self::from_flat(self.n_rows, cols.len(), values)?;
        m.column_names = self
            .column_names
            .as_ref()
            .map(|n| cols.iter().map(|&c| n[c].clone()).collect());
        Ok(m)
    }

    fn map_rows(&self, mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let mut values = vec![0.0; self.values.len()];
        for (src, dst) in self.rows().zip(values.chunks_exact_mut(self.n_cols)) {
            f(src, dst);
        }
        DataMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            values,
            column_names: self.column_names.clone(),
        }
    }
}

/// Per-column affine standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity(d: usize) -> Self {
        Scaler {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Column means and population (n-divisor) standard deviations.
    pub fn fit(data: &DataMatrix) -> Result<Self> {
        let n = data.n_rows() as f64;
        let d = data.n_cols();
        let mut mean = vec![0.0; d];
        for r in data.rows() {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in data.rows() {
            for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(r) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        if let Some(j) = std
            .iter()
            .zip(&mean)
            .position(|(&s, &m)| !(s > 1e-12 * m.abs().max(1.0)))
        {
            return Err(Error::DegenerateData(format!(
                "column {j} has zero variance"
            )));
        }
        Ok(Scaler { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn scale_value(&self, j: usize, v: f64) -> f64 {
        (v - self.mean[j]) / self.std[j]
    }

    pub fn unscale_value(&self, j: usize, v: f64) -> f64 {
        v * self.std[j] + self.mean[j]
    }

    pub fn scale_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| self.scale_value(j, v))
            .collect()
    }

    pub fn unscale_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| self.unscale_value(j, v))
            .collect()
    }

    pub fn transform(&self, data: &DataMatrix) -> DataMatrix {
        data.map_rows(|src, dst| {
            for (j, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
                *d = self.scale_value(j, s);
            }
        })
    }

    pub fn inverse_transform(&self, data: &DataMatrix) -> DataMatrix {
        data.map_rows(|src, dst| {
            for (j, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
                *d = self.unscale_value(j, s);
            }
        })
    }

    /// `log |det|` of the map from original to standardized units.
    pub fn log_jacobian(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }

    pub fn to_document(&self) -> ScalerDocument {
        ScalerDocument {
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    pub fn from_document(doc: &ScalerDocument) -> Result<Self> {
        if doc.mean.len() != doc.std.len() || doc.std.iter().any(|&s| !(s > 0.0) || !s.is_finite())
        {
            return Err(Error::invalid("malformed scaler"));
        }
        Ok(Scaler {
            mean: doc.mean.clone(),
            std: doc.std.clone(),
        })
    }
}

/// Standardizes `train` and every matrix in `others` with statistics taken
/// from `train` alone.
pub fn standardize(
    train: &DataMatrix,
    others: &[&DataMatrix],
) -> Result<(DataMatrix, Vec<DataMatrix>, Scaler)> {
    if others.iter().any(|o| o.n_cols() != train.n_cols()) {
        return Err(Error::invalid("matrices have different column counts"));
    }
    let scaler = Scaler::fit(train)?;
    let scaled = others.iter().map(|o| scaler.transform(o)).collect();
    Ok((scaler.transform(train), scaled, scaler))
}

/// Row indices of a seeded random partition: `(train, test)`.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test fraction {test_fraction} must lie in (0, 1)"
        )));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test < 2 || n - n_test.min(n) < 2 {
        return Err(Error::invalid(format!(
            "{n} rows cannot be split into train and test parts of at least 2 rows each"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed, Stream::Split));
    let test = idx.split_off(n - n_test);
    Ok((idx, test))
}

/// Seeded disjoint train/test partition of the rows.
pub fn split(data: &DataMatrix, test_fraction: f64, seed: u64) -> Result<(DataMatrix, DataMatrix)> {
    let (tr, te) = split_indices(data.n_rows(), test_fraction, seed)?;
    Ok((data.select_rows(&tr)?, data.select_rows(&te)?))
}

/// Training hyperparameters. Every field has a default, so a JSON config file
/// only needs the fields it overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub flow_layers: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    /// `None` means `min(128, n_train)`.
    pub batch_size: Option<usize>,
    /// Initial learning rate; cosine-decayed to `lr_final` over all steps.
    pub lr: f64,
    pub lr_final: f64,
    pub seed: u64,
    pub standardize: bool,
    pub base: BaseDistribution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            flow_layers: 2,
            hidden: vec![10, 10],
            activation: Activation::LeakyRelu,
            epochs: 500,
            batch_size: None,
            lr: 1e-2,
            lr_final: 1e-4,
            seed: 0,
            standardize: true,
            base: BaseDistribution::Laplace,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.flow_layers == 0 {
            return Err(Error::invalid("flow_layers must be positive"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("hidden sizes must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.lr_final > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("learning rates must be positive"));
        }
        Ok(())
    }

    pub fn conditioner_spec(&self) -> ConditionerSpec {
        ConditionerSpec {
            hidden: self.hidden.clone(),
            activation: self.activation,
        }
    }

    /// Learning rate at `step` of `total` under cosine decay.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lr;
        }
        let frac = step as f64 / (total - 1) as f64;
        self.lr_final
            + 0.5 * (self.lr - self.lr_final) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// A flow together with the scaler mapping original units to the units it
/// was trained in.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedFlow {
    pub flow: Flow,
    pub scaler: Scaler,
}

impl FittedFlow {
    pub fn new(flow: Flow, scaler: Scaler) -> Result<Self> {
        if scaler.dim() != flow.dim() {
            return Err(Error::invalid("scaler dimension does not match the flow"));
        }
        Ok(FittedFlow { flow, scaler })
    }

    pub fn unscaled(flow: Flow) -> Self {
        let d = flow.dim();
        FittedFlow {
            flow,
            scaler: Scaler::identity(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    /// Log-density of `x` in original units.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        Ok(self.flow.log_prob(&self.scaler.scale_row(x))? + self.scaler.log_jacobian())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean train log-likelihood per epoch (original units), measured on each
    /// minibatch before its update.
    pub epoch_log_lik: Vec<f64>,
    pub final_train_log_lik: f64,
    pub held_out_log_lik: Option<f64>,
    pub wall_time_secs: f64,
    pub seed: u64,
}

/// Fits a flow with the given ordering by minibatch Adam on the mean
/// log-likelihood.
pub fn fit(
    data: &DataMatrix,
    ordering: Ordering,
    cfg: &TrainConfig,
) -> Result<(FittedFlow, TrainReport)> {
    fit_with_holdout(data, None, ordering, cfg)
}

/// [`fit`], additionally scoring `holdout` with the final flow.
pub fn fit_with_holdout(
    data: &DataMatrix,
    holdout: Option<&DataMatrix>,
    ordering: Ordering,
    cfg: &TrainConfig,
) -> Result<(FittedFlow, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    if data.n_rows() < 2 {
        return Err(Error::invalid("training needs at least 2 rows"));
    }
    if data.n_cols() != ordering.dim() {
        return Err(Error::invalid(format!(
            "data has {} columns, ordering has {} variables",
            data.n_cols(),
            ordering.dim()
        )));
    }
    let scaler = if cfg.standardize {
        Scaler::fit(data)?
    } else {
        Scaler::identity(data.n_cols())
    };
    let scaled = scaler.transform(data);
    let offset = scaler.log_jacobian();

    let mut rng = seeded_rng(cfg.seed, Stream::Training);
    let mut flow = AffineFlow::init(
        ordering,
        cfg.flow_layers,
        cfg.conditioner_spec(),
        cfg.base,
        &mut rng,
    )?;

    let n = scaled.n_rows();
    let batch = cfg.batch_size.unwrap_or(128).min(n);
    let batches_per_epoch = n.div_ceil(batch);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut adam = AdamState::new(
        &flow,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_log_lik = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        let mut acc = 0.0;
        for chunk in order.chunks(batch) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| scaled.row(i)).collect();
            let (mean, mut grad) = flow
                .log_prob_grad(&rows)
                .map_err(|_| Error::TrainingDiverged { epoch })?;
            acc += mean * rows.len() as f64;
            // Adam descends; negate to ascend the likelihood.
            for block in grad.blocks_mut() {
                block.iter_mut().for_each(|g| *g = -*g);
            }
            adam.set_lr(cfg.lr_at(step, total_steps));
            adam_step(&mut flow, &grad, &mut adam)
                .map_err(|_| Error::TrainingDiverged { epoch })?;
            step += 1;
        }
        let epoch_ll = acc / n as f64 + offset;
        if !epoch_ll.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        epoch_log_lik.push(epoch_ll);
    }

    let fitted = FittedFlow { flow, scaler };
    let final_train_log_lik = evaluate(&fitted, data).map_err(|_| Error::TrainingDiverged {
        epoch: cfg.epochs.saturating_sub(1),
    })?;
    let held_out_log_lik = holdout.map(|h| evaluate(&fitted, h)).transpose()?;
    let report = TrainReport {
        epoch_log_lik,
        final_train_log_lik,
        held_out_log_lik,
        wall_time_secs: started.elapsed().as_secs_f64(),
        seed: cfg.seed,
    };
    Ok((fitted, report))
}

/// Mean log-likelihood of the rows of `data`, in original units.
pub fn evaluate(fitted: &FittedFlow, data: &DataMatrix) -> Result<f64> {
    if data.n_cols() != fitted.dim() {
        return Err(Error::invalid(format!(
            "data has {} columns, flow dimension is {}",
            data.n_cols(),
            fitted.dim()
        )));
    }
    let mut total = 0.0;
    for r in data.rows() {
        total += fitted.log_prob(r)?;
    }
    Ok(total / data.n_rows() as f64)
}
