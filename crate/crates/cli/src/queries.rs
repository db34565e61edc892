use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;

use causal_flow::data_io::{load_flow, load_flow_metadata, write_csv};
use causal_flow::inference::{
    counterfactual_sweep, intervene as sample_intervention, intervention_sweep, linspace,
    InterventionQuery,
};
use causal_flow::training::FittedFlow;

use crate::manifest::Run;
use crate::{CliError, Context};

/// Evenly spaced values parsed from `lo:hi:n`, e.g. `-3:3:25`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Grid(Vec<f64>);

fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || format!("grid must look like lo:hi:n, got {s:?}");
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n == 0 || !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    Ok(Grid(linspace(lo, hi, n)))
}

struct Model {
    fitted: FittedFlow,
    names: Vec<String>,
}

impl Model {
    fn load(path: &Path) -> Result<Self, CliError> {
        let fitted = load_flow(path)?;
        let meta = load_flow_metadata(path)?;
        let names = meta
            .get("column_names")
            .and_then(|v| serde_json::from_value::<Vec<String>>(v.clone()).ok())
            .filter(|n| n.len() == fitted.dim())
            .unwrap_or_else(|| (1..=fitted.dim()).map(|j| format!("x{j}")).collect());
        Ok(Model { fitted, names })
    }

    fn variable(&self, spec: &str) -> Result<usize, CliError> {
        if let Some(j) = self.names.iter().position(|n| n == spec) {
            return Ok(j);
        }
        match spec.parse::<usize>() {
            Ok(j) if j >= 1 && j <= self.names.len() => Ok(j - 1),
            _ => Err(CliError::Usage(format!(
                "no variable {spec:?} (names: {}; or an index from 1 to {})",
                self.names.join(", "),
                self.names.len()
            ))),
        }
    }

    fn variables(&self, specs: &[String]) -> Result<Vec<usize>, CliError> {
        specs.iter().map(|s| self.variable(s)).collect()
    }

    /// Writes one two-column `alpha value` file per variable except `skip`.
    fn write_plot_data(
        &self,
        run: &mut Run,
        prefix: &str,
        skip: usize,
        rows: &[(f64, Vec<f64>)],
    ) -> Result<(), CliError> {
        for (j, name) in self.names.iter().enumerate() {
            if j == skip {
                continue;
            }
            let mut text = format!("# alpha {name}\n");
            for (alpha, values) in rows {
                let _ = writeln!(text, "{alpha} {}", values[j]);
            }
            run.write(&format!("{prefix}_{name}.dat"), text.as_bytes())?;
        }
        Ok(())
    }

    fn grid_csv(&self, value_prefix: &str, rows: &[(f64, Vec<f64>)]) -> String {
        let mut csv = String::from("alpha");
        for n in &self.names {
            let _ = write!(csv, ",{value_prefix}{n}");
        }
        csv.push('\n');
        for (alpha, values) in rows {
            let _ = write!(csv, "{alpha}");
            for v in values {
                let _ = write!(csv, ",{v}");
            }
            csv.push('\n');
        }
        csv
    }
}

#[derive(Debug, Args)]
pub struct InterveneArgs {
    /// Flow archive written by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// Intervened variable (name or 1-based index); must be a root.
    #[arg(long)]
    var: String,
    #[arg(
        long,
        allow_hyphen_values = true,
        required_unless_present = "alpha_grid",
        conflicts_with = "alpha_grid"
    )]
    alpha: Option<f64>,
    /// Sweep of values, lo:hi:n.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_grid)]
    alpha_grid: Option<Grid>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Additional root variables (repeatable).
    #[arg(long)]
    declare_root: Vec<String>,
}

pub fn intervene(ctx: &Context, a: &InterveneArgs) -> Result<(), CliError> {
    let model = Model::load(&a.model)?;
    let var = model.variable(&a.var)?;
    let roots = model.variables(&a.declare_root)?;
    let mut run = Run::start(&ctx.out, "intervene", ctx.seed)?;
    run.set_config(&json!({
        "model": a.model, "variable": model.names[var], "alpha": a.alpha, "alpha_grid": a.alpha_grid,
        "samples": a.samples, "declared_roots": a.declare_root,
    }));
    match (&a.alpha_grid, a.alpha) {
        (Some(grid), _) => {
            let grid = &grid.0;
            let rows = intervention_sweep(&model.fitted, var, grid, a.samples, ctx.seed, &roots)?;
            run.write(
                "intervention_grid.csv",
                model.grid_csv("mean_", &rows).as_bytes(),
            )?;
            model.write_plot_data(&mut run, "do_mean", var, &rows)?;
            println!(
                "do({} = alpha) over {} grid points, {} samples each",
                model.names[var],
                grid.len(),
                a.samples
            );
            for (alpha, means) in &rows {
                println!("  alpha {alpha:>8.4}: {}", fmt_vec(&model.names, means));
            }
        }
        (None, Some(alpha)) => {
            let q = InterventionQuery {
                variable: var,
                value: alpha,
                n_samples: a.samples,
                seed: ctx.seed,
                declared_roots: roots,
            };
            let samples =
                sample_intervention(&model.fitted, &q)?.with_column_names(model.names.clone())?;
            let means: Vec<f64> = (0..samples.n_cols())
                .map(|j| samples.column(j).iter().sum::<f64>() / samples.n_rows() as f64)
                .collect();
            let path = run.path("samples.csv");
            write_csv(&samples, &path)?;
            run.record(&path);
            run.write_json(
                "intervention.json",
                &json!({ "variable": model.names[var], "alpha": alpha, "n_samples": a.samples, "means": means }),
            )?;
            println!(
                "do({} = {alpha}): means {}",
                model.names[var],
                fmt_vec(&model.names, &means)
            );
        }
        (None, None) => unreachable!("clap requires --alpha or --alpha-grid"),
    }
    run.finish()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct CounterfactualArgs {
    #[arg(long)]
    model: PathBuf,
    /// Observed values, comma-separated, in column order.
    #[arg(long, allow_hyphen_values = true, value_delimiter = ',')]
    obs: Vec<f64>,
    #[arg(long)]
    var: String,
    #[arg(
        long,
        allow_hyphen_values = true,
        required_unless_present = "alpha_grid",
        conflicts_with = "alpha_grid"
    )]
    alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true, value_parser = parse_grid)]
    alpha_grid: Option<Grid>,
    #[arg(long)]
    declare_root: Vec<String>,
}

pub fn counterfactual(ctx: &Context, a: &CounterfactualArgs) -> Result<(), CliError> {
    let model = Model::load(&a.model)?;
    let var = model.variable(&a.var)?;
    let roots = model.variables(&a.declare_root)?;
    if a.obs.len() != model.names.len() {
        return Err(CliError::Usage(format!(
            "--obs has {} values, the model has {} variables",
            a.obs.len(),
            model.names.len()
        )));
    }
    let grid = match (&a.alpha_grid, a.alpha) {
        (Some(g), _) => g.0.clone(),
        (None, Some(alpha)) => vec![alpha],
        (None, None) => unreachable!("clap requires --alpha or --alpha-grid"),
    };
    let mut run = Run::start(&ctx.out, "counterfactual", ctx.seed)?;
    run.set_config(&json!({
        "model": a.model, "observed": a.obs, "variable": model.names[var], "alpha": a.alpha,
        "alpha_grid": a.alpha_grid, "declared_roots": a.declare_root,
    }));
    let rows = counterfactual_sweep(&model.fitted, &a.obs, var, &grid, &roots)?;
    if a.alpha_grid.is_some() {
        run.write(
            "counterfactual_grid.csv",
            model.grid_csv("", &rows).as_bytes(),
        )?;
        model.write_plot_data(&mut run, "counterfactual", var, &rows)?;
        println!(
            "{} <- alpha over {} grid points",
            model.names[var],
            grid.len()
        );
        for (alpha, x) in &rows {
            println!("  alpha {alpha:>8.4}: {}", fmt_vec(&model.names, x));
        }
    } else {
        let (alpha, x) = &rows[0];
        run.write_json(
            "counterfactual.json",
            &json!({ "observed": a.obs, "variable": model.names[var], "alpha": alpha, "prediction": x }),
        )?;
        println!(
            "{} <- {alpha}: {}",
            model.names[var],
            fmt_vec(&model.names, x)
        );
    }
    run.finish()?;
    Ok(())
}

fn fmt_vec(names: &[String], v: &[f64]) -> String {
    names
        .iter()
        .zip(v)
        .map(|(n, x)| format!("{n}={x:.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}
