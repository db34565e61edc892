use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use rand::Rng;
use serde_json::json;

use causal_flow::data_io::{load_csv, load_pairs, save_flow, write_csv};
use causal_flow::discovery::{
    batch_direction_test, direction_test, simulation_benchmark, Decision, Direction,
    DirectionOptions,
};
use causal_flow::flow::Ordering;
use causal_flow::noise::{seeded_rng, Stream};
use causal_flow::sem_sim::{
    draw_alpha, generate_bivariate, generate_toy4, simulate_pair, BivariateKind,
};
use causal_flow::training::{fit_with_holdout, split, DataMatrix};

use crate::manifest::Run;
use crate::{CliError, Context, TrainArgs};

/// Resolves a column given by header name or 1-based index.
pub fn resolve_column(data: &DataMatrix, spec: &str) -> Result<usize, CliError> {
    if let Some(names) = data.column_names() {
        if let Some(j) = names.iter().position(|n| n == spec) {
            return Ok(j);
        }
    }
    match spec.parse::<usize>() {
        Ok(j) if j >= 1 && j <= data.n_cols() => Ok(j - 1),
        _ => Err(CliError::Usage(format!(
            "no column {spec:?} (give a header name or an index from 1 to {})",
            data.n_cols()
        ))),
    }
}

pub fn column_label(data: &DataMatrix, j: usize) -> String {
    data.column_names()
        .map(|n| n[j].clone())
        .unwrap_or_else(|| format!("x{}", j + 1))
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    #[arg(long)]
    input: PathBuf,
    /// The file has no header row.
    #[arg(long)]
    no_header: bool,
    /// Candidate cause column (name or 1-based index).
    #[arg(long, default_value = "1")]
    x1_col: String,
    #[arg(long, default_value = "2")]
    x2_col: String,
    #[arg(long, default_value_t = 0.5)]
    test_fraction: f64,
    /// Half-width of the undecided band around R = 0.
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    #[command(flatten)]
    train: TrainArgs,
}

pub fn discover(ctx: &Context, a: &DiscoverArgs) -> Result<(), CliError> {
    let cfg = a.train.resolve(ctx.seed)?;
    let data = load_csv(&a.input, !a.no_header)?;
    let (j1, j2) = (
        resolve_column(&data, &a.x1_col)?,
        resolve_column(&data, &a.x2_col)?,
    );
    if j1 == j2 {
        return Err(CliError::Usage(
            "x1 and x2 must be different columns".into(),
        ));
    }
    let opts = DirectionOptions {
        test_fraction: a.test_fraction,
        tau: a.tau,
    };
    let mut run = Run::start(&ctx.out, "discover", ctx.seed)?;
    run.set_config(&json!({ "train": cfg, "direction": opts, "input": a.input }));
    let result = direction_test(&data.column(j1), &data.column(j2), &cfg, &opts, ctx.seed)?;
    let (l1, l2) = (column_label(&data, j1), column_label(&data, j2));
    run.write_json(
        "direction.json",
        &json!({ "x1": l1, "x2": l2, "input": a.input, "result": result }),
    )?;
    run.finish()?;
    let verdict = match result.decision {
        Decision::X1CausesX2 => format!("{l1} -> {l2}"),
        Decision::X2CausesX1 => format!("{l2} -> {l1}"),
        Decision::Undecided => "undecided".to_string(),
    };
    println!(
        "{verdict}  (R = {:.6}, ll({l1}->{l2}) = {:.6}, ll({l2}->{l1}) = {:.6})",
        result.r, result.ll_fwd, result.ll_rev
    );
    if result.decision == Decision::Undecided {
        return Err(CliError::Undecided);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimKind {
    Pair(BivariateKind),
    Toy4,
}

impl std::str::FromStr for SimKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "toy4" {
            return Ok(SimKind::Toy4);
        }
        s.parse::<BivariateKind>()
            .map(SimKind::Pair)
            .map_err(|_| format!("unknown kind {s:?} (linear, cubic, neural_net, toy4)"))
    }
}

fn parse_direction(s: &str) -> Result<Direction, String> {
    match s {
        "1->2" | "forward" => Ok(Direction::Forward),
        "2->1" | "backward" => Ok(Direction::Backward),
        _ => Err(format!("direction must be 1->2 or 2->1, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// linear, cubic, neural_net or toy4.
    #[arg(long)]
    kind: SimKind,
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Mechanism coefficient; drawn from +-[0.5, 1.5] when absent.
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    /// Causal direction of a pair (1->2 or 2->1); random when absent.
    #[arg(long, value_parser = parse_direction)]
    direction: Option<Direction>,
}

pub fn simulate(ctx: &Context, a: &SimulateArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let mut run = Run::start(&ctx.out, "simulate", ctx.seed)?;
    let (data, truth) = match a.kind {
        SimKind::Toy4 => {
            let mut rng = seeded_rng(ctx.seed, Stream::Data);
            let data = generate_toy4(a.n, &mut rng)?;
            let truth = json!({
                "kind": "toy4",
                "n": a.n,
                "seed": ctx.seed,
                "equations": ["x1 = n1", "x2 = n2", "x3 = x1 + x2^3 / 2 + n3", "x4 = x1^2 / 2 - x2 + n4"],
                "noise": "laplace",
            });
            (data, truth)
        }
        SimKind::Pair(kind) => {
            let sample = if a.alpha.is_none() && a.direction.is_none() {
                simulate_pair(kind, a.n, ctx.seed)?
            } else {
                let mut rng = seeded_rng(ctx.seed, Stream::Data);
                let alpha = a.alpha.unwrap_or_else(|| draw_alpha(&mut rng));
                let direction = a.direction.unwrap_or_else(|| {
                    if rng.random::<bool>() {
                        Direction::Forward
                    } else {
                        Direction::Backward
                    }
                });
                generate_bivariate(kind, alpha, a.n, direction, &mut rng)?
            };
            let truth = json!({
                "kind": kind,
                "n": a.n,
                "seed": ctx.seed,
                "alpha": sample.alpha,
                "direction": sample.truth,
                "noise": "laplace",
            });
            (
                sample
                    .data
                    .with_column_names(vec!["x1".into(), "x2".into()])?,
                truth,
            )
        }
    };
    write_csv(&data, &run.path("data.csv"))?;
    run.record(&run.path("data.csv"));
    run.write_json("truth.json", &truth)?;
    run.set_config(&json!({ "kind": format!("{:?}", a.kind), "n": a.n, "alpha": a.alpha, "direction": a.direction }));
    run.finish()?;
    println!(
        "wrote {} rows to {}",
        data.n_rows(),
        run_path(ctx, "data.csv")
    );
    Ok(())
}

fn run_path(ctx: &Context, name: &str) -> String {
    ctx.out.join(name).display().to_string()
}

#[derive(Debug, Args)]
pub struct SimBenchArgs {
    /// linear, cubic, neural_net or all.
    #[arg(long, default_value = "all")]
    kind: String,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "25,50,75,100,150,250,500"
    )]
    n_grid: Vec<usize>,
    #[arg(long, default_value_t = 250)]
    reps: usize,
    #[arg(long, default_value_t = 0.5)]
    test_fraction: f64,
    #[command(flatten)]
    train: TrainArgs,
}

pub fn sim_bench(ctx: &Context, a: &SimBenchArgs) -> Result<(), CliError> {
    let kinds: Vec<BivariateKind> = if a.kind == "all" {
        BivariateKind::ALL.to_vec()
    } else {
        vec![a
            .kind
            .parse()
            .map_err(|e: causal_flow::Error| CliError::Usage(e.to_string()))?]
    };
    if a.n_grid.is_empty() || a.reps == 0 {
        return Err(CliError::Usage(
            "need a non-empty --n-grid and --reps >= 1".into(),
        ));
    }
    let cfg = a.train.resolve(ctx.seed)?;
    let opts = DirectionOptions {
        test_fraction: a.test_fraction,
        ..DirectionOptions::default()
    };
    let mut run = Run::start(&ctx.out, "sim-bench", ctx.seed)?;
    run.set_config(&json!({ "train": cfg, "direction": opts, "kinds": kinds, "n_grid": a.n_grid, "reps": a.reps }));
    let mut csv =
        String::from("kind,n,reps,correct,failed,accuracy,ci_low,ci_high,mean_runtime_secs\n");
    let mut rows = Vec::new();
    for &kind in &kinds {
        for &n in &a.n_grid {
            let s = simulation_benchmark(kind, n, a.reps, ctx.seed, &cfg, &opts)?;
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{}",
                kind.name(),
                n,
                s.repetitions,
                s.correct,
                s.failed,
                s.accuracy,
                s.ci95.0,
                s.ci95.1,
                s.mean_runtime_secs
            );
            println!(
                "{:<10} N={:<4} accuracy {:.3} [{:.3}, {:.3}]  ({} reps, {:.2}s each)",
                kind.name(),
                n,
                s.accuracy,
                s.ci95.0,
                s.ci95.1,
                s.repetitions,
                s.mean_runtime_secs
            );
            rows.push(s);
        }
    }
    run.write("sim_bench.csv", csv.as_bytes())?;
    run.write_json("sim_bench.json", &rows)?;
    run.finish()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    /// Directory holding pairNNNN.txt files.
    #[arg(long)]
    dir: PathBuf,
    /// Meta file; defaults to DIR/pairmeta.txt.
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Only run the first N scalar pairs.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    #[command(flatten)]
    train: TrainArgs,
}

pub fn pairs(ctx: &Context, a: &PairsArgs) -> Result<(), CliError> {
    let cfg = a.train.resolve(ctx.seed)?;
    let meta = a.meta.clone().unwrap_or_else(|| a.dir.join("pairmeta.txt"));
    let mut loaded = load_pairs(&a.dir, &meta)?;
    let subset_size = loaded.pairs.len();
    if let Some(limit) = a.limit {
        loaded.pairs.truncate(limit);
    }
    let opts = DirectionOptions {
        test_fraction: a.test_fraction,
        tau: a.tau,
    };
    let mut run = Run::start(&ctx.out, "pairs", ctx.seed)?;
    run.set_config(
        &json!({ "train": cfg, "direction": opts, "dir": a.dir, "meta": meta, "limit": a.limit }),
    );
    let report = batch_direction_test(&loaded.pairs, &cfg, &opts, ctx.seed)?;

    let mut csv =
        String::from("id,truth,decision,r,ll_fwd,ll_rev,correct,weight,runtime_secs,error\n");
    for o in &report.outcomes {
        let (decision, r, f, b) = match &o.result {
            Some(res) => (
                res.decision.to_string(),
                res.r.to_string(),
                res.ll_fwd.to_string(),
                res.ll_rev.to_string(),
            ),
            None => (String::new(), String::new(), String::new(), String::new()),
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            o.id,
            o.truth.map(|t| t.to_string()).unwrap_or_default(),
            decision,
            r,
            f,
            b,
            o.correct.map(|c| c.to_string()).unwrap_or_default(),
            o.weight.map(|w| w.to_string()).unwrap_or_default(),
            o.runtime_secs,
            o.error.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    run.write("pairs.csv", csv.as_bytes())?;
    run.write_json(
        "pairs.json",
        &json!({
            "scalar_pairs": subset_size,
            "evaluated": report.outcomes.len(),
            "skipped_multivariate": loaded.skipped_multivariate,
            "skipped_unusable": loaded.skipped_unusable,
            "report": report,
        }),
    )?;
    run.note("scalar_pairs", subset_size);
    run.finish()?;
    let correct = report
        .outcomes
        .iter()
        .filter(|o| o.correct == Some(true))
        .count();
    println!(
        "pairs evaluated: {} of {} scalar pairs ({} multivariate skipped)",
        report.outcomes.len(),
        subset_size,
        loaded.skipped_multivariate.len()
    );
    match (report.accuracy, report.weighted_accuracy) {
        (Some(acc), Some(w)) => println!(
            "accuracy {acc:.3} ({correct}/{}), weighted {w:.3}",
            report.n_labeled
        ),
        _ => println!("no labeled pairs"),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    no_header: bool,
    /// Variable ordering, causes first: comma-separated names or 1-based indices.
    /// Defaults to the column order.
    #[arg(long, value_delimiter = ',')]
    ordering: Option<Vec<String>>,
    /// Hold out this fraction of rows and report their log-likelihood.
    #[arg(long)]
    holdout_fraction: Option<f64>,
    #[command(flatten)]
    train: TrainArgs,
}

pub fn fit(ctx: &Context, a: &FitArgs) -> Result<(), CliError> {
    let cfg = a.train.resolve(ctx.seed)?;
    let data = load_csv(&a.input, !a.no_header)?;
    let ordering = match &a.ordering {
        Some(cols) => {
            let perm = cols
                .iter()
                .map(|c| resolve_column(&data, c.trim()))
                .collect::<Result<Vec<_>, _>>()?;
            Ordering::new(perm)?
        }
        None => Ordering::identity(data.n_cols()),
    };
    if ordering.dim() != data.n_cols() {
        return Err(CliError::Usage(format!(
            "ordering names {} variables, data has {}",
            ordering.dim(),
            data.n_cols()
        )));
    }
    let (train, holdout) = match a.holdout_fraction {
        Some(f) => {
            let (tr, te) = split(&data, f, ctx.seed)?;
            (tr, Some(te))
        }
        None => (data.clone(), None),
    };
    let mut run = Run::start(&ctx.out, "fit", ctx.seed)?;
    run.set_config(&json!({ "train": cfg, "input": a.input, "ordering": ordering.perm(), "holdout_fraction": a.holdout_fraction }));
    let (fitted, report) = fit_with_holdout(&train, holdout.as_ref(), ordering.clone(), &cfg)?;
    let names: Vec<String> = (0..data.n_cols()).map(|j| column_label(&data, j)).collect();
    let meta = json!({
        "column_names": names,
        "ordering_names": ordering.perm().iter().map(|&j| names[j].clone()).collect::<Vec<_>>(),
        "config": cfg,
        "seed": ctx.seed,
        "n_train": train.n_rows(),
        "final_train_log_lik": report.final_train_log_lik,
        "held_out_log_lik": report.held_out_log_lik,
        "input": a.input,
    });
    let path = run.path("flow.json");
    save_flow(&fitted, &path, Some(meta))?;
    run.record(&path);
    run.write_json("train_report.json", &report)?;
    run.finish()?;
    print!(
        "fitted {} layers on {} rows: train log-lik {:.6}",
        cfg.flow_layers,
        train.n_rows(),
        report.final_train_log_lik
    );
    match report.held_out_log_lik {
        Some(h) => println!(", held-out {h:.6}"),
        None => println!(),
    }
    println!("saved {}", path.display());
    Ok(())
}
