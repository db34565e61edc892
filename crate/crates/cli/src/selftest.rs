use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use causal_flow::diffnet::{
    mlp_backward, mlp_forward, Activation, MlpConfig, MlpParams, ParamBlocks,
};
use causal_flow::flow::{AffineFlow, BaseDistribution, ConditionerSpec, Ordering};

use crate::manifest::Run;
use crate::{CliError, Context};

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Random cases per gradient check.
    #[arg(long, default_value_t = 30)]
    cases: usize,
    /// Corrupts analytic gradients to show that the checks catch it.
    #[arg(long, hide = true)]
    inject_gradient_bug: bool,
}

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    max_error: f64,
    tolerance: f64,
    passed: bool,
}

const H: f64 = 1e-5;

/// Relative error; gradients smaller than `1e-2` are compared on an absolute scale of `1e-2`.
fn grad_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

fn corrupt(grads: &mut [f64], on: bool) {
    if on {
        if let Some(g) = grads.first_mut() {
            *g = *g * 1.01 + 1e-3;
        }
    }
}

fn random_flow(rng: &mut ChaCha8Rng, d: usize, layers: usize, jitter: f64) -> AffineFlow<f64> {
    let mut perm: Vec<usize> = (0..d).collect();
    for i in (1..d).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let spec = ConditionerSpec {
        hidden: vec![rng.random_range(2..=6)],
        activation: Activation::Tanh,
    };
    let mut flow = AffineFlow::init(
        Ordering::new(perm).expect("permutation"),
        layers,
        spec,
        BaseDistribution::Laplace,
        rng,
    )
    .expect("valid flow");
    if jitter > 0.0 {
        let mut p = flow.flatten();
        for v in p.iter_mut() {
            *v += rng.random_range(-jitter..jitter);
        }
        flow.assign_flat(&p);
    }
    flow
}

fn mlp_gradients(rng: &mut ChaCha8Rng, cases: usize, bug: bool) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let sizes = vec![
            rng.random_range(1..=4),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=3),
        ];
        let cfg = MlpConfig::new(sizes.clone(), Activation::Tanh).expect("valid sizes");
        let params: MlpParams<f64> = MlpParams::init(&cfg, rng);
        let input: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let up: Vec<f64> = (0..sizes[3]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (g, _) = mlp_backward(&params, &cfg, &input, &up).expect("shapes agree");
        let mut g = g.flatten();
        corrupt(&mut g, bug);
        let f = |p: &MlpParams<f64>| -> f64 {
            mlp_forward(p, &cfg, &input)
                .expect("shapes agree")
                .iter()
                .zip(&up)
                .map(|(a, b)| a * b)
                .sum()
        };
        let theta = params.flatten();
        for i in 0..theta.len() {
            let mut a = params.clone();
            let mut t = theta.clone();
            t[i] += H;
            a.assign_flat(&t);
            let mut b = params.clone();
            t[i] -= 2.0 * H;
            b.assign_flat(&t);
            worst = worst.max(grad_error(g[i], (f(&a) - f(&b)) / (2.0 * H)));
        }
    }
    worst
}

fn flow_gradients(rng: &mut ChaCha8Rng, cases: usize, bug: bool) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let d = rng.random_range(1..=3);
        let flow = random_flow(rng, d, 2, 0.3);
        let batch: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let (_, grads) = flow.log_prob_grad(&batch).expect("finite batch");
        let mut g = grads.flatten();
        corrupt(&mut g, bug);
        let mean_ll = |f: &AffineFlow<f64>| -> f64 {
            batch
                .iter()
                .map(|x| f.log_prob(x).expect("finite"))
                .sum::<f64>()
                / batch.len() as f64
        };
        let theta = flow.flatten();
        for i in 0..theta.len() {
            let mut a = flow.clone();
            let mut t = theta.clone();
            t[i] += H;
            a.assign_flat(&t);
            let mut b = flow.clone();
            t[i] -= 2.0 * H;
            b.assign_flat(&t);
            worst = worst.max(grad_error(g[i], (mean_ll(&a) - mean_ll(&b)) / (2.0 * H)));
        }
    }
    worst
}

fn roundtrip(rng: &mut ChaCha8Rng, probes: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let d = [1, 2, 4][rng.random_range(0..3)];
        let layers = rng.random_range(1..=3);
        let flow = random_flow(rng, d, layers, 0.0);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z = flow.forward(&x).expect("finite").z;
        let back = flow.inverse(&z).expect("finite");
        worst = back
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    }
    worst
}

fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap_or(c);
        a.swap(c, p);
        let piv = a[c][c];
        acc += piv.abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / piv;
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}

fn log_det(rng: &mut ChaCha8Rng, cases: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let flow = random_flow(rng, 4, 2, 0.3);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut jac = vec![vec![0.0; 4]; 4];
        for c in 0..4 {
            let mut xp = x.clone();
            xp[c] += H;
            let mut xm = x.clone();
            xm[c] -= H;
            let (zp, zm) = (
                flow.forward(&xp).expect("finite").z,
                flow.forward(&xm).expect("finite").z,
            );
            for r in 0..4 {
                jac[r][c] = (zp[r] - zm[r]) / (2.0 * H);
            }
        }
        let ld = flow.forward(&x).expect("finite").log_det;
        worst = worst.max((ld - log_abs_det(jac)).abs());
    }
    worst
}

fn normalization(rng: &mut ChaCha8Rng, cases: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let flow = random_flow(rng, 1, 2, 0.3);
        let xs = flow.sample(5000, rng).expect("n > 0");
        let (lo, hi) = xs
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), x| (l.min(x[0]), h.max(x[0])));
        let (a, b) = (lo - 2.0 * (hi - lo), hi + 2.0 * (hi - lo));
        let m = 200_000;
        let step = (b - a) / m as f64;
        let total: f64 = (0..=m)
            .map(|i| {
                let w = if i == 0 || i == m { 0.5 } else { 1.0 };
                w * flow.log_prob(&[a + step * i as f64]).expect("finite").exp()
            })
            .sum::<f64>()
            * step;
        worst = worst.max((total - 1.0).abs());
    }
    worst
}

pub fn run(ctx: &Context, a: &SelftestArgs) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let cases = a.cases.max(1);
    let mut checks = Vec::new();
    let mut add = |name, max_error: f64, tolerance| {
        checks.push(Check {
            name,
            max_error,
            tolerance,
            passed: max_error < tolerance,
        })
    };
    add(
        "mlp_gradient",
        mlp_gradients(&mut rng, cases, a.inject_gradient_bug),
        1e-4,
    );
    add(
        "flow_gradient",
        flow_gradients(&mut rng, cases, a.inject_gradient_bug),
        1e-4,
    );
    add("roundtrip", roundtrip(&mut rng, 20 * cases), 1e-8);
    add("log_det", log_det(&mut rng, cases), 1e-5);
    add("normalization", normalization(&mut rng, 3), 1e-2);

    for c in &checks {
        println!(
            "{:<14} max error {:.3e}  tolerance {:.0e}  {}",
            c.name,
            c.max_error,
            c.tolerance,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    let mut run = Run::start(&ctx.out, "selftest", ctx.seed)?;
    run.set_config(
        &serde_json::json!({ "cases": cases, "inject_gradient_bug": a.inject_gradient_bug }),
    );
    run.write_json("selftest.json", &checks)?;
    run.finish()?;
    if checks.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(CliError::SelftestFailed)
    }
}
