use causal_flow::data_io::DatasetPair;
use causal_flow::discovery::{
    batch_direction_test, direction_test, Decision, Direction, DirectionOptions,
};
use causal_flow::sem_sim::{generate_bivariate, simulate_pair, BivariateKind};
use causal_flow::training::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 60,
        ..TrainConfig::default()
    }
}

fn cubic_pair(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = generate_bivariate(
        BivariateKind::CubicNonlinear,
        0.8,
        n,
        Direction::Forward,
        &mut rng,
    )
    .unwrap();
    (s.data.column(0), s.data.column(1))
}

#[test]
fn statistic_is_exact_difference() {
    let (x1, x2) = cubic_pair(200, 1);
    let r = direction_test(&x1, &x2, &quick(), &DirectionOptions::default(), 3).unwrap();
    assert_eq!(r.r.to_bits(), (r.ll_fwd - r.ll_rev).to_bits());
    assert_eq!(r.decision, Decision::from_statistic(r.r, 0.0));
    assert_eq!(r.test_rows.len(), 100);
    assert_eq!(r.n_train, 100);
}

#[test]
fn both_models_share_the_split() {
    let (x1, x2) = cubic_pair(120, 2);
    let opts = DirectionOptions::default();
    let a = direction_test(&x1, &x2, &quick(), &opts, 9).unwrap();
    let b = direction_test(&x2, &x1, &quick(), &opts, 9).unwrap();
    assert_eq!(a.test_rows, b.test_rows);
}

#[test]
fn swapping_columns_mirrors_the_result() {
    for seed in 0..4 {
        let (x1, x2) = cubic_pair(150, 10 + seed);
        let opts = DirectionOptions::default();
        let a = direction_test(&x1, &x2, &quick(), &opts, seed).unwrap();
        let b = direction_test(&x2, &x1, &quick(), &opts, seed).unwrap();
        assert_eq!(a.ll_fwd.to_bits(), b.ll_rev.to_bits());
        assert_eq!(a.ll_rev.to_bits(), b.ll_fwd.to_bits());
        assert_eq!(a.decision.mirrored(), b.decision);
    }
}

#[test]
fn cubic_direction_is_found() {
    let opts = DirectionOptions::default();
    let mut correct = 0;
    for seed in 0..6 {
        let s = simulate_pair(BivariateKind::CubicNonlinear, 300, 50 + seed).unwrap();
        let r =
            direction_test(&s.data.column(0), &s.data.column(1), &quick(), &opts, seed).unwrap();
        correct += r.decision.is_correct(s.truth) as usize;
    }
    assert!(correct >= 5, "{correct}/6");
}

#[test]
fn tau_band_gives_undecided() {
    let (x1, x2) = cubic_pair(100, 4);
    let opts = DirectionOptions {
        tau: 1e9,
        ..DirectionOptions::default()
    };
    let r = direction_test(&x1, &x2, &quick(), &opts, 0).unwrap();
    assert_eq!(r.decision, Decision::Undecided);
    assert!(!r.decision.is_correct(Direction::Forward));
}

#[test]
fn batch_keeps_order_and_counts_failures() {
    let (x1, x2) = cubic_pair(100, 5);
    let good = DatasetPair::new("0001", x1.clone(), x2.clone())
        .unwrap()
        .with_truth(Direction::Forward);
    let swapped = good.swapped();
    let mut constant = DatasetPair::new("0003", x1.clone(), x2.clone())
        .unwrap()
        .with_truth(Direction::Forward);
    constant.x2 = vec![1.0; x1.len()];
    let unlabeled = DatasetPair::new("0004", x1, x2).unwrap();
    let pairs = vec![good, swapped, constant, unlabeled];
    let rep = batch_direction_test(&pairs, &quick(), &DirectionOptions::default(), 0).unwrap();
    let ids: Vec<&str> = rep.outcomes.iter().map(|o| o.id.as_str()).collect();
    assert_eq!(ids, ["0001", "0001", "0003", "0004"]);
    assert_eq!(rep.n_labeled, 3);
    assert!(rep.outcomes[2].error.is_some());
    assert_eq!(rep.outcomes[2].correct, Some(false));
    assert_eq!(rep.outcomes[3].correct, None);
    let hits = rep
        .outcomes
        .iter()
        .filter(|o| o.correct == Some(true))
        .count();
    assert_eq!(rep.accuracy, Some(hits as f64 / 3.0));

    let again = batch_direction_test(&pairs, &quick(), &DirectionOptions::default(), 0).unwrap();
    let rs = |b: &causal_flow::discovery::BatchReport| {
        b.outcomes
            .iter()
            .map(|o| o.result.as_ref().map(|r| r.r.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(rs(&rep), rs(&again));
}
