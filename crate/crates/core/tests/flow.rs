mod checks;

use bgdensity::feature_store::FeatureDataset;
use bgdensity::flow::{train_with_validation, TrainConfig, LN_2PI};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn fresh_flow_is_standard_normal() {
    checks::flow_identity_closed_form().unwrap();
}

#[test]
fn inverse_undoes_forward() {
    checks::flow_round_trip(&[2, 8, 64], 100).unwrap();
}

#[test]
fn logdet_matches_numeric_jacobian() {
    checks::flow_logdet_fd(6).unwrap();
}

#[test]
fn gradients_match_central_differences() {
    checks::flow_gradients_fd().unwrap();
}

fn normal_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 128,
        max_epochs: 30,
        patience: 5,
        chain_length: 4,
        hidden_width: 16,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn learns_a_standard_normal() {
    let train = FeatureDataset::from_vectors(0, 2, &normal_rows(4000, 2, 1)).unwrap();
    let val = FeatureDataset::from_vectors(0, 2, &normal_rows(500, 2, 2)).unwrap();
    let (model, _) = train_with_validation(&train, &val, &quick_config(0)).unwrap();
    let nll = model.mean_nll(&normal_rows(5000, 2, 3)).unwrap();
    // Entropy of the 2-D standard normal: ln(2 pi) + 1.
    let entropy = LN_2PI + 1.0;
    assert!((nll - entropy).abs() < 0.1, "nll {nll} vs {entropy}");
}

#[test]
fn training_is_deterministic_per_seed() {
    let train = FeatureDataset::from_vectors(0, 3, &normal_rows(800, 3, 4)).unwrap();
    let val = FeatureDataset::from_vectors(0, 3, &normal_rows(200, 3, 5)).unwrap();
    let cfg = TrainConfig { max_epochs: 4, ..quick_config(9) };
    let (a, log_a) = train_with_validation(&train, &val, &cfg).unwrap();
    let (b, log_b) = train_with_validation(&train, &val, &cfg).unwrap();
    assert_eq!(a.parameters(), b.parameters());
    assert_eq!(log_a.to_csv(), log_b.to_csv());
    let (c, _) = train_with_validation(&train, &val, &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.parameters(), c.parameters());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_holds_for_random_models(dim in 2usize..12, seed in 0u64..1000, scale in 0.1f64..4.0) {
        let model = checks::random_model(dim, 8, 16, seed, 0.1);
        let x: Vec<f64> = normal_rows(1, dim, seed)[0].iter().map(|v| v * scale).collect();
        let (z, ld) = model.forward(&x).unwrap();
        let (back, ild) = model.inverse_with_logdet(&z).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!((ld + ild).abs() < 1e-9 * ld.abs().max(1.0));
    }

    #[test]
    fn log_prob_is_change_of_variables(dim in 2usize..10, seed in 0u64..1000) {
        let model = checks::random_model(dim, 4, 8, seed, 0.2);
        let x = &normal_rows(1, dim, seed + 1)[0];
        let (z, ld) = model.forward(x).unwrap();
        let want = bgdensity::flow::standard_normal_log_density(&z) + ld;
        prop_assert_eq!(model.log_prob(x).unwrap(), want);
    }
}
