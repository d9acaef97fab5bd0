//! The fixed desk-scale timing scenario: flow versus exact kNN scoring of
//! one feature map, with random data standing in for trained artifacts.
//! Scoring cost depends only on the shapes, not on the parameter values.

use bgdensity::feature_store::FeatureMap;
use bgdensity::flow::{encode_model, FlowModel};
use bgdensity::knn_density::{encode_index, knn_score_map, KnnIndex};
use bgdensity::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::commands::{time_ms, BenchRow};
use crate::config::BenchSettings;

fn random_rows(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n * dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn scenario(s: &BenchSettings, k: usize, seed: u64) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stored: Vec<f64> = random_rows(s.scenario_vectors, s.scenario_dim, &mut rng).into_iter().map(f64::from).collect();
    let index = KnnIndex::from_rows(s.scenario_dim, stored.chunks(s.scenario_dim))?;
    let model = FlowModel::init(s.scenario_dim, s.scenario_chain, s.scenario_hidden, seed)?;
    let g = s.scenario_grid;
    let map = FeatureMap::new(0, g, g, s.scenario_dim, 1, random_rows(g * g, s.scenario_dim, &mut rng), "bench")?;

    let flow_ms = time_ms(s.repeats, || model.score_feature_map(&map).map(drop))?;
    let knn_ms = time_ms(s.repeats, || knn_score_map(&map, &index, k).map(drop))?;
    Ok(BenchRow {
        label: format!(
            "scenario n={} f={} grid={g}x{g} chain={} hidden={}",
            s.scenario_vectors, s.scenario_dim, s.scenario_chain, s.scenario_hidden
        ),
        flow_ms_per_image: Some(flow_ms),
        knn_ms_per_image: Some(knn_ms),
        flow_bytes: Some(encode_model(&model)?.len() as u64),
        knn_bytes: Some(encode_index(&index)?.len() as u64),
    })
}
