#![allow(dead_code)]

use std::path::Path;

use bgdensity_pipeline::{gen_synthetic, synthetic_config, PipelineConfig};

/// A corpus small enough for every stage to finish in a few seconds.
pub fn small_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig { seed, ..synthetic_config() };
    cfg.synthetic.n_images = 24;
    cfg.synthetic.height = 64;
    cfg.synthetic.width = 64;
    cfg.synthetic.dim = 6;
    cfg.flow.max_epochs = 3;
    cfg.flow.chain_length = 2;
    cfg.flow.hidden_width = 8;
    cfg.bench.scenario = false;
    cfg
}

pub fn small_corpus(dir: &Path, seed: u64) -> PipelineConfig {
    gen_synthetic(&small_config(seed), dir).unwrap()
}
