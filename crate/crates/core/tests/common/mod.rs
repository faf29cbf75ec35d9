//! Small pretrained world shared by the integration tests.

#![allow(dead_code)]

use std::sync::OnceLock;

use editlab::corpus::WorldConfig;
use editlab::eval::{RunConfig, RunContext};
use editlab::model::{ToyModelConfig, TrainConfig};

pub fn tiny_config() -> RunConfig {
    RunConfig {
        critical_layers: vec![1, 2, 3],
        batch_size: 4,
        n_batches: 2,
        n_heldout: 4,
        analysis_facts: 6,
        scaling_values: vec![1, 4],
        world: WorldConfig { seed: 3, n_subjects: 24, n_relations: 4, n_objects: 4, n_background: 12, ..Default::default() },
        model: ToyModelConfig { d_model: 16, d_ffn: 32, n_layers: 4, n_heads: 2, max_seq: 32, ..Default::default() },
        train: TrainConfig { epochs: 20, ..Default::default() },
        ..RunConfig::default()
    }
}

pub fn tiny() -> &'static (RunConfig, RunContext) {
    static CTX: OnceLock<(RunConfig, RunContext)> = OnceLock::new();
    CTX.get_or_init(|| {
        let cfg = tiny_config();
        let ctx = RunContext::build(&cfg).expect("pretraining the tiny model");
        (cfg, ctx)
    })
}
