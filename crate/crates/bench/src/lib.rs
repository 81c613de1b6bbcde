//! Fixtures shared by the benchmarks.

use nsft_core::experiment::{caption_context, held_out_scenes, ExperimentConfig};
use nsft_core::model::{InputContext, ModelParams};
use nsft_core::train::{prepare_examples, ConstructOptions, TrainExample};
use nsft_core::world::make_preference_dataset;

/// Untrained model of the experiment's default size.
pub fn experiment_model() -> ModelParams {
    ModelParams::init(ExperimentConfig::default().model, 0).expect("default model config is valid")
}

pub fn examples(n: usize) -> Vec<TrainExample> {
    let samples = make_preference_dataset(n, 0).expect("dataset");
    prepare_examples(&samples, &ConstructOptions::default()).expect("construction")
}

pub fn caption_contexts(n: usize) -> Vec<InputContext> {
    held_out_scenes(n, 1).iter().map(caption_context).collect()
}
