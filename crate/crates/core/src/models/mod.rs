//! Source classifier, image generator, batch-norm statistics and checkpoints.

pub mod checkpoint;
mod classifier;
mod generator;
mod stats;

pub use classifier::{ClassifierConfig, ClassifierTrace, SourceClassifier, TraceGrads, N_BLOCKS};
pub use generator::{Generator, GeneratorConfig, GeneratorTape};
pub use stats::{LayerStats, StatsKind};

/// Current-batch statistics at batch-norm layer `layer` of a trace.
pub fn current_stats<T: crate::nn::Scalar>(
    trace: &ClassifierTrace<T>,
    layer: usize,
) -> crate::Result<LayerStats<T>> {
    trace.current_stats(layer)
}
