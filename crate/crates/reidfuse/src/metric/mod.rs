//! Metric learning: identity-balanced sampling, batch-hard triplet loss, the
//! training loop, and the checkpoint container.

pub mod checkpoint;
pub mod sampler;
pub mod trainer;
pub mod triplet;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, load_pretrained, rebuild_backbone,
    save_checkpoint, CheckpointConfig, LoadedCheckpoint,
};
pub use sampler::{pk_sample_batch, pk_sample_from_groups, SamplerConfig};
pub use trainer::{
    extract_embeddings, loss_history_csv, softmax_cross_entropy, train, LrStep, StepLoss,
    TrainConfig, TrainRun,
};
pub use triplet::{
    batch_hard_triplet_loss, pairwise_distances, DistanceKind, TripletConfig, TripletVariant,
};
