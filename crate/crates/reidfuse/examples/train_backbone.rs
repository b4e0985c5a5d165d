//! Train the desk-scale CNN backbone with triplet loss on synthetic data.
//!
//! Usage: cargo run --example train_backbone

use reidfuse::backbone::{BackboneKind, CnnMidConfig};
use reidfuse::metric::{train, CheckpointConfig, SamplerConfig, TrainConfig};
use reidfuse::synth::make_synthetic_dataset;

fn main() {
    let out = std::path::PathBuf::from("target/example-output/train_backbone");
    let manifest = make_synthetic_dataset(&out, 10, 8, 2, 7, 64).expect("generation succeeds");

    let config = CheckpointConfig {
        cnn_mid: CnnMidConfig::toy(),
        sampler: SamplerConfig {
            p: 3,
            k: 4,
            seed: 0,
        },
        train: TrainConfig {
            epochs: 15,
            backbone: BackboneKind::CnnMid,
            seed: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    println!(
        "training {} (P={}, K={}, lr={}, weight decay={})",
        config.train.backbone,
        config.sampler.p,
        config.sampler.k,
        config.train.learning_rate,
        config.train.weight_decay
    );

    let run = train(&manifest, &out, &config).expect("training succeeds");

    println!(
        "{} steps over {} epochs",
        run.history.len(),
        config.train.epochs
    );
    for epoch in [0, 4, 9, 14] {
        let losses: Vec<f64> = run
            .history
            .iter()
            .filter(|h| h.epoch == epoch)
            .map(|h| h.loss)
            .collect();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        println!("  epoch {epoch:>2}: mean loss {mean:.4}");
    }
    println!(
        "embedding width D = {} ({} semantic + {} global)",
        run.config.cnn_mid.embed_dim(),
        run.config.cnn_mid.semantic_dim(),
        run.config.cnn_mid.global_dim()
    );
}
