//! Extract per-branch embeddings for query and gallery, fuse them by
//! concatenation, and rank one query.
//!
//! Usage: cargo run --example extract_and_fuse

use reidfuse::backbone::{BackboneKind, CnnMidConfig, WinTransformerConfig};
use reidfuse::fusion::{distance_matrix, fuse_embeddings, rank_gallery};
use reidfuse::manifest::Split;
use reidfuse::metric::{extract_embeddings, train, CheckpointConfig, SamplerConfig, TrainConfig};
use reidfuse::synth::make_synthetic_dataset;

fn main() {
    let out = std::path::PathBuf::from("target/example-output/extract_and_fuse");
    let manifest = make_synthetic_dataset(&out, 8, 6, 2, 3, 64).expect("generation succeeds");

    let mut runs = Vec::new();
    for (backbone, seed) in [(BackboneKind::CnnMid, 1), (BackboneKind::Transformer, 2)] {
        let config = CheckpointConfig {
            cnn_mid: CnnMidConfig::toy(),
            transformer: WinTransformerConfig::toy(),
            sampler: SamplerConfig {
                p: 3,
                k: 3,
                seed: 0,
            },
            train: TrainConfig {
                epochs: 8,
                backbone,
                seed,
                ..Default::default()
            },
            ..Default::default()
        };
        println!("training {backbone} for {} epochs...", config.train.epochs);
        runs.push(train(&manifest, &out, &config).expect("training succeeds"));
    }

    let queries = manifest.split(Split::Query);
    let gallery = manifest.split(Split::Gallery);
    let mut query_sets = Vec::new();
    let mut gallery_sets = Vec::new();
    for run in &runs {
        query_sets.push(extract_embeddings(&run.backbone, &run.store, &queries, &out, 16).unwrap());
        gallery_sets
            .push(extract_embeddings(&run.backbone, &run.store, &gallery, &out, 16).unwrap());
    }

    let fused_q = fuse_embeddings(&query_sets[0], &query_sets[1]).expect("aligned ids");
    let fused_g = fuse_embeddings(&gallery_sets[0], &gallery_sets[1]).expect("aligned ids");
    println!(
        "fused query set: {} rows x {} dims (branches {} + {})",
        fused_q.count(),
        fused_q.dim(),
        fused_q.source_dims.0,
        fused_q.source_dims.1
    );

    let distances = distance_matrix(fused_q.matrix.view(), fused_g.matrix.view()).unwrap();
    let ranked = rank_gallery(&fused_q.ids[0], distances.row(0)).unwrap();
    println!("\ntop 5 gallery matches for query `{}`:", ranked.query_id);
    let query_vehicle = &queries[0].vehicle_id;
    for (pos, (&gi, dist)) in ranked
        .ordering
        .iter()
        .zip(&ranked.distances)
        .take(5)
        .enumerate()
    {
        let hit = if &gallery[gi].vehicle_id == query_vehicle {
            "match"
        } else {
            "     "
        };
        println!(
            "  {}. {:<14} distance {:>8.3}  {}",
            pos + 1,
            gallery[gi].image_id,
            dist,
            hit
        );
    }
}
