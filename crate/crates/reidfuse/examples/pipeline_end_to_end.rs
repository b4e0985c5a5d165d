//! The whole pipeline in one program: synthesize data, train both backbones,
//! extract and fuse embeddings, rank, evaluate, and render top-k panels.
//!
//! Usage: cargo run --example pipeline_end_to_end

use reidfuse::backbone::{BackboneKind, CnnMidConfig, WinTransformerConfig};
use reidfuse::eval::{evaluate, render_topk_grid, report_table, EvalProtocol};
use reidfuse::fusion::{distance_matrix, fuse_embeddings, rank_all};
use reidfuse::manifest::Split;
use reidfuse::metric::{extract_embeddings, train, CheckpointConfig, SamplerConfig, TrainConfig};
use reidfuse::synth::make_synthetic_dataset;

fn main() {
    let out = std::path::PathBuf::from("target/example-output/pipeline_end_to_end");
    let manifest = make_synthetic_dataset(&out, 10, 8, 2, 7, 64).expect("generation succeeds");
    println!(
        "dataset: {} images under {}",
        manifest.records.len(),
        out.display()
    );

    let mut runs = Vec::new();
    for (backbone, seed) in [(BackboneKind::CnnMid, 11), (BackboneKind::Transformer, 12)] {
        let config = CheckpointConfig {
            cnn_mid: CnnMidConfig::toy(),
            transformer: WinTransformerConfig::toy(),
            sampler: SamplerConfig::default(),
            train: TrainConfig {
                epochs: 12,
                backbone,
                seed,
                ..Default::default()
            },
            ..Default::default()
        };
        println!("training {backbone}...");
        let run = train(&manifest, &out, &config).expect("training succeeds");
        let last = run.history.last().unwrap();
        println!("  {} steps, final loss {:.4}", run.history.len(), last.loss);
        runs.push(run);
    }

    let queries = manifest.split(Split::Query);
    let gallery = manifest.split(Split::Gallery);
    let embed = |run: &reidfuse::metric::TrainRun, records: &[&reidfuse::manifest::ImageRecord]| {
        extract_embeddings(&run.backbone, &run.store, records, &out, 16).expect("extraction")
    };
    let fused_q = fuse_embeddings(&embed(&runs[0], &queries), &embed(&runs[1], &queries)).unwrap();
    let fused_g = fuse_embeddings(&embed(&runs[0], &gallery), &embed(&runs[1], &gallery)).unwrap();
    println!(
        "fused embeddings: {} + {} = {} dims",
        fused_q.source_dims.0,
        fused_q.source_dims.1,
        fused_q.dim()
    );

    let distances = distance_matrix(fused_q.matrix.view(), fused_g.matrix.view()).unwrap();
    let rankings = rank_all(&fused_q.ids, &distances).unwrap();
    let protocol = EvalProtocol::default();
    let report = evaluate(
        &queries,
        &gallery,
        &rankings,
        &protocol,
        "cnn_mid+transformer",
    )
    .unwrap();
    print!("{}", report_table(&report));

    // Panels for the first two queries: query thumb + top-10, green = match.
    let index = manifest.index();
    for scored in report.per_query.iter().take(2) {
        let ranking = rankings
            .iter()
            .find(|r| r.query_id == scored.query_id)
            .unwrap();
        let query_rec = index[scored.query_id.as_str()];
        let (relevant, valid) =
            reidfuse::eval::relevance_labels(query_rec, &gallery, &protocol).unwrap();
        let ranked: Vec<(std::path::PathBuf, bool)> = ranking
            .ordering
            .iter()
            .filter(|&&gi| valid[gi])
            .map(|&gi| (out.join(&gallery[gi].path), relevant[gi]))
            .collect();
        let panel = out.join(format!("topk_{}.png", scored.query_id));
        render_topk_grid(&out.join(&query_rec.path), &ranked, 10, &panel).unwrap();
        println!("panel: {}", panel.display());
    }
}
