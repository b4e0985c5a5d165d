//! Score ranked retrieval lists with mAP and CMC rank-k.
//!
//! Usage: cargo run --example evaluate_retrieval

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reidfuse::eval::{evaluate, report_table, EvalProtocol};
use reidfuse::fusion::{distance_matrix_f64, rank_all};
use reidfuse::manifest::{ImageRecord, Split};

fn main() {
    // A small labeled instance with noisy per-identity embeddings: 6 query
    // vehicles, 30 gallery images, two cameras.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dim = 8;
    let identity_center = |v: usize| -> Vec<f64> {
        let mut c = ChaCha8Rng::seed_from_u64(100 + v as u64);
        (0..dim).map(|_| c.random_range(-1.0..1.0)).collect()
    };

    let mut queries = Vec::new();
    let mut q_emb = Array2::<f64>::zeros((6, dim));
    for v in 0..6 {
        queries.push(rec(&format!("q{v}"), v, "cam0", Split::Query));
        for (c, center) in identity_center(v).iter().enumerate() {
            q_emb[[v, c]] = center + rng.random_range(-0.6..0.6);
        }
    }
    let mut gallery = Vec::new();
    let mut g_emb = Array2::<f64>::zeros((30, dim));
    for i in 0..30 {
        let v = i % 6;
        // each identity alternates cameras across its gallery copies
        let camera = if (i / 6) % 2 == 0 { "cam1" } else { "cam0" };
        gallery.push(rec(&format!("g{i}"), v, camera, Split::Gallery));
        for (c, center) in identity_center(v).iter().enumerate() {
            g_emb[[i, c]] = center + rng.random_range(-0.6..0.6);
        }
    }

    let distances = distance_matrix_f64(q_emb.view(), g_emb.view()).unwrap();
    let ids: Vec<String> = queries.iter().map(|q| q.image_id.clone()).collect();
    let rankings = rank_all(&ids, &distances).unwrap();

    let protocol = EvalProtocol::default();
    let q_refs: Vec<&ImageRecord> = queries.iter().collect();
    let g_refs: Vec<&ImageRecord> = gallery.iter().collect();
    let report = evaluate(&q_refs, &g_refs, &rankings, &protocol, "noisy-clusters").unwrap();

    print!("{}", report_table(&report));
    println!("\nper-query breakdown:");
    for q in &report.per_query {
        println!(
            "  {:<4} AP {:.3}  first match at rank {}",
            q.query_id, q.ap, q.first_match_rank
        );
    }
}

fn rec(id: &str, vehicle: usize, camera: &str, split: Split) -> ImageRecord {
    ImageRecord {
        image_id: id.to_string(),
        path: std::path::PathBuf::from(format!("{id}.png")),
        vehicle_id: format!("v{vehicle}"),
        camera_id: camera.to_string(),
        split,
    }
}
