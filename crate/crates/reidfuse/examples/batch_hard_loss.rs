//! Batch-hard triplet loss on a hand-built P x K batch, with its gradient.
//!
//! Usage: cargo run --example batch_hard_loss

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reidfuse::metric::{batch_hard_triplet_loss, pairwise_distances, TripletConfig};

fn main() {
    // P=3 identities, K=4 instances: three overlapping clusters in the plane.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centers = [[0.0f64, 0.0], [1.0, 0.3], [0.3, 1.0]];
    let mut emb = Array2::<f64>::zeros((12, 2));
    let mut labels = Vec::new();
    for (id, center) in centers.iter().enumerate() {
        for k in 0..4 {
            let row = id * 4 + k;
            emb[[row, 0]] = center[0] + rng.random_range(-0.5..0.5);
            emb[[row, 1]] = center[1] + rng.random_range(-0.5..0.5);
            labels.push(id);
        }
    }

    let config = TripletConfig::default();
    let d = pairwise_distances(&emb).expect("finite embeddings");
    println!(
        "batch of {} embeddings, margin {}",
        emb.nrows(),
        config.margin
    );
    println!(
        "nearest cross-identity distance: {:.3}",
        (0..12)
            .flat_map(|a| (0..12)
                .filter(move |&b| labels_of(a) != labels_of(b))
                .map(move |b| (a, b)))
            .map(|(a, b)| d[[a, b]])
            .fold(f64::INFINITY, f64::min)
    );

    let (loss, grad) = batch_hard_triplet_loss(&emb, &labels, &config).expect("valid batch");
    println!("batch-hard loss: {loss:.4}");

    let active = grad
        .rows()
        .into_iter()
        .filter(|r| r.iter().any(|&v| v != 0.0))
        .count();
    println!("{active} of 12 embeddings receive gradient");
    println!(
        "gradient of the first anchor: [{:+.4}, {:+.4}]",
        grad[[0, 0]],
        grad[[0, 1]]
    );

    // One gradient step on the embeddings themselves shrinks the loss.
    let stepped = &emb - &(grad.mapv(|g| g * 0.5));
    let (after, _) = batch_hard_triplet_loss(&stepped, &labels, &config).expect("valid batch");
    println!("after one embedding-space step: {after:.4}");
}

fn labels_of(row: usize) -> usize {
    row / 4
}
