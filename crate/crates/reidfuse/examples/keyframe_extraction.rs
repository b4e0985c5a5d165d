//! Shot-boundary detection on a synthetic frame sequence.
//!
//! Usage: cargo run --example keyframe_extraction

use image::{Rgb, RgbImage};
use reidfuse::keyframe::{detect_shot_boundaries, extract_keyframes, KeyframeConfig};

fn main() {
    // Three shots with abrupt color cuts, 8 frames each, mild sensor noise.
    let palette = [[30u8, 60, 190], [200, 50, 30], [40, 190, 80]];
    let mut frames = Vec::new();
    for (shot, base) in palette.iter().enumerate() {
        for f in 0..8 {
            let mut img = RgbImage::from_pixel(64, 64, Rgb(*base));
            for (i, px) in img.pixels_mut().enumerate() {
                let jitter = ((i * 7 + f * 13 + shot) % 9) as i16 - 4;
                for c in 0..3 {
                    px.0[c] = (px.0[c] as i16 + jitter).clamp(0, 255) as u8;
                }
            }
            frames.push(img);
        }
    }

    let config = KeyframeConfig::default();
    println!(
        "scanning {} frames (grid {}x{}, {} bins, threshold {:.2})",
        frames.len(),
        config.grid,
        config.grid,
        config.bins,
        config.threshold
    );

    let boundaries = detect_shot_boundaries(&frames, &config).expect("frames are valid");
    println!("found {} shot boundaries:", boundaries.len());
    for b in &boundaries {
        println!("  frame {:>3}  score {:.4}", b.frame_index, b.score);
    }

    let keyframes = extract_keyframes(&frames, &config).expect("frames are valid");
    let indices: Vec<usize> = keyframes.iter().map(|(i, _)| *i).collect();
    println!("keyframes (first frame of each shot): {indices:?}");
}
